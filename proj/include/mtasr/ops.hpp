#pragma once

#include <cstring>

#include "mtasr/tensor.hpp"

namespace mtasr {
namespace ops {

inline void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

// ---------------------------------------------------------------- elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  // Same shape, or b broadcast as a row vector over a 2-D a.
  if (a.shape() == b.shape()) {
    Tensor out(a.shape());
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& ov = out.data();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
    record(out, {a, b}, [a, b](TensorNode& self) {
      auto& ga = a.grad();
      auto& gb = b.grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        ga[i] += self.grad[i];
        gb[i] += self.grad[i];
      }
    });
    return out;
  }
  if (a.rank() == 2 && b.rank() == 1 && b.size() == a.cols()) {
    Tensor out(a.shape());
    const std::size_t R = a.rows(), C = a.cols();
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t c = 0; c < C; ++c)
        out.at(r, c) = a.at(r, c) + b.at(c);
    record(out, {a, b}, [a, b, R, C](TensorNode& self) {
      auto& ga = a.grad();
      auto& gb = b.grad();
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c) {
          ga[r * C + c] += self.grad[r * C + c];
          gb[c] += self.grad[r * C + c];
        }
    });
    return out;
  }
  throw ShapeError("add: incompatible shapes " + shape_str(a.shape()) +
                   " vs " + shape_str(b.shape()));
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape("sub", a, b);
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i)
    out.at(i) = a.at(i) - b.at(i);
  record(out, {a, b}, [a, b](TensorNode& self) {
    auto& ga = a.grad();
    auto& gb = b.grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      ga[i] += self.grad[i];
      gb[i] -= self.grad[i];
    }
  });
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape("mul", a, b);
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i)
    out.at(i) = a.at(i) * b.at(i);
  record(out, {a, b}, [a, b](TensorNode& self) {
    auto& ga = a.grad();
    auto& gb = b.grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      ga[i] += self.grad[i] * b.at(i);
      gb[i] += self.grad[i] * a.at(i);
    }
  });
  return out;
}

inline Tensor scale(const Tensor& a, double c) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out.at(i) = a.at(i) * c;
  record(out, {a}, [a, c](TensorNode& self) {
    auto& ga = a.grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      ga[i] += self.grad[i] * c;
  });
  return out;
}

inline Tensor sigmoid(const Tensor& a) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i)
    out.at(i) = 1.0 / (1.0 + std::exp(-a.at(i)));
  // Reads the activation back from self.data: capturing `out` would make
  // the node own its own backward_fn and leak the whole graph.
  record(out, {a}, [a](TensorNode& self) {
    auto& ga = a.grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      double s = self.data[i];
      ga[i] += self.grad[i] * s * (1.0 - s);
    }
  });
  return out;
}

inline Tensor tanh_act(const Tensor& a) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out.at(i) = std::tanh(a.at(i));
  record(out, {a}, [a](TensorNode& self) {
    auto& ga = a.grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      ga[i] += self.grad[i] * (1.0 - self.data[i] * self.data[i]);
  });
  return out;
}

// x * sigmoid(x)
inline Tensor swish(const Tensor& a) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    double s = 1.0 / (1.0 + std::exp(-a.at(i)));
    out.at(i) = a.at(i) * s;
  }
  record(out, {a}, [a](TensorNode& self) {
    auto& ga = a.grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      double x = a.at(i);
      double s = 1.0 / (1.0 + std::exp(-x));
      ga[i] += self.grad[i] * (s + x * s * (1.0 - s));
    }
  });
  return out;
}

// ------------------------------------------------------------------- matmul

namespace detail {
// C += A(m x k) * B(k x n), cache-friendly ikj order.
inline void gemm_acc(const double* A, const double* B, double* C,
                     std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = A + i * k;
    double* crow = C + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = B + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}
// C += A^T(m x k, stored k x m) * B(k x n)
inline void gemm_at_b(const double* A, const double* B, double* C,
                      std::size_t k, std::size_t m, std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* arow = A + p * m;
    const double* brow = B + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      double av = arow[i];
      if (av == 0.0) continue;
      double* crow = C + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}
// C += A(m x k) * B^T(k x n, stored n x k)
inline void gemm_a_bt(const double* A, const double* B, double* C,
                      std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = A + i * k;
    double* crow = C + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = B + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] += acc;
    }
  }
}
}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows())
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor out({m, n});
  detail::gemm_acc(a.data().data(), b.data().data(), out.data().data(), m, k,
                   n);
  record(out, {a, b}, [a, b, m, k, n](TensorNode& self) {
    // dA = dC * B^T ; dB = A^T * dC
    detail::gemm_a_bt(self.grad.data(), b.data().data(), a.grad().data(), m, n,
                      k);
    detail::gemm_at_b(a.data().data(), self.grad.data(), b.grad().data(), m, k,
                      n);
  });
  return out;
}

inline Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose: rank-2 tensor required");
  const std::size_t R = a.rows(), C = a.cols();
  Tensor out({C, R});
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c) out.at(c, r) = a.at(r, c);
  record(out, {a}, [a, R, C](TensorNode& self) {
    auto& ga = a.grad();
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t c = 0; c < C; ++c)
        ga[r * C + c] += self.grad[c * R + r];
  });
  return out;
}

// ------------------------------------------------------------ slice / concat

inline Tensor slice_rows(const Tensor& a, std::size_t r0, std::size_t r1) {
  if (a.rank() != 2 || r0 >= r1 || r1 > a.rows())
    throw ShapeError("slice_rows: bad range [" + std::to_string(r0) + "," +
                     std::to_string(r1) + ") for " + shape_str(a.shape()));
  const std::size_t C = a.cols();
  Tensor out({r1 - r0, C});
  std::copy(a.data().begin() + r0 * C, a.data().begin() + r1 * C,
            out.data().begin());
  record(out, {a}, [a, r0, C](TensorNode& self) {
    auto& ga = a.grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      ga[r0 * C + i] += self.grad[i];
  });
  return out;
}

inline Tensor slice_cols(const Tensor& a, std::size_t c0, std::size_t c1) {
  if (a.rank() != 2 || c0 >= c1 || c1 > a.cols())
    throw ShapeError("slice_cols: bad range for " + shape_str(a.shape()));
  const std::size_t R = a.rows(), C = a.cols(), W = c1 - c0;
  Tensor out({R, W});
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < W; ++c) out.at(r, c) = a.at(r, c0 + c);
  record(out, {a}, [a, c0, R, C, W](TensorNode& self) {
    auto& ga = a.grad();
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t c = 0; c < W; ++c)
        ga[r * C + c0 + c] += self.grad[r * W + c];
  });
  return out;
}

inline Tensor concat_cols(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.rows() != b.rows())
    throw ShapeError("concat_cols: row mismatch " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  const std::size_t R = a.rows(), Ca = a.cols(), Cb = b.cols();
  Tensor out({R, Ca + Cb});
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t c = 0; c < Ca; ++c) out.at(r, c) = a.at(r, c);
    for (std::size_t c = 0; c < Cb; ++c) out.at(r, Ca + c) = b.at(r, c);
  }
  record(out, {a, b}, [a, b, R, Ca, Cb](TensorNode& self) {
    auto& ga = a.grad();
    auto& gb = b.grad();
    const std::size_t C = Ca + Cb;
    for (std::size_t r = 0; r < R; ++r) {
      for (std::size_t c = 0; c < Ca; ++c)
        ga[r * Ca + c] += self.grad[r * C + c];
      for (std::size_t c = 0; c < Cb; ++c)
        gb[r * Cb + c] += self.grad[r * C + Ca + c];
    }
  });
  return out;
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: empty input list");
  const std::size_t C = parts[0].cols();
  std::size_t R = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.cols() != C)
      throw ShapeError("concat_rows: column mismatch");
    R += p.rows();
  }
  Tensor out({R, C});
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.data().begin(), p.data().end(), out.data().begin() + off);
    off += p.size();
  }
  record(out, parts, [parts](TensorNode& self) {
    std::size_t off = 0;
    for (const auto& p : parts) {
      auto& gp = p.grad();
      for (std::size_t i = 0; i < gp.size(); ++i)
        gp[i] += self.grad[off + i];
      off += gp.size();
    }
  });
  return out;
}

// --------------------------------------------------------- softmax / reduce

inline Tensor softmax_rows(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("softmax_rows: rank-2 required");
  const std::size_t R = a.rows(), C = a.cols();
  Tensor out({R, C});
  for (std::size_t r = 0; r < R; ++r) {
    double mx = a.at(r, 0);
    for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, a.at(r, c));
    double z = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      out.at(r, c) = std::exp(a.at(r, c) - mx);
      z += out.at(r, c);
    }
    for (std::size_t c = 0; c < C; ++c) out.at(r, c) /= z;
  }
  record(out, {a}, [a, R, C](TensorNode& self) {
    auto& ga = a.grad();
    for (std::size_t r = 0; r < R; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < C; ++c)
        dot += self.grad[r * C + c] * self.data[r * C + c];
      for (std::size_t c = 0; c < C; ++c)
        ga[r * C + c] += self.data[r * C + c] * (self.grad[r * C + c] - dot);
    }
  });
  return out;
}

inline Tensor log_softmax_rows(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("log_softmax_rows: rank-2 required");
  const std::size_t R = a.rows(), C = a.cols();
  Tensor out({R, C});
  for (std::size_t r = 0; r < R; ++r) {
    double mx = a.at(r, 0);
    for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, a.at(r, c));
    double z = 0.0;
    for (std::size_t c = 0; c < C; ++c) z += std::exp(a.at(r, c) - mx);
    double lz = mx + std::log(z);
    for (std::size_t c = 0; c < C; ++c) out.at(r, c) = a.at(r, c) - lz;
  }
  record(out, {a}, [a, R, C](TensorNode& self) {
    auto& ga = a.grad();
    for (std::size_t r = 0; r < R; ++r) {
      double gsum = 0.0;
      for (std::size_t c = 0; c < C; ++c) gsum += self.grad[r * C + c];
      for (std::size_t c = 0; c < C; ++c)
        ga[r * C + c] +=
            self.grad[r * C + c] - std::exp(self.data[r * C + c]) * gsum;
    }
  });
  return out;
}

inline Tensor reduce_sum(const Tensor& a) {
  Tensor out({1});
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  out.at(0) = acc;
  record(out, {a}, [a](TensorNode& self) {
    auto& ga = a.grad();
    for (double& g : ga) g += self.grad[0];
  });
  return out;
}

inline Tensor reduce_mean(const Tensor& a) {
  return scale(reduce_sum(a), 1.0 / static_cast<double>(a.size()));
}

// ---------------------------------------------------------------- layernorm

inline Tensor layer_norm(const Tensor& x, const Tensor& gamma,
                         const Tensor& beta, double eps = 1e-5) {
  if (x.rank() != 2 || gamma.size() != x.cols() || beta.size() != x.cols())
    throw ShapeError("layer_norm: x " + shape_str(x.shape()) +
                     " gamma " + shape_str(gamma.shape()));
  const std::size_t R = x.rows(), C = x.cols();
  Tensor out({R, C});
  std::vector<double> mean(R), rstd(R);
  for (std::size_t r = 0; r < R; ++r) {
    double m = 0.0;
    for (std::size_t c = 0; c < C; ++c) m += x.at(r, c);
    m /= C;
    double v = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      double d = x.at(r, c) - m;
      v += d * d;
    }
    v /= C;
    mean[r] = m;
    rstd[r] = 1.0 / std::sqrt(v + eps);
    for (std::size_t c = 0; c < C; ++c)
      out.at(r, c) = (x.at(r, c) - m) * rstd[r] * gamma.at(c) + beta.at(c);
  }
  record(out, {x, gamma, beta},
         [x, gamma, beta, mean, rstd, R, C](TensorNode& self) {
           auto& gx = x.grad();
           auto& gg = gamma.grad();
           auto& gb = beta.grad();
           for (std::size_t r = 0; r < R; ++r) {
             double sum_dy = 0.0, sum_dy_xhat = 0.0;
             for (std::size_t c = 0; c < C; ++c) {
               double xhat = (x.at(r, c) - mean[r]) * rstd[r];
               double dy = self.grad[r * C + c] * gamma.at(c);
               sum_dy += dy;
               sum_dy_xhat += dy * xhat;
               gg[c] += self.grad[r * C + c] * xhat;
               gb[c] += self.grad[r * C + c];
             }
             for (std::size_t c = 0; c < C; ++c) {
               double xhat = (x.at(r, c) - mean[r]) * rstd[r];
               double dy = self.grad[r * C + c] * gamma.at(c);
               gx[r * C + c] += rstd[r] * (dy - sum_dy / C -
                                           xhat * sum_dy_xhat / C);
             }
           }
         });
  return out;
}

// ------------------------------------------------------------- convolutions

// Strided 1-D convolution over time. x: [T, Cin], w: [k*Cin, Cout],
// b: [Cout]. Zero padding `pad` on both sides. Output [Tout, Cout] with
// Tout = (T + 2*pad - k)/stride + 1.
inline Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& b,
                     std::size_t k, std::size_t stride, std::size_t pad) {
  if (x.rank() != 2 || w.rank() != 2 || w.rows() != k * x.cols() ||
      b.size() != w.cols())
    throw ShapeError("conv1d: x " + shape_str(x.shape()) + " w " +
                     shape_str(w.shape()));
  const std::size_t T = x.rows(), Cin = x.cols(), Cout = w.cols();
  if (T + 2 * pad < k) throw ShapeError("conv1d: input too short");
  const std::size_t Tout = (T + 2 * pad - k) / stride + 1;
  Tensor out({Tout, Cout});
  for (std::size_t t = 0; t < Tout; ++t) {
    double* orow = out.data().data() + t * Cout;
    for (std::size_t c = 0; c < Cout; ++c) orow[c] = b.at(c);
    for (std::size_t j = 0; j < k; ++j) {
      std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t * stride + j) -
                           static_cast<std::ptrdiff_t>(pad);
      if (src < 0 || src >= static_cast<std::ptrdiff_t>(T)) continue;
      const double* xrow = x.data().data() + src * Cin;
      const double* wrow = w.data().data() + j * Cin * Cout;
      for (std::size_t ci = 0; ci < Cin; ++ci) {
        double xv = xrow[ci];
        if (xv == 0.0) continue;
        const double* wr = wrow + ci * Cout;
        for (std::size_t c = 0; c < Cout; ++c) orow[c] += xv * wr[c];
      }
    }
  }
  record(out, {x, w, b},
         [x, w, b, k, stride, pad, T, Cin, Cout, Tout](TensorNode& self) {
           auto& gx = x.grad();
           auto& gw = w.grad();
           auto& gb = b.grad();
           for (std::size_t t = 0; t < Tout; ++t) {
             const double* grow = self.grad.data() + t * Cout;
             for (std::size_t c = 0; c < Cout; ++c) gb[c] += grow[c];
             for (std::size_t j = 0; j < k; ++j) {
               std::ptrdiff_t src =
                   static_cast<std::ptrdiff_t>(t * stride + j) -
                   static_cast<std::ptrdiff_t>(pad);
               if (src < 0 || src >= static_cast<std::ptrdiff_t>(T)) continue;
               const double* xrow = x.data().data() + src * Cin;
               for (std::size_t ci = 0; ci < Cin; ++ci) {
                 const double* wr =
                     w.data().data() + (j * Cin + ci) * Cout;
                 double gacc = 0.0;
                 for (std::size_t c = 0; c < Cout; ++c) {
                   gacc += grow[c] * wr[c];
                   gw[(j * Cin + ci) * Cout + c] += grow[c] * xrow[ci];
                 }
                 gx[src * Cin + ci] += gacc;
               }
             }
           }
         });
  return out;
}

// Depthwise 1-D convolution, stride 1, same padding. x: [N, C], w: [k, C],
// odd k.
inline Tensor conv1d_depthwise(const Tensor& x, const Tensor& w,
                               const Tensor& b) {
  if (x.rank() != 2 || w.rank() != 2 || w.cols() != x.cols() ||
      b.size() != x.cols() || w.rows() % 2 == 0)
    throw ShapeError("conv1d_depthwise: x " + shape_str(x.shape()) + " w " +
                     shape_str(w.shape()));
  const std::size_t N = x.rows(), C = x.cols(), k = w.rows();
  const std::ptrdiff_t half = static_cast<std::ptrdiff_t>(k / 2);
  Tensor out({N, C});
  for (std::size_t t = 0; t < N; ++t) {
    double* orow = out.data().data() + t * C;
    for (std::size_t c = 0; c < C; ++c) orow[c] = b.at(c);
    for (std::size_t j = 0; j < k; ++j) {
      std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t) + j - half;
      if (src < 0 || src >= static_cast<std::ptrdiff_t>(N)) continue;
      const double* xrow = x.data().data() + src * C;
      const double* wrow = w.data().data() + j * C;
      for (std::size_t c = 0; c < C; ++c) orow[c] += xrow[c] * wrow[c];
    }
  }
  record(out, {x, w, b}, [x, w, b, N, C, k, half](TensorNode& self) {
    auto& gx = x.grad();
    auto& gw = w.grad();
    auto& gb = b.grad();
    for (std::size_t t = 0; t < N; ++t) {
      const double* grow = self.grad.data() + t * C;
      for (std::size_t c = 0; c < C; ++c) gb[c] += grow[c];
      for (std::size_t j = 0; j < k; ++j) {
        std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t) + j - half;
        if (src < 0 || src >= static_cast<std::ptrdiff_t>(N)) continue;
        const double* xrow = x.data().data() + src * C;
        const double* wrow = w.data().data() + j * C;
        for (std::size_t c = 0; c < C; ++c) {
          gx[src * C + c] += grow[c] * wrow[c];
          gw[j * C + c] += grow[c] * xrow[c];
        }
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------- embedding

inline Tensor embedding(const Tensor& table, const std::vector<int>& ids) {
  if (table.rank() != 2) throw ShapeError("embedding: table must be rank 2");
  const std::size_t V = table.rows(), D = table.cols();
  for (int id : ids)
    if (id < 0 || static_cast<std::size_t>(id) >= V)
      throw DataError("embedding: token id " + std::to_string(id) +
                      " outside table of size " + std::to_string(V));
  Tensor out({ids.size(), D});
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy(table.data().begin() + ids[i] * D,
              table.data().begin() + (ids[i] + 1) * D,
              out.data().begin() + i * D);
  record(out, {table}, [table, ids, D](TensorNode& self) {
    auto& gt = table.grad();
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (std::size_t d = 0; d < D; ++d)
        gt[ids[i] * D + d] += self.grad[i * D + d];
  });
  return out;
}

// ----------------------------------------------------- multi-head attention

// Fused scaled-dot-product multi-head attention over already-projected
// q/k/v matrices ([Nq, d], [Nk, d]). `kv_valid` limits attendable key rows
// (padding at the tail); `causal` restricts query t to keys <= t.
// With gradients off, attention rows are streamed and never materialized.
inline Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        std::size_t heads, bool causal,
                        std::size_t kv_valid = 0) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 ||
      q.cols() != k.cols() || k.shape() != v.shape() ||
      q.cols() % heads != 0)
    throw ShapeError("attention: q " + shape_str(q.shape()) + " k " +
                     shape_str(k.shape()) + " heads " +
                     std::to_string(heads));
  const std::size_t Nq = q.rows(), Nk = k.rows(), D = q.cols();
  const std::size_t dh = D / heads;
  const std::size_t nk = kv_valid == 0 ? Nk : std::min(kv_valid, Nk);
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  Tensor out({Nq, D});
  const bool keep = tape_active({q, k, v});
  // Per head attention matrices, kept only when a backward pass will need
  // them.
  auto probs = std::make_shared<std::vector<std::vector<double>>>();
  if (keep) probs->assign(heads, std::vector<double>(Nq * nk, 0.0));
  std::vector<double> row(nk);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * dh;
    for (std::size_t t = 0; t < Nq; ++t) {
      const std::size_t kmax = causal ? std::min(nk, t + 1) : nk;
      if (kmax == 0) throw ShapeError("attention: no attendable keys");
      const double* qrow = q.data().data() + t * D + off;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t s = 0; s < kmax; ++s) {
        const double* krow = k.data().data() + s * D + off;
        double acc = 0.0;
        for (std::size_t c = 0; c < dh; ++c) acc += qrow[c] * krow[c];
        row[s] = acc * sc;
        mx = std::max(mx, row[s]);
      }
      double z = 0.0;
      for (std::size_t s = 0; s < kmax; ++s) {
        row[s] = std::exp(row[s] - mx);
        z += row[s];
      }
      double* orow = out.data().data() + t * D + off;
      for (std::size_t c = 0; c < dh; ++c) orow[c] = 0.0;
      for (std::size_t s = 0; s < kmax; ++s) {
        double a = row[s] / z;
        if (keep) (*probs)[h][t * nk + s] = a;
        const double* vrow = v.data().data() + s * D + off;
        for (std::size_t c = 0; c < dh; ++c) orow[c] += a * vrow[c];
      }
    }
  }
  if (keep) {
    record(out, {q, k, v},
           [q, k, v, probs, heads, dh, Nq, nk, D, sc,
            causal](TensorNode& self) {
             auto& gq = q.grad();
             auto& gk = k.grad();
             auto& gv = v.grad();
             std::vector<double> dA(nk);
             for (std::size_t h = 0; h < heads; ++h) {
               const std::size_t off = h * dh;
               const auto& A = (*probs)[h];
               for (std::size_t t = 0; t < Nq; ++t) {
                 const std::size_t kmax = causal ? std::min(nk, t + 1) : nk;
                 const double* go = self.grad.data() + t * D + off;
                 double dot = 0.0;
                 for (std::size_t s = 0; s < kmax; ++s) {
                   const double* vrow = v.data().data() + s * D + off;
                   double acc = 0.0;
                   for (std::size_t c = 0; c < dh; ++c)
                     acc += go[c] * vrow[c];
                   dA[s] = acc;
                   dot += acc * A[t * nk + s];
                   // dV += a * dO
                   double a = A[t * nk + s];
                   for (std::size_t c = 0; c < dh; ++c)
                     gv[s * D + off + c] += a * go[c];
                 }
                 const double* qrow = q.data().data() + t * D + off;
                 for (std::size_t s = 0; s < kmax; ++s) {
                   double dS = A[t * nk + s] * (dA[s] - dot) * sc;
                   if (dS == 0.0) continue;
                   const double* krow = k.data().data() + s * D + off;
                   for (std::size_t c = 0; c < dh; ++c) {
                     gq[t * D + off + c] += dS * krow[c];
                     gk[s * D + off + c] += dS * qrow[c];
                   }
                 }
               }
             }
           });
  }
  return out;
}

// Zeroes all rows at index >= from_row (padding mask ahead of time-axis
// convolutions). Identity when from_row == 0 or covers the whole tensor.
inline Tensor zero_rows(const Tensor& x, std::size_t from_row) {
  if (x.rank() != 2) throw ShapeError("zero_rows: rank-2 required");
  if (from_row == 0 || from_row >= x.rows()) return x;
  const std::size_t C = x.cols();
  Tensor out(x.shape());
  std::copy(x.data().begin(), x.data().begin() + from_row * C,
            out.data().begin());
  record(out, {x}, [x, from_row, C](TensorNode& self) {
    auto& gx = x.grad();
    for (std::size_t i = 0; i < from_row * C; ++i) gx[i] += self.grad[i];
  });
  return out;
}

// Inverted dropout; identity when p == 0.
inline Tensor dropout(const Tensor& x, double p, Rng& rng) {
  if (p <= 0.0) return x;
  if (p >= 1.0) throw ConfigError("dropout: p must be < 1");
  Tensor out(x.shape());
  auto mask = std::make_shared<std::vector<double>>(x.size());
  std::bernoulli_distribution keep(1.0 - p);
  const double inv = 1.0 / (1.0 - p);
  for (std::size_t i = 0; i < x.size(); ++i) {
    (*mask)[i] = keep(rng) ? inv : 0.0;
    out.at(i) = x.at(i) * (*mask)[i];
  }
  record(out, {x}, [x, mask](TensorNode& self) {
    auto& gx = x.grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      gx[i] += self.grad[i] * (*mask)[i];
  });
  return out;
}

// ------------------------------------------------------------- loss helpers

// Negative log-likelihood over log-probability rows with label smoothing
// distributed uniformly over the row. Returns the sum over rows.
inline Tensor nll_loss(const Tensor& logprobs, const std::vector<int>& targets,
                       double smoothing = 0.0) {
  if (logprobs.rank() != 2 || targets.size() != logprobs.rows())
    throw ShapeError("nll_loss: logprobs " + shape_str(logprobs.shape()) +
                     " targets " + std::to_string(targets.size()));
  const std::size_t R = logprobs.rows(), C = logprobs.cols();
  for (int t : targets)
    if (t < 0 || static_cast<std::size_t>(t) >= C)
      throw DataError("nll_loss: target id " + std::to_string(t) +
                      " out of range");
  double acc = 0.0;
  const double on = 1.0 - smoothing, uni = smoothing / C;
  for (std::size_t r = 0; r < R; ++r) {
    acc -= on * logprobs.at(r, targets[r]);
    if (uni > 0.0)
      for (std::size_t c = 0; c < C; ++c) acc -= uni * logprobs.at(r, c);
  }
  Tensor out = Tensor::scalar(acc);
  record(out, {logprobs}, [logprobs, targets, on, uni, R, C](TensorNode& self) {
    auto& g = logprobs.grad();
    double gs = self.grad[0];
    for (std::size_t r = 0; r < R; ++r) {
      g[r * C + targets[r]] -= gs * on;
      if (uni > 0.0)
        for (std::size_t c = 0; c < C; ++c) g[r * C + c] -= gs * uni;
    }
  });
  return out;
}

}  // namespace ops
}  // namespace mtasr
