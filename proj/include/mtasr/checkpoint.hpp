#pragma once

#include <cstring>
#include <fstream>
#include <map>

#include "mtasr/tensor.hpp"

namespace mtasr {

// Versioned binary tensor container.
// Layout: magic "ICTX1" | u64 count | per tensor:
//   u64 name_len | name bytes (UTF-8) | u64 rank | u64 dims[rank] |
//   float32 payload (row-major, little-endian).
namespace checkpoint {

inline constexpr char kMagic[5] = {'I', 'C', 'T', 'X', '1'};

namespace detail {
inline void write_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}
inline std::uint64_t read_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  if (!is) throw DataError("checkpoint: truncated file");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}
}  // namespace detail

inline void save(const std::string& path,
                 const std::map<std::string, Tensor>& tensors) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("checkpoint: cannot open " + path + " for write");
  os.write(kMagic, 5);
  detail::write_u64(os, tensors.size());
  for (const auto& [name, t] : tensors) {
    detail::write_u64(os, name.size());
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_u64(os, t.rank());
    for (std::size_t d : t.shape()) detail::write_u64(os, d);
    std::vector<float> payload(t.size());
    for (std::size_t i = 0; i < t.size(); ++i)
      payload[i] = static_cast<float>(t.at(i));
    os.write(reinterpret_cast<const char*>(payload.data()),
             static_cast<std::streamsize>(payload.size() * sizeof(float)));
  }
  if (!os) throw DataError("checkpoint: write failed for " + path);
}

inline std::map<std::string, Tensor> load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("checkpoint: cannot open " + path);
  char magic[5];
  is.read(magic, 5);
  if (!is || std::memcmp(magic, kMagic, 5) != 0)
    throw DataError("checkpoint: bad magic in " + path);
  std::uint64_t count = detail::read_u64(is);
  std::map<std::string, Tensor> out;
  for (std::uint64_t i = 0; i < count; ++i) {
    std::uint64_t name_len = detail::read_u64(is);
    std::string name(name_len, '\0');
    is.read(name.data(), static_cast<std::streamsize>(name_len));
    std::uint64_t rank = detail::read_u64(is);
    Shape shape(rank);
    for (auto& d : shape) d = detail::read_u64(is);
    std::vector<float> payload(shape_numel(shape));
    is.read(reinterpret_cast<char*>(payload.data()),
            static_cast<std::streamsize>(payload.size() * sizeof(float)));
    if (!is) throw DataError("checkpoint: truncated tensor " + name);
    Tensor t(shape);
    for (std::size_t j = 0; j < payload.size(); ++j)
      t.at(j) = static_cast<double>(payload[j]);
    out.emplace(name, t);
  }
  return out;
}

// Copy loaded values into existing parameters, shape-checked.
inline void restore(const std::map<std::string, Tensor>& loaded,
                    std::map<std::string, Tensor>& params) {
  for (auto& [name, p] : params) {
    auto it = loaded.find(name);
    if (it == loaded.end())
      throw DataError("checkpoint: missing tensor " + name);
    if (it->second.shape() != p.shape())
      throw DataError("checkpoint: shape mismatch for " + name + ": file " +
                      shape_str(it->second.shape()) + " vs model " +
                      shape_str(p.shape()));
    p.data() = it->second.data();
  }
}

}  // namespace checkpoint
}  // namespace mtasr
