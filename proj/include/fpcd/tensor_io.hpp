#pragma once

// Binary tensor file format:
//   magic "FPCD", u32 version=1, u8 dtype (0 = f64), u8 ndim,
//   ndim x u64 dims, then little-endian f64 payload.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>

#include "fpcd/error.hpp"
#include "fpcd/tensor.hpp"

namespace fpcd::io {

inline constexpr char kMagic[4] = {'F', 'P', 'C', 'D'};
inline constexpr uint32_t kVersion = 1;

inline void save_tensor(const std::string& path, const Tensor& t) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for write: " + path);
  f.write(kMagic, 4);
  uint32_t ver = kVersion;
  f.write(reinterpret_cast<const char*>(&ver), 4);
  uint8_t dtype = 0;
  uint8_t ndim = static_cast<uint8_t>(t.ndim());
  f.write(reinterpret_cast<const char*>(&dtype), 1);
  f.write(reinterpret_cast<const char*>(&ndim), 1);
  for (int64_t d : t.dims()) {
    uint64_t u = static_cast<uint64_t>(d);
    f.write(reinterpret_cast<const char*>(&u), 8);
  }
  f.write(reinterpret_cast<const char*>(t.data()), t.size() * 8);
  if (!f) throw IoError("write failed: " + path);
}

inline Tensor load_tensor(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for read: " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, kMagic, 4) != 0) throw IoError("bad magic in " + path);
  uint32_t ver = 0;
  f.read(reinterpret_cast<char*>(&ver), 4);
  if (ver != kVersion) throw IoError("unsupported version in " + path);
  uint8_t dtype = 0, ndim = 0;
  f.read(reinterpret_cast<char*>(&dtype), 1);
  f.read(reinterpret_cast<char*>(&ndim), 1);
  if (dtype != 0) throw IoError("unsupported dtype in " + path);
  Dims dims(ndim);
  for (auto& d : dims) {
    uint64_t u = 0;
    f.read(reinterpret_cast<char*>(&u), 8);
    d = static_cast<int64_t>(u);
  }
  Tensor t(dims);
  f.read(reinterpret_cast<char*>(t.data()), t.size() * 8);
  if (!f) throw IoError("truncated tensor file: " + path);
  return t;
}

}  // namespace fpcd::io
