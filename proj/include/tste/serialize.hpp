#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "tste/tensor.hpp"

namespace tste::serialize {

// Container layout: magic "TSTE", u32 version, u32 record count, then per
// record: u32 name length, name bytes, u32 rank, u32 dims..., f32 payload.
// All integers and floats little-endian.

constexpr uint32_t kFormatVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

using TensorMap = std::vector<NamedTensor>;

inline void put_u32(std::string& out, uint32_t v) {
  out.push_back(static_cast<char>(v & 0xFF));
  out.push_back(static_cast<char>((v >> 8) & 0xFF));
  out.push_back(static_cast<char>((v >> 16) & 0xFF));
  out.push_back(static_cast<char>((v >> 24) & 0xFF));
}

inline void put_f32(std::string& out, float f) {
  uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_u32(out, bits);
}

inline std::string encode_container(const TensorMap& map) {
  std::string out;
  out.append("TSTE");
  put_u32(out, kFormatVersion);
  put_u32(out, static_cast<uint32_t>(map.size()));
  for (const auto& rec : map) {
    put_u32(out, static_cast<uint32_t>(rec.name.size()));
    out.append(rec.name);
    put_u32(out, static_cast<uint32_t>(rec.tensor.rank()));
    for (int d : rec.tensor.dims()) put_u32(out, static_cast<uint32_t>(d));
    for (int64_t i = 0; i < rec.tensor.size(); ++i) put_f32(out, rec.tensor[i]);
  }
  return out;
}

class ByteReader {
 public:
  ByteReader(const char* data, size_t n) : data_(data), n_(n) {}

  uint32_t u32() {
    if (pos_ + 4 > n_) throw IoError("tensor container truncated");
    uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<uint8_t>(data_[pos_ + i]);
    pos_ += 4;
    return v;
  }

  float f32() {
    const uint32_t bits = u32();
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
  }

  std::string bytes(size_t k) {
    if (pos_ + k > n_) throw IoError("tensor container truncated");
    std::string s(data_ + pos_, k);
    pos_ += k;
    return s;
  }

  bool done() const { return pos_ == n_; }

 private:
  const char* data_;
  size_t n_;
  size_t pos_ = 0;
};

inline TensorMap decode_container(const std::string& bytes) {
  ByteReader r(bytes.data(), bytes.size());
  if (r.bytes(4) != "TSTE") throw IoError("bad magic: not a tensor container");
  const uint32_t version = r.u32();
  if (version != kFormatVersion)
    throw IoError("unsupported tensor container version " + std::to_string(version));
  const uint32_t count = r.u32();
  TensorMap map;
  map.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    NamedTensor rec;
    const uint32_t name_len = r.u32();
    rec.name = r.bytes(name_len);
    const uint32_t rank = r.u32();
    if (rank == 0 || rank > 8) throw IoError("bad tensor rank in container");
    std::vector<int> dims(rank);
    for (uint32_t d = 0; d < rank; ++d) {
      const uint32_t v = r.u32();
      if (v == 0 || v > (1u << 28)) throw IoError("bad tensor dim in container");
      dims[d] = static_cast<int>(v);
    }
    int64_t n = 1;
    for (int d : dims) n *= d;
    std::vector<float> data(static_cast<size_t>(n));
    for (int64_t j = 0; j < n; ++j) data[static_cast<size_t>(j)] = r.f32();
    rec.tensor = Tensor(std::move(dims), std::move(data));
    map.push_back(std::move(rec));
  }
  if (!r.done()) throw IoError("trailing bytes after tensor container records");
  return map;
}

inline void write_container(const std::string& path, const TensorMap& map) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path);
  const std::string bytes = encode_container(map);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path);
}

inline std::string read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline TensorMap read_container(const std::string& path) {
  return decode_container(read_file_bytes(path));
}

inline const Tensor* find(const TensorMap& map, const std::string& name) {
  for (const auto& rec : map)
    if (rec.name == name) return &rec.tensor;
  return nullptr;
}

inline const Tensor& require(const TensorMap& map, const std::string& name) {
  const Tensor* t = find(map, name);
  if (!t) throw IoError("missing record in container: " + name);
  return *t;
}

/// FNV-1a over the encoded container; used for frozen-parameter checks.
inline uint64_t fnv1a64(const std::string& bytes) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline uint64_t checksum(const TensorMap& map) { return fnv1a64(encode_container(map)); }

}  // namespace tste::serialize
