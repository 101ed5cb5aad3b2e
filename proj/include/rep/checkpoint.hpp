#pragma once

// Binary checkpoint:
//   "REPV1"                         5 bytes magic
//   u32 model count
//   per model: str tag, 7 x u32 config (image, patch, depth, width, heads, mlp_ratio, classes)
//   u32 blob count
//   per blob:  str name ("<module>/<param>"), u32 rank, rank x u32 dims, f64 values
// Integers and floats are little-endian; str = u16 length + bytes.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "rep/errors.hpp"
#include "rep/rng.hpp"
#include "rep/tensor.hpp"
#include "rep/vit.hpp"

namespace rep {

inline constexpr char kCheckpointMagic[5] = {'R', 'E', 'P', 'V', '1'};

struct Blob {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

struct Checkpoint {
  std::vector<std::pair<std::string, ViTConfig>> models;
  std::vector<Blob> blobs;

  const ViTConfig* model(const std::string& tag) const {
    for (const auto& [t, c] : models)
      if (t == tag) return &c;
    return nullptr;
  }
  const Blob* blob(const std::string& name) const {
    for (const auto& b : blobs)
      if (b.name == name) return &b;
    return nullptr;
  }
};

namespace detail {

class ByteWriter {
 public:
  void u16(std::uint16_t v) { put(v, 2); }
  void u32(std::uint32_t v) { put(v, 4); }
  void f64(double v) { put(std::bit_cast<std::uint64_t>(v), 8); }
  void str(const std::string& s) {
    u16(static_cast<std::uint16_t>(s.size()));
    bytes.insert(bytes.end(), s.begin(), s.end());
  }
  std::vector<char> bytes;

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) bytes.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
};

class ByteReader {
 public:
  explicit ByteReader(const std::vector<char>& b) : b_(b) {}
  std::uint8_t u8() { return static_cast<std::uint8_t>(get(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(get(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  double f64() { return std::bit_cast<double>(get(8)); }
  std::string str() {
    const std::size_t n = u16();
    need(n);
    std::string s(b_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  void need(std::size_t n) const {
    if (pos_ + n > b_.size()) throw InputError("checkpoint truncated");
  }
  std::size_t pos() const { return pos_; }
  void skip(std::size_t n) {
    need(n);
    pos_ += n;
  }

 private:
  std::uint64_t get(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  const std::vector<char>& b_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<char> encode_checkpoint(const Checkpoint& ck) {
  detail::ByteWriter w;
  w.bytes.insert(w.bytes.end(), std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
  w.u32(static_cast<std::uint32_t>(ck.models.size()));
  for (const auto& [tag, c] : ck.models) {
    w.str(tag);
    for (std::size_t v : {c.image_side, c.patch_side, c.depth, c.width, c.heads, c.mlp_ratio, c.n_classes})
      w.u32(static_cast<std::uint32_t>(v));
  }
  w.u32(static_cast<std::uint32_t>(ck.blobs.size()));
  for (const auto& b : ck.blobs) {
    w.str(b.name);
    w.u32(static_cast<std::uint32_t>(b.shape.size()));
    for (std::size_t d : b.shape) w.u32(static_cast<std::uint32_t>(d));
    for (double v : b.values) w.f64(v);
  }
  return std::move(w.bytes);
}

inline Checkpoint decode_checkpoint(const std::vector<char>& bytes) {
  if (bytes.size() < 5 || std::memcmp(bytes.data(), kCheckpointMagic, 5) != 0) {
    throw InputError("not a checkpoint (bad magic)");
  }
  detail::ByteReader r(bytes);
  r.skip(5);
  Checkpoint ck;
  const std::uint32_t nm = r.u32();
  for (std::uint32_t i = 0; i < nm; ++i) {
    std::string tag = r.str();
    ViTConfig c;
    c.image_side = r.u32();
    c.patch_side = r.u32();
    c.depth = r.u32();
    c.width = r.u32();
    c.heads = r.u32();
    c.mlp_ratio = r.u32();
    c.n_classes = r.u32();
    ck.models.emplace_back(std::move(tag), c);
  }
  const std::uint32_t nb = r.u32();
  for (std::uint32_t i = 0; i < nb; ++i) {
    Blob b;
    b.name = r.str();
    const std::uint32_t rank = r.u32();
    for (std::uint32_t k = 0; k < rank; ++k) b.shape.push_back(r.u32());
    const std::size_t n = numel_of(b.shape);
    r.need(n * 8);
    b.values.resize(n);
    for (auto& v : b.values) v = r.f64();
    ck.blobs.push_back(std::move(b));
  }
  if (r.pos() != bytes.size()) throw InputError("trailing bytes after checkpoint");
  return ck;
}

inline void write_file(const std::filesystem::path& path, const std::vector<char>& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw InputError("cannot write " + path.string());
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline std::vector<char> read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot open " + path.string());
  return std::vector<char>(std::istreambuf_iterator<char>(f), {});
}

/// FNV-1a over raw bytes, printed as the checkpoint hash.
inline std::uint64_t hash_bytes(const std::vector<char>& bytes) {
  return detail::fnv1a(std::string_view(bytes.data(), bytes.size()));
}

/// FNV-1a over the bit patterns of parameter values, in order.
inline std::uint64_t hash_parameters(const std::vector<Parameter*>& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const Parameter* p : params) {
    for (double v : p->tensor.data()) {
      std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
      for (int i = 0; i < 8; ++i) {
        h ^= (bits >> (8 * i)) & 0xff;
        h *= 0x100000001b3ULL;
      }
    }
  }
  return h;
}

inline void append_blobs(Checkpoint& ck, const std::string& module, const std::vector<Parameter*>& params) {
  for (const Parameter* p : params) {
    ck.blobs.push_back(Blob{module + "/" + p->name, p->tensor.shape(),
                            std::vector<double>(p->tensor.data().begin(), p->tensor.data().end())});
  }
}

/// Copies blobs named "<module>/<param>" into `params`.
inline void restore_blobs(const Checkpoint& ck, const std::string& module, const std::vector<Parameter*>& params) {
  for (Parameter* p : params) {
    const Blob* b = ck.blob(module + "/" + p->name);
    if (!b) throw StateMismatch("checkpoint has no parameter " + module + "/" + p->name);
    if (b->shape != p->tensor.shape()) {
      throw StateMismatch("checkpoint parameter " + b->name + " has shape " + shape_str(b->shape) + ", expected " +
                          shape_str(p->tensor.shape()));
    }
    std::copy(b->values.begin(), b->values.end(), p->tensor.data().begin());
  }
}

}  // namespace rep
