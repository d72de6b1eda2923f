#pragma once

// Versioned binary container shared by the decoder ("CODM") and duration
// predictor ("CODD") checkpoints:
//
//   magic[4] | u32 version | u32 n_meta | n_meta x (str key, str value)
//   | u32 n_tensors | n_tensors x (str name, u64 rows, u64 cols, f32[rows*cols])
//
// where str is u32 length + bytes. Integers and floats are little-endian and
// tensors are row-major.

#include <bit>
#include <cstring>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "cod/core.hpp"
#include "cod/io.hpp"
#include "cod/transformer.hpp"

namespace cod {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  std::uint64_t rows = 0, cols = 0;
  std::vector<float> data;
};

struct Container {
  std::string magic;
  std::uint32_t version = kCheckpointVersion;
  std::vector<std::pair<std::string, std::string>> meta;
  std::vector<NamedTensor> tensors;

  std::map<std::string, std::string> meta_map() const { return {meta.begin(), meta.end()}; }

  const NamedTensor* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
};

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline void put_u32(std::string& out, std::uint32_t v) { out.append(reinterpret_cast<const char*>(&v), 4); }
inline void put_u64(std::string& out, std::uint64_t v) { out.append(reinterpret_cast<const char*>(&v), 8); }
inline void put_str(std::string& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out += s;
}

class Reader {
 public:
  explicit Reader(std::string_view b) : b_(b) {}

  void need(std::size_t n) const {
    if (b_.size() - pos_ < n) throw FormatError("checkpoint truncated at byte " + std::to_string(pos_));
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v;
    std::memcpy(&v, b_.data() + pos_, 4);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v;
    std::memcpy(&v, b_.data() + pos_, 8);
    pos_ += 8;
    return v;
  }
  std::string str() {
    const auto n = u32();
    need(n);
    std::string s(b_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  std::string raw(std::size_t n) {
    need(n);
    std::string s(b_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  void floats(std::vector<float>& dst, std::uint64_t n) {
    if (n > (b_.size() - pos_) / 4) throw FormatError("checkpoint truncated inside tensor data");
    dst.resize(n);
    std::memcpy(dst.data(), b_.data() + pos_, n * 4);
    pos_ += n * 4;
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  std::string_view b_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_container(const Container& c) {
  if (c.magic.size() != 4) invalid("container magic must be 4 bytes");
  std::string out = c.magic;
  detail::put_u32(out, c.version);
  detail::put_u32(out, static_cast<std::uint32_t>(c.meta.size()));
  for (const auto& [k, v] : c.meta) {
    detail::put_str(out, k);
    detail::put_str(out, v);
  }
  detail::put_u32(out, static_cast<std::uint32_t>(c.tensors.size()));
  for (const auto& t : c.tensors) {
    detail::put_str(out, t.name);
    detail::put_u64(out, t.rows);
    detail::put_u64(out, t.cols);
    out.append(reinterpret_cast<const char*>(t.data.data()), t.data.size() * sizeof(float));
  }
  return out;
}

inline Container decode_container(std::string_view bytes, const std::string& expected_magic) {
  detail::Reader r(bytes);
  Container c;
  c.magic = r.raw(4);
  if (c.magic != expected_magic) throw FormatError("bad checkpoint magic (expected " + expected_magic + ")");
  c.version = r.u32();
  if (c.version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(c.version));
  const auto n_meta = r.u32();
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    auto k = r.str();
    auto v = r.str();
    c.meta.emplace_back(std::move(k), std::move(v));
  }
  const auto n_tensors = r.u32();
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    NamedTensor t;
    t.name = r.str();
    t.rows = r.u64();
    t.cols = r.u64();
    if (t.cols != 0 && t.rows > std::numeric_limits<std::uint64_t>::max() / t.cols)
      throw FormatError("tensor shape overflow");
    r.floats(t.data, t.rows * t.cols);
    c.tensors.push_back(std::move(t));
  }
  if (!r.done()) throw FormatError("trailing bytes after checkpoint");
  return c;
}

inline void write_container(const std::filesystem::path& path, const Container& c) {
  write_file_atomic(path, encode_container(c));
}

inline Container read_container(const std::filesystem::path& path, const std::string& expected_magic) {
  return decode_container(read_file(path), expected_magic);
}

inline NamedTensor to_named(const std::string& name, const Mat<float>& m) {
  NamedTensor t{name, static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols()), {}};
  t.data.assign(m.data(), m.data() + m.size());
  return t;
}

/// Copies a stored tensor into `dst`, which must already have the right shape.
inline void from_named(const Container& c, const std::string& name, Mat<float>& dst) {
  const auto* t = c.find(name);
  if (!t) throw FormatError("checkpoint is missing tensor '" + name + "'");
  if (t->rows != static_cast<std::uint64_t>(dst.rows()) || t->cols != static_cast<std::uint64_t>(dst.cols()))
    throw FormatError("tensor '" + name + "' has shape " + std::to_string(t->rows) + "x" + std::to_string(t->cols) +
                      ", expected " + std::to_string(dst.rows()) + "x" + std::to_string(dst.cols()));
  std::memcpy(dst.data(), t->data.data(), t->data.size() * sizeof(float));
}

inline void append_tensors(Container& c, const std::string& prefix, const TensorList<float>& list) {
  for (const auto& [name, m] : list) c.tensors.push_back(to_named(prefix + name, *m));
}

inline void load_tensors(const Container& c, const std::string& prefix, const TensorList<float>& list) {
  for (const auto& [name, m] : list) from_named(c, prefix + name, *m);
}

}  // namespace cod
