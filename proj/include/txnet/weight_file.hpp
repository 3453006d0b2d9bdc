#pragma once

// TXNW1 weight files.
//
//   "TXNW1"  u32 count
//   count x { u32 name_len, name bytes, u8 dtype (0 f32, 1 f64), u8 rank,
//             rank x u32 extent, raw little-endian values }

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <set>
#include <string>
#include <type_traits>
#include <vector>

#include "txnet/param_store.hpp"

namespace txnet {

inline constexpr char kWeightMagic[] = "TXNW1";

enum class DType : std::uint8_t { kF32 = 0, kF64 = 1 };

template <Real T>
constexpr DType dtype_of() {
  return std::is_same_v<T, float> ? DType::kF32 : DType::kF64;
}

inline std::size_t dtype_size(DType d) { return d == DType::kF32 ? 4 : 8; }
inline const char* to_string(DType d) { return d == DType::kF32 ? "f32" : "f64"; }

struct WeightEntry {
  std::string name;
  DType dtype = DType::kF32;
  std::vector<std::uint32_t> extents;
  std::vector<std::uint8_t> bytes;  // little-endian payload

  std::size_t numel() const {
    std::size_t n = 1;
    for (auto e : extents) n *= e;
    return n;
  }
};

struct WeightFile {
  std::vector<WeightEntry> entries;
};

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(std::uint8_t(v >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : b_(b) {}

  const std::uint8_t* take(std::size_t n, const char* what) {
    if (n > b_.size() - pos_) {
      throw FormatError(std::string("weight file truncated while reading ") + what + " at byte " +
                        std::to_string(pos_));
    }
    const auto* p = b_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::uint32_t u32(const char* what) {
    const auto* p = take(4, what);
    return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 | std::uint32_t(p[3]) << 24;
  }
  std::uint8_t u8(const char* what) { return *take(1, what); }
  bool done() const { return pos_ == b_.size(); }
  std::size_t pos() const { return pos_; }

 private:
  const std::vector<std::uint8_t>& b_;
  std::size_t pos_ = 0;
};

/// Values to little-endian bytes.
template <Real T>
std::vector<std::uint8_t> to_le_bytes(std::span<const T> values) {
  std::vector<std::uint8_t> out(values.size() * sizeof(T));
  std::memcpy(out.data(), values.data(), out.size());
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < out.size(); i += sizeof(T)) std::reverse(out.begin() + i, out.begin() + i + sizeof(T));
  }
  return out;
}

template <Real T>
std::vector<T> from_le_bytes(const std::vector<std::uint8_t>& bytes) {
  std::vector<std::uint8_t> b = bytes;
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < b.size(); i += sizeof(T)) std::reverse(b.begin() + i, b.begin() + i + sizeof(T));
  }
  std::vector<T> out(b.size() / sizeof(T));
  std::memcpy(out.data(), b.data(), b.size());
  return out;
}

}  // namespace detail

inline std::vector<std::uint8_t> serialize(const WeightFile& f) {
  std::vector<std::uint8_t> out(kWeightMagic, kWeightMagic + 5);
  detail::put_u32(out, std::uint32_t(f.entries.size()));
  for (const auto& e : f.entries) {
    if (e.bytes.size() != e.numel() * dtype_size(e.dtype)) {
      throw FormatError(e.name + ": payload of " + std::to_string(e.bytes.size()) + " bytes does not match shape");
    }
    detail::put_u32(out, std::uint32_t(e.name.size()));
    out.insert(out.end(), e.name.begin(), e.name.end());
    out.push_back(std::uint8_t(e.dtype));
    out.push_back(std::uint8_t(e.extents.size()));
    for (auto x : e.extents) detail::put_u32(out, x);
    out.insert(out.end(), e.bytes.begin(), e.bytes.end());
  }
  return out;
}

inline WeightFile parse_weight_file(const std::vector<std::uint8_t>& bytes) {
  detail::Reader r(bytes);
  if (std::memcmp(r.take(5, "magic"), kWeightMagic, 5) != 0) throw FormatError("not a TXNW1 weight file (bad magic)");
  WeightFile f;
  const std::uint32_t count = r.u32("entry count");
  std::set<std::string, std::less<>> seen;
  for (std::uint32_t i = 0; i < count; ++i) {
    WeightEntry e;
    const std::uint32_t len = r.u32("name length");
    const auto* name = r.take(len, "name");
    e.name.assign(reinterpret_cast<const char*>(name), len);
    if (!seen.insert(e.name).second) throw FormatError("duplicate tensor name " + e.name);
    const std::uint8_t dt = r.u8("dtype");
    if (dt > 1) throw FormatError(e.name + ": unknown dtype tag " + std::to_string(dt));
    e.dtype = DType(dt);
    const std::uint8_t rank = r.u8("rank");
    std::size_t elems = 1;
    for (std::uint8_t k = 0; k < rank; ++k) {
      e.extents.push_back(r.u32("extent"));
      elems *= e.extents.back();
      if (elems > bytes.size()) throw FormatError(e.name + ": declared size exceeds the file length");
    }
    const std::size_t nbytes = e.numel() * dtype_size(e.dtype);
    const auto* data = r.take(nbytes, "tensor data");
    e.bytes.assign(data, data + nbytes);
    f.entries.push_back(std::move(e));
  }
  if (!r.done()) throw FormatError("trailing bytes after entry " + std::to_string(count));
  return f;
}

inline std::vector<std::uint8_t> read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(path + ": cannot open");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError(path + ": cannot open for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!out) throw FormatError(path + ": write failed");
}

template <Real T>
WeightFile to_weight_file(const ParamStore<T>& store) {
  WeightFile f;
  for (const auto& e : store.entries()) {
    WeightEntry w;
    w.name = e.spec.name;
    w.dtype = dtype_of<T>();
    for (auto d : e.tensor.shape().dims()) w.extents.push_back(std::uint32_t(d));
    w.bytes = detail::to_le_bytes<T>(e.tensor.data());
    f.entries.push_back(std::move(w));
  }
  return f;
}

/// Store with the layout of `manifest` and values from `file`. Entries are
/// matched by name; the first missing, extra, or mis-shaped tensor is
/// reported. Values of either dtype are converted to T.
template <Real T>
ParamStore<T> store_from_weight_file(const WeightFile& file, const ParamManifest& manifest) {
  std::map<std::string, const WeightEntry*, std::less<>> by_name;
  for (const auto& e : file.entries) by_name.emplace(e.name, &e);
  ParamStore<T> store;
  for (const auto& spec : manifest) {
    auto it = by_name.find(spec.name);
    if (it == by_name.end()) throw ConfigError("weight file is missing tensor " + spec.name);
    const WeightEntry& e = *it->second;
    std::vector<std::size_t> dims(e.extents.begin(), e.extents.end());
    const auto want = spec.shape.dims();
    if (!std::equal(dims.begin(), dims.end(), want.begin(), want.end())) {
      std::string got = "[";
      for (std::size_t i = 0; i < dims.size(); ++i) got += (i ? "," : "") + std::to_string(dims[i]);
      throw ConfigError("tensor " + spec.name + " has shape " + got + "] in the weight file, model expects " +
                        spec.shape.str());
    }
    std::vector<T> values;
    if (e.dtype == DType::kF32) {
      auto v = detail::from_le_bytes<float>(e.bytes);
      values.assign(v.begin(), v.end());
    } else {
      auto v = detail::from_le_bytes<double>(e.bytes);
      values.assign(v.begin(), v.end());
    }
    store.add(spec, Tensor<T>(spec.shape, std::move(values)));
    by_name.erase(it);
  }
  if (!by_name.empty()) throw ConfigError("weight file has unexpected tensor " + by_name.begin()->first);
  return store;
}

template <Real T>
void save_weights(const std::string& path, const ParamStore<T>& store) {
  write_bytes(path, serialize(to_weight_file(store)));
}

template <Real T>
ParamStore<T> load_weights(const std::string& path, const ParamManifest& manifest) {
  return store_from_weight_file<T>(parse_weight_file(read_bytes(path)), manifest);
}

}  // namespace txnet
