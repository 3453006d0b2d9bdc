#pragma once

#include <array>
#include <cstddef>
#include <initializer_list>
#include <limits>
#include <span>
#include <sstream>
#include <string>

#include "txnet/error.hpp"

namespace txnet {

/// Up to four extents. Rank-4 tensors are N x C x H x W; lower ranks are
/// treated as if padded with leading unit extents (see nchw()).
class Shape {
 public:
  static constexpr std::size_t kMaxRank = 4;

  Shape() = default;
  Shape(std::initializer_list<std::size_t> dims) : Shape(std::span<const std::size_t>(dims.begin(), dims.size())) {}
  explicit Shape(std::span<const std::size_t> dims) {
    if (dims.empty() || dims.size() > kMaxRank) {
      throw ShapeError("shape rank must be between 1 and 4, got " + std::to_string(dims.size()));
    }
    rank_ = dims.size();
    for (std::size_t i = 0; i < rank_; ++i) dims_[i] = dims[i];
    validate();
  }

  std::size_t rank() const { return rank_; }
  std::size_t operator[](std::size_t i) const { return dims_[i]; }
  std::span<const std::size_t> dims() const { return {dims_.data(), rank_}; }

  std::size_t numel() const {
    std::size_t n = 1;
    for (std::size_t i = 0; i < rank_; ++i) n *= dims_[i];
    return n;
  }

  std::array<std::size_t, 4> nchw() const {
    std::array<std::size_t, 4> out{1, 1, 1, 1};
    for (std::size_t i = 0; i < rank_; ++i) out[4 - rank_ + i] = dims_[i];
    return out;
  }

  bool operator==(const Shape& o) const {
    if (rank_ != o.rank_) return false;
    for (std::size_t i = 0; i < rank_; ++i)
      if (dims_[i] != o.dims_[i]) return false;
    return true;
  }

  std::string str() const {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < rank_; ++i) os << (i ? "," : "") << dims_[i];
    os << ']';
    return os.str();
  }

 private:
  void validate() const {
    std::size_t n = 1;
    for (std::size_t i = 0; i < rank_; ++i) {
      if (dims_[i] == 0) throw SizeError("zero extent in shape " + str());
      if (n > std::numeric_limits<std::size_t>::max() / dims_[i]) {
        throw SizeError("element count overflows in shape " + str());
      }
      n *= dims_[i];
    }
    // Keep byte counts representable too.
    if (n > std::numeric_limits<std::size_t>::max() / sizeof(double)) {
      throw SizeError("element count overflows in shape " + str());
    }
  }

  std::array<std::size_t, kMaxRank> dims_{};
  std::size_t rank_ = 0;
};

}  // namespace txnet
