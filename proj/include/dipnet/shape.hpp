#pragma once

#include <array>
#include <cstdint>
#include <initializer_list>
#include <string>

#include "dipnet/error.hpp"

namespace dipnet {

// Tensor extents, rank 1..4.  Rank-4 tensors follow NCHW layout by convention.
// A "scalar" in this codebase is a rank-1 tensor of extent 1.
class Shape {
 public:
  static constexpr int kMaxRank = 4;

  Shape() = default;

  Shape(std::initializer_list<int64_t> dims) {
    if (dims.size() < 1 || dims.size() > kMaxRank)
      throw ShapeError("shape rank must be 1..4, got " + std::to_string(dims.size()));
    rank_ = static_cast<int>(dims.size());
    int i = 0;
    for (int64_t d : dims) {
      if (d <= 0) throw ShapeError("shape extents must be positive");
      dims_[i++] = d;
    }
  }

  static Shape scalar() { return Shape{1}; }

  int rank() const { return rank_; }

  int64_t operator[](int axis) const {
    if (axis < 0 || axis >= rank_) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + str());
    return dims_[axis];
  }

  int64_t numel() const {
    int64_t n = 1;
    for (int i = 0; i < rank_; ++i) n *= dims_[i];
    return n;
  }

  bool operator==(const Shape& o) const {
    if (rank_ != o.rank_) return false;
    for (int i = 0; i < rank_; ++i)
      if (dims_[i] != o.dims_[i]) return false;
    return true;
  }
  bool operator!=(const Shape& o) const { return !(*this == o); }

  std::string str() const {
    std::string s = "(";
    for (int i = 0; i < rank_; ++i) {
      if (i) s += ",";
      s += std::to_string(dims_[i]);
    }
    return s + ")";
  }

 private:
  int rank_ = 0;
  std::array<int64_t, kMaxRank> dims_{};
};

}  // namespace dipnet
