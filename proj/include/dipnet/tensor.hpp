#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "dipnet/shape.hpp"

namespace dipnet {

// Dense value-semantic tensor.  T is float in training builds and double in
// gradient-check builds; the whole numeric stack is templated on it.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape s, T fill = T(0)) : shape_(s), data_(static_cast<size_t>(s.numel()), fill) {}

  Tensor(Shape s, std::vector<T> values) : shape_(s), data_(std::move(values)) {
    if (static_cast<int64_t>(data_.size()) != shape_.numel())
      throw ShapeError("tensor data size " + std::to_string(data_.size()) + " does not match " + shape_.str());
  }

  static Tensor scalar(T v) { return Tensor(Shape::scalar(), std::vector<T>{v}); }

  const Shape& shape() const { return shape_; }
  int64_t numel() const { return shape_.numel(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  T& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  T operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  // NCHW addressing for rank-4 tensors.
  T& at4(int64_t n, int64_t c, int64_t h, int64_t w) {
    return data_[static_cast<size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
  }
  T at4(int64_t n, int64_t c, int64_t h, int64_t w) const {
    return data_[static_cast<size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
  }

  bool all_finite() const {
    for (T v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  T item() const {
    if (numel() != 1) throw ShapeError("item() on non-scalar tensor " + shape_.str());
    return data_[0];
  }

  bool same_values(const Tensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape_ = shape_;
    out.data_.resize(data_.size());
    for (size_t i = 0; i < data_.size(); ++i) out.data_[i] = static_cast<U>(data_[i]);
    return out;
  }

 private:
  template <typename U>
  friend class Tensor;

  Shape shape_;
  std::vector<T> data_;
};

}  // namespace dipnet
