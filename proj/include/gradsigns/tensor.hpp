#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "gradsigns/error.hpp"

namespace gradsigns {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ", ";
    out << shape[i];
  }
  out << ')';
  return out.str();
}

// Dense row-major tensor of doubles. A rank-0 shape {} holds one scalar.
class Tensor {
 public:
  Tensor() : data_(1, 0.0) {}

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_size(shape_)) {
      throw shape_error("tensor data length " + std::to_string(data_.size()) +
                        " does not match shape " + shape_string(shape_));
    }
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

  static Tensor vector(std::vector<double> v) {
    Shape s{v.size()};
    return Tensor(std::move(s), std::move(v));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::vector<double>& storage() noexcept { return data_; }
  const std::vector<double>& storage() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double item() const {
    if (data_.size() != 1) throw shape_error("item() on tensor of shape " + shape_string(shape_));
    return data_[0];
  }

  // Same storage, new shape of identical size.
  Tensor reshaped(Shape shape) const {
    return Tensor(std::move(shape), data_);
  }

  // Rows [begin, end) along the leading axis.
  Tensor rows(std::size_t begin, std::size_t end) const {
    if (shape_.empty() || end > shape_[0] || begin > end) throw shape_error("row slice out of range");
    Shape s = shape_;
    s[0] = end - begin;
    const std::size_t stride = shape_size(shape_) / shape_[0];
    return Tensor(std::move(s), std::vector<double>(data_.begin() + static_cast<std::ptrdiff_t>(begin * stride),
                                                    data_.begin() + static_cast<std::ptrdiff_t>(end * stride)));
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  bool operator==(const Tensor&) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

// Gathers rows of `source` (leading axis) into a new tensor.
inline Tensor gather_rows(const Tensor& source, std::span<const std::size_t> indices) {
  if (source.rank() == 0) throw shape_error("gather_rows on scalar");
  const std::size_t stride = source.size() / source.dim(0);
  Shape s = source.shape();
  s[0] = indices.size();
  std::vector<double> out(indices.size() * stride);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] >= source.dim(0)) throw shape_error("gather_rows index out of range");
    std::copy_n(source.data().begin() + static_cast<std::ptrdiff_t>(indices[r] * stride), stride,
                out.begin() + static_cast<std::ptrdiff_t>(r * stride));
  }
  return Tensor(std::move(s), std::move(out));
}

}  // namespace gradsigns
