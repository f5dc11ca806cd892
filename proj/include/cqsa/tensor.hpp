#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include <fmt/format.h>

#include "cqsa/errors.hpp"

namespace cqsa {

struct Shape4 {
  std::int64_t batch = 1;
  std::int64_t heads = 1;
  std::int64_t tokens = 1;
  std::int64_t dim = 1;

  std::int64_t planes() const { return batch * heads; }
  std::int64_t elements() const { return batch * heads * tokens * dim; }
  friend bool operator==(const Shape4&, const Shape4&) = default;
};

/// Dense (batch, heads, tokens, dim) array, row-major.
template <typename T>
class Tensor4 {
 public:
  Tensor4() = default;
  explicit Tensor4(Shape4 shape, T fill = T(0)) : shape_(shape) {
    if (shape.batch < 1 || shape.heads < 1 || shape.tokens < 1 || shape.dim < 1) {
      throw PreconditionError(fmt::format("tensor dims must be >= 1, got ({},{},{},{})",
                                          shape.batch, shape.heads, shape.tokens, shape.dim));
    }
    data_.assign(static_cast<std::size_t>(shape.elements()), fill);
  }
  Tensor4(Shape4 shape, std::vector<T> data) : Tensor4(shape) {
    if (data.size() != data_.size()) {
      throw PreconditionError(
          fmt::format("tensor payload has {} values, shape needs {}", data.size(), data_.size()));
    }
    data_ = std::move(data);
  }

  const Shape4& shape() const noexcept { return shape_; }
  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }

  T& operator()(std::int64_t b, std::int64_t h, std::int64_t n, std::int64_t d) {
    return data_[index(b, h, n, d)];
  }
  const T& operator()(std::int64_t b, std::int64_t h, std::int64_t n, std::int64_t d) const {
    return data_[index(b, h, n, d)];
  }

  /// Contiguous (tokens x dim) slab of one (batch, head) pair.
  std::span<T> plane(std::int64_t p) {
    return std::span<T>(data_).subspan(static_cast<std::size_t>(p * plane_size()),
                                       static_cast<std::size_t>(plane_size()));
  }
  std::span<const T> plane(std::int64_t p) const {
    return std::span<const T>(data_).subspan(static_cast<std::size_t>(p * plane_size()),
                                             static_cast<std::size_t>(plane_size()));
  }
  std::int64_t plane_size() const { return shape_.tokens * shape_.dim; }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

 private:
  std::size_t index(std::int64_t b, std::int64_t h, std::int64_t n, std::int64_t d) const {
    return static_cast<std::size_t>(((b * shape_.heads + h) * shape_.tokens + n) * shape_.dim + d);
  }

  Shape4 shape_;
  std::vector<T> data_;
};

/// max|a - b| / max|reference|. Shapes must match.
template <typename T>
double max_relative_error(std::span<const T> actual, std::span<const T> reference) {
  if (actual.size() != reference.size()) throw PreconditionError("size mismatch in error metric");
  double diff = 0.0;
  double scale = 0.0;
  for (std::size_t i = 0; i < actual.size(); ++i) {
    diff = std::max(diff, std::abs(static_cast<double>(actual[i]) - static_cast<double>(reference[i])));
    scale = std::max(scale, std::abs(static_cast<double>(reference[i])));
  }
  if (scale == 0.0) return diff;
  return diff / scale;
}

template <typename T>
double max_relative_error(const Tensor4<T>& actual, const Tensor4<T>& reference) {
  if (!(actual.shape() == reference.shape())) throw PreconditionError("shape mismatch in error metric");
  return max_relative_error<T>(actual.data(), reference.data());
}

}  // namespace cqsa
