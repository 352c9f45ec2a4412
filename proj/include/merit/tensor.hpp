#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "merit/errors.hpp"
#include "merit/rng.hpp"

namespace merit {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape &shape);

/// Dense row-major array with an explicit shape.
///
/// Every dimension is positive and the element count equals the product of
/// the shape. The only empty tensor is the default-constructed one.
template <typename T> class Tensor {
  static_assert(std::is_floating_point_v<T>);

public:
  using value_type = T;

  Tensor() = default;

  /// Zero-filled tensor.
  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    data_.assign(checked_numel(shape_), T{0});
  }

  Tensor(Shape shape, T fill) : shape_(std::move(shape)) {
    data_.assign(checked_numel(shape_), fill);
  }

  /// Takes ownership of `values`; rejects size mismatch and non-finite
  /// entries.
  Tensor(Shape shape, std::vector<T> values)
      : shape_(std::move(shape)), data_(std::move(values)) {
    if (checked_numel(shape_) != data_.size()) {
      throw DimensionError("tensor data has " + std::to_string(data_.size()) +
                           " elements, shape " + shape_string(shape_) +
                           " needs " + std::to_string(checked_numel(shape_)));
    }
    for (T x : data_) {
      if (!std::isfinite(x)) {
        throw DomainError("tensor construction: non-finite element");
      }
    }
  }

  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::vector<T> values) {
    return Tensor({rows, cols}, std::move(values));
  }

  static Tensor vector(std::vector<T> values) {
    const std::size_t n = values.size();
    return Tensor({n}, std::move(values));
  }

  const Shape &shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }

  /// Leading dimension of a 2-D tensor.
  std::size_t rows() const { return shape_.at(0); }
  std::size_t cols() const { return shape_.at(1); }

  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  T *data() { return data_.data(); }
  const T *data() const { return data_.data(); }

  T &operator[](std::size_t i) { return data_[i]; }
  const T &operator[](std::size_t i) const { return data_[i]; }

  T &operator()(std::size_t i, std::size_t j) {
    return data_[i * shape_[1] + j];
  }
  const T &operator()(std::size_t i, std::size_t j) const {
    return data_[i * shape_[1] + j];
  }

  std::span<T> row(std::size_t i) {
    return std::span<T>(data_).subspan(i * shape_[1], shape_[1]);
  }
  std::span<const T> row(std::size_t i) const {
    return std::span<const T>(data_).subspan(i * shape_[1], shape_[1]);
  }

  void fill(T x) { std::fill(data_.begin(), data_.end(), x); }

  bool all_finite() const {
    for (T x : data_) {
      if (!std::isfinite(x)) {
        return false;
      }
    }
    return true;
  }

  /// Exact equality of shape and every element.
  friend bool operator==(const Tensor &a, const Tensor &b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

private:
  static std::size_t checked_numel(const Shape &shape) {
    if (shape.empty()) {
      throw DimensionError("tensor shape must have at least one dimension");
    }
    std::size_t n = 1;
    for (std::size_t d : shape) {
      if (d == 0) {
        throw DimensionError("tensor dimensions must be positive, got " +
                             shape_string(shape));
      }
      n *= d;
    }
    return n;
  }

  Shape shape_;
  std::vector<T> data_;
};

/// Debug-build check that an operation produced only finite values. Compiled
/// out under NDEBUG.
template <typename T>
inline void debug_check_finite([[maybe_unused]] const Tensor<T> &t,
                               [[maybe_unused]] const char *op) {
#ifndef NDEBUG
  if (!t.all_finite()) {
    throw DomainError(std::string(op) + ": produced a non-finite element");
  }
#endif
}

// ---- products -------------------------------------------------------------
// Every product accumulates each output element over the inner index in
// ascending order, so results do not depend on blocking or vector width.

/// a[m x k] * b[k x n].
template <typename T> Tensor<T> matmul(const Tensor<T> &a, const Tensor<T> &b);
/// a[m x k] * b[n x k]^T.
template <typename T>
Tensor<T> matmul_nt(const Tensor<T> &a, const Tensor<T> &b);
/// a[k x m]^T * b[k x n].
template <typename T>
Tensor<T> matmul_tn(const Tensor<T> &a, const Tensor<T> &b);
template <typename T> Tensor<T> transpose(const Tensor<T> &a);

/// c[m x n] += a[m x k] * b[k x n] using raw row-major buffers.
template <typename T>
void gemm_accumulate(std::span<const T> a, std::span<const T> b,
                     std::span<T> c, std::size_t m, std::size_t k,
                     std::size_t n);

// ---- norms ------------------------------------------------------------------

/// Largest absolute value.
template <typename T> T max_norm(const Tensor<T> &t);
template <typename T> T max_norm(std::span<const T> values);
template <typename T> T l2_norm(const Tensor<T> &t);
template <typename T> T l2_norm(std::span<const T> values);
template <typename T> Tensor<T> row_max_norms(const Tensor<T> &m);
template <typename T> Tensor<T> col_max_norms(const Tensor<T> &m);

// ---- elementwise ------------------------------------------------------------

/// Per-row softmax with max subtraction.
template <typename T> Tensor<T> softmax_rows(const Tensor<T> &m);

/// sign(x) * min(|x|, limit) per element. limit > 0.
template <typename T> Tensor<T> clip_elementwise(const Tensor<T> &t, T limit);

template <typename T> Tensor<T> scaled(const Tensor<T> &t, T alpha);
/// y += alpha * x.
template <typename T> void axpy(T alpha, const Tensor<T> &x, Tensor<T> &y);

// ---- initialization ---------------------------------------------------------

/// Draws numel values from rng.normal() in row-major order and maps each z
/// to mean + std * z. std >= 0.
template <typename T>
Tensor<T> seeded_normal(const Shape &shape, T mean, T std, SeededRng &rng);

} // namespace merit
