#include "merit/tensor.hpp"

#include <cmath>
#include <sstream>

namespace merit {

std::string shape_string(const Shape &shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    os << (i ? "x" : "") << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

template <typename T>
void require_matrix(const Tensor<T> &t, const char *op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a 2-D tensor, got " +
                         shape_string(t.shape()));
  }
}

template <typename T>
void require_nonempty(std::span<const T> values, const char *op) {
  if (values.empty()) {
    throw DomainError(std::string(op) + ": empty tensor");
  }
}

} // namespace

template <typename T>
void gemm_accumulate(std::span<const T> a, std::span<const T> b,
                     std::span<T> c, std::size_t m, std::size_t k,
                     std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T *ci = c.data() + i * n;
    const T *ai = a.data() + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = ai[p];
      const T *bp = b.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) {
        ci[j] += aip * bp[j];
      }
    }
  }
}

template <typename T> Tensor<T> matmul(const Tensor<T> &a, const Tensor<T> &b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions differ, " +
                         shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  Tensor<T> c({a.rows(), b.cols()});
  gemm_accumulate<T>(a.values(), b.values(), c.values(), a.rows(), a.cols(),
                     b.cols());
  debug_check_finite(c, "matmul");
  return c;
}

template <typename T>
Tensor<T> matmul_nt(const Tensor<T> &a, const Tensor<T> &b) {
  require_matrix(a, "matmul_nt");
  require_matrix(b, "matmul_nt");
  if (a.cols() != b.cols()) {
    throw DimensionError("matmul_nt: inner dimensions differ, " +
                         shape_string(a.shape()) + " x " +
                         shape_string(b.shape()) + "^T");
  }
  return matmul(a, transpose(b));
}

template <typename T>
Tensor<T> matmul_tn(const Tensor<T> &a, const Tensor<T> &b) {
  require_matrix(a, "matmul_tn");
  require_matrix(b, "matmul_tn");
  if (a.rows() != b.rows()) {
    throw DimensionError("matmul_tn: inner dimensions differ, " +
                         shape_string(a.shape()) + "^T x " +
                         shape_string(b.shape()));
  }
  const std::size_t k = a.rows();
  const std::size_t m = a.cols();
  const std::size_t n = b.cols();
  Tensor<T> c({m, n});
  for (std::size_t p = 0; p < k; ++p) {
    const T *ap = a.data() + p * m;
    const T *bp = b.data() + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T api = ap[i];
      T *ci = c.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) {
        ci[j] += api * bp[j];
      }
    }
  }
  debug_check_finite(c, "matmul_tn");
  return c;
}

template <typename T> Tensor<T> transpose(const Tensor<T> &a) {
  require_matrix(a, "transpose");
  Tensor<T> t({a.cols(), a.rows()});
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < a.cols(); ++j) {
      t(j, i) = a(i, j);
    }
  }
  return t;
}

template <typename T> T max_norm(std::span<const T> values) {
  require_nonempty(values, "max_norm");
  T best = 0;
  for (T x : values) {
    best = std::max(best, std::abs(x));
  }
  return best;
}

template <typename T> T max_norm(const Tensor<T> &t) {
  return max_norm<T>(t.values());
}

template <typename T> T l2_norm(std::span<const T> values) {
  require_nonempty(values, "l2_norm");
  double sum = 0.0;
  for (T x : values) {
    sum += static_cast<double>(x) * static_cast<double>(x);
  }
  return static_cast<T>(std::sqrt(sum));
}

template <typename T> T l2_norm(const Tensor<T> &t) {
  return l2_norm<T>(t.values());
}

template <typename T> Tensor<T> row_max_norms(const Tensor<T> &m) {
  require_matrix(m, "row_max_norms");
  Tensor<T> out({m.rows()});
  for (std::size_t i = 0; i < m.rows(); ++i) {
    out[i] = max_norm<T>(m.row(i));
  }
  return out;
}

template <typename T> Tensor<T> col_max_norms(const Tensor<T> &m) {
  require_matrix(m, "col_max_norms");
  Tensor<T> out({m.cols()});
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) {
      out[j] = std::max(out[j], std::abs(m(i, j)));
    }
  }
  return out;
}

template <typename T> Tensor<T> softmax_rows(const Tensor<T> &m) {
  require_matrix(m, "softmax_rows");
  Tensor<T> out(m.shape());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto in = m.row(i);
    auto dst = out.row(i);
    T top = in[0];
    for (T x : in) {
      top = std::max(top, x);
    }
    T sum = 0;
    for (std::size_t j = 0; j < in.size(); ++j) {
      dst[j] = std::exp(in[j] - top);
      sum += dst[j];
    }
    const T inv = T{1} / sum;
    for (T &x : dst) {
      x *= inv;
    }
  }
  debug_check_finite(out, "softmax_rows");
  return out;
}

template <typename T> Tensor<T> clip_elementwise(const Tensor<T> &t, T limit) {
  if (!(limit > 0)) {
    throw DomainError("clip_elementwise: limit must be positive");
  }
  Tensor<T> out = t;
  for (T &x : out.values()) {
    x = std::clamp(x, -limit, limit);
  }
  return out;
}

template <typename T> Tensor<T> scaled(const Tensor<T> &t, T alpha) {
  Tensor<T> out = t;
  for (T &x : out.values()) {
    x *= alpha;
  }
  debug_check_finite(out, "scaled");
  return out;
}

template <typename T> void axpy(T alpha, const Tensor<T> &x, Tensor<T> &y) {
  if (x.shape() != y.shape()) {
    throw DimensionError("axpy: shapes differ, " + shape_string(x.shape()) +
                         " vs " + shape_string(y.shape()));
  }
  for (std::size_t i = 0; i < x.numel(); ++i) {
    y[i] += alpha * x[i];
  }
  debug_check_finite(y, "axpy");
}

template <typename T>
Tensor<T> seeded_normal(const Shape &shape, T mean, T std, SeededRng &rng) {
  if (!(std >= 0)) {
    throw DomainError("seeded_normal: std must be non-negative");
  }
  Tensor<T> out(shape);
  for (T &x : out.values()) {
    x = mean + std * static_cast<T>(rng.normal());
  }
  return out;
}

#define MERIT_INSTANTIATE_TENSOR_OPS(T)                                        \
  template void gemm_accumulate<T>(std::span<const T>, std::span<const T>,     \
                                   std::span<T>, std::size_t, std::size_t,     \
                                   std::size_t);                               \
  template Tensor<T> matmul<T>(const Tensor<T> &, const Tensor<T> &);          \
  template Tensor<T> matmul_nt<T>(const Tensor<T> &, const Tensor<T> &);       \
  template Tensor<T> matmul_tn<T>(const Tensor<T> &, const Tensor<T> &);       \
  template Tensor<T> transpose<T>(const Tensor<T> &);                          \
  template T max_norm<T>(std::span<const T>);                                  \
  template T max_norm<T>(const Tensor<T> &);                                   \
  template T l2_norm<T>(std::span<const T>);                                   \
  template T l2_norm<T>(const Tensor<T> &);                                    \
  template Tensor<T> row_max_norms<T>(const Tensor<T> &);                      \
  template Tensor<T> col_max_norms<T>(const Tensor<T> &);                      \
  template Tensor<T> softmax_rows<T>(const Tensor<T> &);                       \
  template Tensor<T> clip_elementwise<T>(const Tensor<T> &, T);                \
  template Tensor<T> scaled<T>(const Tensor<T> &, T);                          \
  template void axpy<T>(T, const Tensor<T> &, Tensor<T> &);                    \
  template Tensor<T> seeded_normal<T>(const Shape &, T, T, SeededRng &);

MERIT_INSTANTIATE_TENSOR_OPS(float)
MERIT_INSTANTIATE_TENSOR_OPS(double)

#undef MERIT_INSTANTIATE_TENSOR_OPS

} // namespace merit
