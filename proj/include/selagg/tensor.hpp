#pragma once

// Dense row-major tensors and the handful of kernels every other module uses.
// All kernels are pure and accumulate in a fixed order, so results are
// bit-identical across runs and thread counts.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "selagg/error.hpp"

namespace selagg {

using Dims = std::vector<std::size_t>;

inline std::size_t dims_product(const Dims& dims) {
  return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string dims_string(const Dims& dims) {
  std::string out = "[";
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(dims[i]);
  }
  return out + "]";
}

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Dims dims) : dims_(std::move(dims)), data_(dims_product(dims_), T{0}) {}
  Tensor(Dims dims, std::vector<T> data) : dims_(std::move(dims)), data_(std::move(data)) {
    require(dims_product(dims_) == data_.size(), ErrorKind::Shape,
            "tensor dims " + dims_string(dims_) + " do not match " + std::to_string(data_.size()) +
                " values");
  }
  Tensor(Dims dims, T fill) : dims_(std::move(dims)), data_(dims_product(dims_), fill) {}

  /// Builds a 2-D tensor from nested rows; every row must have the same length.
  static Tensor from_rows(std::initializer_list<std::initializer_list<T>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<T> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      require(row.size() == c, ErrorKind::Shape, "ragged rows");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(data));
  }

  static Tensor vector(std::vector<T> values) {
    const std::size_t n = values.size();
    return Tensor({n}, std::move(values));
  }

  const Dims& dims() const noexcept { return dims_; }
  std::size_t rank() const noexcept { return dims_.size(); }
  std::size_t dim(std::size_t axis) const { return dims_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  /// Number of rows when viewed as a matrix over the last axis.
  std::size_t rows() const noexcept {
    if (dims_.empty()) return 1;
    return dims_.back() == 0 ? dims_product(Dims(dims_.begin(), dims_.end() - 1)) : size() / dims_.back();
  }
  std::size_t cols() const noexcept { return dims_.empty() ? 1 : dims_.back(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  std::vector<T>& values() noexcept { return data_; }
  const std::vector<T>& values() const noexcept { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  const T& at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  std::span<T> row(std::size_t r) { return std::span<T>(data_).subspan(r * cols(), cols()); }
  std::span<const T> row(std::size_t r) const {
    return std::span<const T>(data_).subspan(r * cols(), cols());
  }

  Tensor reshaped(Dims dims) const {
    require(dims_product(dims) == size(), ErrorKind::Shape,
            "cannot reshape " + dims_string(dims_) + " to " + dims_string(dims));
    return Tensor(std::move(dims), data_);
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(dims_, std::move(out));
  }

  bool operator==(const Tensor& other) const = default;

 private:
  Dims dims_;
  std::vector<T> data_;
};

using DenseTensor = Tensor<float>;
using Tensor64 = Tensor<double>;

template <typename T>
bool all_finite(std::span<const T> values) {
  return std::all_of(values.begin(), values.end(), [](T v) { return std::isfinite(v); });
}

template <typename T>
void require_finite(const Tensor<T>& t, const std::string& what) {
  require(all_finite(t.data()), ErrorKind::Numeric, what + " contains NaN or Inf");
}

template <typename T>
void require_matrix(const Tensor<T>& t, const std::string& what) {
  require(t.rank() == 2, ErrorKind::Shape, what + " must be a matrix, got " + dims_string(t.dims()));
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_matrix(a, "matmul lhs");
  require_matrix(b, "matmul rhs");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  require(b.dim(0) == k, ErrorKind::Shape,
          "matmul inner dims differ: " + dims_string(a.dims()) + " x " + dims_string(b.dims()));
  Tensor<T> c({m, n});
  // i-k-j order; every c(i,j) still accumulates over k in ascending order.
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c.data().data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T aik = a.at(i, p);
      const T* brow = b.data().data() + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
    }
  }
  return c;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  require_matrix(a, "transpose");
  Tensor<T> out({a.dim(1), a.dim(0)});
  for (std::size_t i = 0; i < a.dim(0); ++i)
    for (std::size_t j = 0; j < a.dim(1); ++j) out.at(j, i) = a.at(i, j);
  return out;
}

/// x W + b, with b broadcast over rows. An empty bias is treated as zero.
template <typename T>
Tensor<T> affine(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  Tensor<T> y = matmul(x, w);
  if (b.empty()) return y;
  require(b.size() == y.cols(), ErrorKind::Shape, "bias length " + std::to_string(b.size()) +
                                                      " != output width " + std::to_string(y.cols()));
  for (std::size_t r = 0; r < y.rows(); ++r) {
    auto row = y.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += b[c];
  }
  return y;
}

template <typename T>
void add_inplace(Tensor<T>& a, const Tensor<T>& b) {
  require(a.dims() == b.dims(), ErrorKind::Shape,
          "add of " + dims_string(a.dims()) + " and " + dims_string(b.dims()));
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

/// Max-subtracted softmax of a contiguous slice, in place.
template <typename T>
void softmax_inplace(std::span<T> v) {
  if (v.empty()) return;
  for (T x : v) require(!std::isnan(x), ErrorKind::Numeric, "softmax input is NaN");
  const T mx = *std::max_element(v.begin(), v.end());
  require(std::isfinite(mx), ErrorKind::Numeric, "softmax input is not finite");
  T sum = 0;
  for (T& x : v) {
    x = std::exp(x - mx);
    sum += x;
  }
  for (T& x : v) x /= sum;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& v, std::size_t axis) {
  require(axis < v.rank(), ErrorKind::Shape, "softmax axis out of range");
  const std::size_t len = v.dim(axis);
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < v.rank(); ++i) inner *= v.dim(i);
  const std::size_t outer = len == 0 ? 0 : v.size() / (len * inner);
  Tensor<T> out = v;
  std::vector<T> slice(len);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      for (std::size_t j = 0; j < len; ++j) slice[j] = out[base + j * inner];
      softmax_inplace(std::span<T>(slice));
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] = slice[j];
    }
  }
  return out;
}

/// Normalizes each row over the last axis, then applies gamma/beta.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  const std::size_t d = x.cols();
  require(d > 0, ErrorKind::Shape, "layer_norm over an empty dimension");
  require(gamma.size() == d && beta.size() == d, ErrorKind::Shape,
          "layer_norm gamma/beta length must equal " + std::to_string(d));
  Tensor<T> out(x.dims());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto in = x.row(r);
    auto o = out.row(r);
    T mean = 0;
    for (T v : in) mean += v;
    mean /= static_cast<T>(d);
    T var = 0;
    for (T v : in) var += (v - mean) * (v - mean);
    var /= static_cast<T>(d);
    const T denom = std::sqrt(var + eps);
    for (std::size_t c = 0; c < d; ++c) {
      const T centred = in[c] - mean;
      const T normed = denom > T{0} ? centred / denom : T{0};
      o[c] = normed * gamma[c] + beta[c];
    }
  }
  return out;
}

template <typename T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x / std::sqrt(T(2))));
}

/// d/dx of x * Phi(x).
template <typename T>
T gelu_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x / std::sqrt(T(2))));
  const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * T(M_PI));
  return cdf + x * pdf;
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  Tensor<T> out = x;
  for (T& v : out.values()) v = gelu(v);
  return out;
}

}  // namespace selagg
