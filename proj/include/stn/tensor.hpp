#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <memory>
#include <string>
#include <vector>

#include "stn/common.hpp"

namespace stn {

// Row-major shape, rank 1..3.
struct Shape {
  int rank = 0;
  std::array<long, 3> d{0, 0, 0};

  Shape() = default;
  Shape(long n) : rank(1), d{n, 0, 0} {}
  Shape(long r, long c) : rank(2), d{r, c, 0} {}
  Shape(long a, long b, long c) : rank(3), d{a, b, c} {}

  long numel() const {
    long n = 1;
    for (int i = 0; i < rank; ++i) n *= d[i];
    return rank == 0 ? 0 : n;
  }
  long rows() const { return rank >= 1 ? d[0] : 0; }
  long cols() const { return rank >= 2 ? d[1] : 1; }

  bool operator==(const Shape& o) const {
    if (rank != o.rank) return false;
    for (int i = 0; i < rank; ++i)
      if (d[i] != o.d[i]) return false;
    return true;
  }
  bool operator!=(const Shape& o) const { return !(*this == o); }

  std::string str() const {
    std::string s = "[";
    for (int i = 0; i < rank; ++i) {
      if (i) s += "x";
      s += std::to_string(d[i]);
    }
    return s + "]";
  }
};

// Dense row-major tensor. Copies share the underlying buffer (handle
// semantics, like the big frameworks); use clone() for a deep copy. All
// graph operations allocate fresh outputs, so sharing is safe there.
template <class S>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape sh)
      : shape_(sh), buf_(std::make_shared<std::vector<S>>(sh.numel(), S(0))) {}
  Tensor(Shape sh, std::vector<S> values)
      : shape_(sh), buf_(std::make_shared<std::vector<S>>(std::move(values))) {
    if ((long)buf_->size() != sh.numel())
      fail_shape("Tensor", "numel", sh.numel(), (long)buf_->size());
  }

  static Tensor zeros(Shape sh) { return Tensor(sh); }
  static Tensor full(Shape sh, S v) {
    Tensor t(sh);
    std::fill(t.begin(), t.end(), v);
    return t;
  }

  bool empty() const { return !buf_; }
  const Shape& shape() const { return shape_; }
  long numel() const { return shape_.numel(); }
  long rows() const { return shape_.rows(); }
  long cols() const { return shape_.cols(); }

  S* data() { return buf_->data(); }
  const S* data() const { return buf_->data(); }
  S* begin() { return data(); }
  S* end() { return data() + numel(); }
  const S* begin() const { return data(); }
  const S* end() const { return data() + numel(); }

  S& operator[](long i) { return (*buf_)[i]; }
  const S& operator[](long i) const { return (*buf_)[i]; }
  S& operator()(long i, long j) { return (*buf_)[i * shape_.d[1] + j]; }
  const S& operator()(long i, long j) const {
    return (*buf_)[i * shape_.d[1] + j];
  }

  Tensor clone() const {
    Tensor t;
    t.shape_ = shape_;
    t.buf_ = std::make_shared<std::vector<S>>(*buf_);
    return t;
  }

  // Deep copy with element type conversion.
  template <class T>
  Tensor<T> cast() const {
    Tensor<T> t{shape_};
    for (long i = 0; i < numel(); ++i) t[i] = static_cast<T>((*buf_)[i]);
    return t;
  }

  void fill(S v) { std::fill(begin(), end(), v); }
  void zero() { fill(S(0)); }

  void add_(const Tensor& o) {
    const S* p = o.data();
    S* q = data();
    for (long i = 0, n = numel(); i < n; ++i) q[i] += p[i];
  }
  void axpy_(S a, const Tensor& o) {
    const S* p = o.data();
    S* q = data();
    for (long i = 0, n = numel(); i < n; ++i) q[i] += a * p[i];
  }

  bool all_finite() const {
    for (const S& v : *buf_)
      if (!std::isfinite((double)v)) return false;
    return true;
  }

 private:
  Shape shape_;
  std::shared_ptr<std::vector<S>> buf_;

  template <class T>
  friend class Tensor;
};

template <class S>
inline void check_same_shape(const char* where, const Tensor<S>& a,
                             const Tensor<S>& b) {
  if (a.shape() != b.shape())
    throw Error(ErrorKind::Shape, std::string(where) + ": shape mismatch " +
                                      a.shape().str() + " vs " +
                                      b.shape().str());
}

template <class S>
inline double max_abs_diff(const Tensor<S>& a, const Tensor<S>& b) {
  check_same_shape("max_abs_diff", a, b);
  double m = 0;
  for (long i = 0; i < a.numel(); ++i)
    m = std::max(m, std::abs((double)a[i] - (double)b[i]));
  return m;
}

}  // namespace stn
