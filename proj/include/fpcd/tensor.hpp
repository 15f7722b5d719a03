#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "fpcd/error.hpp"

namespace fpcd {

using Dims = std::vector<int64_t>;

inline int64_t numel(const Dims& dims) {
  int64_t n = 1;
  for (int64_t d : dims) {
    if (d <= 0) throw DimError("non-positive dimension in shape");
    n *= d;
  }
  return n;
}

inline std::string dims_str(const Dims& dims) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < dims.size(); ++i) os << (i ? "," : "") << dims[i];
  os << ']';
  return os.str();
}

// Dense row-major f64 tensor. Plain value type: copies copy the buffer.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Dims dims) : dims_(std::move(dims)), data_(numel(dims_), 0.0) {}
  Tensor(Dims dims, std::vector<double> data) : dims_(std::move(dims)), data_(std::move(data)) {
    if (static_cast<int64_t>(data_.size()) != numel(dims_))
      throw DimError("data length " + std::to_string(data_.size()) + " does not match shape " +
                     dims_str(dims_));
  }

  static Tensor zeros(Dims dims) { return Tensor(std::move(dims)); }
  static Tensor full(Dims dims, double v) {
    Tensor t(std::move(dims));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }
  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  const Dims& dims() const { return dims_; }
  int64_t size() const { return static_cast<int64_t>(data_.size()); }
  int64_t ndim() const { return static_cast<int64_t>(dims_.size()); }
  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  bool same_shape(const Tensor& o) const { return dims_ == o.dims_; }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

 private:
  Dims dims_;
  std::vector<double> data_;
};

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b))
    throw DimError(std::string(op) + ": shape mismatch " + dims_str(a.dims()) + " vs " +
                   dims_str(b.dims()));
}

}  // namespace fpcd
