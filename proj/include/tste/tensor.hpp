#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace tste {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};
class ParamError : public Error {
 public:
  using Error::Error;
};
class UsageError : public Error {
 public:
  using Error::Error;
};
class ParseError : public Error {
 public:
  using Error::Error;
};
class LookupError : public Error {
 public:
  using Error::Error;
};
class RankError : public Error {
 public:
  using Error::Error;
};
class DegenerateInputError : public Error {
 public:
  using Error::Error;
};
class DegenerateTaskError : public Error {
 public:
  using Error::Error;
};
class SamplingError : public Error {
 public:
  using Error::Error;
};
class ConfigError : public Error {
 public:
  using Error::Error;
};
class EvalError : public Error {
 public:
  using Error::Error;
};
class IoError : public Error {
 public:
  using Error::Error;
};

/// Dense row-major float32 array with explicit dimensions.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> dims) : dims_(std::move(dims)) {
    data_.assign(static_cast<size_t>(check_dims(dims_)), 0.0f);
  }

  Tensor(std::vector<int> dims, std::vector<float> data) : dims_(std::move(dims)), data_(std::move(data)) {
    if (check_dims(dims_) != static_cast<int64_t>(data_.size()))
      throw ShapeError("tensor data length does not match dims");
  }

  static Tensor zeros(std::vector<int> dims) { return Tensor(std::move(dims)); }

  static Tensor full(std::vector<int> dims, float v) {
    Tensor t(std::move(dims));
    for (auto& x : t.data_) x = v;
    return t;
  }

  static Tensor scalar(float v) { return Tensor({1}, {v}); }

  int rank() const { return static_cast<int>(dims_.size()); }
  const std::vector<int>& dims() const { return dims_; }
  int dim(int i) const { return dims_.at(static_cast<size_t>(i)); }
  int64_t size() const { return static_cast<int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }
  std::vector<float>& raw() { return data_; }
  const std::vector<float>& raw() const { return data_; }

  float& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  float operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  // 2-D and 3-D accessors; callers guarantee rank.
  float& at(int r, int c) { return data_[static_cast<size_t>(r) * dims_[1] + c]; }
  float at(int r, int c) const { return data_[static_cast<size_t>(r) * dims_[1] + c]; }
  float& at(int i, int j, int k) {
    return data_[(static_cast<size_t>(i) * dims_[1] + j) * dims_[2] + k];
  }
  float at(int i, int j, int k) const {
    return data_[(static_cast<size_t>(i) * dims_[1] + j) * dims_[2] + k];
  }

  float* row(int r) { return data_.data() + static_cast<size_t>(r) * dims_[1]; }
  const float* row(int r) const { return data_.data() + static_cast<size_t>(r) * dims_[1]; }

  bool same_dims(const Tensor& o) const { return dims_ == o.dims_; }

  bool all_finite() const {
    for (float v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  Tensor reshaped(std::vector<int> dims) const {
    Tensor t;
    t.dims_ = std::move(dims);
    if (check_dims(t.dims_) != size()) throw ShapeError("reshape changes element count");
    t.data_ = data_;
    return t;
  }

  std::string shape_str() const {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < dims_.size(); ++i) os << (i ? "," : "") << dims_[i];
    os << ']';
    return os.str();
  }

 private:
  static int64_t check_dims(const std::vector<int>& dims) {
    int64_t n = 1;
    for (int d : dims) {
      if (d <= 0) throw ShapeError("tensor dims must be positive");
      n *= d;
    }
    return n;
  }

  std::vector<int> dims_;
  std::vector<float> data_;
};

inline bool bit_equal(const Tensor& a, const Tensor& b) {
  if (!a.same_dims(b)) return false;
  for (int64_t i = 0; i < a.size(); ++i)
    if (a[i] != b[i]) return false;
  return true;
}

// ---------------------------------------------------------------------------
// Flat float kernels. Inner loops stay stride-1 and accumulation order fixed,
// so results are reproducible run to run.
// ---------------------------------------------------------------------------
namespace kern {

inline float dot(int n, const float* a, const float* b) {
  float s0 = 0.f, s1 = 0.f, s2 = 0.f, s3 = 0.f;
  int i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  float s = (s0 + s1) + (s2 + s3);
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

inline void axpy(int n, float a, const float* x, float* y) {
  for (int i = 0; i < n; ++i) y[i] += a * x[i];
}

// C[r,c] += sum_k A[r,k] * B[k,c]
inline void gemm_nn_acc(int R, int K, int C, const float* A, const float* B, float* Cm) {
  for (int r = 0; r < R; ++r) {
    const float* arow = A + static_cast<size_t>(r) * K;
    float* crow = Cm + static_cast<size_t>(r) * C;
    for (int k = 0; k < K; ++k) {
      const float a = arow[k];
      if (a == 0.0f) continue;
      axpy(C, a, B + static_cast<size_t>(k) * C, crow);
    }
  }
}

// C[r,c] += sum_k A[r,k] * B[c,k]
inline void gemm_nt_acc(int R, int K, int C, const float* A, const float* B, float* Cm) {
  for (int r = 0; r < R; ++r) {
    const float* arow = A + static_cast<size_t>(r) * K;
    float* crow = Cm + static_cast<size_t>(r) * C;
    for (int c = 0; c < C; ++c) crow[c] += dot(K, arow, B + static_cast<size_t>(c) * K);
  }
}

// C[r,c] += sum_k A[k,r] * B[k,c]
inline void gemm_tn_acc(int R, int K, int C, const float* A, const float* B, float* Cm) {
  for (int k = 0; k < K; ++k) {
    const float* arow = A + static_cast<size_t>(k) * R;
    const float* brow = B + static_cast<size_t>(k) * C;
    for (int r = 0; r < R; ++r) {
      const float a = arow[r];
      if (a == 0.0f) continue;
      axpy(C, a, brow, Cm + static_cast<size_t>(r) * C);
    }
  }
}

inline double sum_f64(int64_t n, const float* x) {
  double s = 0.0;
  for (int64_t i = 0; i < n; ++i) s += x[i];
  return s;
}

inline double norm_f64(int64_t n, const float* x) {
  double s = 0.0;
  for (int64_t i = 0; i < n; ++i) s += static_cast<double>(x[i]) * x[i];
  return std::sqrt(s);
}

inline double dot_f64(int64_t n, const float* a, const float* b) {
  double s = 0.0;
  for (int64_t i = 0; i < n; ++i) s += static_cast<double>(a[i]) * b[i];
  return s;
}

}  // namespace kern

}  // namespace tste
