#pragma once

// Dense rank-4 feature tensor in (n, c, h, w) row-major layout.
//
// All arithmetic runs in double precision. A tensor tagged F32 holds values
// that are exactly representable in single precision: constructors and every
// producing operation quantize F32 results through a float round-trip, so
// serializing an F32 tensor to 32-bit payloads is lossless.

#include <string>
#include <vector>

#include "dycaf/common.hpp"

namespace dycaf {

enum class Dtype { F32, F64 };

inline const char* dtype_name(Dtype dt) { return dt == Dtype::F32 ? "f32" : "f64"; }

struct Shape4 {
  i64 n = 0;
  i64 c = 0;
  i64 h = 0;
  i64 w = 0;

  i64 numel() const { return n * c * h * w; }
  bool operator==(const Shape4& o) const = default;
  std::string str() const;
};

class Tensor4 {
 public:
  Tensor4() = default;  // empty sentinel, numel 0

  // Zero-filled tensor. All dims must be >= 1.
  explicit Tensor4(Shape4 shape, Dtype dtype = Dtype::F64);

  static Tensor4 full(Shape4 shape, double value, Dtype dtype = Dtype::F64);
  static Tensor4 zeros_like(const Tensor4& other);

  // Takes ownership of `data`; length must equal shape.numel() and every
  // element must be finite.
  static Tensor4 from_vector(Shape4 shape, std::vector<double> data,
                             Dtype dtype = Dtype::F64);

  const Shape4& shape() const { return shape_; }
  Dtype dtype() const { return dtype_; }
  i64 numel() const { return static_cast<i64>(data_.size()); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  double at(i64 n, i64 c, i64 y, i64 x) const {
    return data_[offset(n, c, y, x)];
  }
  double& at(i64 n, i64 c, i64 y, i64 x) { return data_[offset(n, c, y, x)]; }

  i64 offset(i64 n, i64 c, i64 y, i64 x) const {
    return ((n * shape_.c + c) * shape_.h + y) * shape_.w + x;
  }

  bool same_shape(const Tensor4& o) const { return shape_ == o.shape_; }

  // Rounds every element through float when the tensor is tagged F32.
  void quantize();

 private:
  Shape4 shape_{};
  Dtype dtype_ = Dtype::F64;
  std::vector<double> data_;
};

// Throws ValueError naming `context` if any element is NaN or infinite.
void ensure_finite(const Tensor4& t, const char* context);

void check_shape(bool cond, const std::string& message);

// Result dtype of an op combining the given operand dtypes: F32 only when
// every operand is F32.
Dtype promote(Dtype a, Dtype b);

}  // namespace dycaf
