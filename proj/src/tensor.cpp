#include "dycaf/tensor.hpp"

#include <cmath>
#include <sstream>
#include <utility>

namespace dycaf {

std::string Shape4::str() const {
  std::ostringstream os;
  os << "(" << n << ", " << c << ", " << h << ", " << w << ")";
  return os.str();
}

Tensor4::Tensor4(Shape4 shape, Dtype dtype) : shape_(shape), dtype_(dtype) {
  if (shape.n < 1 || shape.c < 1 || shape.h < 1 || shape.w < 1) {
    throw ShapeError("tensor dims must all be >= 1, got " + shape.str());
  }
  data_.assign(static_cast<size_t>(shape.numel()), 0.0);
}

Tensor4 Tensor4::full(Shape4 shape, double value, Dtype dtype) {
  if (!std::isfinite(value)) {
    throw ValueError("Tensor4::full: fill value is not finite");
  }
  Tensor4 t(shape, dtype);
  for (auto& v : t.data_) v = value;
  t.quantize();
  return t;
}

Tensor4 Tensor4::zeros_like(const Tensor4& other) {
  return Tensor4(other.shape(), other.dtype());
}

Tensor4 Tensor4::from_vector(Shape4 shape, std::vector<double> data, Dtype dtype) {
  Tensor4 t(shape, dtype);
  if (static_cast<i64>(data.size()) != shape.numel()) {
    std::ostringstream os;
    os << "Tensor4::from_vector: payload holds " << data.size()
       << " elements but shape " << shape.str() << " needs " << shape.numel();
    throw ShapeError(os.str());
  }
  t.data_ = std::move(data);
  t.quantize();
  ensure_finite(t, "Tensor4::from_vector");
  return t;
}

void Tensor4::quantize() {
  if (dtype_ != Dtype::F32) return;
  for (auto& v : data_) v = static_cast<double>(static_cast<float>(v));
}

void ensure_finite(const Tensor4& t, const char* context) {
  const double* p = t.data();
  const i64 n = t.numel();
  for (i64 i = 0; i < n; ++i) {
    if (!std::isfinite(p[i])) {
      std::ostringstream os;
      os << context << ": non-finite element at flat index " << i << " in tensor "
         << t.shape().str();
      throw ValueError(os.str());
    }
  }
}

void check_shape(bool cond, const std::string& message) {
  if (!cond) throw ShapeError(message);
}

Dtype promote(Dtype a, Dtype b) {
  return (a == Dtype::F32 && b == Dtype::F32) ? Dtype::F32 : Dtype::F64;
}

}  // namespace dycaf
