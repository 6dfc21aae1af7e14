#include "dycaf/losses.hpp"

#include <cmath>

namespace dycaf {

void LossWeights::validate() const {
  for (double w : {lambda_det, lambda_eq, lambda_ca}) {
    if (!(std::isfinite(w) && w >= 0.0)) {
      throw ValueError("loss weights must be finite and non-negative");
    }
  }
}

double equilibrium_loss(const PhiFn& phi, const Tensor4& f_star) {
  const Tensor4 ph = phi(f_star);
  if (!(ph.shape() == f_star.shape())) {
    throw ShapeError("equilibrium_loss: map output " + ph.shape().str() +
                     " does not match state " + f_star.shape().str());
  }
  double s = 0.0;
  for (i64 i = 0; i < f_star.numel(); ++i) {
    const double d = ph.data()[i] - f_star.data()[i];
    s += d * d;
  }
  return std::sqrt(s);
}

double kl_uniform_loss(const Tensor4& maps) {
  validate_attention_maps(maps);
  const Shape4 s = maps.shape();
  const double ln_hw = std::log(static_cast<double>(s.h * s.w));
  double total = 0.0;
  for (i64 i = 0; i < maps.numel(); ++i) {
    const double a = maps.data()[i];
    total += a * (std::log(std::max(a, kKlFloor)) + ln_hw);
  }
  return total;
}

double total_loss(double l_det, double l_eq, double l_ca, const LossWeights& w) {
  w.validate();
  struct Part {
    const char* label;
    double value;
  };
  for (const Part& p : {Part{"detection", l_det}, Part{"equilibrium", l_eq},
                        Part{"class adaptation", l_ca}}) {
    if (!std::isfinite(p.value)) {
      throw ValueError(std::string("total_loss: ") + p.label + " component is non-finite");
    }
  }
  return w.lambda_det * l_det + w.lambda_eq * l_eq + w.lambda_ca * l_ca;
}

}  // namespace dycaf
