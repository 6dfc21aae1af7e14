#pragma once

// Training losses. The detection surrogate is a plain MSE against a fixed
// target; the equilibrium penalty measures how far a solved level is from
// being a true fixed point; the class-adaptation penalty is the KL
// divergence of each attention map from the uniform spatial distribution,
//   KL(A_k || U) = sum_p A_k(p) * ln(max(A_k(p), floor) * h * w),
// which is 0 exactly when the map is uniform and ln(h*w) when it is a
// single spike.

#include <cmath>

#include "dycaf/class_adapt.hpp"
#include "dycaf/fusion.hpp"

namespace dycaf {

constexpr double kKlFloor = 1e-12;

struct LossWeights {
  double lambda_det = 1.0;
  double lambda_eq = 0.5;
  double lambda_ca = 0.2;
  void validate() const;
};

// ||a - b||_2 as a (1,1,1,1) scalar node.
template <class Ctx>
typename Ctx::V build_l2_distance(Ctx& ctx, typename Ctx::V a, typename Ctx::V b) {
  auto diff = ctx.ew(a, ctx.affine(b, -1.0, 0.0), EwOp::Add);
  return ctx.unary(ctx.sum_all(ctx.unary(diff, Unary::Square)), Unary::Sqrt);
}

// Mean squared error against a target of the same shape.
template <class Ctx>
typename Ctx::V build_mse(Ctx& ctx, typename Ctx::V x, typename Ctx::V target) {
  const double inv_n = 1.0 / static_cast<double>(ctx.peek(x).numel());
  auto diff = ctx.ew(x, ctx.affine(target, -1.0, 0.0), EwOp::Add);
  return ctx.affine(ctx.sum_all(ctx.unary(diff, Unary::Square)), inv_n, 0.0);
}

// Summed KL-from-uniform over all (batch, class) attention maps. Validates
// the normalization contract on the forward value.
template <class Ctx>
typename Ctx::V build_kl_uniform(Ctx& ctx, typename Ctx::V maps) {
  const Shape4 s = ctx.peek(maps).shape();
  validate_attention_maps(ctx.peek(maps));
  const double ln_hw = std::log(static_cast<double>(s.h * s.w));
  auto log_m = ctx.affine(ctx.unary(maps, Unary::LogClamped, kKlFloor), 1.0, ln_hw);
  return ctx.sum_all(ctx.ew(maps, log_m, EwOp::Mul));
}

template <class Ctx>
typename Ctx::V build_total_loss(Ctx& ctx, typename Ctx::V l_det, typename Ctx::V l_eq,
                                 typename Ctx::V l_ca, const LossWeights& w) {
  w.validate();
  auto total = ctx.ew(ctx.affine(l_det, w.lambda_det, 0.0),
                      ctx.affine(l_eq, w.lambda_eq, 0.0), EwOp::Add);
  return ctx.ew(total, ctx.affine(l_ca, w.lambda_ca, 0.0), EwOp::Add);
}

// Value-level entry points.
double equilibrium_loss(const PhiFn& phi, const Tensor4& f_star);
double kl_uniform_loss(const Tensor4& maps);
double total_loss(double l_det, double l_eq, double l_ca, const LossWeights& w);

}  // namespace dycaf
