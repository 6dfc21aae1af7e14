#pragma once

// Implicit multi-scale fusion. Each pyramid level is refined to the fixed
// point of a contraction phi built from its aligned neighbors:
//
//   stack   = [coarse, f, fine]            (channel concat, slot order fixed)
//   weights = softmax_c(conv1x1(stack))    one weight map per slot
//   phi(f)  = refine(sum_l weights_l * stack_l)
//   refine  = depthwise3x3 -> silu -> depthwise3x3
//
// The refine kernels are rescaled at registration so the product of their
// estimated spectral norms times the peak silu gain is below 1, which keeps
// phi contractive and the fixed point well defined. Gradients flow through
// the solve via the implicit function theorem: an adjoint fixed point
// u = g + J^T u is solved by iteration, then one VJP with seed u yields
// parameter and neighbor gradients. The initial iterate gets no gradient.

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "dycaf/context.hpp"
#include "dycaf/param_store.hpp"

namespace dycaf {

struct SolverConfig {
  double alpha = 0.1;   // initial inverse-Jacobian scale (B0 = -alpha * I)
  double tol = 1e-6;    // l2 residual tolerance
  int max_iter = 50;    // forward solve step budget
  int memory = 20;      // secant pairs kept by the quasi-Newton update
  void validate() const;
};

struct EquilibriumResult {
  Tensor4 f_star;
  double residual_norm = 0.0;
  int iterations = 0;
  bool converged = false;
  std::vector<double> residual_trace;  // residual at f0, then after each step
};

using PhiFn = std::function<Tensor4(const Tensor4&)>;

// Limited-memory quasi-Newton solve of phi(f) = f (good Broyden updates on
// g(f) = phi(f) - f, curvature-guarded). Returns the best iterate seen.
EquilibriumResult broyden_solve(const PhiFn& phi, const Tensor4& f0, const SolverConfig& cfg);

// Plain fixed-point iteration f <- phi(f), used as a brute-force oracle.
EquilibriumResult picard_solve(const PhiFn& phi, const Tensor4& f0, double tol, int max_iter);

struct FusionParams {
  std::string prefix = "fusion";
  i64 channels = 16;
  double contraction_target = 0.9;  // bound on the refine chain gain

  static constexpr i64 kSlots = 3;  // coarse, self, fine

  std::string name(const char* field) const { return prefix + "." + field; }
  void validate() const;
  // Registers weights and refine kernels, then rescales the refine kernels
  // in place to meet the contraction target.
  void register_params(ParamStore& store) const;
  // Parameter names in the order used by the gradient plumbing.
  std::vector<std::string> param_names() const;
  i64 param_count() const;
};

// Estimated spectral norm of a depthwise stage: max over channels of the
// per-channel operator norm on a probe_hw x probe_hw plane (power iteration
// with zero padding, matching the convolution's boundary handling).
double depthwise_spectral_norm(const Tensor4& kernels, i64 probe_hw = 16, int iters = 20,
                               u64 seed = 0x9e3779b97f4a7c15ULL);

// Peak derivative of silu, max_x d/dx [x * sigmoid(x)] (about 1.0998).
double silu_max_gain();

// stack slots -> (n, kSlots, h, w) softmax weights over slots.
template <class Ctx>
typename Ctx::V build_fusion_weights(Ctx& ctx, typename Ctx::V coarse, typename Ctx::V self,
                                     typename Ctx::V fine, const FusionParams& p) {
  auto cat = ctx.concat({coarse, self, fine});
  auto logits = ctx.conv1x1(cat, ctx.param(p.name("wconv.w")), ctx.param(p.name("wconv.b")));
  return ctx.softmax(logits, SoftmaxAxis::Channel);
}

template <class Ctx>
typename Ctx::V build_phi(Ctx& ctx, typename Ctx::V f, typename Ctx::V coarse,
                          typename Ctx::V fine, const FusionParams& p) {
  auto w = build_fusion_weights(ctx, coarse, f, fine, p);
  auto w0 = ctx.slice_channels(w, 0, 1);
  auto w1 = ctx.slice_channels(w, 1, 1);
  auto w2 = ctx.slice_channels(w, 2, 1);
  auto mix = ctx.ew(ctx.ew(coarse, w0, EwOp::Mul), ctx.ew(f, w1, EwOp::Mul), EwOp::Add);
  mix = ctx.ew(mix, ctx.ew(fine, w2, EwOp::Mul), EwOp::Add);
  auto r = ctx.depthwise(mix, ctx.param(p.name("refine.k1")));
  r = ctx.activation(r, Act::Silu);
  return ctx.depthwise(r, ctx.param(p.name("refine.k2")));
}

// Value-level phi with captured neighbors, usable as a PhiFn.
struct PhiProgram {
  Tensor4 coarse;
  Tensor4 fine;
  FusionParams params;
  const ParamStore* store = nullptr;

  Tensor4 operator()(const Tensor4& f) const;
};

// Value-level entry points.
Tensor4 fusion_weights(const Tensor4& coarse, const Tensor4& self, const Tensor4& fine,
                       const FusionParams& p, const ParamStore& store);
Tensor4 phi_apply(const Tensor4& f, const Tensor4& coarse, const Tensor4& fine,
                  const FusionParams& p, const ParamStore& store);

struct AdjointResult {
  Tensor4 u;
  int iterations = 0;
  bool converged = false;
};

// Solves u = grad_out + J^T u by iteration, where J is the Jacobian of the
// recorded node phi_out with respect to the leaf f_leaf. Throws
// ContractionError if the adjoint norm grows for many consecutive steps.
AdjointResult solve_adjoint(Tape& tape, Var phi_out, Var f_leaf, const Tensor4& grad_out,
                            const SolverConfig& cfg);

struct ImplicitResult {
  Tensor4 grad_coarse;
  Tensor4 grad_fine;
  GradMap param_grads;  // keyed by FusionParams::param_names()
  Tensor4 adjoint;
  int iterations = 0;
  bool converged = false;
};

// Implicit-function-theorem backward through a converged solve: given the
// loss gradient at the fixed point, returns gradients for the fusion
// parameters and both neighbor slots. The initial iterate receives none.
ImplicitResult implicit_backward(const PhiProgram& prog, const Tensor4& f_star,
                                 const Tensor4& grad_out, const SolverConfig& cfg,
                                 bool check_residual = true);

// Records the solve as a single differentiable node on the tape. The
// forward pass runs the quasi-Newton solver on plain values; the backward
// pass runs implicit_backward and routes gradients to the neighbor nodes
// and the fusion parameters. f0 is treated as a gradient-free hint.
std::pair<Var, EquilibriumResult> equilibrium_solve_node(Tape& tape, const ParamStore& store,
                                                         Var coarse, Var fine, Var f0,
                                                         const FusionParams& p,
                                                         const SolverConfig& cfg);

// Context dispatch used by the neck builder.
template <class Ctx>
std::pair<typename Ctx::V, EquilibriumResult> solve_level(Ctx& ctx, typename Ctx::V coarse,
                                                          typename Ctx::V fine,
                                                          typename Ctx::V f0,
                                                          const FusionParams& p,
                                                          const SolverConfig& cfg) {
  if constexpr (Ctx::kIsTape) {
    return equilibrium_solve_node(ctx.tape, ctx.store, coarse, fine, f0, p, cfg);
  } else {
    PhiProgram prog{ctx.peek(coarse), ctx.peek(fine), p, &ctx.store};
    EquilibriumResult res = broyden_solve([&prog](const Tensor4& f) { return prog(f); },
                                          ctx.peek(f0), cfg);
    Tensor4 f_star = res.f_star;
    return {std::move(f_star), std::move(res)};
  }
}

// Dense finite-difference Jacobian of phi at f, row-major n x n with
// J[i*n+j] = d phi_i / d f_j. Test oracle only; rejects states above 32
// elements to keep it honest about its O(n^2) cost.
std::vector<double> dense_fd_jacobian(const PhiFn& phi, const Tensor4& f, double eps = 1e-6);

}  // namespace dycaf
