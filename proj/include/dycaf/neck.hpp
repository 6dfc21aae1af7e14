#pragma once

// Three-level feature neck. Inputs (c3 finest .. c5 coarsest) pass through
// residual lateral projections, then a top-down and bottom-up sweep of
// refinement blocks. Each block is a 1x1 projection to the working width
// followed by either dual attention or a plain silu. When equilibrium
// fusion is enabled, every swept level is replaced by the fixed point of
// the fusion map over its aligned neighbors; levels at the pyramid
// boundary duplicate themselves into the missing slot, using the
// pre-equilibrium values.

#include <array>
#include <string>
#include <utility>
#include <vector>

#include "dycaf/attention.hpp"
#include "dycaf/fusion.hpp"

namespace dycaf {

struct FeaturePyramid {
  Tensor4 c3;  // finest, 2x the height/width of c4
  Tensor4 c4;
  Tensor4 c5;  // coarsest
  void validate() const;
};

struct NeckConfig {
  i64 channels = 16;
  bool use_equilibrium = true;
  bool use_dual_attention = true;
  bool alg1_spatial = false;
  SolverConfig solver;
  void validate() const;
};

struct NeckParams {
  NeckConfig cfg;
  FusionParams fusion;

  // Refinement blocks in execution order: top-down from the coarsest level,
  // then bottom-up. td5 sees c channels; the others see a 2c concat.
  static constexpr std::array<const char*, 5> kBlockIds = {"td5", "td4", "td3", "bu4", "bu5"};

  explicit NeckParams(NeckConfig config);

  i64 block_in_channels(int idx) const { return idx == 0 ? cfg.channels : 2 * cfg.channels; }
  std::string block_w(int idx) const;
  std::string block_b(int idx) const;
  std::string lateral_w(int level) const;  // level in {3,4,5}
  std::string lateral_b(int level) const;
  DualAttentionParams attn(int idx) const;

  void register_params(ParamStore& store) const;
  i64 param_count() const;
};

template <class Ctx>
typename Ctx::V build_dycaf_block(Ctx& ctx, typename Ctx::V x, const NeckParams& np, int idx) {
  auto y = ctx.conv1x1(x, ctx.param(np.block_w(idx)), ctx.param(np.block_b(idx)));
  if (np.cfg.use_dual_attention) return build_dual_attention(ctx, y, np.attn(idx));
  return ctx.activation(y, Act::Silu);
}

// One full top-down + bottom-up sweep; returns {p3, p4, p5}.
template <class Ctx>
std::array<typename Ctx::V, 3> build_neck_pass(Ctx& ctx,
                                               const std::array<typename Ctx::V, 3>& in,
                                               const NeckParams& np) {
  auto lateral = [&](typename Ctx::V x, int level) {
    auto proj = ctx.conv1x1(x, ctx.param(np.lateral_w(level)), ctx.param(np.lateral_b(level)));
    return ctx.ew(x, proj, EwOp::Add);
  };
  auto l3 = lateral(in[0], 3);
  auto l4 = lateral(in[1], 4);
  auto l5 = lateral(in[2], 5);

  auto p5 = build_dycaf_block(ctx, l5, np, 0);
  auto p4 = build_dycaf_block(ctx, ctx.concat({l4, ctx.resample(p5, ResampleMode::Up2)}), np, 1);
  auto p3 = build_dycaf_block(ctx, ctx.concat({l3, ctx.resample(p4, ResampleMode::Up2)}), np, 2);
  p4 = build_dycaf_block(ctx, ctx.concat({p4, ctx.resample(p3, ResampleMode::Down2)}), np, 3);
  p5 = build_dycaf_block(ctx, ctx.concat({p5, ctx.resample(p4, ResampleMode::Down2)}), np, 4);
  return {p3, p4, p5};
}

template <class Ctx>
struct NeckOutT {
  std::array<typename Ctx::V, 3> levels;       // final features, index 0 = p3
  std::array<typename Ctx::V, 3> pass_levels;  // sweep output, pre-equilibrium
  // Aligned neighbor slots fed into each level's solve (set only when
  // equilibrium fusion ran); needed to re-evaluate phi at the solution.
  std::array<typename Ctx::V, 3> coarse;
  std::array<typename Ctx::V, 3> fine;
  std::vector<EquilibriumResult> eq;
};

template <class Ctx>
NeckOutT<Ctx> build_neck_forward(Ctx& ctx, const std::array<typename Ctx::V, 3>& in,
                                 const NeckParams& np) {
  NeckOutT<Ctx> out;
  auto p = build_neck_pass(ctx, in, np);
  out.pass_levels = p;
  out.levels = p;
  if (!np.cfg.use_equilibrium) return out;

  for (int t = 0; t < 3; ++t) {
    // Slot order [coarse, self, fine]; boundary levels duplicate their own
    // pre-equilibrium value into the missing neighbor.
    typename Ctx::V coarse = t == 0   ? ctx.resample(p[1], ResampleMode::Up2)
                             : t == 1 ? ctx.resample(p[2], ResampleMode::Up2)
                                      : p[2];
    typename Ctx::V fine = t == 0   ? p[0]
                           : t == 1 ? ctx.resample(p[0], ResampleMode::Down2)
                                    : ctx.resample(p[1], ResampleMode::Down2);
    auto [f_star, result] = solve_level(ctx, coarse, fine, p[t], np.fusion, np.cfg.solver);
    out.levels[t] = f_star;
    out.coarse[t] = coarse;
    out.fine[t] = fine;
    out.eq.push_back(std::move(result));
  }
  return out;
}

// Value-level entry points.
Tensor4 dycaf_block_forward(const Tensor4& x, const NeckParams& np, int idx,
                            const ParamStore& store);
FeaturePyramid neck_pass(const FeaturePyramid& in, const NeckParams& np,
                         const ParamStore& store);
std::pair<FeaturePyramid, std::vector<EquilibriumResult>> neck_forward(const FeaturePyramid& in,
                                                                       const NeckParams& np,
                                                                       const ParamStore& store);

// Total trainable scalars held by the store.
i64 count_parameters(const ParamStore& store);

}  // namespace dycaf
