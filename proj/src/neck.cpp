#include "dycaf/neck.hpp"

namespace dycaf {

void FeaturePyramid::validate() const {
  const Shape4 s3 = c3.shape();
  const Shape4 s4 = c4.shape();
  const Shape4 s5 = c5.shape();
  if (s3.n != s4.n || s4.n != s5.n) {
    throw ShapeError("feature pyramid: batch sizes differ: " + s3.str() + ", " + s4.str() +
                     ", " + s5.str());
  }
  if (s3.c != s4.c || s4.c != s5.c) {
    throw ShapeError("feature pyramid: channel counts differ: " + s3.str() + ", " + s4.str() +
                     ", " + s5.str());
  }
  if (s4.h * 2 != s3.h || s4.w * 2 != s3.w || s5.h * 2 != s4.h || s5.w * 2 != s4.w) {
    throw ShapeError("feature pyramid: each level must halve the previous one: " + s3.str() +
                     ", " + s4.str() + ", " + s5.str());
  }
  if (s3.h % 4 != 0 || s3.w % 4 != 0) {
    throw ShapeError("feature pyramid: finest level extent must be divisible by 4, got " +
                     s3.str());
  }
}

void NeckConfig::validate() const {
  if (channels < 1) throw ShapeError("neck: channels must be >= 1");
  if (use_dual_attention && channels % 16 != 0) {
    throw ShapeError("neck: dual attention needs channels divisible by its squeeze ratio 16, "
                     "got " +
                     std::to_string(channels));
  }
  solver.validate();
}

NeckParams::NeckParams(NeckConfig config) : cfg(config) {
  cfg.validate();
  fusion.prefix = "fusion";
  fusion.channels = cfg.channels;
}

std::string NeckParams::block_w(int idx) const {
  return std::string("neck.") + kBlockIds.at(static_cast<size_t>(idx)) + ".proj.w";
}

std::string NeckParams::block_b(int idx) const {
  return std::string("neck.") + kBlockIds.at(static_cast<size_t>(idx)) + ".proj.b";
}

std::string NeckParams::lateral_w(int level) const {
  return "neck.lat.c" + std::to_string(level) + ".w";
}

std::string NeckParams::lateral_b(int level) const {
  return "neck.lat.c" + std::to_string(level) + ".b";
}

DualAttentionParams NeckParams::attn(int idx) const {
  DualAttentionParams p;
  p.prefix = std::string("attn.") + kBlockIds.at(static_cast<size_t>(idx));
  p.channels = cfg.channels;
  p.alg1_spatial = cfg.alg1_spatial;
  return p;
}

void NeckParams::register_params(ParamStore& store) const {
  const i64 c = cfg.channels;
  for (int level = 3; level <= 5; ++level) {
    store.add_uniform(lateral_w(level), {c, c, 1, 1}, c);
    store.add_uniform(lateral_b(level), {c, 1, 1, 1}, c);
  }
  for (int idx = 0; idx < 5; ++idx) {
    const i64 cin = block_in_channels(idx);
    store.add_uniform(block_w(idx), {c, cin, 1, 1}, cin);
    store.add_uniform(block_b(idx), {c, 1, 1, 1}, cin);
    if (cfg.use_dual_attention) attn(idx).register_params(store);
  }
  if (cfg.use_equilibrium) fusion.register_params(store);
}

i64 NeckParams::param_count() const {
  const i64 c = cfg.channels;
  i64 total = 3 * (c * c + c);  // laterals
  for (int idx = 0; idx < 5; ++idx) {
    total += c * block_in_channels(idx) + c;
    if (cfg.use_dual_attention) total += attn(idx).param_count();
  }
  if (cfg.use_equilibrium) total += fusion.param_count();
  return total;
}

Tensor4 dycaf_block_forward(const Tensor4& x, const NeckParams& np, int idx,
                            const ParamStore& store) {
  ValueCtx ctx{store};
  return build_dycaf_block(ctx, x, np, idx);
}

FeaturePyramid neck_pass(const FeaturePyramid& in, const NeckParams& np,
                         const ParamStore& store) {
  in.validate();
  ValueCtx ctx{store};
  auto p = build_neck_pass(ctx, std::array<Tensor4, 3>{in.c3, in.c4, in.c5}, np);
  return FeaturePyramid{std::move(p[0]), std::move(p[1]), std::move(p[2])};
}

std::pair<FeaturePyramid, std::vector<EquilibriumResult>> neck_forward(const FeaturePyramid& in,
                                                                       const NeckParams& np,
                                                                       const ParamStore& store) {
  in.validate();
  ValueCtx ctx{store};
  auto out = build_neck_forward(ctx, std::array<Tensor4, 3>{in.c3, in.c4, in.c5}, np);
  return {FeaturePyramid{std::move(out.levels[0]), std::move(out.levels[1]),
                         std::move(out.levels[2])},
          std::move(out.eq)};
}

i64 count_parameters(const ParamStore& store) { return store.total_elements(); }

}  // namespace dycaf
