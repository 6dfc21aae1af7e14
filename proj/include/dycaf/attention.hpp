#pragma once

// Dual attention block: a residual unit that rescales its features along
// the channel axis (via a content-weighted global pooling bottleneck) and
// the spatial axis (via a 7x7 mask over pooled channel statistics).
//
//   x_init = silu(pointwise(depthwise3x3(x)))
//   g      = global_avg_pool(x_init * sigmoid(mlp_per_pixel(x_init)))
//   w_c    = sigmoid(W2 silu(W1 g + b1) + b2)            channel weights
//   M_s    = sigmoid(conv7x7([avg_c(x_init); max_c(x_init)]) + b)
//   out    = x + x_init * w_c * M_s
//
// The alternate spatial path (alg1_spatial) applies the 7x7 stage directly
// to all channels of x_init and sums them instead of pooling first.

#include <string>

#include "dycaf/context.hpp"
#include "dycaf/param_store.hpp"

namespace dycaf {

struct DualAttentionParams {
  std::string prefix = "attn";
  i64 channels = 16;
  i64 squeeze = 16;     // channel bottleneck reduction ratio
  i64 mlp_hidden = 512; // per-pixel gate MLP width
  bool alg1_spatial = false;

  std::string name(const char* field) const { return prefix + "." + field; }
  void validate() const;
  void register_params(ParamStore& store) const;
  i64 param_count() const;
};

// x -> silu(pointwise(depthwise3x3(x))), shape preserved.
template <class Ctx>
typename Ctx::V build_init_features(Ctx& ctx, typename Ctx::V x, const DualAttentionParams& p) {
  auto y = ctx.depthwise(x, ctx.param(p.name("init.dw")));
  y = ctx.conv1x1(y, ctx.param(p.name("init.pw.w")), ctx.param(p.name("init.pw.b")));
  return ctx.activation(y, Act::Silu);
}

// Content-weighted global average pool: (n,c,h,w) -> (n,c,1,1). Each pixel
// contributes through a learned sigmoid gate computed by a two-layer MLP
// applied at every spatial position (1x1 convs).
template <class Ctx>
typename Ctx::V build_dynamic_gap(Ctx& ctx, typename Ctx::V x, const DualAttentionParams& p) {
  auto h = ctx.conv1x1(x, ctx.param(p.name("gap.l1.w")), ctx.param(p.name("gap.l1.b")));
  h = ctx.activation(h, Act::Silu);
  auto gate = ctx.conv1x1(h, ctx.param(p.name("gap.l2.w")), ctx.param(p.name("gap.l2.b")));
  gate = ctx.activation(gate, Act::Sigmoid);
  return ctx.global_avg_pool(ctx.ew(x, gate, EwOp::Mul));
}

// (n,c,1,1) pooled vector -> (n,c,1,1) channel weights in (0,1).
template <class Ctx>
typename Ctx::V build_channel_weights(Ctx& ctx, typename Ctx::V pooled,
                                      const DualAttentionParams& p) {
  auto h = ctx.conv1x1(pooled, ctx.param(p.name("bn.w1")), ctx.param(p.name("bn.b1")));
  h = ctx.activation(h, Act::Silu);
  auto w = ctx.conv1x1(h, ctx.param(p.name("bn.w2")), ctx.param(p.name("bn.b2")));
  return ctx.activation(w, Act::Sigmoid);
}

// (n,c,h,w) -> (n,1,h,w) spatial mask in (0,1). The 7x7 stage is a
// depthwise convolution followed by a fixed channel sum plus a learned
// scalar bias; with two pooled input channels this is exactly a dense
// 2->1 7x7 convolution.
template <class Ctx>
typename Ctx::V build_spatial_mask(Ctx& ctx, typename Ctx::V x, const DualAttentionParams& p) {
  const Dtype dt = ctx.peek(x).dtype();
  typename Ctx::V stacked = x;
  i64 in_ch = p.channels;
  if (!p.alg1_spatial) {
    auto avg = ctx.channel_pool(x, PoolMode::Avg);
    auto mx = ctx.channel_pool(x, PoolMode::Max);
    stacked = ctx.concat({avg, mx});
    in_ch = 2;
  }
  auto dw = ctx.depthwise(stacked, ctx.param(p.name("sp.k")));
  auto ones = ctx.constant(Tensor4::full({1, in_ch, 1, 1}, 1.0, dt));
  auto summed = ctx.conv1x1(dw, ones, ctx.param(p.name("sp.b")));
  return ctx.activation(summed, Act::Sigmoid);
}

template <class Ctx>
typename Ctx::V build_dual_attention(Ctx& ctx, typename Ctx::V x, const DualAttentionParams& p) {
  p.validate();
  const Shape4 s = ctx.peek(x).shape();
  if (s.c != p.channels) {
    throw ShapeError("dual_attention: input has " + std::to_string(s.c) +
                     " channels, block expects " + std::to_string(p.channels));
  }
  auto x_init = build_init_features(ctx, x, p);
  auto w_c = build_channel_weights(ctx, build_dynamic_gap(ctx, x_init, p), p);
  auto m_s = build_spatial_mask(ctx, x_init, p);
  auto scaled = ctx.ew(ctx.ew(x_init, w_c, EwOp::Mul), m_s, EwOp::Mul);
  return ctx.ew(x, scaled, EwOp::Add);
}

// Value-level entry points (no tape).
Tensor4 dynamic_gap(const Tensor4& x, const DualAttentionParams& p, const ParamStore& store);
Tensor4 channel_weights(const Tensor4& pooled, const DualAttentionParams& p,
                        const ParamStore& store);
Tensor4 spatial_mask(const Tensor4& x, const DualAttentionParams& p, const ParamStore& store);
Tensor4 dual_attention_forward(const Tensor4& x, const DualAttentionParams& p,
                               const ParamStore& store);

}  // namespace dycaf
