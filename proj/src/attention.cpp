#include "dycaf/attention.hpp"

namespace dycaf {

void DualAttentionParams::validate() const {
  if (channels < 1) throw ShapeError("dual_attention: channels must be >= 1");
  if (squeeze < 1) throw ShapeError("dual_attention: squeeze ratio must be >= 1");
  if (channels % squeeze != 0) {
    throw ShapeError("dual_attention: channels (" + std::to_string(channels) +
                     ") must be divisible by the squeeze ratio (" + std::to_string(squeeze) +
                     ")");
  }
  if (mlp_hidden < 1) throw ShapeError("dual_attention: mlp_hidden must be >= 1");
}

void DualAttentionParams::register_params(ParamStore& store) const {
  validate();
  const i64 c = channels;
  const i64 cr = c / squeeze;
  const i64 hid = mlp_hidden;
  store.add_uniform(name("init.dw"), {c, 1, 3, 3}, 9);
  store.add_uniform(name("init.pw.w"), {c, c, 1, 1}, c);
  store.add_uniform(name("init.pw.b"), {c, 1, 1, 1}, c);
  store.add_uniform(name("gap.l1.w"), {hid, c, 1, 1}, c);
  store.add_uniform(name("gap.l1.b"), {hid, 1, 1, 1}, c);
  store.add_uniform(name("gap.l2.w"), {1, hid, 1, 1}, hid);
  store.add_uniform(name("gap.l2.b"), {1, 1, 1, 1}, hid);
  store.add_uniform(name("bn.w1"), {cr, c, 1, 1}, c);
  store.add_uniform(name("bn.b1"), {cr, 1, 1, 1}, c);
  store.add_uniform(name("bn.w2"), {c, cr, 1, 1}, cr);
  store.add_uniform(name("bn.b2"), {c, 1, 1, 1}, cr);
  const i64 sp_ch = alg1_spatial ? c : 2;
  store.add_uniform(name("sp.k"), {sp_ch, 1, 7, 7}, sp_ch * 49);
  store.add_uniform(name("sp.b"), {1, 1, 1, 1}, sp_ch * 49);
}

i64 DualAttentionParams::param_count() const {
  const i64 c = channels;
  const i64 cr = c / squeeze;
  const i64 hid = mlp_hidden;
  i64 total = 0;
  total += c * 9 + c * c + c;              // init block
  total += hid * c + hid + hid + 1;        // per-pixel gate MLP
  total += cr * c + cr + c * cr + c;       // channel bottleneck
  total += (alg1_spatial ? c : 2) * 49 + 1;  // spatial 7x7 + bias
  return total;
}

Tensor4 dynamic_gap(const Tensor4& x, const DualAttentionParams& p, const ParamStore& store) {
  ValueCtx ctx{store};
  return build_dynamic_gap(ctx, x, p);
}

Tensor4 channel_weights(const Tensor4& pooled, const DualAttentionParams& p,
                        const ParamStore& store) {
  ValueCtx ctx{store};
  return build_channel_weights(ctx, pooled, p);
}

Tensor4 spatial_mask(const Tensor4& x, const DualAttentionParams& p, const ParamStore& store) {
  ValueCtx ctx{store};
  return build_spatial_mask(ctx, x, p);
}

Tensor4 dual_attention_forward(const Tensor4& x, const DualAttentionParams& p,
                               const ParamStore& store) {
  ValueCtx ctx{store};
  return build_dual_attention(ctx, x, p);
}

}  // namespace dycaf
