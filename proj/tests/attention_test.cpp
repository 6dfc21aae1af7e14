#include <cmath>

#include "doctest.h"
#include "dycaf/attention.hpp"
#include "dycaf/context.hpp"
#include "dycaf/ops.hpp"
#include "test_util.hpp"

using namespace dycaf;
using testutil::bit_equal;
using testutil::fd_vs_analytic;
using testutil::max_abs_diff;
using testutil::rand_uniform;

namespace {

DualAttentionParams small_params(bool alg1 = false) {
  DualAttentionParams p;
  p.prefix = "t";
  p.channels = 8;
  p.squeeze = 4;
  p.mlp_hidden = 6;
  p.alg1_spatial = alg1;
  return p;
}

}  // namespace

TEST_CASE("attention validation and registered size") {
  DualAttentionParams p = small_params();
  p.validate();

  DualAttentionParams bad = p;
  bad.channels = 6;  // not divisible by squeeze 4
  CHECK_THROWS_AS(bad.validate(), ShapeError);
  bad = p;
  bad.squeeze = 0;
  CHECK_THROWS_AS(bad.validate(), ShapeError);

  for (bool alg1 : {false, true}) {
    DualAttentionParams q = small_params(alg1);
    ParamStore store(11);
    q.register_params(store);
    CHECK(store.total_elements() == q.param_count());
    CHECK(store.contains("t.init.dw"));
    CHECK(store.contains("t.sp.k"));
    Shape4 spk = store.at("t.sp.k").shape();
    CHECK(spk == (alg1 ? Shape4{8, 1, 7, 7} : Shape4{2, 1, 7, 7}));
  }

  // Default-size block matches its closed-form count.
  DualAttentionParams full;
  full.prefix = "a";
  ParamStore store(12);
  full.register_params(store);
  CHECK(store.total_elements() == full.param_count());
}

TEST_CASE("attention preserves shape and rejects channel mismatch") {
  DualAttentionParams p = small_params();
  ParamStore store(13);
  p.register_params(store);

  for (auto s : {Shape4{1, 8, 4, 4}, Shape4{2, 8, 3, 5}}) {
    Tensor4 x = rand_uniform(s, 14);
    Tensor4 y = dual_attention_forward(x, p, store);
    CHECK(y.shape() == s);
  }
  CHECK_THROWS_AS(dual_attention_forward(Tensor4({1, 4, 4, 4}), p, store), ShapeError);
}

TEST_CASE("masks stay inside the open unit interval") {
  DualAttentionParams p = small_params();
  ParamStore store(15);
  p.register_params(store);
  Tensor4 x = rand_uniform({2, 8, 5, 5}, 16, -2.0, 2.0);

  ValueCtx ctx{store};
  Tensor4 x_init = build_init_features(ctx, x, p);
  Tensor4 w_c = channel_weights(dynamic_gap(x_init, p, store), p, store);
  Tensor4 m_s = spatial_mask(x_init, p, store);
  CHECK(w_c.shape() == Shape4{2, 8, 1, 1});
  CHECK(m_s.shape() == Shape4{2, 1, 5, 5});
  for (i64 i = 0; i < w_c.numel(); ++i) {
    CHECK(w_c.data()[i] > 0.0);
    CHECK(w_c.data()[i] < 1.0);
  }
  for (i64 i = 0; i < m_s.numel(); ++i) {
    CHECK(m_s.data()[i] > 0.0);
    CHECK(m_s.data()[i] < 1.0);
  }
}

TEST_CASE("a saturated pixel gate turns the dynamic pool into a plain mean") {
  // With the gate MLP forced to emit +40 the sigmoid saturates to exactly
  // 1.0 in double precision, so the content-weighted pool must equal the
  // unweighted global average bit for bit.
  DualAttentionParams p = small_params();
  ParamStore store(17);
  p.register_params(store);
  store.set(p.name("gap.l2.w"), Tensor4({1, p.mlp_hidden, 1, 1}));
  store.set(p.name("gap.l2.b"), Tensor4::full({1, 1, 1, 1}, 40.0));

  Tensor4 x = rand_uniform({2, 8, 4, 4}, 18);
  Tensor4 pooled = dynamic_gap(x, p, store);
  CHECK(bit_equal(pooled, global_avg_pool(x)));
}

TEST_CASE("a closed pixel gate collapses the dynamic pool to zero") {
  DualAttentionParams p = small_params();
  ParamStore store(19);
  p.register_params(store);
  store.set(p.name("gap.l2.w"), Tensor4({1, p.mlp_hidden, 1, 1}));
  store.set(p.name("gap.l2.b"), Tensor4::full({1, 1, 1, 1}, -40.0));

  Tensor4 x = rand_uniform({1, 8, 4, 4}, 20);
  Tensor4 pooled = dynamic_gap(x, p, store);
  for (i64 i = 0; i < pooled.numel(); ++i) CHECK(std::abs(pooled.data()[i]) < 1e-15);
}

TEST_CASE("saturated channel and spatial gates reduce the block to x + x_init") {
  // Channel bottleneck output forced to sigmoid(40) == 1 and spatial stage
  // bias forced to +40 with a zero kernel: the residual update becomes
  // exactly x + x_init.
  DualAttentionParams p = small_params();
  ParamStore store(21);
  p.register_params(store);
  store.set(p.name("bn.w2"), Tensor4({p.channels, p.channels / p.squeeze, 1, 1}));
  store.set(p.name("bn.b2"), Tensor4::full({p.channels, 1, 1, 1}, 40.0));
  store.set(p.name("sp.k"), Tensor4({2, 1, 7, 7}));
  store.set(p.name("sp.b"), Tensor4::full({1, 1, 1, 1}, 40.0));

  Tensor4 x = rand_uniform({1, 8, 4, 4}, 22);
  ValueCtx ctx{store};
  Tensor4 x_init = build_init_features(ctx, x, p);
  Tensor4 out = dual_attention_forward(x, p, store);
  CHECK(max_abs_diff(out, ew(x, x_init, EwOp::Add)) == 0.0);
}

TEST_CASE("closed gates reduce the block to the identity") {
  DualAttentionParams p = small_params();
  ParamStore store(23);
  p.register_params(store);
  store.set(p.name("sp.k"), Tensor4({2, 1, 7, 7}));
  store.set(p.name("sp.b"), Tensor4::full({1, 1, 1, 1}, -40.0));

  Tensor4 x = rand_uniform({1, 8, 4, 4}, 24);
  Tensor4 out = dual_attention_forward(x, p, store);
  CHECK(max_abs_diff(out, x) < 1e-12);
}

TEST_CASE("the all-channel spatial variant changes the mask path") {
  DualAttentionParams pooled = small_params(false);
  DualAttentionParams direct = small_params(true);
  ParamStore s1(25), s2(25);
  pooled.register_params(s1);
  direct.register_params(s2);

  Tensor4 x = rand_uniform({1, 8, 6, 6}, 26);
  Tensor4 y1 = dual_attention_forward(x, pooled, s1);
  Tensor4 y2 = dual_attention_forward(x, direct, s2);
  CHECK(y1.shape() == x.shape());
  CHECK(y2.shape() == x.shape());
  CHECK(tensor_checksum(y1) != tensor_checksum(y2));
}

TEST_CASE("attention gradients pass the finite-difference gate") {
  for (bool alg1 : {false, true}) {
    DualAttentionParams p = small_params(alg1);
    ParamStore store(27);
    p.register_params(store);
    Tensor4 x = rand_uniform({1, 8, 4, 4}, 28);
    Tensor4 mask = rand_uniform({1, 8, 4, 4}, 29);

    double err = fd_vs_analytic(store, [&](auto& ctx) {
      auto out = build_dual_attention(ctx, ctx.constant(x), p);
      return ctx.sum_all(ctx.ew(out, ctx.constant(mask), EwOp::Mul));
    });
    INFO("alg1_spatial=" << alg1);
    CHECK(err < 1e-5);
  }
}
