#pragma once

// Class-aware feature adaptation. Two variants share the attention-map
// contract (per class and batch item, the map sums to 1 over space):
//
// Prototype mode: features are projected into the prototype space, matched
// against each frozen class prototype by an elementwise product and a 1x1
// reduction, and the per-class spatial softmax maps gate one learned
// channel mixer per class:
//   A_k    = softmax_hw(reduce(proj(f) * p_k))
//   output = sum_k A_k * (W_k f)
//
// Convolutional mode: a small enhancement stage followed by a K-channel
// 1x1 attention head; the feature map is scaled by the sum of the class
// maps:
//   x_e    = pointwise(depthwise3x3(x))
//   A      = softmax_hw(conv1x1(x_e))         (n, K, h, w)
//   output = x_e * sum_k A_k

#include <string>
#include <vector>

#include "dycaf/context.hpp"
#include "dycaf/param_store.hpp"

namespace dycaf {

constexpr i64 kPrototypeDim = 256;

struct Prototypes {
  Tensor4 rows;  // (count, dim, 1, 1), frozen constants

  i64 count() const { return rows.shape().n; }
  i64 dim() const { return rows.shape().c; }
  void validate() const;

  // Row k as a broadcastable (1, dim, 1, 1) tensor of the given dtype.
  Tensor4 row(i64 k, Dtype dtype) const;

  static Prototypes load(const std::string& path);
  void save(const std::string& path) const;
};

// K-means with plus-plus seeding and Lloyd iteration over row-major
// samples (count x dim). Deterministic for a fixed seed; rows are returned
// in lexicographic order so equal clusterings compare equal. Empty clusters
// are re-seeded from the sample farthest from its own centroid.
Prototypes kmeans_init(const std::vector<double>& samples, i64 count, i64 dim, i64 k, u64 seed);

enum class ClassAdaptMode { Prototype, Conv };

struct ClassAdaptParams {
  std::string prefix = "ca";
  ClassAdaptMode mode = ClassAdaptMode::Conv;
  i64 channels = 16;
  i64 num_classes = 3;
  i64 proto_dim = kPrototypeDim;

  std::string name(const std::string& field) const { return prefix + "." + field; }
  std::string mixer_name(i64 k) const { return name("wk." + std::to_string(k)); }
  void validate() const;
  void register_params(ParamStore& store) const;
  i64 param_count() const;
};

// Throws ValueError unless every (batch, class) plane of maps sums to 1
// over space within tol and all entries are non-negative.
void validate_attention_maps(const Tensor4& maps, double tol = 1e-6);

// Prototype mode: f (n,c,h,w) -> maps (n,K,h,w).
template <class Ctx>
typename Ctx::V build_class_attention(Ctx& ctx, typename Ctx::V f, const Prototypes& protos,
                                      const ClassAdaptParams& p) {
  p.validate();
  protos.validate();
  if (protos.count() != p.num_classes || protos.dim() != p.proto_dim) {
    throw ShapeError("class_attention: prototypes are " + protos.rows.shape().str() +
                     ", expected (" + std::to_string(p.num_classes) + "," +
                     std::to_string(p.proto_dim) + ",1,1)");
  }
  const Dtype dt = ctx.peek(f).dtype();
  auto projf = ctx.conv1x1(f, ctx.param(p.name("proj.w")), ctx.param(p.name("proj.b")));
  auto zero_bias = ctx.constant(Tensor4({1, 1, 1, 1}, dt));
  std::vector<typename Ctx::V> logits;
  logits.reserve(static_cast<size_t>(p.num_classes));
  for (i64 k = 0; k < p.num_classes; ++k) {
    auto match = ctx.ew(projf, ctx.constant(protos.row(k, dt)), EwOp::Mul);
    logits.push_back(ctx.conv1x1(match, ctx.param(p.name("protoproj.w")), zero_bias));
  }
  return ctx.softmax(ctx.concat(logits), SoftmaxAxis::Spatial);
}

// Prototype mode: gate one channel mixer per class by its attention map.
template <class Ctx>
typename Ctx::V build_adapt_features(Ctx& ctx, typename Ctx::V f, typename Ctx::V maps,
                                     const ClassAdaptParams& p) {
  p.validate();
  if (ctx.peek(maps).shape().c != p.num_classes) {
    throw ShapeError("adapt_features: maps have " + std::to_string(ctx.peek(maps).shape().c) +
                     " channels, expected " + std::to_string(p.num_classes));
  }
  const Dtype dt = ctx.peek(f).dtype();
  auto zero_bias = ctx.constant(Tensor4({p.channels, 1, 1, 1}, dt));
  typename Ctx::V acc;
  for (i64 k = 0; k < p.num_classes; ++k) {
    auto mixed = ctx.conv1x1(f, ctx.param(p.mixer_name(k)), zero_bias);
    auto term = ctx.ew(mixed, ctx.slice_channels(maps, k, 1), EwOp::Mul);
    acc = k == 0 ? term : ctx.ew(acc, term, EwOp::Add);
  }
  return acc;
}

template <class Ctx>
struct ClassAdaptOutT {
  typename Ctx::V adapted;
  typename Ctx::V maps;
};

// Convolutional mode, full block.
template <class Ctx>
ClassAdaptOutT<Ctx> build_class_adapt_simple(Ctx& ctx, typename Ctx::V x,
                                             const ClassAdaptParams& p) {
  p.validate();
  auto xe = ctx.depthwise(x, ctx.param(p.name("enh.dw")));
  xe = ctx.conv1x1(xe, ctx.param(p.name("enh.pw.w")), ctx.param(p.name("enh.pw.b")));
  auto logits = ctx.conv1x1(xe, ctx.param(p.name("attn.w")), ctx.param(p.name("attn.b")));
  auto maps = ctx.softmax(logits, SoftmaxAxis::Spatial);
  // sum over class maps = K * channel average
  auto summed = ctx.affine(ctx.channel_pool(maps, PoolMode::Avg),
                           static_cast<double>(p.num_classes), 0.0);
  return {ctx.ew(xe, summed, EwOp::Mul), maps};
}

// Value-level entry points.
Tensor4 class_attention(const Tensor4& f, const Prototypes& protos, const ClassAdaptParams& p,
                        const ParamStore& store);
Tensor4 adapt_features(const Tensor4& f, const Tensor4& maps, const ClassAdaptParams& p,
                       const ParamStore& store);
ClassAdaptOutT<ValueCtx> class_adapt_simple(const Tensor4& x, const ClassAdaptParams& p,
                                            const ParamStore& store);

}  // namespace dycaf
