#pragma once

// Execution contexts for module builders. A builder written against the
// shared op vocabulary runs unchanged in two modes: ValueCtx computes plain
// tensors (used by solvers and finite-difference probes), TapeCtx records
// the same computation on a Tape for reverse-mode gradients. Keeping one
// builder per module guarantees the two paths share forward semantics.

#include <utility>

#include "dycaf/autodiff.hpp"

namespace dycaf {

struct ValueCtx {
  static constexpr bool kIsTape = false;
  using V = Tensor4;

  const ParamStore& store;

  V param(const std::string& name) const { return store.at(name); }
  V constant(Tensor4 t) const { return t; }
  const Tensor4& peek(const V& v) const { return v; }

  V conv1x1(const V& x, const V& w, const V& b) const { return dycaf::conv1x1(x, w, b); }
  V depthwise(const V& x, const V& k) const { return dycaf::depthwise_conv(x, k); }
  V channel_pool(const V& x, PoolMode m) const { return dycaf::channel_pool(x, m); }
  V global_avg_pool(const V& x) const { return dycaf::global_avg_pool(x); }
  V activation(const V& x, Act a) const { return dycaf::activation(x, a); }
  V softmax(const V& x, SoftmaxAxis a) const { return dycaf::softmax_axis(x, a); }
  V resample(const V& x, ResampleMode m) const { return dycaf::resample(x, m); }
  V concat(const std::vector<V>& parts) const { return dycaf::concat_channels(parts); }
  V slice_channels(const V& x, i64 from, i64 count) const {
    return dycaf::slice_channels(x, from, count);
  }
  V ew(const V& x, const V& y, EwOp op) const { return dycaf::ew(x, y, op); }
  V sum_all(const V& x) const { return dycaf::sum_all(x); }
  V affine(const V& x, double mul, double add) const { return dycaf::affine(x, mul, add); }
  V unary(const V& x, Unary op, double arg = 0.0) const { return dycaf::unary(x, op, arg); }
};

struct TapeCtx {
  static constexpr bool kIsTape = true;
  using V = Var;

  Tape& tape;
  const ParamStore& store;

  V param(const std::string& name) const { return tape.param(store, name); }
  V constant(Tensor4 t) const { return tape.constant(std::move(t)); }
  const Tensor4& peek(V v) const { return tape.value(v); }

  V conv1x1(V x, V w, V b) const { return tape.conv1x1(x, w, b); }
  V depthwise(V x, V k) const { return tape.depthwise(x, k); }
  V channel_pool(V x, PoolMode m) const { return tape.channel_pool(x, m); }
  V global_avg_pool(V x) const { return tape.global_avg_pool(x); }
  V activation(V x, Act a) const { return tape.activation(x, a); }
  V softmax(V x, SoftmaxAxis a) const { return tape.softmax(x, a); }
  V resample(V x, ResampleMode m) const { return tape.resample(x, m); }
  V concat(const std::vector<V>& parts) const { return tape.concat(parts); }
  V slice_channels(V x, i64 from, i64 count) const {
    return tape.slice_channels(x, from, count);
  }
  V ew(V x, V y, EwOp op) const { return tape.ew(x, y, op); }
  V sum_all(V x) const { return tape.sum_all(x); }
  V affine(V x, double mul, double add) const { return tape.affine(x, mul, add); }
  V unary(V x, Unary op, double arg = 0.0) const { return tape.unary(x, op, arg); }
};

}  // namespace dycaf
