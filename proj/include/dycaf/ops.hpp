#pragma once

// Primitive operations over Tensor4. Every op is a pure function: same
// inputs give bit-identical outputs regardless of thread count. Shape
// violations throw ShapeError; non-finite results throw ValueError.

#include <vector>

#include "dycaf/tensor.hpp"

namespace dycaf {

enum class PoolMode { Avg, Max };
enum class Act { Sigmoid, Silu, Relu };
enum class SoftmaxAxis { Channel, Spatial };
enum class ResampleMode { Up2, Down2 };
enum class EwOp { Add, Mul };
enum class Unary { Square, Sqrt, LogClamped };

// Pointwise convolution. weights is (c_out, c_in, 1, 1), bias is
// (c_out, 1, 1, 1); x is (n, c_in, h, w) and the result is (n, c_out, h, w).
Tensor4 conv1x1(const Tensor4& x, const Tensor4& weights, const Tensor4& bias);

// Per-channel k x k convolution, zero padding (k-1)/2, same spatial size.
// kernels is (c, 1, k, k) with k in {3, 7}; no bias.
Tensor4 depthwise_conv(const Tensor4& x, const Tensor4& kernels);

// Reduces the channel axis to a single channel: (n, 1, h, w). For Max the
// argmax channel per site (first maximum in ascending channel scan) can be
// captured for gradient routing.
Tensor4 channel_pool(const Tensor4& x, PoolMode mode,
                     std::vector<i32>* argmax = nullptr);

// Spatial mean per channel: (n, c, 1, 1).
Tensor4 global_avg_pool(const Tensor4& x);

Tensor4 activation(const Tensor4& x, Act act);

// Numerically stable softmax along the channel axis (per n, i, j) or
// jointly over all spatial sites (per n, c).
Tensor4 softmax_axis(const Tensor4& x, SoftmaxAxis axis);

// Up2: nearest-neighbour doubling. Down2: 2x2 mean, h and w must be even.
// down2(up2(x)) reproduces x exactly.
Tensor4 resample(const Tensor4& x, ResampleMode mode);

Tensor4 concat_channels(const std::vector<Tensor4>& parts);

// Channels [from, from + count) of x.
Tensor4 slice_channels(const Tensor4& x, i64 from, i64 count);

// Elementwise add or multiply with broadcasting over singleton dims:
// each dim of x and y must match or be 1, e.g. (n,c,1,1) * (n,1,h,w).
Tensor4 ew(const Tensor4& x, const Tensor4& y, EwOp op);

// Scalar total over every element, as a (1, 1, 1, 1) tensor.
Tensor4 sum_all(const Tensor4& x);

// mul * x + add, elementwise with scalar constants.
Tensor4 affine(const Tensor4& x, double mul, double add);

// Square, sqrt (x >= 0 required), or ln(max(x, floor)) with `arg` as floor.
Tensor4 unary(const Tensor4& x, Unary op, double arg = 0.0);

double l2_norm(const Tensor4& x);

double sigmoid(double v);
double silu(double v);

// FNV-1a over the raw little-endian bytes of the payload; stable identity
// fingerprint for determinism checks.
u64 tensor_checksum(const Tensor4& x);

namespace detail {
struct Broadcast2 {
  Shape4 out;
  bool x_bcast[4];
  bool y_bcast[4];
};
Broadcast2 broadcast_shapes(const Shape4& a, const Shape4& b);
}  // namespace detail

}  // namespace dycaf
