#include "dycaf/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>

#include "dycaf/parallel.hpp"

namespace dycaf {

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

Tensor4 make_out(Shape4 shape, Dtype dt) { return Tensor4(shape, dt); }

void finish(Tensor4& t, const char* op) {
  t.quantize();
  ensure_finite(t, op);
}

}  // namespace

double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }
double silu(double v) { return v * sigmoid(v); }

Tensor4 conv1x1(const Tensor4& x, const Tensor4& weights, const Tensor4& bias) {
  const Shape4& xs = x.shape();
  const Shape4& ws = weights.shape();
  const Shape4& bs = bias.shape();
  require(ws.h == 1 && ws.w == 1,
          "conv1x1: weights must be (c_out, c_in, 1, 1), got " + ws.str());
  require(ws.c == xs.c, "conv1x1: weights expect " + std::to_string(ws.c) +
                            " input channels, input has " + std::to_string(xs.c));
  require(bs.n == ws.n && bs.c == 1 && bs.h == 1 && bs.w == 1,
          "conv1x1: bias must be (" + std::to_string(ws.n) + ", 1, 1, 1), got " +
              bs.str());

  const i64 n = xs.n, cin = xs.c, cout = ws.n, hw = xs.h * xs.w;
  Tensor4 out =
      make_out({n, cout, xs.h, xs.w}, promote(promote(x.dtype(), weights.dtype()), bias.dtype()));
  const double* xp = x.data();
  const double* wp = weights.data();
  const double* bp = bias.data();
  double* op = out.data();

  parallel_for(n * cout, 4, [&](i64 b, i64 e) {
    for (i64 plane = b; plane < e; ++plane) {
      const i64 ni = plane / cout;
      const i64 co = plane % cout;
      const double* wrow = wp + co * cin;
      const double* xbase = xp + ni * cin * hw;
      double* orow = op + plane * hw;
      const double bv = bp[co];
      for (i64 s = 0; s < hw; ++s) orow[s] = bv;
      for (i64 ci = 0; ci < cin; ++ci) {
        const double wv = wrow[ci];
        if (wv == 0.0) continue;
        const double* xrow = xbase + ci * hw;
        for (i64 s = 0; s < hw; ++s) orow[s] += wv * xrow[s];
      }
    }
  });
  finish(out, "conv1x1");
  return out;
}

Tensor4 depthwise_conv(const Tensor4& x, const Tensor4& kernels) {
  const Shape4& xs = x.shape();
  const Shape4& ks = kernels.shape();
  require(ks.c == 1 && ks.h == ks.w,
          "depthwise_conv: kernels must be (c, 1, k, k), got " + ks.str());
  require(ks.h == 3 || ks.h == 7,
          "depthwise_conv: kernel size must be 3 or 7, got " + std::to_string(ks.h));
  require(ks.n == xs.c, "depthwise_conv: " + std::to_string(ks.n) +
                            " kernels for " + std::to_string(xs.c) + " channels");

  const i64 k = ks.h, pad = (k - 1) / 2;
  const i64 n = xs.n, c = xs.c, h = xs.h, w = xs.w;
  Tensor4 out = make_out(xs, promote(x.dtype(), kernels.dtype()));
  const double* xp = x.data();
  const double* kp = kernels.data();
  double* op = out.data();

  parallel_for(n * c, 2, [&](i64 b, i64 e) {
    for (i64 plane = b; plane < e; ++plane) {
      const i64 ci = plane % c;
      const double* kern = kp + ci * k * k;
      const double* xplane = xp + plane * h * w;
      double* oplane = op + plane * h * w;
      for (i64 i = 0; i < h; ++i) {
        for (i64 j = 0; j < w; ++j) {
          double acc = 0.0;
          for (i64 u = 0; u < k; ++u) {
            const i64 yy = i + u - pad;
            if (yy < 0 || yy >= h) continue;
            for (i64 v = 0; v < k; ++v) {
              const i64 xx = j + v - pad;
              if (xx < 0 || xx >= w) continue;
              acc += kern[u * k + v] * xplane[yy * w + xx];
            }
          }
          oplane[i * w + j] = acc;
        }
      }
    }
  });
  finish(out, "depthwise_conv");
  return out;
}

Tensor4 channel_pool(const Tensor4& x, PoolMode mode, std::vector<i32>* argmax) {
  const Shape4& xs = x.shape();
  Tensor4 out = make_out({xs.n, 1, xs.h, xs.w}, x.dtype());
  const i64 hw = xs.h * xs.w;
  const double* xp = x.data();
  double* op = out.data();
  if (argmax != nullptr) argmax->assign(static_cast<size_t>(xs.n * hw), 0);

  for (i64 ni = 0; ni < xs.n; ++ni) {
    const double* base = xp + ni * xs.c * hw;
    double* orow = op + ni * hw;
    for (i64 s = 0; s < hw; ++s) {
      if (mode == PoolMode::Avg) {
        double acc = 0.0;
        for (i64 ci = 0; ci < xs.c; ++ci) acc += base[ci * hw + s];
        orow[s] = acc / static_cast<double>(xs.c);
      } else {
        double best = base[s];
        i32 arg = 0;
        for (i64 ci = 1; ci < xs.c; ++ci) {
          const double v = base[ci * hw + s];
          if (v > best) {
            best = v;
            arg = static_cast<i32>(ci);
          }
        }
        orow[s] = best;
        if (argmax != nullptr) (*argmax)[static_cast<size_t>(ni * hw + s)] = arg;
      }
    }
  }
  finish(out, "channel_pool");
  return out;
}

Tensor4 global_avg_pool(const Tensor4& x) {
  const Shape4& xs = x.shape();
  Tensor4 out = make_out({xs.n, xs.c, 1, 1}, x.dtype());
  const i64 hw = xs.h * xs.w;
  const double* xp = x.data();
  double* op = out.data();
  for (i64 plane = 0; plane < xs.n * xs.c; ++plane) {
    const double* row = xp + plane * hw;
    double acc = 0.0;
    for (i64 s = 0; s < hw; ++s) acc += row[s];
    op[plane] = acc / static_cast<double>(hw);
  }
  finish(out, "global_avg_pool");
  return out;
}

Tensor4 activation(const Tensor4& x, Act act) {
  Tensor4 out = make_out(x.shape(), x.dtype());
  const double* xp = x.data();
  double* op = out.data();
  const i64 n = x.numel();
  switch (act) {
    case Act::Sigmoid:
      for (i64 i = 0; i < n; ++i) op[i] = sigmoid(xp[i]);
      break;
    case Act::Silu:
      for (i64 i = 0; i < n; ++i) op[i] = silu(xp[i]);
      break;
    case Act::Relu:
      for (i64 i = 0; i < n; ++i) op[i] = xp[i] > 0.0 ? xp[i] : 0.0;
      break;
  }
  finish(out, "activation");
  return out;
}

Tensor4 softmax_axis(const Tensor4& x, SoftmaxAxis axis) {
  const Shape4& xs = x.shape();
  Tensor4 out = make_out(xs, x.dtype());
  const double* xp = x.data();
  double* op = out.data();
  const i64 hw = xs.h * xs.w;

  if (axis == SoftmaxAxis::Channel) {
    for (i64 ni = 0; ni < xs.n; ++ni) {
      const double* base = xp + ni * xs.c * hw;
      double* obase = op + ni * xs.c * hw;
      for (i64 s = 0; s < hw; ++s) {
        double mx = -std::numeric_limits<double>::infinity();
        for (i64 ci = 0; ci < xs.c; ++ci) mx = std::max(mx, base[ci * hw + s]);
        double z = 0.0;
        for (i64 ci = 0; ci < xs.c; ++ci) {
          const double e = std::exp(base[ci * hw + s] - mx);
          obase[ci * hw + s] = e;
          z += e;
        }
        for (i64 ci = 0; ci < xs.c; ++ci) obase[ci * hw + s] /= z;
      }
    }
  } else {
    for (i64 plane = 0; plane < xs.n * xs.c; ++plane) {
      const double* row = xp + plane * hw;
      double* orow = op + plane * hw;
      double mx = -std::numeric_limits<double>::infinity();
      for (i64 s = 0; s < hw; ++s) mx = std::max(mx, row[s]);
      double z = 0.0;
      for (i64 s = 0; s < hw; ++s) {
        orow[s] = std::exp(row[s] - mx);
        z += orow[s];
      }
      for (i64 s = 0; s < hw; ++s) orow[s] /= z;
    }
  }
  finish(out, "softmax_axis");
  return out;
}

Tensor4 resample(const Tensor4& x, ResampleMode mode) {
  const Shape4& xs = x.shape();
  if (mode == ResampleMode::Up2) {
    Tensor4 out = make_out({xs.n, xs.c, xs.h * 2, xs.w * 2}, x.dtype());
    const double* xp = x.data();
    double* op = out.data();
    const i64 oh = xs.h * 2, ow = xs.w * 2;
    for (i64 plane = 0; plane < xs.n * xs.c; ++plane) {
      const double* ip = xp + plane * xs.h * xs.w;
      double* o = op + plane * oh * ow;
      for (i64 i = 0; i < oh; ++i) {
        const double* irow = ip + (i / 2) * xs.w;
        for (i64 j = 0; j < ow; ++j) o[i * ow + j] = irow[j / 2];
      }
    }
    finish(out, "resample");
    return out;
  }

  require(xs.h % 2 == 0 && xs.w % 2 == 0,
          "resample down2: spatial dims must be even, got " + xs.str());
  Tensor4 out = make_out({xs.n, xs.c, xs.h / 2, xs.w / 2}, x.dtype());
  const double* xp = x.data();
  double* op = out.data();
  const i64 oh = xs.h / 2, ow = xs.w / 2;
  for (i64 plane = 0; plane < xs.n * xs.c; ++plane) {
    const double* ip = xp + plane * xs.h * xs.w;
    double* o = op + plane * oh * ow;
    for (i64 i = 0; i < oh; ++i) {
      for (i64 j = 0; j < ow; ++j) {
        const double* a = ip + (2 * i) * xs.w + 2 * j;
        const double* b = ip + (2 * i + 1) * xs.w + 2 * j;
        o[i * ow + j] = (a[0] + a[1] + b[0] + b[1]) * 0.25;
      }
    }
  }
  finish(out, "resample");
  return out;
}

Tensor4 concat_channels(const std::vector<Tensor4>& parts) {
  require(!parts.empty(), "concat_channels: need at least one input");
  const Shape4& first = parts.front().shape();
  i64 ctotal = 0;
  Dtype dt = parts.front().dtype();
  for (const auto& p : parts) {
    const Shape4& s = p.shape();
    require(s.n == first.n && s.h == first.h && s.w == first.w,
            "concat_channels: mismatched batch or spatial dims: " + first.str() +
                " vs " + s.str());
    ctotal += s.c;
    dt = promote(dt, p.dtype());
  }
  Tensor4 out = make_out({first.n, ctotal, first.h, first.w}, dt);
  const i64 hw = first.h * first.w;
  double* op = out.data();
  for (i64 ni = 0; ni < first.n; ++ni) {
    i64 coff = 0;
    for (const auto& p : parts) {
      const i64 pc = p.shape().c;
      std::memcpy(op + (ni * ctotal + coff) * hw, p.data() + ni * pc * hw,
                  static_cast<size_t>(pc * hw) * sizeof(double));
      coff += pc;
    }
  }
  finish(out, "concat_channels");
  return out;
}

Tensor4 slice_channels(const Tensor4& x, i64 from, i64 count) {
  const Shape4& xs = x.shape();
  require(from >= 0 && count >= 1 && from + count <= xs.c,
          "slice_channels: range [" + std::to_string(from) + ", " +
              std::to_string(from + count) + ") out of " + std::to_string(xs.c) +
              " channels");
  Tensor4 out = make_out({xs.n, count, xs.h, xs.w}, x.dtype());
  const i64 hw = xs.h * xs.w;
  for (i64 ni = 0; ni < xs.n; ++ni) {
    std::memcpy(out.data() + ni * count * hw, x.data() + (ni * xs.c + from) * hw,
                static_cast<size_t>(count * hw) * sizeof(double));
  }
  finish(out, "slice_channels");
  return out;
}

namespace detail {

Broadcast2 broadcast_shapes(const Shape4& a, const Shape4& b) {
  const i64 ad[4] = {a.n, a.c, a.h, a.w};
  const i64 bd[4] = {b.n, b.c, b.h, b.w};
  i64 od[4];
  Broadcast2 r{};
  for (int i = 0; i < 4; ++i) {
    if (ad[i] == bd[i]) {
      od[i] = ad[i];
    } else if (ad[i] == 1) {
      od[i] = bd[i];
    } else if (bd[i] == 1) {
      od[i] = ad[i];
    } else {
      throw ShapeError("ew: shapes " + a.str() + " and " + b.str() +
                       " are not broadcast-compatible");
    }
    r.x_bcast[i] = ad[i] == 1 && od[i] != 1;
    r.y_bcast[i] = bd[i] == 1 && od[i] != 1;
  }
  r.out = {od[0], od[1], od[2], od[3]};
  return r;
}

}  // namespace detail

Tensor4 ew(const Tensor4& x, const Tensor4& y, EwOp op) {
  const auto bc = detail::broadcast_shapes(x.shape(), y.shape());
  Tensor4 out = make_out(bc.out, promote(x.dtype(), y.dtype()));
  const Shape4& os = bc.out;
  const Shape4& xs = x.shape();
  const Shape4& ys = y.shape();
  double* o = out.data();
  i64 idx = 0;
  for (i64 ni = 0; ni < os.n; ++ni) {
    const i64 xn = xs.n == 1 ? 0 : ni, yn = ys.n == 1 ? 0 : ni;
    for (i64 ci = 0; ci < os.c; ++ci) {
      const i64 xc = xs.c == 1 ? 0 : ci, yc = ys.c == 1 ? 0 : ci;
      for (i64 i = 0; i < os.h; ++i) {
        const i64 xh = xs.h == 1 ? 0 : i, yh = ys.h == 1 ? 0 : i;
        const double* xrow = x.data() + ((xn * xs.c + xc) * xs.h + xh) * xs.w;
        const double* yrow = y.data() + ((yn * ys.c + yc) * ys.h + yh) * ys.w;
        if (op == EwOp::Add) {
          for (i64 j = 0; j < os.w; ++j) {
            o[idx++] = xrow[xs.w == 1 ? 0 : j] + yrow[ys.w == 1 ? 0 : j];
          }
        } else {
          for (i64 j = 0; j < os.w; ++j) {
            o[idx++] = xrow[xs.w == 1 ? 0 : j] * yrow[ys.w == 1 ? 0 : j];
          }
        }
      }
    }
  }
  finish(out, "ew");
  return out;
}

Tensor4 sum_all(const Tensor4& x) {
  double acc = 0.0;
  const double* p = x.data();
  for (i64 i = 0; i < x.numel(); ++i) acc += p[i];
  Tensor4 out = make_out({1, 1, 1, 1}, x.dtype());
  out.data()[0] = acc;
  finish(out, "sum_all");
  return out;
}

Tensor4 affine(const Tensor4& x, double mul, double add) {
  if (!std::isfinite(mul) || !std::isfinite(add)) {
    throw ValueError("affine: scalar constants must be finite");
  }
  Tensor4 out = make_out(x.shape(), x.dtype());
  const double* xp = x.data();
  double* op = out.data();
  for (i64 i = 0; i < x.numel(); ++i) op[i] = mul * xp[i] + add;
  finish(out, "affine");
  return out;
}

Tensor4 unary(const Tensor4& x, Unary op, double arg) {
  Tensor4 out = make_out(x.shape(), x.dtype());
  const double* xp = x.data();
  double* op_ = out.data();
  const i64 n = x.numel();
  switch (op) {
    case Unary::Square:
      for (i64 i = 0; i < n; ++i) op_[i] = xp[i] * xp[i];
      break;
    case Unary::Sqrt:
      for (i64 i = 0; i < n; ++i) {
        if (xp[i] < 0.0) throw ValueError("unary sqrt: negative input");
        op_[i] = std::sqrt(xp[i]);
      }
      break;
    case Unary::LogClamped:
      if (!(arg > 0.0)) throw ValueError("unary log: clamp floor must be positive");
      for (i64 i = 0; i < n; ++i) op_[i] = std::log(std::max(xp[i], arg));
      break;
  }
  finish(out, "unary");
  return out;
}

double l2_norm(const Tensor4& x) {
  double acc = 0.0;
  const double* p = x.data();
  for (i64 i = 0; i < x.numel(); ++i) acc += p[i] * p[i];
  return std::sqrt(acc);
}

u64 tensor_checksum(const Tensor4& x) {
  u64 h = 0xcbf29ce484222325ull;
  const double* p = x.data();
  for (i64 i = 0; i < x.numel(); ++i) {
    u64 bits;
    static_assert(sizeof(bits) == sizeof(double));
    std::memcpy(&bits, &p[i], sizeof(bits));
    for (int b = 0; b < 8; ++b) {
      h ^= (bits >> (8 * b)) & 0xffu;
      h *= 0x100000001b3ull;
    }
  }
  return h;
}

}  // namespace dycaf
