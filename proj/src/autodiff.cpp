#include "dycaf/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <utility>

namespace dycaf {

namespace {

Tensor4 zeros_f64(const Shape4& s) { return Tensor4(s, Dtype::F64); }

void add_into(Tensor4& dst, const Tensor4& src) {
  if (!(dst.shape() == src.shape())) {
    throw ShapeError("gradient accumulation shape mismatch: " + dst.shape().str() +
                     " vs " + src.shape().str());
  }
  double* d = dst.data();
  const double* s = src.data();
  for (i64 i = 0; i < dst.numel(); ++i) d[i] += s[i];
}

}  // namespace

Var Tape::push(Node n) {
  ensure_finite(n.value, "tape node value");
  nodes_.push_back(std::move(n));
  grads_.emplace_back();
  return Var{static_cast<i32>(nodes_.size() - 1)};
}

bool Tape::any_needs_grad(const std::vector<i32>& ids) const {
  for (i32 id : ids) {
    if (node(id).needs_grad) return true;
  }
  return false;
}

Var Tape::leaf(Tensor4 value, bool requires_grad) {
  Node n;
  n.kind = OpKind::Leaf;
  n.value = std::move(value);
  n.needs_grad = requires_grad;
  return push(std::move(n));
}

Var Tape::param(const ParamStore& store, const std::string& name) {
  if (bound_store_ == nullptr) {
    bound_store_ = &store;
  } else if (bound_store_ != &store) {
    throw ValueError("Tape::param: tape is bound to a different ParamStore");
  }
  auto it = param_ids_.find(name);
  if (it != param_ids_.end()) return Var{it->second};
  Var v = leaf(store.at(name), true);
  param_ids_.emplace(name, v.id);
  return v;
}

void Tape::accumulate_grad(Var v, const Tensor4& g) {
  Node& n = node(v.id);
  if (!n.needs_grad) return;
  Tensor4& slot = grads_[static_cast<size_t>(v.id)];
  if (slot.empty()) {
    slot = zeros_f64(n.value.shape());
  }
  add_into(slot, g);
}

Tensor4 Tape::grad(Var v) const {
  const Tensor4& slot = grads_.at(static_cast<size_t>(v.id));
  if (slot.empty()) return zeros_f64(node(v.id).value.shape());
  return slot;
}

void Tape::zero_grad() {
  for (auto& g : grads_) g = Tensor4();
  holds_grads_ = false;
}

void Tape::run_backward(i32 from) {
  holds_grads_ = true;
  for (i32 id = from; id >= 0; --id) {
    Node& n = node(id);
    if (!n.needs_grad || !n.backward) continue;
    if (grads_[static_cast<size_t>(id)].empty()) continue;
    n.backward(*this, id);
  }
}

void Tape::backward(Var scalar_loss) {
  const Tensor4& v = value(scalar_loss);
  if (!(v.shape() == Shape4{1, 1, 1, 1})) {
    throw ShapeError("Tape::backward: loss node must be scalar (1,1,1,1), got " +
                     v.shape().str());
  }
  if (holds_grads_) {
    throw ValueError("Tape::backward: tape already holds gradients; call zero_grad first");
  }
  accumulate_grad(scalar_loss, Tensor4::full({1, 1, 1, 1}, 1.0));
  run_backward(scalar_loss.id);
}

void Tape::backward_from(Var node_v, const Tensor4& seed) {
  if (!(seed.shape() == value(node_v).shape())) {
    throw ShapeError("Tape::backward_from: seed shape " + seed.shape().str() +
                     " does not match node shape " + value(node_v).shape().str());
  }
  if (holds_grads_) {
    throw ValueError("Tape::backward_from: tape already holds gradients; call zero_grad first");
  }
  accumulate_grad(node_v, seed);
  run_backward(node_v.id);
}

GradMap Tape::grads(const std::vector<std::string>& wrt, const ParamStore& store) const {
  GradMap out;
  for (const auto& name : wrt) {
    const Tensor4& p = store.at(name);  // throws for unknown names
    auto it = param_ids_.find(name);
    if (it == param_ids_.end()) {
      out.emplace(name, zeros_f64(p.shape()));
    } else {
      out.emplace(name, grad(Var{it->second}));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Primitive forwards with their reverse rules.

Var Tape::conv1x1(Var x, Var w, Var b) {
  Node n;
  n.kind = OpKind::Conv1x1;
  n.inputs = {x.id, w.id, b.id};
  n.value = dycaf::conv1x1(value(x), value(w), value(b));
  n.needs_grad = any_needs_grad(n.inputs);
  n.backward = [x, w, b](Tape& t, i32 self) {
    const Tensor4& g = t.grads_[static_cast<size_t>(self)];
    const Tensor4& xv = t.value(x);
    const Tensor4& wv = t.value(w);
    const Shape4& xs = xv.shape();
    const i64 cout = wv.shape().n, cin = xs.c, hw = xs.h * xs.w;

    if (t.node(x.id).needs_grad) {
      Tensor4 dx = zeros_f64(xs);
      for (i64 ni = 0; ni < xs.n; ++ni) {
        for (i64 co = 0; co < cout; ++co) {
          const double* grow = g.data() + (ni * cout + co) * hw;
          const double* wrow = wv.data() + co * cin;
          for (i64 ci = 0; ci < cin; ++ci) {
            const double wvv = wrow[ci];
            if (wvv == 0.0) continue;
            double* drow = dx.data() + (ni * cin + ci) * hw;
            for (i64 s = 0; s < hw; ++s) drow[s] += wvv * grow[s];
          }
        }
      }
      t.accumulate_grad(x, dx);
    }
    if (t.node(w.id).needs_grad) {
      Tensor4 dw = zeros_f64(wv.shape());
      for (i64 ni = 0; ni < xs.n; ++ni) {
        for (i64 co = 0; co < cout; ++co) {
          const double* grow = g.data() + (ni * cout + co) * hw;
          double* dwrow = dw.data() + co * cin;
          for (i64 ci = 0; ci < cin; ++ci) {
            const double* xrow = xv.data() + (ni * cin + ci) * hw;
            double acc = 0.0;
            for (i64 s = 0; s < hw; ++s) acc += grow[s] * xrow[s];
            dwrow[ci] += acc;
          }
        }
      }
      t.accumulate_grad(w, dw);
    }
    if (t.node(b.id).needs_grad) {
      Tensor4 db = zeros_f64(t.value(b).shape());
      for (i64 ni = 0; ni < xs.n; ++ni) {
        for (i64 co = 0; co < cout; ++co) {
          const double* grow = g.data() + (ni * cout + co) * hw;
          double acc = 0.0;
          for (i64 s = 0; s < hw; ++s) acc += grow[s];
          db.data()[co] += acc;
        }
      }
      t.accumulate_grad(b, db);
    }
  };
  return push(std::move(n));
}

Var Tape::depthwise(Var x, Var k) {
  Node n;
  n.kind = OpKind::Depthwise;
  n.inputs = {x.id, k.id};
  n.value = dycaf::depthwise_conv(value(x), value(k));
  n.needs_grad = any_needs_grad(n.inputs);
  n.backward = [x, k](Tape& t, i32 self) {
    const Tensor4& g = t.grads_[static_cast<size_t>(self)];
    const Tensor4& xv = t.value(x);
    const Tensor4& kv = t.value(k);
    const Shape4& xs = xv.shape();
    const i64 ksz = kv.shape().h, pad = (ksz - 1) / 2;
    const i64 h = xs.h, w = xs.w;

    const bool want_dx = t.node(x.id).needs_grad;
    const bool want_dk = t.node(k.id).needs_grad;
    Tensor4 dx = want_dx ? zeros_f64(xs) : Tensor4();
    Tensor4 dk = want_dk ? zeros_f64(kv.shape()) : Tensor4();

    for (i64 plane = 0; plane < xs.n * xs.c; ++plane) {
      const i64 ci = plane % xs.c;
      const double* kern = kv.data() + ci * ksz * ksz;
      const double* gp = g.data() + plane * h * w;
      const double* xp = xv.data() + plane * h * w;
      double* dxp = want_dx ? dx.data() + plane * h * w : nullptr;
      double* dkp = want_dk ? dk.data() + ci * ksz * ksz : nullptr;
      for (i64 i = 0; i < h; ++i) {
        for (i64 j = 0; j < w; ++j) {
          const double gv = gp[i * w + j];
          if (gv == 0.0) continue;
          for (i64 u = 0; u < ksz; ++u) {
            const i64 yy = i + u - pad;
            if (yy < 0 || yy >= h) continue;
            for (i64 v = 0; v < ksz; ++v) {
              const i64 xx = j + v - pad;
              if (xx < 0 || xx >= w) continue;
              if (want_dx) dxp[yy * w + xx] += kern[u * ksz + v] * gv;
              if (want_dk) dkp[u * ksz + v] += xp[yy * w + xx] * gv;
            }
          }
        }
      }
    }
    if (want_dx) t.accumulate_grad(x, dx);
    if (want_dk) t.accumulate_grad(k, dk);
  };
  return push(std::move(n));
}

Var Tape::channel_pool(Var x, PoolMode mode) {
  Node n;
  n.kind = OpKind::ChannelPool;
  n.inputs = {x.id};
  std::vector<i32> argmax;
  n.value = dycaf::channel_pool(value(x), mode, mode == PoolMode::Max ? &argmax : nullptr);
  n.needs_grad = any_needs_grad(n.inputs);
  n.backward = [x, mode, argmax = std::move(argmax)](Tape& t, i32 self) {
    const Tensor4& g = t.grads_[static_cast<size_t>(self)];
    const Shape4& xs = t.value(x).shape();
    const i64 hw = xs.h * xs.w;
    Tensor4 dx = zeros_f64(xs);
    for (i64 ni = 0; ni < xs.n; ++ni) {
      const double* grow = g.data() + ni * hw;
      double* dbase = dx.data() + ni * xs.c * hw;
      if (mode == PoolMode::Avg) {
        const double inv = 1.0 / static_cast<double>(xs.c);
        for (i64 ci = 0; ci < xs.c; ++ci) {
          for (i64 s = 0; s < hw; ++s) dbase[ci * hw + s] += grow[s] * inv;
        }
      } else {
        for (i64 s = 0; s < hw; ++s) {
          const i64 ci = argmax[static_cast<size_t>(ni * hw + s)];
          dbase[ci * hw + s] += grow[s];
        }
      }
    }
    t.accumulate_grad(x, dx);
  };
  return push(std::move(n));
}

Var Tape::global_avg_pool(Var x) {
  Node n;
  n.kind = OpKind::GlobalAvgPool;
  n.inputs = {x.id};
  n.value = dycaf::global_avg_pool(value(x));
  n.needs_grad = any_needs_grad(n.inputs);
  n.backward = [x](Tape& t, i32 self) {
    const Tensor4& g = t.grads_[static_cast<size_t>(self)];
    const Shape4& xs = t.value(x).shape();
    const i64 hw = xs.h * xs.w;
    const double inv = 1.0 / static_cast<double>(hw);
    Tensor4 dx = zeros_f64(xs);
    for (i64 plane = 0; plane < xs.n * xs.c; ++plane) {
      const double gv = g.data()[plane] * inv;
      double* drow = dx.data() + plane * hw;
      for (i64 s = 0; s < hw; ++s) drow[s] += gv;
    }
    t.accumulate_grad(x, dx);
  };
  return push(std::move(n));
}

Var Tape::activation(Var x, Act act) {
  Node n;
  n.kind = OpKind::Activation;
  n.inputs = {x.id};
  n.value = dycaf::activation(value(x), act);
  n.needs_grad = any_needs_grad(n.inputs);
  n.backward = [x, act](Tape& t, i32 self) {
    const Tensor4& g = t.grads_[static_cast<size_t>(self)];
    const Tensor4& xv = t.value(x);
    const Tensor4& yv = t.node(self).value;
    Tensor4 dx = zeros_f64(xv.shape());
    const double* gp = g.data();
    const double* xp = xv.data();
    const double* yp = yv.data();
    double* dp = dx.data();
    const i64 count = xv.numel();
    switch (act) {
      case Act::Sigmoid:
        for (i64 i = 0; i < count; ++i) dp[i] = gp[i] * yp[i] * (1.0 - yp[i]);
        break;
      case Act::Silu:
        for (i64 i = 0; i < count; ++i) {
          const double s = sigmoid(xp[i]);
          dp[i] = gp[i] * (s + xp[i] * s * (1.0 - s));
        }
        break;
      case Act::Relu:
        for (i64 i = 0; i < count; ++i) dp[i] = xp[i] > 0.0 ? gp[i] : 0.0;
        break;
    }
    t.accumulate_grad(x, dx);
  };
  return push(std::move(n));
}

Var Tape::softmax(Var x, SoftmaxAxis axis) {
  Node n;
  n.kind = OpKind::Softmax;
  n.inputs = {x.id};
  n.value = dycaf::softmax_axis(value(x), axis);
  n.needs_grad = any_needs_grad(n.inputs);
  // dx = y * (g - <g, y>) per softmax slice.
  n.backward = [x, axis](Tape& t, i32 self) {
    const Tensor4& g = t.grads_[static_cast<size_t>(self)];
    const Tensor4& yv = t.node(self).value;
    const Shape4& s = yv.shape();
    const i64 hw = s.h * s.w;
    Tensor4 dx = zeros_f64(s);
    if (axis == SoftmaxAxis::Channel) {
      for (i64 ni = 0; ni < s.n; ++ni) {
        const double* yb = yv.data() + ni * s.c * hw;
        const double* gb = g.data() + ni * s.c * hw;
        double* db = dx.data() + ni * s.c * hw;
        for (i64 site = 0; site < hw; ++site) {
          double dot = 0.0;
          for (i64 ci = 0; ci < s.c; ++ci) dot += gb[ci * hw + site] * yb[ci * hw + site];
          for (i64 ci = 0; ci < s.c; ++ci) {
            db[ci * hw + site] = yb[ci * hw + site] * (gb[ci * hw + site] - dot);
          }
        }
      }
    } else {
      for (i64 plane = 0; plane < s.n * s.c; ++plane) {
        const double* yrow = yv.data() + plane * hw;
        const double* grow = g.data() + plane * hw;
        double* drow = dx.data() + plane * hw;
        double dot = 0.0;
        for (i64 site = 0; site < hw; ++site) dot += grow[site] * yrow[site];
        for (i64 site = 0; site < hw; ++site) drow[site] = yrow[site] * (grow[site] - dot);
      }
    }
    t.accumulate_grad(x, dx);
  };
  return push(std::move(n));
}

Var Tape::resample(Var x, ResampleMode mode) {
  Node n;
  n.kind = OpKind::Resample;
  n.inputs = {x.id};
  n.value = dycaf::resample(value(x), mode);
  n.needs_grad = any_needs_grad(n.inputs);
  n.backward = [x, mode](Tape& t, i32 self) {
    const Tensor4& g = t.grads_[static_cast<size_t>(self)];
    const Shape4& xs = t.value(x).shape();
    const Shape4& gs = g.shape();
    Tensor4 dx = zeros_f64(xs);
    if (mode == ResampleMode::Up2) {
      for (i64 plane = 0; plane < xs.n * xs.c; ++plane) {
        const double* gp = g.data() + plane * gs.h * gs.w;
        double* dp = dx.data() + plane * xs.h * xs.w;
        for (i64 i = 0; i < gs.h; ++i) {
          for (i64 j = 0; j < gs.w; ++j) {
            dp[(i / 2) * xs.w + (j / 2)] += gp[i * gs.w + j];
          }
        }
      }
    } else {
      for (i64 plane = 0; plane < xs.n * xs.c; ++plane) {
        const double* gp = g.data() + plane * gs.h * gs.w;
        double* dp = dx.data() + plane * xs.h * xs.w;
        for (i64 i = 0; i < gs.h; ++i) {
          for (i64 j = 0; j < gs.w; ++j) {
            const double gv = gp[i * gs.w + j] * 0.25;
            dp[(2 * i) * xs.w + 2 * j] += gv;
            dp[(2 * i) * xs.w + 2 * j + 1] += gv;
            dp[(2 * i + 1) * xs.w + 2 * j] += gv;
            dp[(2 * i + 1) * xs.w + 2 * j + 1] += gv;
          }
        }
      }
    }
    t.accumulate_grad(x, dx);
  };
  return push(std::move(n));
}

Var Tape::concat(const std::vector<Var>& parts) {
  Node n;
  n.kind = OpKind::Concat;
  std::vector<Tensor4> vals;
  vals.reserve(parts.size());
  for (Var p : parts) {
    n.inputs.push_back(p.id);
    vals.push_back(value(p));
  }
  n.value = dycaf::concat_channels(vals);
  n.needs_grad = any_needs_grad(n.inputs);
  n.backward = [parts](Tape& t, i32 self) {
    const Tensor4& g = t.grads_[static_cast<size_t>(self)];
    i64 coff = 0;
    for (Var p : parts) {
      const i64 pc = t.value(p).shape().c;
      if (t.node(p.id).needs_grad) {
        t.accumulate_grad(p, dycaf::slice_channels(g, coff, pc));
      }
      coff += pc;
    }
  };
  return push(std::move(n));
}

Var Tape::slice_channels(Var x, i64 from, i64 count) {
  Node n;
  n.kind = OpKind::Slice;
  n.inputs = {x.id};
  n.value = dycaf::slice_channels(value(x), from, count);
  n.needs_grad = any_needs_grad(n.inputs);
  n.backward = [x, from, count](Tape& t, i32 self) {
    const Tensor4& g = t.grads_[static_cast<size_t>(self)];
    const Shape4& xs = t.value(x).shape();
    const i64 hw = xs.h * xs.w;
    Tensor4 dx = zeros_f64(xs);
    for (i64 ni = 0; ni < xs.n; ++ni) {
      for (i64 ci = 0; ci < count; ++ci) {
        const double* grow = g.data() + (ni * count + ci) * hw;
        double* drow = dx.data() + (ni * xs.c + from + ci) * hw;
        for (i64 s = 0; s < hw; ++s) drow[s] += grow[s];
      }
    }
    t.accumulate_grad(x, dx);
  };
  return push(std::move(n));
}

Var Tape::ew(Var x, Var y, EwOp op) {
  Node n;
  n.kind = OpKind::Ew;
  n.inputs = {x.id, y.id};
  n.value = dycaf::ew(value(x), value(y), op);
  n.needs_grad = any_needs_grad(n.inputs);
  n.backward = [x, y, op](Tape& t, i32 self) {
    const Tensor4& g = t.grads_[static_cast<size_t>(self)];
    const Tensor4& xv = t.value(x);
    const Tensor4& yv = t.value(y);
    const Shape4& os = g.shape();
    const Shape4& xs = xv.shape();
    const Shape4& ys = yv.shape();
    const bool want_dx = t.node(x.id).needs_grad;
    const bool want_dy = t.node(y.id).needs_grad;
    Tensor4 dx = want_dx ? zeros_f64(xs) : Tensor4();
    Tensor4 dy = want_dy ? zeros_f64(ys) : Tensor4();

    for (i64 ni = 0; ni < os.n; ++ni) {
      const i64 xn = xs.n == 1 ? 0 : ni, yn = ys.n == 1 ? 0 : ni;
      for (i64 ci = 0; ci < os.c; ++ci) {
        const i64 xc = xs.c == 1 ? 0 : ci, yc = ys.c == 1 ? 0 : ci;
        for (i64 i = 0; i < os.h; ++i) {
          const i64 xh = xs.h == 1 ? 0 : i, yh = ys.h == 1 ? 0 : i;
          const i64 xrow = ((xn * xs.c + xc) * xs.h + xh) * xs.w;
          const i64 yrow = ((yn * ys.c + yc) * ys.h + yh) * ys.w;
          const double* grow = g.data() + ((ni * os.c + ci) * os.h + i) * os.w;
          for (i64 j = 0; j < os.w; ++j) {
            const i64 xi = xrow + (xs.w == 1 ? 0 : j);
            const i64 yi = yrow + (ys.w == 1 ? 0 : j);
            const double gv = grow[j];
            if (op == EwOp::Add) {
              if (want_dx) dx.data()[xi] += gv;
              if (want_dy) dy.data()[yi] += gv;
            } else {
              if (want_dx) dx.data()[xi] += gv * yv.data()[yi];
              if (want_dy) dy.data()[yi] += gv * xv.data()[xi];
            }
          }
        }
      }
    }
    if (want_dx) t.accumulate_grad(x, dx);
    if (want_dy) t.accumulate_grad(y, dy);
  };
  return push(std::move(n));
}

Var Tape::sum_all(Var x) {
  Node n;
  n.kind = OpKind::SumAll;
  n.inputs = {x.id};
  n.value = dycaf::sum_all(value(x));
  n.needs_grad = any_needs_grad(n.inputs);
  n.backward = [x](Tape& t, i32 self) {
    const double gv = t.grads_[static_cast<size_t>(self)].data()[0];
    t.accumulate_grad(x, Tensor4::full(t.value(x).shape(), gv));
  };
  return push(std::move(n));
}

Var Tape::affine(Var x, double mul, double add) {
  Node n;
  n.kind = OpKind::Affine;
  n.inputs = {x.id};
  n.value = dycaf::affine(value(x), mul, add);
  n.needs_grad = any_needs_grad(n.inputs);
  n.backward = [x, mul](Tape& t, i32 self) {
    const Tensor4& g = t.grads_[static_cast<size_t>(self)];
    t.accumulate_grad(x, dycaf::affine(g, mul, 0.0));
  };
  return push(std::move(n));
}

Var Tape::unary(Var x, Unary op, double arg) {
  Node n;
  n.kind = OpKind::UnaryOp;
  n.inputs = {x.id};
  n.value = dycaf::unary(value(x), op, arg);
  n.needs_grad = any_needs_grad(n.inputs);
  n.backward = [x, op, arg](Tape& t, i32 self) {
    const Tensor4& g = t.grads_[static_cast<size_t>(self)];
    const Tensor4& xv = t.value(x);
    const Tensor4& yv = t.node(self).value;
    Tensor4 dx = zeros_f64(xv.shape());
    const double* gp = g.data();
    const double* xp = xv.data();
    const double* yp = yv.data();
    double* dp = dx.data();
    const i64 count = xv.numel();
    switch (op) {
      case Unary::Square:
        for (i64 i = 0; i < count; ++i) dp[i] = gp[i] * 2.0 * xp[i];
        break;
      case Unary::Sqrt:
        // Subgradient 0 at the origin keeps converged residual norms finite.
        for (i64 i = 0; i < count; ++i) dp[i] = yp[i] > 0.0 ? gp[i] * 0.5 / yp[i] : 0.0;
        break;
      case Unary::LogClamped:
        for (i64 i = 0; i < count; ++i) dp[i] = xp[i] > arg ? gp[i] / xp[i] : 0.0;
        break;
    }
    t.accumulate_grad(x, dx);
  };
  return push(std::move(n));
}

Var Tape::custom(std::vector<Var> inputs, Tensor4 value,
                 std::function<void(Tape&, const Tensor4&, const std::vector<Var>&)> backward_fn) {
  Node n;
  n.kind = OpKind::Custom;
  for (Var v : inputs) n.inputs.push_back(v.id);
  n.value = std::move(value);
  n.needs_grad = any_needs_grad(n.inputs);
  n.backward = [inputs = std::move(inputs), fn = std::move(backward_fn)](Tape& t, i32 self) {
    fn(t, t.grads_[static_cast<size_t>(self)], inputs);
  };
  return push(std::move(n));
}

// ---------------------------------------------------------------------------

GradMap backward(Tape& tape, Var loss, const std::vector<std::string>& wrt,
                 const ParamStore& store) {
  tape.backward(loss);
  return tape.grads(wrt, store);
}

GradMap finite_diff_grad(const std::function<double(const ParamStore&)>& f,
                         const ParamStore& store, double eps) {
  if (store.dtype() != Dtype::F64) {
    throw ValueError("finite_diff_grad: 64-bit parameter stores only");
  }
  if (!(eps > 0.0)) throw ValueError("finite_diff_grad: eps must be positive");

  ParamStore work = store;
  GradMap out;
  for (const auto& name : store.names()) {
    Tensor4& p = work.at(name);
    Tensor4 g(p.shape(), Dtype::F64);
    for (i64 i = 0; i < p.numel(); ++i) {
      const double orig = p.data()[i];
      p.data()[i] = orig + eps;
      const double fp = f(work);
      p.data()[i] = orig - eps;
      const double fm = f(work);
      p.data()[i] = orig;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        std::ostringstream os;
        os << "finite_diff_grad: non-finite objective while perturbing '" << name
           << "' at flat index " << i;
        throw ValueError(os.str());
      }
      g.data()[i] = (fp - fm) / (2.0 * eps);
    }
    out.emplace(name, std::move(g));
  }
  return out;
}

double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

double max_rel_err(const GradMap& a, const GradMap& b) {
  if (a.size() != b.size()) throw ValueError("max_rel_err: key sets differ");
  double worst = 0.0;
  auto ib = b.begin();
  for (auto ia = a.begin(); ia != a.end(); ++ia, ++ib) {
    if (ia->first != ib->first) throw ValueError("max_rel_err: key sets differ");
    const Tensor4& ta = ia->second;
    const Tensor4& tb = ib->second;
    if (!(ta.shape() == tb.shape())) throw ShapeError("max_rel_err: shape mismatch");
    for (i64 i = 0; i < ta.numel(); ++i) {
      worst = std::max(worst, rel_err(ta.data()[i], tb.data()[i]));
    }
  }
  return worst;
}

}  // namespace dycaf
