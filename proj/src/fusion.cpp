#include "dycaf/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <sstream>

#include "dycaf/rng.hpp"

namespace dycaf {

namespace {

double l2(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

std::string fmt(double x) {
  std::ostringstream os;
  os << x;
  return os.str();
}

}  // namespace

void SolverConfig::validate() const {
  if (!(std::isfinite(alpha) && alpha > 0.0)) {
    throw ValueError("solver: alpha must be finite and positive, got " + fmt(alpha));
  }
  if (!(std::isfinite(tol) && tol > 0.0)) {
    throw ValueError("solver: tol must be finite and positive, got " + fmt(tol));
  }
  if (max_iter < 1) throw ValueError("solver: max_iter must be >= 1");
  if (memory < 1) throw ValueError("solver: memory must be >= 1");
}

EquilibriumResult broyden_solve(const PhiFn& phi, const Tensor4& f0, const SolverConfig& cfg) {
  cfg.validate();
  const Shape4 shape = f0.shape();
  const Dtype dt = f0.dtype();
  const i64 n = f0.numel();
  const double alpha = cfg.alpha;

  auto residual = [&](const Tensor4& f, int step) {
    Tensor4 ph;
    try {
      ph = phi(f);
    } catch (const ValueError& e) {
      throw ValueError("equilibrium solve failed at step " + std::to_string(step) + ": " +
                       e.what());
    }
    if (!(ph.shape() == shape)) {
      throw ShapeError("equilibrium map changed shape: " + shape.str() + " -> " +
                       ph.shape().str());
    }
    std::vector<double> g(static_cast<size_t>(n));
    const double* a = ph.data();
    const double* b = f.data();
    for (i64 i = 0; i < n; ++i) g[static_cast<size_t>(i)] = a[i] - b[i];
    double r = l2(g);
    if (!std::isfinite(r)) {
      throw ValueError("equilibrium solve produced a non-finite residual at step " +
                       std::to_string(step));
    }
    return std::make_pair(std::move(g), r);
  };

  // Limited-memory inverse-Jacobian model: B = -alpha*I + sum_i u_i w_i^T.
  std::deque<std::vector<double>> us;
  std::deque<std::vector<double>> ws;
  auto apply_b = [&](const std::vector<double>& v) {
    std::vector<double> out(v.size());
    for (size_t i = 0; i < v.size(); ++i) out[i] = -alpha * v[i];
    for (size_t h = 0; h < us.size(); ++h) {
      const double c = dot(ws[h], v);
      const std::vector<double>& u = us[h];
      for (size_t i = 0; i < v.size(); ++i) out[i] += u[i] * c;
    }
    return out;
  };
  auto apply_bt = [&](const std::vector<double>& v) {
    std::vector<double> out(v.size());
    for (size_t i = 0; i < v.size(); ++i) out[i] = -alpha * v[i];
    for (size_t h = 0; h < us.size(); ++h) {
      const double c = dot(us[h], v);
      const std::vector<double>& w = ws[h];
      for (size_t i = 0; i < v.size(); ++i) out[i] += w[i] * c;
    }
    return out;
  };

  EquilibriumResult res;
  Tensor4 f = f0;
  auto [g, r] = residual(f, 0);
  res.residual_trace.push_back(r);
  Tensor4 best_f = f;
  double best_r = r;
  if (r <= cfg.tol) {
    res.f_star = std::move(best_f);
    res.residual_norm = best_r;
    res.converged = true;
    return res;
  }

  int k = 0;
  while (k < cfg.max_iter) {
    std::vector<double> bg = apply_b(g);
    std::vector<double> next(static_cast<size_t>(n));
    const double* fd = f.data();
    for (i64 i = 0; i < n; ++i) {
      next[static_cast<size_t>(i)] = fd[i] - bg[static_cast<size_t>(i)];
    }
    Tensor4 f_new;
    try {
      f_new = Tensor4::from_vector(shape, std::move(next), dt);
    } catch (const ValueError& e) {
      throw ValueError("equilibrium solve produced a non-finite iterate at step " +
                       std::to_string(k + 1) + ": " + e.what());
    }
    auto [g_new, r_new] = residual(f_new, k + 1);
    ++k;
    res.residual_trace.push_back(r_new);
    if (r_new < best_r) {
      best_r = r_new;
      best_f = f_new;
    }
    if (r_new <= cfg.tol) {
      res.f_star = std::move(f_new);
      res.residual_norm = r_new;
      res.iterations = k;
      res.converged = true;
      return res;
    }

    // Secant pair from the realized step (post-quantization values).
    std::vector<double> dx(static_cast<size_t>(n));
    const double* fn = f_new.data();
    const double* fo = f.data();
    for (i64 i = 0; i < n; ++i) dx[static_cast<size_t>(i)] = fn[i] - fo[i];
    std::vector<double> dg(static_cast<size_t>(n));
    for (size_t i = 0; i < dg.size(); ++i) dg[i] = g_new[i] - g[i];
    std::vector<double> bdg = apply_b(dg);
    const double denom = dot(dx, bdg);
    const double scale = std::max(dot(dx, dx), dot(dg, dg));
    // Curvature guard: a near-singular secant denominator would blow the
    // update up, so the pair is dropped and the current model kept.
    if (std::isfinite(denom) && std::abs(denom) > 1e-8 * scale) {
      std::vector<double> u(static_cast<size_t>(n));
      for (size_t i = 0; i < u.size(); ++i) u[i] = (dx[i] - bdg[i]) / denom;
      std::vector<double> w = apply_bt(dx);
      us.push_back(std::move(u));
      ws.push_back(std::move(w));
      if (static_cast<int>(us.size()) > cfg.memory) {
        us.pop_front();
        ws.pop_front();
      }
    }
    f = std::move(f_new);
    g = std::move(g_new);
  }
  // Budget exhausted: report the best iterate seen and the total step count.
  res.f_star = std::move(best_f);
  res.residual_norm = best_r;
  res.iterations = k;
  res.converged = false;
  return res;
}

EquilibriumResult picard_solve(const PhiFn& phi, const Tensor4& f0, double tol, int max_iter) {
  if (!(std::isfinite(tol) && tol > 0.0)) {
    throw ValueError("picard_solve: tol must be finite and positive");
  }
  if (max_iter < 1) throw ValueError("picard_solve: max_iter must be >= 1");
  const Shape4 shape = f0.shape();
  const i64 n = f0.numel();

  auto eval = [&](const Tensor4& f, int step) {
    Tensor4 ph;
    try {
      ph = phi(f);
    } catch (const ValueError& e) {
      throw ValueError("fixed-point iteration failed at step " + std::to_string(step) + ": " +
                       e.what());
    }
    if (!(ph.shape() == shape)) {
      throw ShapeError("equilibrium map changed shape: " + shape.str() + " -> " +
                       ph.shape().str());
    }
    double s = 0.0;
    const double* a = ph.data();
    const double* b = f.data();
    for (i64 i = 0; i < n; ++i) {
      const double d = a[i] - b[i];
      s += d * d;
    }
    const double r = std::sqrt(s);
    if (!std::isfinite(r)) {
      throw ValueError("fixed-point iteration produced a non-finite residual at step " +
                       std::to_string(step));
    }
    return std::make_pair(std::move(ph), r);
  };

  EquilibriumResult res;
  Tensor4 f = f0;
  auto [ph, r] = eval(f, 0);
  res.residual_trace.push_back(r);
  Tensor4 best_f = f;
  double best_r = r;
  int k = 0;
  while (r > tol && k < max_iter) {
    f = std::move(ph);
    ++k;
    std::tie(ph, r) = eval(f, k);
    res.residual_trace.push_back(r);
    if (r < best_r) {
      best_r = r;
      best_f = f;
    }
  }
  res.iterations = k;
  if (r <= tol) {
    res.converged = true;
    res.residual_norm = r;
    res.f_star = std::move(f);
  } else {
    res.converged = false;
    res.residual_norm = best_r;
    res.f_star = std::move(best_f);
  }
  return res;
}

void FusionParams::validate() const {
  if (channels < 1) throw ShapeError("fusion: channels must be >= 1");
  if (!(std::isfinite(contraction_target) && contraction_target > 0.0 &&
        contraction_target < 1.0)) {
    throw ValueError("fusion: contraction target must lie in (0, 1)");
  }
}

double silu_max_gain() {
  // silu'(x) = s(x) * (1 + x * (1 - s(x))) is unimodal on [0, 4]; ternary
  // search pins its peak (about 1.0998 near x = 2.4).
  static const double gain = [] {
    auto d = [](double x) {
      const double s = 1.0 / (1.0 + std::exp(-x));
      return s * (1.0 + x * (1.0 - s));
    };
    double lo = 0.0, hi = 4.0;
    for (int i = 0; i < 200; ++i) {
      const double m1 = lo + (hi - lo) / 3.0;
      const double m2 = hi - (hi - lo) / 3.0;
      if (d(m1) < d(m2)) {
        lo = m1;
      } else {
        hi = m2;
      }
    }
    return d(0.5 * (lo + hi));
  }();
  return gain;
}

double depthwise_spectral_norm(const Tensor4& kernels, i64 probe_hw, int iters, u64 seed) {
  const Shape4 ks = kernels.shape();
  if (ks.c != 1 || ks.h != ks.w || (ks.h != 3 && ks.h != 7)) {
    throw ShapeError("depthwise_spectral_norm: kernels must be (c,1,k,k) with k in {3,7}");
  }
  if (probe_hw < ks.h) throw ShapeError("depthwise_spectral_norm: probe smaller than kernel");
  const i64 k = ks.h;
  const Shape4 plane{1, 1, probe_hw, probe_hw};

  auto norm_of = [](const Tensor4& t) {
    double s = 0.0;
    for (i64 i = 0; i < t.numel(); ++i) s += t.data()[i] * t.data()[i];
    return std::sqrt(s);
  };

  double worst = 0.0;
  for (i64 ch = 0; ch < ks.n; ++ch) {
    std::vector<double> kd(static_cast<size_t>(k * k));
    std::vector<double> kf(static_cast<size_t>(k * k));
    for (i64 i = 0; i < k; ++i) {
      for (i64 j = 0; j < k; ++j) {
        const double v = kernels.at(ch, 0, i, j);
        kd[static_cast<size_t>(i * k + j)] = v;
        kf[static_cast<size_t>((k - 1 - i) * k + (k - 1 - j))] = v;
      }
    }
    const Tensor4 kern = Tensor4::from_vector({1, 1, k, k}, kd, Dtype::F64);
    // With zero padding the adjoint of the convolution is convolution with
    // the 180-degree rotated kernel.
    const Tensor4 kern_t = Tensor4::from_vector({1, 1, k, k}, kf, Dtype::F64);

    Rng rng(derive_seed(seed, "spectral." + std::to_string(ch)));
    std::vector<double> vd(static_cast<size_t>(plane.numel()));
    for (double& x : vd) x = rng.uniform(-1.0, 1.0);
    Tensor4 v = Tensor4::from_vector(plane, std::move(vd), Dtype::F64);
    double vn = norm_of(v);
    if (vn == 0.0) continue;

    bool dead = false;
    for (int it = 0; it < iters; ++it) {
      Tensor4 av = depthwise_conv(v, kern);
      Tensor4 atav = depthwise_conv(av, kern_t);
      const double nn = norm_of(atav);
      if (nn == 0.0) {
        dead = true;
        break;
      }
      std::vector<double> nv(static_cast<size_t>(plane.numel()));
      for (i64 i = 0; i < plane.numel(); ++i) nv[static_cast<size_t>(i)] = atav.data()[i] / nn;
      v = Tensor4::from_vector(plane, std::move(nv), Dtype::F64);
    }
    if (dead) continue;
    const double sigma = norm_of(depthwise_conv(v, kern));
    worst = std::max(worst, sigma);
  }
  return worst;
}

void FusionParams::register_params(ParamStore& store) const {
  validate();
  const i64 c = channels;
  store.add_uniform(name("wconv.w"), {kSlots, kSlots * c, 1, 1}, kSlots * c);
  store.add_uniform(name("wconv.b"), {kSlots, 1, 1, 1}, kSlots * c);
  store.add_uniform(name("refine.k1"), {c, 1, 3, 3}, 9);
  store.add_uniform(name("refine.k2"), {c, 1, 3, 3}, 9);

  const double s1 = depthwise_spectral_norm(store.at(name("refine.k1")));
  const double s2 = depthwise_spectral_norm(store.at(name("refine.k2")));
  const double est = s1 * silu_max_gain() * s2;
  if (est > 0.0) {
    const double scale = std::sqrt(contraction_target / est);
    for (const char* field : {"refine.k1", "refine.k2"}) {
      const Tensor4& old = store.at(name(field));
      std::vector<double> vals(static_cast<size_t>(old.numel()));
      for (i64 i = 0; i < old.numel(); ++i) vals[static_cast<size_t>(i)] = old.data()[i] * scale;
      store.set(name(field), Tensor4::from_vector(old.shape(), std::move(vals), old.dtype()));
    }
  }
}

std::vector<std::string> FusionParams::param_names() const {
  return {name("wconv.w"), name("wconv.b"), name("refine.k1"), name("refine.k2")};
}

i64 FusionParams::param_count() const {
  return kSlots * (kSlots * channels) + kSlots + 2 * (channels * 9);
}

Tensor4 PhiProgram::operator()(const Tensor4& f) const {
  if (store == nullptr) throw ValueError("PhiProgram: parameter store not set");
  ValueCtx ctx{*store};
  return build_phi(ctx, f, coarse, fine, params);
}

Tensor4 fusion_weights(const Tensor4& coarse, const Tensor4& self, const Tensor4& fine,
                       const FusionParams& p, const ParamStore& store) {
  ValueCtx ctx{store};
  return build_fusion_weights(ctx, coarse, self, fine, p);
}

Tensor4 phi_apply(const Tensor4& f, const Tensor4& coarse, const Tensor4& fine,
                  const FusionParams& p, const ParamStore& store) {
  ValueCtx ctx{store};
  return build_phi(ctx, f, coarse, fine, p);
}

namespace {

double tensor_l2(const Tensor4& t) {
  double s = 0.0;
  for (i64 i = 0; i < t.numel(); ++i) s += t.data()[i] * t.data()[i];
  return std::sqrt(s);
}

constexpr int kAdjointGrowthLimit = 10;
constexpr int kAdjointMinBudget = 400;

}  // namespace

AdjointResult solve_adjoint(Tape& tape, Var phi_out, Var f_leaf, const Tensor4& grad_out,
                            const SolverConfig& cfg) {
  cfg.validate();
  const Shape4 shape = tape.value(phi_out).shape();
  if (!(grad_out.shape() == shape)) {
    throw ShapeError("solve_adjoint: seed shape " + grad_out.shape().str() +
                     " does not match output " + shape.str());
  }
  const i64 n = grad_out.numel();
  // The adjoint map u -> g + J^T u contracts at the same rate as phi but is
  // iterated plainly, so it gets a larger step budget than the forward's
  // accelerated solve.
  const int budget = std::max(cfg.max_iter, kAdjointMinBudget);

  AdjointResult res;
  res.u = Tensor4::from_vector(shape, std::vector<double>(grad_out.data(), grad_out.data() + n),
                               Dtype::F64);
  // The increment u_{k+1} - u_k equals (J^T)^k applied to the seed, so it
  // shrinks geometrically for a contraction; a sustained increase means the
  // map is expanding. (The norm of u itself grows toward its limit even in
  // the convergent case, so it is not a divergence signal.)
  double prev_delta = std::numeric_limits<double>::infinity();
  int growth = 0;
  for (int k = 1; k <= budget; ++k) {
    tape.zero_grad();
    tape.backward_from(phi_out, res.u);
    const Tensor4 jtu = tape.grad(f_leaf);
    std::vector<double> next(static_cast<size_t>(n));
    double delta2 = 0.0;
    for (i64 i = 0; i < n; ++i) {
      const double v = grad_out.data()[i] + jtu.data()[i];
      const double d = v - res.u.data()[i];
      delta2 += d * d;
      next[static_cast<size_t>(i)] = v;
    }
    Tensor4 u_new;
    try {
      u_new = Tensor4::from_vector(shape, std::move(next), Dtype::F64);
    } catch (const ValueError&) {
      throw ContractionError("adjoint iteration produced non-finite values at step " +
                             std::to_string(k));
    }
    const double delta = std::sqrt(delta2);
    growth = delta > prev_delta ? growth + 1 : 0;
    if (growth >= kAdjointGrowthLimit) {
      throw ContractionError("adjoint iteration diverging: the update norm grew for " +
                             std::to_string(kAdjointGrowthLimit) +
                             " consecutive steps (reached " + fmt(delta) + " at step " +
                             std::to_string(k) + "); the fixed-point map is not a contraction");
    }
    res.u = std::move(u_new);
    prev_delta = delta;
    res.iterations = k;
    if (delta <= cfg.tol) {
      res.converged = true;
      break;
    }
  }
  return res;
}

ImplicitResult implicit_backward(const PhiProgram& prog, const Tensor4& f_star,
                                 const Tensor4& grad_out, const SolverConfig& cfg,
                                 bool check_residual) {
  if (prog.store == nullptr) throw ValueError("implicit_backward: parameter store not set");
  cfg.validate();
  if (!(grad_out.shape() == f_star.shape())) {
    throw ShapeError("implicit_backward: gradient shape " + grad_out.shape().str() +
                     " does not match state " + f_star.shape().str());
  }
  if (check_residual) {
    Tensor4 ph = prog(f_star);
    double s = 0.0;
    for (i64 i = 0; i < f_star.numel(); ++i) {
      const double d = ph.data()[i] - f_star.data()[i];
      s += d * d;
    }
    const double r = std::sqrt(s);
    if (!(r <= cfg.tol * (1.0 + 1e-9))) {
      throw ValueError("implicit_backward requires a converged fixed point (residual " + fmt(r) +
                       ", tol " + fmt(cfg.tol) + ")");
    }
  }

  Tape tape;
  Var f_leaf = tape.leaf(f_star, /*requires_grad=*/true);
  Var coarse_leaf = tape.leaf(prog.coarse, /*requires_grad=*/true);
  Var fine_leaf = tape.leaf(prog.fine, /*requires_grad=*/true);
  TapeCtx ctx{tape, *prog.store};
  Var out = build_phi(ctx, f_leaf, coarse_leaf, fine_leaf, prog.params);

  AdjointResult adj = solve_adjoint(tape, out, f_leaf, grad_out, cfg);

  tape.zero_grad();
  tape.backward_from(out, adj.u);
  ImplicitResult res;
  res.grad_coarse = tape.grad(coarse_leaf);
  res.grad_fine = tape.grad(fine_leaf);
  res.param_grads = tape.grads(prog.params.param_names(), *prog.store);
  res.adjoint = std::move(adj.u);
  res.iterations = adj.iterations;
  res.converged = adj.converged;
  return res;
}

std::pair<Var, EquilibriumResult> equilibrium_solve_node(Tape& tape, const ParamStore& store,
                                                         Var coarse, Var fine, Var f0,
                                                         const FusionParams& p,
                                                         const SolverConfig& cfg) {
  p.validate();
  cfg.validate();
  PhiProgram prog{tape.value(coarse), tape.value(fine), p, &store};
  EquilibriumResult res =
      broyden_solve([&prog](const Tensor4& f) { return prog(f); }, tape.value(f0), cfg);

  const std::vector<std::string> names = p.param_names();
  std::vector<Var> inputs;
  inputs.reserve(2 + names.size());
  inputs.push_back(coarse);
  inputs.push_back(fine);
  for (const std::string& nm : names) inputs.push_back(tape.param(store, nm));

  const Tensor4 f_star = res.f_star;
  const bool converged = res.converged;
  const double resid = res.residual_norm;
  Var out = tape.custom(
      std::move(inputs), f_star,
      [prog, f_star, cfg, converged, resid, names](Tape& t, const Tensor4& gout,
                                                   const std::vector<Var>& ins) {
        if (!converged) {
          throw ValueError(
              "equilibrium gradient requested but the forward solve did not converge "
              "(residual " +
              fmt(resid) + ", tol " + fmt(cfg.tol) + ")");
        }
        ImplicitResult ib = implicit_backward(prog, f_star, gout, cfg,
                                              /*check_residual=*/false);
        if (!ib.converged) {
          throw ContractionError(
              "adjoint fixed point did not converge within its step budget; "
              "equilibrium gradients would be unreliable");
        }
        t.accumulate_grad(ins[0], ib.grad_coarse);
        t.accumulate_grad(ins[1], ib.grad_fine);
        for (size_t i = 0; i < names.size(); ++i) {
          t.accumulate_grad(ins[2 + i], ib.param_grads.at(names[i]));
        }
      });
  return {out, std::move(res)};
}

std::vector<double> dense_fd_jacobian(const PhiFn& phi, const Tensor4& f, double eps) {
  const i64 n = f.numel();
  if (n > 32) {
    throw ValueError("dense_fd_jacobian: state has " + std::to_string(n) +
                     " elements; the dense oracle is limited to 32");
  }
  if (!(std::isfinite(eps) && eps > 0.0)) throw ValueError("dense_fd_jacobian: bad eps");
  std::vector<double> jac(static_cast<size_t>(n * n));
  std::vector<double> base(f.data(), f.data() + n);
  for (i64 j = 0; j < n; ++j) {
    std::vector<double> hi = base;
    std::vector<double> lo = base;
    hi[static_cast<size_t>(j)] += eps;
    lo[static_cast<size_t>(j)] -= eps;
    const Tensor4 up = phi(Tensor4::from_vector(f.shape(), std::move(hi), f.dtype()));
    const Tensor4 dn = phi(Tensor4::from_vector(f.shape(), std::move(lo), f.dtype()));
    for (i64 i = 0; i < n; ++i) {
      jac[static_cast<size_t>(i * n + j)] = (up.data()[i] - dn.data()[i]) / (2.0 * eps);
    }
  }
  return jac;
}

}  // namespace dycaf
