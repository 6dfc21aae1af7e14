#include <Eigen/Dense>
#include <cmath>
#include <string>
#include <vector>

#include "doctest.h"
#include "dycaf/fusion.hpp"
#include "dycaf/rng.hpp"
#include "test_util.hpp"

using namespace dycaf;
using testutil::max_abs_diff;
using testutil::rand_uniform;

namespace {

double tensor_l2_diff(const Tensor4& a, const Tensor4& b) {
  double s = 0.0;
  for (i64 i = 0; i < a.numel(); ++i) {
    double d = a.data()[i] - b.data()[i];
    s += d * d;
  }
  return std::sqrt(s);
}

// Small dense affine contraction phi(f) = A f + b acting on the flat state.
struct AffineMap {
  std::vector<double> a;  // n x n row-major
  std::vector<double> b;
  Shape4 shape;

  Tensor4 operator()(const Tensor4& f) const {
    i64 n = f.numel();
    std::vector<double> out(static_cast<size_t>(n), 0.0);
    for (i64 i = 0; i < n; ++i) {
      double acc = b[static_cast<size_t>(i)];
      for (i64 j = 0; j < n; ++j)
        acc += a[static_cast<size_t>(i * n + j)] * f.data()[j];
      out[static_cast<size_t>(i)] = acc;
    }
    return Tensor4::from_vector(shape, std::move(out));
  }
};

AffineMap random_contraction(Shape4 shape, u64 seed, double scale) {
  i64 n = shape.numel();
  Rng rng(seed);
  AffineMap m;
  m.shape = shape;
  m.a.resize(static_cast<size_t>(n * n));
  m.b.resize(static_cast<size_t>(n));
  double row_cap = 0.0;
  for (i64 i = 0; i < n; ++i) {
    double row = 0.0;
    for (i64 j = 0; j < n; ++j) {
      double v = rng.uniform(-1.0, 1.0);
      m.a[static_cast<size_t>(i * n + j)] = v;
      row += std::abs(v);
    }
    row_cap = std::max(row_cap, row);
  }
  // Scale so the infinity norm (hence the spectral norm bound) is `scale`.
  for (double& v : m.a) v *= scale / row_cap;
  for (i64 i = 0; i < n; ++i) m.b[static_cast<size_t>(i)] = rng.uniform(-1.0, 1.0);
  return m;
}

// Exact fixed point of an AffineMap via Eigen: (I - A) f = b.
Tensor4 affine_fixed_point(const AffineMap& m) {
  i64 n = m.shape.numel();
  Eigen::MatrixXd A(n, n);
  Eigen::VectorXd b(n);
  for (i64 i = 0; i < n; ++i) {
    b(i) = m.b[static_cast<size_t>(i)];
    for (i64 j = 0; j < n; ++j) A(i, j) = m.a[static_cast<size_t>(i * n + j)];
  }
  Eigen::VectorXd f = (Eigen::MatrixXd::Identity(n, n) - A).lu().solve(b);
  std::vector<double> out(static_cast<size_t>(n));
  for (i64 i = 0; i < n; ++i) out[static_cast<size_t>(i)] = f(i);
  return Tensor4::from_vector(m.shape, std::move(out));
}

FusionParams small_fusion(i64 channels) {
  FusionParams p;
  p.prefix = "fu";
  p.channels = channels;
  return p;
}

}  // namespace

TEST_CASE("solver config validation") {
  SolverConfig ok;
  ok.validate();
  SolverConfig bad = ok;
  bad.alpha = 0.0;
  CHECK_THROWS_AS(bad.validate(), ValueError);
  bad = ok;
  bad.tol = -1.0;
  CHECK_THROWS_AS(bad.validate(), ValueError);
  bad = ok;
  bad.max_iter = 0;
  CHECK_THROWS_AS(bad.validate(), ValueError);
  bad = ok;
  bad.memory = -1;
  CHECK_THROWS_AS(bad.validate(), ValueError);
}

TEST_CASE("quasi-newton solve matches the closed-form fixed point") {
  for (u64 seed : {101ULL, 102ULL, 103ULL}) {
    AffineMap m = random_contraction({1, 2, 3, 3}, seed, 0.8);
    Tensor4 expected = affine_fixed_point(m);

    SolverConfig cfg;
    cfg.tol = 1e-10;
    cfg.max_iter = 100;
    EquilibriumResult res = broyden_solve(m, Tensor4(m.shape), cfg);
    CHECK(res.converged);
    CHECK(res.residual_norm <= 1e-10);
    CHECK(tensor_l2_diff(res.f_star, expected) < 1e-8);

    EquilibriumResult pic = picard_solve(m, Tensor4(m.shape), 1e-10, 1000);
    CHECK(pic.converged);
    CHECK(tensor_l2_diff(pic.f_star, expected) < 1e-8);
    CHECK(tensor_l2_diff(res.f_star, pic.f_star) < 1e-8);
  }
}

TEST_CASE("quasi-newton beats plain iteration on a slow contraction") {
  // Diagonal map with rates 0.9 and 0.95: plain iteration needs hundreds of
  // steps for 1e-10, while the secant model only has to learn two directions.
  Shape4 s{1, 1, 4, 4};
  AffineMap m;
  m.shape = s;
  m.a.assign(static_cast<size_t>(s.numel() * s.numel()), 0.0);
  m.b.resize(static_cast<size_t>(s.numel()));
  Rng rng(7);
  for (i64 i = 0; i < s.numel(); ++i) {
    m.a[static_cast<size_t>(i * s.numel() + i)] = (i % 2 == 0) ? 0.9 : 0.95;
    m.b[static_cast<size_t>(i)] = rng.uniform(-1.0, 1.0);
  }
  SolverConfig cfg;
  cfg.tol = 1e-10;
  cfg.max_iter = 100;
  EquilibriumResult qn = broyden_solve(m, Tensor4(m.shape), cfg);
  EquilibriumResult pic = picard_solve(m, Tensor4(m.shape), 1e-10, 2000);
  CHECK(qn.converged);
  CHECK(pic.converged);
  CHECK(qn.iterations < pic.iterations / 4);
}

TEST_CASE("a fixed-point start converges in zero iterations") {
  AffineMap m = random_contraction({1, 1, 2, 2}, 9, 0.5);
  Tensor4 star = affine_fixed_point(m);
  SolverConfig cfg;
  EquilibriumResult res = broyden_solve(m, star, cfg);
  CHECK(res.converged);
  CHECK(res.iterations == 0);
  REQUIRE(res.residual_trace.size() == 1);
  CHECK(res.residual_trace[0] <= cfg.tol);
  CHECK(max_abs_diff(res.f_star, star) == 0.0);
}

TEST_CASE("a vanishing step scale stalls honestly instead of throwing") {
  AffineMap m = random_contraction({1, 1, 2, 2}, 10, 0.6);
  SolverConfig cfg;
  cfg.alpha = 1e-9;  // steps of length ~1e-9 cannot reach the fixed point
  cfg.max_iter = 20;
  EquilibriumResult res = broyden_solve(m, Tensor4(m.shape), cfg);
  CHECK_FALSE(res.converged);
  CHECK(res.iterations == 20);
  CHECK(res.residual_norm > cfg.tol);
  CHECK(std::isfinite(res.residual_norm));
}

TEST_CASE("plain iteration diverges on an expanding map but root finding still works") {
  // phi(f) = 2f + c repels plain iteration from its fixed point, yet the
  // fixed point is a plain root of phi(f) - f, which the secant solver finds.
  Shape4 s{1, 1, 1, 2};
  PhiFn expanding = [s](const Tensor4& f) {
    Tensor4 out(s);
    out.at(0, 0, 0, 0) = 2.0 * f.at(0, 0, 0, 0) + 1.0;
    out.at(0, 0, 0, 1) = 2.0 * f.at(0, 0, 0, 1) - 0.5;
    return out;
  };
  EquilibriumResult pic = picard_solve(expanding, Tensor4(s), 1e-8, 30);
  CHECK_FALSE(pic.converged);
  CHECK(std::isfinite(pic.residual_norm));
  CHECK(pic.residual_norm > 1.0);

  SolverConfig cfg;
  cfg.tol = 1e-10;
  EquilibriumResult qn = broyden_solve(expanding, Tensor4(s), cfg);
  CHECK(qn.converged);
  CHECK(qn.f_star.at(0, 0, 0, 0) == doctest::Approx(-1.0).epsilon(1e-8));
  CHECK(qn.f_star.at(0, 0, 0, 1) == doctest::Approx(0.5).epsilon(1e-8));
}

TEST_CASE("non-finite map output is reported with the failing step") {
  Shape4 s{1, 1, 1, 1};
  int calls = 0;
  PhiFn blows_up = [&calls, s](const Tensor4& f) {
    ++calls;
    if (calls >= 3) {
      Tensor4 out(s);
      out.at(0, 0, 0, 0) = std::numeric_limits<double>::quiet_NaN();
      ensure_finite(out, "phi");
      return out;
    }
    return affine(f, 0.5, 1.0);
  };
  SolverConfig cfg;
  try {
    broyden_solve(blows_up, Tensor4(s), cfg);
    FAIL("expected ValueError");
  } catch (const ValueError& e) {
    CHECK(std::string(e.what()).find("step") != std::string::npos);
  }
}

TEST_CASE("registration rescales the refine chain to the contraction target") {
  FusionParams p = small_fusion(6);
  ParamStore store(31);
  p.register_params(store);
  CHECK(store.total_elements() == p.param_count());

  double s1 = depthwise_spectral_norm(store.at(p.name("refine.k1")));
  double s2 = depthwise_spectral_norm(store.at(p.name("refine.k2")));
  double chain = s1 * silu_max_gain() * s2;
  CHECK(chain == doctest::Approx(p.contraction_target).epsilon(1e-6));

  CHECK(silu_max_gain() == doctest::Approx(1.0998).epsilon(1e-3));

  // Spectral norm estimate is exact for a pure shift kernel (norm 1).
  Tensor4 shift({1, 1, 3, 3});
  shift.at(0, 0, 1, 1) = 1.0;
  CHECK(depthwise_spectral_norm(shift) == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("phi with neutral weights and identity kernels is silu of the slot mean") {
  FusionParams p = small_fusion(3);
  ParamStore store(33);
  p.register_params(store);
  // Zero weight conv -> uniform softmax over the three slots; identity
  // refine kernels make refine = silu.
  store.set(p.name("wconv.w"), Tensor4({3, 9, 1, 1}));
  store.set(p.name("wconv.b"), Tensor4({3, 1, 1, 1}));
  Tensor4 ident({3, 1, 3, 3});
  for (i64 c = 0; c < 3; ++c) ident.at(c, 0, 1, 1) = 1.0;
  store.set(p.name("refine.k1"), ident);
  store.set(p.name("refine.k2"), ident);

  Tensor4 coarse = rand_uniform({1, 3, 4, 4}, 34);
  Tensor4 fine = rand_uniform({1, 3, 4, 4}, 35);
  Tensor4 f = rand_uniform({1, 3, 4, 4}, 36);
  Tensor4 got = phi_apply(f, coarse, fine, p, store);

  Tensor4 mean = affine(ew(ew(coarse, f, EwOp::Add), fine, EwOp::Add), 1.0 / 3.0, 0.0);
  Tensor4 expected = activation(mean, Act::Silu);
  CHECK(max_abs_diff(got, expected) < 1e-12);
}

TEST_CASE("fusion solves converge across seeds and agree with brute force") {
  int converged = 0;
  const int total = 100;
  for (int i = 0; i < total; ++i) {
    u64 seed = 500 + static_cast<u64>(i);
    FusionParams p = small_fusion(4);
    ParamStore store(seed);
    p.register_params(store);
    Tensor4 coarse = rand_uniform({1, 4, 4, 4}, derive_seed(seed, "c"), -1.5, 1.5);
    Tensor4 fine = rand_uniform({1, 4, 4, 4}, derive_seed(seed, "f"), -1.5, 1.5);
    PhiProgram prog{coarse, fine, p, &store};

    SolverConfig cfg;  // alpha 0.1, tol 1e-6, 50 iterations
    EquilibriumResult res = broyden_solve([&](const Tensor4& f) { return prog(f); },
                                          Tensor4(coarse.shape()), cfg);
    if (!res.converged) continue;
    ++converged;

    EquilibriumResult pic = picard_solve([&](const Tensor4& f) { return prog(f); },
                                         Tensor4(coarse.shape()), 1e-9, 1000);
    REQUIRE(pic.converged);
    CHECK(tensor_l2_diff(res.f_star, pic.f_star) < 1e-5);
  }
  // The contraction bound is engineered in, so convergence should be the
  // norm; allow a small number of budget-bound stragglers.
  CHECK(converged >= 95);
}

TEST_CASE("residual trace is monotone enough to certify progress") {
  FusionParams p = small_fusion(4);
  ParamStore store(600);
  p.register_params(store);
  Tensor4 coarse = rand_uniform({1, 4, 4, 4}, 601);
  Tensor4 fine = rand_uniform({1, 4, 4, 4}, 602);
  PhiProgram prog{coarse, fine, p, &store};
  SolverConfig cfg;
  EquilibriumResult res = broyden_solve([&](const Tensor4& f) { return prog(f); },
                                        Tensor4(coarse.shape()), cfg);
  REQUIRE(res.converged);
  REQUIRE(res.residual_trace.size() == static_cast<size_t>(res.iterations) + 1);
  CHECK(res.residual_trace.back() <= cfg.tol);
  CHECK(res.residual_trace.front() > res.residual_trace.back());
}

TEST_CASE("implicit gradients match the dense linear-solve oracle") {
  // State small enough for an explicit Jacobian: (1, 2, 2, 4) = 16 entries.
  FusionParams p = small_fusion(2);
  ParamStore store(700);
  p.register_params(store);
  Tensor4 coarse = rand_uniform({1, 2, 2, 4}, 701);
  Tensor4 fine = rand_uniform({1, 2, 2, 4}, 702);
  PhiProgram prog{coarse, fine, p, &store};

  SolverConfig tight;
  tight.tol = 1e-13;
  tight.max_iter = 200;
  EquilibriumResult res = broyden_solve([&](const Tensor4& f) { return prog(f); },
                                        Tensor4(coarse.shape()), tight);
  REQUIRE(res.converged);
  const Tensor4& f_star = res.f_star;
  const i64 n = f_star.numel();

  Tensor4 grad_out = rand_uniform(f_star.shape(), 703);

  // Dense adjoint: u = (I - J^T)^{-1} g with J from central differences.
  std::vector<double> jac = dense_fd_jacobian([&](const Tensor4& f) { return prog(f); }, f_star);
  Eigen::MatrixXd J(n, n);
  for (i64 i = 0; i < n; ++i)
    for (i64 j = 0; j < n; ++j) J(i, j) = jac[static_cast<size_t>(i * n + j)];
  Eigen::VectorXd g(n);
  for (i64 i = 0; i < n; ++i) g(i) = grad_out.data()[i];
  Eigen::VectorXd u_dense =
      (Eigen::MatrixXd::Identity(n, n) - J.transpose()).lu().solve(g);

  SolverConfig cfg;
  ImplicitResult imp = implicit_backward(prog, f_star, grad_out, cfg);
  REQUIRE(imp.converged);
  double worst_u = 0.0;
  for (i64 i = 0; i < n; ++i)
    worst_u = std::max(worst_u, rel_err(imp.adjoint.data()[i], u_dense(i)));
  CHECK(worst_u < 1e-3);

  // Parameter and neighbor gradients from the dense adjoint: one VJP with
  // seed u_dense on a tape that evaluates phi once at the fixed point.
  Tensor4 u_t(f_star.shape());
  for (i64 i = 0; i < n; ++i) u_t.data()[i] = u_dense(i);
  Tape tape;
  TapeCtx ctx{tape, store};
  Var f_leaf = tape.leaf(f_star, true);
  Var c_leaf = tape.leaf(coarse, true);
  Var n_leaf = tape.leaf(fine, true);
  Var out = build_phi(ctx, f_leaf, c_leaf, n_leaf, p);
  tape.backward_from(out, u_t);

  for (const std::string& name : p.param_names()) {
    Tensor4 dense_g = tape.grads({name}, store).at(name);
    const Tensor4& imp_g = imp.param_grads.at(name);
    double worst = 0.0;
    for (i64 i = 0; i < dense_g.numel(); ++i)
      worst = std::max(worst, rel_err(dense_g.data()[i], imp_g.data()[i]));
    INFO("param " << name);
    CHECK(worst < 1e-3);
  }
  // Neighbor gradients pick up the extra direct ew(grad) path inside phi;
  // compare against the same formula evaluated with the dense adjoint.
  double worst_c = 0.0, worst_f = 0.0;
  Tensor4 dense_gc = tape.grad(c_leaf);
  Tensor4 dense_gf = tape.grad(n_leaf);
  for (i64 i = 0; i < n; ++i) {
    worst_c = std::max(worst_c, rel_err(dense_gc.data()[i], imp.grad_coarse.data()[i]));
    worst_f = std::max(worst_f, rel_err(dense_gf.data()[i], imp.grad_fine.data()[i]));
  }
  CHECK(worst_c < 1e-3);
  CHECK(worst_f < 1e-3);
}

TEST_CASE("implicit gradients match backprop through an unrolled solve") {
  FusionParams p = small_fusion(2);
  ParamStore store(710);
  p.register_params(store);
  Tensor4 coarse = rand_uniform({1, 2, 2, 4}, 711);
  Tensor4 fine = rand_uniform({1, 2, 2, 4}, 712);
  PhiProgram prog{coarse, fine, p, &store};

  SolverConfig tight;
  tight.tol = 1e-13;
  tight.max_iter = 200;
  EquilibriumResult res = broyden_solve([&](const Tensor4& f) { return prog(f); },
                                        Tensor4(coarse.shape()), tight);
  REQUIRE(res.converged);
  Tensor4 grad_out = rand_uniform(res.f_star.shape(), 713);

  SolverConfig cfg;
  ImplicitResult imp = implicit_backward(prog, res.f_star, grad_out, cfg);
  REQUIRE(imp.converged);

  // Unroll enough plain iterations that the truncated reverse sweep speaks
  // for the true derivative (0.9^120 ~ 3e-6).
  Tape tape;
  TapeCtx ctx{tape, store};
  Var c_leaf = tape.leaf(coarse, true);
  Var n_leaf = tape.leaf(fine, true);
  Var f = tape.constant(Tensor4(coarse.shape()));
  for (int k = 0; k < 120; ++k) f = build_phi(ctx, f, c_leaf, n_leaf, p);
  tape.backward_from(f, grad_out);

  for (const std::string& name : p.param_names()) {
    Tensor4 unrolled = tape.grads({name}, store).at(name);
    const Tensor4& implicit_g = imp.param_grads.at(name);
    double worst = 0.0;
    for (i64 i = 0; i < unrolled.numel(); ++i)
      worst = std::max(worst, rel_err(unrolled.data()[i], implicit_g.data()[i]));
    INFO("param " << name);
    CHECK(worst < 1e-3);
  }
  Tensor4 gc = tape.grad(c_leaf);
  Tensor4 gf = tape.grad(n_leaf);
  double worst_c = 0.0, worst_f = 0.0;
  for (i64 i = 0; i < gc.numel(); ++i) {
    worst_c = std::max(worst_c, rel_err(gc.data()[i], imp.grad_coarse.data()[i]));
    worst_f = std::max(worst_f, rel_err(gf.data()[i], imp.grad_fine.data()[i]));
  }
  CHECK(worst_c < 1e-3);
  CHECK(worst_f < 1e-3);
}

TEST_CASE("implicit backward refuses an unconverged point") {
  FusionParams p = small_fusion(2);
  ParamStore store(720);
  p.register_params(store);
  Tensor4 coarse = rand_uniform({1, 2, 2, 2}, 721);
  Tensor4 fine = rand_uniform({1, 2, 2, 2}, 722);
  PhiProgram prog{coarse, fine, p, &store};

  Tensor4 not_fixed = rand_uniform(coarse.shape(), 723, 5.0, 6.0);
  SolverConfig cfg;
  CHECK_THROWS_AS(
      implicit_backward(prog, not_fixed, Tensor4::full(coarse.shape(), 1.0), cfg),
      ValueError);
}

TEST_CASE("the adjoint iteration flags an expanding operator") {
  // phi = 2f has J^T = 2I at any point: u <- g + 2u diverges and the guard
  // must say so rather than loop to the budget.
  ParamStore store(730);
  Shape4 s{1, 1, 1, 2};
  Tape tape;
  Var f_leaf = tape.leaf(rand_uniform(s, 731), true);
  Var out = tape.affine(f_leaf, 2.0, 0.0);
  SolverConfig cfg;
  cfg.max_iter = 2000;
  CHECK_THROWS_AS(
      solve_adjoint(tape, out, f_leaf, Tensor4::full(s, 1.0), cfg),
      ContractionError);
}

TEST_CASE("the adjoint iteration solves a known linear system") {
  // phi = 0.5 f + const: u = g + 0.5 u, so u = 2 g exactly.
  Shape4 s{1, 1, 1, 3};
  Tape tape;
  Var f_leaf = tape.leaf(rand_uniform(s, 741), true);
  Var out = tape.affine(f_leaf, 0.5, 1.0);
  Tensor4 g = rand_uniform(s, 742);
  SolverConfig cfg;
  AdjointResult adj = solve_adjoint(tape, out, f_leaf, g, cfg);
  CHECK(adj.converged);
  for (i64 i = 0; i < g.numel(); ++i)
    CHECK(adj.u.data()[i] == doctest::Approx(2.0 * g.data()[i]).epsilon(1e-5));
}

TEST_CASE("the recorded solve node differentiates like the tight solver") {
  FusionParams p = small_fusion(2);
  ParamStore store(750);
  p.register_params(store);
  Tensor4 coarse = rand_uniform({1, 2, 2, 4}, 751);
  Tensor4 fine = rand_uniform({1, 2, 2, 4}, 752);
  Tensor4 mask = rand_uniform({1, 2, 2, 4}, 753);

  SolverConfig cfg;
  cfg.tol = 1e-12;
  cfg.max_iter = 200;

  Tape tape;
  Var c_leaf = tape.constant(coarse);
  Var n_leaf = tape.constant(fine);
  Var f0 = tape.constant(Tensor4(coarse.shape()));
  auto [f_star, res] = equilibrium_solve_node(tape, store, c_leaf, n_leaf, f0, p, cfg);
  REQUIRE(res.converged);
  Var loss = tape.sum_all(tape.ew(f_star, tape.constant(mask), EwOp::Mul));
  GradMap analytic = backward(tape, loss, p.param_names(), store);

  GradMap fd = finite_diff_grad(
      [&](const ParamStore& probe) {
        PhiProgram prog{coarse, fine, p, &probe};
        EquilibriumResult r = broyden_solve([&](const Tensor4& f) { return prog(f); },
                                            Tensor4(coarse.shape()), cfg);
        if (!r.converged) throw ValueError("probe solve failed");
        return sum_all(ew(r.f_star, mask, EwOp::Mul)).at(0, 0, 0, 0);
      },
      store);
  CHECK(max_rel_err(analytic, fd) < 1e-4);
}

TEST_CASE("the solve node refuses backward after a failed forward") {
  FusionParams p = small_fusion(2);
  ParamStore store(760);
  p.register_params(store);
  Tensor4 coarse = rand_uniform({1, 2, 2, 2}, 761);
  Tensor4 fine = rand_uniform({1, 2, 2, 2}, 762);

  SolverConfig cramped;
  cramped.alpha = 1e-9;  // cannot make progress
  cramped.max_iter = 3;

  Tape tape;
  Var c_leaf = tape.constant(coarse);
  Var n_leaf = tape.constant(fine);
  Var f0 = tape.constant(Tensor4(coarse.shape()));
  auto [f_star, res] = equilibrium_solve_node(tape, store, c_leaf, n_leaf, f0, p, cramped);
  CHECK_FALSE(res.converged);
  Var loss = tape.sum_all(f_star);
  CHECK_THROWS_AS(tape.backward(loss), ValueError);
}

TEST_CASE("the dense jacobian oracle rejects large states") {
  PhiFn id = [](const Tensor4& f) { return f; };
  CHECK_THROWS_AS(dense_fd_jacobian(id, Tensor4({1, 1, 8, 8})), ValueError);
}
