// Acceptance gate: one check per shipping criterion, one PASS/FAIL line
// each, nonzero exit if anything fails. Runs the real CLI entry points where
// a criterion concerns a command, and direct library calls elsewhere.

#include <Eigen/Dense>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "dycaf/attention.hpp"
#include "dycaf/class_adapt.hpp"
#include "dycaf/dt4.hpp"
#include "dycaf/fusion.hpp"
#include "dycaf/harness.hpp"
#include "dycaf/losses.hpp"
#include "dycaf/parallel.hpp"
#include "dycaf/rng.hpp"
#include "json.hpp"
#include "test_util.hpp"

using namespace dycaf;
using nlohmann::json;
using testutil::bit_equal;
using testutil::max_abs_diff;
using testutil::rand_uniform;

namespace {

int failures = 0;

void report(int number, const char* title, bool ok, const std::string& detail) {
  std::printf("criterion %d %s: %s (%s)\n", number, ok ? "PASS" : "FAIL", title,
              detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

void run(int number, const char* title, const std::function<std::pair<bool, std::string>()>& fn) {
  try {
    auto [ok, detail] = fn();
    report(number, title, ok, detail);
  } catch (const std::exception& e) {
    report(number, title, false, std::string("exception: ") + e.what());
  }
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3e", v);
  return buf;
}

// criterion 1: full-pipeline gradient check under gate and time budget, with
// the tighter gate on the explicit (no fixed-point solve) variant.
std::pair<bool, std::string> gradient_gate() {
  RunConfig cfg;  // default toy config, every mechanism on
  auto t0 = std::chrono::steady_clock::now();
  RunReport rep = cmd_gradcheck(cfg);
  double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  json j = json::parse(rep.json_text);
  double worst = j["gradcheck"]["max_rel_err"].get<double>();
  double gate = j["gradcheck"]["gate"].get<double>();

  RunConfig explicit_only = cfg;
  explicit_only.use_equilibrium = false;
  RunReport rep2 = cmd_gradcheck(explicit_only);
  json j2 = json::parse(rep2.json_text);
  double worst2 = j2["gradcheck"]["max_rel_err"].get<double>();
  double gate2 = j2["gradcheck"]["gate"].get<double>();

  bool ok = rep.all_passed && gate == 1e-4 && worst < 1e-4 && secs < 120.0 &&
            rep2.all_passed && gate2 == 1e-5 && worst2 < 1e-5;
  return {ok, "implicit max_rel_err=" + fmt(worst) + " in " + fmt(secs) +
                  " s; explicit max_rel_err=" + fmt(worst2)};
}

// criterion 2: quasi-Newton solve hits tolerance inside its budget and lands
// on the same fixed point as brute-force iteration.
std::pair<bool, std::string> fixed_point_gate() {
  RunConfig cfg;  // alpha 0.1, tol 1e-6, 50 iterations
  RunReport rep = cmd_solve(cfg);
  json j = json::parse(rep.json_text);
  bool ok = rep.all_passed;
  int max_iters = 0;
  double worst_agree = 0.0, worst_eq = 0.0;
  for (const auto& lvl : j["solver_levels"]) {
    ok = ok && lvl["quasi_newton"]["converged"].get<bool>();
    ok = ok && lvl["quasi_newton"]["residual_norm"].get<double>() <= 1e-6;
    ok = ok && lvl["quasi_newton"]["iterations"].get<int>() <= 50;
    ok = ok && lvl["solver_agreement_l2"].get<double>() <= 1e-5;
    ok = ok && lvl["equilibrium_loss"].get<double>() <= 1e-6;
    max_iters = std::max(max_iters, lvl["quasi_newton"]["iterations"].get<int>());
    worst_agree = std::max(worst_agree, lvl["solver_agreement_l2"].get<double>());
    worst_eq = std::max(worst_eq, lvl["equilibrium_loss"].get<double>());
  }
  return {ok, "max iterations=" + std::to_string(max_iters) + " agreement=" +
                  fmt(worst_agree) + " equilibrium_loss=" + fmt(worst_eq)};
}

// criterion 3: implicit gradients vs a dense linear-solve oracle and vs
// backprop through 10 unrolled iterations at the solution, on a 32-element
// state.
std::pair<bool, std::string> implicit_gradient_gate() {
  FusionParams p;
  p.prefix = "fu";
  p.channels = 2;
  // A stronger contraction keeps the 10-step unrolled reverse sweep within
  // the comparison tolerance; the dense oracle is exact either way.
  p.contraction_target = 0.45;
  ParamStore store(9100);
  p.register_params(store);
  Tensor4 coarse = rand_uniform({1, 2, 4, 4}, 9101);
  Tensor4 fine = rand_uniform({1, 2, 4, 4}, 9102);
  PhiProgram prog{coarse, fine, p, &store};

  SolverConfig tight;
  tight.tol = 1e-13;
  tight.max_iter = 200;
  EquilibriumResult res =
      broyden_solve([&](const Tensor4& f) { return prog(f); }, Tensor4(coarse.shape()), tight);
  if (!res.converged) return {false, "forward solve failed"};
  const Tensor4& f_star = res.f_star;
  const i64 n = f_star.numel();
  Tensor4 grad_out = rand_uniform(f_star.shape(), 9103);

  SolverConfig cfg;
  ImplicitResult imp = implicit_backward(prog, f_star, grad_out, cfg);
  if (!imp.converged) return {false, "adjoint solve failed"};

  // (a) dense oracle: u = (I - J^T)^{-1} g, then one VJP seeded with u.
  std::vector<double> jac =
      dense_fd_jacobian([&](const Tensor4& f) { return prog(f); }, f_star);
  Eigen::MatrixXd J(n, n);
  for (i64 i = 0; i < n; ++i)
    for (i64 k = 0; k < n; ++k) J(i, k) = jac[static_cast<size_t>(i * n + k)];
  Eigen::VectorXd g(n);
  for (i64 i = 0; i < n; ++i) g(i) = grad_out.data()[i];
  Eigen::VectorXd u = (Eigen::MatrixXd::Identity(n, n) - J.transpose()).lu().solve(g);
  Tensor4 u_t(f_star.shape());
  for (i64 i = 0; i < n; ++i) u_t.data()[i] = u(i);

  Tape dense_tape;
  TapeCtx dense_ctx{dense_tape, store};
  Var f_leaf = dense_tape.leaf(f_star, true);
  Var c_leaf = dense_tape.leaf(coarse, true);
  Var n_leaf = dense_tape.leaf(fine, true);
  Var phi_out = build_phi(dense_ctx, f_leaf, c_leaf, n_leaf, p);
  dense_tape.backward_from(phi_out, u_t);

  double worst_dense = 0.0;
  for (const std::string& name : p.param_names()) {
    Tensor4 expect = dense_tape.grads({name}, store).at(name);
    const Tensor4& got = imp.param_grads.at(name);
    for (i64 i = 0; i < expect.numel(); ++i)
      worst_dense = std::max(worst_dense, rel_err(expect.data()[i], got.data()[i]));
  }
  {
    Tensor4 gc = dense_tape.grad(c_leaf);
    Tensor4 gf = dense_tape.grad(n_leaf);
    for (i64 i = 0; i < n; ++i) {
      worst_dense = std::max(worst_dense, rel_err(gc.data()[i], imp.grad_coarse.data()[i]));
      worst_dense = std::max(worst_dense, rel_err(gf.data()[i], imp.grad_fine.data()[i]));
    }
  }

  // (b) unrolled oracle: 10 plain iterations starting at the solution.
  Tape unroll_tape;
  TapeCtx unroll_ctx{unroll_tape, store};
  Var uc = unroll_tape.leaf(coarse, true);
  Var uf = unroll_tape.leaf(fine, true);
  Var f = unroll_tape.constant(f_star);
  for (int k = 0; k < 10; ++k) f = build_phi(unroll_ctx, f, uc, uf, p);
  unroll_tape.backward_from(f, grad_out);

  double worst_unrolled = 0.0;
  for (const std::string& name : p.param_names()) {
    Tensor4 expect = unroll_tape.grads({name}, store).at(name);
    const Tensor4& got = imp.param_grads.at(name);
    for (i64 i = 0; i < expect.numel(); ++i)
      worst_unrolled = std::max(worst_unrolled, rel_err(expect.data()[i], got.data()[i]));
  }
  {
    Tensor4 gc = unroll_tape.grad(uc);
    Tensor4 gf = unroll_tape.grad(uf);
    for (i64 i = 0; i < n; ++i) {
      worst_unrolled = std::max(worst_unrolled, rel_err(gc.data()[i], imp.grad_coarse.data()[i]));
      worst_unrolled = std::max(worst_unrolled, rel_err(gf.data()[i], imp.grad_fine.data()[i]));
    }
  }

  bool ok = worst_dense < 1e-3 && worst_unrolled < 1e-3;
  return {ok, "vs dense=" + fmt(worst_dense) + " vs unrolled(10)=" + fmt(worst_unrolled)};
}

// criterion 4: normalization identities over 1000 random instances plus the
// uniform / one-hot divergence values.
std::pair<bool, std::string> normalization_gate() {
  double worst = 0.0;

  FusionParams fp;
  fp.prefix = "fu";
  fp.channels = 3;
  ParamStore fusion_store(9200);
  fp.register_params(fusion_store);

  ClassAdaptParams cp;
  cp.mode = ClassAdaptMode::Prototype;
  cp.channels = 4;
  cp.num_classes = 2;
  cp.proto_dim = 6;
  ParamStore ca_store(9201);
  cp.register_params(ca_store);
  Rng proto_rng(9202);
  std::vector<double> samples(8 * 6);
  for (double& v : samples) v = proto_rng.normal();
  Prototypes protos = kmeans_init(samples, 8, 6, 2, 9203);

  for (int i = 0; i < 1000; ++i) {
    u64 s = 9300 + static_cast<u64>(i);
    // fusion weight maps: three slot weights summing to one per site
    Tensor4 coarse = rand_uniform({1, 3, 4, 4}, derive_seed(s, "c"), -3.0, 3.0);
    Tensor4 self = rand_uniform({1, 3, 4, 4}, derive_seed(s, "s"), -3.0, 3.0);
    Tensor4 fine = rand_uniform({1, 3, 4, 4}, derive_seed(s, "f"), -3.0, 3.0);
    Tensor4 w = fusion_weights(coarse, self, fine, fp, fusion_store);
    for (i64 y = 0; y < 4; ++y)
      for (i64 x = 0; x < 4; ++x) {
        double sum = w.at(0, 0, y, x) + w.at(0, 1, y, x) + w.at(0, 2, y, x);
        worst = std::max(worst, std::abs(sum - 1.0));
      }

    // class-attention maps: per class, spatial sums of one
    Tensor4 feat = rand_uniform({1, 4, 3, 3}, derive_seed(s, "feat"), -2.0, 2.0);
    Tensor4 maps = class_attention(feat, protos, cp, ca_store);
    for (i64 k = 0; k < 2; ++k) {
      double sum = 0.0;
      for (i64 y = 0; y < 3; ++y)
        for (i64 x = 0; x < 3; ++x) sum += maps.at(0, k, y, x);
      worst = std::max(worst, std::abs(sum - 1.0));
    }

    // raw softmax over channels
    Tensor4 logits = rand_uniform({1, 5, 2, 2}, derive_seed(s, "l"), -6.0, 6.0);
    Tensor4 sm = softmax_axis(logits, SoftmaxAxis::Channel);
    for (i64 y = 0; y < 2; ++y)
      for (i64 x = 0; x < 2; ++x) {
        double sum = 0.0;
        for (i64 c = 0; c < 5; ++c) sum += sm.at(0, c, y, x);
        worst = std::max(worst, std::abs(sum - 1.0));
      }
  }

  Tensor4 uniform = Tensor4::full({2, 3, 4, 4}, 1.0 / 16.0);
  double kl_uniform = std::abs(kl_uniform_loss(uniform));
  Tensor4 onehot({1, 1, 4, 4});
  onehot.at(0, 0, 1, 2) = 1.0;
  double kl_onehot = kl_uniform_loss(onehot);
  double onehot_err = std::abs(kl_onehot - std::log(16.0));

  bool ok = worst < 1e-12 && kl_uniform < 1e-10 && onehot_err < 1e-9;
  return {ok, "worst sum deviation=" + fmt(worst) + " uniform_kl=" + fmt(kl_uniform) +
                  " onehot_kl_err=" + fmt(onehot_err)};
}

// criterion 5: attention degenerates correctly when its gates saturate.
std::pair<bool, std::string> reduction_identity_gate() {
  DualAttentionParams p;
  p.prefix = "t";
  p.channels = 8;
  p.squeeze = 4;
  p.mlp_hidden = 6;
  ParamStore store(9400);
  p.register_params(store);

  // Unit pixel weights: gate MLP output pinned at +40, sigmoid saturates to
  // exactly 1, so the dynamic pool must equal the plain global average.
  store.set(p.name("gap.l2.w"), Tensor4({1, p.mlp_hidden, 1, 1}));
  store.set(p.name("gap.l2.b"), Tensor4::full({1, 1, 1, 1}, 40.0));
  Tensor4 x = rand_uniform({2, 8, 4, 4}, 9401);
  double pool_diff = max_abs_diff(dynamic_gap(x, p, store), global_avg_pool(x));

  // Fully saturated-closed gates: both attention stages emit ~0, so the
  // residual block returns its input.
  store.set(p.name("bn.w2"), Tensor4({p.channels, p.channels / p.squeeze, 1, 1}));
  store.set(p.name("bn.b2"), Tensor4::full({p.channels, 1, 1, 1}, -40.0));
  store.set(p.name("sp.k"), Tensor4({2, 1, 7, 7}));
  store.set(p.name("sp.b"), Tensor4::full({1, 1, 1, 1}, -40.0));
  double identity_diff = max_abs_diff(dual_attention_forward(x, p, store), x);

  bool ok = pool_diff == 0.0 && identity_diff < 1e-6;
  return {ok, "pool_diff=" + fmt(pool_diff) + " closed_gate_diff=" + fmt(identity_diff)};
}

// criterion 6: the 8 mechanism subsets all run, differ pairwise, and add
// parameters monotonically.
std::pair<bool, std::string> ablation_gate() {
  RunConfig cfg;
  cfg.base_hw = 8;  // small pyramid keeps the eight variants quick
  RunReport rep = cmd_ablate(cfg);
  json j = json::parse(rep.json_text);
  bool ok = rep.all_passed;

  const auto& rows = j["ablation"];
  ok = ok && rows.size() == 8;
  std::set<std::string> signatures;
  for (const auto& row : rows) signatures.insert(row["levels_checksum"].get<std::string>());
  ok = ok && signatures.size() == 8;

  // Strict monotonicity over the subset order: enabling any one mechanism
  // on top of an existing combination adds parameters.
  auto count_of = [&](bool eq, bool attn, bool ca) -> i64 {
    for (const auto& row : rows) {
      if (row["use_equilibrium"] == eq && row["use_dual_attention"] == attn &&
          row["use_class_adapt"] == ca)
        return row["param_count"].get<i64>();
    }
    return -1;
  };
  for (int m = 0; m < 8; ++m) {
    bool eq = m & 1, attn = m & 2, ca = m & 4;
    i64 base = count_of(eq, attn, ca);
    ok = ok && base > 0;
    if (!eq) ok = ok && count_of(true, attn, ca) > base;
    if (!attn) ok = ok && count_of(eq, true, ca) > base;
    if (!ca) ok = ok && count_of(eq, attn, true) > base;
  }
  return {ok, std::to_string(signatures.size()) + " distinct outputs of 8"};
}

// criterion 7: the weighted sum of unit losses under default weights.
std::pair<bool, std::string> loss_composition_gate() {
  LossWeights w;
  double total = total_loss(1.0, 1.0, 1.0, w);
  bool ok = total == 1.7;
  return {ok, "total_loss(1,1,1)=" + fmt(total)};
}

// criterion 8: fixed seeds give bit-identical runs across thread counts;
// file round trips and clustering are reproducible.
std::pair<bool, std::string> determinism_gate() {
  RunConfig cfg;
  cfg.base_hw = 8;

  set_max_workers(1);
  Pipeline p1(cfg);
  PipelineValues v1 = p1.forward(p1.store);
  set_max_workers(4);
  Pipeline p2(cfg);
  PipelineValues v2 = p2.forward(p2.store);
  set_max_workers(0);

  bool runs_equal = v1.total == v2.total;
  for (int t = 0; t < 3; ++t)
    runs_equal = runs_equal &&
                 tensor_checksum(v1.levels[t]) == tensor_checksum(v2.levels[t]);

  Tensor4 blob = rand_uniform({2, 3, 5, 4}, 9500, -9.0, 9.0);
  auto path = (std::filesystem::temp_directory_path() / "dycaf_accept_rt.dt4").string();
  write_dt4(path, blob);
  Tensor4 back = read_dt4(path);
  std::remove(path.c_str());
  bool round_trip = bit_equal(back, blob);

  Rng rng(9501);
  std::vector<double> samples(60 * 3);
  for (double& v : samples) v = rng.normal();
  Prototypes a = kmeans_init(samples, 60, 3, 4, 9502);
  Prototypes b = kmeans_init(samples, 60, 3, 4, 9502);
  bool kmeans_repro = bit_equal(a.rows, b.rows);

  bool ok = runs_equal && round_trip && kmeans_repro;
  return {ok, std::string("threaded_runs_equal=") + (runs_equal ? "yes" : "no") +
                  " file_round_trip=" + (round_trip ? "yes" : "no") +
                  " clustering_reproducible=" + (kmeans_repro ? "yes" : "no")};
}

}  // namespace

int main() {
  run(1, "full-pipeline gradient check under gate and budget", gradient_gate);
  run(2, "fixed-point solve within tolerance and budget", fixed_point_gate);
  run(3, "implicit gradients match dense and unrolled oracles", implicit_gradient_gate);
  run(4, "attention and fusion maps normalize exactly", normalization_gate);
  run(5, "saturated gates reduce to pooling and identity", reduction_identity_gate);
  run(6, "mechanism ablations are distinct and monotone", ablation_gate);
  run(7, "loss weights combine to the expected total", loss_composition_gate);
  run(8, "seeded runs, file round trips, and clustering are reproducible", determinism_gate);

  if (failures > 0) {
    std::printf("acceptance: %d of 8 criteria failed\n", failures);
    return 1;
  }
  std::printf("acceptance: all 8 criteria passed\n");
  return 0;
}
