#include "dycaf/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <set>
#include <sstream>

#include "json.hpp"

#include "dycaf/parallel.hpp"
#include "dycaf/rng.hpp"

namespace dycaf {

namespace {

using nlohmann::json;
using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

std::string fmt(double x) {
  std::ostringstream os;
  os << x;
  return os.str();
}

std::string hex64(u64 v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

Tensor4 seeded_normal(Shape4 shape, u64 seed, Dtype dt) {
  Rng rng(seed);
  std::vector<double> v(static_cast<size_t>(shape.numel()));
  for (double& x : v) x = rng.normal();
  return Tensor4::from_vector(shape, std::move(v), dt);
}

NeckConfig make_neck_config(const RunConfig& cfg) {
  NeckConfig nc;
  nc.channels = cfg.channels;
  nc.use_equilibrium = cfg.use_equilibrium;
  nc.use_dual_attention = cfg.use_dual_attention;
  nc.alg1_spatial = false;
  nc.solver.alpha = cfg.solver_alpha;
  nc.solver.tol = cfg.solver_tol;
  nc.solver.max_iter = static_cast<int>(cfg.solver_max_iter);
  nc.solver.memory = static_cast<int>(cfg.solver_memory);
  return nc;
}

ClassAdaptParams make_ca_params(const RunConfig& cfg) {
  ClassAdaptParams p;
  p.prefix = "ca";
  p.mode = cfg.ca_mode == "prototype" ? ClassAdaptMode::Prototype : ClassAdaptMode::Conv;
  p.channels = cfg.channels;
  p.num_classes = cfg.ca_num_classes;
  p.proto_dim = kPrototypeDim;
  return p;
}

template <class Ctx>
struct BuiltT {
  std::array<typename Ctx::V, 3> levels;
  typename Ctx::V l_det;
  typename Ctx::V l_eq;
  typename Ctx::V l_ca;
  typename Ctx::V total;
  std::vector<EquilibriumResult> eq;
  std::vector<typename Ctx::V> maps;
};

template <class Ctx>
BuiltT<Ctx> build_pipeline(Ctx& ctx, const Pipeline& pipe) {
  const RunConfig& cfg = pipe.cfg;
  std::array<typename Ctx::V, 3> in = {ctx.constant(pipe.input.c3), ctx.constant(pipe.input.c4),
                                       ctx.constant(pipe.input.c5)};
  auto neck_out = build_neck_forward(ctx, in, pipe.neck);

  BuiltT<Ctx> out;
  out.eq = std::move(neck_out.eq);
  out.levels = neck_out.levels;

  if (cfg.use_class_adapt) {
    for (int t = 0; t < 3; ++t) {
      typename Ctx::V maps;
      typename Ctx::V adapted;
      if (pipe.ca.mode == ClassAdaptMode::Prototype) {
        maps = build_class_attention(ctx, out.levels[t], *pipe.protos, pipe.ca);
        adapted = build_adapt_features(ctx, out.levels[t], maps, pipe.ca);
      } else {
        auto r = build_class_adapt_simple(ctx, out.levels[t], pipe.ca);
        adapted = r.adapted;
        maps = r.maps;
      }
      out.levels[t] = adapted;
      auto kl = build_kl_uniform(ctx, maps);
      out.maps.push_back(std::move(maps));
      out.l_ca = t == 0 ? kl : ctx.ew(out.l_ca, kl, EwOp::Add);
    }
  } else {
    out.l_ca = ctx.constant(Tensor4({1, 1, 1, 1}));
  }

  if (cfg.use_equilibrium) {
    // Residual of the fusion map at each solved level, using the same
    // neighbor slots the solver saw.
    for (int t = 0; t < 3; ++t) {
      auto phi_t = build_phi(ctx, neck_out.levels[t], neck_out.coarse[t], neck_out.fine[t],
                             pipe.neck.fusion);
      auto dist = build_l2_distance(ctx, phi_t, neck_out.levels[t]);
      out.l_eq = t == 0 ? dist : ctx.ew(out.l_eq, dist, EwOp::Add);
    }
  } else {
    out.l_eq = ctx.constant(Tensor4({1, 1, 1, 1}));
  }

  out.l_det = build_mse(ctx, out.levels[0], ctx.constant(pipe.det_target));
  const LossWeights w{cfg.lambda_det, cfg.lambda_eq, cfg.lambda_ca};
  out.total = build_total_loss(ctx, out.l_det, out.l_eq, out.l_ca, w);
  return out;
}

json eq_to_json(const EquilibriumResult& r) {
  json j;
  j["iterations"] = r.iterations;
  j["residual_norm"] = r.residual_norm;
  j["converged"] = r.converged;
  j["residual_trace"] = r.residual_trace;
  return j;
}

json config_json(const RunConfig& cfg) {
  json j = json::object();
  for (const auto& [k, v] : cfg.echo()) j[k] = v;
  return j;
}

struct Checker {
  json checks = json::array();
  bool all = true;
  void add(const std::string& name, bool pass, const std::string& detail = "") {
    json c;
    c["name"] = name;
    c["passed"] = pass;
    if (!detail.empty()) c["detail"] = detail;
    checks.push_back(std::move(c));
    all = all && pass;
  }
};

RunReport finish(const char* command, const RunConfig& cfg, Checker& ck, json body,
                 double elapsed_ms) {
  json rep;
  rep["schema_version"] = 1;
  rep["command"] = command;
  rep["config"] = config_json(cfg);
  rep["checks"] = std::move(ck.checks);
  rep["all_passed"] = ck.all;
  rep["elapsed_ms"] = elapsed_ms;
  for (auto& [k, v] : body.items()) rep[k] = std::move(v);
  RunReport out;
  out.json_text = rep.dump(2);
  out.all_passed = ck.all;
  return out;
}

std::vector<i64> pick_indices(i64 n, i64 k, Rng& rng) {
  if (k >= n) {
    std::vector<i64> all(static_cast<size_t>(n));
    for (i64 i = 0; i < n; ++i) all[static_cast<size_t>(i)] = i;
    return all;
  }
  std::set<i64> s;
  while (static_cast<i64>(s.size()) < k) s.insert(rng.index(n));
  return {s.begin(), s.end()};
}

double tensor_l2_diff(const Tensor4& a, const Tensor4& b) {
  double s = 0.0;
  for (i64 i = 0; i < a.numel(); ++i) {
    const double d = a.data()[i] - b.data()[i];
    s += d * d;
  }
  return std::sqrt(s);
}

std::string levels_signature(const std::array<Tensor4, 3>& levels) {
  return hex64(tensor_checksum(levels[0])) + ":" + hex64(tensor_checksum(levels[1])) + ":" +
         hex64(tensor_checksum(levels[2]));
}

double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double p95_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  const size_t idx = static_cast<size_t>(std::ceil(0.95 * static_cast<double>(n))) - 1;
  return v[std::min(idx, n - 1)];
}

}  // namespace

Pipeline::Pipeline(const RunConfig& config)
    : cfg(config), neck(make_neck_config(config)), ca(make_ca_params(config)),
      store(config.seed, config.dtype) {
  cfg.validate();
  neck.register_params(store);
  if (cfg.use_class_adapt) {
    ca.register_params(store);
    if (ca.mode == ClassAdaptMode::Prototype) {
      if (!cfg.ca_prototypes.empty()) {
        protos = Prototypes::load(cfg.ca_prototypes);
        if (protos->count() != ca.num_classes || protos->dim() != ca.proto_dim) {
          throw ShapeError("prototype file holds " + protos->rows.shape().str() +
                           ", config expects (" + std::to_string(ca.num_classes) + "," +
                           std::to_string(ca.proto_dim) + ",1,1)");
        }
      } else {
        const i64 count = 8 * ca.num_classes;
        Rng rng(derive_seed(cfg.seed, "ca.protosamples"));
        std::vector<double> samples(static_cast<size_t>(count * ca.proto_dim));
        for (double& x : samples) x = rng.normal();
        protos = kmeans_init(samples, count, ca.proto_dim, ca.num_classes,
                             derive_seed(cfg.seed, "ca.kmeans"));
      }
    }
  }
  const i64 b = cfg.batch;
  const i64 c = cfg.channels;
  const i64 hw = cfg.base_hw;
  input.c3 = seeded_normal({b, c, hw, hw}, derive_seed(cfg.seed, "input.c3"), cfg.dtype);
  input.c4 = seeded_normal({b, c, hw / 2, hw / 2}, derive_seed(cfg.seed, "input.c4"), cfg.dtype);
  input.c5 = seeded_normal({b, c, hw / 4, hw / 4}, derive_seed(cfg.seed, "input.c5"), cfg.dtype);
  det_target = seeded_normal({b, c, hw, hw}, derive_seed(cfg.seed, "det.target"), cfg.dtype);
}

PipelineValues Pipeline::forward(const ParamStore& params) const {
  ValueCtx ctx{params};
  auto built = build_pipeline(ctx, *this);
  PipelineValues v;
  v.levels = std::move(built.levels);
  v.l_det = built.l_det.at(0, 0, 0, 0);
  v.l_eq = built.l_eq.at(0, 0, 0, 0);
  v.l_ca = built.l_ca.at(0, 0, 0, 0);
  v.total = built.total.at(0, 0, 0, 0);
  v.eq = std::move(built.eq);
  v.maps = std::move(built.maps);
  return v;
}

double Pipeline::loss(const ParamStore& params) const { return forward(params).total; }

PipelineTape Pipeline::build_tape(Tape& tape) const {
  TapeCtx ctx{tape, store};
  auto built = build_pipeline(ctx, *this);
  return {built.total, built.l_det, built.l_eq, built.l_ca, built.levels, std::move(built.eq)};
}

RunReport cmd_gradcheck(const RunConfig& cfg) {
  cfg.validate();
  if (cfg.dtype != Dtype::F64) {
    throw ConfigError("gradcheck requires dtype=f64; finite differences in f32 are meaningless");
  }
  const auto t0 = Clock::now();

  // The finite-difference oracle perturbs by 1e-6, so fixed points must be
  // resolved far below that scale or solver stopping noise dominates.
  RunConfig tight = cfg;
  tight.solver_tol = std::min(cfg.solver_tol, 1e-12);
  tight.solver_max_iter = std::max<i64>(cfg.solver_max_iter, 400);
  tight.solver_memory = std::max<i64>(cfg.solver_memory, 30);
  Pipeline pipe(tight);

  Tape tape;
  PipelineTape out = pipe.build_tape(tape);
  const std::vector<std::string> names = pipe.store.names();
  GradMap analytic = backward(tape, out.loss, names, pipe.store);

  const double eps = 1e-6;
  const double gate = cfg.use_equilibrium ? 1e-4 : 1e-5;
  ParamStore work = pipe.store;
  Checker ck;
  json groups = json::object();
  double worst = 0.0;
  std::string worst_name;
  i64 probes = 0;
  for (const std::string& name : names) {
    Tensor4& wt = work.at(name);
    Rng rng(derive_seed(cfg.seed, "gradcheck." + name));
    const std::vector<i64> idx = pick_indices(wt.numel(), cfg.gradcheck_samples, rng);
    double group_max = 0.0;
    for (i64 id : idx) {
      const double orig = wt.data()[id];
      wt.data()[id] = orig + eps;
      const double hi = pipe.loss(work);
      wt.data()[id] = orig - eps;
      const double lo = pipe.loss(work);
      wt.data()[id] = orig;
      const double fd = (hi - lo) / (2.0 * eps);
      const double an = analytic.at(name).data()[id];
      group_max = std::max(group_max, rel_err(an, fd));
      ++probes;
    }
    groups[name] = group_max;
    if (group_max > worst) {
      worst = group_max;
      worst_name = name;
    }
    ck.add("gradient." + name, group_max < gate, "max_rel_err=" + fmt(group_max));
  }
  const double elapsed = ms_since(t0);
  ck.add("runtime_under_budget", elapsed < 120e3, fmt(elapsed / 1e3) + " s of 120 s");

  json body;
  body["gradcheck"] = {{"eps", eps},
                       {"gate", gate},
                       {"samples_per_tensor", cfg.gradcheck_samples},
                       {"probes", probes},
                       {"max_rel_err", worst},
                       {"worst_tensor", worst_name},
                       {"solver_tol_used", tight.solver_tol},
                       {"solver_max_iter_used", tight.solver_max_iter},
                       {"per_tensor", groups}};
  json eqs = json::array();
  for (const auto& r : out.eq) eqs.push_back(eq_to_json(r));
  body["equilibrium_levels"] = eqs;
  body["param_count"] = pipe.store.total_elements();
  return finish("gradcheck", cfg, ck, std::move(body), elapsed);
}

RunReport cmd_solve(const RunConfig& cfg) {
  cfg.validate();
  if (!cfg.use_equilibrium) {
    throw ConfigError("solve requires neck.use_equilibrium=true");
  }
  const auto t0 = Clock::now();
  Pipeline pipe(cfg);

  ValueCtx ctx{pipe.store};
  std::array<Tensor4, 3> in = {pipe.input.c3, pipe.input.c4, pipe.input.c5};
  auto neck_out = build_neck_forward(ctx, in, pipe.neck);

  static const char* kLevelNames[3] = {"p3", "p4", "p5"};
  Checker ck;
  json levels = json::array();
  for (int t = 0; t < 3; ++t) {
    const std::string lv = kLevelNames[t];
    const EquilibriumResult& br = neck_out.eq[static_cast<size_t>(t)];
    PhiProgram prog{neck_out.coarse[static_cast<size_t>(t)],
                    neck_out.fine[static_cast<size_t>(t)], pipe.neck.fusion, &pipe.store};
    const PhiFn phi = [&prog](const Tensor4& f) { return prog(f); };
    // Brute-force oracle: plain iteration with a generous budget.
    const EquilibriumResult pi =
        picard_solve(phi, neck_out.pass_levels[static_cast<size_t>(t)], cfg.solver_tol,
                     std::max<int>(static_cast<int>(cfg.solver_max_iter), 1000));
    const double agreement = tensor_l2_diff(br.f_star, pi.f_star);
    const double eq_loss = equilibrium_loss(phi, br.f_star);

    ck.add(lv + ".solver_converged", br.converged,
           "iterations=" + std::to_string(br.iterations) + " residual=" + fmt(br.residual_norm));
    ck.add(lv + ".residual_within_tol", br.residual_norm <= cfg.solver_tol,
           "residual=" + fmt(br.residual_norm) + " tol=" + fmt(cfg.solver_tol));
    ck.add(lv + ".iteration_oracle_converged", pi.converged,
           "iterations=" + std::to_string(pi.iterations));
    ck.add(lv + ".solvers_agree", agreement <= 1e-5, "l2_diff=" + fmt(agreement));
    ck.add(lv + ".equilibrium_loss_small", eq_loss <= cfg.solver_tol,
           "equilibrium_loss=" + fmt(eq_loss));

    json row;
    row["level"] = lv;
    row["state_shape"] = br.f_star.shape().str();
    row["quasi_newton"] = eq_to_json(br);
    row["iteration_oracle"] = eq_to_json(pi);
    row["solver_agreement_l2"] = agreement;
    row["equilibrium_loss"] = eq_loss;
    levels.push_back(std::move(row));
  }
  json body;
  body["solver_levels"] = std::move(levels);
  body["param_count"] = pipe.store.total_elements();
  return finish("solve", cfg, ck, std::move(body), ms_since(t0));
}

RunReport cmd_ablate(const RunConfig& cfg) {
  cfg.validate();
  const auto t0 = Clock::now();
  Checker ck;
  json combos = json::array();
  std::array<i64, 8> counts{};
  std::array<std::string, 8> signatures{};
  bool shapes_ok = true;
  std::string shape_detail;

  for (int mask = 0; mask < 8; ++mask) {
    RunConfig cc = cfg;
    cc.use_equilibrium = (mask & 1) != 0;
    cc.use_dual_attention = (mask & 2) != 0;
    cc.use_class_adapt = (mask & 4) != 0;
    const auto tc = Clock::now();
    Pipeline pipe(cc);
    PipelineValues v = pipe.forward(pipe.store);

    for (int t = 0; t < 3; ++t) {
      const Shape4 got = v.levels[static_cast<size_t>(t)].shape();
      const Shape4 want{cfg.batch, cfg.channels, cfg.base_hw >> t, cfg.base_hw >> t};
      if (!(got == want)) {
        shapes_ok = false;
        shape_detail = "combo " + std::to_string(mask) + " level " + std::to_string(t) +
                       ": got " + got.str() + ", want " + want.str();
      }
    }
    counts[static_cast<size_t>(mask)] = pipe.store.total_elements();
    signatures[static_cast<size_t>(mask)] = levels_signature(v.levels);

    json row;
    row["use_equilibrium"] = cc.use_equilibrium;
    row["use_dual_attention"] = cc.use_dual_attention;
    row["use_class_adapt"] = cc.use_class_adapt;
    row["param_count"] = counts[static_cast<size_t>(mask)];
    row["levels_checksum"] = signatures[static_cast<size_t>(mask)];
    row["losses"] = {{"det", v.l_det}, {"eq", v.l_eq}, {"ca", v.l_ca}, {"total", v.total}};
    row["elapsed_ms"] = ms_since(tc);
    combos.push_back(std::move(row));
  }

  ck.add("shapes_valid", shapes_ok, shape_detail);
  std::set<std::string> distinct(signatures.begin(), signatures.end());
  ck.add("outputs_distinct", distinct.size() == signatures.size(),
         std::to_string(distinct.size()) + " distinct of 8");
  bool monotone = true;
  std::string mono_detail;
  for (int a = 0; a < 8; ++a) {
    for (int b = 0; b < 8; ++b) {
      if (a == b || (a & b) != a) continue;  // need a to be a strict subset of b
      if (!(counts[static_cast<size_t>(a)] < counts[static_cast<size_t>(b)])) {
        monotone = false;
        mono_detail = "combo " + std::to_string(a) + " has " +
                      std::to_string(counts[static_cast<size_t>(a)]) +
                      " params, superset combo " + std::to_string(b) + " has " +
                      std::to_string(counts[static_cast<size_t>(b)]);
      }
    }
  }
  ck.add("param_count_strictly_monotone", monotone, mono_detail);

  json body;
  body["ablation"] = std::move(combos);
  return finish("ablate", cfg, ck, std::move(body), ms_since(t0));
}

RunReport cmd_bench(const RunConfig& cfg) {
  cfg.validate();
  const auto t0 = Clock::now();
  Pipeline pipe(cfg);

  constexpr int kWarmup = 5;
  constexpr int kTimed = 30;
  for (int i = 0; i < kWarmup; ++i) pipe.forward(pipe.store);

  struct Block {
    std::vector<double> runs_ms;
    std::string signature;
    bool stable = true;
  };
  auto time_block = [&](int workers) {
    set_max_workers(workers);
    Block b;
    for (int i = 0; i < kTimed; ++i) {
      const auto tr = Clock::now();
      PipelineValues v = pipe.forward(pipe.store);
      b.runs_ms.push_back(ms_since(tr));
      const std::string sig = levels_signature(v.levels);
      if (i == 0) {
        b.signature = sig;
      } else if (sig != b.signature) {
        b.stable = false;
      }
    }
    set_max_workers(0);
    return b;
  };

  const Block single = time_block(1);
  set_max_workers(0);
  const int mt_workers = std::max(2, max_workers());
  const Block multi = time_block(mt_workers);

  Checker ck;
  ck.add("single_thread_runs_stable", single.stable, single.signature);
  ck.add("multi_thread_runs_stable", multi.stable, multi.signature);
  ck.add("st_mt_bit_identical", single.signature == multi.signature,
         single.signature + " vs " + multi.signature);

  auto block_json = [](const Block& b, int workers) {
    json j;
    j["workers"] = workers;
    j["runs_ms"] = b.runs_ms;
    j["median_ms"] = median_of(b.runs_ms);
    j["p95_ms"] = p95_of(b.runs_ms);
    j["levels_checksum"] = b.signature;
    return j;
  };
  json body;
  body["bench"] = {{"warmup_runs", kWarmup},
                   {"timed_runs", kTimed},
                   {"single", block_json(single, 1)},
                   {"multi", block_json(multi, mt_workers)}};
  body["param_count"] = pipe.store.total_elements();
  return finish("bench", cfg, ck, std::move(body), ms_since(t0));
}

}  // namespace dycaf
