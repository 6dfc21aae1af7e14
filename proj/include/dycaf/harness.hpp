#pragma once

// End-to-end harness: a small synthetic pipeline (seeded pyramid -> neck ->
// class adaptation -> losses) plus the four CLI commands. Each command
// returns a JSON report; the process exit code is 0 only if every check in
// the report passed.

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "dycaf/class_adapt.hpp"
#include "dycaf/config.hpp"
#include "dycaf/losses.hpp"
#include "dycaf/neck.hpp"

namespace dycaf {

struct PipelineValues {
  std::array<Tensor4, 3> levels;  // final features, index 0 = p3
  double l_det = 0.0;
  double l_eq = 0.0;
  double l_ca = 0.0;
  double total = 0.0;
  std::vector<EquilibriumResult> eq;
  std::vector<Tensor4> maps;  // per level when class adaptation is on
};

struct PipelineTape {
  Var loss;
  Var l_det;
  Var l_eq;
  Var l_ca;
  std::array<Var, 3> levels;
  std::vector<EquilibriumResult> eq;
};

// Deterministic synthetic pipeline. Construction registers all parameters
// for the configured variant and fixes the input pyramid, the detection
// target, and (in prototype mode) the frozen prototypes.
struct Pipeline {
  RunConfig cfg;
  NeckParams neck;
  ClassAdaptParams ca;
  std::optional<Prototypes> protos;
  ParamStore store;
  FeaturePyramid input;
  Tensor4 det_target;

  explicit Pipeline(const RunConfig& config);

  // Forward pass on plain values with an arbitrary parameter store of the
  // same layout (used by finite-difference probes).
  PipelineValues forward(const ParamStore& params) const;
  double loss(const ParamStore& params) const;

  // Records the forward pass on a tape against the pipeline's own store.
  PipelineTape build_tape(Tape& tape) const;
};

struct RunReport {
  std::string json_text;
  bool all_passed = true;
  int exit_code() const { return all_passed ? 0 : 1; }
};

RunReport cmd_gradcheck(const RunConfig& cfg);
RunReport cmd_solve(const RunConfig& cfg);
RunReport cmd_ablate(const RunConfig& cfg);
RunReport cmd_bench(const RunConfig& cfg);

}  // namespace dycaf
