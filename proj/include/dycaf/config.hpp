#pragma once

// Flat key=value run configuration. '#' starts a comment, blank lines are
// skipped, unknown or malformed keys are hard errors that name the line.

#include <map>
#include <string>

#include "dycaf/tensor.hpp"

namespace dycaf {

struct RunConfig {
  i64 batch = 1;
  i64 base_hw = 16;  // finest-level extent; must be divisible by 4
  u64 seed = 42;
  Dtype dtype = Dtype::F64;

  i64 channels = 16;
  bool use_equilibrium = true;
  bool use_dual_attention = true;
  bool use_class_adapt = true;

  double solver_alpha = 0.1;
  double solver_tol = 1e-6;
  i64 solver_max_iter = 50;
  i64 solver_memory = 20;

  std::string ca_mode = "conv";  // "conv" or "prototype"
  i64 ca_num_classes = 3;
  std::string ca_prototypes;  // optional prototype tensor file

  double lambda_det = 1.0;
  double lambda_eq = 0.5;
  double lambda_ca = 0.2;

  i64 gradcheck_samples = 6;  // finite-difference probes per parameter tensor

  static RunConfig from_file(const std::string& path);
  static RunConfig from_text(const std::string& text);
  void validate() const;
  // Canonical key -> rendered value map, echoed into run reports.
  std::map<std::string, std::string> echo() const;
};

}  // namespace dycaf
