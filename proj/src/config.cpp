#include "dycaf/config.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

namespace dycaf {

namespace {

std::string trim(const std::string& s) {
  const char* ws = " \t\r";
  const size_t a = s.find_first_not_of(ws);
  if (a == std::string::npos) return "";
  const size_t b = s.find_last_not_of(ws);
  return s.substr(a, b - a + 1);
}

[[noreturn]] void bad(int line, const std::string& msg) {
  throw ConfigError("line " + std::to_string(line) + ": " + msg);
}

i64 parse_i64(const std::string& v, const std::string& key, int line) {
  try {
    size_t used = 0;
    const long long x = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument("");
    return static_cast<i64>(x);
  } catch (const std::exception&) {
    bad(line, "invalid integer for '" + key + "': '" + v + "'");
  }
}

u64 parse_u64(const std::string& v, const std::string& key, int line) {
  try {
    size_t used = 0;
    if (!v.empty() && v[0] == '-') throw std::invalid_argument("");
    const unsigned long long x = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument("");
    return static_cast<u64>(x);
  } catch (const std::exception&) {
    bad(line, "invalid unsigned integer for '" + key + "': '" + v + "'");
  }
}

double parse_double(const std::string& v, const std::string& key, int line) {
  try {
    size_t used = 0;
    const double x = std::stod(v, &used);
    if (used != v.size() || !std::isfinite(x)) throw std::invalid_argument("");
    return x;
  } catch (const std::exception&) {
    bad(line, "invalid number for '" + key + "': '" + v + "'");
  }
}

bool parse_bool(const std::string& v, const std::string& key, int line) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  bad(line, "invalid boolean for '" + key + "': '" + v + "' (use true/false)");
}

std::string render(double x) {
  std::ostringstream os;
  os << x;
  return os.str();
}

void apply(RunConfig& c, const std::string& key, const std::string& value, int line) {
  if (key == "pyramid.batch") {
    c.batch = parse_i64(value, key, line);
  } else if (key == "pyramid.base_hw") {
    c.base_hw = parse_i64(value, key, line);
  } else if (key == "seed") {
    c.seed = parse_u64(value, key, line);
  } else if (key == "dtype") {
    if (value == "f32") {
      c.dtype = Dtype::F32;
    } else if (value == "f64") {
      c.dtype = Dtype::F64;
    } else {
      bad(line, "invalid dtype '" + value + "' (use f32 or f64)");
    }
  } else if (key == "neck.channels") {
    c.channels = parse_i64(value, key, line);
  } else if (key == "neck.use_equilibrium") {
    c.use_equilibrium = parse_bool(value, key, line);
  } else if (key == "neck.use_dual_attention") {
    c.use_dual_attention = parse_bool(value, key, line);
  } else if (key == "neck.use_class_adapt") {
    c.use_class_adapt = parse_bool(value, key, line);
  } else if (key == "solver.alpha") {
    c.solver_alpha = parse_double(value, key, line);
  } else if (key == "solver.tol") {
    c.solver_tol = parse_double(value, key, line);
  } else if (key == "solver.max_iter") {
    c.solver_max_iter = parse_i64(value, key, line);
  } else if (key == "solver.memory") {
    c.solver_memory = parse_i64(value, key, line);
  } else if (key == "class_adapt.mode") {
    c.ca_mode = value;
  } else if (key == "class_adapt.num_classes") {
    c.ca_num_classes = parse_i64(value, key, line);
  } else if (key == "class_adapt.prototypes") {
    c.ca_prototypes = value;
  } else if (key == "loss.lambda_det") {
    c.lambda_det = parse_double(value, key, line);
  } else if (key == "loss.lambda_eq") {
    c.lambda_eq = parse_double(value, key, line);
  } else if (key == "loss.lambda_ca") {
    c.lambda_ca = parse_double(value, key, line);
  } else if (key == "gradcheck.samples") {
    c.gradcheck_samples = parse_i64(value, key, line);
  } else {
    bad(line, "unknown key '" + key + "'");
  }
}

}  // namespace

RunConfig RunConfig::from_text(const std::string& text) {
  RunConfig c;
  std::istringstream in(text);
  std::string raw;
  std::set<std::string> seen;
  int line = 0;
  while (std::getline(in, raw)) {
    ++line;
    const size_t hash = raw.find('#');
    if (hash != std::string::npos) raw = raw.substr(0, hash);
    const std::string stripped = trim(raw);
    if (stripped.empty()) continue;
    const size_t eq = stripped.find('=');
    if (eq == std::string::npos) bad(line, "expected key=value, got '" + stripped + "'");
    const std::string key = trim(stripped.substr(0, eq));
    const std::string value = trim(stripped.substr(eq + 1));
    if (key.empty()) bad(line, "empty key");
    if (value.empty()) bad(line, "empty value for '" + key + "'");
    if (!seen.insert(key).second) bad(line, "duplicate key '" + key + "'");
    apply(c, key, value, line);
  }
  c.validate();
  return c;
}

RunConfig RunConfig::from_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return from_text(buf.str());
}

void RunConfig::validate() const {
  if (batch < 1) throw ConfigError("pyramid.batch must be >= 1");
  if (base_hw < 4 || base_hw % 4 != 0) {
    throw ConfigError("pyramid.base_hw must be a multiple of 4 and >= 4, got " +
                      std::to_string(base_hw));
  }
  if (channels < 1) throw ConfigError("neck.channels must be >= 1");
  if (use_dual_attention && channels % 16 != 0) {
    throw ConfigError("neck.channels must be divisible by 16 when dual attention is enabled");
  }
  if (!(std::isfinite(solver_alpha) && solver_alpha > 0.0)) {
    throw ConfigError("solver.alpha must be positive");
  }
  if (!(std::isfinite(solver_tol) && solver_tol > 0.0)) {
    throw ConfigError("solver.tol must be positive");
  }
  if (solver_max_iter < 1) throw ConfigError("solver.max_iter must be >= 1");
  if (solver_memory < 1) throw ConfigError("solver.memory must be >= 1");
  if (ca_mode != "conv" && ca_mode != "prototype") {
    throw ConfigError("class_adapt.mode must be 'conv' or 'prototype', got '" + ca_mode + "'");
  }
  if (ca_num_classes < 1) throw ConfigError("class_adapt.num_classes must be >= 1");
  for (double w : {lambda_det, lambda_eq, lambda_ca}) {
    if (!(std::isfinite(w) && w >= 0.0)) {
      throw ConfigError("loss weights must be finite and non-negative");
    }
  }
  if (gradcheck_samples < 1) throw ConfigError("gradcheck.samples must be >= 1");
}

std::map<std::string, std::string> RunConfig::echo() const {
  std::map<std::string, std::string> m;
  m["pyramid.batch"] = std::to_string(batch);
  m["pyramid.base_hw"] = std::to_string(base_hw);
  m["seed"] = std::to_string(seed);
  m["dtype"] = dtype == Dtype::F32 ? "f32" : "f64";
  m["neck.channels"] = std::to_string(channels);
  m["neck.use_equilibrium"] = use_equilibrium ? "true" : "false";
  m["neck.use_dual_attention"] = use_dual_attention ? "true" : "false";
  m["neck.use_class_adapt"] = use_class_adapt ? "true" : "false";
  m["solver.alpha"] = render(solver_alpha);
  m["solver.tol"] = render(solver_tol);
  m["solver.max_iter"] = std::to_string(solver_max_iter);
  m["solver.memory"] = std::to_string(solver_memory);
  m["class_adapt.mode"] = ca_mode;
  m["class_adapt.num_classes"] = std::to_string(ca_num_classes);
  if (!ca_prototypes.empty()) m["class_adapt.prototypes"] = ca_prototypes;
  m["loss.lambda_det"] = render(lambda_det);
  m["loss.lambda_eq"] = render(lambda_eq);
  m["loss.lambda_ca"] = render(lambda_ca);
  m["gradcheck.samples"] = std::to_string(gradcheck_samples);
  return m;
}

}  // namespace dycaf
