#include "dycaf/param_store.hpp"

#include <cmath>
#include <utility>

#include "dycaf/rng.hpp"

namespace dycaf {

Tensor4& ParamStore::insert(const std::string& name, Tensor4 value) {
  if (entries_.count(name) != 0) {
    throw ValueError("ParamStore: duplicate parameter name '" + name + "'");
  }
  order_.push_back(name);
  auto [it, ok] = entries_.emplace(name, std::move(value));
  (void)ok;
  return it->second;
}

Tensor4& ParamStore::add_uniform(const std::string& name, Shape4 shape, i64 fan_in) {
  if (fan_in < 1) throw ValueError("ParamStore: fan_in must be >= 1 for '" + name + "'");
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  Rng rng(derive_seed(seed_, name));
  std::vector<double> data(static_cast<size_t>(shape.numel()));
  for (auto& v : data) v = rng.uniform(-bound, bound);
  return insert(name, Tensor4::from_vector(shape, std::move(data), dtype_));
}

Tensor4& ParamStore::add_zeros(const std::string& name, Shape4 shape) {
  return insert(name, Tensor4(shape, dtype_));
}

Tensor4& ParamStore::add_constant(const std::string& name, Shape4 shape, double value) {
  return insert(name, Tensor4::full(shape, value, dtype_));
}

Tensor4& ParamStore::add_tensor(const std::string& name, Tensor4 value) {
  return insert(name, std::move(value));
}

bool ParamStore::contains(const std::string& name) const {
  return entries_.count(name) != 0;
}

Tensor4& ParamStore::at(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) {
    throw ValueError("ParamStore: unknown parameter name '" + name + "'");
  }
  return it->second;
}

const Tensor4& ParamStore::at(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) {
    throw ValueError("ParamStore: unknown parameter name '" + name + "'");
  }
  return it->second;
}

void ParamStore::set(const std::string& name, Tensor4 value) {
  Tensor4& slot = at(name);
  if (!(slot.shape() == value.shape())) {
    throw ShapeError("ParamStore::set: shape change for '" + name + "': " +
                     slot.shape().str() + " -> " + value.shape().str());
  }
  slot = std::move(value);
}

i64 ParamStore::total_elements() const {
  i64 total = 0;
  for (const auto& [name, t] : entries_) total += t.numel();
  return total;
}

}  // namespace dycaf
