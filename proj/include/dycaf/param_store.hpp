#pragma once

// Named learnable parameters. Each tensor draws from its own stream seeded
// by (store seed, name), so two stores built with the same seed and the same
// registrations hold element-wise identical values. Vectors are stored as
// (len, 1, 1, 1) and matrices as (rows, cols, 1, 1).

#include <map>
#include <string>
#include <vector>

#include "dycaf/tensor.hpp"

namespace dycaf {

class ParamStore {
 public:
  explicit ParamStore(u64 seed, Dtype dtype = Dtype::F64)
      : seed_(seed), dtype_(dtype) {}

  // Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)].
  Tensor4& add_uniform(const std::string& name, Shape4 shape, i64 fan_in);
  Tensor4& add_zeros(const std::string& name, Shape4 shape);
  Tensor4& add_constant(const std::string& name, Shape4 shape, double value);
  Tensor4& add_tensor(const std::string& name, Tensor4 value);

  bool contains(const std::string& name) const;
  Tensor4& at(const std::string& name);
  const Tensor4& at(const std::string& name) const;

  // Replace an existing entry; the shape must not change.
  void set(const std::string& name, Tensor4 value);

  // Names in registration order.
  const std::vector<std::string>& names() const { return order_; }
  i64 size() const { return static_cast<i64>(order_.size()); }
  i64 total_elements() const;

  u64 seed() const { return seed_; }
  Dtype dtype() const { return dtype_; }

 private:
  Tensor4& insert(const std::string& name, Tensor4 value);

  u64 seed_;
  Dtype dtype_;
  std::vector<std::string> order_;
  std::map<std::string, Tensor4> entries_;
};

}  // namespace dycaf
