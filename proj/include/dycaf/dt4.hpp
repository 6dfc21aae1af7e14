#pragma once

// DT4 tensor file format.
//
//   bytes 0..3   magic "DT4\0"
//   bytes 4..35  four little-endian u64 dims (n, c, h, w)
//   byte  36     element width: 4 (f32) or 8 (f64)
//   bytes 37..   payload, little-endian row-major
//
// Round trips are bit-exact for both element widths.

#include <string>

#include "dycaf/tensor.hpp"

namespace dycaf {

class Dt4Error : public std::runtime_error {
 public:
  enum class Kind { Io, BadMagic, BadHeader, Truncated };

  Dt4Error(Kind kind, const std::string& msg)
      : std::runtime_error(msg), kind_(kind) {}

  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

void write_dt4(const std::string& path, const Tensor4& t);
Tensor4 read_dt4(const std::string& path);

}  // namespace dycaf
