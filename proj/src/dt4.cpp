#include "dycaf/dt4.hpp"

#include <cstring>
#include <fstream>
#include <vector>

namespace dycaf {

namespace {

constexpr char kMagic[4] = {'D', 'T', '4', '\0'};

void put_u64(std::string& buf, u64 v) {
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

u64 get_u64(const unsigned char* p) {
  u64 v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<u64>(p[i]) << (8 * i);
  return v;
}

}  // namespace

void write_dt4(const std::string& path, const Tensor4& t) {
  if (t.empty()) throw Dt4Error(Dt4Error::Kind::Io, "write_dt4: empty tensor");
  std::string buf;
  buf.append(kMagic, 4);
  const Shape4& s = t.shape();
  put_u64(buf, static_cast<u64>(s.n));
  put_u64(buf, static_cast<u64>(s.c));
  put_u64(buf, static_cast<u64>(s.h));
  put_u64(buf, static_cast<u64>(s.w));
  const bool f32 = t.dtype() == Dtype::F32;
  buf.push_back(static_cast<char>(f32 ? 4 : 8));

  const double* p = t.data();
  if (f32) {
    for (i64 i = 0; i < t.numel(); ++i) {
      const float f = static_cast<float>(p[i]);
      u64 bits = 0;
      std::memcpy(&bits, &f, 4);
      for (int b = 0; b < 4; ++b) buf.push_back(static_cast<char>((bits >> (8 * b)) & 0xffu));
    }
  } else {
    for (i64 i = 0; i < t.numel(); ++i) {
      u64 bits;
      std::memcpy(&bits, &p[i], 8);
      for (int b = 0; b < 8; ++b) buf.push_back(static_cast<char>((bits >> (8 * b)) & 0xffu));
    }
  }

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Dt4Error(Dt4Error::Kind::Io, "write_dt4: cannot open '" + path + "'");
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw Dt4Error(Dt4Error::Kind::Io, "write_dt4: short write to '" + path + "'");
}

Tensor4 read_dt4(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Dt4Error(Dt4Error::Kind::Io, "read_dt4: cannot open '" + path + "'");
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)),
                                 std::istreambuf_iterator<char>());

  if (buf.size() < 4 || std::memcmp(buf.data(), kMagic, 4) != 0) {
    throw Dt4Error(Dt4Error::Kind::BadMagic, "read_dt4: bad magic in '" + path + "'");
  }
  if (buf.size() < 37) {
    throw Dt4Error(Dt4Error::Kind::Truncated, "read_dt4: truncated header in '" + path + "'");
  }

  i64 dims[4];
  for (int i = 0; i < 4; ++i) {
    const u64 v = get_u64(buf.data() + 4 + 8 * i);
    if (v < 1 || v > (1ull << 32)) {
      throw Dt4Error(Dt4Error::Kind::BadHeader,
                     "read_dt4: dim " + std::to_string(i) + " out of range in '" + path + "'");
    }
    dims[i] = static_cast<i64>(v);
  }
  const unsigned char width = buf[36];
  if (width != 4 && width != 8) {
    throw Dt4Error(Dt4Error::Kind::BadHeader,
                   "read_dt4: element width must be 4 or 8, got " + std::to_string(width));
  }

  const Shape4 shape{dims[0], dims[1], dims[2], dims[3]};
  const u64 need = static_cast<u64>(shape.numel()) * width;
  const u64 have = buf.size() - 37;
  if (have < need) {
    throw Dt4Error(Dt4Error::Kind::Truncated,
                   "read_dt4: header claims " + std::to_string(shape.numel()) +
                       " elements (" + std::to_string(need) + " bytes) but payload has " +
                       std::to_string(have) + " bytes");
  }
  if (have > need) {
    throw Dt4Error(Dt4Error::Kind::BadHeader,
                   "read_dt4: payload has " + std::to_string(have - need) +
                       " trailing bytes beyond the declared dims");
  }

  std::vector<double> data(static_cast<size_t>(shape.numel()));
  const unsigned char* p = buf.data() + 37;
  if (width == 4) {
    for (auto& v : data) {
      u64 bits = 0;
      for (int b = 0; b < 4; ++b) bits |= static_cast<u64>(p[b]) << (8 * b);
      float f;
      const auto fb = static_cast<std::uint32_t>(bits);
      std::memcpy(&f, &fb, 4);
      v = static_cast<double>(f);
      p += 4;
    }
    return Tensor4::from_vector(shape, std::move(data), Dtype::F32);
  }
  for (auto& v : data) {
    u64 bits = 0;
    for (int b = 0; b < 8; ++b) bits |= static_cast<u64>(p[b]) << (8 * b);
    std::memcpy(&v, &bits, 8);
    p += 8;
  }
  return Tensor4::from_vector(shape, std::move(data), Dtype::F64);
}

}  // namespace dycaf
