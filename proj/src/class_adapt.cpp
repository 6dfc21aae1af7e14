#include "dycaf/class_adapt.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "dycaf/dt4.hpp"
#include "dycaf/rng.hpp"

namespace dycaf {

void Prototypes::validate() const {
  const Shape4 s = rows.shape();
  if (s.h != 1 || s.w != 1) {
    throw ShapeError("prototypes must be (count, dim, 1, 1), got " + s.str());
  }
}

Tensor4 Prototypes::row(i64 k, Dtype dtype) const {
  const Shape4 s = rows.shape();
  if (k < 0 || k >= s.n) {
    throw ShapeError("prototype row " + std::to_string(k) + " out of range [0, " +
                     std::to_string(s.n) + ")");
  }
  std::vector<double> vals(static_cast<size_t>(s.c));
  for (i64 d = 0; d < s.c; ++d) vals[static_cast<size_t>(d)] = rows.at(k, d, 0, 0);
  return Tensor4::from_vector({1, s.c, 1, 1}, std::move(vals), dtype);
}

Prototypes Prototypes::load(const std::string& path) {
  Prototypes p{read_dt4(path)};
  p.validate();
  return p;
}

void Prototypes::save(const std::string& path) const {
  validate();
  write_dt4(path, rows);
}

Prototypes kmeans_init(const std::vector<double>& samples, i64 count, i64 dim, i64 k,
                       u64 seed) {
  if (k < 1) throw ShapeError("kmeans_init: k must be >= 1");
  if (dim < 1) throw ShapeError("kmeans_init: dim must be >= 1");
  if (count < k) {
    throw ShapeError("kmeans_init: need at least " + std::to_string(k) + " samples, got " +
                     std::to_string(count));
  }
  if (samples.size() != static_cast<size_t>(count * dim)) {
    throw ShapeError("kmeans_init: sample buffer holds " + std::to_string(samples.size()) +
                     " values, expected " + std::to_string(count * dim));
  }
  for (double v : samples) {
    if (!std::isfinite(v)) throw ValueError("kmeans_init: samples contain non-finite values");
  }

  const auto row_ptr = [&](i64 i) { return samples.data() + i * dim; };
  const auto dist2 = [&](const double* a, const double* b) {
    double s = 0.0;
    for (i64 d = 0; d < dim; ++d) {
      const double diff = a[d] - b[d];
      s += diff * diff;
    }
    return s;
  };

  Rng rng(seed);
  std::vector<std::vector<double>> centers;
  centers.reserve(static_cast<size_t>(k));
  {
    const double* first = row_ptr(rng.index(count));
    centers.emplace_back(first, first + dim);
  }
  // Plus-plus seeding: each next center drawn with probability proportional
  // to squared distance from the nearest chosen center.
  std::vector<double> d2(static_cast<size_t>(count));
  while (static_cast<i64>(centers.size()) < k) {
    double total = 0.0;
    for (i64 i = 0; i < count; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& c : centers) best = std::min(best, dist2(row_ptr(i), c.data()));
      d2[static_cast<size_t>(i)] = best;
      total += best;
    }
    i64 pick;
    if (total <= 0.0) {
      pick = rng.index(count);
    } else {
      const double target = rng.uniform() * total;
      double cum = 0.0;
      pick = count - 1;
      for (i64 i = 0; i < count; ++i) {
        cum += d2[static_cast<size_t>(i)];
        if (cum >= target) {
          pick = i;
          break;
        }
      }
    }
    const double* p = row_ptr(pick);
    centers.emplace_back(p, p + dim);
  }

  std::vector<i64> assign(static_cast<size_t>(count), -1);
  std::vector<i64> prev(static_cast<size_t>(count), -2);
  for (int iter = 0; iter < 100; ++iter) {
    for (i64 i = 0; i < count; ++i) {
      double best = std::numeric_limits<double>::infinity();
      i64 best_c = 0;
      for (i64 c = 0; c < k; ++c) {
        const double d = dist2(row_ptr(i), centers[static_cast<size_t>(c)].data());
        if (d < best) {
          best = d;
          best_c = c;
        }
      }
      assign[static_cast<size_t>(i)] = best_c;
    }
    if (assign == prev) break;
    prev = assign;

    std::vector<i64> sizes(static_cast<size_t>(k), 0);
    std::vector<std::vector<double>> sums(static_cast<size_t>(k),
                                          std::vector<double>(static_cast<size_t>(dim), 0.0));
    for (i64 i = 0; i < count; ++i) {
      const i64 c = assign[static_cast<size_t>(i)];
      ++sizes[static_cast<size_t>(c)];
      const double* p = row_ptr(i);
      for (i64 d = 0; d < dim; ++d) sums[static_cast<size_t>(c)][static_cast<size_t>(d)] += p[d];
    }
    for (i64 c = 0; c < k; ++c) {
      if (sizes[static_cast<size_t>(c)] == 0) continue;
      for (i64 d = 0; d < dim; ++d) {
        centers[static_cast<size_t>(c)][static_cast<size_t>(d)] =
            sums[static_cast<size_t>(c)][static_cast<size_t>(d)] /
            static_cast<double>(sizes[static_cast<size_t>(c)]);
      }
    }
    // Empty clusters steal the sample farthest from its own (fresh) centroid.
    std::vector<bool> claimed(static_cast<size_t>(count), false);
    for (i64 c = 0; c < k; ++c) {
      if (sizes[static_cast<size_t>(c)] != 0) continue;
      double far = -1.0;
      i64 far_i = -1;
      for (i64 i = 0; i < count; ++i) {
        if (claimed[static_cast<size_t>(i)]) continue;
        const i64 home = assign[static_cast<size_t>(i)];
        const double d = dist2(row_ptr(i), centers[static_cast<size_t>(home)].data());
        if (d > far) {
          far = d;
          far_i = i;
        }
      }
      if (far_i < 0) break;  // fewer distinct samples than empty clusters
      claimed[static_cast<size_t>(far_i)] = true;
      const double* p = row_ptr(far_i);
      centers[static_cast<size_t>(c)].assign(p, p + dim);
    }
  }

  // Canonical row order so equivalent clusterings compare equal.
  std::sort(centers.begin(), centers.end());
  std::vector<double> flat;
  flat.reserve(static_cast<size_t>(k * dim));
  for (const auto& c : centers) flat.insert(flat.end(), c.begin(), c.end());
  return Prototypes{Tensor4::from_vector({k, dim, 1, 1}, std::move(flat), Dtype::F64)};
}

void ClassAdaptParams::validate() const {
  if (channels < 1) throw ShapeError("class_adapt: channels must be >= 1");
  if (num_classes < 1) throw ShapeError("class_adapt: num_classes must be >= 1");
  if (proto_dim < 1) throw ShapeError("class_adapt: prototype dim must be >= 1");
}

void ClassAdaptParams::register_params(ParamStore& store) const {
  validate();
  const i64 c = channels;
  if (mode == ClassAdaptMode::Prototype) {
    store.add_uniform(name("proj.w"), {proto_dim, c, 1, 1}, c);
    store.add_uniform(name("proj.b"), {proto_dim, 1, 1, 1}, c);
    store.add_uniform(name("protoproj.w"), {1, proto_dim, 1, 1}, proto_dim);
    for (i64 k = 0; k < num_classes; ++k) {
      store.add_uniform(mixer_name(k), {c, c, 1, 1}, c);
    }
  } else {
    store.add_uniform(name("enh.dw"), {c, 1, 3, 3}, 9);
    store.add_uniform(name("enh.pw.w"), {c, c, 1, 1}, c);
    store.add_uniform(name("enh.pw.b"), {c, 1, 1, 1}, c);
    store.add_uniform(name("attn.w"), {num_classes, c, 1, 1}, c);
    store.add_uniform(name("attn.b"), {num_classes, 1, 1, 1}, c);
  }
}

i64 ClassAdaptParams::param_count() const {
  const i64 c = channels;
  if (mode == ClassAdaptMode::Prototype) {
    return proto_dim * c + proto_dim + proto_dim + num_classes * c * c;
  }
  return c * 9 + c * c + c + num_classes * c + num_classes;
}

void validate_attention_maps(const Tensor4& maps, double tol) {
  const Shape4 s = maps.shape();
  for (i64 n = 0; n < s.n; ++n) {
    for (i64 k = 0; k < s.c; ++k) {
      double sum = 0.0;
      for (i64 y = 0; y < s.h; ++y) {
        for (i64 x = 0; x < s.w; ++x) {
          const double v = maps.at(n, k, y, x);
          if (v < 0.0) {
            throw ValueError("attention maps: negative entry " + std::to_string(v) +
                             " at batch " + std::to_string(n) + ", class " + std::to_string(k));
          }
          sum += v;
        }
      }
      if (std::abs(sum - 1.0) > tol) {
        throw ValueError("attention maps: batch " + std::to_string(n) + ", class " +
                         std::to_string(k) + " sums to " + std::to_string(sum) +
                         ", expected 1");
      }
    }
  }
}

Tensor4 class_attention(const Tensor4& f, const Prototypes& protos, const ClassAdaptParams& p,
                        const ParamStore& store) {
  ValueCtx ctx{store};
  return build_class_attention(ctx, f, protos, p);
}

Tensor4 adapt_features(const Tensor4& f, const Tensor4& maps, const ClassAdaptParams& p,
                       const ParamStore& store) {
  ValueCtx ctx{store};
  return build_adapt_features(ctx, f, maps, p);
}

ClassAdaptOutT<ValueCtx> class_adapt_simple(const Tensor4& x, const ClassAdaptParams& p,
                                            const ParamStore& store) {
  ValueCtx ctx{store};
  return build_class_adapt_simple(ctx, x, p);
}

}  // namespace dycaf
