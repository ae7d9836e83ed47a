#pragma once

// Per-voxel feature vectors consumed by the student classifier. Features
// are class-conditional Gaussians keyed on the latent clean label, so a
// model can in principle recover the clean class from them even when the
// training labels are corrupted.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <vector>

#include "occnl/io.hpp"
#include "occnl/rng.hpp"
#include "occnl/voxel.hpp"

namespace occnl {

struct FeatureField {
  std::size_t num_voxels = 0;
  std::size_t dim = 0;
  std::vector<double> values;  // voxel-major, dim entries per voxel

  FeatureField() = default;
  FeatureField(std::size_t n, std::size_t d) : num_voxels(n), dim(d), values(n * d, 0.0) {}

  std::span<const double> row(std::size_t v) const { return {values.data() + v * dim, dim}; }
  std::span<double> row(std::size_t v) { return {values.data() + v * dim, dim}; }
};

struct FeatureSpec {
  std::size_t dim = 16;
  double separation = 4.0;  // norm of each class mean
  double noise = 1.0;       // per-coordinate standard deviation
};

/// Shared class means; one per label including empty.
struct FeatureModel {
  FeatureSpec spec;
  std::vector<std::vector<double>> means;

  static FeatureModel make(const FeatureSpec& spec, std::uint32_t num_classes, std::uint64_t key) {
    if (spec.dim == 0) throw std::invalid_argument("feature dimension must be positive");
    FeatureModel m{spec, {}};
    m.means.resize(num_classes);
    for (std::uint32_t c = 0; c < num_classes; ++c) {
      auto& mu = m.means[c];
      mu.resize(spec.dim);
      double norm = 0.0;
      for (std::size_t k = 0; k < spec.dim; ++k) {
        mu[k] = rng::normal(key, c, k);
        norm += mu[k] * mu[k];
      }
      norm = std::sqrt(norm);
      for (double& x : mu) x *= spec.separation / norm;
    }
    return m;
  }

  FeatureField sample(const VoxelGrid& clean, std::uint64_t key) const {
    FeatureField f(clean.size(), spec.dim);
    for (std::size_t v = 0; v < clean.size(); ++v) {
      const auto& mu = means.at(clean.labels[v]);
      auto out = f.row(v);
      for (std::size_t k = 0; k < spec.dim; ++k) out[k] = mu[k] + spec.noise * rng::normal(key, v, k);
    }
    return f;
  }
};

namespace io {

inline void write_features(const std::filesystem::path& path, const FeatureField& f, const Dims& dims) {
  if (f.num_voxels != dims.volume()) throw ValidationError("feature field does not match grid dims");
  ByteWriter w;
  w.bytes("OCF1", 4);
  w.u32(dims.nx);
  w.u32(dims.ny);
  w.u32(dims.nz);
  w.u32(static_cast<std::uint32_t>(f.dim));
  for (double x : f.values) w.f64(x);
  write_file(path, w.data());
}

inline FeatureField read_features(const std::filesystem::path& path, Dims* dims_out = nullptr) {
  const auto bytes = read_file(path);
  ByteReader r(bytes, path.string());
  r.magic("OCF1");
  Dims d;
  d.nx = r.u32();
  d.ny = r.u32();
  d.nz = r.u32();
  const std::uint32_t dim = r.u32();
  if (r.remaining() < d.volume() * dim * 8) throw IoError(path.string() + ": truncated payload");
  FeatureField f(d.volume(), dim);
  for (double& x : f.values) x = r.f64();
  if (dims_out) *dims_out = d;
  return f;
}

}  // namespace io
}  // namespace occnl
