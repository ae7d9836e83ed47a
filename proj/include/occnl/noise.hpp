#pragma once

// Ground-truth refinement, occupancy-asymmetric label flipping, trailing
// noise levels and noise diagnostics.

#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "occnl/rng.hpp"
#include "occnl/scene.hpp"
#include "occnl/voxel.hpp"

namespace occnl {

/// Drops dynamic-class voxels that lie outside the current instance mask.
inline VoxelGrid refine_ground_truth(const VoxelGrid& grid, const VoxelMask& mask, const LabelSpace& space) {
  require_valid(grid, space);
  if (!(mask.dims == grid.dims) || mask.bits.size() != grid.size()) {
    throw std::invalid_argument("refine_ground_truth: mask dimensions differ from grid");
  }
  VoxelGrid out = grid;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (space.is_dynamic(out.labels[i]) && !mask.test(i)) out.labels[i] = kEmpty;
  }
  return out;
}

struct AsymNoiseSpec {
  double eta = 0.0;
  std::uint64_t seed = 0;

  double empty_rate() const noexcept { return 1e-3 * eta; }
  void validate() const {
    if (!(eta >= 0.0 && eta <= 1.0)) throw std::invalid_argument("noise rate eta must lie in [0,1]");
  }
};

/// Flips occupied voxels with probability eta to a uniform other class
/// (empty included), and empty voxels with probability 1e-3*eta to a
/// uniform semantic class. Each voxel uses two counter-based draws keyed by
/// (seed, voxel index): lane 0 decides the flip, lane 1 picks the
/// alternative by index arithmetic that skips the original label.
///
/// `class_order` lists the label ids in the order alternatives are
/// enumerated; it must keep 0 first. The default is 0..C. Relabelling the
/// grid with a permutation p and passing p(0..C) as the order yields p of
/// the original output.
inline VoxelGrid inject_asymmetric(const VoxelGrid& grid, const AsymNoiseSpec& spec, const LabelSpace& space,
                                   std::span<const Label> class_order = {}) {
  spec.validate();
  require_valid(grid, space);
  const std::uint32_t K = space.num_classes();
  std::vector<Label> order;
  if (class_order.empty()) {
    order.resize(K);
    std::iota(order.begin(), order.end(), Label{0});
  } else {
    order.assign(class_order.begin(), class_order.end());
  }
  if (order.size() != K || order.front() != kEmpty) {
    throw std::invalid_argument("inject_asymmetric: class order must be a permutation of 0..C starting at 0");
  }
  std::vector<std::uint32_t> position(K, K);
  for (std::uint32_t p = 0; p < K; ++p) {
    if (order[p] >= K || position[order[p]] != K) throw std::invalid_argument("inject_asymmetric: bad class order");
    position[order[p]] = p;
  }

  const std::uint64_t key = rng::stage_seed(spec.seed, "asymmetric-noise");
  const std::uint64_t alternatives = space.num_semantic();
  VoxelGrid out = grid;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const Label y = grid.labels[i];
    const double p = (y == kEmpty) ? spec.empty_rate() : spec.eta;
    if (!(rng::uniform01(key, i, 0) < p)) continue;
    const auto k = static_cast<std::uint32_t>(rng::below(key, i, 1, alternatives));
    const std::uint32_t pos = position[y];
    out.labels[i] = order[k < pos ? k : k + 1];
  }
  return out;
}

enum class TrailingLevel { Mild, Moderate, Severe };

inline const char* to_string(TrailingLevel l) {
  switch (l) {
    case TrailingLevel::Mild: return "mild";
    case TrailingLevel::Moderate: return "moderate";
    case TrailingLevel::Severe: return "severe";
  }
  return "?";
}

inline TrailingLevel parse_trailing_level(const std::string& s) {
  if (s == "mild") return TrailingLevel::Mild;
  if (s == "moderate") return TrailingLevel::Moderate;
  if (s == "severe") return TrailingLevel::Severe;
  throw std::invalid_argument("unknown trailing level '" + s + "' (expected mild|moderate|severe)");
}

struct TrailingWindows {
  std::uint32_t future_frames = 7;   // frames after the reference frame
  std::uint32_t history_frames = 7;  // frames before it (Moderate and Severe)
  std::uint32_t dilation_iterations = 1;
};

inline std::vector<std::uint32_t> trailing_window(const SceneSequence& seq, TrailingLevel level,
                                                  const TrailingWindows& w) {
  const std::uint32_t t = seq.reference_frame;
  if (std::size_t{t} + w.future_frames >= seq.num_frames()) {
    throw std::invalid_argument("trailing noise: future window of " + std::to_string(w.future_frames) +
                                " frames exceeds the sequence");
  }
  std::uint32_t first = t;
  if (level != TrailingLevel::Mild) {
    if (w.history_frames > t) {
      throw std::invalid_argument("trailing noise: history window of " + std::to_string(w.history_frames) +
                                  " frames exceeds the sequence");
    }
    first = t - w.history_frames;
  }
  std::vector<std::uint32_t> win;
  for (std::uint32_t f = first; f <= t + w.future_frames; ++f) win.push_back(f);
  return win;
}

/// Mild: future window. Moderate: history and future. Severe: Moderate
/// followed by 6-connected dilation of dynamic voxels.
inline VoxelGrid build_trailing_level(const SceneSequence& seq, TrailingLevel level, const TrailingWindows& w) {
  VoxelGrid g = aggregate_frames(seq, trailing_window(seq, level, w));
  if (level == TrailingLevel::Severe) {
    if (w.dilation_iterations < 1) throw std::invalid_argument("severe trailing needs at least one dilation");
    g = dilate_dynamic(g, seq.space, w.dilation_iterations);
  }
  return g;
}

struct NoiseReport {
  double realized_occupied_flip = 0.0;
  double realized_empty_flip = 0.0;
  std::vector<std::int64_t> per_class_drift;  // noisy count minus clean count, classes 0..C
  double normalized_entropy = 0.0;            // of the noisy semantic histogram, in [0,1]
};

/// Entropy of the semantic (non-empty) class histogram divided by log C.
inline double normalized_semantic_entropy(const ClassHistogram& h) {
  const std::size_t C = h.counts.size() - 1;
  if (C < 2) return 0.0;
  std::uint64_t total = 0;
  for (std::size_t c = 1; c <= C; ++c) total += h.counts[c];
  if (total == 0) return 0.0;
  double H = 0.0;
  for (std::size_t c = 1; c <= C; ++c) {
    if (h.counts[c] == 0) continue;
    const double p = static_cast<double>(h.counts[c]) / static_cast<double>(total);
    H -= p * std::log(p);
  }
  return std::clamp(H / std::log(static_cast<double>(C)), 0.0, 1.0);
}

inline NoiseReport noise_statistics(const VoxelGrid& clean, const VoxelGrid& noisy, const LabelSpace& space) {
  require_same_dims(clean, noisy, "noise_statistics");
  const ClassHistogram hc = class_histogram(clean, space);
  const ClassHistogram hn = class_histogram(noisy, space);
  std::uint64_t occ = 0, occ_flip = 0, emp = 0, emp_flip = 0;
  for (std::size_t i = 0; i < clean.size(); ++i) {
    const bool changed = clean.labels[i] != noisy.labels[i];
    if (clean.labels[i] == kEmpty) {
      ++emp;
      emp_flip += changed;
    } else {
      ++occ;
      occ_flip += changed;
    }
  }
  NoiseReport r;
  r.realized_occupied_flip = occ ? static_cast<double>(occ_flip) / static_cast<double>(occ) : 0.0;
  r.realized_empty_flip = emp ? static_cast<double>(emp_flip) / static_cast<double>(emp) : 0.0;
  r.per_class_drift.resize(space.num_classes());
  for (std::size_t c = 0; c < r.per_class_drift.size(); ++c) {
    r.per_class_drift[c] = static_cast<std::int64_t>(hn.counts[c]) - static_cast<std::int64_t>(hc.counts[c]);
  }
  r.normalized_entropy = normalized_semantic_entropy(hn);
  return r;
}

inline nlohmann::ordered_json to_json(const NoiseReport& r) {
  nlohmann::ordered_json j;
  j["realized_occupied_flip"] = r.realized_occupied_flip;
  j["realized_empty_flip"] = r.realized_empty_flip;
  j["per_class_drift"] = r.per_class_drift;
  j["normalized_entropy"] = r.normalized_entropy;
  return j;
}

}  // namespace occnl
