#pragma once

// Dual-source partial-label candidate sets: Top-K of the EMA teacher's
// class distribution united with Top-K of feature/prototype cosine
// similarity, with a linearly decaying K.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "occnl/errors.hpp"
#include "occnl/matrix.hpp"
#include "occnl/rng.hpp"
#include "occnl/voxel.hpp"

namespace occnl {

struct SimilarityMatrix {
  Matrix scores;  // voxels x classes, cosine similarity in [-1, 1]
};

/// Cosine similarity between every feature row and every prototype.
/// Prototypes flagged absent (present[c] == false) score -1 so they rank
/// last; pass an empty `present` when all are defined.
inline SimilarityMatrix prototype_similarity(const Matrix& features, const std::vector<std::vector<double>>& prototypes,
                                             const std::vector<bool>& present = {}) {
  if (!present.empty() && present.size() != prototypes.size()) {
    throw std::invalid_argument("prototype_similarity: presence flags do not match prototypes");
  }
  const auto is_present = [&](std::size_t c) { return present.empty() || present[c]; };
  std::vector<double> pnorm(prototypes.size(), 0.0);
  for (std::size_t c = 0; c < prototypes.size(); ++c) {
    if (!is_present(c)) continue;
    if (prototypes[c].size() != features.cols) {
      throw std::invalid_argument("prototype_similarity: prototype " + std::to_string(c) + " has dimension " +
                                  std::to_string(prototypes[c].size()) + ", features have " +
                                  std::to_string(features.cols));
    }
    double s = 0.0;
    for (double x : prototypes[c]) s += x * x;
    pnorm[c] = std::sqrt(s);
    if (!(pnorm[c] > 0.0)) throw std::domain_error("prototype_similarity: zero-norm prototype " + std::to_string(c));
  }
  SimilarityMatrix out{Matrix(features.rows, prototypes.size())};
  for (std::size_t v = 0; v < features.rows; ++v) {
    const auto f = features.row(v);
    double fn = 0.0;
    for (double x : f) fn += x * x;
    fn = std::sqrt(fn);
    if (!(fn > 0.0)) throw std::domain_error("prototype_similarity: zero-norm feature at voxel " + std::to_string(v));
    for (std::size_t c = 0; c < prototypes.size(); ++c) {
      if (!is_present(c)) {
        out.scores(v, c) = -1.0;
        continue;
      }
      double dot = 0.0;
      for (std::size_t k = 0; k < f.size(); ++k) dot += f[k] * prototypes[c][k];
      out.scores(v, c) = std::clamp(dot / (fn * pnorm[c]), -1.0, 1.0);
    }
  }
  return out;
}

struct KSchedule {
  std::uint32_t k_start = 9;
  std::uint32_t k_end = 2;
  std::uint32_t gamma = 2;
  std::uint32_t warmup_epochs = 12;

  // K_start above C+1 is accepted and clamped when used.
  void validate(std::uint32_t num_classes) const {
    if (k_end < 1 || k_end > k_start) throw std::invalid_argument("K schedule needs 1 <= K_end <= K_start");
    if (k_end > num_classes) throw std::invalid_argument("K schedule: K_end exceeds the number of classes");
  }
};

/// Linear decay K_e = max(K_end, K_start - gamma * (e - E_w - 1)), clamped
/// to C+1. Only defined in the robust stage (e > E_w).
inline std::uint32_t schedule_k(std::uint32_t epoch, const KSchedule& s, std::uint32_t num_classes) {
  if (epoch <= s.warmup_epochs) {
    throw StageError("schedule_k: epoch " + std::to_string(epoch) + " is inside the warm-up stage");
  }
  const std::int64_t decayed =
      std::int64_t{s.k_start} - std::int64_t{s.gamma} * (std::int64_t{epoch} - s.warmup_epochs - 1);
  const std::int64_t k = std::max<std::int64_t>(s.k_end, decayed);
  return static_cast<std::uint32_t>(std::min<std::int64_t>(k, num_classes));
}

enum class KStrategy { Linear, Fixed, Random };

struct KPolicy {
  KStrategy strategy = KStrategy::Linear;
  std::uint32_t fixed_k = 2;
  KSchedule schedule;

  /// Parses "linear", "random" or "fixed-N".
  static KPolicy parse(const std::string& s, const KSchedule& schedule) {
    KPolicy p;
    p.schedule = schedule;
    if (s == "linear") {
      p.strategy = KStrategy::Linear;
    } else if (s == "random") {
      p.strategy = KStrategy::Random;
    } else if (s.rfind("fixed-", 0) == 0) {
      p.strategy = KStrategy::Fixed;
      std::size_t used = 0;
      const std::string digits = s.substr(6);
      unsigned long k = 0;
      try {
        k = std::stoul(digits, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (digits.empty() || used != digits.size() || k < 1) {
        throw std::invalid_argument("bad K strategy '" + s + "'");
      }
      p.fixed_k = static_cast<std::uint32_t>(k);
    } else {
      throw std::invalid_argument("unknown K strategy '" + s + "' (expected linear|random|fixed-N)");
    }
    return p;
  }

  std::string name() const {
    switch (strategy) {
      case KStrategy::Linear: return "linear";
      case KStrategy::Random: return "random";
      case KStrategy::Fixed: return "fixed-" + std::to_string(fixed_k);
    }
    return "?";
  }

  /// K for a robust-stage epoch. Random draws uniformly in [K_end, K_start]
  /// from a key of (seed, epoch).
  std::uint32_t k_for_epoch(std::uint32_t epoch, std::uint32_t num_classes, std::uint64_t seed) const {
    switch (strategy) {
      case KStrategy::Linear: return schedule_k(epoch, schedule, num_classes);
      case KStrategy::Fixed:
        if (epoch <= schedule.warmup_epochs) throw StageError("K requested inside the warm-up stage");
        return fixed_k;
      case KStrategy::Random: {
        if (epoch <= schedule.warmup_epochs) throw StageError("K requested inside the warm-up stage");
        const std::uint64_t span = std::uint64_t{schedule.k_start} - schedule.k_end + 1;
        return schedule.k_end +
               static_cast<std::uint32_t>(rng::below(rng::stage_seed(seed, "k-random"), epoch, 0, span));
      }
    }
    return schedule.k_end;
  }
};

enum class CandidateSources { Both, Teacher, Prototype };

inline const char* to_string(CandidateSources s) {
  switch (s) {
    case CandidateSources::Both: return "both";
    case CandidateSources::Teacher: return "teacher";
    case CandidateSources::Prototype: return "prototype";
  }
  return "?";
}

inline CandidateSources parse_candidate_sources(const std::string& s) {
  if (s == "both") return CandidateSources::Both;
  if (s == "teacher") return CandidateSources::Teacher;
  if (s == "prototype") return CandidateSources::Prototype;
  throw std::invalid_argument("unknown candidate source '" + s + "' (expected both|teacher|prototype)");
}

/// Per-voxel partition of the label space into candidates (PL) and
/// complement (NL), stored as a membership matrix.
struct CandidateSet {
  std::size_t num_voxels = 0;
  std::size_t num_classes = 0;
  std::vector<std::uint8_t> in_pl;  // voxels x classes
  std::vector<std::uint32_t> pl_size;
  std::uint32_t k_requested = 0;
  std::uint32_t k_effective = 0;
  bool k_clamped = false;

  CandidateSet() = default;
  CandidateSet(std::size_t n, std::size_t k) : num_voxels(n), num_classes(k), in_pl(n * k, 0), pl_size(n, 0) {}

  bool candidate(std::size_t v, std::size_t c) const { return in_pl[v * num_classes + c] != 0; }
  std::uint32_t nl_size(std::size_t v) const { return static_cast<std::uint32_t>(num_classes) - pl_size[v]; }
  void add(std::size_t v, std::size_t c) {
    auto& slot = in_pl[v * num_classes + c];
    if (!slot) {
      slot = 1;
      ++pl_size[v];
    }
  }
  std::vector<Label> candidates(std::size_t v) const {
    std::vector<Label> out;
    for (std::size_t c = 0; c < num_classes; ++c) {
      if (candidate(v, c)) out.push_back(static_cast<Label>(c));
    }
    return out;
  }
  std::vector<Label> complement(std::size_t v) const {
    std::vector<Label> out;
    for (std::size_t c = 0; c < num_classes; ++c) {
      if (!candidate(v, c)) out.push_back(static_cast<Label>(c));
    }
    return out;
  }
};

/// Indices of the k largest entries; ties go to the smaller index.
inline std::vector<std::uint32_t> top_k(std::span<const double> row, std::uint32_t k) {
  std::vector<std::uint32_t> idx(row.size());
  std::iota(idx.begin(), idx.end(), 0u);
  k = std::min<std::uint32_t>(k, static_cast<std::uint32_t>(row.size()));
  std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](std::uint32_t a, std::uint32_t b) {
    return row[a] > row[b] || (row[a] == row[b] && a < b);
  });
  idx.resize(k);
  return idx;
}

struct CandidateOptions {
  CandidateSources sources = CandidateSources::Both;
  // Ablation switch: also insert the (noisy) training label.
  const VoxelGrid* force_include = nullptr;
};

inline CandidateSet build_candidates(const Matrix& teacher_probs, const SimilarityMatrix& sims, std::uint32_t k,
                                     const CandidateOptions& opt = {}) {
  if (k < 1) throw std::invalid_argument("build_candidates: K must be at least 1");
  const bool use_teacher = opt.sources != CandidateSources::Prototype;
  const bool use_proto = opt.sources != CandidateSources::Teacher;
  const std::size_t n = use_teacher ? teacher_probs.rows : sims.scores.rows;
  const std::size_t classes = use_teacher ? teacher_probs.cols : sims.scores.cols;
  if (use_teacher && use_proto && !teacher_probs.same_shape(sims.scores)) {
    throw std::invalid_argument("build_candidates: teacher probabilities and similarities differ in shape");
  }
  if (use_teacher) {
    for (std::size_t v = 0; v < n; ++v) {
      double s = 0.0;
      for (double p : teacher_probs.row(v)) s += p;
      if (std::abs(s - 1.0) > 1e-6) {
        throw std::invalid_argument("build_candidates: teacher row " + std::to_string(v) + " does not sum to 1");
      }
    }
  }
  if (opt.force_include && opt.force_include->size() != n) {
    throw std::invalid_argument("build_candidates: forced labels do not match voxel count");
  }
  CandidateSet out(n, classes);
  out.k_requested = k;
  out.k_effective = std::min<std::uint32_t>(k, static_cast<std::uint32_t>(classes));
  out.k_clamped = out.k_effective != k;
  for (std::size_t v = 0; v < n; ++v) {
    if (use_teacher) {
      for (auto c : top_k(teacher_probs.row(v), out.k_effective)) out.add(v, c);
    }
    if (use_proto) {
      for (auto c : top_k(sims.scores.row(v), out.k_effective)) out.add(v, c);
    }
    if (opt.force_include) out.add(v, opt.force_include->labels[v]);
  }
  return out;
}

struct CandidateDiagnostics {
  double hit_rate = 0.0;
  double purity = 0.0;
  double mean_candidate_size = 0.0;
};

inline CandidateDiagnostics candidate_diagnostics(const CandidateSet& cands, const VoxelGrid& latent_gt) {
  if (latent_gt.size() != cands.num_voxels) {
    throw std::invalid_argument("candidate_diagnostics: ground truth does not match candidate set");
  }
  CandidateDiagnostics d;
  if (cands.num_voxels == 0) return d;
  std::size_t hits = 0;
  double inv_size = 0.0, size_sum = 0.0;
  for (std::size_t v = 0; v < cands.num_voxels; ++v) {
    size_sum += cands.pl_size[v];
    const Label y = latent_gt.labels[v];
    if (y < cands.num_classes && cands.candidate(v, y)) {
      ++hits;
      inv_size += 1.0 / cands.pl_size[v];
    }
  }
  d.hit_rate = static_cast<double>(hits) / static_cast<double>(cands.num_voxels);
  d.purity = hits ? inv_size / static_cast<double>(hits) : 0.0;
  d.mean_candidate_size = size_sum / static_cast<double>(cands.num_voxels);
  return d;
}

inline nlohmann::ordered_json diagnostics_json(std::uint32_t epoch, std::uint32_t k, const CandidateDiagnostics& d) {
  nlohmann::ordered_json j;
  j["epoch"] = epoch;
  j["K"] = k;
  j["hit_rate"] = d.hit_rate;
  j["purity"] = d.purity;
  j["mean_candidate_size"] = d.mean_candidate_size;
  return j;
}

}  // namespace occnl
