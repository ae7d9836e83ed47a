#pragma once

// Robust objectives over per-voxel logits. Every function returns the
// scalar loss and its exact gradient with respect to the student logits.
// All math is double precision; per-voxel terms are reduced in voxel order.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "occnl/candidates.hpp"
#include "occnl/matrix.hpp"
#include "occnl/voxel.hpp"

namespace occnl {

enum class LogitRole { Student, Teacher };

struct LogitField {
  Matrix logits;  // voxels x (C+1)
  LogitRole role = LogitRole::Student;

  std::size_t num_voxels() const noexcept { return logits.rows; }
  std::size_t num_classes() const noexcept { return logits.cols; }
};

struct LossEvaluation {
  double value = 0.0;
  Matrix grad;  // d value / d student logits
  std::size_t saturation_count = 0;
};

struct SNTDConfig {
  double tau_s = 3.0;
  bool sum_over_voxels = false;  // mean over voxels unless set

  void validate() const {
    if (!(tau_s > 0.0) || !std::isfinite(tau_s)) throw std::invalid_argument("SNTD temperature must be positive");
  }
};

namespace detail {

inline void require_finite(const LogitField& f, const char* what) {
  for (double x : f.logits.data) {
    if (!std::isfinite(x)) throw std::invalid_argument(std::string(what) + ": non-finite logit");
  }
}

inline void require_candidates(const LogitField& f, const CandidateSet& c, const char* what) {
  if (c.num_voxels != f.num_voxels() || c.num_classes != f.num_classes()) {
    throw std::invalid_argument(std::string(what) + ": candidate set does not cover the logit field");
  }
}

/// Writes softmax(row / temperature) into `p`, returns log of the partition
/// (including the max shift), i.e. log-sum-exp of the scaled row.
inline double softmax_row(std::span<const double> z, std::span<double> p, double temperature = 1.0) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : z) m = std::max(m, x / temperature);
  double s = 0.0;
  for (std::size_t k = 0; k < z.size(); ++k) {
    p[k] = std::exp(z[k] / temperature - m);
    s += p[k];
  }
  for (double& x : p) x /= s;
  return m + std::log(s);
}

}  // namespace detail

inline Matrix softmax(const LogitField& f, double temperature = 1.0) {
  Matrix p(f.num_voxels(), f.num_classes());
  for (std::size_t v = 0; v < f.num_voxels(); ++v) detail::softmax_row(f.logits.row(v), p.row(v), temperature);
  return p;
}

/// Mean cross-entropy against hard labels; the warm-up objective.
inline LossEvaluation cross_entropy_loss(const LogitField& student, const VoxelGrid& labels) {
  detail::require_finite(student, "cross_entropy_loss");
  const std::size_t n = student.num_voxels(), K = student.num_classes();
  if (labels.size() != n) throw std::invalid_argument("cross_entropy_loss: labels do not match logits");
  LossEvaluation out{0.0, Matrix(n, K)};
  if (n == 0) return out;
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t v = 0; v < n; ++v) {
    const Label y = labels.labels[v];
    if (y >= K) throw std::invalid_argument("cross_entropy_loss: label outside logit range");
    auto z = student.logits.row(v);
    auto g = out.grad.row(v);
    const double lse = detail::softmax_row(z, g);
    out.value += (lse - z[y]) * inv_n;
    g[y] -= 1.0;
    for (double& x : g) x *= inv_n;
  }
  return out;
}

/// Partial-label loss: average negative log-probability over each voxel's
/// candidate set, then mean over voxels. log p is evaluated as z - lse(z).
inline LossEvaluation pll_loss(const LogitField& student, const CandidateSet& cands) {
  detail::require_finite(student, "pll_loss");
  detail::require_candidates(student, cands, "pll_loss");
  const std::size_t n = student.num_voxels(), K = student.num_classes();
  LossEvaluation out{0.0, Matrix(n, K)};
  if (n == 0) return out;
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t v = 0; v < n; ++v) {
    const std::uint32_t m = cands.pl_size[v];
    if (m == 0) throw std::invalid_argument("pll_loss: empty candidate set at voxel " + std::to_string(v));
    auto z = student.logits.row(v);
    auto g = out.grad.row(v);
    const double lse = detail::softmax_row(z, g);  // g holds p
    const double w = 1.0 / m;
    double term = 0.0;
    for (std::size_t c = 0; c < K; ++c) {
      if (cands.candidate(v, c)) {
        term += lse - z[c];
        g[c] -= w;
      }
    }
    out.value += w * term * inv_n;
    for (double& x : g) x *= inv_n;
  }
  return out;
}

inline constexpr double kNlSaturation = 1e-12;

/// Negative-learning loss: mean over voxels of the average -log(1 - p_c)
/// over the complement set. Voxels with an empty complement contribute 0.
///
/// 1 - p_c is formed as (sum of the other exponentials) / (total) so it
/// keeps full precision as p_c approaches 1. Terms with 1 - p_c below 1e-12
/// are clamped to -log(1e-12) and counted in saturation_count; their
/// gradient stays the (bounded) analytic one.
inline LossEvaluation nl_loss(const LogitField& student, const CandidateSet& cands) {
  detail::require_finite(student, "nl_loss");
  detail::require_candidates(student, cands, "nl_loss");
  const std::size_t n = student.num_voxels(), K = student.num_classes();
  LossEvaluation out{0.0, Matrix(n, K)};
  if (n == 0) return out;
  const double inv_n = 1.0 / static_cast<double>(n);
  std::vector<double> e(K);
  for (std::size_t v = 0; v < n; ++v) {
    const std::uint32_t m = cands.nl_size(v);
    if (m == 0) continue;
    auto z = student.logits.row(v);
    auto g = out.grad.row(v);
    std::size_t arg = 0;
    for (std::size_t k = 1; k < K; ++k) {
      if (z[k] > z[arg]) arg = k;
    }
    double total = 0.0, rest = 0.0;  // rest excludes the arg-max term
    for (std::size_t k = 0; k < K; ++k) {
      e[k] = std::exp(z[k] - z[arg]);
      total += e[k];
      if (k != arg) rest += e[k];
    }
    const double w = 1.0 / m;
    double term = 0.0;
    std::fill(g.begin(), g.end(), 0.0);
    for (std::size_t c = 0; c < K; ++c) {
      if (cands.candidate(v, c)) continue;
      const double others = (c == arg) ? rest : total - e[c];
      if (others / total < kNlSaturation) {
        term -= std::log(kNlSaturation);
        ++out.saturation_count;
      } else {
        term -= std::log(others) - std::log(total);
      }
      // d/dz_k [-log(1 - p_c)] = p_c (delta_ck - p_k) / (1 - p_c); for k != c
      // this is -p_c * e_k / others, bounded by p_c.
      const double pc = e[c] / total;
      g[c] += pc;
      if (others > 0.0) {
        for (std::size_t k = 0; k < K; ++k) {
          if (k != c) g[k] -= pc * e[k] / others;
        }
      }
    }
    out.value += w * term * inv_n;
    for (double& x : g) x *= w * inv_n;
  }
  return out;
}

/// Temperature-scaled softmax over all classes except the voxel's (noisy)
/// label; the masked class gets exactly zero mass.
inline Matrix not_true_distribution(const LogitField& logits, const VoxelGrid& noisy_labels, const SNTDConfig& cfg) {
  cfg.validate();
  detail::require_finite(logits, "not_true_distribution");
  const std::size_t n = logits.num_voxels(), K = logits.num_classes();
  if (noisy_labels.size() != n) throw std::invalid_argument("not_true_distribution: labels do not match logits");
  if (K < 2) throw std::invalid_argument("not_true_distribution: needs at least two classes");
  Matrix p(n, K);
  for (std::size_t v = 0; v < n; ++v) {
    const Label y = noisy_labels.labels[v];
    if (y >= K) throw std::invalid_argument("not_true_distribution: label outside logit range");
    auto z = logits.logits.row(v);
    auto out = p.row(v);
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < K; ++k) {
      if (k != y) m = std::max(m, z[k] / cfg.tau_s);
    }
    double s = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      out[k] = (k == y) ? 0.0 : std::exp(z[k] / cfg.tau_s - m);
      s += out[k];
    }
    for (double& x : out) x /= s;
  }
  return p;
}

/// tau^2 * KL(teacher not-true || student not-true), averaged over voxels
/// (or summed when cfg.sum_over_voxels). Teacher logits are constants.
inline LossEvaluation sntd_loss(const LogitField& student, const LogitField& teacher, const VoxelGrid& noisy_labels,
                                const SNTDConfig& cfg) {
  if (!student.logits.same_shape(teacher.logits)) {
    throw std::invalid_argument("sntd_loss: student and teacher logits differ in shape");
  }
  const Matrix ps = not_true_distribution(student, noisy_labels, cfg);
  const Matrix pt = not_true_distribution(teacher, noisy_labels, cfg);
  const std::size_t n = student.num_voxels(), K = student.num_classes();
  LossEvaluation out{0.0, Matrix(n, K)};
  if (n == 0) return out;
  const double scale = cfg.sum_over_voxels ? 1.0 : 1.0 / static_cast<double>(n);
  const double tau = cfg.tau_s;
  for (std::size_t v = 0; v < n; ++v) {
    const Label y = noisy_labels.labels[v];
    // Work in log space for the KL so tiny probabilities stay exact.
    auto zs = student.logits.row(v);
    auto zt = teacher.logits.row(v);
    double ms = -std::numeric_limits<double>::infinity(), mt = ms;
    for (std::size_t k = 0; k < K; ++k) {
      if (k == y) continue;
      ms = std::max(ms, zs[k] / tau);
      mt = std::max(mt, zt[k] / tau);
    }
    double ss = 0.0, st = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      if (k == y) continue;
      ss += std::exp(zs[k] / tau - ms);
      st += std::exp(zt[k] / tau - mt);
    }
    const double lse_s = ms + std::log(ss), lse_t = mt + std::log(st);
    double kl = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      if (k == y) continue;
      const double log_t = zt[k] / tau - lse_t;
      const double log_s = zs[k] / tau - lse_s;
      kl += pt(v, k) * (log_t - log_s);
    }
    out.value += tau * tau * std::max(kl, 0.0) * scale;
    auto g = out.grad.row(v);
    for (std::size_t k = 0; k < K; ++k) g[k] = (k == y) ? 0.0 : tau * (ps(v, k) - pt(v, k)) * scale;
  }
  return out;
}

struct LossWeights {
  double pll = 1.0;
  double nl = 1.0;
  double sntd = 1.0;
};

struct TotalLoss {
  double value = 0.0;
  Matrix grad;
  double base = 0.0, pll = 0.0, nl = 0.0, sntd = 0.0;
  bool robust_active = false;
  std::size_t nl_saturation_count = 0;
};

/// base + 1(epoch > warmup) * (pll + nl + sntd). Robust components may be
/// null when they were not evaluated (warm-up or ablation).
inline TotalLoss total_loss(const LossEvaluation& base, const LossEvaluation* pll, const LossEvaluation* nl,
                            const LossEvaluation* sntd, std::uint32_t epoch, std::uint32_t warmup_epochs,
                            const LossWeights& w = {}) {
  TotalLoss t;
  t.value = base.value;
  t.base = base.value;
  t.grad = base.grad;
  t.robust_active = epoch > warmup_epochs;
  if (!t.robust_active) return t;
  const auto add = [&](const LossEvaluation* e, double weight, double& slot) {
    if (!e) return;
    if (!e->grad.same_shape(t.grad)) throw std::invalid_argument("total_loss: component gradients differ in shape");
    slot = e->value;
    t.value += weight * e->value;
    for (std::size_t i = 0; i < t.grad.data.size(); ++i) t.grad.data[i] += weight * e->grad.data[i];
  };
  add(pll, w.pll, t.pll);
  add(nl, w.nl, t.nl);
  add(sntd, w.sntd, t.sntd);
  if (nl) t.nl_saturation_count = nl->saturation_count;
  return t;
}

/// Inputs available to any robust objective during one training step.
struct LossContext {
  const LogitField& student;
  const LogitField& teacher;
  const CandidateSet& candidates;
  const VoxelGrid& noisy_labels;
  std::uint32_t epoch;
};

/// Extension point for third-party robust objectives; their value and
/// gradient are added to the total during the robust stage.
class RobustLoss {
 public:
  virtual ~RobustLoss() = default;
  virtual std::string name() const = 0;
  virtual LossEvaluation evaluate(const LossContext& ctx) const = 0;
};

}  // namespace occnl
