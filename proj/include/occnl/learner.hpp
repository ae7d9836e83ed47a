#pragma once

// Two-stage robust training of a per-voxel classifier.
//
// Warm-up epochs (e <= E_w) minimise cross-entropy on the noisy labels.
// Robust epochs add partial-label, negative-learning and not-true
// distillation terms built from dual-source candidate sets. The EMA teacher
// is updated after every optimisation step in both stages.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "occnl/candidates.hpp"
#include "occnl/errors.hpp"
#include "occnl/features.hpp"
#include "occnl/loss.hpp"
#include "occnl/matrix.hpp"
#include "occnl/metrics.hpp"
#include "occnl/rng.hpp"
#include "occnl/voxel.hpp"

namespace occnl {

enum class Architecture { Linear, Mlp };

inline const char* to_string(Architecture a) { return a == Architecture::Linear ? "linear" : "mlp"; }

inline Architecture parse_architecture(const std::string& s) {
  if (s == "linear") return Architecture::Linear;
  if (s == "mlp") return Architecture::Mlp;
  throw std::invalid_argument("unknown architecture '" + s + "' (expected linear|mlp)");
}

struct TensorShape {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::size_t size() const {
    return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>());
  }
};

namespace detail {

// Splits [0, n) into `parts` contiguous chunks and runs fn(begin, end, part)
// on each; parts == 1 runs inline.
inline void for_chunks(std::size_t n, unsigned parts, const std::function<void(std::size_t, std::size_t, unsigned)>& fn) {
  parts = std::max(1u, std::min<unsigned>(parts, static_cast<unsigned>(std::max<std::size_t>(n, 1))));
  if (parts == 1) {
    fn(0, n, 0);
    return;
  }
  std::vector<std::thread> pool;
  const std::size_t step = (n + parts - 1) / parts;
  for (unsigned p = 0; p < parts; ++p) {
    const std::size_t b = std::min(n, p * step), e = std::min(n, b + step);
    pool.emplace_back(fn, b, e, p);
  }
  for (auto& t : pool) t.join();
}

}  // namespace detail

/// Per-voxel classifier mapping a D-dimensional feature to C+1 logits.
/// Linear:  z = W x + b.
/// Mlp:     h = tanh(W1 x + b1), z = W2 h + b2.
/// Parameters live in one flat vector in the order of shapes().
class StudentModel {
 public:
  StudentModel() = default;
  StudentModel(Architecture arch, std::size_t input_dim, std::size_t num_classes, std::size_t hidden = 32)
      : arch_(arch), input_dim_(input_dim), num_classes_(num_classes), hidden_(arch == Architecture::Mlp ? hidden : 0) {
    if (input_dim == 0 || num_classes < 2) throw std::invalid_argument("student model needs D >= 1 and C+1 >= 2");
    if (arch == Architecture::Mlp && hidden == 0) throw std::invalid_argument("mlp needs a hidden layer");
    params_.assign(param_count(), 0.0);
  }

  /// Linear models start at zero. The MLP draws its first layer from
  /// N(0, 1/D) and its output layer from N(0, 0.01/H).
  void initialize(std::uint64_t key) {
    std::fill(params_.begin(), params_.end(), 0.0);
    if (arch_ != Architecture::Mlp) return;
    const double s1 = 1.0 / std::sqrt(double(input_dim_)), s2 = 0.1 / std::sqrt(double(hidden_));
    for (std::size_t i = 0; i < hidden_ * input_dim_; ++i) params_[i] = s1 * rng::normal(key, i, 0);
    const std::size_t w2 = hidden_ * input_dim_ + hidden_;
    for (std::size_t i = 0; i < num_classes_ * hidden_; ++i) params_[w2 + i] = s2 * rng::normal(key, i, 1);
  }

  Architecture architecture() const noexcept { return arch_; }
  std::size_t input_dim() const noexcept { return input_dim_; }
  std::size_t num_classes() const noexcept { return num_classes_; }
  std::size_t hidden() const noexcept { return hidden_; }
  std::size_t embed_dim() const noexcept { return arch_ == Architecture::Mlp ? hidden_ : input_dim_; }

  std::vector<TensorShape> shapes() const {
    const auto D = static_cast<std::uint32_t>(input_dim_), K = static_cast<std::uint32_t>(num_classes_),
               H = static_cast<std::uint32_t>(hidden_);
    if (arch_ == Architecture::Linear) return {{"W", {K, D}}, {"b", {K}}};
    return {{"W1", {H, D}}, {"b1", {H}}, {"W2", {K, H}}, {"b2", {K}}};
  }
  std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto& s : shapes()) n += s.size();
    return n;
  }

  std::span<double> params() noexcept { return params_; }
  std::span<const double> params() const noexcept { return params_; }

  bool same_shape(const StudentModel& o) const noexcept {
    return arch_ == o.arch_ && input_dim_ == o.input_dim_ && num_classes_ == o.num_classes_ && hidden_ == o.hidden_;
  }

  /// Logits for every voxel; `hidden_out` receives tanh activations (MLP).
  LogitField forward(const FeatureField& x, Matrix* hidden_out = nullptr, LogitRole role = LogitRole::Student) const {
    check_input(x);
    const std::size_t n = x.num_voxels, D = input_dim_, K = num_classes_;
    LogitField out{Matrix(n, K), role};
    if (arch_ == Architecture::Linear) {
      const double* W = params_.data();
      const double* b = W + K * D;
      for (std::size_t v = 0; v < n; ++v) {
        const auto xv = x.row(v);
        auto z = out.logits.row(v);
        for (std::size_t k = 0; k < K; ++k) {
          double s = b[k];
          const double* w = W + k * D;
          for (std::size_t d = 0; d < D; ++d) s += w[d] * xv[d];
          z[k] = s;
        }
      }
      return out;
    }
    const std::size_t H = hidden_;
    const double* W1 = params_.data();
    const double* b1 = W1 + H * D;
    const double* W2 = b1 + H;
    const double* b2 = W2 + K * H;
    Matrix h(n, H);
    for (std::size_t v = 0; v < n; ++v) {
      const auto xv = x.row(v);
      auto hv = h.row(v);
      for (std::size_t j = 0; j < H; ++j) {
        double s = b1[j];
        const double* w = W1 + j * D;
        for (std::size_t d = 0; d < D; ++d) s += w[d] * xv[d];
        hv[j] = std::tanh(s);
      }
      auto z = out.logits.row(v);
      for (std::size_t k = 0; k < K; ++k) {
        double s = b2[k];
        const double* w = W2 + k * H;
        for (std::size_t j = 0; j < H; ++j) s += w[j] * hv[j];
        z[k] = s;
      }
    }
    if (hidden_out) *hidden_out = std::move(h);
    return out;
  }

  /// Representation used for prototypes: the hidden activations of the MLP,
  /// or the input features themselves for the linear model.
  Matrix embed(const FeatureField& x) const {
    check_input(x);
    if (arch_ == Architecture::Linear) return Matrix(x.num_voxels, x.dim, x.values);
    Matrix h;
    forward(x, &h);
    return h;
  }

  /// Parameter gradient given dLoss/dlogits. Partial sums are formed per
  /// contiguous voxel chunk and added in chunk order.
  std::vector<double> backward(const FeatureField& x, const Matrix& hidden, const Matrix& dlogits,
                               unsigned threads = 1) const {
    check_input(x);
    if (dlogits.rows != x.num_voxels || dlogits.cols != num_classes_) {
      throw std::invalid_argument("backward: logit gradient has wrong shape");
    }
    const std::size_t n = x.num_voxels, D = input_dim_, K = num_classes_, H = hidden_;
    std::vector<std::vector<double>> partial(std::max(1u, threads), std::vector<double>(params_.size(), 0.0));
    detail::for_chunks(n, threads, [&](std::size_t begin, std::size_t end, unsigned part) {
      auto& g = partial[part];
      if (arch_ == Architecture::Linear) {
        double* gW = g.data();
        double* gb = gW + K * D;
        for (std::size_t v = begin; v < end; ++v) {
          const auto xv = x.row(v);
          const auto dz = dlogits.row(v);
          for (std::size_t k = 0; k < K; ++k) {
            if (dz[k] == 0.0) continue;
            gb[k] += dz[k];
            double* w = gW + k * D;
            for (std::size_t d = 0; d < D; ++d) w[d] += dz[k] * xv[d];
          }
        }
        return;
      }
      const double* W2 = params_.data() + H * D + H;
      double* gW1 = g.data();
      double* gb1 = gW1 + H * D;
      double* gW2 = gb1 + H;
      double* gb2 = gW2 + K * H;
      std::vector<double> dh(H);
      for (std::size_t v = begin; v < end; ++v) {
        const auto xv = x.row(v);
        const auto hv = hidden.row(v);
        const auto dz = dlogits.row(v);
        std::fill(dh.begin(), dh.end(), 0.0);
        for (std::size_t k = 0; k < K; ++k) {
          if (dz[k] == 0.0) continue;
          gb2[k] += dz[k];
          double* w = gW2 + k * H;
          const double* w2 = W2 + k * H;
          for (std::size_t j = 0; j < H; ++j) {
            w[j] += dz[k] * hv[j];
            dh[j] += dz[k] * w2[j];
          }
        }
        for (std::size_t j = 0; j < H; ++j) {
          const double da = dh[j] * (1.0 - hv[j] * hv[j]);
          if (da == 0.0) continue;
          gb1[j] += da;
          double* w = gW1 + j * D;
          for (std::size_t d = 0; d < D; ++d) w[d] += da * xv[d];
        }
      }
    });
    std::vector<double> grad = std::move(partial[0]);
    for (std::size_t p = 1; p < partial.size(); ++p) {
      for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += partial[p][i];
    }
    return grad;
  }

 private:
  void check_input(const FeatureField& x) const {
    if (x.dim != input_dim_) {
      throw std::invalid_argument("feature dimension " + std::to_string(x.dim) + " does not match model input " +
                                  std::to_string(input_dim_));
    }
  }

  Architecture arch_ = Architecture::Linear;
  std::size_t input_dim_ = 0;
  std::size_t num_classes_ = 0;
  std::size_t hidden_ = 0;
  std::vector<double> params_;
};

struct TeacherState {
  StudentModel model;
  double momentum = 0.999;

  static TeacherState copy_of(const StudentModel& student, double momentum) {
    if (!(momentum >= 0.0 && momentum <= 1.0)) throw std::invalid_argument("EMA momentum outside [0,1]");
    return TeacherState{student, momentum};
  }
};

/// theta_ema <- d * theta_ema + (1 - d) * theta, parameter by parameter.
inline void ema_update_inplace(const StudentModel& student, TeacherState& teacher) {
  if (!student.same_shape(teacher.model)) throw StateError("ema_update: teacher and student shapes differ");
  const double d = teacher.momentum;
  auto t = teacher.model.params();
  const auto s = student.params();
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = d * t[i] + (1.0 - d) * s[i];
}

inline TeacherState ema_update(const StudentModel& student, const TeacherState& teacher) {
  TeacherState next = teacher;
  ema_update_inplace(student, next);
  return next;
}

struct PrototypeBank {
  std::size_t dim = 0;
  double momentum = 0.99;     // scene-agnostic accumulation rate m_p
  double fusion_weight = 0.5; // weight of the scene-adaptive part in the fused prototype
  std::vector<std::vector<double>> scene_adaptive;
  std::vector<std::vector<double>> scene_agnostic;
  std::vector<std::vector<double>> fused;
  std::vector<bool> present;  // fused[c] is defined

  PrototypeBank() = default;
  PrototypeBank(std::size_t num_classes, std::size_t d, double m_p = 0.99, double fusion = 0.5)
      : dim(d),
        momentum(m_p),
        fusion_weight(fusion),
        scene_adaptive(num_classes, std::vector<double>(d, 0.0)),
        scene_agnostic(num_classes, std::vector<double>(d, 0.0)),
        fused(num_classes, std::vector<double>(d, 0.0)),
        present(num_classes, false) {}

  std::size_t num_classes() const noexcept { return fused.size(); }
};

/// Class-wise mean pooling of `features` under `assignments`, folded into
/// the running scene-agnostic prototypes. A class seen for the first time
/// seeds its scene-agnostic prototype with the scene mean. Classes without
/// assigned voxels keep all three prototypes unchanged.
inline PrototypeBank update_prototypes(const Matrix& features, std::span<const Label> assignments, PrototypeBank bank) {
  if (features.rows != assignments.size()) throw std::invalid_argument("update_prototypes: assignment count mismatch");
  if (features.cols != bank.dim) throw std::invalid_argument("update_prototypes: feature dimension mismatch");
  const std::size_t K = bank.num_classes(), D = bank.dim;
  std::vector<std::vector<double>> sum(K, std::vector<double>(D, 0.0));
  std::vector<std::size_t> count(K, 0);
  for (std::size_t v = 0; v < features.rows; ++v) {
    const Label c = assignments[v];
    if (c >= K) throw std::invalid_argument("update_prototypes: assignment outside label space");
    ++count[c];
    const auto f = features.row(v);
    for (std::size_t d = 0; d < D; ++d) sum[c][d] += f[d];
  }
  for (std::size_t c = 0; c < K; ++c) {
    if (count[c] == 0) continue;
    for (std::size_t d = 0; d < D; ++d) bank.scene_adaptive[c][d] = sum[c][d] / static_cast<double>(count[c]);
    if (!bank.present[c]) {
      bank.scene_agnostic[c] = bank.scene_adaptive[c];
    } else {
      for (std::size_t d = 0; d < D; ++d) {
        bank.scene_agnostic[c][d] =
            bank.momentum * bank.scene_agnostic[c][d] + (1.0 - bank.momentum) * bank.scene_adaptive[c][d];
      }
    }
    for (std::size_t d = 0; d < D; ++d) {
      bank.fused[c][d] =
          bank.fusion_weight * bank.scene_adaptive[c][d] + (1.0 - bank.fusion_weight) * bank.scene_agnostic[c][d];
    }
    double norm = 0.0;
    for (double x : bank.fused[c]) norm += x * x;
    bank.present[c] = norm > 0.0;
  }
  return bank;
}

/// Per-voxel argmax of the student logits; ties resolve to the smaller id.
inline VoxelGrid predict(const StudentModel& model, const FeatureField& features, const Dims& dims) {
  if (features.num_voxels != dims.volume()) throw std::invalid_argument("predict: features do not match grid dims");
  const LogitField z = model.forward(features);
  VoxelGrid out(dims);
  for (std::size_t v = 0; v < z.num_voxels(); ++v) {
    const auto row = z.logits.row(v);
    std::size_t best = 0;
    for (std::size_t k = 1; k < row.size(); ++k) {
      if (row[k] > row[best]) best = k;
    }
    out.labels[v] = static_cast<Label>(best);
  }
  return out;
}

struct TrainConfig {
  std::uint32_t epochs = 20;
  std::uint32_t warmup_epochs = 12;
  double learning_rate = 0.5;
  std::uint32_t lr_decay_epoch = 18;  // epochs >= this use lr * lr_decay_factor
  double lr_decay_factor = 0.1;
  std::size_t minibatch = 0;          // voxels per step; 0 = one scene per step
  Architecture architecture = Architecture::Linear;
  std::size_t hidden = 32;
  KPolicy k_policy;
  CandidateSources sources = CandidateSources::Both;
  bool include_noisy_label = false;
  bool use_pll = true;
  bool use_nl = true;
  bool use_sntd = true;
  LossWeights weights;
  SNTDConfig sntd;
  double ema_momentum = 0.999;
  double proto_momentum = 0.99;
  double proto_fusion = 0.5;
  std::uint64_t seed = 0;
  unsigned threads = 1;
  std::vector<std::shared_ptr<const RobustLoss>> extra_losses;

  void validate(std::uint32_t num_classes) const {
    if (epochs < 1) throw std::invalid_argument("train: epochs must be >= 1");
    if (warmup_epochs > epochs) throw std::invalid_argument("train: warm-up longer than training");
    if (!(learning_rate > 0.0) || !(lr_decay_factor > 0.0)) throw std::invalid_argument("train: rates must be positive");
    if (!(ema_momentum >= 0.0 && ema_momentum <= 1.0)) throw std::invalid_argument("train: EMA momentum outside [0,1]");
    if (!(proto_momentum >= 0.0 && proto_momentum <= 1.0)) throw std::invalid_argument("train: prototype momentum outside [0,1]");
    if (!(proto_fusion >= 0.0 && proto_fusion <= 1.0)) throw std::invalid_argument("train: prototype fusion outside [0,1]");
    if (k_policy.schedule.warmup_epochs != warmup_epochs) throw std::invalid_argument("train: K schedule warm-up differs from E_w");
    k_policy.schedule.validate(num_classes);
    sntd.validate();
  }
};

struct TrainSample {
  FeatureField features;
  VoxelGrid noisy_labels;
  VoxelGrid latent_labels;  // clean labels, used only for candidate diagnostics
};

struct EvalSample {
  FeatureField features;
  VoxelGrid refined_gt;
};

struct Dataset {
  LabelSpace space;
  std::vector<TrainSample> train;
  std::vector<EvalSample> eval;
};

struct EpochRecord {
  std::uint32_t epoch = 0;
  std::optional<std::uint32_t> k;
  double base = 0.0, pll = 0.0, nl = 0.0, sntd = 0.0, total = 0.0;
  std::optional<double> hit_rate, purity, mean_candidate_size;
  std::optional<double> hit_rate_union, hit_rate_teacher, hit_rate_prototype;
  double iou = 0.0, miou = 0.0;
  std::size_t nl_saturation_count = 0;
};

struct StepRecord {
  std::uint32_t epoch = 0;
  std::uint64_t step = 0;
  double base = 0.0, pll = 0.0, nl = 0.0, sntd = 0.0, total = 0.0;
  std::size_t nl_saturation_count = 0;
};

/// Counts of robust-stage work per epoch (index = epoch - 1).
struct StageInstrumentation {
  std::vector<std::size_t> k_evaluations;
  std::vector<std::size_t> candidate_builds;
  std::vector<std::size_t> robust_loss_evaluations;
};

struct TrainResult {
  StudentModel student;
  TeacherState teacher;
  PrototypeBank prototypes;
  std::vector<EpochRecord> history;
  std::vector<StepRecord> steps;
  StageInstrumentation instrumentation;
  std::vector<std::string> warnings;
};

struct DivergenceSnapshot {
  std::uint32_t epoch = 0;
  std::uint64_t step = 0;
  double base = 0.0, pll = 0.0, nl = 0.0, sntd = 0.0;
  std::vector<double> student_params;
};

class TrainingDiverged : public std::runtime_error {
 public:
  explicit TrainingDiverged(DivergenceSnapshot s)
      : std::runtime_error("training diverged at epoch " + std::to_string(s.epoch) + ", step " +
                           std::to_string(s.step) + ": non-finite loss"),
        snapshot_(std::move(s)) {}
  const DivergenceSnapshot& snapshot() const noexcept { return snapshot_; }

 private:
  DivergenceSnapshot snapshot_;
};

/// Pooled refined-eval scores of `model` over every eval sample.
inline IouScores evaluate_model(const StudentModel& model, const Dataset& data,
                                MiouConvention conv = MiouConvention::ExcludeAbsent) {
  ConfusionCounts cc(data.space.num_classes());
  for (const auto& s : data.eval) {
    cc += confusion_counts(predict(model, s.features, s.refined_gt.dims), s.refined_gt, data.space);
  }
  return iou_scores(cc, conv);
}

namespace detail {

inline FeatureField gather_rows(const FeatureField& src, std::span<const std::size_t> idx) {
  FeatureField out(idx.size(), src.dim);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto r = src.row(idx[i]);
    std::copy(r.begin(), r.end(), out.row(i).begin());
  }
  return out;
}

inline VoxelGrid gather_labels(const VoxelGrid& src, std::span<const std::size_t> idx) {
  VoxelGrid out(Dims{static_cast<std::uint32_t>(idx.size()), 1, 1});
  for (std::size_t i = 0; i < idx.size(); ++i) out.labels[i] = src.labels[idx[i]];
  return out;
}

inline std::vector<Label> argmax_rows(const Matrix& z) {
  std::vector<Label> out(z.rows);
  for (std::size_t v = 0; v < z.rows; ++v) {
    const auto r = z.row(v);
    out[v] = static_cast<Label>(std::max_element(r.begin(), r.end()) - r.begin());
  }
  return out;
}

inline bool finite(double x) { return std::isfinite(x); }

}  // namespace detail

inline TrainResult train(const Dataset& data, const TrainConfig& cfg,
                         const MiouConvention conv = MiouConvention::ExcludeAbsent) {
  if (data.train.empty()) throw std::invalid_argument("train: dataset has no training samples");
  const std::uint32_t K = data.space.num_classes();
  cfg.validate(K);
  const std::size_t D = data.train.front().features.dim;
  for (const auto& s : data.train) {
    if (s.features.dim != D || s.features.num_voxels != s.noisy_labels.size() ||
        s.latent_labels.size() != s.noisy_labels.size()) {
      throw std::invalid_argument("train: inconsistent training sample");
    }
    require_valid(s.noisy_labels, data.space);
  }

  TrainResult res;
  res.student = StudentModel(cfg.architecture, D, K, cfg.hidden);
  res.student.initialize(rng::stage_seed(cfg.seed, "student-init"));
  res.teacher = TeacherState{res.student, cfg.ema_momentum};
  res.prototypes = PrototypeBank(K, res.student.embed_dim(), cfg.proto_momentum, cfg.proto_fusion);
  res.instrumentation.k_evaluations.assign(cfg.epochs, 0);
  res.instrumentation.candidate_builds.assign(cfg.epochs, 0);
  res.instrumentation.robust_loss_evaluations.assign(cfg.epochs, 0);
  const std::uint64_t batch_key = rng::stage_seed(cfg.seed, "minibatch-order");

  std::uint64_t step = 0;
  for (std::uint32_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const bool robust = epoch > cfg.warmup_epochs;
    const double lr = cfg.learning_rate * (epoch >= cfg.lr_decay_epoch ? cfg.lr_decay_factor : 1.0);
    EpochRecord rec;
    rec.epoch = epoch;
    std::uint32_t k_e = 0;
    if (robust) {
      k_e = cfg.k_policy.k_for_epoch(epoch, std::numeric_limits<std::uint32_t>::max(), cfg.seed);
      ++res.instrumentation.k_evaluations[epoch - 1];
      if (k_e > K) {
        res.warnings.push_back("epoch " + std::to_string(epoch) + ": K=" + std::to_string(k_e) +
                               " exceeds the number of classes, clamped to " + std::to_string(K));
        k_e = K;
      }
      rec.k = k_e;
    }
    std::size_t batches = 0, diag_voxels = 0;
    double hit = 0.0, hit_u = 0.0, hit_t = 0.0, hit_p = 0.0, purity_hits = 0.0, hits = 0.0, size_sum = 0.0;

    for (std::size_t si = 0; si < data.train.size(); ++si) {
      const TrainSample& sample = data.train[si];
      const std::size_t n = sample.features.num_voxels;
      std::vector<std::size_t> order(n);
      std::iota(order.begin(), order.end(), std::size_t{0});
      const std::size_t bs = cfg.minibatch == 0 ? n : std::min(cfg.minibatch, n);
      if (bs < n) {
        // Seeded Fisher-Yates keyed by (epoch, sample).
        const std::uint64_t key = rng::splitmix64(batch_key ^ (std::uint64_t{epoch} << 32) ^ si);
        for (std::size_t i = n - 1; i > 0; --i) std::swap(order[i], order[rng::below(key, i, 0, i + 1)]);
      }
      for (std::size_t begin = 0; begin < n; begin += bs) {
        const std::span<const std::size_t> idx(order.data() + begin, std::min(bs, n - begin));
        const bool whole = idx.size() == n;
        const FeatureField xb = whole ? sample.features : detail::gather_rows(sample.features, idx);
        const VoxelGrid yb = whole ? sample.noisy_labels : detail::gather_labels(sample.noisy_labels, idx);
        const VoxelGrid gb = whole ? sample.latent_labels : detail::gather_labels(sample.latent_labels, idx);

        Matrix hidden, teacher_hidden;
        const LogitField z = res.student.forward(xb, &hidden);
        const LogitField zt = res.teacher.model.forward(xb, &teacher_hidden, LogitRole::Teacher);
        const Matrix teacher_embed =
            cfg.architecture == Architecture::Mlp ? teacher_hidden : Matrix(xb.num_voxels, xb.dim, xb.values);

        const LossEvaluation base = cross_entropy_loss(z, yb);
        std::optional<LossEvaluation> pll, nl, sntd;
        std::vector<LossEvaluation> extra;
        if (robust) {
          const Matrix tprobs = softmax(zt);
          const SimilarityMatrix sims =
              prototype_similarity(teacher_embed, res.prototypes.fused, res.prototypes.present);
          CandidateOptions opt;
          opt.sources = cfg.sources;
          if (cfg.include_noisy_label) opt.force_include = &yb;
          const CandidateSet cands = build_candidates(tprobs, sims, k_e, opt);
          ++res.instrumentation.candidate_builds[epoch - 1];

          const auto du = candidate_diagnostics(cands, gb);
          const bool active_is_union = cfg.sources == CandidateSources::Both && !cfg.include_noisy_label;
          const auto db =
              active_is_union ? du : candidate_diagnostics(build_candidates(tprobs, sims, k_e, {CandidateSources::Both}), gb);
          const auto dt = candidate_diagnostics(build_candidates(tprobs, sims, k_e, {CandidateSources::Teacher}), gb);
          const auto dp = candidate_diagnostics(build_candidates(tprobs, sims, k_e, {CandidateSources::Prototype}), gb);
          const double m = static_cast<double>(idx.size());
          hit += du.hit_rate * m;
          hit_u += db.hit_rate * m;
          hit_t += dt.hit_rate * m;
          hit_p += dp.hit_rate * m;
          hits += du.hit_rate * m;
          purity_hits += du.purity * du.hit_rate * m;
          size_sum += du.mean_candidate_size * m;
          diag_voxels += idx.size();

          if (cfg.use_pll) pll = pll_loss(z, cands);
          if (cfg.use_nl) nl = nl_loss(z, cands);
          if (cfg.use_sntd) sntd = sntd_loss(z, zt, yb, cfg.sntd);
          const LossContext ctx{z, zt, cands, yb, epoch};
          for (const auto& term : cfg.extra_losses) extra.push_back(term->evaluate(ctx));
          ++res.instrumentation.robust_loss_evaluations[epoch - 1];
        }

        TotalLoss total = total_loss(base, pll ? &*pll : nullptr, nl ? &*nl : nullptr, sntd ? &*sntd : nullptr,
                                     epoch, cfg.warmup_epochs, cfg.weights);
        for (const auto& e : extra) {
          total.value += e.value;
          for (std::size_t i = 0; i < total.grad.data.size(); ++i) total.grad.data[i] += e.grad.data[i];
        }
        if (!detail::finite(total.value)) {
          throw TrainingDiverged(DivergenceSnapshot{epoch, step, total.base, total.pll, total.nl, total.sntd,
                                                    std::vector<double>(res.student.params().begin(),
                                                                        res.student.params().end())});
        }
        const std::vector<double> grad = res.student.backward(xb, hidden, total.grad, cfg.threads);
        auto theta = res.student.params();
        for (std::size_t i = 0; i < theta.size(); ++i) theta[i] -= lr * grad[i];
        ema_update_inplace(res.student, res.teacher);

        // Prototype pooling: noisy labels during warm-up, teacher argmax after.
        if (robust) {
          const auto assign = detail::argmax_rows(zt.logits);
          res.prototypes = update_prototypes(teacher_embed, assign, std::move(res.prototypes));
        } else {
          res.prototypes = update_prototypes(teacher_embed, yb.labels, std::move(res.prototypes));
        }

        res.steps.push_back(StepRecord{epoch, step, total.base, total.pll, total.nl, total.sntd, total.value,
                                       total.nl_saturation_count});
        rec.base += total.base;
        rec.pll += total.pll;
        rec.nl += total.nl;
        rec.sntd += total.sntd;
        rec.total += total.value;
        rec.nl_saturation_count += total.nl_saturation_count;
        ++batches;
        ++step;
      }
    }
    const double nb = static_cast<double>(std::max<std::size_t>(batches, 1));
    rec.base /= nb;
    rec.pll /= nb;
    rec.nl /= nb;
    rec.sntd /= nb;
    rec.total /= nb;
    if (robust && diag_voxels > 0) {
      const double nv = static_cast<double>(diag_voxels);
      rec.hit_rate = hit / nv;
      rec.hit_rate_union = hit_u / nv;
      rec.hit_rate_teacher = hit_t / nv;
      rec.hit_rate_prototype = hit_p / nv;
      rec.purity = hits > 0.0 ? purity_hits / hits : 0.0;
      rec.mean_candidate_size = size_sum / nv;
    }
    if (!data.eval.empty()) {
      const IouScores s = evaluate_model(res.student, data, conv);
      rec.iou = s.iou;
      rec.miou = s.miou;
    }
    res.history.push_back(rec);
  }
  return res;
}

}  // namespace occnl
