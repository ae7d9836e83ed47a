#pragma once

// End-to-end runs: scenes -> noisy training labels and refined evaluation
// labels -> training -> checkpoint, history and metrics on disk.
//
// Every random stage draws from rng::stage_seed(seed, name) with these names:
//   scene/train/<i>, scene/eval/<i>   scene generation
//   feature-model                     class means shared by all scenes
//   features/train/<i>, features/eval/<i>
//   noise/train/<i>                   asymmetric label flips
//   train                             student init, minibatch order, random K
//
// Run directory layout:
//   config.resolved
//   scenes/{train,eval}_NNN/frame_TT.ocv, mask_TT.ocv, clean.ocv, features.ocf
//   scenes/train_NNN/noisy.ocv, refined.ocv
//   scenes/eval_NNN/refined.ocv
//   noise_report.json, checkpoint.dprc, history.csv, losses.jsonl,
//   diagnostics.jsonl, metrics.csv, metrics.json
// A failed run leaves FAILED (holding the error message) next to whatever
// was already written.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "occnl/checkpoint.hpp"
#include "occnl/config.hpp"
#include "occnl/features.hpp"
#include "occnl/io.hpp"
#include "occnl/learner.hpp"
#include "occnl/metrics.hpp"
#include "occnl/noise.hpp"
#include "occnl/rng.hpp"
#include "occnl/scene.hpp"

namespace occnl {

namespace fs = std::filesystem;

/// light/moderate/heavy for the three reference rates, else "eta=<value>".
inline std::string noise_level_tag(const ExperimentConfig& cfg) {
  if (cfg.noise.kind == NoiseKind::Trailing) return to_string(cfg.noise.level);
  const double e = cfg.noise.eta;
  if (std::abs(e - 0.5) < 1e-12) return "light";
  if (std::abs(e - 0.7) < 1e-12) return "moderate";
  if (std::abs(e - 0.9) < 1e-12) return "heavy";
  char buf[48];
  std::snprintf(buf, sizeof buf, "eta=%g", e);
  return buf;
}

inline std::string noise_kind_tag(const ExperimentConfig& cfg) {
  return cfg.noise.kind == NoiseKind::Asymmetric ? "asymmetric" : "trailing";
}

inline std::string stage_name(const char* stage, std::uint32_t i) { return std::string(stage) + "/" + std::to_string(i); }

struct BuiltData {
  Dataset dataset;
  std::vector<SceneSequence> train_scenes, eval_scenes;
  std::vector<VoxelGrid> train_refined;  // latent clean labels of the training scenes
  NoiseReport noise_report;              // pooled over all training scenes
};

/// The raw annotation an evaluation scene would carry (a Mild aggregate when
/// the sequence is long enough, else the reference frame) and its refinement.
inline VoxelGrid refined_eval_labels(const SceneSequence& seq, const TrailingWindows& w) {
  const bool fits = std::size_t{seq.reference_frame} + w.future_frames < seq.num_frames();
  const VoxelGrid raw = fits ? build_trailing_level(seq, TrailingLevel::Mild, w) : seq.frames[seq.reference_frame];
  return refine_ground_truth(raw, seq.instance_masks[seq.reference_frame], seq.space);
}

inline BuiltData build_dataset(const ExperimentConfig& cfg) {
  BuiltData out;
  const LabelSpace space = cfg.label_space();
  SceneSpec spec = cfg.scene;
  spec.space = space;
  out.dataset.space = space;
  const FeatureModel fm = FeatureModel::make(cfg.data.features, space.num_classes(), rng::stage_seed(cfg.seed, "feature-model"));

  VoxelGrid pooled_clean(Dims{0, 1, 1}), pooled_noisy(Dims{0, 1, 1});
  for (std::uint32_t i = 0; i < cfg.data.train_scenes; ++i) {
    SceneSequence seq = generate_scene(spec, rng::stage_seed(cfg.seed, stage_name("scene/train", i)));
    const VoxelMask& mask = seq.instance_masks[seq.reference_frame];
    const VoxelGrid refined = refine_ground_truth(seq.clean_gt, mask, space);
    VoxelGrid noisy;
    if (cfg.noise.kind == NoiseKind::Asymmetric) {
      noisy = inject_asymmetric(refined, AsymNoiseSpec{cfg.noise.eta, rng::stage_seed(cfg.seed, stage_name("noise/train", i))},
                                space);
    } else {
      noisy = build_trailing_level(seq, cfg.noise.level, cfg.noise.windows);
    }
    TrainSample s;
    s.features = fm.sample(refined, rng::stage_seed(cfg.seed, stage_name("features/train", i)));
    s.noisy_labels = noisy;
    s.latent_labels = refined;
    pooled_clean.labels.insert(pooled_clean.labels.end(), refined.labels.begin(), refined.labels.end());
    pooled_noisy.labels.insert(pooled_noisy.labels.end(), noisy.labels.begin(), noisy.labels.end());
    out.dataset.train.push_back(std::move(s));
    out.train_refined.push_back(refined);
    out.train_scenes.push_back(std::move(seq));
  }
  pooled_clean.dims.nx = pooled_noisy.dims.nx = static_cast<std::uint32_t>(pooled_clean.labels.size());
  out.noise_report = noise_statistics(pooled_clean, pooled_noisy, space);

  for (std::uint32_t i = 0; i < cfg.data.eval_scenes; ++i) {
    SceneSequence seq = generate_scene(spec, rng::stage_seed(cfg.seed, stage_name("scene/eval", i)));
    EvalSample e;
    e.refined_gt = refined_eval_labels(seq, cfg.noise.windows);
    e.features = fm.sample(e.refined_gt, rng::stage_seed(cfg.seed, stage_name("features/eval", i)));
    out.dataset.eval.push_back(std::move(e));
    out.eval_scenes.push_back(std::move(seq));
  }
  return out;
}

inline TrainConfig resolved_train_config(const ExperimentConfig& cfg, unsigned threads) {
  TrainConfig t = cfg.train;
  t.seed = rng::stage_seed(cfg.seed, "train");
  t.threads = threads;
  return t;
}

inline void write_sequence(const fs::path& dir, const SceneSequence& seq) {
  for (std::size_t f = 0; f < seq.num_frames(); ++f) {
    char name[32];
    std::snprintf(name, sizeof name, "frame_%02zu.ocv", f);
    io::write_grid(dir / name, seq.frames[f]);
    std::snprintf(name, sizeof name, "mask_%02zu.ocv", f);
    io::write_mask(dir / name, seq.instance_masks[f]);
  }
  io::write_grid(dir / "clean.ocv", seq.clean_gt);
}

inline std::string scene_dir_name(const char* split, std::size_t i) {
  char name[32];
  std::snprintf(name, sizeof name, "%s_%03zu", split, i);
  return name;
}

inline void write_dataset(const fs::path& root, const BuiltData& data) {
  const Dataset& ds = data.dataset;
  for (std::size_t i = 0; i < ds.train.size(); ++i) {
    const fs::path dir = root / "scenes" / scene_dir_name("train", i);
    write_sequence(dir, data.train_scenes[i]);
    const Dims& d = data.train_scenes[i].clean_gt.dims;
    io::write_features(dir / "features.ocf", ds.train[i].features, d);
    io::write_grid(dir / "noisy.ocv", ds.train[i].noisy_labels);
    io::write_grid(dir / "refined.ocv", data.train_refined[i]);
  }
  for (std::size_t i = 0; i < ds.eval.size(); ++i) {
    const fs::path dir = root / "scenes" / scene_dir_name("eval", i);
    write_sequence(dir, data.eval_scenes[i]);
    io::write_features(dir / "features.ocf", ds.eval[i].features, ds.eval[i].refined_gt.dims);
    io::write_grid(dir / "refined.ocv", ds.eval[i].refined_gt);
  }
}

/// Reads the scenes/ tree written by write_dataset back into a Dataset.
inline Dataset load_dataset(const fs::path& root, const LabelSpace& space) {
  Dataset ds;
  ds.space = space;
  for (std::size_t i = 0;; ++i) {
    const fs::path dir = root / "scenes" / scene_dir_name("train", i);
    if (!fs::exists(dir)) break;
    TrainSample s;
    Dims d;
    s.features = io::read_features(dir / "features.ocf", &d);
    s.noisy_labels = io::read_grid(dir / "noisy.ocv");
    s.latent_labels = io::read_grid(dir / "refined.ocv");
    if (s.noisy_labels.dims != d || s.latent_labels.dims != d) throw ValidationError(dir.string() + ": grid and feature dims differ");
    require_valid(s.noisy_labels, space);
    require_valid(s.latent_labels, space);
    ds.train.push_back(std::move(s));
  }
  for (std::size_t i = 0;; ++i) {
    const fs::path dir = root / "scenes" / scene_dir_name("eval", i);
    if (!fs::exists(dir)) break;
    EvalSample e;
    Dims d;
    e.features = io::read_features(dir / "features.ocf", &d);
    e.refined_gt = io::read_grid(dir / "refined.ocv");
    if (e.refined_gt.dims != d) throw ValidationError(dir.string() + ": grid and feature dims differ");
    require_valid(e.refined_gt, space);
    ds.eval.push_back(std::move(e));
  }
  if (ds.train.empty() && ds.eval.empty()) throw IoError("no scenes found under " + (root / "scenes").string());
  return ds;
}

struct PipelineResult {
  fs::path dir;
  TrainResult training;
  ReportRow row;
  NoiseReport noise_report;
};

namespace detail {

// Reads key artifacts back so a run only succeeds when they parse.
inline void validate_artifacts(const fs::path& dir, const TrainResult& tr, std::uint32_t C) {
  const Checkpoint ck = read_checkpoint(dir / "checkpoint.dprc");
  if (!std::equal(ck.student.params().begin(), ck.student.params().end(), tr.student.params().begin())) {
    throw IoError("checkpoint read-back differs from the trained model");
  }
  std::uint32_t parsed_c = 0;
  parse_csv_report(io::read_text(dir / "metrics.csv"), &parsed_c);
  if (parsed_c != C) throw IoError("metrics.csv read-back has the wrong class count");
}

}  // namespace detail

/// Runs one configuration into `dir`. Messages (warnings, notices) go to `log`.
inline PipelineResult run_pipeline(const ExperimentConfig& cfg, const fs::path& dir, unsigned threads = 1,
                                   std::ostream* log = nullptr) {
  validate_config(cfg);
  fs::create_directories(dir);
  fs::remove(dir / "FAILED");
  try {
    io::write_text(dir / "config.resolved", resolved_config(cfg));
    const BuiltData data = build_dataset(cfg);
    write_dataset(dir, data);
    io::write_text(dir / "noise_report.json", to_json(data.noise_report).dump(2) + "\n");

    const TrainConfig tcfg = resolved_train_config(cfg, threads);
    PipelineResult res;
    res.dir = dir;
    res.noise_report = data.noise_report;
    res.training = train(data.dataset, tcfg, cfg.convention);
    if (log) {
      for (const auto& w : res.training.warnings) *log << "warning: " << w << "\n";
    }
    write_checkpoint(dir / "checkpoint.dprc", Checkpoint{res.training.student, res.training.teacher, res.training.prototypes});
    io::write_text(dir / "history.csv", render_history_csv(res.training.history));
    io::write_text(dir / "losses.jsonl", render_loss_log(res.training.steps));
    io::write_text(dir / "diagnostics.jsonl", render_diagnostics_log(res.training.history));

    const std::uint32_t C = data.dataset.space.num_semantic();
    res.row = ReportRow{cfg.run_id, noise_kind_tag(cfg), noise_level_tag(cfg), evaluate_model(res.training.student, data.dataset, cfg.convention)};
    emit_report({res.row}, C, ReportFormat::Csv, dir / "metrics.csv");
    emit_report({res.row}, C, ReportFormat::Json, dir / "metrics.json");
    detail::validate_artifacts(dir, res.training, C);
    return res;
  } catch (const std::exception& e) {
    io::write_text(dir / "FAILED", std::string(e.what()) + "\n");
    throw;
  }
}

struct SweepCell {
  std::string name;  // directory name and run_id
  ExperimentConfig config;
};

namespace detail {

inline std::string eta_tag(double e) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", e);
  return buf;
}

inline std::string dir_safe(std::string s) {
  for (char& ch : s) {
    if (ch == ',') ch = '+';
  }
  return s;
}

}  // namespace detail

/// Cartesian product of the non-empty sweep axes; empty axes keep the base value.
inline std::vector<SweepCell> expand_sweep(const ExperimentConfig& base) {
  struct NoiseChoice {
    std::string tag;
    NoiseKind kind;
    double eta;
    TrailingLevel level;
  };
  std::vector<NoiseChoice> noises;
  for (double e : base.sweep.eta) noises.push_back({"eta" + detail::eta_tag(e), NoiseKind::Asymmetric, e, base.noise.level});
  for (const auto& t : base.sweep.trailing) {
    noises.push_back({"trailing-" + t, NoiseKind::Trailing, base.noise.eta, parse_trailing_level(t)});
  }
  const bool sweep_noise = !noises.empty();
  if (!sweep_noise) noises.push_back({"", base.noise.kind, base.noise.eta, base.noise.level});

  const auto axis = [](const std::vector<std::string>& v, const std::string& fallback, bool& swept) {
    swept = !v.empty();
    return swept ? v : std::vector<std::string>{fallback};
  };
  bool sk = false, ss = false, sl = false;
  const auto ks = axis(base.sweep.k_strategies, base.k_strategy, sk);
  const auto srcs = axis(base.sweep.sources, to_string(base.train.sources), ss);
  const auto losses = axis(base.sweep.losses, detail::loss_set_name(base.train), sl);

  std::vector<SweepCell> cells;
  for (const auto& n : noises) {
    for (const auto& k : ks) {
      for (const auto& src : srcs) {
        for (const auto& l : losses) {
          ExperimentConfig c = base;
          c.sweep = SweepConfig{};
          c.noise.kind = n.kind;
          c.noise.eta = n.eta;
          c.noise.level = n.level;
          c.k_strategy = k;
          c.train.sources = parse_candidate_sources(src);
          detail::set_loss_set("sweep.losses", l, c.train);
          c.finalize();
          std::vector<std::string> parts;
          if (sweep_noise) parts.push_back(n.tag);
          if (sk) parts.push_back("k-" + k);
          if (ss) parts.push_back("src-" + src);
          if (sl) parts.push_back("loss-" + detail::dir_safe(l));
          const std::string name = parts.empty() ? base.run_id : detail::join(parts, "_");
          c.run_id = name;
          cells.push_back({name, std::move(c)});
        }
      }
    }
  }
  return cells;
}

struct SweepRow {
  ReportRow metrics;
  std::string k_strategy, sources, losses;
  // Last robust epoch; NaN when the cell never left warm-up.
  double hit_rate = std::nan(""), hit_rate_union = std::nan(""), hit_rate_teacher = std::nan(""),
         hit_rate_prototype = std::nan("");
};

inline std::string render_sweep_csv(const std::vector<SweepRow>& rows) {
  std::string out = "run_id,noise_kind,noise_level,k_strategy,sources,losses,iou,miou,hit_rate,hit_rate_union,"
                    "hit_rate_teacher,hit_rate_prototype\n";
  for (const auto& r : rows) {
    out += r.metrics.run_id + "," + r.metrics.noise_kind + "," + r.metrics.noise_level + "," + r.k_strategy + "," +
           r.sources + "," + detail::dir_safe(r.losses) + "," + detail::format_number(r.metrics.scores.iou) + "," +
           detail::format_number(r.metrics.scores.miou) + "," + detail::format_number(r.hit_rate) + "," +
           detail::format_number(r.hit_rate_union) + "," + detail::format_number(r.hit_rate_teacher) + "," +
           detail::format_number(r.hit_rate_prototype) + "\n";
  }
  return out;
}

/// Runs every cell into root/<cell>/ and writes root/metrics.csv (one row per
/// cell) plus root/sweep.csv with the candidate hit rates.
inline std::vector<SweepRow> run_sweep(const ExperimentConfig& base, const fs::path& root, unsigned threads = 1,
                                       std::ostream* log = nullptr) {
  validate_config(base);
  fs::create_directories(root);
  io::write_text(root / "config.resolved", resolved_config(base));
  std::vector<SweepRow> rows;
  std::vector<ReportRow> metrics;
  for (const auto& cell : expand_sweep(base)) {
    if (log) *log << "sweep: running " << cell.name << "\n";
    const PipelineResult r = run_pipeline(cell.config, root / cell.name, threads, log);
    SweepRow row;
    row.metrics = r.row;
    row.k_strategy = cell.config.k_strategy;
    row.sources = to_string(cell.config.train.sources);
    row.losses = detail::loss_set_name(cell.config.train);
    for (auto it = r.training.history.rbegin(); it != r.training.history.rend(); ++it) {
      if (it->hit_rate) {
        row.hit_rate = *it->hit_rate;
        row.hit_rate_union = *it->hit_rate_union;
        row.hit_rate_teacher = *it->hit_rate_teacher;
        row.hit_rate_prototype = *it->hit_rate_prototype;
        break;
      }
    }
    metrics.push_back(r.row);
    rows.push_back(std::move(row));
  }
  emit_report(metrics, base.label_space().num_semantic(), ReportFormat::Csv, root / "metrics.csv");
  io::write_text(root / "sweep.csv", render_sweep_csv(rows));
  return rows;
}

/// Output root: explicit value, then $OCCNL_OUT, then ./runs.
inline fs::path resolve_out_dir(const fs::path& explicit_dir, const fs::path& config_dir = {}) {
  if (!explicit_dir.empty()) return explicit_dir;
  if (!config_dir.empty()) return config_dir;
  if (const char* env = std::getenv("OCCNL_OUT"); env && *env) return env;
  return "runs";
}

}  // namespace occnl
