// occnl: command-line driver for scene generation, label noise, refinement,
// robust training, evaluation, reporting and ablation sweeps.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "occnl/occnl.hpp"

namespace fs = std::filesystem;
using namespace occnl;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<double> eta;
  std::string trailing;
  unsigned threads = 1;
};

void add_common(CLI::App* app, Common& c, bool with_noise = true) {
  app->add_option("--config", c.config, "experiment config file")->check(CLI::ExistingFile);
  app->add_option("--seed", c.seed, "top-level seed (overrides the config)");
  app->add_option("--out", c.out, "output directory (default: config 'out', then $OCCNL_OUT, then ./runs)");
  if (with_noise) {
    app->add_option("--eta", c.eta, "asymmetric flip rate in [0,1]")->check(CLI::Range(0.0, 1.0));
    app->add_option("--trailing", c.trailing, "trailing level")->check(CLI::IsMember({"mild", "moderate", "severe"}));
  }
  app->add_option("--threads", c.threads, "worker threads for gradient evaluation")->check(CLI::PositiveNumber);
}

// Config from --config (or defaults) with command-line overrides applied.
ExperimentConfig resolve(const Common& c) {
  ExperimentConfig cfg;
  if (!c.config.empty()) {
    cfg = load_config(c.config);
  } else if (!c.seed) {
    throw ConfigError("seed", "missing (pass --seed or a --config that sets it)");
  }
  if (c.seed) cfg.seed = *c.seed;
  if (c.eta && !c.trailing.empty()) throw ConfigError("noise.kind", "--eta and --trailing are mutually exclusive");
  if (c.eta) {
    cfg.noise.kind = NoiseKind::Asymmetric;
    cfg.noise.eta = *c.eta;
  }
  if (!c.trailing.empty()) {
    cfg.noise.kind = NoiseKind::Trailing;
    cfg.noise.level = parse_trailing_level(c.trailing);
  }
  cfg.finalize();
  validate_config(cfg);
  return cfg;
}

fs::path out_dir(const Common& c, const ExperimentConfig& cfg) { return resolve_out_dir(c.out, cfg.out_dir); }

void threads_notice(unsigned threads) {
  if (threads > 1) {
    std::cerr << "notice: --threads " << threads
              << " splits gradient reduction across threads; results are not bit-identical to single-threaded runs\n";
  }
}

int cmd_gen_scenes(const Common& c) {
  const ExperimentConfig cfg = resolve(c);
  const fs::path dir = out_dir(c, cfg);
  const BuiltData data = build_dataset(cfg);
  io::write_text(dir / "config.resolved", resolved_config(cfg));
  write_dataset(dir, data);
  io::write_text(dir / "noise_report.json", to_json(data.noise_report).dump(2) + "\n");
  for (std::size_t i = 0; i < data.train_scenes.size(); ++i) {
    std::printf("train_%03zu dynamic_fraction=%.6f\n", i, data.train_scenes[i].dynamic_fraction());
  }
  for (std::size_t i = 0; i < data.eval_scenes.size(); ++i) {
    std::printf("eval_%03zu dynamic_fraction=%.6f\n", i, data.eval_scenes[i].dynamic_fraction());
  }
  std::printf("wrote %s\n", (dir / "scenes").string().c_str());
  return 0;
}

LabelSpace space_of(const Common& c) {
  return c.config.empty() ? LabelSpace::semantic_kitti() : load_config(c.config).label_space();
}

SceneSequence read_sequence(const fs::path& dir, const LabelSpace& space, std::uint32_t reference_frame) {
  SceneSequence seq;
  seq.space = space;
  for (std::size_t f = 0;; ++f) {
    char name[32];
    std::snprintf(name, sizeof name, "frame_%02zu.ocv", f);
    if (!fs::exists(dir / name)) break;
    seq.frames.push_back(io::read_grid(dir / name));
    require_valid(seq.frames.back(), space);
    std::snprintf(name, sizeof name, "mask_%02zu.ocv", f);
    seq.instance_masks.push_back(io::read_mask(dir / name));
  }
  if (seq.frames.empty()) throw IoError("no frames in " + dir.string());
  if (reference_frame >= seq.frames.size()) throw ValidationError("reference frame outside the sequence");
  seq.reference_frame = reference_frame;
  seq.clean_gt = seq.frames[reference_frame];
  return seq;
}

int cmd_inject_noise(const Common& c, const std::string& in, const std::string& scene, const std::string& out,
                     std::uint32_t reference_frame) {
  const LabelSpace space = space_of(c);
  if (out.empty()) throw ConfigError("--output", "required");
  VoxelGrid clean, noisy;
  if (!c.trailing.empty()) {
    if (scene.empty()) throw ConfigError("--scene", "trailing noise needs a scene directory");
    const SceneSequence seq = read_sequence(scene, space, reference_frame);
    TrailingWindows w;
    if (!c.config.empty()) w = load_config(c.config).noise.windows;
    clean = seq.clean_gt;
    noisy = build_trailing_level(seq, parse_trailing_level(c.trailing), w);
  } else {
    if (in.empty()) throw ConfigError("--input", "asymmetric noise needs an input grid");
    if (!c.eta) throw ConfigError("--eta", "required for asymmetric noise");
    if (!c.seed) throw ConfigError("seed", "missing (pass --seed)");
    clean = io::read_grid(in);
    noisy = inject_asymmetric(clean, AsymNoiseSpec{*c.eta, *c.seed}, space);
  }
  io::write_grid(out, noisy);
  const std::string report = to_json(noise_statistics(clean, noisy, space)).dump(2);
  io::write_text(fs::path(out).replace_extension(".noise.json"), report + "\n");
  std::cout << report << "\n";
  return 0;
}

int cmd_refine(const Common& c, const std::string& in, const std::string& mask, const std::string& out) {
  const LabelSpace space = space_of(c);
  if (in.empty() || mask.empty() || out.empty()) throw ConfigError("--input", "refine needs --input, --mask and --output");
  const VoxelGrid g = io::read_grid(in);
  const VoxelMask m = io::read_mask(mask);
  const VoxelGrid r = refine_ground_truth(g, m, space);
  io::write_grid(out, r);
  std::size_t changed = 0;
  for (std::size_t i = 0; i < g.size(); ++i) changed += g.labels[i] != r.labels[i];
  std::printf("refined %zu voxels\n", changed);
  return 0;
}

Dataset dataset_for(const ExperimentConfig& cfg, const std::string& data_dir) {
  if (!data_dir.empty()) return load_dataset(data_dir, cfg.label_space());
  return build_dataset(cfg).dataset;
}

int cmd_train(const Common& c, const std::string& data_dir) {
  const ExperimentConfig cfg = resolve(c);
  threads_notice(c.threads);
  const fs::path dir = out_dir(c, cfg);
  const Dataset ds = dataset_for(cfg, data_dir);
  io::write_text(dir / "config.resolved", resolved_config(cfg));
  const TrainResult tr = train(ds, resolved_train_config(cfg, c.threads), cfg.convention);
  for (const auto& w : tr.warnings) std::cerr << "warning: " << w << "\n";
  write_checkpoint(dir / "checkpoint.dprc", Checkpoint{tr.student, tr.teacher, tr.prototypes});
  io::write_text(dir / "history.csv", render_history_csv(tr.history));
  io::write_text(dir / "losses.jsonl", render_loss_log(tr.steps));
  io::write_text(dir / "diagnostics.jsonl", render_diagnostics_log(tr.history));
  std::printf("final epoch %u: iou=%.4f miou=%.4f\n", tr.history.back().epoch, tr.history.back().iou, tr.history.back().miou);
  return 0;
}

int cmd_evaluate(const Common& c, const std::string& checkpoint, const std::string& data_dir, const std::string& format) {
  const ExperimentConfig cfg = resolve(c);
  const fs::path dir = out_dir(c, cfg);
  const Checkpoint ck = read_checkpoint(checkpoint.empty() ? (dir / "checkpoint.dprc").string() : checkpoint);
  const Dataset ds = dataset_for(cfg, data_dir);
  if (ds.eval.empty()) throw ValidationError("no evaluation scenes");
  const ReportRow row{cfg.run_id, noise_kind_tag(cfg), noise_level_tag(cfg), evaluate_model(ck.student, ds, cfg.convention)};
  const std::uint32_t C = ds.space.num_semantic();
  if (format == "csv" || format == "both") emit_report({row}, C, ReportFormat::Csv, dir / "metrics.csv");
  if (format == "json" || format == "both") emit_report({row}, C, ReportFormat::Json, dir / "metrics.json");
  std::printf("iou=%.4f miou=%.4f\n", row.scores.iou, row.scores.miou);
  return 0;
}

int cmd_report(const std::vector<std::string>& inputs, const std::string& format, const std::string& out) {
  if (inputs.empty()) throw ConfigError("inputs", "report needs at least one metrics.csv");
  std::vector<ReportRow> rows;
  std::optional<std::uint32_t> C;
  for (const auto& p : inputs) {
    std::uint32_t c = 0;
    auto part = parse_csv_report(io::read_text(p), &c);
    if (C && *C != c) throw ValidationError(p + ": class count differs from earlier reports");
    C = c;
    rows.insert(rows.end(), part.begin(), part.end());
  }
  const ReportFormat f = format == "json" ? ReportFormat::Json : ReportFormat::Csv;
  if (out.empty()) {
    std::cout << (f == ReportFormat::Csv ? render_csv(rows, *C) : render_json(rows, *C).dump(2) + "\n");
  } else {
    emit_report(rows, *C, f, out);
  }
  return 0;
}

int cmd_sweep(const Common& c) {
  const ExperimentConfig cfg = resolve(c);
  threads_notice(c.threads);
  const fs::path dir = out_dir(c, cfg);
  const auto rows = run_sweep(cfg, dir, c.threads, &std::cerr);
  std::cout << render_sweep_csv(rows);
  return 0;
}

int cmd_run(const Common& c) {
  const ExperimentConfig cfg = resolve(c);
  threads_notice(c.threads);
  const fs::path dir = out_dir(c, cfg);
  const PipelineResult r = run_pipeline(cfg, dir, c.threads, &std::cerr);
  std::printf("%s %s/%s iou=%.4f miou=%.4f -> %s\n", r.row.run_id.c_str(), r.row.noise_kind.c_str(),
              r.row.noise_level.c_str(), r.row.scores.iou, r.row.scores.miou, dir.string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"occnl: occupancy label-noise simulation and robust training"};
  app.require_subcommand(1);
  app.fallthrough(false);

  Common gen, inj, ref, trn, evl, swp, run;
  CLI::App* gen_cmd = app.add_subcommand("gen-scenes", "generate train/eval scene sequences and features");
  add_common(gen_cmd, gen);

  std::string inj_in, inj_scene, inj_out;
  std::uint32_t inj_ref = 7;
  CLI::App* inj_cmd = app.add_subcommand("inject-noise", "apply asymmetric or trailing label noise");
  add_common(inj_cmd, inj);
  inj_cmd->add_option("--input", inj_in, "clean OCV1 grid (asymmetric noise)");
  inj_cmd->add_option("--scene", inj_scene, "scene directory with frame_TT/mask_TT files (trailing noise)");
  inj_cmd->add_option("--reference-frame", inj_ref, "reference frame of the scene");
  inj_cmd->add_option("--output", inj_out, "noisy OCV1 grid to write")->required();

  std::string ref_in, ref_mask, ref_out;
  CLI::App* ref_cmd = app.add_subcommand("refine", "drop dynamic voxels outside the instance mask");
  add_common(ref_cmd, ref, false);
  ref_cmd->add_option("--input", ref_in, "annotated OCV1 grid")->required()->check(CLI::ExistingFile);
  ref_cmd->add_option("--mask", ref_mask, "instance mask (OCV1 with 0/1 labels)")->required()->check(CLI::ExistingFile);
  ref_cmd->add_option("--output", ref_out, "refined grid to write")->required();

  std::string trn_data;
  CLI::App* trn_cmd = app.add_subcommand("train", "two-stage robust training");
  add_common(trn_cmd, trn);
  trn_cmd->add_option("--data", trn_data, "dataset directory from gen-scenes (default: generate from config)");

  std::string evl_ck, evl_data, evl_format = "both";
  CLI::App* evl_cmd = app.add_subcommand("evaluate", "score a checkpoint on refined evaluation labels");
  add_common(evl_cmd, evl);
  evl_cmd->add_option("--checkpoint", evl_ck, "DPRC checkpoint (default: <out>/checkpoint.dprc)");
  evl_cmd->add_option("--data", evl_data, "dataset directory from gen-scenes");
  evl_cmd->add_option("--format", evl_format, "report format")->check(CLI::IsMember({"csv", "json", "both"}));

  std::vector<std::string> rep_in;
  std::string rep_format = "csv", rep_out;
  CLI::App* rep_cmd = app.add_subcommand("report", "merge metrics.csv files into one report");
  rep_cmd->add_option("inputs", rep_in, "metrics.csv files")->required()->check(CLI::ExistingFile);
  rep_cmd->add_option("--format", rep_format, "output format")->check(CLI::IsMember({"csv", "json"}));
  rep_cmd->add_option("--output", rep_out, "destination (default: stdout)");

  CLI::App* swp_cmd = app.add_subcommand("sweep", "run the cartesian product of the config's sweep.* axes");
  add_common(swp_cmd, swp);

  CLI::App* run_cmd = app.add_subcommand("run", "full pipeline: scenes, noise, training, evaluation");
  add_common(run_cmd, run);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    if (e.get_exit_code() != 0) std::cerr << "\n" << app.help();
    return 2;
  }

  try {
    if (*gen_cmd) return cmd_gen_scenes(gen);
    if (*inj_cmd) return cmd_inject_noise(inj, inj_in, inj_scene, inj_out, inj_ref);
    if (*ref_cmd) return cmd_refine(ref, ref_in, ref_mask, ref_out);
    if (*trn_cmd) return cmd_train(trn, trn_data);
    if (*evl_cmd) return cmd_evaluate(evl, evl_ck, evl_data, evl_format);
    if (*rep_cmd) return cmd_report(rep_in, rep_format, rep_out);
    if (*swp_cmd) return cmd_sweep(swp);
    if (*run_cmd) return cmd_run(run);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const TrainingDiverged& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  std::cerr << app.help();
  return 2;
}
