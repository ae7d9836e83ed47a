#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "occnl/pipeline.hpp"

using namespace occnl;
namespace fs = std::filesystem;

namespace {

const char* kSmall =
    "seed = 9\n"
    "scene.nx = 24\nscene.ny = 24\nscene.nz = 4\nscene.random_objects = 4\n"
    "data.train_scenes = 1\ndata.eval_scenes = 1\ndata.feature_dim = 8\n"
    "train.epochs = 4\ntrain.warmup = 2\ntrain.lr_decay_epoch = 4\n";

ExperimentConfig small(const std::string& extra = "") { return parse_config(std::string(kSmall) + extra); }

fs::path fresh_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("occnl_pipeline_" + name);
  fs::remove_all(d);
  return d;
}

}  // namespace

TEST(Pipeline, WritesEveryArtifact) {
  const fs::path d = fresh_dir("artifacts");
  const auto r = run_pipeline(small("noise.eta = 0.5\n"), d);
  for (const char* f : {"config.resolved", "noise_report.json", "checkpoint.dprc", "history.csv", "losses.jsonl",
                        "diagnostics.jsonl", "metrics.csv", "metrics.json", "scenes/train_000/noisy.ocv",
                        "scenes/train_000/refined.ocv", "scenes/train_000/features.ocf", "scenes/eval_000/refined.ocv",
                        "scenes/eval_000/frame_07.ocv", "scenes/eval_000/mask_07.ocv"}) {
    EXPECT_TRUE(fs::exists(d / f)) << f;
  }
  EXPECT_FALSE(fs::exists(d / "FAILED"));
  EXPECT_EQ(r.row.noise_level, "light");
  EXPECT_EQ(r.row.noise_kind, "asymmetric");
  EXPECT_EQ(r.training.history.size(), 4u);
}

TEST(Pipeline, ByteIdenticalForFixedSeed) {
  const fs::path a = fresh_dir("det_a"), b = fresh_dir("det_b");
  run_pipeline(small("noise.eta = 0.7\n"), a);
  run_pipeline(small("noise.eta = 0.7\n"), b);
  for (const char* f : {"checkpoint.dprc", "history.csv", "losses.jsonl", "metrics.csv", "scenes/train_000/noisy.ocv"}) {
    EXPECT_EQ(io::read_file(a / f), io::read_file(b / f)) << f;
  }
}

TEST(Pipeline, SavedDatasetReloads) {
  const fs::path d = fresh_dir("reload");
  const auto cfg = small("noise.eta = 0.3\n");
  run_pipeline(cfg, d);
  const Dataset loaded = load_dataset(d, cfg.label_space());
  const BuiltData built = build_dataset(cfg);
  ASSERT_EQ(loaded.train.size(), 1u);
  ASSERT_EQ(loaded.eval.size(), 1u);
  EXPECT_EQ(loaded.train[0].noisy_labels, built.dataset.train[0].noisy_labels);
  EXPECT_EQ(loaded.eval[0].refined_gt, built.dataset.eval[0].refined_gt);
  EXPECT_EQ(loaded.train[0].features.values, built.dataset.train[0].features.values);
}

TEST(Pipeline, FailureLeavesMarker) {
  const fs::path d = fresh_dir("failed");
  auto cfg = small();
  struct Poison : RobustLoss {
    std::string name() const override { return "poison"; }
    LossEvaluation evaluate(const LossContext& ctx) const override {
      return {std::nan(""), Matrix(ctx.student.num_voxels(), ctx.student.num_classes())};
    }
  };
  cfg.train.extra_losses.push_back(std::make_shared<Poison>());
  EXPECT_THROW(run_pipeline(cfg, d), TrainingDiverged);
  ASSERT_TRUE(fs::exists(d / "FAILED"));
  EXPECT_NE(io::read_text(d / "FAILED").find("diverged"), std::string::npos);
  run_pipeline(small(), d);
  EXPECT_FALSE(fs::exists(d / "FAILED"));
}

TEST(Pipeline, NoiseTags) {
  EXPECT_EQ(noise_level_tag(small("noise.eta = 0.5\n")), "light");
  EXPECT_EQ(noise_level_tag(small("noise.eta = 0.7\n")), "moderate");
  EXPECT_EQ(noise_level_tag(small("noise.eta = 0.9\n")), "heavy");
  EXPECT_EQ(noise_level_tag(small("noise.eta = 0.3\n")), "eta=0.3");
  const auto t = small("noise.kind = trailing\nnoise.trailing = moderate\n");
  EXPECT_EQ(noise_level_tag(t), "moderate");
  EXPECT_EQ(noise_kind_tag(t), "trailing");
}

TEST(Pipeline, TrailingNoiseTrainsOnAggregateLabels) {
  const auto cfg = small("noise.kind = trailing\nnoise.trailing = severe\n");
  const BuiltData b = build_dataset(cfg);
  const auto& seq = b.train_scenes[0];
  EXPECT_EQ(b.dataset.train[0].noisy_labels, build_trailing_level(seq, TrailingLevel::Severe, cfg.noise.windows));
  EXPECT_EQ(b.dataset.train[0].latent_labels,
            refine_ground_truth(seq.clean_gt, seq.instance_masks[seq.reference_frame], seq.space));
}

TEST(Sweep, ExpandsCartesianProductWithNames) {
  const auto cells = expand_sweep(small("sweep.eta = 0.5,0.9\nsweep.sources = both,teacher\nsweep.losses = none|pll,nl\n"));
  ASSERT_EQ(cells.size(), 8u);
  EXPECT_EQ(cells[0].name, "eta0.5_src-both_loss-none");
  EXPECT_EQ(cells[7].name, "eta0.9_src-teacher_loss-pll+nl");
  EXPECT_FALSE(cells[0].config.train.use_pll);
  EXPECT_TRUE(cells[7].config.train.use_nl);
  EXPECT_FALSE(cells[7].config.train.use_sntd);
  EXPECT_DOUBLE_EQ(cells[7].config.noise.eta, 0.9);
  const auto single = expand_sweep(small("run_id = solo\n"));
  ASSERT_EQ(single.size(), 1u);
  EXPECT_EQ(single[0].name, "solo");
}

TEST(Sweep, FiveKStrategiesGiveFiveHistories) {
  const fs::path root = fresh_dir("sweep_k");
  const auto rows =
      run_sweep(small("noise.eta = 0.5\nsweep.k_strategies = linear,random,fixed-2,fixed-5,fixed-9\n"), root);
  ASSERT_EQ(rows.size(), 5u);
  std::size_t histories = 0;
  for (const auto& e : fs::recursive_directory_iterator(root)) histories += e.path().filename() == "history.csv";
  EXPECT_EQ(histories, 5u);
  EXPECT_TRUE(fs::exists(root / "sweep.csv"));
  std::uint32_t C = 0;
  EXPECT_EQ(parse_csv_report(io::read_text(root / "metrics.csv"), &C).size(), 5u);
  EXPECT_EQ(C, 19u);
  const std::string h = io::read_text(root / "k-fixed-5" / "history.csv");
  EXPECT_NE(h.find("\n3,5,"), std::string::npos) << h;
}

TEST(OutDir, ResolutionOrder) {
  EXPECT_EQ(resolve_out_dir("a", "b"), fs::path("a"));
  EXPECT_EQ(resolve_out_dir("", "b"), fs::path("b"));
  ::setenv("OCCNL_OUT", "/tmp/envout", 1);
  EXPECT_EQ(resolve_out_dir("", ""), fs::path("/tmp/envout"));
  ::unsetenv("OCCNL_OUT");
  EXPECT_EQ(resolve_out_dir("", ""), fs::path("runs"));
}
