#include <gtest/gtest.h>

#include <set>
#include <sstream>

#include "occnl/config.hpp"

using namespace occnl;

namespace {

std::string key_of(const std::string& text) {
  try {
    parse_config(text);
  } catch (const ConfigError& e) {
    return e.key();
  }
  return "";
}

}  // namespace

TEST(Config, MinimalFileUsesDefaults) {
  const auto c = parse_config("seed = 3\n");
  EXPECT_EQ(c.seed, 3u);
  EXPECT_EQ(c.scene.dims, (Dims{64, 64, 8}));
  EXPECT_EQ(c.scene.num_frames, 15u);
  EXPECT_EQ(c.scene.reference_frame, 7u);
  EXPECT_EQ(c.train.epochs, 20u);
  EXPECT_EQ(c.train.warmup_epochs, 12u);
  EXPECT_EQ(c.train.k_policy.schedule.k_start, 9u);
  EXPECT_EQ(c.train.k_policy.schedule.k_end, 2u);
  EXPECT_EQ(c.train.k_policy.schedule.gamma, 2u);
  EXPECT_DOUBLE_EQ(c.train.sntd.tau_s, 3.0);
  EXPECT_DOUBLE_EQ(c.train.ema_momentum, 0.999);
  EXPECT_DOUBLE_EQ(c.train.proto_momentum, 0.99);
  EXPECT_TRUE(c.train.use_pll && c.train.use_nl && c.train.use_sntd);
  EXPECT_EQ(c.label_space().num_semantic(), 19u);
}

TEST(Config, CommentsWhitespaceAndOverrides) {
  const auto c = parse_config(
      "# experiment\n"
      "  seed=11  \n"
      "\n"
      "noise.eta = 0.7\n"
      "train.warmup = 4\n"
      "train.epochs = 6\n"
      "train.k_strategy = fixed-3\n"
      "train.losses = pll,sntd\n"
      "train.sources = teacher\n");
  EXPECT_DOUBLE_EQ(c.noise.eta, 0.7);
  EXPECT_EQ(c.train.k_policy.strategy, KStrategy::Fixed);
  EXPECT_EQ(c.train.k_policy.schedule.warmup_epochs, 4u);
  EXPECT_TRUE(c.train.use_pll);
  EXPECT_FALSE(c.train.use_nl);
  EXPECT_TRUE(c.train.use_sntd);
  EXPECT_EQ(c.train.sources, CandidateSources::Teacher);
}

TEST(Config, ErrorsNameTheOffendingKey) {
  EXPECT_EQ(key_of("noise.eta = 0.5\n"), "seed");
  EXPECT_EQ(key_of("seed = 1\nbogus.key = 2\n"), "bogus.key");
  EXPECT_EQ(key_of("seed = 1\nseed = 2\n"), "seed");
  EXPECT_EQ(key_of("seed = 1\nnoise.eta = 1.5\n"), "noise.eta");
  EXPECT_EQ(key_of("seed = 1\nnoise.eta = abc\n"), "noise.eta");
  EXPECT_EQ(key_of("seed = 1\ntrain.warmup = 30\n"), "train.warmup");
  EXPECT_EQ(key_of("seed = 1\ntrain.k_strategy = cosine\n"), "train.k_strategy");
  EXPECT_EQ(key_of("seed = 1\ntrain.k_end = 10\n"), "train.k_end");
  EXPECT_EQ(key_of("seed = 1\nnoise.kind = trailing\nnoise.future_frames = 9\n"), "noise.future_frames");
  EXPECT_EQ(key_of("seed = 1\nsweep.eta = 0.5\nsweep.trailing = mild\n"), "sweep.trailing");
  EXPECT_EQ(key_of("seed = 1\ntrain.include_noisy_label = maybe\n"), "train.include_noisy_label");
  EXPECT_THROW(parse_config("seed = 1\njust a line\n"), ConfigError);
}

TEST(Config, CustomLabelSpace) {
  const auto c = parse_config("seed = 1\nlabels.preset = custom\nlabels.num_semantic = 5\nlabels.dynamic = 1,2\n"
                              "scene.random_objects = 3\n");
  EXPECT_EQ(c.label_space().num_classes(), 6u);
  EXPECT_EQ(c.scene.space.dynamic_classes(), (std::vector<Label>{1, 2}));
  EXPECT_EQ(key_of("seed = 1\nlabels.preset = custom\nlabels.num_semantic = 5\nlabels.dynamic = 7\n"),
            "labels.num_semantic");
}

TEST(Config, ObjectsParse) {
  const auto c = parse_config("scene.objects = 1 3 2 1 1 0 0 4 5 1; 4 2 2 2 0 0 0 10 10 1\nseed = 2\n");
  ASSERT_EQ(c.scene.objects.size(), 2u);
  EXPECT_EQ(c.scene.objects[0].extent, (std::array<std::uint32_t, 3>{3, 2, 1}));
  EXPECT_EQ(c.scene.objects[0].velocity, (std::array<std::int64_t, 3>{1, 0, 0}));
  EXPECT_EQ(c.scene.objects[1].spawn, (Coord{10, 10, 1}));
  EXPECT_EQ(c.scene.objects[1].spawn_frame, 7);
  EXPECT_EQ(key_of("seed = 1\nscene.objects = 1 2 3\n"), "scene.objects");
}

TEST(Config, ResolvedConfigRoundTrips) {
  const auto c = parse_config(
      "seed = 5\nrun_id = abc\nnoise.kind = trailing\nnoise.trailing = severe\ntrain.arch = mlp\n"
      "train.hidden = 12\nscene.objects = 1 3 2 1 1 0 0 4 5 1\nsweep.losses = none|pll,nl\n"
      "sweep.k_strategies = linear,fixed-2\neval.convention = zero\ndata.feature_separation = 2.5\n");
  const std::string text = resolved_config(c);
  const auto again = parse_config(text);
  EXPECT_EQ(resolved_config(again), text);
  EXPECT_EQ(again.noise.level, TrailingLevel::Severe);
  EXPECT_EQ(again.train.architecture, Architecture::Mlp);
  EXPECT_EQ(again.sweep.losses, (std::vector<std::string>{"none", "pll,nl"}));
  EXPECT_EQ(again.convention, MiouConvention::AbsentAsZero);
  EXPECT_NE(text.find("seed = 5\n"), std::string::npos);
}

TEST(Config, EveryKeyListedOnce) {
  const std::string text = resolved_config(parse_config("seed = 1\n"));
  std::set<std::string> keys;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const auto key = line.substr(0, line.find(" = "));
    EXPECT_TRUE(keys.insert(key).second) << key;
  }
  for (const char* k : {"seed", "noise.eta", "train.k_gamma", "train.tau", "sweep.sources", "eval.convention"}) {
    EXPECT_TRUE(keys.count(k)) << k;
  }
}

TEST(Config, LoadMissingFileIsIoError) {
  EXPECT_THROW(load_config("/nonexistent/occnl.cfg"), IoError);
}
