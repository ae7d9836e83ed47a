#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "occnl/learner.hpp"
#include "oracles.hpp"

using namespace occnl;

namespace {

const LabelSpace kSpace = LabelSpace::semantic_kitti();

// Uniform random labels with well separated Gaussian features; `eta` flips
// the training labels uniformly to another class.
Dataset toy_dataset(std::uint64_t seed, double eta, std::uint32_t n = 3000, double separation = 6.0) {
  std::mt19937_64 rng(seed);
  const auto fm = FeatureModel::make({8, separation, 0.5}, kSpace.num_classes(), seed);
  Dataset ds{kSpace, {}, {}};
  for (int s = 0; s < 2; ++s) {
    const VoxelGrid clean = oracle::random_grid(rng, {n, 1, 1}, kSpace.num_classes());
    VoxelGrid noisy = clean;
    std::bernoulli_distribution flip(eta);
    std::uniform_int_distribution<int> shift(1, 19);
    for (auto& l : noisy.labels) {
      if (flip(rng)) l = static_cast<Label>((l + shift(rng)) % 20);
    }
    ds.train.push_back({fm.sample(clean, seed * 10 + s), noisy, clean});
  }
  const VoxelGrid eval = oracle::random_grid(rng, {n, 1, 1}, kSpace.num_classes());
  ds.eval.push_back({fm.sample(eval, seed * 10 + 9), eval});
  return ds;
}

TrainConfig cfg_for(std::uint32_t epochs, std::uint32_t warmup) {
  TrainConfig c;
  c.epochs = epochs;
  c.warmup_epochs = warmup;
  c.lr_decay_epoch = epochs + 1;
  c.k_policy.schedule.warmup_epochs = warmup;
  return c;
}

StudentModel random_model(std::mt19937_64& rng, Architecture a, std::size_t D, std::size_t K, std::size_t H = 6) {
  StudentModel m(a, D, K, H);
  std::normal_distribution<double> n(0.0, 0.5);
  for (double& p : m.params()) p = n(rng);
  return m;
}

FeatureField random_features(std::mt19937_64& rng, std::size_t n, std::size_t D) {
  FeatureField f(n, D);
  std::normal_distribution<double> g;
  for (double& x : f.values) x = g(rng);
  return f;
}

}  // namespace

TEST(Ema, MomentumZeroCopiesStudent) {
  std::mt19937_64 rng(1);
  const StudentModel s = random_model(rng, Architecture::Linear, 3, 4);
  TeacherState t = TeacherState::copy_of(StudentModel(Architecture::Linear, 3, 4), 0.0);
  t = ema_update(s, t);
  EXPECT_TRUE(std::equal(t.model.params().begin(), t.model.params().end(), s.params().begin()));
}

TEST(Ema, MomentumOneFreezesTeacher) {
  std::mt19937_64 rng(2);
  const StudentModel s = random_model(rng, Architecture::Linear, 3, 4);
  const StudentModel t0 = random_model(rng, Architecture::Linear, 3, 4);
  TeacherState t = TeacherState::copy_of(t0, 1.0);
  for (int i = 0; i < 5; ++i) t = ema_update(s, t);
  EXPECT_TRUE(std::equal(t.model.params().begin(), t.model.params().end(), t0.params().begin()));
}

TEST(Ema, SingleStepExample) {
  StudentModel s(Architecture::Linear, 1, 2);
  for (double& p : s.params()) p = 1.0;
  TeacherState t = TeacherState::copy_of(StudentModel(Architecture::Linear, 1, 2), 0.999);
  t = ema_update(s, t);
  for (double p : t.model.params()) EXPECT_NEAR(p, 0.001, 1e-15);
}

TEST(Ema, GeometricTrajectoryAndConvexBound) {
  std::mt19937_64 rng(3);
  const StudentModel s = random_model(rng, Architecture::Mlp, 3, 4);
  const StudentModel t0 = random_model(rng, Architecture::Mlp, 3, 4);
  const double d = 0.9;
  TeacherState t = TeacherState::copy_of(t0, d);
  for (int n = 1; n <= 30; ++n) {
    ema_update_inplace(s, t);
    const double w = std::pow(d, n);
    for (std::size_t i = 0; i < s.params().size(); ++i) {
      const double expect = w * t0.params()[i] + (1.0 - w) * s.params()[i];
      ASSERT_NEAR(t.model.params()[i], expect, 1e-12);
      ASSERT_LE(t.model.params()[i], std::max(t0.params()[i], s.params()[i]) + 1e-15);
      ASSERT_GE(t.model.params()[i], std::min(t0.params()[i], s.params()[i]) - 1e-15);
    }
  }
}

TEST(Ema, ShapeMismatchIsStateError) {
  TeacherState t = TeacherState::copy_of(StudentModel(Architecture::Linear, 3, 4), 0.5);
  EXPECT_THROW(ema_update(StudentModel(Architecture::Linear, 3, 5), t), StateError);
  EXPECT_THROW(TeacherState::copy_of(StudentModel(Architecture::Linear, 3, 4), 1.5), std::invalid_argument);
}

TEST(Prototypes, FirstObservationSeedsThenAccumulates) {
  PrototypeBank bank(3, 2, 0.99, 0.5);
  const Matrix f1(3, 2, std::vector<double>{1, 0, 3, 0, 0, 2});
  const std::vector<Label> a1{1, 1, 2};
  bank = update_prototypes(f1, a1, bank);
  EXPECT_FALSE(bank.present[0]);
  EXPECT_TRUE(bank.present[1]);
  EXPECT_EQ(bank.fused[1], (std::vector<double>{2.0, 0.0}));
  EXPECT_EQ(bank.fused[2], (std::vector<double>{0.0, 2.0}));
  const Matrix f2(1, 2, std::vector<double>{4, 0});
  const std::vector<Label> a2{1};
  bank = update_prototypes(f2, a2, bank);
  EXPECT_NEAR(bank.scene_agnostic[1][0], 2.02, 1e-12);
  EXPECT_NEAR(bank.fused[1][0], 3.01, 1e-12);
  EXPECT_EQ(bank.fused[2], (std::vector<double>{0.0, 2.0}));  // unseen this time
}

TEST(Prototypes, RejectsMismatchedInputs) {
  PrototypeBank bank(3, 2);
  const std::vector<Label> a{0};
  EXPECT_THROW(update_prototypes(Matrix(2, 2), a, bank), std::invalid_argument);
  EXPECT_THROW(update_prototypes(Matrix(1, 3), a, bank), std::invalid_argument);
  const std::vector<Label> out_of_range{3};
  EXPECT_THROW(update_prototypes(Matrix(1, 2), out_of_range, bank), std::invalid_argument);
}

TEST(Predict, ZeroModelPredictsEmptyAndMatchesArgmaxOracle) {
  std::mt19937_64 rng(4);
  const FeatureField x = random_features(rng, 50, 5);
  const VoxelGrid zero = predict(StudentModel(Architecture::Linear, 5, 20), x, {50, 1, 1});
  for (Label l : zero.labels) EXPECT_EQ(l, 0);
  for (auto arch : {Architecture::Linear, Architecture::Mlp}) {
    const StudentModel m = random_model(rng, arch, 5, 20);
    const VoxelGrid p = predict(m, x, {5, 10, 1});
    const auto z = m.forward(x);
    for (std::size_t v = 0; v < 50; ++v) {
      const std::vector<double> row(z.logits.row(v).begin(), z.logits.row(v).end());
      EXPECT_EQ(p.labels[v], oracle::argmax(row));
    }
  }
  EXPECT_THROW(predict(StudentModel(Architecture::Linear, 5, 20), x, {7, 1, 1}), std::invalid_argument);
}

TEST(StudentModel, BackwardMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  const FeatureField x = random_features(rng, 7, 4);
  const Matrix dz = oracle::random_matrix(rng, 7, 5);
  for (auto arch : {Architecture::Linear, Architecture::Mlp}) {
    StudentModel m = random_model(rng, arch, 4, 5, 3);
    const auto objective = [&](const StudentModel& mm) {
      const auto z = mm.forward(x);
      double s = 0.0;
      for (std::size_t i = 0; i < dz.data.size(); ++i) s += dz.data[i] * z.logits.data[i];
      return s;
    };
    Matrix h;
    m.forward(x, &h);
    const auto g = m.backward(x, h, dz);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double p = m.params()[i];
      m.params()[i] = p + 1e-5;
      const double up = objective(m);
      m.params()[i] = p - 1e-5;
      const double down = objective(m);
      m.params()[i] = p;
      ASSERT_NEAR(g[i], (up - down) / 2e-5, 1e-6 * std::max(1.0, std::abs(g[i])));
    }
    const auto g2 = m.backward(x, h, dz, 3);
    for (std::size_t i = 0; i < g.size(); ++i) ASSERT_NEAR(g[i], g2[i], 1e-12);
  }
}

TEST(Train, CleanSeparableDataIsLearned) {
  const Dataset ds = toy_dataset(1, 0.0);
  auto c = cfg_for(40, 40);
  const auto r = train(ds, c);
  std::size_t correct = 0, total = 0;
  for (const auto& s : ds.train) {
    const VoxelGrid p = predict(r.student, s.features, s.noisy_labels.dims);
    for (std::size_t v = 0; v < p.size(); ++v) correct += p.labels[v] == s.latent_labels.labels[v];
    total += p.size();
  }
  EXPECT_GE(static_cast<double>(correct) / static_cast<double>(total), 0.99);
}

TEST(Train, KColumnFollowsScheduleAndWarmupHasNoDiagnostics) {
  const Dataset ds = toy_dataset(2, 0.3, 400);
  const auto r = train(ds, cfg_for(20, 12));
  ASSERT_EQ(r.history.size(), 20u);
  std::vector<std::uint32_t> ks;
  for (const auto& h : r.history) {
    if (h.epoch <= 12) {
      EXPECT_FALSE(h.k.has_value());
      EXPECT_FALSE(h.hit_rate.has_value());
      EXPECT_EQ(h.pll, 0.0);
      EXPECT_EQ(h.sntd, 0.0);
    } else {
      ks.push_back(*h.k);
      EXPECT_TRUE(h.hit_rate.has_value());
    }
  }
  EXPECT_EQ(ks, (std::vector<std::uint32_t>{9, 7, 5, 3, 2, 2, 2, 2}));
}

TEST(Train, RobustWorkOnlyAfterWarmup) {
  const Dataset ds = toy_dataset(3, 0.3, 300);
  const auto r = train(ds, cfg_for(6, 3));
  for (std::size_t e = 0; e < 6; ++e) {
    const bool robust = e >= 3;
    EXPECT_EQ(r.instrumentation.k_evaluations[e], robust ? 1u : 0u);
    EXPECT_EQ(r.instrumentation.candidate_builds[e], robust ? 2u : 0u);
    EXPECT_EQ(r.instrumentation.robust_loss_evaluations[e], robust ? 2u : 0u);
  }
  const auto pure = train(ds, cfg_for(4, 4));
  for (const auto& h : pure.history) EXPECT_FALSE(h.hit_rate.has_value());
  for (auto n : pure.instrumentation.candidate_builds) EXPECT_EQ(n, 0u);
}

TEST(Train, DeterministicForFixedSeed) {
  const Dataset ds = toy_dataset(4, 0.5, 500);
  auto c = cfg_for(5, 2);
  c.minibatch = 128;
  c.k_policy = KPolicy::parse("random", c.k_policy.schedule);
  const auto a = train(ds, c), b = train(ds, c);
  EXPECT_TRUE(std::equal(a.student.params().begin(), a.student.params().end(), b.student.params().begin()));
  for (std::size_t e = 0; e < a.history.size(); ++e) {
    EXPECT_EQ(a.history[e].total, b.history[e].total);
    EXPECT_EQ(a.history[e].k, b.history[e].k);
  }
  c.seed = 1;
  const auto d = train(ds, c);
  EXPECT_FALSE(std::equal(a.student.params().begin(), a.student.params().end(), d.student.params().begin()));
}

TEST(Train, ClampsOversizedKWithWarning) {
  const Dataset ds = toy_dataset(5, 0.2, 200);
  auto c = cfg_for(3, 1);
  c.k_policy = KPolicy::parse("fixed-25", c.k_policy.schedule);
  const auto r = train(ds, c);
  EXPECT_EQ(*r.history[1].k, 20u);
  EXPECT_FALSE(r.warnings.empty());
}

TEST(Train, NonFiniteLossRaisesWithSnapshot) {
  struct Poison : RobustLoss {
    std::string name() const override { return "poison"; }
    LossEvaluation evaluate(const LossContext& ctx) const override {
      return {std::numeric_limits<double>::quiet_NaN(), Matrix(ctx.student.num_voxels(), ctx.student.num_classes())};
    }
  };
  const Dataset ds = toy_dataset(6, 0.2, 200);
  auto c = cfg_for(4, 2);
  c.extra_losses.push_back(std::make_shared<Poison>());
  try {
    train(ds, c);
    FAIL() << "expected divergence";
  } catch (const TrainingDiverged& e) {
    EXPECT_EQ(e.snapshot().epoch, 3u);
    EXPECT_EQ(e.snapshot().student_params.size(), StudentModel(Architecture::Linear, 8, 20).param_count());
  }
}

TEST(Train, MlpAndSingleSourceRunsFinish) {
  const Dataset ds = toy_dataset(7, 0.3, 300);
  auto c = cfg_for(4, 2);
  c.architecture = Architecture::Mlp;
  c.hidden = 8;
  c.sources = CandidateSources::Prototype;
  const auto r = train(ds, c);
  EXPECT_EQ(r.prototypes.dim, 8u);
  ASSERT_TRUE(r.history.back().hit_rate_union.has_value());
  EXPECT_GE(*r.history.back().hit_rate_union, *r.history.back().hit_rate_prototype - 1e-12);
  EXPECT_DOUBLE_EQ(*r.history.back().hit_rate, *r.history.back().hit_rate_prototype);
}

TEST(Train, ValidatesConfig) {
  const Dataset ds = toy_dataset(8, 0.0, 50);
  auto c = cfg_for(4, 5);
  EXPECT_THROW(train(ds, c), std::invalid_argument);
  c = cfg_for(4, 2);
  c.k_policy.schedule.warmup_epochs = 3;
  EXPECT_THROW(train(ds, c), std::invalid_argument);
  EXPECT_THROW(train(Dataset{kSpace, {}, {}}, cfg_for(4, 2)), std::invalid_argument);
}
