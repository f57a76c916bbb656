#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "support/test_util.hpp"
#include "tandem/training.hpp"

using namespace tandem;
using tandem::testing::random_tensor;

namespace {

// Scalar oracle: -log softmax(z)[t].
double nll(const std::vector<double>& z, int t) {
  double m = z[0];
  for (double v : z) m = std::max(m, v);
  double s = 0;
  for (double v : z) s += std::exp(v - m);
  return -(z[t] - m - std::log(s));
}

std::vector<double> probs(const std::vector<double>& z) {
  double m = z[0];
  for (double v : z) m = std::max(m, v);
  std::vector<double> p(z.size());
  double s = 0;
  for (std::size_t i = 0; i < z.size(); ++i) s += p[i] = std::exp(z[i] - m);
  for (auto& v : p) v /= s;
  return p;
}

std::vector<double> row_of(const Tensor<double>& t, std::size_t r) { return {t.row(r).begin(), t.row(r).end()}; }

}  // namespace

TEST(CeLoss, UniformLogitsGiveLogV) {
  Tensor<double> logits({3, 8}, 0.25);
  std::vector<int> t{0, 5, 7};
  EXPECT_NEAR(ce_loss(logits, t), std::log(8.0), 1e-12);
}

TEST(CeLoss, LargeMarginApproachesZero) {
  Tensor<double> logits({2, 4});
  logits.at(0, 1) = 60;
  logits.at(1, 3) = 60;
  EXPECT_LT(ce_loss(logits, std::vector<int>{1, 3}), 1e-20);
}

TEST(CeLoss, MatchesScalarOracleAndGradient) {
  std::mt19937_64 gen(3);
  auto logits = random_tensor<double>({3, 6}, gen, 2.0);
  std::vector<int> t{4, 0, 2};
  const double oracle = (nll(row_of(logits, 0), 4) + nll(row_of(logits, 1), 0) + nll(row_of(logits, 2), 2)) / 3;
  Tensor<double> d(logits.shape());
  EXPECT_NEAR(ce_loss(logits, t, &d), oracle, 1e-12);
  for (std::size_t i = 0; i < logits.size(); ++i) {
    auto lp = logits, lm = logits;
    lp[i] += 1e-6;
    lm[i] -= 1e-6;
    EXPECT_NEAR(d[i], (ce_loss(lp, t) - ce_loss(lm, t)) / 2e-6, 1e-8);
  }
}

TEST(CeLoss, IgnoredRowsAreSkipped) {
  std::mt19937_64 gen(4);
  auto logits = random_tensor<double>({3, 5}, gen);
  const double full = nll(row_of(logits, 1), 2);
  Tensor<double> d(logits.shape());
  EXPECT_NEAR(ce_loss(logits, std::vector<int>{kIgnoreTarget, 2, kIgnoreTarget}, &d), full, 1e-12);
  for (double v : d.row(0)) EXPECT_EQ(v, 0.0);
}

TEST(CeLoss, RejectsOutOfRangeTargets) {
  Tensor<double> logits({2, 4});
  EXPECT_THROW(ce_loss(logits, std::vector<int>{0, 4}), std::out_of_range);
  EXPECT_THROW(ce_loss(logits, std::vector<int>{0, -3}), std::out_of_range);
  EXPECT_THROW(ce_loss(logits, std::vector<int>{0}), std::invalid_argument);
}

TEST(DistillLoss, EqualsTeacherEntropyAtStudentEqualsTeacher) {
  std::mt19937_64 gen(5);
  auto teacher = random_tensor<double>({4, 7}, gen);
  double entropy = 0;
  for (std::size_t r = 0; r < 4; ++r)
    for (double p : probs(row_of(teacher, r))) entropy -= p * std::log(p);
  entropy /= 4;
  EXPECT_NEAR(distill_loss(teacher, teacher), entropy, 1e-12);
  for (int trial = 0; trial < 20; ++trial) {
    auto student = random_tensor<double>({4, 7}, gen);
    EXPECT_GE(distill_loss(student, teacher), entropy);
  }
}

TEST(DistillLoss, OneHotTeacherReducesToCe) {
  std::mt19937_64 gen(6);
  auto student = random_tensor<double>({3, 5}, gen);
  Tensor<double> teacher({3, 5});
  std::vector<int> t{1, 4, 0};
  for (int r = 0; r < 3; ++r) teacher.at(r, t[r]) = 1000;
  EXPECT_NEAR(distill_loss(student, teacher), ce_loss(student, t), 1e-12);
}

TEST(DistillLoss, MatchesScalarOracleAndGradient) {
  std::mt19937_64 gen(7);
  auto s = random_tensor<double>({2, 5}, gen, 1.5);
  auto t = random_tensor<double>({2, 5}, gen, 1.5);
  double oracle = 0;
  for (std::size_t r = 0; r < 2; ++r) {
    auto pt = probs(row_of(t, r));
    for (int k = 0; k < 5; ++k) oracle += pt[k] * nll(row_of(s, r), k);
  }
  oracle /= 2;
  Tensor<double> d(s.shape());
  EXPECT_NEAR(distill_loss(s, t, &d), oracle, 1e-12);
  for (std::size_t i = 0; i < s.size(); ++i) {
    auto sp = s, sm = s;
    sp[i] += 1e-6;
    sm[i] -= 1e-6;
    EXPECT_NEAR(d[i], (distill_loss(sp, t) - distill_loss(sm, t)) / 2e-6, 1e-8);
  }
}

TEST(DistillLoss, RejectsShapeMismatch) {
  EXPECT_THROW(distill_loss(Tensor<double>({2, 4}), Tensor<double>({2, 5})), std::invalid_argument);
}

TEST(CombinedLoss, Examples) {
  EXPECT_DOUBLE_EQ(combined_loss(2, 4, 0.5), 3);
  EXPECT_DOUBLE_EQ(combined_loss(2, 4, 1.0), 2);
  EXPECT_DOUBLE_EQ(combined_loss(2, 4, 0.0), 4);
  EXPECT_THROW(combined_loss(2, 4, 1.5), std::invalid_argument);
  EXPECT_THROW(combined_loss(2, 4, -0.1), std::invalid_argument);
}

TEST(TrainConfig, Validation) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.steps = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c.steps = 1;
  c.lambda = 1.2;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Variant, NamesRoundTrip) {
  for (auto v : {Variant::STANDALONE, Variant::TANDEM_FROZEN_PRIMARY, Variant::TANDEM_BOTH_LOSS_SECONDARY,
                 Variant::TANDEM_BOTH_LOSS_BOTH, Variant::STANDALONE_DISTIL, Variant::TANDEM_DISTIL,
                 Variant::DEEP_TANDEM, Variant::BLOCK_PARALLEL}) {
    EXPECT_EQ(parse_variant(variant_name(v)), v);
  }
  EXPECT_THROW(parse_variant("bogus"), std::invalid_argument);
}

TEST(Windows, SplitAndSamePositionTargets) {
  std::vector<int> w{1, 2, 3, 4, 5, 6, 7, 8};
  std::vector<int> ids, t;
  split_windows(w, 2, 3, ids, t);
  EXPECT_EQ(ids, (std::vector<int>{1, 2, 3, 5, 6, 7}));
  EXPECT_EQ(t, (std::vector<int>{2, 3, 4, 6, 7, 8}));
  EXPECT_EQ(same_position_targets(ids, 2, 3), (std::vector<int>{-1, 2, 3, -1, 6, 7}));
}

// ---------------------------------------------------------------------------

namespace {

constexpr int kSeq = 16;

DecoderConfig small_cfg() { return {.vocab_size = 258, .d_model = 24, .n_layers = 2, .n_heads = 2, .d_ff = 48, .max_context = 32}; }
DecoderConfig large_cfg() { return {.vocab_size = 258, .d_model = 32, .n_layers = 2, .n_heads = 2, .d_ff = 64, .max_context = 32}; }

// 32 windows of kSeq+1 tokens.
TokenDataset overfit_set() {
  auto stream = pack_documents(synthetic_documents(4000, 11));
  stream.resize(32 * (kSeq + 1));
  return TokenDataset(std::move(stream));
}

TrainConfig base_config(Variant v, std::int64_t steps) {
  TrainConfig c;
  c.variant = v;
  c.steps = steps;
  c.batch_size = 8;
  c.seq_len = kSeq;
  c.lr = {3e-3, 10, steps, 0.1};
  c.data_seed = 5;
  return c;
}

TandemConfig tandem_cfg() { return {large_cfg(), small_cfg(), 4, {}, false}; }

struct Fixture {
  TokenDataset data = overfit_set();
  DecoderModel<float> primary{large_cfg(), "primary.", 1};

  Fixture() {
    TrainModels<float> m;
    m.standalone = &primary;
    train(m, data, base_config(Variant::STANDALONE, 200));
  }
};

Fixture& fixture() {
  static Fixture f;
  return f;
}

double tail_mean(const TrainResult& r, int n = 10) {
  double s = 0;
  for (std::size_t i = r.curve.size() - n; i < r.curve.size(); ++i) s += r.curve[i].loss;
  return s / n;
}

}  // namespace

TEST(Train, FrozenPrimaryIsBitIdenticalAfterOneStep) {
  TandemModel<float> tm(tandem_cfg(), 2);
  const auto before_primary = tm.primary.parameters().export_values();
  const auto before_secondary = tm.secondary.parameters().export_values();
  TrainModels<float> m;
  m.tandem = &tm;
  train(m, fixture().data, base_config(Variant::TANDEM_FROZEN_PRIMARY, 1));
  const auto after = tm.primary.parameters().export_values();
  for (const auto& [name, t] : before_primary) EXPECT_TRUE(t == after.at(name)) << name;
  EXPECT_FALSE(before_secondary.at("secondary.unembed") == tm.secondary.parameters().export_values().at("secondary.unembed"));
}

TEST(Train, DistilPrimaryStaysFrozenAcrossStages) {
  TandemModel<float> tm(tandem_cfg(), 2);
  const auto before = tm.primary.parameters().export_values();
  TrainModels<float> m;
  m.tandem = &tm;
  auto c = base_config(Variant::TANDEM_DISTIL, 12);
  c.stage1_steps = 6;
  train(m, fixture().data, c);
  const auto after = tm.primary.parameters().export_values();
  for (const auto& [name, t] : before) EXPECT_TRUE(t == after.at(name)) << name;
}

TEST(Train, ProjectionGradientsFlowWithFrozenPrimary) {
  TandemModel<float> tm(tandem_cfg(), 2);
  tm.primary.parameters().set_trainable(false);
  auto ps = tm.parameters();
  ps.zero_grad();
  const auto windows = fixture().data.sample_windows(2, kSeq + 1, 1, 0);
  std::vector<int> ids, t;
  split_windows(windows, 2, kSeq, ids, t);
  auto pass = tandem_forward(tm, ids, 2, kSeq, true);
  Tensor<float> d(pass.logits.shape());
  ce_loss(pass.logits, t, &d);
  tandem_backward(tm, pass, d);
  for (auto& p : tm.projection_parameters()) {
    double norm = 0;
    for (float g : p->grad.values()) norm += double(g) * g;
    EXPECT_GT(norm, 0.0) << p->name;
  }
  for (auto& p : tm.primary.parameters()) {
    for (float g : p->grad.values()) ASSERT_EQ(g, 0.0f) << p->name;
  }
}

TEST(Train, StageSwitchHappensExactlyAtBoundary) {
  for (auto v : {Variant::TANDEM_DISTIL, Variant::STANDALONE_DISTIL}) {
    TandemModel<float> tm(tandem_cfg(), 2);
    DecoderModel<float> student(small_cfg(), "", 3);
    TrainModels<float> m;
    m.tandem = &tm;
    m.standalone = &student;
    m.teacher = &fixture().primary;
    auto c = base_config(v, 10);
    c.stage1_steps = 4;
    auto r = train(m, fixture().data, c);
    EXPECT_EQ(r.stage_switch_step, 4);
    for (const auto& rec : r.curve) {
      if (rec.step < 4) {
        EXPECT_EQ(rec.stage, 1);
        EXPECT_EQ(rec.loss_distill, 0.0);
        EXPECT_EQ(rec.loss, rec.loss_ce);
      } else {
        EXPECT_EQ(rec.stage, 2);
        EXPECT_GT(rec.loss_distill, 0.0);
        EXPECT_DOUBLE_EQ(rec.loss, combined_loss(rec.loss_ce, rec.loss_distill, 0.5));
      }
    }
  }
}

TEST(Train, MissingModelsAreErrors) {
  DecoderModel<float> student(small_cfg(), "", 3);
  TrainModels<float> m;
  m.standalone = &student;
  EXPECT_THROW(train(m, fixture().data, base_config(Variant::STANDALONE_DISTIL, 1)), std::invalid_argument);
  EXPECT_THROW(train(m, fixture().data, base_config(Variant::TANDEM_DISTIL, 1)), std::invalid_argument);
  EXPECT_THROW(train(m, fixture().data, base_config(Variant::DEEP_TANDEM, 1)), std::invalid_argument);
}

TEST(Train, LossCurveIsDeterministic) {
  auto run = [] {
    TandemModel<float> tm(tandem_cfg(), 9);
    TrainModels<float> m;
    m.tandem = &tm;
    return train(m, fixture().data, base_config(Variant::TANDEM_BOTH_LOSS_BOTH, 15));
  };
  auto a = run(), b = run();
  ASSERT_EQ(a.curve.size(), b.curve.size());
  for (std::size_t i = 0; i < a.curve.size(); ++i) EXPECT_EQ(a.curve[i].loss, b.curve[i].loss);
}

TEST(Train, WritesLossCsv) {
  const auto path = std::filesystem::temp_directory_path() / "tandem_loss_test.csv";
  write_loss_csv(path, {{0, 2.5, 2.0, 3.0, 2, 0}, {1, 1.5, 1.5, 0.0, 1, 0}});
  std::ifstream in(path);
  std::string header, first;
  std::getline(in, header);
  std::getline(in, first);
  EXPECT_EQ(header, "step,loss,loss_ce,loss_distill");
  EXPECT_EQ(first, "0,2.5,2,3");
  std::filesystem::remove(path);
}

class OverfitTest : public ::testing::TestWithParam<Variant> {};

TEST_P(OverfitTest, HalvesTrainLossIn200Steps) {
  const Variant v = GetParam();
  auto& fx = fixture();
  TandemModel<float> tm(tandem_cfg(), 21);
  tm.primary.copy_values_from(fx.primary);
  DecoderModel<float> student(small_cfg(), "", 22);
  DeepTandemModel<float> deep({large_cfg(), small_cfg(), 4, kBeginOfDraftToken}, 23);
  DecoderModel<float> bp(large_cfg(), "", 24);
  TrainModels<float> m{&student, &tm, &fx.primary, &deep, &bp};
  auto c = base_config(v, 200);
  c.stage1_steps = 50;
  c.block_gamma = 4;
  const auto r = train(m, fx.data, c);
  EXPECT_LT(tail_mean(r), 0.5 * r.curve.front().loss) << variant_name(v);
}

INSTANTIATE_TEST_SUITE_P(AllVariants, OverfitTest,
                         ::testing::Values(Variant::STANDALONE, Variant::TANDEM_FROZEN_PRIMARY,
                                           Variant::TANDEM_BOTH_LOSS_SECONDARY, Variant::TANDEM_BOTH_LOSS_BOTH,
                                           Variant::STANDALONE_DISTIL, Variant::TANDEM_DISTIL,
                                           Variant::DEEP_TANDEM, Variant::BLOCK_PARALLEL),
                         [](const auto& info) {
                           auto n = variant_name(info.param);
                           std::replace(n.begin(), n.end(), '-', '_');
                           return n;
                         });

TEST(FitProjections, SatisfiesRidgeNormalEquations) {
  TandemConfig c;
  c.primary = {.vocab_size = 11, .d_model = 6, .n_layers = 3, .n_heads = 2, .d_ff = 12, .max_context = 16};
  c.secondary = {.vocab_size = 11, .d_model = 4, .n_layers = 2, .n_heads = 1, .d_ff = 8, .max_context = 16};
  TandemModel<double> m(c, 21);
  std::mt19937_64 gen(21);
  std::uniform_int_distribution<int> u(0, 10);
  std::vector<int> stream(200);
  for (auto& t : stream) t = u(gen);
  TokenDataset data(stream);
  const int S = 8, W = 12;
  const double ridge = 0.05;
  fit_projections(m, data, S, W, ridge);

  // Gradient of mean squared error + ridge * |W|^2 vanishes at the fit.
  const auto windows = data.sequential_windows(S, W);
  const auto& map = m.layer_map();
  for (std::size_t j = 0; j < map.size(); ++j) {
    const auto& w = m.proj_w[j].value;
    const auto& b = m.proj_b[j].value;
    Tensor<double> gw({6, 4}, 0.0);
    std::vector<double> gb(4, 0.0);
    double rows = 0;
    for (std::size_t s0 = 0; s0 + S <= windows.size(); s0 += S) {
      std::span<const int> ids(windows.data() + s0, S);
      auto p = decoder_forward(m.primary, ids, 1, S, false);
      auto q = decoder_forward(m.secondary, ids, 1, S, false);
      const auto& x = p.outputs[map[j] + 1];
      const auto& y = q.outputs[j];
      for (int r = 0; r < S; ++r) {
        for (int o = 0; o < 4; ++o) {
          double e = b.data()[o] - y.at(r, o);
          for (int i = 0; i < 6; ++i) e += x.at(r, i) * w.at(i, o);
          for (int i = 0; i < 6; ++i) gw.at(i, o) += x.at(r, i) * e;
          gb[o] += e;
        }
        rows += 1;
      }
    }
    for (int i = 0; i < 6; ++i)
      for (int o = 0; o < 4; ++o) EXPECT_NEAR(gw.at(i, o) / rows + ridge * w.at(i, o), 0.0, 1e-9);
    for (int o = 0; o < 4; ++o) EXPECT_NEAR(gb[o] / rows, 0.0, 1e-9);
  }
  EXPECT_THROW(fit_projections(m, data, S, W, -1.0), std::invalid_argument);
}
