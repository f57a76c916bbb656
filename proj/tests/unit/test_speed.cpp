#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <random>

#include "support/enumerate.hpp"
#include "tandem/speed.hpp"

using namespace tandem;

namespace {

TandemConfig micro_config(int vocab, int gamma = 2) {
  TandemConfig c;
  c.primary = {.vocab_size = vocab, .d_model = 8, .n_layers = 2, .n_heads = 2, .d_ff = 16, .max_context = 48};
  c.secondary = {.vocab_size = vocab, .d_model = 4, .n_layers = 2, .n_heads = 1, .d_ff = 8, .max_context = 48};
  c.gamma = gamma;
  return c;
}

// Random models have near-uniform outputs; sharpen both heads so drafts and
// verifier disagree often.
template <typename T>
void sharpen(TandemModel<T>& m, double factor) {
  for (auto& v : m.primary.unembed.value.values()) v *= static_cast<T>(factor);
  for (auto& v : m.secondary.unembed.value.values()) v *= static_cast<T>(factor);
  for (auto& v : m.primary.tok_emb.value.values()) v *= static_cast<T>(factor * 5);
  for (auto& v : m.secondary.tok_emb.value.values()) v *= static_cast<T>(factor * 5);
}

std::vector<int> random_prompt(int len, int vocab, std::mt19937_64& gen) {
  std::uniform_int_distribution<int> u(0, vocab - 1);
  std::vector<int> p(len);
  for (auto& t : p) t = u(gen);
  return p;
}

void check_accounting(const SpeedResult& r) {
  const auto& t = r.trace;
  int drafted = 0, contributed = 0;
  ASSERT_EQ(t.drafted_lengths.size(), static_cast<std::size_t>(t.primary_runs));
  ASSERT_EQ(t.accepted_lengths.size(), t.drafted_lengths.size());
  for (std::size_t i = 0; i < t.drafted_lengths.size(); ++i) {
    drafted += t.drafted_lengths[i];
    EXPECT_LE(t.accepted_lengths[i], t.drafted_lengths[i]);
  }
  EXPECT_EQ(t.secondary_steps, drafted);
  contributed = static_cast<int>(t.provenance.size());
  EXPECT_EQ(t.total_tokens, contributed);
  EXPECT_EQ(static_cast<int>(r.tokens.size()), t.total_tokens);
  const int from_s = static_cast<int>(std::count(t.provenance.begin(), t.provenance.end(), 'S'));
  int accepted = 0;
  for (int a : t.accepted_lengths) accepted += a;
  EXPECT_EQ(from_s, accepted);
  EXPECT_LE(t.total_tokens, drafted + t.primary_runs);
  EXPECT_GE(t.total_tokens, t.primary_runs);
}

}  // namespace

TEST(EstimateSpeedup, Examples) {
  DecodeTrace t;
  t.total_tokens = 60;
  t.primary_runs = 10;
  t.secondary_steps = 70;
  EXPECT_NEAR(estimate_speedup(t, {1.0, 0.05}), 60.0 / 13.5, 1e-12);
  DecodeTrace primary_only;
  primary_only.total_tokens = primary_only.primary_runs = 25;
  EXPECT_DOUBLE_EQ(estimate_speedup(primary_only, {1.0, 0.3}), 1.0);
  DecodeTrace all_accept;
  all_accept.total_tokens = 5;
  all_accept.primary_runs = 1;
  all_accept.secondary_steps = 4;
  EXPECT_DOUBLE_EQ(estimate_speedup(all_accept, {1.0, 0.1}), 5.0 / (1.0 + 0.4));
  EXPECT_THROW(estimate_speedup(DecodeTrace{}, {}), std::invalid_argument);
  EXPECT_THROW(estimate_speedup(t, {1.0, 0.0}), std::invalid_argument);
}

TEST(AcceptDraft, GreedyRules) {
  CounterRng rng(1);
  std::vector<std::vector<double>> q(2, std::vector<double>(3));
  std::vector<std::vector<double>> p{{0, 1, 0}, {0, 0, 1}, {1, 0, 0}};
  std::vector<int> match{1, 2};
  auto d = accept_draft(match, q, p, SamplingMode::Greedy(), rng);
  EXPECT_EQ(d.accepted, 2);
  EXPECT_TRUE(d.all_accepted);
  EXPECT_EQ(d.next_token, 0);
  std::vector<int> miss{0, 2};
  d = accept_draft(miss, q, p, SamplingMode::Greedy(), rng);
  EXPECT_EQ(d.accepted, 0);
  EXPECT_FALSE(d.all_accepted);
  EXPECT_EQ(d.next_token, 1);
  EXPECT_EQ(rng.counter(), 0u);
}

TEST(AcceptDraft, SampledEqualDistributionsAlwaysAccept) {
  std::mt19937_64 gen(2);
  std::uniform_real_distribution<double> u(0.01, 1.0);
  CounterRng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<std::vector<double>> p(4, std::vector<double>(5));
    for (auto& row : p) {
      double s = 0;
      for (auto& v : row) s += v = u(gen);
      for (auto& v : row) v /= s;
    }
    std::vector<std::vector<double>> q(p.begin(), p.begin() + 3);
    std::vector<int> draft{draw_from(q[0], rng), draw_from(q[1], rng), draw_from(q[2], rng)};
    auto d = accept_draft(draft, q, p, SamplingMode::Temperature(1), rng);
    EXPECT_EQ(d.accepted, 3);
  }
}

TEST(AcceptDraft, ResidualDistribution) {
  auto r = residual_distribution(std::vector<double>{0.5, 0.3, 0.2}, std::vector<double>{0.2, 0.6, 0.2});
  EXPECT_NEAR(r[0], 1.0, 1e-15);
  EXPECT_EQ(r[1], 0.0);
  EXPECT_EQ(r[2], 0.0);
  std::vector<double> p{0.4, 0.6};
  EXPECT_EQ(residual_distribution(p, p), p);
}

TEST(DraftBlock, LengthOneAndDeterminism) {
  TandemModel<float> m(micro_config(9), 1);
  std::vector<int> prompt{1, 2, 3};
  auto st = speed_prefill(m, std::span<const int>(prompt));
  CounterRng rng(0);
  auto b = draft_block(m, st, 1, SamplingMode::Greedy(), rng);
  EXPECT_EQ(b.tokens.size(), 1u);
  EXPECT_EQ(st.cache.length(), 3);
  auto st2 = speed_prefill(m, std::span<const int>(prompt));
  auto st3 = speed_prefill(m, std::span<const int>(prompt));
  EXPECT_EQ(draft_block(m, st2, 4, SamplingMode::Greedy(), rng).tokens,
            draft_block(m, st3, 4, SamplingMode::Greedy(), rng).tokens);
  EXPECT_THROW(draft_block(m, st3, 1, SamplingMode::Greedy(), rng), std::logic_error);
  auto st4 = speed_prefill(m, std::span<const int>(prompt));
  EXPECT_THROW(draft_block(m, st4, 46, SamplingMode::Greedy(), rng), std::length_error);
}

TEST(DraftBlock, MatchesTandemGenerateSteps) {
  TandemModel<float> m(micro_config(9, 4), 2);
  sharpen(m, 3);
  std::mt19937_64 gen(4);
  const auto mode = SamplingMode::Temperature(0.9);
  for (int trial = 0; trial < 20; ++trial) {
    auto prompt = random_prompt(2 + trial % 5, 9, gen);
    auto st = speed_prefill(m, std::span<const int>(prompt));
    CounterRng r1(trial), r2(trial);
    auto b = draft_block(m, st, 4, mode, r1);
    auto g = tandem_generate(m, prompt, 4, GenerationMode::REPR_ONLY, mode, r2, {.gamma = 4, .record_logits = true});
    ASSERT_EQ(b.tokens, g.tokens);
    for (int s = 0; s < 4; ++s) {
      EXPECT_EQ(b.dists[s], sampling_distribution<float>(std::span<const float>(g.step_logits[s]), mode));
    }
  }
}

TEST(VerifyBlock, CacheInconsistencyIsAnError) {
  TandemModel<float> m(micro_config(9), 1);
  std::vector<int> prompt{1, 2, 3};
  auto st = speed_prefill(m, std::span<const int>(prompt));
  CounterRng rng(0);
  auto b = draft_block(m, st, 2, SamplingMode::Greedy(), rng);
  st.cache.primary().truncate(1);
  EXPECT_THROW(verify_block(m, st, b, SamplingMode::Greedy(), rng), std::logic_error);
  EXPECT_THROW(verify_block(m, st, DraftBlock{}, SamplingMode::Greedy(), rng), std::invalid_argument);
}

TEST(SpeedGenerate, MinimalRun) {
  TandemModel<float> m(micro_config(9), 1);
  std::vector<int> prompt{4};
  SpeedConfig c;
  c.gamma = 1;
  auto r = speed_generate(m, prompt, 1, c);
  EXPECT_GE(r.tokens.size(), 1u);
  EXPECT_GE(r.trace.primary_runs, 1);
  EXPECT_EQ(r.trace.prefill_runs, 0);
  check_accounting(r);
  EXPECT_THROW(speed_generate(m, std::vector<int>{}, 1, c), std::invalid_argument);
  EXPECT_THROW(speed_generate(m, prompt, 0, c), std::invalid_argument);
}

TEST(SpeedGenerate, GreedyMatchesPrimaryOnly) {
  std::mt19937_64 gen(5);
  for (int seed = 0; seed < 6; ++seed) {
    TandemModel<float> m(micro_config(12), 100 + seed);
    sharpen(m, seed % 2 ? 3.0 : 1.0);
    RouterMLP<float> router(RouterConfig{}.feature_dim(4), 8, seed);
    for (int p = 0; p < 6; ++p) {
      auto prompt = random_prompt(1 + p, 12, gen);
      CounterRng unused(0);
      const auto ref = generate(m.primary, prompt, 20, SamplingMode::Greedy(), unused);
      for (auto mode : {GenerationMode::FREE_TOKEN, GenerationMode::REPR_ONLY}) {
        for (int gamma : {1, 2, 4, 8}) {
          SpeedConfig c;
          c.gamma = gamma;
          c.bookkeeping = mode;
          auto r = speed_generate(m, prompt, 20, c);
          ASSERT_GE(r.tokens.size(), 20u);
          EXPECT_TRUE(std::equal(ref.begin(), ref.end(), r.tokens.begin())) << "gamma " << gamma;
          check_accounting(r);
        }
        SpeedConfig a;
        a.adaptive = true;
        a.router = &router;
        a.router_config.gamma_max = 6;
        a.router_config.tau = 0.5;
        a.bookkeeping = mode;
        auto r = speed_generate(m, prompt, 20, a);
        EXPECT_TRUE(std::equal(ref.begin(), ref.end(), r.tokens.begin())) << "adaptive";
        check_accounting(r);
      }
    }
  }
}

TEST(SpeedGenerate, AllAcceptWhenDrafterIsThePrimary) {
  // Twin models: with a one-token prompt the first draft sees only local rows.
  TandemConfig c = micro_config(9);
  c.secondary = c.primary;
  TandemModel<float> m(c, 3);
  m.secondary.copy_values_from(m.primary);
  for (auto& p : m.projection_parameters()) p->value.zero();
  std::vector<int> prompt{2};
  SpeedConfig sc;
  sc.gamma = 1;
  auto r = speed_generate(m, prompt, 10, sc);
  EXPECT_EQ(r.trace.accepted_lengths[0], 1);
  EXPECT_EQ(r.trace.provenance.substr(0, 2), "SP");
}

TEST(SpeedStandalone, GreedyMatchesPrimaryOnly) {
  std::mt19937_64 gen(15);
  for (int seed = 0; seed < 4; ++seed) {
    TandemModel<float> m(micro_config(12), 300 + seed);
    sharpen(m, 2.0);
    for (int p = 0; p < 5; ++p) {
      auto prompt = random_prompt(1 + 2 * p, 12, gen);
      CounterRng unused(0);
      const auto ref = generate(m.primary, prompt, 24, SamplingMode::Greedy(), unused);
      for (int gamma : {1, 2, 4, 8}) {
        SpeedConfig c;
        c.gamma = gamma;
        auto r = speed_generate_standalone(m.primary, m.secondary, prompt, 24, c);
        ASSERT_GE(r.tokens.size(), 24u);
        EXPECT_TRUE(std::equal(ref.begin(), ref.end(), r.tokens.begin())) << "gamma " << gamma;
        check_accounting(r);
      }
    }
  }
}

TEST(SpeedStandalone, SelfDraftingAcceptsEverything) {
  TandemModel<float> m(micro_config(9), 8);
  sharpen(m, 2.0);
  std::vector<int> prompt{1, 4, 2};
  SpeedConfig c;
  c.gamma = 3;
  auto r = speed_generate_standalone(m.primary, m.primary, prompt, 12, c);
  for (std::size_t i = 0; i < r.trace.accepted_lengths.size(); ++i) EXPECT_EQ(r.trace.accepted_lengths[i], 3);
  EXPECT_EQ(r.trace.provenance.substr(0, 4), "SSSP");
  check_accounting(r);
}

TEST(SpeedStandalone, SampledIsSeedDeterministic) {
  TandemModel<float> m(micro_config(9), 9);
  sharpen(m, 2.0);
  std::vector<int> prompt{3, 1};
  SpeedConfig c;
  c.gamma = 2;
  c.sampling = SamplingMode::Temperature(1.0);
  c.seed = 77;
  auto a = speed_generate_standalone(m.primary, m.secondary, prompt, 16, c);
  auto b = speed_generate_standalone(m.primary, m.secondary, prompt, 16, c);
  EXPECT_EQ(a.tokens, b.tokens);
  check_accounting(a);
}

TEST(SpeedGenerate, TruncatesAtContextWithFlag) {
  TandemModel<float> m(micro_config(9), 4);
  std::vector<int> prompt(40, 1);
  SpeedConfig c;
  c.gamma = 4;
  auto r = speed_generate(m, prompt, 30, c);
  EXPECT_TRUE(r.trace.truncated);
  EXPECT_EQ(static_cast<int>(prompt.size() + r.tokens.size()), 48);
  check_accounting(r);
  EXPECT_THROW(speed_generate(m, std::vector<int>(49, 1), 1, c), std::length_error);
}

TEST(SpeedGenerate, TraceJsonHasCounters) {
  TandemModel<float> m(micro_config(9), 4);
  auto r = speed_generate(m, std::vector<int>{1, 2}, 5, SpeedConfig{});
  const auto j = trace_to_json(r.trace);
  for (const char* key : {"primary_runs", "secondary_steps", "accepted_lengths", "provenance", "total_tokens"}) {
    EXPECT_NE(j.find(key), std::string::npos) << key;
  }
}

TEST(SpeedMulti, SingleSampleMatchesSpeedGenerate) {
  TandemModel<float> m(micro_config(9), 5);
  sharpen(m, 2);
  SpeedConfig c;
  c.sampling = SamplingMode::Temperature(1.0);
  c.seed = 77;
  std::vector<int> prompt{3, 1, 4};
  auto one = speed_generate(m, prompt, 16, c);
  auto multi = speed_generate_multi(m, prompt, 16, c);
  ASSERT_EQ(multi.outputs.size(), 1u);
  EXPECT_EQ(multi.outputs[0], one.tokens);
  EXPECT_EQ(trace_to_json(multi.aggregate), trace_to_json(one.trace));
}

TEST(SpeedMulti, GreedySamplesAgreeAndShareRuns) {
  TandemModel<float> m(micro_config(9), 6);
  sharpen(m, 2);
  SpeedConfig c;
  c.gamma = 3;
  std::vector<int> prompt{5, 5};
  auto one = speed_generate(m, prompt, 18, c);
  c.num_samples = 4;
  auto multi = speed_generate_multi(m, prompt, 18, c);
  for (const auto& o : multi.outputs) EXPECT_EQ(o, one.tokens);
  EXPECT_EQ(multi.aggregate.primary_runs, one.trace.primary_runs);
  EXPECT_EQ(multi.aggregate.secondary_steps, 4 * one.trace.secondary_steps);
}

TEST(SpeedMulti, SampledStreamsDiffer) {
  TandemModel<float> m(micro_config(9), 7);
  sharpen(m, 1.5);
  SpeedConfig c;
  c.gamma = 3;
  c.num_samples = 4;
  c.sampling = SamplingMode::Temperature(1.0);
  int distinct_pairs = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    c.seed = seed;
    auto r = speed_generate_multi(m, std::vector<int>{1}, 24, c);
    for (int i = 0; i < 4; ++i)
      for (int j = i + 1; j < 4; ++j) distinct_pairs += r.outputs[i] != r.outputs[j];
    EXPECT_LE(r.aggregate.primary_runs, [&] {
      int mx = 0;
      for (const auto& t : r.traces) mx = std::max(mx, t.primary_runs);
      return mx;
    }());
  }
  // 30 pairs of 24-token samples; collisions would indicate shared streams.
  EXPECT_GE(distinct_pairs, 28);
}

using tandem::testing::Dist;
using tandem::testing::Enumerator;
using tandem::testing::primary_distribution;
using tandem::testing::tv;

TEST(SpeculativeSampling, EnumeratedDistributionMatchesPrimary) {
  const int V = 5, H = 3;
  const auto sampling = SamplingMode::Temperature(1.0);
  for (int gamma : {1, 2, 3}) {
    for (auto mode : {GenerationMode::FREE_TOKEN, GenerationMode::REPR_ONLY}) {
      TandemModel<double> m(micro_config(V, 2), 40 + gamma);
      sharpen(m, 4);
      const std::vector<int> prompt{1, 3};
      Enumerator e{m, 2, H, gamma, mode, sampling, {}, {}};
      e.run(speed_prefill(m, std::span<const int>(prompt)));
      const auto ref = primary_distribution(m.primary, prompt, H, sampling);
      double total = 0;
      for (const auto& [k, v] : e.out) total += v;
      EXPECT_NEAR(total, 1.0, 1e-12);
      EXPECT_LT(tv(e.out, ref), 1e-9) << "gamma " << gamma;
      // The setting must actually exercise rejections.
      double agree = 0;
      for (const auto& [k, v] : ref) agree = std::max(agree, v);
      EXPECT_LT(agree, 0.9);
    }
  }
}

TEST(SpeculativeSampling, SampledEngineMatchesEnumeration) {
  const int V = 5, H = 3, gamma = 2;
  const auto sampling = SamplingMode::Temperature(1.0);
  TandemModel<double> m(micro_config(V, 2), 42);
  sharpen(m, 4);
  const std::vector<int> prompt{1, 3};
  const auto ref = primary_distribution(m.primary, prompt, H, sampling);
  SpeedConfig c;
  c.gamma = gamma;
  c.sampling = sampling;
  Dist empirical;
  const int N = 40000;
  for (int i = 0; i < N; ++i) {
    c.seed = static_cast<std::uint64_t>(i);
    auto r = speed_generate(m, prompt, H, c);
    empirical[std::vector<int>(r.tokens.begin(), r.tokens.begin() + H)] += 1.0 / N;
  }
  // Expected sampling noise is about 0.02 at this N.
  EXPECT_LT(tv(empirical, ref), 0.04);
}
