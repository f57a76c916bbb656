#include "selfcheck.hpp"

#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "tandem/checkpoint.hpp"
#include "tandem/data.hpp"
#include "tandem/speed.hpp"

namespace tandem::tools {

namespace {

TandemConfig micro(int gamma) {
  TandemConfig c;
  c.primary = {.vocab_size = 11, .d_model = 8, .n_layers = 3, .n_heads = 2, .d_ff = 16, .max_context = 48};
  c.secondary = {.vocab_size = 11, .d_model = 4, .n_layers = 2, .n_heads = 1, .d_ff = 8, .max_context = 48};
  c.gamma = gamma;
  return c;
}

std::vector<int> random_tokens(int n, std::mt19937_64& gen) {
  std::uniform_int_distribution<int> u(0, 10);
  std::vector<int> t(n);
  for (auto& x : t) x = u(gen);
  return t;
}

bool first_block_equivalence(std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  for (int gamma : {1, 2, 4}) {
    for (int trial = 0; trial < 10; ++trial) {
      TandemModel<float> m(micro(gamma), gen());
      auto t = random_tokens(gamma, gen);
      if (!(tandem_forward_teacher(m, t) == forward_full(m.secondary, t))) return false;
    }
  }
  return true;
}

bool cache_parity(std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  for (int gamma : {1, 2, 4, 8}) {
    for (auto mode : {GenerationMode::FREE_TOKEN, GenerationMode::REPR_ONLY}) {
      TandemModel<float> m(micro(gamma), gen());
      auto prompt = random_tokens(3, gen);
      CounterRng rng(gen());
      auto g = tandem_generate(m, prompt, 20, mode, SamplingMode::Temperature(1.0), rng, {.record_logits = true});
      std::vector<int> seq = prompt;
      seq.insert(seq.end(), g.tokens.begin(), g.tokens.end());
      auto f = generation_frontiers(3, static_cast<int>(seq.size()), gamma, mode);
      auto teacher = tandem_forward_teacher(m, seq, f);
      for (std::size_t s = 0; s < g.step_positions.size(); ++s)
        for (int c = 0; c < 11; ++c)
          if (std::abs(g.step_logits[s][c] - teacher.at(g.step_positions[s], c)) > 1e-5) return false;
    }
  }
  return true;
}

bool speed_greedy_equivalence(std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  for (int trial = 0; trial < 6; ++trial) {
    TandemModel<float> m(micro(2), gen());
    for (auto& v : m.primary.unembed.value.values()) v *= 3.0f;
    RouterMLP<float> router(RouterConfig{}.feature_dim(4), 8, gen());
    auto prompt = random_tokens(1 + trial, gen);
    CounterRng unused(0);
    const auto ref = generate(m.primary, prompt, 16, SamplingMode::Greedy(), unused);
    std::vector<SpeedConfig> configs;
    for (int gamma : {1, 2, 4, 8}) {
      SpeedConfig c;
      c.gamma = gamma;
      configs.push_back(c);
    }
    SpeedConfig a;
    a.adaptive = true;
    a.router = &router;
    a.router_config.gamma_max = 6;
    configs.push_back(a);
    for (const auto& c : configs) {
      auto r = speed_generate(m, prompt, 16, c);
      if (r.tokens.size() < ref.size() || !std::equal(ref.begin(), ref.end(), r.tokens.begin())) return false;
    }
  }
  return true;
}

bool checkpoint_round_trip(std::uint64_t seed) {
  const auto path = std::filesystem::temp_directory_path() / ("tandem_selfcheck_" + std::to_string(seed) + ".bin");
  TandemModel<float> m(micro(2), seed);
  const auto bundle = bundle_tandem(m);
  save_checkpoint(bundle, path);
  const bool same = load_checkpoint(path) == bundle;
  std::filesystem::remove(path);
  return same;
}

bool tokenizer_round_trip(std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::uniform_int_distribution<int> byte(0, 255), len(0, 64);
  for (int i = 0; i < 200; ++i) {
    std::string s(len(gen), '\0');
    for (auto& ch : s) ch = static_cast<char>(byte(gen));
    if (detokenize(tokenize(s)) != s) return false;
  }
  return true;
}

}  // namespace

int run_selfcheck(std::ostream& out, std::uint64_t seed) {
  const std::vector<std::pair<std::string, std::function<bool(std::uint64_t)>>> checks{
      {"first-block equivalence", first_block_equivalence},
      {"cache parity", cache_parity},
      {"speed greedy equivalence", speed_greedy_equivalence},
      {"checkpoint round trip", checkpoint_round_trip},
      {"tokenizer round trip", tokenizer_round_trip},
  };
  int failures = 0;
  for (const auto& [name, check] : checks) {
    bool ok = false;
    try {
      ok = check(seed);
    } catch (const std::exception& e) {
      out << "  error: " << e.what() << '\n';
    }
    out << (ok ? "PASS " : "FAIL ") << name << '\n';
    failures += ok ? 0 : 1;
  }
  return failures;
}

}  // namespace tandem::tools
