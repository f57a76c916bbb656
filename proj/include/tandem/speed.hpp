#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tandem/router.hpp"
#include "tandem/tandem.hpp"

namespace tandem {

struct CostModel {
  double c_primary = 1.0;
  double c_secondary = 0.05;

  void validate() const;
  /// c_S = secondary parameters / primary parameters.
  template <typename T>
  static CostModel param_ratio(TandemModel<T>& model);
};

struct SpeedConfig {
  int gamma = 4;
  bool adaptive = false;  // router decides, gamma ignored, capped at router_config.gamma_max
  const RouterMLP<float>* router = nullptr;
  RouterConfig router_config{};
  int num_samples = 1;
  SamplingMode sampling = SamplingMode::Greedy();
  std::uint64_t seed = 0;
  /// FREE_TOKEN commits the verifier's lookahead token when every draft is
  /// accepted; REPR_ONLY only uses the run to refresh representations.
  GenerationMode bookkeeping = GenerationMode::FREE_TOKEN;
  CostModel cost{};

  void validate() const;
};

struct DecodeTrace {
  int primary_runs = 0;      // verification rounds (the prompt prefill is counted separately)
  int prefill_runs = 0;
  int secondary_steps = 0;
  int total_tokens = 0;
  std::vector<int> drafted_lengths;
  std::vector<int> accepted_lengths;
  std::string provenance;  // 'S' accepted draft, 'P' verifier token
  bool truncated = false;  // stopped at the context limit

  double mean_accepted() const;
  /// Committed tokens per verification round.
  double tokens_per_round() const;
};

std::string trace_to_json(const DecodeTrace& trace, int indent = -1);

/// tokens * c_P / (primary_runs * c_P + secondary_steps * c_S).
double estimate_speedup(const DecodeTrace& trace, const CostModel& cost);

/// Verified history plus caches. Between rounds the primary cache and the
/// projected secondary rows cover positions 0..n-2 of the n tokens; the last
/// token is the input of the next round.
template <typename T>
struct SpeedState {
  explicit SpeedState(const TandemConfig& config) : cache(config) {}

  std::vector<int> tokens;
  int prompt_len = 0;
  TandemCache<T> cache;

  int length() const { return static_cast<int>(tokens.size()); }
};

/// Primary encodes prompt[0..P-2]; returns whether a primary run happened.
template <typename T>
SpeedState<T> speed_prefill(const TandemModel<T>& model, std::span<const int> prompt, bool* ran_primary = nullptr);

struct AdaptiveDrafting {
  const RouterMLP<float>* router = nullptr;
  RouterConfig config{};
};

struct DraftBlock {
  std::vector<int> tokens;
  std::vector<std::vector<double>> dists;  // distribution each draft was drawn from
  std::vector<double> disagreement;        // router outputs (adaptive only)
};

/// Secondary drafts up to `length` tokens from the current state. With a
/// router, drafting also stops at the first VERIFY decision.
template <typename T>
DraftBlock draft_block(const TandemModel<T>& model, SpeedState<T>& state, int length, const SamplingMode& sampling,
                       CounterRng& rng, const AdaptiveDrafting* adaptive = nullptr);

struct AcceptDecision {
  int accepted = 0;
  int next_token = -1;
  bool all_accepted = false;
};

/// The accept/reject rule on precomputed distributions: greedy prefix match,
/// or min(1, p/q) acceptance with residual resampling. p has one more entry
/// than the draft (the lookahead).
AcceptDecision accept_draft(std::span<const int> draft, const std::vector<std::vector<double>>& q,
                            const std::vector<std::vector<double>>& p, const SamplingMode& sampling, CounterRng& rng);

/// norm(max(0, p - q)); falls back to p when the residual has no mass.
std::vector<double> residual_distribution(std::span<const double> p, std::span<const double> q);

template <typename T>
struct Verification {
  AcceptDecision decision;
  std::vector<std::vector<double>> primary_dists;
  std::vector<Tensor<T>> layer_outputs;  // primary outputs[0..L] for the block rows
};

/// One primary run over [last verified token, draft...].
template <typename T>
Verification<T> verify_block(const TandemModel<T>& model, SpeedState<T>& state, const DraftBlock& draft,
                             const SamplingMode& sampling, CounterRng& rng);

/// Appends the accepted prefix and (unless REPR_ONLY and all accepted) the
/// verifier token, rolls back both caches and refreshes projected rows.
/// Returns the number of committed tokens.
template <typename T>
int commit_block(const TandemModel<T>& model, SpeedState<T>& state, std::span<const int> draft,
                 const AcceptDecision& decision, const std::vector<Tensor<T>>& layer_outputs,
                 GenerationMode bookkeeping);

struct SpeedResult {
  std::vector<int> tokens;  // generated tokens only; may overshoot max_tokens by one block
  DecodeTrace trace;
};

struct MultiSpeedResult {
  std::vector<std::vector<int>> outputs;
  std::vector<DecodeTrace> traces;
  DecodeTrace aggregate;  // primary_runs counts joint rounds
};

template <typename T>
SpeedResult speed_generate(const TandemModel<T>& model, std::span<const int> prompt, int max_tokens,
                           const SpeedConfig& config);

/// num_samples independent responses, sample i drawing from split(i) of the
/// seed stream; all unfinished samples share one primary run per round.
template <typename T>
MultiSpeedResult speed_generate_multi(const TandemModel<T>& model, std::span<const int> prompt, int max_tokens,
                                      const SpeedConfig& config);

/// Baseline speculative decoding with an independent standalone drafter that
/// keeps its own cache. Fixed gamma only; same trace semantics.
template <typename T>
SpeedResult speed_generate_standalone(const DecoderModel<T>& primary, const DecoderModel<T>& drafter,
                                      std::span<const int> prompt, int max_tokens, const SpeedConfig& config);

}  // namespace tandem
