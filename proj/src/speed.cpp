#include "tandem/speed.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

#include "json.hpp"

namespace tandem {

void CostModel::validate() const {
  if (!(c_primary > 0) || !(c_secondary > 0)) throw std::invalid_argument("CostModel: costs must be positive");
}

template <typename T>
CostModel CostModel::param_ratio(TandemModel<T>& model) {
  const double s = static_cast<double>(model.secondary.parameters().count_values());
  const double p = static_cast<double>(model.primary.parameters().count_values());
  return {1.0, s / p};
}

void SpeedConfig::validate() const {
  if (num_samples < 1) throw std::invalid_argument("SpeedConfig: num_samples must be >= 1");
  if (adaptive) {
    if (!router) throw std::invalid_argument("SpeedConfig: adaptive mode needs a router");
    router_config.validate();
  } else if (gamma < 1) {
    throw std::invalid_argument("SpeedConfig: gamma must be >= 1");
  }
  if (!sampling.greedy && !(sampling.temperature > 0)) throw std::invalid_argument("SpeedConfig: temperature must be > 0");
  cost.validate();
}

double DecodeTrace::mean_accepted() const {
  if (accepted_lengths.empty()) return 0.0;
  return std::accumulate(accepted_lengths.begin(), accepted_lengths.end(), 0.0) /
         static_cast<double>(accepted_lengths.size());
}

double DecodeTrace::tokens_per_round() const {
  return primary_runs == 0 ? 0.0 : static_cast<double>(total_tokens) / primary_runs;
}

std::string trace_to_json(const DecodeTrace& t, int indent) {
  nlohmann::json j{{"primary_runs", t.primary_runs},
                   {"prefill_runs", t.prefill_runs},
                   {"secondary_steps", t.secondary_steps},
                   {"total_tokens", t.total_tokens},
                   {"drafted_lengths", t.drafted_lengths},
                   {"accepted_lengths", t.accepted_lengths},
                   {"mean_accepted", t.mean_accepted()},
                   {"provenance", t.provenance},
                   {"truncated", t.truncated}};
  return j.dump(indent);
}

double estimate_speedup(const DecodeTrace& trace, const CostModel& cost) {
  cost.validate();
  if (trace.total_tokens <= 0 || trace.primary_runs <= 0) throw std::invalid_argument("estimate_speedup: empty trace");
  return trace.total_tokens * cost.c_primary /
         (trace.primary_runs * cost.c_primary + trace.secondary_steps * cost.c_secondary);
}

template <typename T>
SpeedState<T> speed_prefill(const TandemModel<T>& model, std::span<const int> prompt, bool* ran_primary) {
  if (prompt.empty()) throw std::invalid_argument("speed: empty prompt");
  const auto& cfg = model.config();
  const int cap = std::min(cfg.primary.max_context, cfg.secondary.max_context);
  if (static_cast<int>(prompt.size()) > cap) throw std::length_error("speed: prompt exceeds the context");
  SpeedState<T> state(cfg);
  state.tokens.assign(prompt.begin(), prompt.end());
  state.prompt_len = static_cast<int>(prompt.size());
  const bool run = prompt.size() > 1;
  if (run) commit_primary(model, state.cache, prompt.first(prompt.size() - 1), false);
  if (ran_primary) *ran_primary = run;
  return state;
}

namespace {

template <typename T>
std::vector<double> plain_softmax(std::span<const T> logits) {
  return sampling_distribution<T>(logits, SamplingMode::Temperature(1.0));
}

}  // namespace

template <typename T>
DraftBlock draft_block(const TandemModel<T>& model, SpeedState<T>& state, int length, const SamplingMode& sampling,
                       CounterRng& rng, const AdaptiveDrafting* adaptive) {
  if (length < 1) throw std::invalid_argument("draft_block: length must be >= 1");
  const auto& cfg = model.config();
  const int n = state.length();
  if (n + length - 1 > std::min(cfg.primary.max_context, cfg.secondary.max_context) - 1) {
    throw std::length_error("draft_block: block runs past the context");
  }
  if (state.cache.length() != n - 1) throw std::logic_error("draft_block: cache out of sync with the history");
  DraftBlock block;
  int input = state.tokens.back();
  for (int s = 0; s < length; ++s) {
    const auto logits = state.cache.secondary_step(model, input);
    std::span<const T> lv(logits);
    auto q = sampling_distribution<T>(lv, sampling);
    const int tok = sampling.greedy ? argmax<T>(lv) : draw_from(q, rng);
    block.tokens.push_back(tok);
    block.dists.push_back(std::move(q));
    input = tok;
    if (adaptive) {
      const auto feats = extract_features(std::span<const double>(plain_softmax<T>(lv)), model.secondary.tok_emb.value,
                                          adaptive->config)
                             .flatten();
      const double d = adaptive->router->predict_one(feats);
      block.disagreement.push_back(d);
      if (should_continue(d, s + 1, adaptive->config) == RouterDecision::VERIFY) break;
    }
  }
  return block;
}

std::vector<double> residual_distribution(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw std::invalid_argument("residual_distribution: length mismatch");
  std::vector<double> r(p.size());
  double s = 0;
  for (std::size_t i = 0; i < p.size(); ++i) s += r[i] = std::max(0.0, p[i] - q[i]);
  if (!(s > 0)) return {p.begin(), p.end()};
  for (auto& v : r) v /= s;
  return r;
}

AcceptDecision accept_draft(std::span<const int> draft, const std::vector<std::vector<double>>& q,
                            const std::vector<std::vector<double>>& p, const SamplingMode& sampling, CounterRng& rng) {
  const std::size_t g = draft.size();
  if (g == 0 || q.size() != g || p.size() != g + 1) throw std::invalid_argument("accept_draft: inconsistent block");
  AcceptDecision d;
  auto argmax_p = [&](std::size_t t) { return argmax<double>(p[t]); };
  for (std::size_t t = 0; t < g; ++t) {
    const int x = draft[t];
    if (sampling.greedy) {
      if (x != argmax_p(t)) {
        d.next_token = argmax_p(t);
        return d;
      }
    } else {
      const double ratio = q[t][x] > 0 ? p[t][x] / q[t][x] : 0.0;
      if (!(rng.uniform() < std::min(1.0, ratio))) {
        d.next_token = draw_from(residual_distribution(p[t], q[t]), rng);
        return d;
      }
    }
    ++d.accepted;
  }
  d.all_accepted = true;
  d.next_token = sampling.greedy ? argmax_p(g) : draw_from(p[g], rng);
  return d;
}

template <typename T>
Verification<T> verify_block(const TandemModel<T>& model, SpeedState<T>& state, const DraftBlock& draft,
                             const SamplingMode& sampling, CounterRng& rng) {
  if (draft.tokens.empty()) throw std::invalid_argument("verify_block: empty draft");
  const int n = state.length();
  if (state.cache.primary().length() != n - 1) throw std::logic_error("verify_block: primary cache out of sync");
  std::vector<int> inputs{state.tokens.back()};
  inputs.insert(inputs.end(), draft.tokens.begin(), draft.tokens.end());
  Verification<T> v;
  const Tensor<T> logits = extend(model.primary, state.cache.primary(), inputs, &v.layer_outputs);
  for (std::size_t r = 0; r < logits.rows(); ++r) v.primary_dists.push_back(sampling_distribution<T>(logits.row(r), sampling));
  v.decision = accept_draft(draft.tokens, draft.dists, v.primary_dists, sampling, rng);
  return v;
}

template <typename T>
int commit_block(const TandemModel<T>& model, SpeedState<T>& state, std::span<const int> draft,
                 const AcceptDecision& decision, const std::vector<Tensor<T>>& layer_outputs,
                 GenerationMode bookkeeping) {
  const int n = state.length();
  const int a = decision.accepted;
  if (a < 0 || a > static_cast<int>(draft.size())) throw std::invalid_argument("commit_block: bad accepted length");
  const bool take_next = !(bookkeeping == GenerationMode::REPR_ONLY && decision.all_accepted);
  state.tokens.insert(state.tokens.end(), draft.begin(), draft.begin() + a);
  if (take_next) state.tokens.push_back(decision.next_token);
  const int c = state.length() - n;

  state.cache.primary().truncate(n - 1 + c);
  state.cache.truncate(n - 1);
  std::vector<Tensor<T>> rows;
  rows.reserve(layer_outputs.size());
  for (const auto& o : layer_outputs) {
    Tensor<T> r({static_cast<std::size_t>(c), o.cols()});
    std::copy(o.data(), o.data() + r.size(), r.data());
    rows.push_back(std::move(r));
  }
  state.cache.write_projected(model, n - 1, rows, false);
  return c;
}

template <typename T>
MultiSpeedResult speed_generate_multi(const TandemModel<T>& model, std::span<const int> prompt, int max_tokens,
                                      const SpeedConfig& config) {
  config.validate();
  if (max_tokens < 1) throw std::invalid_argument("speed_generate: max_tokens must be >= 1");
  const auto& cfg = model.config();
  const int cap = std::min(cfg.primary.max_context, cfg.secondary.max_context);
  const int S = config.num_samples;

  bool ran = false;
  SpeedState<T> initial = speed_prefill(model, prompt, &ran);
  std::vector<SpeedState<T>> states(S, initial);
  std::vector<CounterRng> rngs;
  const CounterRng base(config.seed);
  for (int i = 0; i < S; ++i) rngs.push_back(base.split(static_cast<std::uint64_t>(i)));

  MultiSpeedResult res;
  res.traces.resize(S);
  for (auto& t : res.traces) t.prefill_runs = ran ? 1 : 0;
  res.aggregate.prefill_runs = ran ? 1 : 0;
  std::vector<bool> active(S, true);
  AdaptiveDrafting adaptive{config.router, config.router_config};

  for (;;) {
    bool any = false;
    for (int i = 0; i < S; ++i) {
      if (!active[i]) continue;
      auto& st = states[i];
      auto& tr = res.traces[i];
      const int n = st.length();
      if (n - st.prompt_len >= max_tokens) {
        active[i] = false;
        continue;
      }
      const int room = cap - n;
      if (room < 1) {
        tr.truncated = true;
        active[i] = false;
        continue;
      }
      const int len = std::min(config.adaptive ? config.router_config.gamma_max : config.gamma, room);
      const DraftBlock draft =
          draft_block(model, st, len, config.sampling, rngs[i], config.adaptive ? &adaptive : nullptr);
      const auto ver = verify_block(model, st, draft, config.sampling, rngs[i]);
      const int c = commit_block(model, st, draft.tokens, ver.decision, ver.layer_outputs, config.bookkeeping);
      any = true;
      ++tr.primary_runs;
      tr.secondary_steps += static_cast<int>(draft.tokens.size());
      tr.drafted_lengths.push_back(static_cast<int>(draft.tokens.size()));
      tr.accepted_lengths.push_back(ver.decision.accepted);
      tr.total_tokens += c;
      tr.provenance.append(ver.decision.accepted, 'S');
      if (c > ver.decision.accepted) tr.provenance.push_back('P');
    }
    if (!any) break;
    ++res.aggregate.primary_runs;
  }

  for (int i = 0; i < S; ++i) {
    res.outputs.emplace_back(states[i].tokens.begin() + states[i].prompt_len, states[i].tokens.end());
    const auto& t = res.traces[i];
    res.aggregate.secondary_steps += t.secondary_steps;
    res.aggregate.total_tokens += t.total_tokens;
    res.aggregate.truncated = res.aggregate.truncated || t.truncated;
    res.aggregate.drafted_lengths.insert(res.aggregate.drafted_lengths.end(), t.drafted_lengths.begin(),
                                         t.drafted_lengths.end());
    res.aggregate.accepted_lengths.insert(res.aggregate.accepted_lengths.end(), t.accepted_lengths.begin(),
                                          t.accepted_lengths.end());
  }
  if (S == 1) res.aggregate = res.traces[0];
  return res;
}

template <typename T>
SpeedResult speed_generate(const TandemModel<T>& model, std::span<const int> prompt, int max_tokens,
                           const SpeedConfig& config) {
  SpeedConfig one = config;
  one.num_samples = 1;
  auto multi = speed_generate_multi(model, prompt, max_tokens, one);
  return {std::move(multi.outputs[0]), std::move(multi.traces[0])};
}

template <typename T>
SpeedResult speed_generate_standalone(const DecoderModel<T>& primary, const DecoderModel<T>& drafter,
                                      std::span<const int> prompt, int max_tokens, const SpeedConfig& config) {
  config.validate();
  if (config.adaptive) throw std::invalid_argument("speed_generate_standalone: adaptive drafting needs a tandem model");
  if (prompt.empty()) throw std::invalid_argument("speed: empty prompt");
  if (max_tokens < 1) throw std::invalid_argument("speed_generate: max_tokens must be >= 1");
  if (primary.config().vocab_size != drafter.config().vocab_size) {
    throw std::invalid_argument("speed_generate_standalone: vocabularies differ");
  }
  const int cap = std::min(primary.config().max_context, drafter.config().max_context);
  const int P = static_cast<int>(prompt.size());
  if (P > cap) throw std::length_error("speed: prompt exceeds the context");

  KVCache<T> pcache(primary.config()), dcache(drafter.config());
  std::vector<int> tokens(prompt.begin(), prompt.end());
  SpeedResult res;
  if (P > 1) {
    extend(primary, pcache, prompt.first(P - 1), nullptr, false);
    extend(drafter, dcache, prompt.first(P - 1), nullptr, false);
    res.trace.prefill_runs = 1;
  }
  CounterRng rng = CounterRng(config.seed).split(0);
  auto& tr = res.trace;
  while (static_cast<int>(tokens.size()) - P < max_tokens) {
    const int n = static_cast<int>(tokens.size());
    const int len = std::min(config.gamma, cap - n);
    if (len < 1) {
      tr.truncated = true;
      break;
    }
    // Drafter rows cover 0..n-2 here.
    std::vector<int> draft;
    std::vector<std::vector<double>> q;
    int input = tokens.back();
    for (int s = 0; s < len; ++s) {
      const auto logits = decode_step(drafter, dcache, input);
      std::span<const T> lv(logits);
      q.push_back(sampling_distribution<T>(lv, config.sampling));
      input = config.sampling.greedy ? argmax<T>(lv) : draw_from(q.back(), rng);
      draft.push_back(input);
    }
    std::vector<int> inputs{tokens.back()};
    inputs.insert(inputs.end(), draft.begin(), draft.end());
    const Tensor<T> logits = extend(primary, pcache, inputs);
    std::vector<std::vector<double>> p;
    for (std::size_t r = 0; r < logits.rows(); ++r) p.push_back(sampling_distribution<T>(logits.row(r), config.sampling));
    const auto d = accept_draft(draft, q, p, config.sampling, rng);

    tokens.insert(tokens.end(), draft.begin(), draft.begin() + d.accepted);
    const bool take_next = !(config.bookkeeping == GenerationMode::REPR_ONLY && d.all_accepted);
    if (take_next) tokens.push_back(d.next_token);
    const int n2 = static_cast<int>(tokens.size());
    pcache.truncate(n2 - 1);
    dcache.truncate(std::min(dcache.length(), n2 - 1));
    if (dcache.length() < n2 - 1) {
      extend(drafter, dcache, std::span<const int>(tokens).subspan(dcache.length(), n2 - 1 - dcache.length()), nullptr,
             false);
    }

    const int c = n2 - n;
    ++tr.primary_runs;
    tr.secondary_steps += len;
    tr.drafted_lengths.push_back(len);
    tr.accepted_lengths.push_back(d.accepted);
    tr.total_tokens += c;
    tr.provenance.append(d.accepted, 'S');
    if (take_next) tr.provenance.push_back('P');
  }
  res.tokens.assign(tokens.begin() + P, tokens.end());
  return res;
}

#define TANDEM_INSTANTIATE_SPEED(T)                                                                               \
  template CostModel CostModel::param_ratio<T>(TandemModel<T>&);                                                  \
  template SpeedState<T> speed_prefill<T>(const TandemModel<T>&, std::span<const int>, bool*);                    \
  template DraftBlock draft_block<T>(const TandemModel<T>&, SpeedState<T>&, int, const SamplingMode&, CounterRng&, \
                                     const AdaptiveDrafting*);                                                    \
  template Verification<T> verify_block<T>(const TandemModel<T>&, SpeedState<T>&, const DraftBlock&,              \
                                           const SamplingMode&, CounterRng&);                                     \
  template int commit_block<T>(const TandemModel<T>&, SpeedState<T>&, std::span<const int>, const AcceptDecision&, \
                               const std::vector<Tensor<T>>&, GenerationMode);                                    \
  template SpeedResult speed_generate<T>(const TandemModel<T>&, std::span<const int>, int, const SpeedConfig&);   \
  template MultiSpeedResult speed_generate_multi<T>(const TandemModel<T>&, std::span<const int>, int,             \
                                                    const SpeedConfig&);                                          \
  template SpeedResult speed_generate_standalone<T>(const DecoderModel<T>&, const DecoderModel<T>&,              \
                                                    std::span<const int>, int, const SpeedConfig&);

TANDEM_INSTANTIATE_SPEED(float)
TANDEM_INSTANTIATE_SPEED(double)

}  // namespace tandem
