#include "tandem/tandem.hpp"

#include <algorithm>
#include <stdexcept>

namespace tandem {

void TandemConfig::validate() const {
  primary.validate();
  secondary.validate();
  if (gamma < 1) throw std::invalid_argument("tandem config: gamma must be >= 1");
  if (primary.vocab_size != secondary.vocab_size) throw std::invalid_argument("tandem config: vocab sizes differ");
  const auto map = resolved_layer_map();
  if (static_cast<int>(map.size()) != secondary.n_layers) {
    throw std::invalid_argument("tandem config: layer_map needs one entry per secondary layer");
  }
  for (std::size_t j = 0; j < map.size(); ++j) {
    if (map[j] < 0 || map[j] >= primary.n_layers) throw std::invalid_argument("tandem config: layer_map entry out of range");
    if (j > 0 && map[j] < map[j - 1]) throw std::invalid_argument("tandem config: layer_map must be non-decreasing");
  }
}

std::vector<int> TandemConfig::resolved_layer_map() const {
  if (!layer_map.empty()) return layer_map;
  return default_layer_map(secondary.n_layers, primary.n_layers);
}

int block_boundary(int i, int gamma) {
  if (i < 0 || gamma < 1) throw std::invalid_argument("block_boundary: need i >= 0 and gamma >= 1");
  return (i / gamma) * gamma;
}

std::vector<int> default_layer_map(int n_secondary, int n_primary) {
  if (n_secondary < 1 || n_primary < 1) throw std::invalid_argument("default_layer_map: layer counts must be positive");
  if (n_secondary > n_primary) throw std::invalid_argument("default_layer_map: secondary deeper than primary");
  std::vector<int> map(n_secondary);
  for (int j = 0; j < n_secondary; ++j) map[j] = ((j + 1) * n_primary + n_secondary - 1) / n_secondary - 1;
  return map;
}

std::vector<int> block_frontiers(int seq_len, int gamma) {
  std::vector<int> f(seq_len);
  for (int i = 0; i < seq_len; ++i) f[i] = block_boundary(i, gamma);
  return f;
}

std::vector<int> generation_frontiers(int prompt_len, int seq_len, int gamma, GenerationMode mode) {
  if (prompt_len < 1 || gamma < 1) throw std::invalid_argument("generation_frontiers: bad prompt length or gamma");
  std::vector<int> f(seq_len);
  for (int i = 0; i < seq_len; ++i) {
    f[i] = i;
    if (mode == GenerationMode::REPR_ONLY) {
      const int start = prompt_len - 1;
      if (i >= start) f[i] = start + ((i - start) / gamma) * gamma;
    } else if (i >= prompt_len) {
      const int a = prompt_len + ((i - prompt_len) / (gamma + 1)) * (gamma + 1);
      if (i - a < gamma) f[i] = a;
    }
  }
  return f;
}

// ---------------------------------------------------------------------------

template <typename T>
TandemModel<T>::TandemModel(TandemConfig config, std::uint64_t seed)
    : primary(config.primary, "primary.", seed * 3 + 1),
      secondary(config.secondary, "secondary.", seed * 3 + 2),
      config_(std::move(config)) {
  config_.validate();
  layer_map_ = config_.resolved_layer_map();
  std::mt19937_64 gen(seed * 3 + 3);
  const auto dl = static_cast<std::size_t>(config_.primary.d_model);
  const auto ds = static_cast<std::size_t>(config_.secondary.d_model);
  proj_w.reserve(layer_map_.size());
  proj_b.reserve(layer_map_.size());
  for (std::size_t j = 0; j < layer_map_.size(); ++j) {
    proj_w.emplace_back("proj" + std::to_string(j) + ".w", Shape{dl, ds});
    proj_b.emplace_back("proj" + std::to_string(j) + ".b", Shape{ds});
    init_normal(proj_w.back().value, 1.0 / std::sqrt(static_cast<double>(dl)), gen);
  }
}

template <typename T>
ParameterSet<T> TandemModel<T>::parameters() {
  ParameterSet<T> set = primary.parameters();
  set.append(secondary.parameters());
  set.append(projection_parameters());
  return set;
}

template <typename T>
ParameterSet<T> TandemModel<T>::projection_parameters() {
  ParameterSet<T> set;
  for (std::size_t j = 0; j < proj_w.size(); ++j) {
    set.add(proj_w[j]);
    set.add(proj_b[j]);
  }
  return set;
}

// ---------------------------------------------------------------------------

namespace {

template <typename T>
Tensor<T> project(const TandemModel<T>& model, int j, const Tensor<T>& primary_out) {
  return linear_forward(primary_out, model.proj_w[j].value, &model.proj_b[j].value);
}

template <typename T>
bool any_trainable(DecoderModel<T>& m) {
  for (auto* p : m.parameters())
    if (p->trainable) return true;
  return false;
}

}  // namespace

template <typename T>
TandemPass<T> tandem_forward(const TandemModel<T>& model, std::span<const int> ids, int batch, int seq,
                             bool keep_trace, std::span<const int> frontier) {
  const auto& cfg = model.config();
  if (seq > cfg.primary.max_context || seq > cfg.secondary.max_context) {
    throw std::length_error("tandem_forward: sequence longer than max_context");
  }
  TandemPass<T> pass;
  pass.ids.assign(ids.begin(), ids.end());
  pass.batch = batch;
  pass.seq = seq;
  pass.primary = decoder_forward(model.primary, ids, batch, seq, keep_trace);

  const auto& map = model.layer_map();
  pass.projected.reserve(map.size());
  for (std::size_t j = 0; j < map.size(); ++j) {
    pass.projected.push_back(project(model, static_cast<int>(j), pass.primary.outputs[map[j] + 1]));
  }
  std::vector<const Tensor<T>*> ext;
  for (auto& p : pass.projected) ext.push_back(&p);

  const std::vector<int> f = frontier.empty() ? block_frontiers(seq, cfg.gamma)
                                              : std::vector<int>(frontier.begin(), frontier.end());
  if (static_cast<int>(f.size()) != seq) throw std::invalid_argument("tandem_forward: frontier length mismatch");
  const AttentionMask mask = AttentionMask::frontier(f);
  Tensor<T> y0 = embed_tokens(model.secondary, ids, seq);
  auto outputs = run_layers(model.secondary, std::move(y0), batch, mask, std::span<const Tensor<T>* const>(ext),
                            keep_trace ? &pass.stack : nullptr);
  pass.logits = head_forward(model.secondary, outputs.back(), keep_trace ? &pass.head : nullptr);
  if (!keep_trace) pass.projected.clear();
  return pass;
}

template <typename T>
void tandem_backward(TandemModel<T>& model, const TandemPass<T>& pass, const Tensor<T>& dlogits_secondary,
                     const Tensor<T>* dlogits_primary) {
  if (pass.stack.layers.empty()) throw std::logic_error("tandem_backward called before a traced forward");
  const int LS = model.secondary.config().n_layers;
  const int LL = model.primary.config().n_layers;
  std::vector<Tensor<T>> d_sec(LS + 1);
  d_sec[LS] = head_backward(model.secondary, pass.head, dlogits_secondary);
  std::vector<Tensor<T>> d_ext;
  Tensor<T> dy0 = backprop_layers(model.secondary, pass.stack, std::move(d_sec), &d_ext);
  embed_backward(model.secondary, pass.ids, pass.seq, dy0);

  const bool primary_trains = any_trainable(model.primary);
  std::vector<Tensor<T>> d_prim(LL + 1);
  const auto& map = model.layer_map();
  for (int j = 0; j < LS; ++j) {
    if (d_ext[j].empty()) continue;
    const Tensor<T>& x = pass.primary.outputs[map[j] + 1];
    Tensor<T>* dx = nullptr;
    if (primary_trains) {
      auto& slot = d_prim[map[j] + 1];
      if (slot.empty()) slot = Tensor<T>(x.shape());
      dx = &slot;
    }
    auto& w = model.proj_w[j];
    auto& b = model.proj_b[j];
    linear_backward(x, w.value, d_ext[j], dx, w.trainable ? &w.grad : nullptr, b.trainable ? &b.grad : nullptr);
  }
  if (!primary_trains) return;
  Tensor<T> zero;
  if (!dlogits_primary) zero = Tensor<T>(pass.primary.logits.shape());
  decoder_backward(model.primary, pass.primary, dlogits_primary ? *dlogits_primary : zero, std::move(d_prim));
}

template <typename T>
Tensor<T> tandem_forward_teacher(const TandemModel<T>& model, std::span<const int> tokens,
                                 std::span<const int> frontier) {
  const int S = static_cast<int>(tokens.size());
  return tandem_forward(model, tokens, 1, S, false, frontier).logits;
}

// ---------------------------------------------------------------------------

template <typename T>
TandemCache<T>::TandemCache(const TandemConfig& config)
    : primary_(config.primary),
      secondary_(config.secondary),
      tags_(config.secondary.max_context, KVSource::EMPTY),
      protected_(config.secondary.max_context, false) {}

template <typename T>
void TandemCache<T>::truncate(int length) {
  secondary_.truncate(length);
  for (int p = length; p < static_cast<int>(tags_.size()); ++p) {
    tags_[p] = KVSource::EMPTY;
    protected_[p] = false;
  }
  frontier_ = std::min(frontier_, length);
}

template <typename T>
void TandemCache<T>::write_projected(const TandemModel<T>& model, int start, const std::vector<Tensor<T>>& outs,
                                     bool protect_last) {
  const auto& sec = model.secondary;
  const int n = static_cast<int>(outs.at(0).rows());
  if (start != frontier_) throw std::logic_error("TandemCache: projected rows must continue from the frontier");
  if (start > secondary_.length()) throw std::logic_error("TandemCache: gap before projected rows");
  if (start + n > secondary_.capacity()) throw std::length_error("TandemCache: secondary context exceeded");
  const auto d = static_cast<std::size_t>(sec.config().d_model);
  const auto& map = model.layer_map();
  for (int j = 0; j < sec.config().n_layers; ++j) {
    const auto& L = sec.layers[j];
    Tensor<T> y = linear_forward(outs[map[j] + 1], model.proj_w[j].value, &model.proj_b[j].value);
    Tensor<T> nz;
    std::vector<T> inv;
    rmsnorm_forward(y, L.attn_norm.value, nz, inv);
    Tensor<T> k = linear_forward(nz, L.wk.value, nullptr);
    Tensor<T> v = linear_forward(nz, L.wv.value, nullptr);
    for (int r = 0; r < n; ++r) {
      const int pos = start + r;
      if (protected_[pos]) throw std::logic_error("TandemCache: protected row overwritten");
      std::copy_n(k.data() + r * d, d, secondary_.keys(j).data() + static_cast<std::size_t>(pos) * d);
      std::copy_n(v.data() + r * d, d, secondary_.values(j).data() + static_cast<std::size_t>(pos) * d);
    }
  }
  for (int r = 0; r < n; ++r) tags_[start + r] = KVSource::PRIMARY_PROJECTED;
  if (protect_last && n > 0) protected_[start + n - 1] = true;
  frontier_ = start + n;
  secondary_.set_length(std::max(secondary_.length(), frontier_));
}

template <typename T>
std::vector<T> TandemCache<T>::secondary_step(const TandemModel<T>& model, int token) {
  const int pos = secondary_.length();
  if (pos < frontier_) throw std::logic_error("TandemCache: secondary step below the frontier");
  if (pos >= secondary_.capacity()) throw std::length_error("TandemCache: secondary context exceeded");
  if (protected_[pos] || tags_[pos] == KVSource::PRIMARY_PROJECTED) {
    throw std::logic_error("TandemCache: secondary may not overwrite primary rows");
  }
  auto logits = decode_step(model.secondary, secondary_, token);
  tags_[pos] = KVSource::SECONDARY_LOCAL;
  return logits;
}

template <typename T>
Tensor<T> commit_primary(const TandemModel<T>& model, TandemCache<T>& cache, std::span<const int> tokens,
                         bool protect_last) {
  const int start = cache.primary().length();
  std::vector<Tensor<T>> outs;
  Tensor<T> logits = extend(model.primary, cache.primary(), tokens, &outs);
  // Rows past the new frontier belong to a stale draft.
  cache.truncate(std::min(cache.length(), start));
  cache.write_projected(model, start, outs, protect_last);
  return logits;
}

template <typename T>
Tensor<T> refresh_block(const TandemModel<T>& model, TandemCache<T>& cache, std::span<const int> block,
                        GenerationMode mode, int gamma) {
  const int need = mode == GenerationMode::FREE_TOKEN ? gamma + 1 : gamma;
  if (static_cast<int>(block.size()) != need) {
    throw std::invalid_argument("refresh_block: block has " + std::to_string(block.size()) + " tokens, expected " +
                                std::to_string(need));
  }
  return commit_primary(model, cache, block, mode == GenerationMode::FREE_TOKEN);
}

template <typename T>
TandemGeneration tandem_generate(const TandemModel<T>& model, std::span<const int> prompt, int n_tokens,
                                 GenerationMode mode, const SamplingMode& sampling, CounterRng& rng,
                                 const GenerateOptions& options) {
  const auto& cfg = model.config();
  if (prompt.empty()) throw std::invalid_argument("tandem_generate: empty prompt");
  if (n_tokens < 1) throw std::invalid_argument("tandem_generate: n_tokens must be >= 1");
  const int P = static_cast<int>(prompt.size());
  const int limit = std::min(cfg.primary.max_context, cfg.secondary.max_context);
  if (P + n_tokens > limit) {
    throw std::length_error("tandem_generate: prompt plus response exceeds the context of " + std::to_string(limit));
  }
  const int gamma = options.gamma > 0 ? options.gamma : cfg.gamma;
  if (options.gamma < 0) throw std::invalid_argument("tandem_generate: gamma must be >= 1");
  TandemCache<T> cache(cfg);
  TandemGeneration gen;
  std::vector<int> seq(prompt.begin(), prompt.end());
  auto emit = [&](int t, char who) {
    seq.push_back(t);
    gen.tokens.push_back(t);
    gen.provenance.push_back(who);
  };
  auto primary_token = [&](const Tensor<T>& logits) {
    return sample_token<T>(logits.row(logits.rows() - 1), sampling, rng);
  };

  if (mode == GenerationMode::FREE_TOKEN) {
    Tensor<T> logits = commit_primary(model, cache, prompt, true);
    ++gen.primary_runs;
    emit(primary_token(logits), 'P');
  } else if (P > 1) {
    commit_primary(model, cache, prompt.first(P - 1), false);
    ++gen.primary_runs;
  }

  while (static_cast<int>(gen.tokens.size()) < n_tokens) {
    for (int s = 0; s < gamma && static_cast<int>(gen.tokens.size()) < n_tokens; ++s) {
      const int pos = static_cast<int>(seq.size()) - 1;
      auto logits = cache.secondary_step(model, seq[pos]);
      ++gen.secondary_steps;
      gen.step_positions.push_back(pos);
      if (options.record_logits) gen.step_logits.emplace_back(logits.begin(), logits.end());
      emit(sample_token<T>(logits, sampling, rng), 'S');
    }
    if (static_cast<int>(gen.tokens.size()) >= n_tokens) break;
    const int start = cache.primary().length();
    const int end = mode == GenerationMode::FREE_TOKEN ? static_cast<int>(seq.size())
                                                       : static_cast<int>(seq.size()) - 1;
    Tensor<T> logits = refresh_block(model, cache, std::span<const int>(seq).subspan(start, end - start), mode, gamma);
    ++gen.primary_runs;
    if (mode == GenerationMode::FREE_TOKEN) emit(primary_token(logits), 'P');
  }
  return gen;
}

template class TandemModel<float>;
template class TandemModel<double>;
template class TandemCache<float>;
template class TandemCache<double>;

#define TANDEM_INSTANTIATE_TANDEM(T)                                                                              \
  template TandemPass<T> tandem_forward<T>(const TandemModel<T>&, std::span<const int>, int, int, bool,           \
                                           std::span<const int>);                                               \
  template void tandem_backward<T>(TandemModel<T>&, const TandemPass<T>&, const Tensor<T>&, const Tensor<T>*);    \
  template Tensor<T> tandem_forward_teacher<T>(const TandemModel<T>&, std::span<const int>, std::span<const int>); \
  template Tensor<T> commit_primary<T>(const TandemModel<T>&, TandemCache<T>&, std::span<const int>, bool);       \
  template Tensor<T> refresh_block<T>(const TandemModel<T>&, TandemCache<T>&, std::span<const int>,               \
                                      GenerationMode, int);                                                          \
  template TandemGeneration tandem_generate<T>(const TandemModel<T>&, std::span<const int>, int, GenerationMode,  \
                                               const SamplingMode&, CounterRng&, const GenerateOptions&);

TANDEM_INSTANTIATE_TANDEM(float)
TANDEM_INSTANTIATE_TANDEM(double)

}  // namespace tandem
