#include "tandem/transformer.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace tandem {

void DecoderConfig::validate() const {
  if (vocab_size <= 0 || d_model <= 0 || n_layers <= 0 || n_heads <= 0 || d_ff <= 0 || max_context <= 0) {
    throw std::invalid_argument("decoder config: all sizes must be positive");
  }
  if (d_model % n_heads != 0) throw std::invalid_argument("decoder config: n_heads must divide d_model");
}

template <typename T>
DecoderModel<T>::DecoderModel(DecoderConfig config, std::string prefix, std::uint64_t seed)
    : config_(config), prefix_(std::move(prefix)) {
  config_.validate();
  const auto V = static_cast<std::size_t>(config_.vocab_size);
  const auto d = static_cast<std::size_t>(config_.d_model);
  const auto f = static_cast<std::size_t>(config_.d_ff);
  const auto C = static_cast<std::size_t>(config_.max_context);
  auto name = [&](const std::string& s) { return prefix_ + s; };

  std::mt19937_64 gen(seed);
  tok_emb = Parameter<T>(name("tok_emb"), {V, d});
  pos_emb = Parameter<T>(name("pos_emb"), {C, d});
  init_normal(tok_emb.value, 0.02, gen);
  init_normal(pos_emb.value, 0.02, gen);

  const double out_scale = 1.0 / std::sqrt(2.0 * config_.n_layers);
  layers.resize(config_.n_layers);
  for (int l = 0; l < config_.n_layers; ++l) {
    auto& L = layers[l];
    const std::string p = "layer" + std::to_string(l) + ".";
    L.attn_norm = Parameter<T>(name(p + "attn_norm"), {d});
    L.attn_norm.value.fill(T{1});
    L.wq = Parameter<T>(name(p + "wq"), {d, d});
    L.wk = Parameter<T>(name(p + "wk"), {d, d});
    L.wv = Parameter<T>(name(p + "wv"), {d, d});
    L.wo = Parameter<T>(name(p + "wo"), {d, d});
    init_normal(L.wq.value, 1.0 / std::sqrt(double(d)), gen);
    init_normal(L.wk.value, 1.0 / std::sqrt(double(d)), gen);
    init_normal(L.wv.value, 1.0 / std::sqrt(double(d)), gen);
    init_normal(L.wo.value, out_scale / std::sqrt(double(d)), gen);
    L.ffn_norm = Parameter<T>(name(p + "ffn_norm"), {d});
    L.ffn_norm.value.fill(T{1});
    L.w1 = Parameter<T>(name(p + "w1"), {d, f});
    L.b1 = Parameter<T>(name(p + "b1"), {f});
    L.w2 = Parameter<T>(name(p + "w2"), {f, d});
    L.b2 = Parameter<T>(name(p + "b2"), {d});
    init_normal(L.w1.value, 1.0 / std::sqrt(double(d)), gen);
    init_normal(L.w2.value, out_scale / std::sqrt(double(f)), gen);
  }
  final_norm = Parameter<T>(name("final_norm"), {d});
  final_norm.value.fill(T{1});
  unembed = Parameter<T>(name("unembed"), {d, V});
  init_normal(unembed.value, 1.0 / std::sqrt(double(d)), gen);
}

template <typename T>
ParameterSet<T> DecoderModel<T>::parameters() {
  ParameterSet<T> set;
  set.add(tok_emb);
  set.add(pos_emb);
  for (auto& L : layers) {
    for (Parameter<T>* p : {&L.attn_norm, &L.wq, &L.wk, &L.wv, &L.wo, &L.ffn_norm, &L.w1, &L.b1, &L.w2, &L.b2}) {
      set.add(*p);
    }
  }
  set.add(final_norm);
  set.add(unembed);
  return set;
}

// ---------------------------------------------------------------------------

namespace {

template <typename T>
Tensor<T>* grad_of(Parameter<T>& p) {
  return p.trainable ? &p.grad : nullptr;
}

template <typename T>
void add_into(Tensor<T>& dst, const Tensor<T>& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

template <typename T>
void gelu_inplace(const Tensor<T>& u, Tensor<T>& a) {
  a = Tensor<T>(u.shape());
  for (std::size_t i = 0; i < u.size(); ++i) a[i] = gelu(u[i]);
}

// Position-wise feed-forward sub-block with its residual: out = h + FFN(norm(h)).
template <typename T>
Tensor<T> ffn_block(const DecoderLayerParams<T>& L, const Tensor<T>& h, LayerTrace<T>* tr) {
  Tensor<T> n2;
  std::vector<T> r2;
  rmsnorm_forward(h, L.ffn_norm.value, n2, r2);
  Tensor<T> u = linear_forward(n2, L.w1.value, &L.b1.value);
  Tensor<T> a;
  gelu_inplace(u, a);
  Tensor<T> out = linear_forward(a, L.w2.value, &L.b2.value);
  add_into(out, h);
  if (tr) {
    tr->n2 = std::move(n2);
    tr->r2 = std::move(r2);
    tr->u = std::move(u);
    tr->a = std::move(a);
  }
  return out;
}

template <typename T>
Tensor<T> layer_forward(const DecoderLayerParams<T>& L, const Tensor<T>& x, const Tensor<T>* ext, int batch,
                        int n_heads, const AttentionMask& mask, LayerTrace<T>* tr) {
  Tensor<T> n1;
  std::vector<T> r1;
  rmsnorm_forward(x, L.attn_norm.value, n1, r1);
  Tensor<T> q = linear_forward(n1, L.wq.value, static_cast<const Tensor<T>*>(nullptr));
  Tensor<T> k = linear_forward(n1, L.wk.value, static_cast<const Tensor<T>*>(nullptr));
  Tensor<T> v = linear_forward(n1, L.wv.value, static_cast<const Tensor<T>*>(nullptr));
  Tensor<T> nz, kx, vx;
  std::vector<T> rz;
  if (ext) {
    rmsnorm_forward(*ext, L.attn_norm.value, nz, rz);
    kx = linear_forward(nz, L.wk.value, static_cast<const Tensor<T>*>(nullptr));
    vx = linear_forward(nz, L.wv.value, static_cast<const Tensor<T>*>(nullptr));
  }
  std::vector<T> probs;
  Tensor<T> att = masked_attention(q, k, v, ext ? &kx : nullptr, ext ? &vx : nullptr, mask, batch, n_heads,
                                   tr ? &probs : nullptr);
  Tensor<T> h = linear_forward(att, L.wo.value, static_cast<const Tensor<T>*>(nullptr));
  add_into(h, x);
  Tensor<T> out = ffn_block(L, h, tr);
  if (tr) {
    tr->x = x;
    tr->n1 = std::move(n1);
    tr->r1 = std::move(r1);
    tr->q = std::move(q);
    tr->k = std::move(k);
    tr->v = std::move(v);
    if (ext) {
      tr->ext = *ext;
      tr->nz = std::move(nz);
      tr->rz = std::move(rz);
      tr->kx = std::move(kx);
      tr->vx = std::move(vx);
    }
    tr->probs = std::move(probs);
    tr->att = std::move(att);
    tr->h = h;
  }
  return out;
}

// Returns dx; writes d_ext when the layer had an external source.
template <typename T>
Tensor<T> layer_backward(DecoderLayerParams<T>& L, const LayerTrace<T>& tr, const AttentionMask& mask, int batch,
                         int n_heads, const Tensor<T>& dout, Tensor<T>* d_ext) {
  // FFN sub-block.
  Tensor<T> dh = dout;
  Tensor<T> da;
  linear_backward(tr.a, L.w2.value, dout, &da, grad_of(L.w2), grad_of(L.b2));
  Tensor<T> du(tr.u.shape());
  for (std::size_t i = 0; i < du.size(); ++i) du[i] = da[i] * gelu_grad(tr.u[i]);
  Tensor<T> dn2;
  linear_backward(tr.n2, L.w1.value, du, &dn2, grad_of(L.w1), grad_of(L.b1));
  Tensor<T> dh_norm;
  rmsnorm_backward(tr.h, L.ffn_norm.value, tr.r2, dn2, dh_norm, grad_of(L.ffn_norm));
  add_into(dh, dh_norm);

  // Attention sub-block.
  Tensor<T> datt;
  linear_backward(tr.att, L.wo.value, dh, &datt, grad_of(L.wo), static_cast<Tensor<T>*>(nullptr));
  const bool has_ext = !tr.ext.empty();
  AttentionGrads<T> ag = masked_attention_backward(tr.q, tr.k, tr.v, has_ext ? &tr.kx : nullptr,
                                                   has_ext ? &tr.vx : nullptr, mask, batch, n_heads, tr.probs, datt);
  Tensor<T> dn1;
  linear_backward(tr.n1, L.wq.value, ag.dq, &dn1, grad_of(L.wq), static_cast<Tensor<T>*>(nullptr));
  linear_backward(tr.n1, L.wk.value, ag.dk, &dn1, grad_of(L.wk), static_cast<Tensor<T>*>(nullptr));
  linear_backward(tr.n1, L.wv.value, ag.dv, &dn1, grad_of(L.wv), static_cast<Tensor<T>*>(nullptr));
  Tensor<T> dx;
  rmsnorm_backward(tr.x, L.attn_norm.value, tr.r1, dn1, dx, grad_of(L.attn_norm));
  add_into(dx, dh);

  if (has_ext && d_ext) {
    Tensor<T> dnz;
    if (!ag.dext_k.empty()) {
      linear_backward(tr.nz, L.wk.value, ag.dext_k, &dnz, grad_of(L.wk), static_cast<Tensor<T>*>(nullptr));
      linear_backward(tr.nz, L.wv.value, ag.dext_v, &dnz, grad_of(L.wv), static_cast<Tensor<T>*>(nullptr));
    } else {
      dnz = Tensor<T>(tr.nz.shape());
    }
    rmsnorm_backward(tr.ext, L.attn_norm.value, tr.rz, dnz, *d_ext, grad_of(L.attn_norm));
  }
  return dx;
}

}  // namespace

template <typename T>
Tensor<T> embed_tokens(const DecoderModel<T>& model, std::span<const int> ids, int seq, int pos_offset) {
  const auto& cfg = model.config();
  const auto d = static_cast<std::size_t>(cfg.d_model);
  if (seq <= 0 || ids.size() % static_cast<std::size_t>(seq) != 0) {
    throw std::invalid_argument("embed: token count is not a multiple of the sequence length");
  }
  if (pos_offset + seq > cfg.max_context) {
    throw std::length_error("sequence of length " + std::to_string(pos_offset + seq) + " exceeds max_context " +
                            std::to_string(cfg.max_context));
  }
  Tensor<T> x({ids.size(), d});
  for (std::size_t r = 0; r < ids.size(); ++r) {
    const int t = ids[r];
    if (t < 0 || t >= cfg.vocab_size) throw std::out_of_range("token id " + std::to_string(t) + " out of range");
    const int pos = static_cast<int>(r % seq) + pos_offset;
    const T* te = model.tok_emb.value.data() + static_cast<std::size_t>(t) * d;
    const T* pe = model.pos_emb.value.data() + static_cast<std::size_t>(pos) * d;
    T* xr = x.data() + r * d;
    for (std::size_t j = 0; j < d; ++j) xr[j] = te[j] + pe[j];
  }
  return x;
}

template <typename T>
void embed_backward(DecoderModel<T>& model, std::span<const int> ids, int seq, const Tensor<T>& dx, int pos_offset) {
  const auto d = static_cast<std::size_t>(model.config().d_model);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    const T* g = dx.data() + r * d;
    if (model.tok_emb.trainable) {
      T* te = model.tok_emb.grad.data() + static_cast<std::size_t>(ids[r]) * d;
      for (std::size_t j = 0; j < d; ++j) te[j] += g[j];
    }
    if (model.pos_emb.trainable) {
      const int pos = static_cast<int>(r % seq) + pos_offset;
      T* pe = model.pos_emb.grad.data() + static_cast<std::size_t>(pos) * d;
      for (std::size_t j = 0; j < d; ++j) pe[j] += g[j];
    }
  }
}

template <typename T>
std::vector<Tensor<T>> run_layers(const DecoderModel<T>& model, Tensor<T> x0, int batch, const AttentionMask& mask,
                                  std::span<const Tensor<T>* const> external, StackTrace<T>* trace) {
  const auto& cfg = model.config();
  if (static_cast<std::size_t>(batch) * mask.queries() != x0.rows()) {
    throw std::invalid_argument("run_layers: rows do not match batch * mask length");
  }
  if (trace) {
    trace->batch = batch;
    trace->mask = mask;
    trace->layers.assign(cfg.n_layers, {});
  }
  std::vector<Tensor<T>> outputs;
  outputs.reserve(cfg.n_layers + 1);
  outputs.push_back(std::move(x0));
  for (int l = 0; l < cfg.n_layers; ++l) {
    const Tensor<T>* ext = (l < static_cast<int>(external.size())) ? external[l] : nullptr;
    outputs.push_back(layer_forward(model.layers[l], outputs.back(), ext, batch, cfg.n_heads, mask,
                                    trace ? &trace->layers[l] : nullptr));
  }
  return outputs;
}

template <typename T>
Tensor<T> backprop_layers(DecoderModel<T>& model, const StackTrace<T>& trace, std::vector<Tensor<T>> d_outputs,
                          NoDeduce<std::vector<Tensor<T>>*> d_external) {
  const int L = model.config().n_layers;
  if (trace.layers.size() != static_cast<std::size_t>(L)) throw std::logic_error("backward called before forward");
  d_outputs.resize(L + 1);
  if (d_external) d_external->assign(L, Tensor<T>());
  const Shape shape = trace.layers[0].x.shape();
  Tensor<T> g = d_outputs[L].empty() ? Tensor<T>(shape) : std::move(d_outputs[L]);
  for (int l = L - 1; l >= 0; --l) {
    Tensor<T> dext;
    g = layer_backward(model.layers[l], trace.layers[l], trace.mask, trace.batch, model.config().n_heads, g,
                       d_external ? &dext : nullptr);
    if (d_external) (*d_external)[l] = std::move(dext);
    if (!d_outputs[l].empty()) add_into(g, d_outputs[l]);
  }
  return g;
}

template <typename T>
Tensor<T> head_forward(const DecoderModel<T>& model, const Tensor<T>& x, HeadTrace<T>* trace) {
  Tensor<T> normed;
  std::vector<T> inv;
  rmsnorm_forward(x, model.final_norm.value, normed, inv);
  Tensor<T> logits = linear_forward(normed, model.unembed.value, static_cast<const Tensor<T>*>(nullptr));
  if (trace) {
    trace->x = x;
    trace->normed = std::move(normed);
    trace->inv_rms = std::move(inv);
  }
  return logits;
}

template <typename T>
Tensor<T> head_backward(DecoderModel<T>& model, const HeadTrace<T>& trace, const Tensor<T>& dlogits) {
  if (trace.x.empty()) throw std::logic_error("backward called before forward");
  Tensor<T> dnormed;
  linear_backward(trace.normed, model.unembed.value, dlogits, &dnormed, grad_of(model.unembed),
                  static_cast<Tensor<T>*>(nullptr));
  Tensor<T> dx;
  rmsnorm_backward(trace.x, model.final_norm.value, trace.inv_rms, dnormed, dx, grad_of(model.final_norm));
  return dx;
}

template <typename T>
DecoderPass<T> decoder_forward(const DecoderModel<T>& model, std::span<const int> ids, int batch, int seq,
                               bool keep_trace) {
  DecoderPass<T> pass;
  pass.ids.assign(ids.begin(), ids.end());
  pass.batch = batch;
  pass.seq = seq;
  if (static_cast<std::size_t>(batch) * seq != ids.size()) throw std::invalid_argument("decoder_forward: bad batch");
  Tensor<T> x0 = embed_tokens(model, ids, seq);
  const AttentionMask mask = AttentionMask::causal(seq);
  pass.outputs = run_layers(model, std::move(x0), batch, mask, std::span<const Tensor<T>* const>{},
                            keep_trace ? &pass.stack : nullptr);
  pass.logits = head_forward(model, pass.outputs.back(), keep_trace ? &pass.head : nullptr);
  return pass;
}

template <typename T>
void decoder_backward(DecoderModel<T>& model, const DecoderPass<T>& pass, const Tensor<T>& dlogits,
                      std::vector<Tensor<T>> d_outputs) {
  const int L = model.config().n_layers;
  d_outputs.resize(L + 1);
  Tensor<T> dx = head_backward(model, pass.head, dlogits);
  if (d_outputs[L].empty()) {
    d_outputs[L] = std::move(dx);
  } else {
    add_into(d_outputs[L], dx);
  }
  Tensor<T> dx0 = backprop_layers<T>(model, pass.stack, std::move(d_outputs), nullptr);
  embed_backward(model, pass.ids, pass.seq, dx0);
}

template <typename T>
Tensor<T> forward_full(const DecoderModel<T>& model, std::span<const int> tokens) {
  if (static_cast<int>(tokens.size()) > model.config().max_context) {
    throw std::length_error("forward_full: sequence longer than max_context");
  }
  return decoder_forward(model, tokens, 1, static_cast<int>(tokens.size()), false).logits;
}

// ---------------------------------------------------------------------------

template <typename T>
KVCache<T>::KVCache(const DecoderConfig& config) : capacity_(config.max_context) {
  const Shape shape{static_cast<std::size_t>(config.max_context), static_cast<std::size_t>(config.d_model)};
  k_.assign(config.n_layers, Tensor<T>(shape));
  v_.assign(config.n_layers, Tensor<T>(shape));
}

template <typename T>
void KVCache<T>::truncate(int length) {
  if (length < 0 || length > length_) throw std::out_of_range("KVCache::truncate beyond current length");
  length_ = length;
}

template <typename T>
Tensor<T> extend(const DecoderModel<T>& model, KVCache<T>& cache, std::span<const int> tokens,
                 NoDeduce<std::vector<Tensor<T>>*> layer_outputs, bool compute_logits) {
  const auto& cfg = model.config();
  const int n = static_cast<int>(tokens.size());
  const int start = cache.length();
  if (n == 0) throw std::invalid_argument("extend: no tokens");
  if (start + n > cache.capacity()) {
    throw std::length_error("KV cache full: " + std::to_string(start + n) + " > " + std::to_string(cache.capacity()));
  }
  const auto d = static_cast<std::size_t>(cfg.d_model);
  Tensor<T> x = embed_tokens(model, tokens, n, start);
  if (layer_outputs) {
    layer_outputs->clear();
    layer_outputs->push_back(x);
  }
  for (int l = 0; l < cfg.n_layers; ++l) {
    const auto& L = model.layers[l];
    Tensor<T> n1;
    std::vector<T> r1;
    rmsnorm_forward(x, L.attn_norm.value, n1, r1);
    Tensor<T> q = linear_forward(n1, L.wq.value, static_cast<const Tensor<T>*>(nullptr));
    Tensor<T> k = linear_forward(n1, L.wk.value, static_cast<const Tensor<T>*>(nullptr));
    Tensor<T> v = linear_forward(n1, L.wv.value, static_cast<const Tensor<T>*>(nullptr));
    auto& K = cache.keys(l);
    auto& V = cache.values(l);
    std::copy(k.values().begin(), k.values().end(), K.data() + static_cast<std::size_t>(start) * d);
    std::copy(v.values().begin(), v.values().end(), V.data() + static_cast<std::size_t>(start) * d);
    Tensor<T> att({static_cast<std::size_t>(n), d});
    const KVView<T> local{K.data(), V.data(), d};
    for (int r = 0; r < n; ++r) {
      const KeySpan span{0, start + r + 1, false};
      attend_query(q.data() + r * d, std::span<const KeySpan>(&span, 1), local, KVView<T>{}, cfg.n_heads,
                   cfg.d_model, att.data() + r * d, static_cast<T*>(nullptr));
    }
    Tensor<T> h = linear_forward(att, L.wo.value, static_cast<const Tensor<T>*>(nullptr));
    add_into(h, x);
    x = ffn_block<T>(L, h, nullptr);
    if (layer_outputs) layer_outputs->push_back(x);
  }
  cache.set_length(start + n);
  if (!compute_logits) return {};
  return head_forward(model, x, static_cast<HeadTrace<T>*>(nullptr));
}

template <typename T>
std::vector<T> decode_step(const DecoderModel<T>& model, KVCache<T>& cache, int token) {
  const int tok[1] = {token};
  Tensor<T> logits = extend(model, cache, std::span<const int>(tok, 1));
  return std::move(logits.storage());
}

// ---------------------------------------------------------------------------

template <typename T>
int argmax(std::span<const T> values) {
  if (values.empty()) throw std::invalid_argument("argmax of empty vector");
  int best = 0;
  for (int i = 1; i < static_cast<int>(values.size()); ++i)
    if (values[i] > values[best]) best = i;
  return best;
}

template <typename T>
std::vector<double> sampling_distribution(std::span<const T> logits, const SamplingMode& mode) {
  std::vector<double> p(logits.size(), 0.0);
  if (mode.greedy) {
    p[argmax(logits)] = 1.0;
    return p;
  }
  if (!(mode.temperature > 0)) throw std::invalid_argument("sampling temperature must be > 0");
  std::vector<double> scaled(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) scaled[i] = static_cast<double>(logits[i]) / mode.temperature;
  softmax<double>(scaled, p);
  return p;
}

int draw_from(std::span<const double> probs, CounterRng& rng) {
  const double u = rng.uniform();
  double acc = 0;
  int last_positive = 0;
  for (int i = 0; i < static_cast<int>(probs.size()); ++i) {
    if (probs[i] <= 0) continue;
    last_positive = i;
    acc += probs[i];
    if (u < acc) return i;
  }
  return last_positive;
}

template <typename T>
int sample_token(std::span<const T> logits, const SamplingMode& mode, CounterRng& rng) {
  if (mode.greedy) return argmax(logits);
  const auto p = sampling_distribution(logits, mode);
  return draw_from(p, rng);
}

template <typename T>
std::vector<int> generate(const DecoderModel<T>& model, std::span<const int> prompt, int n_tokens,
                          const SamplingMode& mode, CounterRng& rng) {
  if (prompt.empty()) throw std::invalid_argument("generate: empty prompt");
  KVCache<T> cache(model.config());
  Tensor<T> logits = extend(model, cache, prompt);
  std::vector<int> out;
  std::vector<T> last(logits.row(logits.rows() - 1).begin(), logits.row(logits.rows() - 1).end());
  for (int i = 0; i < n_tokens; ++i) {
    const int t = sample_token<T>(last, mode, rng);
    out.push_back(t);
    if (i + 1 < n_tokens) last = decode_step(model, cache, t);
  }
  return out;
}

#define TANDEM_INSTANTIATE_TRANSFORMER(T)                                                                         \
  template class DecoderModel<T>;                                                                                 \
  template class KVCache<T>;                                                                                      \
  template Tensor<T> embed_tokens<T>(const DecoderModel<T>&, std::span<const int>, int, int);                     \
  template void embed_backward<T>(DecoderModel<T>&, std::span<const int>, int, const Tensor<T>&, int);           \
  template std::vector<Tensor<T>> run_layers<T>(const DecoderModel<T>&, Tensor<T>, int, const AttentionMask&,    \
                                                std::span<const Tensor<T>* const>, StackTrace<T>*);              \
  template Tensor<T> backprop_layers<T>(DecoderModel<T>&, const StackTrace<T>&, std::vector<Tensor<T>>,          \
                                        std::vector<Tensor<T>>*);                                                 \
  template Tensor<T> head_forward<T>(const DecoderModel<T>&, const Tensor<T>&, HeadTrace<T>*);                   \
  template Tensor<T> head_backward<T>(DecoderModel<T>&, const HeadTrace<T>&, const Tensor<T>&);                  \
  template DecoderPass<T> decoder_forward<T>(const DecoderModel<T>&, std::span<const int>, int, int, bool);      \
  template void decoder_backward<T>(DecoderModel<T>&, const DecoderPass<T>&, const Tensor<T>&,                   \
                                    std::vector<Tensor<T>>);                                                     \
  template Tensor<T> forward_full<T>(const DecoderModel<T>&, std::span<const int>);                              \
  template Tensor<T> extend<T>(const DecoderModel<T>&, KVCache<T>&, std::span<const int>,                        \
                               std::vector<Tensor<T>>*, bool);                                                   \
  template std::vector<T> decode_step<T>(const DecoderModel<T>&, KVCache<T>&, int);                              \
  template int argmax<T>(std::span<const T>);                                                                    \
  template std::vector<double> sampling_distribution<T>(std::span<const T>, const SamplingMode&);                \
  template int sample_token<T>(std::span<const T>, const SamplingMode&, CounterRng&);                            \
  template std::vector<int> generate<T>(const DecoderModel<T>&, std::span<const int>, int, const SamplingMode&, \
                                        CounterRng&);

TANDEM_INSTANTIATE_TRANSFORMER(float)
TANDEM_INSTANTIATE_TRANSFORMER(double)

}  // namespace tandem
