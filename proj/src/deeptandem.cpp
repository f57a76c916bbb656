#include "tandem/deeptandem.hpp"

#include <cmath>
#include <stdexcept>

namespace tandem {

void DeepTandemConfig::validate() const {
  large.validate();
  small.validate();
  if (large.vocab_size != small.vocab_size) throw std::invalid_argument("deep tandem config: vocab sizes differ");
  if (gamma < 1) throw std::invalid_argument("deep tandem config: gamma must be >= 1");
  if (begin_token < 0 || begin_token >= large.vocab_size) {
    throw std::invalid_argument("deep tandem config: begin_token outside the vocabulary");
  }
}

std::vector<int> shifted_ids(std::span<const int> ids, int batch, int seq, int shift, int begin_token) {
  if (static_cast<std::size_t>(batch) * seq != ids.size()) throw std::invalid_argument("shifted_ids: bad batch");
  std::vector<int> out(ids.size());
  for (int b = 0; b < batch; ++b)
    for (int i = 0; i < seq; ++i) out[b * seq + i] = i < shift ? begin_token : ids[b * seq + i - shift];
  return out;
}

template <typename T>
SketchPass<T> sketch_forward(const DecoderModel<T>& large, std::span<const int> ids, int batch, int seq, int gamma,
                             int begin_token, bool keep_trace) {
  if (seq > large.config().max_context) throw std::length_error("sketch_forward: sequence longer than max_context");
  SketchPass<T> pass;
  pass.ids = shifted_ids(ids, batch, seq, gamma, begin_token);
  pass.batch = batch;
  pass.seq = seq;
  Tensor<T> x0 = embed_tokens(large, pass.ids, seq);
  pass.outputs = run_layers(large, std::move(x0), batch, AttentionMask::sketch(seq, gamma),
                            std::span<const Tensor<T>* const>{}, keep_trace ? &pass.stack : nullptr);
  return pass;
}

template <typename T>
void sketch_backward(DecoderModel<T>& large, const SketchPass<T>& pass, Tensor<T> d_sketch) {
  std::vector<Tensor<T>> d(large.config().n_layers + 1);
  d.back() = std::move(d_sketch);
  Tensor<T> dx0 = backprop_layers(large, pass.stack, std::move(d), nullptr);
  embed_backward(large, pass.ids, pass.seq, dx0);
}

template <typename T>
DeepTandemModel<T>::DeepTandemModel(DeepTandemConfig config, std::uint64_t seed)
    : large(config.large, "large.", seed * 3 + 1), small(config.small, "small.", seed * 3 + 2), config_(config) {
  config_.validate();
  const auto dl = static_cast<std::size_t>(config_.large.d_model);
  const auto ds = static_cast<std::size_t>(config_.small.d_model);
  ff_w = Parameter<T>("ff_dt.w", {dl, ds});
  ff_b = Parameter<T>("ff_dt.b", {ds});
  std::mt19937_64 gen(seed * 3 + 3);
  init_normal(ff_w.value, 1.0 / std::sqrt(static_cast<double>(dl)), gen);
}

template <typename T>
ParameterSet<T> DeepTandemModel<T>::parameters() {
  ParameterSet<T> set = large.parameters();
  set.append(small.parameters());
  set.add(ff_w);
  set.add(ff_b);
  return set;
}

template <typename T>
DeepPass<T> deep_forward(const DeepTandemModel<T>& model, std::span<const int> ids, int batch, int seq,
                         bool keep_trace) {
  const auto& cfg = model.config();
  if (seq > cfg.small.max_context) throw std::length_error("deep_forward: sequence longer than max_context");
  DeepPass<T> pass;
  pass.sketch = sketch_forward(model.large, ids, batch, seq, cfg.gamma, cfg.begin_token, keep_trace);
  pass.small_ids = shifted_ids(ids, batch, seq, 1, cfg.begin_token);
  Tensor<T> y0 = embed_tokens(model.small, pass.small_ids, seq);
  const Tensor<T>& sk = pass.sketch.outputs.back();
  Tensor<T> add = linear_forward(sk, model.ff_w.value, &model.ff_b.value);
  for (std::size_t i = 0; i < y0.size(); ++i) y0[i] += add[i];
  auto outs = run_layers(model.small, std::move(y0), batch, AttentionMask::causal(seq),
                         std::span<const Tensor<T>* const>{}, keep_trace ? &pass.stack : nullptr);
  pass.logits = head_forward(model.small, outs.back(), keep_trace ? &pass.head : nullptr);
  if (keep_trace) {
    pass.sketch_out = sk;
  } else {
    pass.sketch.outputs.clear();
  }
  return pass;
}

template <typename T>
void deep_backward(DeepTandemModel<T>& model, const DeepPass<T>& pass, const Tensor<T>& dlogits) {
  if (pass.stack.layers.empty()) throw std::logic_error("deep_backward called before a traced forward");
  const int LS = model.small.config().n_layers;
  std::vector<Tensor<T>> d(LS + 1);
  d[LS] = head_backward(model.small, pass.head, dlogits);
  Tensor<T> dy0 = backprop_layers(model.small, pass.stack, std::move(d), nullptr);
  embed_backward(model.small, pass.small_ids, pass.sketch.seq, dy0);
  Tensor<T> d_sketch(pass.sketch_out.shape());
  linear_backward(pass.sketch_out, model.ff_w.value, dy0, &d_sketch, model.ff_w.trainable ? &model.ff_w.grad : nullptr,
                  model.ff_b.trainable ? &model.ff_b.grad : nullptr);
  sketch_backward(model.large, pass.sketch, std::move(d_sketch));
}

template <typename T>
BlockParallelPass<T> block_parallel_forward(const DecoderModel<T>& large, std::span<const int> ids, int batch,
                                            int seq, int gamma, int begin_token, bool keep_trace) {
  BlockParallelPass<T> pass;
  pass.sketch = sketch_forward(large, ids, batch, seq, gamma, begin_token, keep_trace);
  pass.logits = head_forward(large, pass.sketch.outputs.back(), keep_trace ? &pass.head : nullptr);
  if (!keep_trace) pass.sketch.outputs.clear();
  return pass;
}

template <typename T>
void block_parallel_backward(DecoderModel<T>& large, const BlockParallelPass<T>& pass, const Tensor<T>& dlogits) {
  if (pass.sketch.stack.layers.empty()) throw std::logic_error("block_parallel_backward called before forward");
  sketch_backward(large, pass.sketch, head_backward(large, pass.head, dlogits));
}

#define TANDEM_INSTANTIATE_DEEP(T)                                                                              \
  template class DeepTandemModel<T>;                                                                            \
  template SketchPass<T> sketch_forward<T>(const DecoderModel<T>&, std::span<const int>, int, int, int, int,    \
                                           bool);                                                               \
  template void sketch_backward<T>(DecoderModel<T>&, const SketchPass<T>&, Tensor<T>);                          \
  template DeepPass<T> deep_forward<T>(const DeepTandemModel<T>&, std::span<const int>, int, int, bool);        \
  template void deep_backward<T>(DeepTandemModel<T>&, const DeepPass<T>&, const Tensor<T>&);                    \
  template BlockParallelPass<T> block_parallel_forward<T>(const DecoderModel<T>&, std::span<const int>, int,    \
                                                          int, int, int, bool);                                 \
  template void block_parallel_backward<T>(DecoderModel<T>&, const BlockParallelPass<T>&, const Tensor<T>&);

TANDEM_INSTANTIATE_DEEP(float)
TANDEM_INSTANTIATE_DEEP(double)

}  // namespace tandem
