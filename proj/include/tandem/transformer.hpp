#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tandem/ops.hpp"
#include "tandem/params.hpp"
#include "tandem/rng.hpp"
#include "tandem/tensor.hpp"

namespace tandem {

struct DecoderConfig {
  int vocab_size = 258;
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 4;
  int d_ff = 256;
  int max_context = 128;

  void validate() const;
  friend bool operator==(const DecoderConfig&, const DecoderConfig&) = default;
};

template <typename T>
struct DecoderLayerParams {
  Parameter<T> attn_norm, wq, wk, wv, wo;
  Parameter<T> ffn_norm, w1, b1, w2, b2;
};

/// Pre-RMSNorm decoder-only transformer with learned absolute positions and
/// an untied output projection.
template <typename T>
class DecoderModel {
 public:
  DecoderModel(DecoderConfig config, std::string prefix, std::uint64_t seed);

  const DecoderConfig& config() const { return config_; }
  const std::string& prefix() const { return prefix_; }

  /// Parameter pointers stay valid while this object is alive and not moved.
  ParameterSet<T> parameters();

  /// Copies every value (with conversion) from a model of identical shape.
  template <typename U>
  void copy_values_from(const DecoderModel<U>& other);

  Parameter<T> tok_emb;  // [V, d]
  Parameter<T> pos_emb;  // [max_context, d]
  std::vector<DecoderLayerParams<T>> layers;
  Parameter<T> final_norm;  // [d]
  Parameter<T> unembed;     // [d, V]

 private:
  DecoderConfig config_;
  std::string prefix_;
};

template <typename T>
template <typename U>
void DecoderModel<T>::copy_values_from(const DecoderModel<U>& other) {
  if (!(other.config() == config_)) throw std::invalid_argument("copy_values_from: config mismatch");
  auto assign = [](Parameter<T>& dst, const Parameter<U>& src) { dst.value = src.value.template cast<T>(); };
  assign(tok_emb, other.tok_emb);
  assign(pos_emb, other.pos_emb);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    auto& d = layers[l];
    const auto& s = other.layers[l];
    assign(d.attn_norm, s.attn_norm);
    assign(d.wq, s.wq);
    assign(d.wk, s.wk);
    assign(d.wv, s.wv);
    assign(d.wo, s.wo);
    assign(d.ffn_norm, s.ffn_norm);
    assign(d.w1, s.w1);
    assign(d.b1, s.b1);
    assign(d.w2, s.w2);
    assign(d.b2, s.b2);
  }
  assign(final_norm, other.final_norm);
  assign(unembed, other.unembed);
}

// ---------------------------------------------------------------------------
// Teacher-forced machinery shared by all model families.

template <typename T>
struct LayerTrace {
  Tensor<T> x;
  Tensor<T> n1;
  std::vector<T> r1;
  Tensor<T> q, k, v;
  Tensor<T> ext, nz, kx, vx;
  std::vector<T> rz;
  std::vector<T> probs;
  Tensor<T> att, h, n2, u, a;
  std::vector<T> r2;
};

template <typename T>
struct StackTrace {
  int batch = 0;
  AttentionMask mask;
  std::vector<LayerTrace<T>> layers;
};

template <typename T>
struct HeadTrace {
  Tensor<T> x, normed;
  std::vector<T> inv_rms;
};

/// x0[b*S + i] = tok_emb[ids] + pos_emb[i + pos_offset].
template <typename T>
Tensor<T> embed_tokens(const DecoderModel<T>& model, std::span<const int> ids, int seq, int pos_offset = 0);

template <typename T>
void embed_backward(DecoderModel<T>& model, std::span<const int> ids, int seq, const Tensor<T>& dx, int pos_offset = 0);

/// Runs every layer. external[l] (null for none) supplies rows whose keys and
/// values layer l reads for external mask spans. Returns outputs[0..L] where
/// outputs[0] is the input and outputs[l+1] the output of layer l.
template <typename T>
std::vector<Tensor<T>> run_layers(const DecoderModel<T>& model, Tensor<T> x0, int batch, const AttentionMask& mask,
                                  std::span<const Tensor<T>* const> external, StackTrace<T>* trace);

/// d_outputs[l] is the gradient w.r.t. outputs[l] (empty tensors count as zero).
/// Returns the gradient w.r.t. outputs[0]; d_external[l] receives the gradient
/// w.r.t. external[l] for layers that had one.
template <typename T>
Tensor<T> backprop_layers(DecoderModel<T>& model, const StackTrace<T>& trace, std::vector<Tensor<T>> d_outputs,
                          NoDeduce<std::vector<Tensor<T>>*> d_external);

template <typename T>
Tensor<T> head_forward(const DecoderModel<T>& model, const Tensor<T>& x, HeadTrace<T>* trace);

template <typename T>
Tensor<T> head_backward(DecoderModel<T>& model, const HeadTrace<T>& trace, const Tensor<T>& dlogits);

/// Teacher-forced pass over a batch of equal-length sequences (rows = batch*S).
template <typename T>
struct DecoderPass {
  std::vector<int> ids;
  int batch = 0;
  int seq = 0;
  StackTrace<T> stack;
  HeadTrace<T> head;
  std::vector<Tensor<T>> outputs;
  Tensor<T> logits;
};

template <typename T>
DecoderPass<T> decoder_forward(const DecoderModel<T>& model, std::span<const int> ids, int batch, int seq,
                               bool keep_trace);

/// Backward from dlogits (rows = batch*S); extra grads may be injected into layer outputs.
template <typename T>
void decoder_backward(DecoderModel<T>& model, const DecoderPass<T>& pass, const Tensor<T>& dlogits,
                      std::vector<Tensor<T>> d_outputs = {});

/// Logits for every position of one sequence, shape (S, V).
template <typename T>
Tensor<T> forward_full(const DecoderModel<T>& model, std::span<const int> tokens);

// ---------------------------------------------------------------------------
// Incremental decoding

template <typename T>
class KVCache {
 public:
  explicit KVCache(const DecoderConfig& config);

  int length() const { return length_; }
  int capacity() const { return capacity_; }
  void truncate(int length);

  Tensor<T>& keys(int layer) { return k_[layer]; }
  Tensor<T>& values(int layer) { return v_[layer]; }
  const Tensor<T>& keys(int layer) const { return k_[layer]; }
  const Tensor<T>& values(int layer) const { return v_[layer]; }
  void set_length(int length) { length_ = length; }

 private:
  std::vector<Tensor<T>> k_, v_;
  int length_ = 0;
  int capacity_ = 0;
};

/// Appends `tokens` at positions cache.length().. and returns their logits
/// (n, V). layer_outputs, when given, receives outputs[0..L] for the new rows.
template <typename T>
Tensor<T> extend(const DecoderModel<T>& model, KVCache<T>& cache, std::span<const int> tokens,
                 NoDeduce<std::vector<Tensor<T>>*> layer_outputs = nullptr, bool compute_logits = true);

template <typename T>
std::vector<T> decode_step(const DecoderModel<T>& model, KVCache<T>& cache, int token);

// ---------------------------------------------------------------------------
// Sampling

struct SamplingMode {
  bool greedy = true;
  double temperature = 1.0;

  static SamplingMode Greedy() { return {true, 1.0}; }
  static SamplingMode Temperature(double t) { return {false, t}; }
};

/// Lowest index among the maxima.
template <typename T>
int argmax(std::span<const T> values);

/// Distribution the sampler draws from: one-hot argmax for greedy, otherwise
/// softmax(logits / t) in double precision.
template <typename T>
std::vector<double> sampling_distribution(std::span<const T> logits, const SamplingMode& mode);

/// Inverse-CDF draw from a normalised distribution.
int draw_from(std::span<const double> probs, CounterRng& rng);

template <typename T>
int sample_token(std::span<const T> logits, const SamplingMode& mode, CounterRng& rng);

/// Plain autoregressive generation with the KV cache.
template <typename T>
std::vector<int> generate(const DecoderModel<T>& model, std::span<const int> prompt, int n_tokens,
                          const SamplingMode& mode, CounterRng& rng);

}  // namespace tandem
