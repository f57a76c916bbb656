#pragma once

#include <cstddef>
#include <span>
#include <type_traits>
#include <vector>

#include "tandem/tensor.hpp"

namespace tandem {

inline constexpr double kRmsNormEps = 1e-6;

// Optional pointer arguments take part in overload resolution without
// driving deduction, so callers may pass nullptr.
template <typename P>
using NoDeduce = std::type_identity_t<P>;

/// Numerically stable softmax (max subtraction). Throws on non-finite input.
template <typename T>
void softmax(std::span<const T> in, std::span<T> out);

template <typename T>
std::vector<T> softmax(std::span<const T> in);

/// log-softmax, same stability and error contract as softmax.
template <typename T>
void log_softmax(std::span<const T> in, std::span<T> out);

/// Exact GeLU: 0.5 x (1 + erf(x / sqrt 2)).
template <typename T>
T gelu(T x);
template <typename T>
T gelu_grad(T x);

/// Row-wise RMSNorm with learned gain. inv_rms receives 1/sqrt(mean(x^2)+eps) per row.
template <typename T>
void rmsnorm_forward(const Tensor<T>& x, const Tensor<T>& gain, Tensor<T>& y, std::vector<T>& inv_rms);

/// dx is overwritten; dgain is accumulated (skipped when null).
template <typename T>
void rmsnorm_backward(const Tensor<T>& x, const Tensor<T>& gain, const std::vector<T>& inv_rms,
                      const Tensor<T>& dy, Tensor<T>& dx, NoDeduce<Tensor<T>*> dgain);

/// y = x W + b, x [R, in], W [in, out], b [out] (may be empty).
template <typename T>
Tensor<T> linear_forward(const Tensor<T>& x, const Tensor<T>& w, NoDeduce<const Tensor<T>*> b);

/// Accumulates dx (if non-null), dW (if non-null), db (if non-null).
template <typename T>
void linear_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy, NoDeduce<Tensor<T>*> dx,
                     NoDeduce<Tensor<T>*> dw, NoDeduce<Tensor<T>*> db);

/// y = GeLU(x W1 + b1) W2 + b2 for a single vector or a stack of rows.
template <typename T>
Tensor<T> ffn_forward(const Tensor<T>& x, const Tensor<T>& w1, const Tensor<T>& b1,
                      const Tensor<T>& w2, const Tensor<T>& b2);

// ---------------------------------------------------------------------------
// Attention

/// A contiguous run of key positions [begin, end) read from either the
/// sequence's own key/value rows or an external (projected) source.
struct KeySpan {
  int begin = 0;
  int end = 0;
  bool external = false;
};

/// Per-query allowed key sets for one sequence of length S. Keys are visited
/// in span order, which fixes the softmax accumulation order.
class AttentionMask {
 public:
  AttentionMask() = default;

  /// Query i attends keys 0..=i.
  static AttentionMask causal(int seq_len);

  /// Query i attends external keys [0, frontier[i]) then own keys [frontier[i], i].
  static AttentionMask frontier(std::span<const int> frontier);

  /// Block-shifted sketch mask for the deep tandem large model.
  static AttentionMask sketch(int seq_len, int gamma);

  /// Arbitrary per-query spans; validates non-empty and in-range.
  static AttentionMask from_spans(std::vector<std::vector<KeySpan>> spans);

  int queries() const { return static_cast<int>(offsets_.size()) - 1; }
  std::span<const KeySpan> spans(int query) const {
    return {spans_.data() + offsets_[query], spans_.data() + offsets_[query + 1]};
  }
  int key_count(int query) const { return key_counts_[query]; }
  int total_keys() const { return total_keys_; }
  int key_offset(int query) const { return key_offsets_[query]; }
  bool uses_external() const { return uses_external_; }
  bool allows(int query, int key) const;

 private:
  void finalize();

  std::vector<KeySpan> spans_;
  std::vector<int> offsets_{0};
  std::vector<int> key_counts_;
  std::vector<int> key_offsets_;
  int total_keys_ = 0;
  bool uses_external_ = false;
};

/// Row-major key/value storage viewed as rows of width d.
template <typename T>
struct KVView {
  const T* k = nullptr;
  const T* v = nullptr;
  std::size_t stride = 0;
};

/// Attention of a single query over the keys named by `spans`. probs (if
/// non-null) receives n_heads * key_count weights, head-major.
template <typename T>
void attend_query(const T* q, std::span<const KeySpan> spans, KVView<T> local, KVView<T> external,
                  int n_heads, int d_model, T* out, NoDeduce<T*> probs);

/// Batched masked attention: rows are batch * S, mask covers one sequence.
/// ext_k/ext_v may be null when the mask has no external spans. probs (if
/// non-null) is resized to batch * n_heads * mask.total_keys().
template <typename T>
Tensor<T> masked_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                           NoDeduce<const Tensor<T>*> ext_k, NoDeduce<const Tensor<T>*> ext_v, const AttentionMask& mask,
                           int batch, int n_heads, NoDeduce<std::vector<T>*> probs);

template <typename T>
struct AttentionGrads {
  Tensor<T> dq, dk, dv, dext_k, dext_v;
};

template <typename T>
AttentionGrads<T> masked_attention_backward(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                                            NoDeduce<const Tensor<T>*> ext_k, NoDeduce<const Tensor<T>*> ext_v,
                                            const AttentionMask& mask, int batch, int n_heads,
                                            const std::vector<T>& probs, const Tensor<T>& dout);

}  // namespace tandem
