#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "tandem/data.hpp"
#include "tandem/optim.hpp"
#include "tandem/tandem.hpp"

namespace tandem {

struct RouterConfig {
  int k = 4;
  int hidden_dim = 32;
  double tau = 0.8;
  int gamma_max = 17;
  /// Continue while predicted disagreement <= tau instead of agreement >= tau.
  bool invert_threshold = false;

  void validate() const;
  int feature_dim(int d_model) const { return 1 + k + k * d_model; }
};

/// 0.5 * sum |p - q|. Both must be normalised to within 1e-5.
double tv_distance(std::span<const double> p, std::span<const double> q);

struct RouterFeatures {
  double entropy = 0;               // nats
  std::vector<double> topk_probs;   // descending
  std::vector<int> topk_ids;
  std::vector<double> topk_embeddings;  // k rows of d_model, concatenated

  std::vector<double> flatten() const;
};

/// Entropy, top-k probabilities (ties to the lower id) and the input
/// embeddings of the top-k tokens.
template <typename T>
RouterFeatures extract_features(std::span<const double> dist, const Tensor<T>& embeddings, const RouterConfig& config);

struct RouterDataset {
  Tensor<float> features;  // [N, feature_dim]
  std::vector<float> targets;  // TV(secondary, primary) per row

  std::size_t size() const { return targets.size(); }
};

/// Teacher-forced tandem passes over consecutive windows of `seq_len` tokens
/// (at most `max_windows`); one row per position.
template <typename T>
RouterDataset build_router_dataset(const TandemModel<T>& model, const TokenDataset& data, int seq_len,
                                   int max_windows, const RouterConfig& config);

/// linear -> GeLU -> linear -> sigmoid.
template <typename T>
class RouterMLP {
 public:
  RouterMLP(int input_dim, int hidden_dim, std::uint64_t seed);

  int input_dim() const { return static_cast<int>(w1.value.dim(0)); }
  int hidden_dim() const { return static_cast<int>(w1.value.dim(1)); }
  ParameterSet<T> parameters();

  /// Disagreement probabilities, one per row.
  std::vector<T> predict(const Tensor<T>& features) const;
  T predict_one(std::span<const double> features) const;

  /// Mean soft-target BCE; accumulates parameter gradients.
  double loss_and_backward(const Tensor<T>& features, std::span<const T> targets);
  double loss(const Tensor<T>& features, std::span<const T> targets) const;

  Parameter<T> w1, b1, w2, b2;
};

struct RouterTrainConfig {
  int steps = 500;
  int batch_size = 64;
  double lr = 3e-3;
  std::uint64_t seed = 1;
};

template <typename T>
RouterMLP<T> train_router(const RouterDataset& dataset, const RouterConfig& config, const RouterTrainConfig& train = {},
                          std::vector<double>* loss_curve = nullptr);

enum class RouterDecision { CONTINUE, VERIFY };

RouterDecision should_continue(double disagreement, int steps_in_block, const RouterConfig& config);

}  // namespace tandem
