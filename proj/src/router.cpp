#include "tandem/router.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

#include "tandem/ops.hpp"

namespace tandem {

void RouterConfig::validate() const {
  if (k < 1) throw std::invalid_argument("RouterConfig: k must be >= 1");
  if (hidden_dim < 1) throw std::invalid_argument("RouterConfig: hidden_dim must be >= 1");
  if (!(tau > 0.0 && tau < 1.0)) throw std::invalid_argument("RouterConfig: tau must lie in (0, 1)");
  if (gamma_max < 1) throw std::invalid_argument("RouterConfig: gamma_max must be >= 1");
}

double tv_distance(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw std::invalid_argument("tv_distance: length mismatch");
  double sp = 0, sq = 0, d = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] < 0 || q[i] < 0) throw std::invalid_argument("tv_distance: negative probability");
    sp += p[i];
    sq += q[i];
    d += std::abs(p[i] - q[i]);
  }
  if (std::abs(sp - 1.0) > 1e-5 || std::abs(sq - 1.0) > 1e-5) throw std::invalid_argument("tv_distance: not normalised");
  return std::min(1.0, 0.5 * d);
}

std::vector<double> RouterFeatures::flatten() const {
  std::vector<double> f;
  f.reserve(1 + topk_probs.size() + topk_embeddings.size());
  f.push_back(entropy);
  f.insert(f.end(), topk_probs.begin(), topk_probs.end());
  f.insert(f.end(), topk_embeddings.begin(), topk_embeddings.end());
  return f;
}

template <typename T>
RouterFeatures extract_features(std::span<const double> dist, const Tensor<T>& embeddings, const RouterConfig& config) {
  const auto V = dist.size();
  if (config.k < 1 || static_cast<std::size_t>(config.k) > V) throw std::invalid_argument("extract_features: k > vocab");
  if (embeddings.rows() != V) throw std::invalid_argument("extract_features: embedding table does not match vocab");
  RouterFeatures f;
  for (double p : dist)
    if (p > 0) f.entropy -= p * std::log(p);
  std::vector<int> order(V);
  std::iota(order.begin(), order.end(), 0);
  std::partial_sort(order.begin(), order.begin() + config.k, order.end(),
                    [&](int a, int b) { return dist[a] > dist[b] || (dist[a] == dist[b] && a < b); });
  for (int i = 0; i < config.k; ++i) {
    f.topk_ids.push_back(order[i]);
    f.topk_probs.push_back(dist[order[i]]);
    for (T e : embeddings.row(order[i])) f.topk_embeddings.push_back(static_cast<double>(e));
  }
  return f;
}

namespace {

template <typename T>
std::vector<double> softmax_row(std::span<const T> logits) {
  std::vector<double> z(logits.begin(), logits.end());
  std::vector<double> p(z.size());
  softmax<double>(z, p);
  return p;
}

}  // namespace

template <typename T>
RouterDataset build_router_dataset(const TandemModel<T>& model, const TokenDataset& data, int seq_len,
                                   int max_windows, const RouterConfig& config) {
  config.validate();
  if (data.size() == 0) throw std::invalid_argument("build_router_dataset: empty corpus");
  const auto windows = data.sequential_windows(seq_len, max_windows);
  const int n_windows = static_cast<int>(windows.size() / seq_len);
  const int d = model.secondary.config().d_model;
  RouterDataset ds;
  ds.features = Tensor<float>({static_cast<std::size_t>(n_windows) * seq_len, static_cast<std::size_t>(config.feature_dim(d))});
  ds.targets.reserve(ds.features.rows());
  std::size_t row = 0;
  for (int w = 0; w < n_windows; ++w) {
    std::span<const int> ids(windows.data() + static_cast<std::size_t>(w) * seq_len, seq_len);
    const auto pass = tandem_forward(model, ids, 1, seq_len, false);
    for (int i = 0; i < seq_len; ++i, ++row) {
      const auto q = softmax_row<T>(pass.logits.row(i));
      const auto p = softmax_row<T>(pass.primary.logits.row(i));
      const auto feats = extract_features(std::span<const double>(q), model.secondary.tok_emb.value, config).flatten();
      std::copy(feats.begin(), feats.end(), ds.features.row(row).begin());
      ds.targets.push_back(static_cast<float>(tv_distance(q, p)));
    }
  }
  return ds;
}

template <typename T>
RouterMLP<T>::RouterMLP(int input_dim, int hidden_dim, std::uint64_t seed)
    : w1("router.w1", {static_cast<std::size_t>(input_dim), static_cast<std::size_t>(hidden_dim)}),
      b1("router.b1", {static_cast<std::size_t>(hidden_dim)}),
      w2("router.w2", {static_cast<std::size_t>(hidden_dim), 1}),
      b2("router.b2", {1}) {
  std::mt19937_64 gen(seed);
  init_normal(w1.value, 1.0 / std::sqrt(static_cast<double>(input_dim)), gen);
  init_normal(w2.value, 1.0 / std::sqrt(static_cast<double>(hidden_dim)), gen);
}

template <typename T>
ParameterSet<T> RouterMLP<T>::parameters() {
  ParameterSet<T> ps;
  ps.add(w1);
  ps.add(b1);
  ps.add(w2);
  ps.add(b2);
  return ps;
}

namespace {

template <typename T>
T sigmoid(T z) {
  return z >= 0 ? T(1) / (T(1) + std::exp(-z)) : std::exp(z) / (T(1) + std::exp(z));
}

// log(1 + e^z) without overflow.
template <typename T>
T softplus(T z) {
  return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
}

template <typename T>
struct RouterForward {
  Tensor<T> pre, hidden, z;
};

template <typename T>
RouterForward<T> router_forward(const RouterMLP<T>& r, const Tensor<T>& x) {
  RouterForward<T> f;
  f.pre = linear_forward(x, r.w1.value, &r.b1.value);
  f.hidden = f.pre;
  for (auto& v : f.hidden.values()) v = gelu(v);
  f.z = linear_forward(f.hidden, r.w2.value, &r.b2.value);
  return f;
}

}  // namespace

template <typename T>
std::vector<T> RouterMLP<T>::predict(const Tensor<T>& features) const {
  const auto f = router_forward(*this, features);
  std::vector<T> out(f.z.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = sigmoid(f.z[i]);
  return out;
}

template <typename T>
T RouterMLP<T>::predict_one(std::span<const double> features) const {
  Tensor<T> x({1, features.size()});
  for (std::size_t i = 0; i < features.size(); ++i) x[i] = static_cast<T>(features[i]);
  return predict(x)[0];
}

template <typename T>
double RouterMLP<T>::loss(const Tensor<T>& features, std::span<const T> targets) const {
  const auto f = router_forward(*this, features);
  if (targets.size() != f.z.size()) throw std::invalid_argument("router loss: one target per row required");
  double total = 0;
  // BCE with logits: softplus(z) - t z.
  for (std::size_t i = 0; i < targets.size(); ++i) total += softplus(f.z[i]) - static_cast<double>(targets[i]) * f.z[i];
  return total / static_cast<double>(targets.size());
}

template <typename T>
double RouterMLP<T>::loss_and_backward(const Tensor<T>& features, std::span<const T> targets) {
  const auto f = router_forward(*this, features);
  const std::size_t n = targets.size();
  if (n != f.z.size()) throw std::invalid_argument("router loss: one target per row required");
  double total = 0;
  Tensor<T> dz(f.z.shape());
  for (std::size_t i = 0; i < n; ++i) {
    total += softplus(f.z[i]) - static_cast<double>(targets[i]) * f.z[i];
    dz[i] = (sigmoid(f.z[i]) - targets[i]) / static_cast<T>(n);
  }
  Tensor<T> dh(f.hidden.shape());
  linear_backward(f.hidden, w2.value, dz, &dh, &w2.grad, &b2.grad);
  for (std::size_t i = 0; i < dh.size(); ++i) dh[i] *= gelu_grad(f.pre[i]);
  linear_backward(features, w1.value, dh, nullptr, &w1.grad, &b1.grad);
  return total / static_cast<double>(n);
}

template <typename T>
RouterMLP<T> train_router(const RouterDataset& dataset, const RouterConfig& config, const RouterTrainConfig& train,
                          std::vector<double>* loss_curve) {
  config.validate();
  if (dataset.size() == 0) throw std::invalid_argument("train_router: empty dataset");
  const std::size_t N = dataset.size(), F = dataset.features.cols();
  RouterMLP<T> router(static_cast<int>(F), config.hidden_dim, train.seed);
  auto ps = router.parameters();
  Adam<T> adam(AdamConfig{.lr = train.lr, .grad_clip = 1.0});
  CounterRng rng(train.seed);
  const std::size_t B = std::min<std::size_t>(static_cast<std::size_t>(train.batch_size), N);
  Tensor<T> x({B, F});
  std::vector<T> t(B);
  for (int step = 0; step < train.steps; ++step) {
    for (std::size_t b = 0; b < B; ++b) {
      const std::size_t r = B == N ? b : static_cast<std::size_t>(rng.below(N));
      auto src = dataset.features.row(r);
      std::transform(src.begin(), src.end(), x.row(b).begin(), [](float v) { return static_cast<T>(v); });
      t[b] = static_cast<T>(dataset.targets[r]);
    }
    ps.zero_grad();
    const double l = router.loss_and_backward(x, t);
    if (loss_curve) loss_curve->push_back(l);
    adam.step(ps);
  }
  return router;
}

RouterDecision should_continue(double disagreement, int steps_in_block, const RouterConfig& config) {
  if (steps_in_block >= config.gamma_max) return RouterDecision::VERIFY;
  const bool go = config.invert_threshold ? disagreement <= config.tau : (1.0 - disagreement) >= config.tau;
  return go ? RouterDecision::CONTINUE : RouterDecision::VERIFY;
}

#define TANDEM_INSTANTIATE_ROUTER(T)                                                                            \
  template RouterFeatures extract_features<T>(std::span<const double>, const Tensor<T>&, const RouterConfig&);  \
  template RouterDataset build_router_dataset<T>(const TandemModel<T>&, const TokenDataset&, int, int,          \
                                                 const RouterConfig&);                                          \
  template class RouterMLP<T>;                                                                                  \
  template RouterMLP<T> train_router<T>(const RouterDataset&, const RouterConfig&, const RouterTrainConfig&,    \
                                        std::vector<double>*);

TANDEM_INSTANTIATE_ROUTER(float)
TANDEM_INSTANTIATE_ROUTER(double)

}  // namespace tandem
