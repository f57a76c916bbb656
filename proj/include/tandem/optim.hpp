#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "tandem/params.hpp"

namespace tandem {

template <typename T>
struct AdamState {
  std::int64_t step = 0;
  Tensor<T> m, v;
};

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double grad_clip = 1.0;  // global L2 norm; <= 0 disables
};

/// Adam with bias correction. Frozen parameters are never touched and keep
/// no state.
template <typename T>
class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) {}

  /// Applies one update with learning rate `lr` to every trainable parameter.
  /// Returns the pre-clip global gradient norm.
  double step(ParameterSet<T>& params, double lr);
  double step(ParameterSet<T>& params) { return step(params, config_.lr); }

  const AdamConfig& config() const { return config_; }
  const AdamState<T>* state(const std::string& name) const;

 private:
  AdamConfig config_;
  std::vector<std::pair<std::string, AdamState<T>>> states_;
};

/// Linear warm-up then cosine decay to `min_ratio * peak`.
struct LrSchedule {
  double peak = 3e-4;
  std::int64_t warmup = 100;
  std::int64_t total = 1000;
  double min_ratio = 0.1;

  double at(std::int64_t step) const;
};

}  // namespace tandem
