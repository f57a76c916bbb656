#include "tandem/optim.hpp"

#include <cmath>
#include <numbers>

namespace tandem {

template <typename T>
double Adam<T>::step(ParameterSet<T>& params, double lr) {
  double sq = 0;
  for (auto* p : params) {
    if (!p->trainable) continue;
    for (T g : p->grad.values()) sq += static_cast<double>(g) * g;
  }
  const double norm = std::sqrt(sq);
  const double clip = (config_.grad_clip > 0 && norm > config_.grad_clip) ? config_.grad_clip / norm : 1.0;

  for (auto* p : params) {
    if (!p->trainable) continue;
    AdamState<T>* st = nullptr;
    for (auto& [name, s] : states_)
      if (name == p->name) st = &s;
    if (!st) {
      states_.push_back({p->name, AdamState<T>{0, Tensor<T>(p->value.shape()), Tensor<T>(p->value.shape())}});
      st = &states_.back().second;
    }
    st->step += 1;
    const double b1 = config_.beta1, b2 = config_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(st->step));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(st->step));
    auto& val = p->value;
    const auto& grad = p->grad;
    for (std::size_t i = 0; i < val.size(); ++i) {
      const double g = static_cast<double>(grad[i]) * clip;
      const double m = b1 * st->m[i] + (1.0 - b1) * g;
      const double v = b2 * st->v[i] + (1.0 - b2) * g * g;
      st->m[i] = static_cast<T>(m);
      st->v[i] = static_cast<T>(v);
      const double mhat = m / c1, vhat = v / c2;
      val[i] = static_cast<T>(val[i] - lr * mhat / (std::sqrt(vhat) + config_.eps));
    }
  }
  return norm;
}

template <typename T>
const AdamState<T>* Adam<T>::state(const std::string& name) const {
  for (auto& [n, s] : states_)
    if (n == name) return &s;
  return nullptr;
}

double LrSchedule::at(std::int64_t step) const {
  if (warmup > 0 && step < warmup) return peak * static_cast<double>(step + 1) / static_cast<double>(warmup);
  const double span = static_cast<double>(std::max<std::int64_t>(1, total - warmup));
  const double t = std::min(1.0, static_cast<double>(step - warmup) / span);
  const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * t));
  return peak * (min_ratio + (1.0 - min_ratio) * cosine);
}

template class Adam<float>;
template class Adam<double>;

}  // namespace tandem
