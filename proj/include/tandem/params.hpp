#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "tandem/tensor.hpp"

namespace tandem {

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, Shape shape) : name(std::move(n)), value(shape), grad(shape) {}

  void zero_grad() { grad.zero(); }
};

/// Non-owning, ordered view over a model's parameters. Registration order is
/// the canonical order for optimizers and checkpoints.
template <typename T>
class ParameterSet {
 public:
  void add(Parameter<T>& p);
  void append(const ParameterSet& other);

  std::size_t size() const { return params_.size(); }
  Parameter<T>& operator[](std::size_t i) { return *params_[i]; }
  const Parameter<T>& operator[](std::size_t i) const { return *params_[i]; }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  Parameter<T>* find(const std::string& name);
  const Parameter<T>* find(const std::string& name) const;

  void zero_grad();
  void set_trainable(bool trainable);
  std::size_t count_values() const;

  /// Copies values into a name -> tensor map (float for persistence).
  std::map<std::string, Tensor<float>> export_values() const;
  /// Loads by name; every parameter must be present with a matching shape.
  void import_values(const std::map<std::string, Tensor<float>>& tensors, const std::string& prefix = "");

 private:
  std::vector<Parameter<T>*> params_;
};

/// Normal(0, std) initialisation from a 64-bit seed.
template <typename T>
void init_normal(Tensor<T>& t, double stddev, std::mt19937_64& gen) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.values()) v = static_cast<T>(dist(gen));
}

}  // namespace tandem
