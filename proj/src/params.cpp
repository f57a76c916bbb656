#include "tandem/params.hpp"

#include <stdexcept>

namespace tandem {

template <typename T>
void ParameterSet<T>::add(Parameter<T>& p) {
  if (find(p.name)) throw std::invalid_argument("duplicate parameter name: " + p.name);
  if (p.grad.shape() != p.value.shape()) p.grad = Tensor<T>(p.value.shape());
  params_.push_back(&p);
}

template <typename T>
void ParameterSet<T>::append(const ParameterSet& other) {
  for (auto* p : other.params_) add(*p);
}

template <typename T>
Parameter<T>* ParameterSet<T>::find(const std::string& name) {
  for (auto* p : params_)
    if (p->name == name) return p;
  return nullptr;
}

template <typename T>
const Parameter<T>* ParameterSet<T>::find(const std::string& name) const {
  for (auto* p : params_)
    if (p->name == name) return p;
  return nullptr;
}

template <typename T>
void ParameterSet<T>::zero_grad() {
  for (auto* p : params_) p->zero_grad();
}

template <typename T>
void ParameterSet<T>::set_trainable(bool trainable) {
  for (auto* p : params_) p->trainable = trainable;
}

template <typename T>
std::size_t ParameterSet<T>::count_values() const {
  std::size_t n = 0;
  for (auto* p : params_) n += p->value.size();
  return n;
}

template <typename T>
std::map<std::string, Tensor<float>> ParameterSet<T>::export_values() const {
  std::map<std::string, Tensor<float>> out;
  for (auto* p : params_) out.emplace(p->name, p->value.template cast<float>());
  return out;
}

template <typename T>
void ParameterSet<T>::import_values(const std::map<std::string, Tensor<float>>& tensors, const std::string& prefix) {
  for (auto* p : params_) {
    auto it = tensors.find(prefix + p->name);
    if (it == tensors.end()) throw std::runtime_error("checkpoint is missing parameter '" + prefix + p->name + "'");
    if (it->second.shape() != p->value.shape()) {
      throw std::runtime_error("parameter '" + p->name + "' has shape " + shape_to_string(p->value.shape()) +
                               " but checkpoint holds " + shape_to_string(it->second.shape()));
    }
    p->value = it->second.template cast<T>();
  }
}

template class ParameterSet<float>;
template class ParameterSet<double>;

}  // namespace tandem
