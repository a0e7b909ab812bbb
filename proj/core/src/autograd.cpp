#include "cats/autograd.hpp"

namespace cats::ag {

template <typename T>
Var<T> ParameterSet<T>::add(std::string name, Tensor<T> init) {
  if (find(name)) throw ConfigError("duplicate parameter name: " + name);
  auto v = parameter(std::move(init));
  items_.emplace_back(std::move(name), v);
  return v;
}

template <typename T>
Var<T> ParameterSet<T>::find(const std::string& name) const {
  for (const auto& [n, v] : items_)
    if (n == name) return v;
  return nullptr;
}

template <typename T>
std::int64_t ParameterSet<T>::element_count() const {
  std::int64_t n = 0;
  for (const auto& item : items_) n += item.second->value.size();
  return n;
}

template <typename T>
void ParameterSet<T>::zero_grad() {
  for (auto& item : items_) item.second->grad = Tensor<T>();
}

template class ParameterSet<float>;
template class ParameterSet<double>;

}  // namespace cats::ag
