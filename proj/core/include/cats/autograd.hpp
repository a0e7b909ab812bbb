#pragma once

// Minimal reverse-mode differentiation over whole-tensor operations. Each op
// computes its value eagerly and, when a tape is supplied and an input
// requires a gradient, records a closure that back-propagates into its inputs.
// Passing a null tape runs pure inference with no bookkeeping.

#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "cats/tensor.hpp"

namespace cats::ag {

template <typename T>
struct Variable {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;

  // Gradient storage, zero-initialised on first use.
  Tensor<T>& grad_buffer() {
    if (grad.shape() != value.shape()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

template <typename T>
using Var = std::shared_ptr<Variable<T>>;

template <typename T>
Var<T> constant(Tensor<T> value) {
  auto v = std::make_shared<Variable<T>>();
  v->value = std::move(value);
  return v;
}

template <typename T>
Var<T> parameter(Tensor<T> value) {
  auto v = constant(std::move(value));
  v->requires_grad = true;
  return v;
}

template <typename T>
class Tape {
 public:
  void record(std::function<void()> backward) { ops_.push_back(std::move(backward)); }

  // Seeds d(output)/d(output) = seed on every element of `output`, replays the
  // recorded closures in reverse and clears the tape. Gradients accumulate
  // into Variable::grad.
  void backward(const Var<T>& output, T seed = T{1}) {
    output->grad_buffer().fill(seed);
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
    ops_.clear();
  }

  void clear() { ops_.clear(); }
  std::size_t size() const noexcept { return ops_.size(); }

 private:
  std::vector<std::function<void()>> ops_;
};

template <typename T>
bool tracked(const Tape<T>* tape, const Var<T>& v) {
  return tape != nullptr && v && v->requires_grad;
}

// Ordered, named collection of trainable tensors.
template <typename T>
class ParameterSet {
 public:
  Var<T> add(std::string name, Tensor<T> init);
  Var<T> find(const std::string& name) const;
  const std::vector<std::pair<std::string, Var<T>>>& items() const noexcept { return items_; }
  std::int64_t element_count() const;
  void zero_grad();

 private:
  std::vector<std::pair<std::string, Var<T>>> items_;
};

}  // namespace cats::ag
