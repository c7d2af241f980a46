#pragma once

#include <initializer_list>
#include <memory>
#include <vector>

#include "tfn/tensor.hpp"

namespace tfn::detail {

// Wraps freshly computed values as an operation result, recording the tape
// entry when any input requires a gradient and recording is enabled.
inline Tensor make_result(Shape shape, std::vector<Real> value, std::vector<Tensor> inputs,
                          std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->is_leaf = false;
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& t : inputs) needs = needs || (t.defined() && t.requires_grad());
  }
  if (needs) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (const auto& t : inputs) node->inputs.push_back(t.node());
    node->backward = std::move(backward_fn);
  }
  return Tensor(std::move(node));
}

inline bool wants_grad(const std::shared_ptr<Node>& node) {
  return node && node->requires_grad;
}

}  // namespace tfn::detail
