#pragma once

#include "ddnn/tensor.hpp"

#include <cmath>
#include <initializer_list>
#include <string>

namespace ddnn::detail {

template <typename S>
using GradFn = typename Node<S>::GradFn;

template <typename S>
void check_finite(const char* op, std::initializer_list<const Tensor<S>*> inputs) {
  if (!checked_mode()) return;
  for (const Tensor<S>* t : inputs) {
    if (!t->data().allFinite()) {
      throw NumericError(std::string(op) + ": non-finite input of shape " + shape_str(t->shape()));
    }
  }
}

[[noreturn]] inline void shape_fail(const char* op, const std::string& what) {
  throw ShapeError(std::string(op) + ": " + what);
}

inline void require_same_shape(const char* op, const Shape& a, const Shape& b) {
  if (a != b) shape_fail(op, "shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

inline int normalize_axis(const char* op, int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) {
    shape_fail(op, "axis " + std::to_string(axis) + " out of range for rank " + std::to_string(r));
  }
  return axis;
}

inline Shape strides_of(const Shape& shape) {
  Shape st(shape.size(), 1);
  for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * shape[i + 1];
  return st;
}

// Builds the output tensor and, when differentiation is active, the node producing it.
template <typename S>
Tensor<S> make_result(const char* op, Shape shape, Buffer<S> data,
                      std::initializer_list<const Tensor<S>*> inputs, GradFn<S> grad_fn) {
  Tensor<S> out = Tensor<S>::from(std::move(shape), std::move(data));
  bool needs = false;
  for (const Tensor<S>* t : inputs) needs = needs || t->requires_grad();
  if (!needs || !grad_enabled()) return out;

  auto node = std::make_shared<Node<S>>();
  node->seq = next_node_seq();
  node->op = op;
  for (const Tensor<S>* t : inputs) node->inputs.push_back(t->impl_ptr());
  node->output = out.impl_ptr().get();
  node->grad_fn = std::move(grad_fn);
  out.impl_ptr()->requires_grad = true;
  out.impl_ptr()->node = std::move(node);
  return out;
}

}  // namespace ddnn::detail
