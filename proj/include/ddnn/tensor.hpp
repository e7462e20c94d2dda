#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace ddnn {

using Index = std::int64_t;
using Shape = std::vector<Index>;

enum class DType { f32, f64 };

template <typename Scalar>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<Scalar, float> || std::is_same_v<Scalar, double>,
                "tensors hold float or double");
  return std::is_same_v<Scalar, float> ? DType::f32 : DType::f64;
}

const char* dtype_name(DType t);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

Index numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

// Checked mode: forward primitives reject NaN/Inf inputs. Off by default.
void set_checked_mode(bool on);
bool checked_mode();

// While alive, forward primitives on this thread record no graph nodes.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};
bool grad_enabled();

template <typename Scalar>
class Tensor;

namespace detail {

template <typename Scalar>
struct TensorImpl;

template <typename Scalar>
using Buffer = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

// One recorded primitive application. Owned by its output tensor; holds its inputs alive.
template <typename Scalar>
struct Node {
  using GradFn = std::function<void(const Buffer<Scalar>& grad_out,
                                    std::vector<Buffer<Scalar>*>& grad_in)>;

  std::uint64_t seq = 0;
  std::string op;
  std::vector<std::shared_ptr<TensorImpl<Scalar>>> inputs;
  TensorImpl<Scalar>* output = nullptr;
  GradFn grad_fn;
  bool consumed = false;
};

template <typename Scalar>
struct TensorImpl {
  Shape shape;
  Buffer<Scalar> data;
  Buffer<Scalar> grad;  // size 0 when absent
  bool requires_grad = false;
  std::shared_ptr<Node<Scalar>> node;  // null for leaves
};

std::uint64_t next_node_seq();

}  // namespace detail

// Dense row-major N-d array with an optional gradient and a link to the primitive that
// produced it. Copies share storage; use clone() for an independent value.
template <typename Scalar>
class Tensor {
 public:
  using Buffer = detail::Buffer<Scalar>;
  using Impl = detail::TensorImpl<Scalar>;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, Scalar value, bool requires_grad = false);
  static Tensor from(Shape shape, Buffer data, bool requires_grad = false);
  static Tensor from(Shape shape, std::initializer_list<Scalar> values, bool requires_grad = false);
  static Tensor scalar(Scalar value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl().shape; }
  Index dim(std::size_t axis) const { return impl().shape.at(axis); }
  std::size_t rank() const { return impl().shape.size(); }
  Index numel() const { return static_cast<Index>(impl().data.size()); }

  const Buffer& data() const { return impl().data; }
  // In-place access for parameters (initialization, optimizer steps). Never call on a
  // tensor that is an input of a graph still to be differentiated.
  Buffer& mutable_data() { return impl().data; }
  Scalar item() const;

  bool requires_grad() const { return impl().requires_grad; }
  void set_requires_grad(bool on);
  bool is_leaf() const { return impl().node == nullptr; }

  bool has_grad() const { return impl().grad.size() != 0; }
  const Buffer& grad() const { return impl().grad; }
  Buffer& mutable_grad();
  void zero_grad();

  // New leaf sharing no graph history. Data is copied.
  Tensor detach() const;
  Tensor clone() const { return detach(); }

  const std::shared_ptr<Impl>& impl_ptr() const { return impl_; }
  explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}

 private:
  Impl& impl() const;
  std::shared_ptr<Impl> impl_;
};

struct BackwardOptions {
  // false frees the graph after the pass; a second pass over it then raises GraphError.
  bool retain_graph = true;
};

// Accumulates dLoss/dLeaf into the grad of every requires_grad leaf reachable from loss.
template <typename Scalar>
void backward(const Tensor<Scalar>& loss, BackwardOptions opts = {});

template <typename Scalar>
void zero_grad(std::vector<Tensor<Scalar>>& params);

// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every element of x.
template <typename Scalar>
Tensor<Scalar> finite_difference_grad(const std::function<Scalar(const Tensor<Scalar>&)>& f,
                                      const Tensor<Scalar>& x, Scalar step);

// max_i |a_i - b_i| / max(max_i |b_i|, floor): error relative to the reference gradient scale.
template <typename Scalar>
double max_relative_error(const detail::Buffer<Scalar>& analytic,
                          const detail::Buffer<Scalar>& reference, double floor = 1e-8);

}  // namespace ddnn
