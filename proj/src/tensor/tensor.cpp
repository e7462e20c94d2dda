#include "ddnn/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace ddnn {

namespace {
std::atomic<bool> g_checked{false};
thread_local bool t_grad_enabled = true;
std::atomic<std::uint64_t> g_seq{0};
}  // namespace

const char* dtype_name(DType t) { return t == DType::f32 ? "f32" : "f64"; }

Index numel_of(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) {
    if (d < 0) throw ShapeError("negative extent in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

void set_checked_mode(bool on) { g_checked = on; }
bool checked_mode() { return g_checked; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }
bool grad_enabled() { return t_grad_enabled; }

std::uint64_t detail::next_node_seq() { return ++g_seq; }

template <typename Scalar>
typename Tensor<Scalar>::Impl& Tensor<Scalar>::impl() const {
  if (!impl_) throw std::logic_error("use of an undefined tensor");
  return *impl_;
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), Scalar(0), requires_grad);
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::full(Shape shape, Scalar value, bool requires_grad) {
  const Index n = numel_of(shape);
  return from(std::move(shape), Buffer::Constant(n, value), requires_grad);
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::from(Shape shape, Buffer data, bool requires_grad) {
  if (numel_of(shape) != data.size()) {
    throw ShapeError("tensor shape " + shape_str(shape) + " does not match " +
                     std::to_string(data.size()) + " elements");
  }
  auto impl = std::make_shared<Impl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::from(Shape shape, std::initializer_list<Scalar> values,
                                    bool requires_grad) {
  Buffer data(static_cast<Index>(values.size()));
  std::copy(values.begin(), values.end(), data.data());
  return from(std::move(shape), std::move(data), requires_grad);
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::scalar(Scalar value, bool requires_grad) {
  return full({}, value, requires_grad);
}

template <typename Scalar>
Scalar Tensor<Scalar>::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return data()(0);
}

template <typename Scalar>
void Tensor<Scalar>::set_requires_grad(bool on) {
  if (!is_leaf()) throw GraphError("requires_grad can only be changed on leaf tensors");
  impl().requires_grad = on;
}

template <typename Scalar>
typename Tensor<Scalar>::Buffer& Tensor<Scalar>::mutable_grad() {
  auto& im = impl();
  if (im.grad.size() == 0) im.grad = Buffer::Zero(im.data.size());
  return im.grad;
}

template <typename Scalar>
void Tensor<Scalar>::zero_grad() {
  auto& im = impl();
  if (im.grad.size() == 0) {
    im.grad = Buffer::Zero(im.data.size());
  } else {
    im.grad.setZero();
  }
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::detach() const {
  return from(shape(), data(), false);
}

template <typename Scalar>
void backward(const Tensor<Scalar>& loss, BackwardOptions opts) {
  using Impl = detail::TensorImpl<Scalar>;
  using Node = detail::Node<Scalar>;
  using Buffer = detail::Buffer<Scalar>;

  if (loss.numel() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
  }
  Impl* root = loss.impl_ptr().get();
  if (!root->requires_grad) throw GraphError("backward: loss is not connected to any parameter");

  std::unordered_map<Impl*, Buffer> leaf_acc;
  std::vector<Impl*> leaf_order;
  auto leaf_slot = [&](Impl* leaf) -> Buffer* {
    auto [it, inserted] = leaf_acc.try_emplace(leaf);
    if (inserted) {
      it->second = Buffer::Zero(leaf->data.size());
      leaf_order.push_back(leaf);
    }
    return &it->second;
  };

  if (!root->node) {
    *leaf_slot(root) += Scalar(1);
  } else {
    std::vector<Node*> nodes;
    std::unordered_set<Node*> seen;
    std::vector<Node*> stack{root->node.get()};
    seen.insert(root->node.get());
    while (!stack.empty()) {
      Node* n = stack.back();
      stack.pop_back();
      if (n->consumed) throw GraphError("backward: graph already consumed (op " + n->op + ")");
      nodes.push_back(n);
      for (const auto& in : n->inputs) {
        if (in->requires_grad && in->node && seen.insert(in->node.get()).second) {
          stack.push_back(in->node.get());
        }
      }
    }
    // Creation order is a topological order; walk it backwards.
    std::sort(nodes.begin(), nodes.end(), [](const Node* a, const Node* b) { return a->seq > b->seq; });

    std::unordered_map<Impl*, Buffer> grads;
    grads[root] = Buffer::Ones(1);
    std::vector<Buffer*> grad_in;
    for (Node* n : nodes) {
      auto it = grads.find(n->output);
      if (it == grads.end()) continue;
      grad_in.assign(n->inputs.size(), nullptr);
      for (std::size_t i = 0; i < n->inputs.size(); ++i) {
        Impl* in = n->inputs[i].get();
        if (!in->requires_grad) continue;
        if (!in->node) {
          grad_in[i] = leaf_slot(in);
        } else {
          auto [git, inserted] = grads.try_emplace(in);
          if (inserted) git->second = Buffer::Zero(in->data.size());
          grad_in[i] = &git->second;
        }
      }
      n->grad_fn(it->second, grad_in);
      grads.erase(n->output);
    }

    for (Impl* leaf : leaf_order) {
      Buffer& acc = leaf_acc[leaf];
      if (leaf->grad.size() == 0) {
        leaf->grad = std::move(acc);
      } else {
        leaf->grad += acc;
      }
    }
    if (!opts.retain_graph) {
      for (Node* n : nodes) {
        n->consumed = true;
        n->grad_fn = nullptr;
      }
      // Releasing inputs can free nodes still listed above, so collect them and drop together.
      std::vector<std::shared_ptr<Impl>> released;
      for (Node* n : nodes) {
        for (auto& in : n->inputs) released.push_back(std::move(in));
        n->inputs.clear();
      }
    }
    return;
  }

  for (Impl* leaf : leaf_order) {
    if (leaf->grad.size() == 0) {
      leaf->grad = std::move(leaf_acc[leaf]);
    } else {
      leaf->grad += leaf_acc[leaf];
    }
  }
}

template <typename Scalar>
void zero_grad(std::vector<Tensor<Scalar>>& params) {
  for (auto& p : params) p.zero_grad();
}

template <typename Scalar>
Tensor<Scalar> finite_difference_grad(const std::function<Scalar(const Tensor<Scalar>&)>& f,
                                      const Tensor<Scalar>& x, Scalar step) {
  if (!(step > Scalar(0))) throw std::invalid_argument("finite_difference_grad: step must be > 0");
  NoGradGuard no_grad;
  Tensor<Scalar> probe = x.detach();
  auto& d = probe.mutable_data();
  typename Tensor<Scalar>::Buffer g(d.size());
  for (Index i = 0; i < d.size(); ++i) {
    const Scalar orig = d(i);
    d(i) = orig + step;
    const Scalar fp = f(probe);
    d(i) = orig - step;
    const Scalar fm = f(probe);
    d(i) = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericError("finite_difference_grad: non-finite function value at element " +
                         std::to_string(i));
    }
    g(i) = (fp - fm) / (Scalar(2) * step);
  }
  return Tensor<Scalar>::from(x.shape(), std::move(g));
}

template <typename Scalar>
double max_relative_error(const detail::Buffer<Scalar>& analytic,
                          const detail::Buffer<Scalar>& reference, double floor) {
  if (analytic.size() != reference.size()) {
    throw ShapeError("max_relative_error: size mismatch");
  }
  if (analytic.size() == 0) return 0.0;
  const double scale = std::max(static_cast<double>(reference.abs().maxCoeff()), floor);
  return static_cast<double>((analytic - reference).abs().maxCoeff()) / scale;
}

#define DDNN_INSTANTIATE(S)                                                                    \
  template class Tensor<S>;                                                                    \
  template void backward<S>(const Tensor<S>&, BackwardOptions);                                \
  template void zero_grad<S>(std::vector<Tensor<S>>&);                                         \
  template Tensor<S> finite_difference_grad<S>(const std::function<S(const Tensor<S>&)>&,      \
                                               const Tensor<S>&, S);                           \
  template double max_relative_error<S>(const detail::Buffer<S>&, const detail::Buffer<S>&,    \
                                        double);
DDNN_INSTANTIATE(float)
DDNN_INSTANTIATE(double)
#undef DDNN_INSTANTIATE

}  // namespace ddnn
