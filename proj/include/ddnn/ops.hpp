#pragma once

#include "ddnn/tensor.hpp"

#include <utility>
#include <vector>

// Differentiable primitives. Every function records a graph node when any input requires
// grad and grad mode is enabled. Shapes must match exactly unless stated; use broadcast_to.
namespace ddnn {

using Axes = std::vector<int>;

template <typename S> Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> neg(const Tensor<S>& a);
template <typename S> Tensor<S> scale(const Tensor<S>& a, S factor);
template <typename S> Tensor<S> add_scalar(const Tensor<S>& a, S value);
template <typename S> Tensor<S> relu(const Tensor<S>& a);
template <typename S> Tensor<S> exp(const Tensor<S>& a);
// log(max(a, floor)); the gradient is zero where a < floor. floor = 0 is the plain log.
template <typename S> Tensor<S> log(const Tensor<S>& a, S floor = S(0));
template <typename S> Tensor<S> abs(const Tensor<S>& a);
template <typename S> Tensor<S> square(const Tensor<S>& a);

template <typename S> Tensor<S> sum(const Tensor<S>& a, const Axes& axes, bool keepdim = false);
template <typename S> Tensor<S> mean(const Tensor<S>& a, const Axes& axes, bool keepdim = false);
// Reduces every element to a scalar of shape {}.
template <typename S> Tensor<S> sum_all(const Tensor<S>& a);
template <typename S> Tensor<S> mean_all(const Tensor<S>& a);
// Max along one axis; the gradient goes to the first maximal element.
template <typename S> Tensor<S> max(const Tensor<S>& a, int axis, bool keepdim = false);

// Zero padding: one (before, after) pair per axis.
template <typename S>
Tensor<S> pad(const Tensor<S>& a, const std::vector<std::pair<Index, Index>>& widths);
template <typename S> Tensor<S> slice(const Tensor<S>& a, int axis, Index begin, Index end);
template <typename S> Tensor<S> reshape(const Tensor<S>& a, Shape shape);
// Same rank; every source extent equals the target extent or is 1.
template <typename S> Tensor<S> broadcast_to(const Tensor<S>& a, const Shape& shape);

template <typename S> Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> transpose(const Tensor<S>& a);

struct Conv2dAttrs {
  Index stride = 1;
  Index padding = 0;
};

// NCHW input, OIHW kernel. Lowered to one GEMM per call through an im2col buffer.
template <typename S>
Tensor<S> conv2d(const Tensor<S>& input, const Tensor<S>& weight, Conv2dAttrs attrs = {});

struct Pool2dAttrs {
  Index kernel = 2;
  Index stride = 2;
  Index padding = 0;
};
template <typename S> Tensor<S> max_pool2d(const Tensor<S>& input, Pool2dAttrs attrs = {});

template <typename S>
struct BatchStats {
  detail::Buffer<S> mean;
  detail::Buffer<S> var;  // biased
};

// Per-channel normalization of an N x C x ... tensor with the batch's own statistics.
template <typename S>
Tensor<S> batch_norm_train(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                           S epsilon, BatchStats<S>* stats = nullptr);

// Affine normalization with fixed statistics.
template <typename S>
Tensor<S> batch_norm_eval(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                          const detail::Buffer<S>& mean, const detail::Buffer<S>& var, S epsilon);

// Row-wise log-softmax of an N x M tensor, max-shifted.
template <typename S> Tensor<S> log_softmax(const Tensor<S>& logits);

}  // namespace ddnn
