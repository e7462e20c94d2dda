#include "ddnn/layers.hpp"

#include <cmath>

namespace ddnn::nn {

namespace {

template <typename S>
std::string slot_suffix(int slot) {
  return slot == 0 ? std::string() : ".net" + std::to_string(slot);
}

}  // namespace

template <typename S>
Conv2dLayer<S>::Conv2dLayer(Index in_ch, Index out_ch, Index kernel, Index stride_, Index padding_,
                            bool with_bias, Rng& rng)
    : stride(stride_), padding(padding_) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(out_ch * kernel * kernel));
  std::normal_distribution<double> dist(0.0, stddev);
  detail::Buffer<S> w(out_ch * in_ch * kernel * kernel);
  for (Index i = 0; i < w.size(); ++i) w(i) = static_cast<S>(dist(rng));
  weight = Tensor<S>::from({out_ch, in_ch, kernel, kernel}, std::move(w), true);
  if (with_bias) bias = Tensor<S>::zeros({out_ch}, true);
}

template <typename S>
Tensor<S> Conv2dLayer<S>::forward(const Tensor<S>& x) const {
  Tensor<S> y = conv2d(x, weight, Conv2dAttrs{stride, padding});
  if (!bias.defined()) return y;
  Tensor<S> b = reshape(bias, {1, bias.numel(), 1, 1});
  return add(y, broadcast_to(b, y.shape()));
}

template <typename S>
void Conv2dLayer<S>::visit(const std::string& prefix, const StateVisitor<S>& v) {
  if (v.param) {
    v.param(prefix + ".weight", weight);
    if (bias.defined()) v.param(prefix + ".bias", bias);
  }
}

template <typename S>
BatchNormLayer<S>::BatchNormLayer(Index channels, int slots) {
  gamma = Tensor<S>::full({channels}, S(1), true);
  beta = Tensor<S>::zeros({channels}, true);
  running_mean.assign(static_cast<std::size_t>(slots), detail::Buffer<S>::Zero(channels));
  running_var.assign(static_cast<std::size_t>(slots), detail::Buffer<S>::Ones(channels));
}

template <typename S>
Tensor<S> BatchNormLayer<S>::forward(const Tensor<S>& x, Mode mode, int slot) {
  if (slot < 0 || slot >= slots()) {
    throw std::out_of_range("batch norm statistics slot " + std::to_string(slot) + " of " +
                            std::to_string(slots()));
  }
  if (mode == Mode::eval) {
    return batch_norm_eval(x, gamma, beta, running_mean[slot], running_var[slot], epsilon);
  }
  BatchStats<S> stats;
  Tensor<S> y = batch_norm_train(x, gamma, beta, epsilon, &stats);
  running_mean[slot] = (S(1) - momentum) * running_mean[slot] + momentum * stats.mean;
  running_var[slot] = (S(1) - momentum) * running_var[slot] + momentum * stats.var;
  return y;
}

template <typename S>
void BatchNormLayer<S>::visit(const std::string& prefix, const StateVisitor<S>& v) {
  if (v.param) {
    v.param(prefix + ".gamma", gamma);
    v.param(prefix + ".beta", beta);
  }
  if (v.buffer) {
    for (int s = 0; s < slots(); ++s) {
      v.buffer(prefix + ".running_mean" + slot_suffix<S>(s), running_mean[s]);
      v.buffer(prefix + ".running_var" + slot_suffix<S>(s), running_var[s]);
    }
  }
}

template <typename S>
LinearClassifier<S>::LinearClassifier(Index features, Index classes, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(features));
  std::uniform_real_distribution<double> dist(-bound, bound);
  detail::Buffer<S> w(classes * features), b(classes);
  for (Index i = 0; i < w.size(); ++i) w(i) = static_cast<S>(dist(rng));
  for (Index i = 0; i < b.size(); ++i) b(i) = static_cast<S>(dist(rng));
  weight = Tensor<S>::from({classes, features}, std::move(w), true);
  bias = Tensor<S>::from({classes}, std::move(b), true);
}

template <typename S>
Tensor<S> LinearClassifier<S>::forward(const Tensor<S>& x) const {
  if (x.rank() != 2 || x.dim(1) != weight.dim(1)) {
    throw ShapeError("linear: expected N x " + std::to_string(weight.dim(1)) + " features, got " +
                     shape_str(x.shape()));
  }
  Tensor<S> z = matmul(x, transpose(weight));
  return add(z, broadcast_to(reshape(bias, {1, bias.numel()}), z.shape()));
}

template <typename S>
void LinearClassifier<S>::visit(const std::string& prefix, const StateVisitor<S>& v) {
  if (v.param) {
    v.param(prefix + ".weight", weight);
    v.param(prefix + ".bias", bias);
  }
}

template <typename S>
ResidualBlock<S>::ResidualBlock(BlockKind kind, BlockOrder order, Index in_ch, Index width,
                                Index stride, BottleneckStride bstride, int bn_slots, Rng& rng)
    : kind_(kind), order_(order), in_ch_(in_ch) {
  if (kind == BlockKind::conv_bn_relu) throw std::invalid_argument("not a residual block kind");
  const bool pre = order == BlockOrder::pre;
  if (kind == BlockKind::basic) {
    out_ch_ = width;
    conv1 = Conv2dLayer<S>(in_ch, width, 3, stride, 1, false, rng);
    conv2 = Conv2dLayer<S>(width, width, 3, 1, 1, false, rng);
    bn1 = BatchNormLayer<S>(pre ? in_ch : width, bn_slots);
    bn2 = BatchNormLayer<S>(width, bn_slots);
  } else {
    out_ch_ = 4 * width;
    const Index s1 = bstride == BottleneckStride::on_1x1 ? stride : 1;
    const Index s3 = bstride == BottleneckStride::on_3x3 ? stride : 1;
    conv1 = Conv2dLayer<S>(in_ch, width, 1, s1, 0, false, rng);
    conv2 = Conv2dLayer<S>(width, width, 3, s3, 1, false, rng);
    conv3 = Conv2dLayer<S>(width, out_ch_, 1, 1, 0, false, rng);
    bn1 = BatchNormLayer<S>(pre ? in_ch : width, bn_slots);
    bn2 = BatchNormLayer<S>(width, bn_slots);
    bn3 = BatchNormLayer<S>(pre ? width : out_ch_, bn_slots);
  }
  if (stride != 1 || in_ch != out_ch_) {
    down_conv = Conv2dLayer<S>(in_ch, out_ch_, 1, stride, 0, false, rng);
    if (!pre) down_bn = BatchNormLayer<S>(out_ch_, bn_slots);
  }
}

template <typename S>
Tensor<S> ResidualBlock<S>::forward(const Tensor<S>& x, Mode mode, int slot) {
  if (x.rank() != 4 || x.dim(1) != in_ch_) {
    throw ShapeError("residual block: expected " + std::to_string(in_ch_) +
                     " input channels, got " + shape_str(x.shape()));
  }
  const bool bottleneck = kind_ == BlockKind::bottleneck;
  if (order_ == BlockOrder::post) {
    Tensor<S> y = relu(bn1.forward(conv1.forward(x), mode, slot));
    if (bottleneck) {
      y = relu(bn2.forward(conv2.forward(y), mode, slot));
      y = bn3.forward(conv3.forward(y), mode, slot);
    } else {
      y = bn2.forward(conv2.forward(y), mode, slot);
    }
    Tensor<S> shortcut = has_projection() ? down_bn.forward(down_conv.forward(x), mode, slot) : x;
    return relu(add(y, shortcut));
  }
  Tensor<S> a = relu(bn1.forward(x, mode, slot));
  Tensor<S> y = conv1.forward(a);
  y = conv2.forward(relu(bn2.forward(y, mode, slot)));
  if (bottleneck) y = conv3.forward(relu(bn3.forward(y, mode, slot)));
  Tensor<S> shortcut = has_projection() ? down_conv.forward(a) : x;
  return add(y, shortcut);
}

template <typename S>
void ResidualBlock<S>::visit(const std::string& prefix, const StateVisitor<S>& v) {
  conv1.visit(prefix + ".conv1", v);
  bn1.visit(prefix + ".bn1", v);
  conv2.visit(prefix + ".conv2", v);
  bn2.visit(prefix + ".bn2", v);
  if (kind_ == BlockKind::bottleneck) {
    conv3.visit(prefix + ".conv3", v);
    bn3.visit(prefix + ".bn3", v);
  }
  if (has_projection()) {
    down_conv.visit(prefix + ".down_conv", v);
    if (order_ == BlockOrder::post) down_bn.visit(prefix + ".down_bn", v);
  }
}

template <typename S>
ConvBnRelu<S>::ConvBnRelu(Index in_ch, Index out_ch, int bn_slots, Rng& rng)
    : conv(in_ch, out_ch, 3, 1, 1, false, rng), bn(out_ch, bn_slots) {}

template <typename S>
Tensor<S> ConvBnRelu<S>::forward(const Tensor<S>& x, Mode mode, int slot) {
  if (x.rank() != 4 || x.dim(1) != in_channels()) {
    throw ShapeError("conv-bn-relu: expected " + std::to_string(in_channels()) +
                     " input channels, got " + shape_str(x.shape()));
  }
  return relu(bn.forward(conv.forward(x), mode, slot));
}

template <typename S>
void ConvBnRelu<S>::visit(const std::string& prefix, const StateVisitor<S>& v) {
  conv.visit(prefix + ".conv", v);
  bn.visit(prefix + ".bn", v);
}

template <typename S>
Tensor<S> global_avg_pool(const Tensor<S>& x) {
  if (x.rank() != 4) throw ShapeError("global_avg_pool: expects NCHW, got " + shape_str(x.shape()));
  return mean(x, {2, 3});
}

#define DDNN_INSTANTIATE(S)                          \
  template class Conv2dLayer<S>;                     \
  template class BatchNormLayer<S>;                  \
  template class LinearClassifier<S>;                \
  template class ResidualBlock<S>;                   \
  template class ConvBnRelu<S>;                      \
  template Tensor<S> global_avg_pool(const Tensor<S>&);
DDNN_INSTANTIATE(float)
DDNN_INSTANTIATE(double)
#undef DDNN_INSTANTIATE

}  // namespace ddnn::nn
