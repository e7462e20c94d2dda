#pragma once

#include "ddnn/ops.hpp"
#include "ddnn/tensor.hpp"

#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace ddnn::nn {

enum class Mode { train, eval };

enum class BlockKind { basic, bottleneck, conv_bn_relu };

// post: conv-BN-relu ordering of the original residual design.
// pre: BN-relu-conv ordering of the identity-mapping variant.
enum class BlockOrder { post, pre };

// Where a strided bottleneck block downsamples: on its 3x3 conv (the common PyTorch layout)
// or on its first 1x1 conv (the original layout).
enum class BottleneckStride { on_3x3, on_1x1 };

using Rng = std::mt19937_64;

template <typename S>
struct StateVisitor {
  std::function<void(const std::string&, Tensor<S>&)> param;
  std::function<void(const std::string&, detail::Buffer<S>&)> buffer;
};

template <typename S>
class Conv2dLayer {
 public:
  Conv2dLayer() = default;
  // Kaiming-normal (fan-out) weights.
  Conv2dLayer(Index in_ch, Index out_ch, Index kernel, Index stride, Index padding, bool bias,
              Rng& rng);

  Tensor<S> forward(const Tensor<S>& x) const;
  Index out_size(Index in) const { return (in + 2 * padding - weight.dim(2)) / stride + 1; }
  void visit(const std::string& prefix, const StateVisitor<S>& v);

  Tensor<S> weight;
  Tensor<S> bias;  // undefined when the layer has no bias
  Index stride = 1;
  Index padding = 0;
};

template <typename S>
class BatchNormLayer {
 public:
  BatchNormLayer() = default;
  // `slots` independent pairs of running statistics; slot 0 is the shared default.
  explicit BatchNormLayer(Index channels, int slots = 1);

  Tensor<S> forward(const Tensor<S>& x, Mode mode, int slot = 0);
  Index channels() const { return gamma.numel(); }
  int slots() const { return static_cast<int>(running_mean.size()); }
  void visit(const std::string& prefix, const StateVisitor<S>& v);

  Tensor<S> gamma;
  Tensor<S> beta;
  std::vector<detail::Buffer<S>> running_mean;
  std::vector<detail::Buffer<S>> running_var;
  S momentum = S(0.1);
  S epsilon = S(1e-5);
};

template <typename S>
class LinearClassifier {
 public:
  LinearClassifier() = default;
  // Weights and bias uniform in +-1/sqrt(features).
  LinearClassifier(Index features, Index classes, Rng& rng);

  // N x features -> N x classes logits.
  Tensor<S> forward(const Tensor<S>& x) const;
  void visit(const std::string& prefix, const StateVisitor<S>& v);

  Tensor<S> weight;  // classes x features
  Tensor<S> bias;
};

template <typename S>
class ResidualBlock {
 public:
  ResidualBlock() = default;
  // `width` is the inner width; bottleneck blocks output 4 * width channels.
  ResidualBlock(BlockKind kind, BlockOrder order, Index in_ch, Index width, Index stride,
                BottleneckStride bstride, int bn_slots, Rng& rng);

  Tensor<S> forward(const Tensor<S>& x, Mode mode, int slot = 0);
  Index in_channels() const { return in_ch_; }
  Index out_channels() const { return out_ch_; }
  BlockKind kind() const { return kind_; }
  BlockOrder order() const { return order_; }
  bool has_projection() const { return down_conv.weight.defined(); }
  void visit(const std::string& prefix, const StateVisitor<S>& v);

  Conv2dLayer<S> conv1, conv2, conv3;  // conv3 only for bottleneck
  BatchNormLayer<S> bn1, bn2, bn3;
  Conv2dLayer<S> down_conv;            // 1x1 strided projection, when shapes change
  BatchNormLayer<S> down_bn;           // post-activation order only

 private:
  BlockKind kind_ = BlockKind::basic;
  BlockOrder order_ = BlockOrder::post;
  Index in_ch_ = 0;
  Index out_ch_ = 0;
};

// The VGG "[Conv-BN-ReLU]" unit.
template <typename S>
class ConvBnRelu {
 public:
  ConvBnRelu() = default;
  ConvBnRelu(Index in_ch, Index out_ch, int bn_slots, Rng& rng);

  Tensor<S> forward(const Tensor<S>& x, Mode mode, int slot = 0);
  Index in_channels() const { return conv.weight.dim(1); }
  Index out_channels() const { return conv.weight.dim(0); }
  void visit(const std::string& prefix, const StateVisitor<S>& v);

  Conv2dLayer<S> conv;
  BatchNormLayer<S> bn;
};

// N x C x H x W -> N x C
template <typename S>
Tensor<S> global_avg_pool(const Tensor<S>& x);

}  // namespace ddnn::nn
