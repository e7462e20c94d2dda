#pragma once

#include "ddnn/layers.hpp"

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace ddnn::net {

enum class Family { resnet_basic, resnet_bottleneck, vgg };
enum class Stem { cifar, imagenet };
enum class ClassifierMode { shared, separate };

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct NetConfig {
  Family family = Family::resnet_basic;
  std::vector<int> stage_blocks{3, 3, 3};
  std::vector<Index> stage_channels{16, 32, 64};
  Index num_classes = 10;
  std::array<Index, 3> input_shape{3, 32, 32};  // C x H x W
  Stem stem = Stem::cifar;
  nn::BlockOrder block_order = nn::BlockOrder::post;
  nn::BottleneckStride bottleneck_stride = nn::BottleneckStride::on_3x3;

  void validate() const;
  std::size_t num_stages() const { return stage_blocks.size(); }
  Index stem_channels() const;
  Index stage_out_channels(std::size_t stage) const;
  Index feature_dim() const { return stage_out_channels(num_stages() - 1); }
  // Conventional depth name, e.g. "ResNet-20" or "VGG-16".
  std::string name() const;

  static NetConfig cifar_resnet(std::vector<int> blocks, Index num_classes = 10);
  static NetConfig imagenet_resnet(std::vector<int> blocks, bool bottleneck, Index num_classes = 1000);
  static NetConfig cifar_vgg(std::vector<int> blocks, Index num_classes = 10);

  bool operator==(const NetConfig&) const = default;
};

struct SubnetSpec {
  std::vector<int> prefix_blocks;
  ClassifierMode classifier_mode = ClassifierMode::shared;

  bool operator==(const SubnetSpec&) const = default;
};

// Checks the prefix invariants of `spec` against `cfg`; throws ConfigError.
void validate_subnet(const NetConfig& cfg, const SubnetSpec& spec);

// The plain network a sub-net amounts to once the skipped blocks are gone.
NetConfig subnet_config(const NetConfig& cfg, const SubnetSpec& spec);

struct DdnnOptions {
  ClassifierMode classifier_mode = ClassifierMode::shared;
  // Stages (0-based) whose outputs feed the attention loss. Empty: every stage containing a split.
  std::vector<int> tap_stages;
  bool taps_disabled = false;
  // One set of BN running statistics per net instead of one shared set.
  bool per_net_bn_stats = false;
};

template <typename S>
struct NetOutput {
  Tensor<S> logits;                    // N x M
  std::vector<Tensor<S>> stage_features;  // output of each tapped stage, stage order
  std::vector<int> feature_stages;        // 0-based stage index of each feature
};

// Notified for every block a forward pass executes: (net, stage, block), 0-based.
using BlockObserver = std::function<void(int, int, int)>;

// Depth-level dynamic network: one parameter set, runnable as the full net (index 0) or as
// any of K sub-nets that keep the first blocks of every stage.
template <typename S>
class Ddnn {
 public:
  using Block = std::variant<nn::ResidualBlock<S>, nn::ConvBnRelu<S>>;

  Ddnn(NetConfig cfg, std::vector<SubnetSpec> subnets, DdnnOptions opts, std::uint64_t seed);

  const NetConfig& config() const { return cfg_; }
  const std::vector<SubnetSpec>& subnets() const { return subnets_; }
  const DdnnOptions& options() const { return opts_; }
  int num_nets() const { return static_cast<int>(subnets_.size()) + 1; }
  int num_subnets() const { return static_cast<int>(subnets_.size()); }
  const std::vector<int>& blocks_of(int net) const;
  const std::vector<int>& tap_stages() const { return taps_; }
  // Tapped stages at which `net`'s block count differs from the full net.
  std::vector<int> taps_for(int net) const;
  std::string net_name(int net) const;
  int bn_slot(int net) const { return opts_.per_net_bn_stats ? net : 0; }

  NetOutput<S> forward(int net, const Tensor<S>& x, nn::Mode mode,
                       const BlockObserver& observer = {});

  // All nets on one batch, full net first. With `reuse_prefix`, sub-nets start from the full
  // net's activation at their first split instead of recomputing the shared prefix.
  std::vector<NetOutput<S>> forward_all(const Tensor<S>& x, nn::Mode mode, bool reuse_prefix = true,
                                        const BlockObserver& observer = {});

  void visit_state(const nn::StateVisitor<S>& v);
  std::vector<Tensor<S>> parameters();
  std::vector<std::pair<std::string, Tensor<S>>> named_parameters();
  // Distinct trainable scalars, by enumeration of the registry.
  Index num_parameters();

  // Standalone copy of net k (0 = full net without its sub-nets).
  Ddnn extract(int net) const;
  // 1-based block numbers per stage that net k skips, e.g. {{}, {}, {5, 6}, {}}.
  std::vector<std::vector<int>> dropped_blocks(int net) const;

  // Copies parameters and buffers by name from a network with the same state layout.
  void copy_state_from(const Ddnn& other);

 private:
  Tensor<S> run_stem(const Tensor<S>& x, nn::Mode mode, int slot);
  Tensor<S> run_block(int stage, int block, const Tensor<S>& x, nn::Mode mode, int slot);
  Tensor<S> stage_input(int stage, const Tensor<S>& x) const;
  Tensor<S> run_head(int net, const Tensor<S>& x, nn::Mode mode);
  const nn::LinearClassifier<S>& classifier_for(int net) const;
  void check_net(int net) const;
  void check_input(const Tensor<S>& x) const;

  NetConfig cfg_;
  std::vector<SubnetSpec> subnets_;
  DdnnOptions opts_;
  std::vector<int> taps_;

  nn::Conv2dLayer<S> stem_conv_;
  nn::BatchNormLayer<S> stem_bn_;
  std::vector<std::vector<Block>> stages_;
  nn::BatchNormLayer<S> final_bn_;  // pre-activation order only
  nn::LinearClassifier<S> classifier_;
  std::vector<nn::LinearClassifier<S>> separate_classifiers_;
};

// Analytic cost of a configuration: trainable scalars, and per-image multiply-accumulates of
// convolutions and linear layers at the config's input resolution.
Index count_params(const NetConfig& cfg);
Index count_params(const NetConfig& cfg, const SubnetSpec& spec);
Index count_flops(const NetConfig& cfg);
Index count_flops(const NetConfig& cfg, Index height, Index width);
Index count_flops(const NetConfig& cfg, const SubnetSpec& spec);

std::string family_name(Family f);
Family parse_family(const std::string& s);

}  // namespace ddnn::net
