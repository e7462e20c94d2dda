#include "ddnn/network.hpp"

#include <algorithm>
#include <map>
#include <numeric>
#include <set>

namespace ddnn::net {

namespace {

Index conv_out(Index in, Index k, Index s, Index p) { return (in + 2 * p - k) / s + 1; }

std::string join(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

}  // namespace

std::string family_name(Family f) {
  switch (f) {
    case Family::resnet_basic: return "resnet-basic";
    case Family::resnet_bottleneck: return "resnet-bottleneck";
    case Family::vgg: return "vgg";
  }
  return "?";
}

Family parse_family(const std::string& s) {
  if (s == "resnet-basic") return Family::resnet_basic;
  if (s == "resnet-bottleneck") return Family::resnet_bottleneck;
  if (s == "vgg") return Family::vgg;
  throw ConfigError("unknown family '" + s + "' (resnet-basic | resnet-bottleneck | vgg)");
}

void NetConfig::validate() const {
  if (stage_blocks.empty()) throw ConfigError("stage_blocks must not be empty");
  if (stage_blocks.size() != stage_channels.size()) {
    throw ConfigError("stage_blocks has " + std::to_string(stage_blocks.size()) +
                      " stages but stage_channels has " + std::to_string(stage_channels.size()));
  }
  for (int b : stage_blocks) {
    if (b < 1) throw ConfigError("every stage needs at least one block");
  }
  for (Index c : stage_channels) {
    if (c < 1) throw ConfigError("stage_channels must be positive");
  }
  if (num_classes < 1) throw ConfigError("num_classes must be positive");
  for (Index d : input_shape) {
    if (d < 1) throw ConfigError("input_shape extents must be positive");
  }
}

Index NetConfig::stem_channels() const {
  if (family == Family::vgg) return input_shape[0];
  return stem == Stem::imagenet ? 64 : stage_channels.front();
}

Index NetConfig::stage_out_channels(std::size_t stage) const {
  const Index c = stage_channels.at(stage);
  return family == Family::resnet_bottleneck ? 4 * c : c;
}

std::string NetConfig::name() const {
  const int total = std::accumulate(stage_blocks.begin(), stage_blocks.end(), 0);
  switch (family) {
    case Family::resnet_basic: return "ResNet-" + std::to_string(2 * total + 2);
    case Family::resnet_bottleneck: return "ResNet-" + std::to_string(3 * total + 2);
    case Family::vgg: return "VGG-" + std::to_string(total + 3);
  }
  return "?";
}

NetConfig NetConfig::cifar_resnet(std::vector<int> blocks, Index num_classes) {
  NetConfig c;
  c.family = Family::resnet_basic;
  c.stage_channels.clear();
  for (std::size_t i = 0; i < blocks.size(); ++i) c.stage_channels.push_back(Index{16} << i);
  c.stage_blocks = std::move(blocks);
  c.num_classes = num_classes;
  return c;
}

NetConfig NetConfig::imagenet_resnet(std::vector<int> blocks, bool bottleneck, Index num_classes) {
  NetConfig c;
  c.family = bottleneck ? Family::resnet_bottleneck : Family::resnet_basic;
  c.stage_channels.clear();
  for (std::size_t i = 0; i < blocks.size(); ++i) c.stage_channels.push_back(Index{64} << i);
  c.stage_blocks = std::move(blocks);
  c.num_classes = num_classes;
  c.input_shape = {3, 224, 224};
  c.stem = Stem::imagenet;
  return c;
}

NetConfig NetConfig::cifar_vgg(std::vector<int> blocks, Index num_classes) {
  NetConfig c;
  c.family = Family::vgg;
  c.stage_channels.clear();
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    c.stage_channels.push_back(std::min<Index>(Index{64} << i, 512));
  }
  c.stage_blocks = std::move(blocks);
  c.num_classes = num_classes;
  return c;
}

void validate_subnet(const NetConfig& cfg, const SubnetSpec& spec) {
  if (spec.prefix_blocks.size() != cfg.stage_blocks.size()) {
    throw ConfigError("sub-net [" + join(spec.prefix_blocks) + "] has " +
                      std::to_string(spec.prefix_blocks.size()) + " stages, full net has " +
                      std::to_string(cfg.stage_blocks.size()));
  }
  bool smaller = false;
  for (std::size_t i = 0; i < spec.prefix_blocks.size(); ++i) {
    const int p = spec.prefix_blocks[i];
    if (p < 1 || p > cfg.stage_blocks[i]) {
      throw ConfigError("sub-net [" + join(spec.prefix_blocks) + "]: stage " +
                        std::to_string(i + 1) + " keeps " + std::to_string(p) + " of " +
                        std::to_string(cfg.stage_blocks[i]) + " blocks");
    }
    smaller = smaller || p < cfg.stage_blocks[i];
  }
  if (!smaller) {
    throw ConfigError("sub-net [" + join(spec.prefix_blocks) + "] is the full net");
  }
}

NetConfig subnet_config(const NetConfig& cfg, const SubnetSpec& spec) {
  validate_subnet(cfg, spec);
  NetConfig c = cfg;
  c.stage_blocks = spec.prefix_blocks;
  return c;
}

template <typename S>
Ddnn<S>::Ddnn(NetConfig cfg, std::vector<SubnetSpec> subnets, DdnnOptions opts, std::uint64_t seed)
    : cfg_(std::move(cfg)), subnets_(std::move(subnets)), opts_(std::move(opts)) {
  cfg_.validate();
  for (std::size_t k = 0; k < subnets_.size(); ++k) {
    validate_subnet(cfg_, subnets_[k]);
    if (subnets_[k].classifier_mode != opts_.classifier_mode) {
      throw ConfigError("sub-net classifier mode differs from the network's");
    }
    for (std::size_t j = 0; j < k; ++j) {
      if (subnets_[j].prefix_blocks == subnets_[k].prefix_blocks) {
        throw ConfigError("duplicate sub-net [" + join(subnets_[k].prefix_blocks) + "]");
      }
    }
  }

  std::set<int> split_stages;
  for (const auto& s : subnets_) {
    for (std::size_t i = 0; i < s.prefix_blocks.size(); ++i) {
      if (s.prefix_blocks[i] < cfg_.stage_blocks[i]) split_stages.insert(static_cast<int>(i));
    }
  }
  if (!opts_.taps_disabled) {
    if (opts_.tap_stages.empty()) {
      taps_.assign(split_stages.begin(), split_stages.end());
    } else {
      std::set<int> chosen(opts_.tap_stages.begin(), opts_.tap_stages.end());
      for (int t : chosen) {
        if (!split_stages.count(t)) {
          throw ConfigError("tap stage " + std::to_string(t + 1) + " contains no split");
        }
      }
      taps_.assign(chosen.begin(), chosen.end());
    }
  }

  const int slots = opts_.per_net_bn_stats ? num_nets() : 1;
  const bool pre = cfg_.block_order == nn::BlockOrder::pre;
  nn::Rng rng(seed);

  Index h = cfg_.input_shape[1], w = cfg_.input_shape[2];
  Index in = cfg_.input_shape[0];
  if (cfg_.family != Family::vgg) {
    if (cfg_.stem == Stem::imagenet) {
      stem_conv_ = nn::Conv2dLayer<S>(in, 64, 7, 2, 3, false, rng);
      h = conv_out(conv_out(h, 7, 2, 3), 3, 2, 1);
      w = conv_out(conv_out(w, 7, 2, 3), 3, 2, 1);
    } else {
      stem_conv_ = nn::Conv2dLayer<S>(in, cfg_.stem_channels(), 3, 1, 1, false, rng);
    }
    if (!pre) stem_bn_ = nn::BatchNormLayer<S>(cfg_.stem_channels(), slots);
    in = cfg_.stem_channels();
  }

  const nn::BlockKind kind = cfg_.family == Family::resnet_bottleneck ? nn::BlockKind::bottleneck
                                                                      : nn::BlockKind::basic;
  stages_.resize(cfg_.num_stages());
  for (std::size_t i = 0; i < cfg_.num_stages(); ++i) {
    for (int j = 0; j < cfg_.stage_blocks[i]; ++j) {
      if (cfg_.family == Family::vgg) {
        if (i > 0 && j == 0) {
          h /= 2;
          w /= 2;
        }
        stages_[i].emplace_back(nn::ConvBnRelu<S>(in, cfg_.stage_channels[i], slots, rng));
      } else {
        const Index stride = (i > 0 && j == 0) ? 2 : 1;
        if (stride == 2) {
          h = conv_out(h, 3, 2, 1);
          w = conv_out(w, 3, 2, 1);
        }
        stages_[i].emplace_back(nn::ResidualBlock<S>(kind, cfg_.block_order, in,
                                                     cfg_.stage_channels[i], stride,
                                                     cfg_.bottleneck_stride, slots, rng));
      }
      in = cfg_.stage_out_channels(i);
    }
    if (h < 1 || w < 1) {
      throw ConfigError("input " + std::to_string(cfg_.input_shape[1]) + "x" +
                        std::to_string(cfg_.input_shape[2]) + " too small for " +
                        std::to_string(cfg_.num_stages()) + " stages");
    }
  }
  if (pre) final_bn_ = nn::BatchNormLayer<S>(in, slots);
  classifier_ = nn::LinearClassifier<S>(in, cfg_.num_classes, rng);
  if (opts_.classifier_mode == ClassifierMode::separate) {
    for (std::size_t k = 0; k < subnets_.size(); ++k) {
      separate_classifiers_.emplace_back(in, cfg_.num_classes, rng);
    }
  }
}

template <typename S>
void Ddnn<S>::check_net(int net) const {
  if (net < 0 || net >= num_nets()) {
    throw std::out_of_range("net index " + std::to_string(net) + " outside 0.." +
                            std::to_string(num_nets() - 1));
  }
}

template <typename S>
void Ddnn<S>::check_input(const Tensor<S>& x) const {
  const auto& in = cfg_.input_shape;
  if (x.rank() != 4 || x.dim(1) != in[0] || x.dim(2) != in[1] || x.dim(3) != in[2]) {
    throw ShapeError("network input " + shape_str(x.shape()) + " does not match N x " +
                     std::to_string(in[0]) + " x " + std::to_string(in[1]) + " x " +
                     std::to_string(in[2]));
  }
}

template <typename S>
const std::vector<int>& Ddnn<S>::blocks_of(int net) const {
  check_net(net);
  return net == 0 ? cfg_.stage_blocks : subnets_[net - 1].prefix_blocks;
}

template <typename S>
std::vector<int> Ddnn<S>::taps_for(int net) const {
  const auto& blocks = blocks_of(net);
  std::vector<int> out;
  for (int t : taps_) {
    if (blocks[t] < cfg_.stage_blocks[t]) out.push_back(t);
  }
  return out;
}

template <typename S>
std::string Ddnn<S>::net_name(int net) const {
  check_net(net);
  return net == 0 ? "full" : "sub" + std::to_string(net);
}

template <typename S>
Tensor<S> Ddnn<S>::run_stem(const Tensor<S>& x, nn::Mode mode, int slot) {
  if (cfg_.family == Family::vgg) return x;
  Tensor<S> h = stem_conv_.forward(x);
  if (cfg_.block_order == nn::BlockOrder::post) h = relu(stem_bn_.forward(h, mode, slot));
  if (cfg_.stem == Stem::imagenet) h = max_pool2d(h, Pool2dAttrs{3, 2, 1});
  return h;
}

template <typename S>
Tensor<S> Ddnn<S>::stage_input(int stage, const Tensor<S>& x) const {
  if (cfg_.family == Family::vgg && stage > 0) return max_pool2d(x, Pool2dAttrs{2, 2, 0});
  return x;
}

template <typename S>
Tensor<S> Ddnn<S>::run_block(int stage, int block, const Tensor<S>& x, nn::Mode mode, int slot) {
  return std::visit([&](auto& b) { return b.forward(x, mode, slot); }, stages_[stage][block]);
}

template <typename S>
const nn::LinearClassifier<S>& Ddnn<S>::classifier_for(int net) const {
  if (net > 0 && opts_.classifier_mode == ClassifierMode::separate) {
    return separate_classifiers_[net - 1];
  }
  return classifier_;
}

template <typename S>
Tensor<S> Ddnn<S>::run_head(int net, const Tensor<S>& x, nn::Mode mode) {
  Tensor<S> h = x;
  if (cfg_.block_order == nn::BlockOrder::pre) h = relu(final_bn_.forward(h, mode, bn_slot(net)));
  return classifier_for(net).forward(nn::global_avg_pool(h));
}

template <typename S>
NetOutput<S> Ddnn<S>::forward(int net, const Tensor<S>& x, nn::Mode mode,
                              const BlockObserver& observer) {
  check_net(net);
  check_input(x);
  const int slot = bn_slot(net);
  const auto& blocks = blocks_of(net);
  NetOutput<S> out;
  Tensor<S> h = run_stem(x, mode, slot);
  for (int i = 0; i < static_cast<int>(stages_.size()); ++i) {
    h = stage_input(i, h);
    for (int j = 0; j < blocks[i]; ++j) {
      if (observer) observer(net, i, j);
      h = run_block(i, j, h, mode, slot);
    }
    if (std::find(taps_.begin(), taps_.end(), i) != taps_.end()) {
      out.stage_features.push_back(h);
      out.feature_stages.push_back(i);
    }
  }
  out.logits = run_head(net, h, mode);
  return out;
}

template <typename S>
std::vector<NetOutput<S>> Ddnn<S>::forward_all(const Tensor<S>& x, nn::Mode mode,
                                               bool reuse_prefix, const BlockObserver& observer) {
  std::vector<NetOutput<S>> outs;
  // Per-net statistics make the shared prefix net-dependent, so nothing can be reused.
  if (!reuse_prefix || opts_.per_net_bn_stats) {
    for (int k = 0; k < num_nets(); ++k) outs.push_back(forward(k, x, mode, observer));
    return outs;
  }
  check_input(x);
  const int num_stages = static_cast<int>(stages_.size());
  auto tapped = [&](int i) { return std::find(taps_.begin(), taps_.end(), i) != taps_.end(); };

  // Full net, keeping every block output.
  std::vector<std::vector<Tensor<S>>> acts(stages_.size());
  NetOutput<S> full;
  Tensor<S> h = run_stem(x, mode, 0);
  for (int i = 0; i < num_stages; ++i) {
    h = stage_input(i, h);
    for (int j = 0; j < cfg_.stage_blocks[i]; ++j) {
      if (observer) observer(0, i, j);
      h = run_block(i, j, h, mode, 0);
      acts[i].push_back(h);
    }
    if (tapped(i)) {
      full.stage_features.push_back(h);
      full.feature_stages.push_back(i);
    }
  }
  full.logits = run_head(0, h, mode);
  outs.push_back(std::move(full));

  for (int k = 1; k < num_nets(); ++k) {
    const auto& blocks = blocks_of(k);
    int split = 0;
    while (blocks[split] == cfg_.stage_blocks[split]) ++split;
    NetOutput<S> out;
    for (int i = 0; i < split; ++i) {
      if (tapped(i)) {
        out.stage_features.push_back(acts[i].back());
        out.feature_stages.push_back(i);
      }
    }
    Tensor<S> hk = acts[split][blocks[split] - 1];
    if (tapped(split)) {
      out.stage_features.push_back(hk);
      out.feature_stages.push_back(split);
    }
    for (int i = split + 1; i < num_stages; ++i) {
      hk = stage_input(i, hk);
      for (int j = 0; j < blocks[i]; ++j) {
        if (observer) observer(k, i, j);
        hk = run_block(i, j, hk, mode, 0);
      }
      if (tapped(i)) {
        out.stage_features.push_back(hk);
        out.feature_stages.push_back(i);
      }
    }
    out.logits = run_head(k, hk, mode);
    outs.push_back(std::move(out));
  }
  return outs;
}

template <typename S>
void Ddnn<S>::visit_state(const nn::StateVisitor<S>& v) {
  if (cfg_.family != Family::vgg) {
    stem_conv_.visit("stem.conv", v);
    if (cfg_.block_order == nn::BlockOrder::post) stem_bn_.visit("stem.bn", v);
  }
  for (std::size_t i = 0; i < stages_.size(); ++i) {
    for (std::size_t j = 0; j < stages_[i].size(); ++j) {
      const std::string prefix = "stage" + std::to_string(i + 1) + ".block" + std::to_string(j + 1);
      std::visit([&](auto& b) { b.visit(prefix, v); }, stages_[i][j]);
    }
  }
  if (cfg_.block_order == nn::BlockOrder::pre) final_bn_.visit("final_bn", v);
  classifier_.visit("classifier", v);
  for (std::size_t k = 0; k < separate_classifiers_.size(); ++k) {
    separate_classifiers_[k].visit("classifier_sub" + std::to_string(k + 1), v);
  }
}

template <typename S>
std::vector<Tensor<S>> Ddnn<S>::parameters() {
  std::vector<Tensor<S>> out;
  visit_state({[&](const std::string&, Tensor<S>& t) { out.push_back(t); }, {}});
  return out;
}

template <typename S>
std::vector<std::pair<std::string, Tensor<S>>> Ddnn<S>::named_parameters() {
  std::vector<std::pair<std::string, Tensor<S>>> out;
  visit_state({[&](const std::string& n, Tensor<S>& t) { out.emplace_back(n, t); }, {}});
  return out;
}

template <typename S>
Index Ddnn<S>::num_parameters() {
  std::set<const void*> seen;
  Index total = 0;
  visit_state({[&](const std::string&, Tensor<S>& t) {
                 if (seen.insert(t.impl_ptr().get()).second) total += t.numel();
               },
               {}});
  return total;
}

template <typename S>
std::vector<std::vector<int>> Ddnn<S>::dropped_blocks(int net) const {
  const auto& blocks = blocks_of(net);
  std::vector<std::vector<int>> out(blocks.size());
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    for (int j = blocks[i]; j < cfg_.stage_blocks[i]; ++j) out[i].push_back(j + 1);
  }
  return out;
}

template <typename S>
Ddnn<S> Ddnn<S>::extract(int net) const {
  check_net(net);
  NetConfig c = net == 0 ? cfg_ : subnet_config(cfg_, subnets_[net - 1]);
  Ddnn out(c, {}, DdnnOptions{}, 0);

  auto& self = const_cast<Ddnn&>(*this);
  std::map<std::string, Tensor<S>> params;
  std::map<std::string, detail::Buffer<S>*> buffers;
  self.visit_state({[&](const std::string& n, Tensor<S>& t) { params.emplace(n, t); },
                    [&](const std::string& n, detail::Buffer<S>& b) { buffers.emplace(n, &b); }});

  const bool separate = net > 0 && opts_.classifier_mode == ClassifierMode::separate;
  const std::string slot = bn_slot(net) == 0 ? "" : ".net" + std::to_string(bn_slot(net));
  out.visit_state(
      {[&](const std::string& n, Tensor<S>& t) {
         std::string src = n;
         if (separate && n.rfind("classifier.", 0) == 0) {
           src = "classifier_sub" + std::to_string(net) + n.substr(std::string("classifier").size());
         }
         t.mutable_data() = params.at(src).data();
       },
       [&](const std::string& n, detail::Buffer<S>& b) { b = *buffers.at(n + slot); }});
  return out;
}

template <typename S>
void Ddnn<S>::copy_state_from(const Ddnn& other) {
  auto& src = const_cast<Ddnn&>(other);
  std::map<std::string, Tensor<S>> params;
  std::map<std::string, detail::Buffer<S>*> buffers;
  src.visit_state({[&](const std::string& n, Tensor<S>& t) { params.emplace(n, t); },
                   [&](const std::string& n, detail::Buffer<S>& b) { buffers.emplace(n, &b); }});
  visit_state({[&](const std::string& n, Tensor<S>& t) {
                 const auto& s = params.at(n);
                 if (s.shape() != t.shape()) throw ShapeError("copy_state_from: shape mismatch at " + n);
                 t.mutable_data() = s.data();
               },
               [&](const std::string& n, detail::Buffer<S>& b) { b = *buffers.at(n); }});
}

template class Ddnn<float>;
template class Ddnn<double>;

}  // namespace ddnn::net
