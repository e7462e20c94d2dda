#include "support.hpp"

#include "ddnn/network.hpp"

#include <cmath>
#include <set>
#include <tuple>

using namespace ddnn;
using namespace ddnn::net;
using testing::Buf;
using testing::Gen;
using testing::tiny_resnet;

namespace {

std::vector<SubnetSpec> specs(std::initializer_list<std::vector<int>> prefixes,
                              ClassifierMode mode = ClassifierMode::shared) {
  std::vector<SubnetSpec> out;
  for (const auto& p : prefixes) out.push_back({p, mode});
  return out;
}

// Per-image multiply-accumulates of an ImageNet bottleneck ResNet, written out layer by layer.
double bottleneck_macs(const std::vector<int>& blocks, bool stride_on_1x1) {
  double macs = 112.0 * 112 * 64 * 3 * 49;  // 7x7/2 stem
  Index hw = 56, in = 64;
  for (std::size_t s = 0; s < blocks.size(); ++s) {
    const Index width = 64 << s, out = 4 * width;
    for (int b = 0; b < blocks[s]; ++b) {
      const bool down = b == 0 && s > 0;
      const Index hw_out = down ? hw / 2 : hw;
      const Index hw_mid1 = (down && stride_on_1x1) ? hw_out : hw;  // after the first 1x1
      macs += double(hw_mid1 * hw_mid1) * width * in;
      macs += double(hw_out * hw_out) * width * width * 9;
      macs += double(hw_out * hw_out) * out * width;
      if (b == 0) macs += double(hw_out * hw_out) * out * in;  // projection
      in = out;
      hw = hw_out;
    }
  }
  return macs + 2048.0 * 1000;
}

}  // namespace

TEST_SUITE("ddnn") {

TEST_CASE("published architectures") {
  auto r50 = NetConfig::imagenet_resnet({3, 4, 6, 3}, true);
  auto fig2 = specs({{3, 4, 4, 3}, {3, 3, 3, 3}});
  CHECK(r50.name() == "ResNet-50");
  for (const auto& s : fig2) CHECK_NOTHROW(validate_subnet(r50, s));
  CHECK(subnet_config(r50, fig2[0]).name() == "ResNet-44");
  CHECK(subnet_config(r50, fig2[1]).name() == "ResNet-38");

  auto r20 = NetConfig::cifar_resnet({3, 3, 3});
  CHECK(r20.name() == "ResNet-20");
  CHECK(subnet_config(r20, {{3, 2, 2}}).name() == "ResNet-16");

  Ddnn<float> plain(tiny_resnet({1, 1, 1}), {}, {}, 1);
  CHECK(plain.num_nets() == 1);
  CHECK(plain.tap_stages().empty());
}

TEST_CASE("invalid sub-nets") {
  auto cfg = tiny_resnet({3, 3, 3});
  CHECK_THROWS_AS(validate_subnet(cfg, {{3, 4, 2}}), ConfigError);
  CHECK_THROWS_AS(validate_subnet(cfg, {{3, 3, 3}}), ConfigError);
  CHECK_THROWS_AS(validate_subnet(cfg, {{3, 3}}), ConfigError);
  CHECK_THROWS_AS(validate_subnet(cfg, {{0, 3, 3}}), ConfigError);
  CHECK_THROWS_AS(Ddnn<float>(cfg, specs({{3, 2, 2}, {3, 2, 2}}), {}, 0), ConfigError);
  DdnnOptions bad_tap;
  bad_tap.tap_stages = {0};
  CHECK_THROWS_AS(Ddnn<float>(cfg, specs({{3, 2, 2}}), bad_tap, 0), ConfigError);
}

TEST_CASE("taps sit at stages containing a split") {
  Ddnn<float> d(tiny_resnet({3, 3, 3}), specs({{3, 2, 2}, {3, 3, 1}}), {}, 0);
  CHECK(d.tap_stages() == std::vector<int>{1, 2});
  CHECK(d.taps_for(1) == std::vector<int>{1, 2});
  CHECK(d.taps_for(2) == std::vector<int>{2});
  CHECK(d.taps_for(0).empty());

  Gen g(1);
  auto outs = d.forward_all(g.tensor<float>({2, 3, 8, 8}), nn::Mode::eval);
  for (const auto& o : outs) {
    CHECK(o.feature_stages == std::vector<int>{1, 2});
    CHECK(o.stage_features[0].shape() == Shape{2, 8, 4, 4});
  }
}

TEST_CASE("one parameter set serves every net") {
  for (auto mode : {ClassifierMode::shared, ClassifierMode::separate}) {
    auto cfg = tiny_resnet({3, 3, 3});
    DdnnOptions opts;
    opts.classifier_mode = mode;
    Ddnn<float> d(cfg, specs({{3, 2, 2}, {2, 2, 2}}, mode), opts, 3);
    const Index head = cfg.feature_dim() * cfg.num_classes + cfg.num_classes;
    const Index expect = count_params(cfg) + (mode == ClassifierMode::separate ? 2 * head : 0);
    CHECK(d.num_parameters() == expect);
  }
}

TEST_CASE("perturbing a shared weight moves every net") {
  Ddnn<double> d(tiny_resnet({3, 3, 3}), specs({{3, 2, 2}, {1, 1, 1}}), {}, 4);
  Gen g(5);
  auto x = g.tensor<double>({2, 3, 8, 8});
  std::vector<Buf<double>> before;
  for (int k = 0; k < d.num_nets(); ++k) before.push_back(d.forward(k, x, nn::Mode::eval).logits.data());
  auto named = d.named_parameters();
  for (auto& [name, t] : named) {
    if (name == "stage1.block1.conv1.weight") t.mutable_data()(0) += 0.5;
  }
  for (int k = 0; k < d.num_nets(); ++k) {
    CHECK((d.forward(k, x, nn::Mode::eval).logits.data() - before[k]).abs().maxCoeff() > 0);
  }
}

TEST_CASE("nets agree bit-exactly up to their first split") {
  // Taps at stages 1 and 3 expose the stage outputs of both sub-nets.
  Ddnn<float> d(tiny_resnet({3, 3, 3}), specs({{3, 3, 2}, {2, 3, 3}}), {}, 6);
  Gen g(7);
  for (auto mode : {nn::Mode::eval, nn::Mode::train}) {
    auto x = g.tensor<float>({3, 3, 8, 8});
    auto full = d.forward(0, x, mode);
    auto late = d.forward(1, x, mode);
    auto early = d.forward(2, x, mode);
    REQUIRE(full.feature_stages == std::vector<int>{0, 2});
    CHECK(testing::bit_equal(full.stage_features[0].data(), late.stage_features[0].data()));
    CHECK_FALSE(testing::bit_equal(full.stage_features[0].data(), early.stage_features[0].data()));
    CHECK_FALSE(testing::bit_equal(full.logits.data(), late.logits.data()));
  }
}

TEST_CASE("prefix reuse matches independent forwards") {
  Ddnn<float> d(tiny_resnet({3, 3, 3}), specs({{3, 2, 2}, {3, 3, 1}, {1, 2, 3}}), {}, 8);
  Gen g(9);
  auto x = g.tensor<float>({4, 3, 8, 8});
  auto shared = d.forward_all(x, nn::Mode::eval, true);
  auto separate = d.forward_all(x, nn::Mode::eval, false);
  for (int k = 0; k < d.num_nets(); ++k) {
    CHECK(testing::bit_equal(shared[k].logits.data(), separate[k].logits.data()));
    for (std::size_t f = 0; f < shared[k].stage_features.size(); ++f) {
      CHECK(testing::bit_equal(shared[k].stage_features[f].data(), separate[k].stage_features[f].data()));
    }
  }
}

TEST_CASE("a net never runs blocks beyond its prefix") {
  Ddnn<float> d(tiny_resnet({3, 4, 2}), specs({{3, 2, 2}, {1, 1, 1}, {2, 4, 1}}), {}, 10);
  Gen g(11);
  auto x = g.tensor<float>({2, 3, 8, 8});
  for (bool reuse : {true, false}) {
    std::vector<std::set<std::tuple<int, int, int>>> seen(d.num_nets());
    std::vector<int> calls(d.num_nets(), 0);
    d.forward_all(x, nn::Mode::train, reuse, [&](int net, int stage, int block) {
      seen[net].insert({net, stage, block});
      ++calls[net];
      CHECK(block < d.blocks_of(net)[stage]);
    });
    CHECK(calls[0] == 9);
    for (int k = 1; k < d.num_nets(); ++k) CHECK(calls[k] == static_cast<int>(seen[k].size()));
  }
  for (int k = 0; k < d.num_nets(); ++k) {
    int ran = 0;
    d.forward(k, x, nn::Mode::eval, [&](int, int stage, int block) {
      CHECK(block < d.blocks_of(k)[stage]);
      ++ran;
    });
    int expect = 0;
    for (int b : d.blocks_of(k)) expect += b;
    CHECK(ran == expect);
  }
}

TEST_CASE("the full net equals an independently built plain net") {
  for (auto family : {Family::resnet_basic, Family::resnet_bottleneck}) {
    auto cfg = tiny_resnet({2, 2, 2});
    cfg.family = family;
    Ddnn<float> d(cfg, specs({{1, 2, 1}}), {}, 12);
    Ddnn<float> plain(cfg, {}, {}, 99);
    plain.copy_state_from(d);
    Gen g(13);
    auto x = g.tensor<float>({3, 3, 8, 8});
    CHECK(testing::bit_equal(d.forward(0, x, nn::Mode::eval).logits.data(),
                             plain.forward(0, x, nn::Mode::eval).logits.data()));
  }
}

TEST_CASE("extracted nets reproduce in-network logits") {
  for (auto mode : {ClassifierMode::shared, ClassifierMode::separate}) {
    DdnnOptions opts;
    opts.classifier_mode = mode;
    Ddnn<float> d(tiny_resnet({3, 3, 3}), specs({{3, 2, 2}, {1, 1, 2}}, mode), opts, 14);
    // Non-trivial running statistics.
    Gen g(15);
    for (int i = 0; i < 3; ++i) d.forward_all(g.tensor<float>({4, 3, 8, 8}), nn::Mode::train);
    for (int k = 0; k < d.num_nets(); ++k) {
      auto e = d.extract(k);
      CHECK(e.num_subnets() == 0);
      CHECK(e.config().stage_blocks == d.blocks_of(k));
      for (int batch = 0; batch < 10; ++batch) {
        auto x = g.tensor<float>({2, 3, 8, 8});
        auto a = d.forward(k, x, nn::Mode::eval).logits.data();
        auto b = e.forward(0, x, nn::Mode::eval).logits.data();
        CHECK((a - b).abs().maxCoeff() == 0);
      }
      // Extraction is a projection.
      auto ee = e.extract(0);
      CHECK(ee.config() == e.config());
      auto x = g.tensor<float>({2, 3, 8, 8});
      CHECK(testing::bit_equal(ee.forward(0, x, nn::Mode::eval).logits.data(),
                               e.forward(0, x, nn::Mode::eval).logits.data()));
    }
  }
}

TEST_CASE("extracting ResNet-18 from ResNet-34") {
  Ddnn<float> d(NetConfig::imagenet_resnet({3, 4, 6, 3}, false), specs({{2, 2, 2, 2}}), {}, 16);
  auto r18 = d.extract(1);
  CHECK(r18.config().name() == "ResNet-18");
  CHECK(std::abs(double(r18.num_parameters()) - 11.7e6) / 11.7e6 < 0.01);
  CHECK(d.dropped_blocks(1) == std::vector<std::vector<int>>{{3}, {3, 4}, {3, 4, 5, 6}, {3}});
}

TEST_CASE("analytic parameter counts equal registry enumeration") {
  std::vector<NetConfig> cfgs;
  for (auto family : {Family::resnet_basic, Family::resnet_bottleneck}) {
    for (auto order : {nn::BlockOrder::post, nn::BlockOrder::pre}) {
      auto c = tiny_resnet({2, 1, 3});
      c.family = family;
      c.block_order = order;
      cfgs.push_back(c);
    }
  }
  auto vgg = NetConfig::cifar_vgg({1, 1, 2, 2, 2});
  vgg.stage_channels = {4, 8, 8, 16, 16};
  cfgs.push_back(vgg);
  auto stemmed = tiny_resnet({1, 1}, 5, 32);
  stemmed.stem = Stem::imagenet;
  cfgs.push_back(stemmed);
  cfgs.push_back(NetConfig::imagenet_resnet({2, 2, 2, 2}, false));
  for (const auto& c : cfgs) {
    Ddnn<float> d(c, {}, {}, 17);
    CHECK_MESSAGE(d.num_parameters() == count_params(c), c.name());
  }
}

TEST_CASE("published parameter counts") {
  auto near = [](Index got, double want) { return std::abs(double(got) - want) / want < 0.01; };
  CHECK(near(count_params(NetConfig::imagenet_resnet({2, 2, 2, 2}, false)), 11.7e6));
  CHECK(near(count_params(NetConfig::imagenet_resnet({3, 4, 6, 3}, true)), 25.6e6));
  CHECK(near(count_params(NetConfig::imagenet_resnet({2, 2, 2, 2}, true)), 16.0e6));
}

TEST_CASE("FLOP counts") {
  auto r18 = NetConfig::imagenet_resnet({2, 2, 2, 2}, false);
  CHECK(std::abs(count_flops(r18) / 1.8e9 - 1) < 0.05);
  auto r32c = NetConfig::imagenet_resnet({2, 3, 3, 2}, true);
  CHECK(std::abs(count_flops(r32c) / 2.8e9 - 1) < 0.05);

  // Independent layer-by-layer oracle for both bottleneck layouts.
  auto r50 = NetConfig::imagenet_resnet({3, 4, 6, 3}, true);
  CHECK(double(count_flops(r50)) == bottleneck_macs({3, 4, 6, 3}, false));
  r50.bottleneck_stride = nn::BottleneckStride::on_1x1;
  CHECK(double(count_flops(r50)) == bottleneck_macs({3, 4, 6, 3}, true));
  // The original layout is the one behind the often-quoted 3.8G.
  CHECK(std::abs(count_flops(r50) / 3.8e9 - 1) < 0.05);

  // Sub-net costs are those of the extracted plain net.
  auto cfg = tiny_resnet({3, 3, 3});
  SubnetSpec sub{{3, 2, 2}};
  CHECK(count_flops(cfg, sub) == count_flops(subnet_config(cfg, sub)));
  CHECK(count_params(cfg, sub) == count_params(subnet_config(cfg, sub)));
  CHECK(count_flops(cfg, sub) < count_flops(cfg));
}

TEST_CASE("input validation") {
  Ddnn<float> d(tiny_resnet({2, 2, 2}), specs({{1, 1, 1}}), {}, 18);
  CHECK_THROWS_AS(d.forward(0, Tensor<float>::zeros({2, 3, 9, 9}), nn::Mode::eval), ShapeError);
  CHECK_THROWS_AS(d.forward(0, Tensor<float>::zeros({2, 1, 8, 8}), nn::Mode::eval), ShapeError);
  CHECK_THROWS_AS(d.forward(5, Tensor<float>::zeros({2, 3, 8, 8}), nn::Mode::eval), std::out_of_range);
}

}  // TEST_SUITE
