#include "ddnn/network.hpp"

namespace ddnn::net {

namespace {

struct CostWalker {
  Index params = 0;
  Index flops = 0;
  Index h = 0, w = 0;

  // Advances the running resolution to the conv output.
  void conv(Index cin, Index cout, Index k, Index s, Index p) {
    params += cin * cout * k * k;
    h = (h + 2 * p - k) / s + 1;
    w = (w + 2 * p - k) / s + 1;
    flops += cin * cout * k * k * h * w;
  }
  void bn(Index c) { params += 2 * c; }
  void linear(Index in, Index out) {
    params += in * out + out;
    flops += in * out;
  }
};

CostWalker walk(const NetConfig& cfg, Index height, Index width) {
  cfg.validate();
  CostWalker c;
  c.h = height;
  c.w = width;
  const bool pre = cfg.block_order == nn::BlockOrder::pre;
  Index in = cfg.input_shape[0];

  if (cfg.family == Family::vgg) {
    for (std::size_t i = 0; i < cfg.num_stages(); ++i) {
      if (i > 0) {
        c.h /= 2;
        c.w /= 2;
      }
      for (int j = 0; j < cfg.stage_blocks[i]; ++j) {
        c.conv(in, cfg.stage_channels[i], 3, 1, 1);
        c.bn(cfg.stage_channels[i]);
        in = cfg.stage_channels[i];
      }
    }
    c.linear(in, cfg.num_classes);
    return c;
  }

  if (cfg.stem == Stem::imagenet) {
    c.conv(in, 64, 7, 2, 3);
    c.h = (c.h + 2 - 3) / 2 + 1;
    c.w = (c.w + 2 - 3) / 2 + 1;
  } else {
    c.conv(in, cfg.stem_channels(), 3, 1, 1);
  }
  if (!pre) c.bn(cfg.stem_channels());
  in = cfg.stem_channels();

  const bool bottleneck = cfg.family == Family::resnet_bottleneck;
  for (std::size_t i = 0; i < cfg.num_stages(); ++i) {
    const Index width_i = cfg.stage_channels[i];
    const Index out = cfg.stage_out_channels(i);
    for (int j = 0; j < cfg.stage_blocks[i]; ++j) {
      const Index stride = (i > 0 && j == 0) ? 2 : 1;
      const Index h0 = c.h, w0 = c.w;
      if (bottleneck) {
        const bool on_1x1 = cfg.bottleneck_stride == nn::BottleneckStride::on_1x1;
        c.conv(in, width_i, 1, on_1x1 ? stride : 1, 0);
        c.conv(width_i, width_i, 3, on_1x1 ? 1 : stride, 1);
        c.conv(width_i, out, 1, 1, 0);
        if (pre) {
          c.bn(in); c.bn(width_i); c.bn(width_i);
        } else {
          c.bn(width_i); c.bn(width_i); c.bn(out);
        }
      } else {
        c.conv(in, width_i, 3, stride, 1);
        c.conv(width_i, width_i, 3, 1, 1);
        c.bn(pre ? in : width_i);
        c.bn(width_i);
      }
      if (stride != 1 || in != out) {
        const Index h1 = c.h, w1 = c.w;
        c.h = h0;
        c.w = w0;
        c.conv(in, out, 1, stride, 0);
        if (!pre) c.bn(out);
        c.h = h1;
        c.w = w1;
      }
      in = out;
    }
  }
  if (pre) c.bn(in);
  c.linear(in, cfg.num_classes);
  return c;
}

}  // namespace

Index count_params(const NetConfig& cfg) {
  return walk(cfg, cfg.input_shape[1], cfg.input_shape[2]).params;
}

Index count_params(const NetConfig& cfg, const SubnetSpec& spec) {
  return count_params(subnet_config(cfg, spec));
}

Index count_flops(const NetConfig& cfg) { return count_flops(cfg, cfg.input_shape[1], cfg.input_shape[2]); }

Index count_flops(const NetConfig& cfg, Index height, Index width) {
  return walk(cfg, height, width).flops;
}

Index count_flops(const NetConfig& cfg, const SubnetSpec& spec) {
  return count_flops(subnet_config(cfg, spec));
}

}  // namespace ddnn::net
