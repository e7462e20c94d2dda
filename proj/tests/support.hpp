// Shared generators and reference implementations for the unit tests.
#pragma once

#include "ddnn/network.hpp"
#include "ddnn/ops.hpp"
#include "ddnn/tensor.hpp"

#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <vector>

namespace testing {

using ddnn::Index;
using ddnn::Shape;
template <typename S>
using T = ddnn::Tensor<S>;
template <typename S>
using Buf = ddnn::detail::Buffer<S>;

// Seeded source of random shapes and tensors for property tests.
struct Gen {
  explicit Gen(std::uint64_t seed) : rng(seed) {}

  int integer(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }
  double real(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

  Shape shape(int min_rank, int max_rank, Index max_extent) {
    Shape s(integer(min_rank, max_rank));
    for (auto& d : s) d = integer(1, static_cast<int>(max_extent));
    return s;
  }

  template <typename S>
  Buf<S> values(Index n, double lo = -1, double hi = 1) {
    Buf<S> b(n);
    for (Index i = 0; i < n; ++i) b(i) = static_cast<S>(real(lo, hi));
    return b;
  }

  // Values kept at least `gap` away from zero, for ops with a kink there.
  template <typename S>
  Buf<S> away_from_zero(Index n, double gap = 0.05) {
    Buf<S> b(n);
    for (Index i = 0; i < n; ++i) {
      const double m = real(gap, 1.0);
      b(i) = static_cast<S>(integer(0, 1) ? m : -m);
    }
    return b;
  }

  template <typename S>
  T<S> tensor(Shape shape, bool requires_grad = false, double lo = -1, double hi = 1) {
    const Index n = ddnn::numel_of(shape);
    return T<S>::from(std::move(shape), values<S>(n, lo, hi), requires_grad);
  }

  std::mt19937_64 rng;
};

// Direct nested-loop convolution, NCHW input and OIHW weight.
template <typename S>
Buf<S> naive_conv(const T<S>& x, const T<S>& w, Index stride, Index pad) {
  const Index N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const Index O = w.dim(0), K = w.dim(2), KW = w.dim(3);
  const Index OH = (H + 2 * pad - K) / stride + 1, OW = (W + 2 * pad - KW) / stride + 1;
  Buf<S> out = Buf<S>::Zero(N * O * OH * OW);
  for (Index n = 0; n < N; ++n)
    for (Index o = 0; o < O; ++o)
      for (Index oy = 0; oy < OH; ++oy)
        for (Index ox = 0; ox < OW; ++ox) {
          double acc = 0;
          for (Index c = 0; c < C; ++c)
            for (Index ky = 0; ky < K; ++ky)
              for (Index kx = 0; kx < KW; ++kx) {
                const Index y = oy * stride + ky - pad, xx = ox * stride + kx - pad;
                if (y < 0 || y >= H || xx < 0 || xx >= W) continue;
                acc += double(x.data()(((n * C + c) * H + y) * W + xx)) *
                       double(w.data()(((o * C + c) * K + ky) * KW + kx));
              }
          out(((n * O + o) * OH + oy) * OW + ox) = static_cast<S>(acc);
        }
  return out;
}

template <typename S>
Buf<S> naive_max_pool(const T<S>& x, Index kernel, Index stride, Index pad) {
  const Index N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const Index OH = (H + 2 * pad - kernel) / stride + 1, OW = (W + 2 * pad - kernel) / stride + 1;
  Buf<S> out(N * C * OH * OW);
  for (Index n = 0; n < N; ++n)
    for (Index c = 0; c < C; ++c)
      for (Index oy = 0; oy < OH; ++oy)
        for (Index ox = 0; ox < OW; ++ox) {
          S m = -std::numeric_limits<S>::infinity();
          for (Index ky = 0; ky < kernel; ++ky)
            for (Index kx = 0; kx < kernel; ++kx) {
              const Index y = oy * stride + ky - pad, xx = ox * stride + kx - pad;
              if (y < 0 || y >= H || xx < 0 || xx >= W) continue;
              m = std::max(m, x.data()(((n * C + c) * H + y) * W + xx));
            }
          out(((n * C + c) * OH + oy) * OW + ox) = m;
        }
  return out;
}

// Analytic gradient of scalar f at x next to a central-difference estimate.
template <typename S>
double grad_error(const std::function<T<S>(const T<S>&)>& f, const T<S>& x, S step = S(1e-6)) {
  T<S> leaf = x.detach();
  leaf.set_requires_grad(true);
  ddnn::backward(f(leaf));
  auto fd = ddnn::finite_difference_grad<S>([&](const T<S>& p) { return f(p).item(); }, x, step);
  return ddnn::max_relative_error<S>(leaf.grad(), fd.data());
}

template <typename S>
bool bit_equal(const Buf<S>& a, const Buf<S>& b) {
  return a.size() == b.size() && (a.size() == 0 || (a == b).all());
}

// Small nets that train in milliseconds.
inline ddnn::net::NetConfig tiny_resnet(std::vector<int> blocks, Index classes = 4, Index hw = 8) {
  ddnn::net::NetConfig cfg = ddnn::net::NetConfig::cifar_resnet(std::move(blocks), classes);
  cfg.stage_channels = {4, 8, 8};
  cfg.stage_channels.resize(cfg.stage_blocks.size(), 8);
  cfg.input_shape = {3, hw, hw};
  return cfg;
}

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("ddnn_unit_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace testing
