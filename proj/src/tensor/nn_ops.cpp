#include "ddnn/ops.hpp"

#include "op_support.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace ddnn {

using detail::Buffer;
using detail::make_result;
using detail::shape_fail;

namespace {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using CMap = Eigen::Map<const Mat<S>>;
template <typename S>
using MMap = Eigen::Map<Mat<S>>;

struct ConvGeometry {
  Index n, c, h, w;    // input
  Index o, kh, kw;     // kernel
  Index ho, wo;        // output
  Index stride, pad;

  Index col_rows() const { return c * kh * kw; }
  Index col_cols() const { return n * ho * wo; }
};

// Output columns [lo, hi) whose input column ox * stride - pad + kx falls inside the image.
inline std::pair<Index, Index> valid_cols(const ConvGeometry& g, Index kx) {
  Index lo = 0;
  while (lo < g.wo && lo * g.stride - g.pad + kx < 0) ++lo;
  Index hi = g.wo;
  while (hi > lo && (hi - 1) * g.stride - g.pad + kx >= g.w) --hi;
  return {lo, hi};
}

// col(r, q) with r = (ci, ky, kx), q = (n, oy, ox).
template <typename S>
void im2col(const ConvGeometry& g, const S* x, S* col) {
  const Index cols = g.col_cols();
  for (Index ci = 0; ci < g.c; ++ci) {
    for (Index ky = 0; ky < g.kh; ++ky) {
      for (Index kx = 0; kx < g.kw; ++kx) {
        S* row = col + ((ci * g.kh + ky) * g.kw + kx) * cols;
        const auto [lo, hi] = valid_cols(g, kx);
        for (Index ni = 0; ni < g.n; ++ni) {
          const S* plane = x + (ni * g.c + ci) * g.h * g.w;
          S* dst = row + ni * g.ho * g.wo;
          for (Index oy = 0; oy < g.ho; ++oy) {
            const Index iy = oy * g.stride - g.pad + ky;
            S* out = dst + oy * g.wo;
            if (iy < 0 || iy >= g.h) {
              std::fill(out, out + g.wo, S(0));
              continue;
            }
            std::fill(out, out + lo, S(0));
            std::fill(out + hi, out + g.wo, S(0));
            const Index base = iy * g.w - g.pad + kx;
            if (g.stride == 1) {
              std::copy(plane + base + lo, plane + base + hi, out + lo);
            } else {
              for (Index ox = lo; ox < hi; ++ox) out[ox] = plane[base + ox * g.stride];
            }
          }
        }
      }
    }
  }
}

template <typename S>
void col2im_add(const ConvGeometry& g, const S* col, S* dx) {
  const Index cols = g.col_cols();
  for (Index ci = 0; ci < g.c; ++ci) {
    for (Index ky = 0; ky < g.kh; ++ky) {
      for (Index kx = 0; kx < g.kw; ++kx) {
        const S* row = col + ((ci * g.kh + ky) * g.kw + kx) * cols;
        const auto [lo, hi] = valid_cols(g, kx);
        for (Index ni = 0; ni < g.n; ++ni) {
          S* plane = dx + (ni * g.c + ci) * g.h * g.w;
          const S* src = row + ni * g.ho * g.wo;
          for (Index oy = 0; oy < g.ho; ++oy) {
            const Index iy = oy * g.stride - g.pad + ky;
            if (iy < 0 || iy >= g.h) continue;
            const Index base = iy * g.w - g.pad + kx;
            const S* in = src + oy * g.wo;
            for (Index ox = lo; ox < hi; ++ox) plane[base + ox * g.stride] += in[ox];
          }
        }
      }
    }
  }
}

// Channel-major (o, n*hw) <-> batch-major (n, o, hw).
template <typename S>
void channel_major_to_nchw(const S* src, S* dst, Index n, Index o, Index hw) {
  for (Index ni = 0; ni < n; ++ni) {
    for (Index oi = 0; oi < o; ++oi) {
      const S* s = src + oi * n * hw + ni * hw;
      S* d = dst + (ni * o + oi) * hw;
      std::copy(s, s + hw, d);
    }
  }
}

template <typename S>
void nchw_to_channel_major(const S* src, S* dst, Index n, Index o, Index hw) {
  for (Index ni = 0; ni < n; ++ni) {
    for (Index oi = 0; oi < o; ++oi) {
      const S* s = src + (ni * o + oi) * hw;
      S* d = dst + oi * n * hw + ni * hw;
      std::copy(s, s + hw, d);
    }
  }
}

// Channel statistics layout for an N x C x ... tensor.
struct ChannelView {
  Index n, c, spatial;
  Index count() const { return n * spatial; }
  Index at(Index ni, Index ci, Index s) const { return (ni * c + ci) * spatial + s; }
};

template <typename S>
ChannelView channel_view(const char* op, const Tensor<S>& x, const Tensor<S>& gamma,
                         const Tensor<S>& beta) {
  if (x.rank() < 2) shape_fail(op, "expects N x C x ..., got " + shape_str(x.shape()));
  ChannelView v{x.dim(0), x.dim(1), 1};
  for (std::size_t d = 2; d < x.rank(); ++d) v.spatial *= x.dim(d);
  if (gamma.numel() != v.c || beta.numel() != v.c) {
    shape_fail(op, "affine parameters of size " + std::to_string(gamma.numel()) + "/" +
                       std::to_string(beta.numel()) + " for " + std::to_string(v.c) + " channels");
  }
  return v;
}

}  // namespace

template <typename S>
Tensor<S> conv2d(const Tensor<S>& input, const Tensor<S>& weight, Conv2dAttrs attrs) {
  if (input.rank() != 4 || weight.rank() != 4) {
    shape_fail("conv2d", "expects NCHW input and OIHW kernel, got " + shape_str(input.shape()) +
                             " and " + shape_str(weight.shape()));
  }
  if (input.dim(1) != weight.dim(1)) {
    shape_fail("conv2d", "input channels " + std::to_string(input.dim(1)) +
                             " != kernel channels " + std::to_string(weight.dim(1)));
  }
  if (attrs.stride < 1 || attrs.padding < 0) shape_fail("conv2d", "invalid stride/padding");
  ConvGeometry g{input.dim(0), input.dim(1), input.dim(2), input.dim(3),
                 weight.dim(0), weight.dim(2), weight.dim(3), 0, 0, attrs.stride, attrs.padding};
  const Index span_h = g.h + 2 * g.pad - g.kh, span_w = g.w + 2 * g.pad - g.kw;
  if (span_h < 0 || span_w < 0) {
    shape_fail("conv2d", "kernel " + shape_str(weight.shape()) + " larger than padded input " +
                             shape_str(input.shape()));
  }
  g.ho = span_h / g.stride + 1;
  g.wo = span_w / g.stride + 1;
  detail::check_finite<S>("conv2d", {&input, &weight});

  const Index hw = g.ho * g.wo;
  Buffer<S> col(g.col_rows() * g.col_cols());
  im2col(g, input.data().data(), col.data());
  Buffer<S> prod(g.o * g.col_cols());
  MMap<S>(prod.data(), g.o, g.col_cols()).noalias() =
      CMap<S>(weight.data().data(), g.o, g.col_rows()) *
      CMap<S>(col.data(), g.col_rows(), g.col_cols());
  Buffer<S> out(g.n * g.o * hw);
  channel_major_to_nchw(prod.data(), out.data(), g.n, g.o, hw);

  auto in = input.impl_ptr();
  auto wt = weight.impl_ptr();
  return make_result<S>(
      "conv2d", Shape{g.n, g.o, g.ho, g.wo}, std::move(out), {&input, &weight},
      [g, in, wt, hw](const Buffer<S>& grad, std::vector<Buffer<S>*>& gi) {
        Buffer<S> gmat(g.o * g.col_cols());
        nchw_to_channel_major(grad.data(), gmat.data(), g.n, g.o, hw);
        CMap<S> gm(gmat.data(), g.o, g.col_cols());
        if (gi[1]) {
          // The column buffer is rebuilt rather than kept alive between passes.
          Buffer<S> col(g.col_rows() * g.col_cols());
          im2col(g, in->data.data(), col.data());
          MMap<S>(gi[1]->data(), g.o, g.col_rows()).noalias() +=
              gm * CMap<S>(col.data(), g.col_rows(), g.col_cols()).transpose();
        }
        if (gi[0]) {
          Buffer<S> dcol(g.col_rows() * g.col_cols());
          MMap<S>(dcol.data(), g.col_rows(), g.col_cols()).noalias() =
              CMap<S>(wt->data.data(), g.o, g.col_rows()).transpose() * gm;
          col2im_add(g, dcol.data(), gi[0]->data());
        }
      });
}

template <typename S>
Tensor<S> max_pool2d(const Tensor<S>& input, Pool2dAttrs attrs) {
  if (input.rank() != 4) shape_fail("max_pool2d", "expects NCHW, got " + shape_str(input.shape()));
  if (attrs.kernel < 1 || attrs.stride < 1 || attrs.padding < 0 || attrs.padding >= attrs.kernel) {
    shape_fail("max_pool2d", "invalid kernel/stride/padding");
  }
  detail::check_finite<S>("max_pool2d", {&input});
  const Index n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const Index ho = (h + 2 * attrs.padding - attrs.kernel) / attrs.stride + 1;
  const Index wo = (w + 2 * attrs.padding - attrs.kernel) / attrs.stride + 1;
  if (ho < 1 || wo < 1) shape_fail("max_pool2d", "window larger than input " + shape_str(input.shape()));
  Buffer<S> out(n * c * ho * wo);
  auto arg = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(out.size()));
  const auto& x = input.data();
  for (Index plane = 0; plane < n * c; ++plane) {
    for (Index oy = 0; oy < ho; ++oy) {
      for (Index ox = 0; ox < wo; ++ox) {
        Index best = -1;
        S best_v = -std::numeric_limits<S>::infinity();
        for (Index ky = 0; ky < attrs.kernel; ++ky) {
          const Index iy = oy * attrs.stride - attrs.padding + ky;
          if (iy < 0 || iy >= h) continue;
          for (Index kx = 0; kx < attrs.kernel; ++kx) {
            const Index ix = ox * attrs.stride - attrs.padding + kx;
            if (ix < 0 || ix >= w) continue;
            const Index p = (plane * h + iy) * w + ix;
            if (best < 0 || x(p) > best_v) {
              best = p;
              best_v = x(p);
            }
          }
        }
        const Index q = (plane * ho + oy) * wo + ox;
        out(q) = best_v;
        (*arg)[q] = best;
      }
    }
  }
  return make_result<S>("max_pool2d", Shape{n, c, ho, wo}, std::move(out), {&input},
                        [arg](const Buffer<S>& g, std::vector<Buffer<S>*>& gi) {
                          if (!gi[0]) return;
                          for (Index q = 0; q < g.size(); ++q) (*gi[0])((*arg)[q]) += g(q);
                        });
}

template <typename S>
Tensor<S> batch_norm_train(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                           S epsilon, BatchStats<S>* stats) {
  const ChannelView v = channel_view("batch_norm_train", x, gamma, beta);
  if (v.n < 2) shape_fail("batch_norm_train", "batch size must be >= 2 in train mode");
  detail::check_finite<S>("batch_norm_train", {&x, &gamma, &beta});
  const auto& xd = x.data();
  const double m = static_cast<double>(v.count());
  Buffer<S> mu(v.c), var(v.c);
  for (Index ci = 0; ci < v.c; ++ci) {
    double s = 0;
    for (Index ni = 0; ni < v.n; ++ni)
      for (Index k = 0; k < v.spatial; ++k) s += xd(v.at(ni, ci, k));
    const double mean = s / m;
    double ss = 0;
    for (Index ni = 0; ni < v.n; ++ni)
      for (Index k = 0; k < v.spatial; ++k) {
        const double d = xd(v.at(ni, ci, k)) - mean;
        ss += d * d;
      }
    mu(ci) = static_cast<S>(mean);
    var(ci) = static_cast<S>(ss / m);
  }
  const Buffer<S> inv_std = (var + epsilon).rsqrt();
  auto xhat = std::make_shared<Buffer<S>>(xd.size());
  Buffer<S> out(xd.size());
  const auto& gd = gamma.data();
  const auto& bd = beta.data();
  for (Index ni = 0; ni < v.n; ++ni)
    for (Index ci = 0; ci < v.c; ++ci)
      for (Index k = 0; k < v.spatial; ++k) {
        const Index p = v.at(ni, ci, k);
        const S h = (xd(p) - mu(ci)) * inv_std(ci);
        (*xhat)(p) = h;
        out(p) = gd(ci) * h + bd(ci);
      }
  if (stats) *stats = BatchStats<S>{mu, var};

  auto gam = gamma.impl_ptr();
  return make_result<S>(
      "batch_norm_train", x.shape(), std::move(out), {&x, &gamma, &beta},
      [v, xhat, inv_std, gam](const Buffer<S>& g, std::vector<Buffer<S>*>& gi) {
        Buffer<S> sum_g = Buffer<S>::Zero(v.c), sum_gh = Buffer<S>::Zero(v.c);
        for (Index ni = 0; ni < v.n; ++ni)
          for (Index ci = 0; ci < v.c; ++ci)
            for (Index k = 0; k < v.spatial; ++k) {
              const Index p = v.at(ni, ci, k);
              sum_g(ci) += g(p);
              sum_gh(ci) += g(p) * (*xhat)(p);
            }
        if (gi[1]) *gi[1] += sum_gh;
        if (gi[2]) *gi[2] += sum_g;
        if (gi[0]) {
          const S m = static_cast<S>(v.count());
          for (Index ni = 0; ni < v.n; ++ni)
            for (Index ci = 0; ci < v.c; ++ci) {
              const S coef = gam->data(ci) * inv_std(ci) / m;
              for (Index k = 0; k < v.spatial; ++k) {
                const Index p = v.at(ni, ci, k);
                (*gi[0])(p) += coef * (m * g(p) - sum_g(ci) - (*xhat)(p) * sum_gh(ci));
              }
            }
        }
      });
}

template <typename S>
Tensor<S> batch_norm_eval(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                          const Buffer<S>& mean, const Buffer<S>& var, S epsilon) {
  const ChannelView v = channel_view("batch_norm_eval", x, gamma, beta);
  if (mean.size() != v.c || var.size() != v.c) {
    shape_fail("batch_norm_eval", "running statistics do not match channel count");
  }
  detail::check_finite<S>("batch_norm_eval", {&x, &gamma, &beta});
  const Buffer<S> inv_std = (var + epsilon).rsqrt();
  const auto& xd = x.data();
  const auto& gd = gamma.data();
  const auto& bd = beta.data();
  Buffer<S> out(xd.size());
  for (Index ni = 0; ni < v.n; ++ni)
    for (Index ci = 0; ci < v.c; ++ci)
      for (Index k = 0; k < v.spatial; ++k) {
        const Index p = v.at(ni, ci, k);
        out(p) = gd(ci) * ((xd(p) - mean(ci)) * inv_std(ci)) + bd(ci);
      }
  auto in = x.impl_ptr();
  auto gam = gamma.impl_ptr();
  return make_result<S>(
      "batch_norm_eval", x.shape(), std::move(out), {&x, &gamma, &beta},
      [v, in, gam, mean, inv_std](const Buffer<S>& g, std::vector<Buffer<S>*>& gi) {
        for (Index ni = 0; ni < v.n; ++ni)
          for (Index ci = 0; ci < v.c; ++ci)
            for (Index k = 0; k < v.spatial; ++k) {
              const Index p = v.at(ni, ci, k);
              const S h = (in->data(p) - mean(ci)) * inv_std(ci);
              if (gi[0]) (*gi[0])(p) += g(p) * gam->data(ci) * inv_std(ci);
              if (gi[1]) (*gi[1])(ci) += g(p) * h;
              if (gi[2]) (*gi[2])(ci) += g(p);
            }
      });
}

template <typename S>
Tensor<S> log_softmax(const Tensor<S>& logits) {
  if (logits.rank() != 2) shape_fail("log_softmax", "expects N x M, got " + shape_str(logits.shape()));
  detail::check_finite<S>("log_softmax", {&logits});
  const Index n = logits.dim(0), m = logits.dim(1);
  if (m < 1) shape_fail("log_softmax", "empty class axis");
  Buffer<S> out(n * m);
  const auto& z = logits.data();
  for (Index i = 0; i < n; ++i) {
    const auto row = z.segment(i * m, m);
    const S mx = row.maxCoeff();
    const S lse = mx + std::log((row - mx).exp().sum());
    out.segment(i * m, m) = row - lse;
  }
  auto probs = std::make_shared<Buffer<S>>(out.exp());
  return make_result<S>("log_softmax", Shape{n, m}, std::move(out), {&logits},
                        [probs, n, m](const Buffer<S>& g, std::vector<Buffer<S>*>& gi) {
                          if (!gi[0]) return;
                          for (Index i = 0; i < n; ++i) {
                            const S total = g.segment(i * m, m).sum();
                            gi[0]->segment(i * m, m) +=
                                g.segment(i * m, m) - probs->segment(i * m, m) * total;
                          }
                        });
}

#define DDNN_INSTANTIATE(S)                                                                   \
  template Tensor<S> conv2d(const Tensor<S>&, const Tensor<S>&, Conv2dAttrs);                 \
  template Tensor<S> max_pool2d(const Tensor<S>&, Pool2dAttrs);                               \
  template Tensor<S> batch_norm_train(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, S, \
                                      BatchStats<S>*);                                        \
  template Tensor<S> batch_norm_eval(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&,    \
                                     const Buffer<S>&, const Buffer<S>&, S);                  \
  template Tensor<S> log_softmax(const Tensor<S>&);
DDNN_INSTANTIATE(float)
DDNN_INSTANTIATE(double)
#undef DDNN_INSTANTIATE

}  // namespace ddnn
