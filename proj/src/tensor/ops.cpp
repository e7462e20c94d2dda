#include "ddnn/ops.hpp"

#include "op_support.hpp"

#include <algorithm>
#include <cstdio>
#include <limits>

namespace ddnn {

using detail::Buffer;
using detail::make_result;
using detail::require_same_shape;
using detail::shape_fail;

namespace {

template <typename S>
using ImplPtr = std::shared_ptr<detail::TensorImpl<S>>;

// Maps every element of `shape` to its position after reducing `axes` away.
struct ReduceMap {
  Shape out_shape;       // keepdim form
  std::vector<Index> to_out;
  Index out_numel = 1;
  Index group = 1;       // elements folded into each output
};

ReduceMap make_reduce_map(const char* op, const Shape& shape, const Axes& axes) {
  std::vector<bool> reduced(shape.size(), false);
  for (int a : axes) {
    const int ax = detail::normalize_axis(op, a, shape.size());
    if (reduced[ax]) shape_fail(op, "duplicate axis " + std::to_string(ax));
    reduced[ax] = true;
  }
  ReduceMap m;
  m.out_shape = shape;
  for (std::size_t d = 0; d < shape.size(); ++d) {
    if (reduced[d]) {
      m.group *= shape[d];
      m.out_shape[d] = 1;
    }
  }
  m.out_numel = numel_of(m.out_shape);
  const Shape out_strides = detail::strides_of(m.out_shape);
  const Index n = numel_of(shape);
  m.to_out.resize(static_cast<std::size_t>(n));
  std::vector<Index> idx(shape.size(), 0);
  Index out_pos = 0;
  for (Index i = 0; i < n; ++i) {
    m.to_out[i] = out_pos;
    for (int d = static_cast<int>(shape.size()) - 1; d >= 0; --d) {
      ++idx[d];
      if (!reduced[d]) out_pos += out_strides[d];
      if (idx[d] < shape[d]) break;
      if (!reduced[d]) out_pos -= out_strides[d] * shape[d];
      idx[d] = 0;
    }
  }
  return m;
}

Shape drop_reduced(const Shape& keep_shape, const Shape& in_shape, const Axes& axes) {
  std::vector<bool> reduced(in_shape.size(), false);
  for (int a : axes) reduced[detail::normalize_axis("reduce", a, in_shape.size())] = true;
  Shape out;
  for (std::size_t d = 0; d < in_shape.size(); ++d) {
    if (!reduced[d]) out.push_back(keep_shape[d]);
  }
  return out;
}

// (outer, length, inner) view of a tensor around one axis.
struct AxisView {
  Index outer = 1, length = 1, inner = 1;
};

AxisView axis_view(const Shape& shape, int axis) {
  AxisView v;
  for (int d = 0; d < axis; ++d) v.outer *= shape[d];
  v.length = shape[axis];
  for (std::size_t d = axis + 1; d < shape.size(); ++d) v.inner *= shape[d];
  return v;
}

template <typename S, typename Fwd, typename Bwd>
Tensor<S> unary(const char* op, const Tensor<S>& a, Fwd fwd, Bwd bwd_factor) {
  detail::check_finite<S>(op, {&a});
  Buffer<S> out = fwd(a.data());
  ImplPtr<S> in = a.impl_ptr();
  return make_result<S>(op, a.shape(), std::move(out), {&a},
                        [in, bwd_factor](const Buffer<S>& g, std::vector<Buffer<S>*>& gi) {
                          if (gi[0]) *gi[0] += g * bwd_factor(in->data);
                        });
}

}  // namespace

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  require_same_shape("add", a.shape(), b.shape());
  detail::check_finite<S>("add", {&a, &b});
  return make_result<S>("add", a.shape(), a.data() + b.data(), {&a, &b},
                        [](const Buffer<S>& g, std::vector<Buffer<S>*>& gi) {
                          if (gi[0]) *gi[0] += g;
                          if (gi[1]) *gi[1] += g;
                        });
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  require_same_shape("sub", a.shape(), b.shape());
  detail::check_finite<S>("sub", {&a, &b});
  return make_result<S>("sub", a.shape(), a.data() - b.data(), {&a, &b},
                        [](const Buffer<S>& g, std::vector<Buffer<S>*>& gi) {
                          if (gi[0]) *gi[0] += g;
                          if (gi[1]) *gi[1] -= g;
                        });
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  require_same_shape("mul", a.shape(), b.shape());
  detail::check_finite<S>("mul", {&a, &b});
  ImplPtr<S> ia = a.impl_ptr(), ib = b.impl_ptr();
  return make_result<S>("mul", a.shape(), a.data() * b.data(), {&a, &b},
                        [ia, ib](const Buffer<S>& g, std::vector<Buffer<S>*>& gi) {
                          if (gi[0]) *gi[0] += g * ib->data;
                          if (gi[1]) *gi[1] += g * ia->data;
                        });
}

template <typename S>
Tensor<S> neg(const Tensor<S>& a) {
  detail::check_finite<S>("neg", {&a});
  return make_result<S>("neg", a.shape(), -a.data(), {&a},
                        [](const Buffer<S>& g, std::vector<Buffer<S>*>& gi) {
                          if (gi[0]) *gi[0] -= g;
                        });
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S factor) {
  detail::check_finite<S>("scale", {&a});
  return make_result<S>("scale", a.shape(), a.data() * factor, {&a},
                        [factor](const Buffer<S>& g, std::vector<Buffer<S>*>& gi) {
                          if (gi[0]) *gi[0] += g * factor;
                        });
}

template <typename S>
Tensor<S> add_scalar(const Tensor<S>& a, S value) {
  detail::check_finite<S>("add_scalar", {&a});
  return make_result<S>("add_scalar", a.shape(), a.data() + value, {&a},
                        [](const Buffer<S>& g, std::vector<Buffer<S>*>& gi) {
                          if (gi[0]) *gi[0] += g;
                        });
}

template <typename S>
Tensor<S> relu(const Tensor<S>& a) {
  return unary<S>(
      "relu", a, [](const Buffer<S>& x) -> Buffer<S> { return x.max(S(0)); },
      [](const Buffer<S>& x) -> Buffer<S> { return (x > S(0)).template cast<S>(); });
}

template <typename S>
Tensor<S> exp(const Tensor<S>& a) {
  return unary<S>(
      "exp", a, [](const Buffer<S>& x) -> Buffer<S> { return x.exp(); },
      [](const Buffer<S>& x) -> Buffer<S> { return x.exp(); });
}

template <typename S>
Tensor<S> log(const Tensor<S>& a, S floor) {
  if (floor > S(0) && checked_mode() && (a.data() < floor).any()) {
    std::fprintf(stderr, "[checked] log: %ld entries below floor %g clamped\n",
                 static_cast<long>((a.data() < floor).count()), static_cast<double>(floor));
  }
  return unary<S>(
      "log", a, [floor](const Buffer<S>& x) -> Buffer<S> { return x.max(floor).log(); },
      [floor](const Buffer<S>& x) -> Buffer<S> {
        return (x >= floor).select(x.inverse(), Buffer<S>::Zero(x.size()));
      });
}

template <typename S>
Tensor<S> abs(const Tensor<S>& a) {
  return unary<S>(
      "abs", a, [](const Buffer<S>& x) -> Buffer<S> { return x.abs(); },
      [](const Buffer<S>& x) -> Buffer<S> {
        return (x > S(0)).template cast<S>() - (x < S(0)).template cast<S>();
      });
}

template <typename S>
Tensor<S> square(const Tensor<S>& a) {
  return unary<S>(
      "square", a, [](const Buffer<S>& x) -> Buffer<S> { return x.square(); },
      [](const Buffer<S>& x) -> Buffer<S> { return S(2) * x; });
}

template <typename S>
Tensor<S> sum(const Tensor<S>& a, const Axes& axes, bool keepdim) {
  detail::check_finite<S>("sum", {&a});
  auto map = std::make_shared<ReduceMap>(make_reduce_map("sum", a.shape(), axes));
  Buffer<S> out = Buffer<S>::Zero(map->out_numel);
  const auto& x = a.data();
  for (Index i = 0; i < x.size(); ++i) out(map->to_out[i]) += x(i);
  Shape shape = keepdim ? map->out_shape : drop_reduced(map->out_shape, a.shape(), axes);
  return make_result<S>("sum", std::move(shape), std::move(out), {&a},
                        [map](const Buffer<S>& g, std::vector<Buffer<S>*>& gi) {
                          if (!gi[0]) return;
                          auto& dst = *gi[0];
                          for (Index i = 0; i < dst.size(); ++i) dst(i) += g(map->to_out[i]);
                        });
}

template <typename S>
Tensor<S> mean(const Tensor<S>& a, const Axes& axes, bool keepdim) {
  detail::check_finite<S>("mean", {&a});
  auto map = std::make_shared<ReduceMap>(make_reduce_map("mean", a.shape(), axes));
  if (map->group == 0) shape_fail("mean", "reduction over an empty axis");
  Buffer<S> out = Buffer<S>::Zero(map->out_numel);
  const auto& x = a.data();
  for (Index i = 0; i < x.size(); ++i) out(map->to_out[i]) += x(i);
  const S inv = S(1) / static_cast<S>(map->group);
  out *= inv;
  Shape shape = keepdim ? map->out_shape : drop_reduced(map->out_shape, a.shape(), axes);
  return make_result<S>("mean", std::move(shape), std::move(out), {&a},
                        [map, inv](const Buffer<S>& g, std::vector<Buffer<S>*>& gi) {
                          if (!gi[0]) return;
                          auto& dst = *gi[0];
                          for (Index i = 0; i < dst.size(); ++i) dst(i) += g(map->to_out[i]) * inv;
                        });
}

template <typename S>
Tensor<S> sum_all(const Tensor<S>& a) {
  detail::check_finite<S>("sum_all", {&a});
  Buffer<S> out(1);
  out(0) = a.data().sum();
  return make_result<S>("sum_all", Shape{}, std::move(out), {&a},
                        [](const Buffer<S>& g, std::vector<Buffer<S>*>& gi) {
                          if (gi[0]) *gi[0] += g(0);
                        });
}

template <typename S>
Tensor<S> mean_all(const Tensor<S>& a) {
  detail::check_finite<S>("mean_all", {&a});
  if (a.numel() == 0) shape_fail("mean_all", "empty tensor");
  const S inv = S(1) / static_cast<S>(a.numel());
  Buffer<S> out(1);
  out(0) = a.data().sum() * inv;
  return make_result<S>("mean_all", Shape{}, std::move(out), {&a},
                        [inv](const Buffer<S>& g, std::vector<Buffer<S>*>& gi) {
                          if (gi[0]) *gi[0] += g(0) * inv;
                        });
}

template <typename S>
Tensor<S> max(const Tensor<S>& a, int axis, bool keepdim) {
  detail::check_finite<S>("max", {&a});
  axis = detail::normalize_axis("max", axis, a.rank());
  const AxisView v = axis_view(a.shape(), axis);
  if (v.length == 0) shape_fail("max", "empty axis");
  Buffer<S> out(v.outer * v.inner);
  auto arg = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(out.size()));
  const auto& x = a.data();
  for (Index o = 0; o < v.outer; ++o) {
    for (Index i = 0; i < v.inner; ++i) {
      Index best = o * v.length * v.inner + i;
      for (Index j = 1; j < v.length; ++j) {
        const Index p = (o * v.length + j) * v.inner + i;
        if (x(p) > x(best)) best = p;
      }
      out(o * v.inner + i) = x(best);
      (*arg)[o * v.inner + i] = best;
    }
  }
  Shape shape = a.shape();
  if (keepdim) {
    shape[axis] = 1;
  } else {
    shape.erase(shape.begin() + axis);
  }
  return make_result<S>("max", std::move(shape), std::move(out), {&a},
                        [arg](const Buffer<S>& g, std::vector<Buffer<S>*>& gi) {
                          if (!gi[0]) return;
                          for (Index k = 0; k < g.size(); ++k) (*gi[0])((*arg)[k]) += g(k);
                        });
}

template <typename S>
Tensor<S> pad(const Tensor<S>& a, const std::vector<std::pair<Index, Index>>& widths) {
  detail::check_finite<S>("pad", {&a});
  if (widths.size() != a.rank()) {
    shape_fail("pad", "expected " + std::to_string(a.rank()) + " (before, after) pairs, got " +
                          std::to_string(widths.size()));
  }
  Shape out_shape = a.shape();
  for (std::size_t d = 0; d < widths.size(); ++d) {
    if (widths[d].first < 0 || widths[d].second < 0) shape_fail("pad", "negative pad width");
    out_shape[d] += widths[d].first + widths[d].second;
  }
  const Shape in_shape = a.shape();
  const Shape out_strides = detail::strides_of(out_shape);
  auto map = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(a.numel()));
  std::vector<Index> idx(in_shape.size(), 0);
  for (Index i = 0; i < a.numel(); ++i) {
    Index p = 0;
    for (std::size_t d = 0; d < idx.size(); ++d) p += (idx[d] + widths[d].first) * out_strides[d];
    (*map)[i] = p;
    for (int d = static_cast<int>(idx.size()) - 1; d >= 0; --d) {
      if (++idx[d] < in_shape[d]) break;
      idx[d] = 0;
    }
  }
  Buffer<S> out = Buffer<S>::Zero(numel_of(out_shape));
  const auto& x = a.data();
  for (Index i = 0; i < x.size(); ++i) out((*map)[i]) = x(i);
  return make_result<S>("pad", std::move(out_shape), std::move(out), {&a},
                        [map](const Buffer<S>& g, std::vector<Buffer<S>*>& gi) {
                          if (!gi[0]) return;
                          auto& dst = *gi[0];
                          for (Index i = 0; i < dst.size(); ++i) dst(i) += g((*map)[i]);
                        });
}

template <typename S>
Tensor<S> slice(const Tensor<S>& a, int axis, Index begin, Index end) {
  detail::check_finite<S>("slice", {&a});
  axis = detail::normalize_axis("slice", axis, a.rank());
  if (begin < 0 || end > a.dim(axis) || begin > end) {
    shape_fail("slice", "range [" + std::to_string(begin) + "," + std::to_string(end) +
                            ") outside axis " + std::to_string(axis) + " of extent " +
                            std::to_string(a.dim(axis)));
  }
  const AxisView v = axis_view(a.shape(), axis);
  const Index len = end - begin;
  Shape shape = a.shape();
  shape[axis] = len;
  Buffer<S> out(v.outer * len * v.inner);
  const auto& x = a.data();
  for (Index o = 0; o < v.outer; ++o) {
    out.segment(o * len * v.inner, len * v.inner) =
        x.segment((o * v.length + begin) * v.inner, len * v.inner);
  }
  return make_result<S>("slice", std::move(shape), std::move(out), {&a},
                        [v, begin, len](const Buffer<S>& g, std::vector<Buffer<S>*>& gi) {
                          if (!gi[0]) return;
                          for (Index o = 0; o < v.outer; ++o) {
                            gi[0]->segment((o * v.length + begin) * v.inner, len * v.inner) +=
                                g.segment(o * len * v.inner, len * v.inner);
                          }
                        });
}

template <typename S>
Tensor<S> reshape(const Tensor<S>& a, Shape shape) {
  detail::check_finite<S>("reshape", {&a});
  if (numel_of(shape) != a.numel()) {
    shape_fail("reshape", "cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  return make_result<S>("reshape", std::move(shape), a.data(), {&a},
                        [](const Buffer<S>& g, std::vector<Buffer<S>*>& gi) {
                          if (gi[0]) *gi[0] += g;
                        });
}

template <typename S>
Tensor<S> broadcast_to(const Tensor<S>& a, const Shape& shape) {
  detail::check_finite<S>("broadcast_to", {&a});
  if (a.rank() != shape.size()) {
    shape_fail("broadcast_to", "rank mismatch " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  Axes expanded;
  for (std::size_t d = 0; d < shape.size(); ++d) {
    if (a.dim(d) == shape[d]) continue;
    if (a.dim(d) != 1) {
      shape_fail("broadcast_to", "dim " + std::to_string(d) + " of " + shape_str(a.shape()) +
                                     " cannot expand to " + shape_str(shape));
    }
    expanded.push_back(static_cast<int>(d));
  }
  // Broadcasting is the transpose of reducing the expanded axes.
  auto map = std::make_shared<ReduceMap>(make_reduce_map("broadcast_to", shape, expanded));
  Buffer<S> out(numel_of(shape));
  const auto& x = a.data();
  for (Index i = 0; i < out.size(); ++i) out(i) = x(map->to_out[i]);
  return make_result<S>("broadcast_to", shape, std::move(out), {&a},
                        [map](const Buffer<S>& g, std::vector<Buffer<S>*>& gi) {
                          if (!gi[0]) return;
                          auto& dst = *gi[0];
                          for (Index i = 0; i < g.size(); ++i) dst(map->to_out[i]) += g(i);
                        });
}

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using CMap = Eigen::Map<const Mat>;
  using MMap = Eigen::Map<Mat>;
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    shape_fail("matmul", "cannot multiply " + shape_str(a.shape()) + " by " + shape_str(b.shape()));
  }
  detail::check_finite<S>("matmul", {&a, &b});
  const Index n = a.dim(0), k = a.dim(1), m = b.dim(1);
  Buffer<S> out(n * m);
  MMap(out.data(), n, m).noalias() = CMap(a.data().data(), n, k) * CMap(b.data().data(), k, m);
  ImplPtr<S> ia = a.impl_ptr(), ib = b.impl_ptr();
  return make_result<S>("matmul", Shape{n, m}, std::move(out), {&a, &b},
                        [ia, ib, n, k, m](const Buffer<S>& g, std::vector<Buffer<S>*>& gi) {
                          CMap gm(g.data(), n, m);
                          if (gi[0]) {
                            MMap(gi[0]->data(), n, k).noalias() +=
                                gm * CMap(ib->data.data(), k, m).transpose();
                          }
                          if (gi[1]) {
                            MMap(gi[1]->data(), k, m).noalias() +=
                                CMap(ia->data.data(), n, k).transpose() * gm;
                          }
                        });
}

template <typename S>
Tensor<S> transpose(const Tensor<S>& a) {
  using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  if (a.rank() != 2) shape_fail("transpose", "expects rank 2, got " + shape_str(a.shape()));
  detail::check_finite<S>("transpose", {&a});
  const Index r = a.dim(0), c = a.dim(1);
  Buffer<S> out(r * c);
  Eigen::Map<Mat>(out.data(), c, r) = Eigen::Map<const Mat>(a.data().data(), r, c).transpose();
  return make_result<S>("transpose", Shape{c, r}, std::move(out), {&a},
                        [r, c](const Buffer<S>& g, std::vector<Buffer<S>*>& gi) {
                          if (!gi[0]) return;
                          Eigen::Map<Mat>(gi[0]->data(), r, c) +=
                              Eigen::Map<const Mat>(g.data(), c, r).transpose();
                        });
}

#define DDNN_INSTANTIATE(S)                                                                   \
  template Tensor<S> add(const Tensor<S>&, const Tensor<S>&);                                 \
  template Tensor<S> sub(const Tensor<S>&, const Tensor<S>&);                                 \
  template Tensor<S> mul(const Tensor<S>&, const Tensor<S>&);                                 \
  template Tensor<S> neg(const Tensor<S>&);                                                   \
  template Tensor<S> scale(const Tensor<S>&, S);                                              \
  template Tensor<S> add_scalar(const Tensor<S>&, S);                                         \
  template Tensor<S> relu(const Tensor<S>&);                                                  \
  template Tensor<S> exp(const Tensor<S>&);                                                   \
  template Tensor<S> log(const Tensor<S>&, S);                                                \
  template Tensor<S> abs(const Tensor<S>&);                                                   \
  template Tensor<S> square(const Tensor<S>&);                                                \
  template Tensor<S> sum(const Tensor<S>&, const Axes&, bool);                                \
  template Tensor<S> mean(const Tensor<S>&, const Axes&, bool);                               \
  template Tensor<S> sum_all(const Tensor<S>&);                                               \
  template Tensor<S> mean_all(const Tensor<S>&);                                              \
  template Tensor<S> max(const Tensor<S>&, int, bool);                                        \
  template Tensor<S> pad(const Tensor<S>&, const std::vector<std::pair<Index, Index>>&);       \
  template Tensor<S> slice(const Tensor<S>&, int, Index, Index);                              \
  template Tensor<S> reshape(const Tensor<S>&, Shape);                                        \
  template Tensor<S> broadcast_to(const Tensor<S>&, const Shape&);                            \
  template Tensor<S> matmul(const Tensor<S>&, const Tensor<S>&);                              \
  template Tensor<S> transpose(const Tensor<S>&);
DDNN_INSTANTIATE(float)
DDNN_INSTANTIATE(double)
#undef DDNN_INSTANTIATE

}  // namespace ddnn
