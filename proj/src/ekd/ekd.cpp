#include "ddnn/ekd.hpp"

#include <cmath>
#include <string>

namespace ddnn::ekd {

namespace {

template <typename S>
void require_rows(const char* op, const Tensor<S>& t) {
  if (t.rank() != 2) throw ShapeError(std::string(op) + ": expects N x M, got " + shape_str(t.shape()));
}

}  // namespace

template <typename S>
Tensor<S> softmax_posterior(const Tensor<S>& logits) {
  require_rows("softmax_posterior", logits);
  if (logits.dim(1) < 2) throw ShapeError("softmax_posterior: needs at least 2 classes");
  return exp(log_softmax(logits));
}

template <typename S>
Tensor<S> kl_distillation(const Tensor<S>& p_t, const Tensor<S>& p_s, bool teacher_grad) {
  require_rows("kl_distillation", p_t);
  if (p_t.shape() != p_s.shape()) {
    throw ShapeError("kl_distillation: teacher " + shape_str(p_t.shape()) + " vs student " +
                     shape_str(p_s.shape()));
  }
  const S floor = static_cast<S>(kProbabilityFloor);
  const Tensor<S> target = teacher_grad ? p_t : p_t.detach();
  // Elementwise p_t (log p_t - log p_s): exactly zero wherever the two agree.
  Tensor<S> per_entry = mul(target, sub(log(target, floor), log(p_s, floor)));
  return scale(sum_all(per_entry), S(1) / static_cast<S>(p_t.dim(0)));
}

template <typename S>
Tensor<S> attention_map(const Tensor<S>& features) {
  if (features.rank() != 4 || features.dim(1) < 1) {
    throw ShapeError("attention_map: expects N x C x H x W with C >= 1, got " +
                     shape_str(features.shape()));
  }
  return sum(abs(features), {1}, true);
}

template <typename S>
Tensor<S> attention_mse(const Tensor<S>& a_s, const Tensor<S>& a_t, bool teacher_grad) {
  if (a_s.shape() != a_t.shape() || a_s.rank() < 1) {
    throw ShapeError("attention_mse: student map " + shape_str(a_s.shape()) + " vs teacher map " +
                     shape_str(a_t.shape()));
  }
  const Tensor<S> target = teacher_grad ? a_t : a_t.detach();
  return scale(sum_all(square(sub(a_s, target))), S(1) / static_cast<S>(a_s.dim(0)));
}

template <typename S>
Tensor<S> cross_entropy(const Tensor<S>& logits, std::span<const int> labels) {
  require_rows("cross_entropy", logits);
  const Index n = logits.dim(0), m = logits.dim(1);
  if (static_cast<Index>(labels.size()) != n) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(n) + " rows");
  }
  detail::Buffer<S> onehot = detail::Buffer<S>::Zero(n * m);
  for (Index i = 0; i < n; ++i) {
    const int y = labels[i];
    if (y < 0 || y >= m) {
      throw std::out_of_range("cross_entropy: label " + std::to_string(y) + " outside [0, " +
                              std::to_string(m) + ")");
    }
    onehot(i * m + y) = S(1);
  }
  const Tensor<S> pick = Tensor<S>::from({n, m}, std::move(onehot));
  return scale(sum_all(mul(pick, log_softmax(logits))), S(-1) / static_cast<S>(n));
}

EkdWeights EkdWeights::uniform(int num_subnets, double w, double alpha) {
  return EkdWeights{std::vector<double>(num_subnets, w), std::vector<double>(num_subnets, alpha)};
}

void EkdWeights::validate(int num_subnets) const {
  if (static_cast<int>(w.size()) != num_subnets || static_cast<int>(alpha.size()) != num_subnets) {
    throw std::invalid_argument("EKD weights: expected " + std::to_string(num_subnets) +
                                " entries, got w=" + std::to_string(w.size()) +
                                " alpha=" + std::to_string(alpha.size()));
  }
  for (std::size_t k = 0; k < w.size(); ++k) {
    if (!(w[k] >= 0) || !(alpha[k] >= 0)) throw std::invalid_argument("EKD weights must be >= 0");
  }
}

double combine(double ce_full, const std::vector<double>& ce_sub, const std::vector<double>& kl_sub,
               const std::vector<double>& att_sub, const EkdWeights& weights,
               const EkdOptions& opts) {
  const int k = static_cast<int>(ce_sub.size());
  weights.validate(k);
  if (k == 0) return ce_full;
  if (static_cast<int>(kl_sub.size()) != k || static_cast<int>(att_sub.size()) != k) {
    throw std::invalid_argument("combine: per-sub-net term counts differ");
  }
  double ce = 0, kl = 0, att = 0;
  for (int i = 0; i < k; ++i) {
    ce += ce_sub[i];
    kl += weights.w[i] * kl_sub[i];
    att += weights.alpha[i] * att_sub[i];
  }
  const double inv_k = 1.0 / k;
  return ce_full + (opts.unnormalized_subnet_ce ? ce : inv_k * ce) + inv_k * kl + inv_k * att;
}

template <typename S>
TotalLoss<S> total_loss(const EkdTerms<S>& terms, const EkdWeights& weights, const EkdOptions& opts) {
  const int k = static_cast<int>(terms.ce_sub.size());
  weights.validate(k);
  auto sized = [k](const std::vector<Tensor<S>>& v) { return v.empty() || static_cast<int>(v.size()) == k; };
  if (!sized(terms.kl_sub) || !sized(terms.att_sub)) {
    throw std::invalid_argument("total_loss: per-sub-net term counts differ from K");
  }

  TotalLoss<S> out;
  out.report.ce_full = terms.ce_full.item();
  Tensor<S> total = terms.ce_full;
  if (k == 0) {
    out.total = total;
    out.report.total = total.item();
    return out;
  }

  const S inv_k = S(1) / static_cast<S>(k);
  auto defined_at = [](const std::vector<Tensor<S>>& v, int i) {
    return !v.empty() && v[i].defined();
  };

  Tensor<S> ce_sum;
  std::vector<Tensor<S>> kl_weighted, att_weighted;
  for (int i = 0; i < k; ++i) {
    out.report.ce_sub.push_back(terms.ce_sub[i].item());
    ce_sum = ce_sum.defined() ? add(ce_sum, terms.ce_sub[i]) : terms.ce_sub[i];

    out.report.kl_sub.push_back(defined_at(terms.kl_sub, i) ? terms.kl_sub[i].item() : 0.0);
    if (defined_at(terms.kl_sub, i)) {
      kl_weighted.push_back(scale(terms.kl_sub[i], static_cast<S>(weights.w[i])));
    }
    out.report.att_sub.push_back(defined_at(terms.att_sub, i) ? terms.att_sub[i].item() : 0.0);
    if (defined_at(terms.att_sub, i)) {
      att_weighted.push_back(scale(terms.att_sub[i], static_cast<S>(weights.alpha[i])));
    }
  }
  total = add(total, opts.unnormalized_subnet_ce ? ce_sum : scale(ce_sum, inv_k));
  auto add_group = [&](const std::vector<Tensor<S>>& parts) {
    if (parts.empty()) return;
    Tensor<S> s = parts[0];
    for (std::size_t i = 1; i < parts.size(); ++i) s = add(s, parts[i]);
    total = add(total, scale(s, inv_k));
  };
  add_group(kl_weighted);
  add_group(att_weighted);

  out.total = total;
  out.report.total = total.item();
  return out;
}

template <typename S>
Tensor<S> aggregate_attention(const std::vector<Tensor<S>>& per_stage, AttentionAggregation mode) {
  if (per_stage.empty()) return {};
  Tensor<S> s = per_stage[0];
  for (std::size_t i = 1; i < per_stage.size(); ++i) s = add(s, per_stage[i]);
  if (mode == AttentionAggregation::mean && per_stage.size() > 1) {
    s = scale(s, S(1) / static_cast<S>(per_stage.size()));
  }
  return s;
}

#define DDNN_INSTANTIATE(S)                                                                   \
  template Tensor<S> softmax_posterior(const Tensor<S>&);                                     \
  template Tensor<S> kl_distillation(const Tensor<S>&, const Tensor<S>&, bool);               \
  template Tensor<S> attention_map(const Tensor<S>&);                                         \
  template Tensor<S> attention_mse(const Tensor<S>&, const Tensor<S>&, bool);                 \
  template Tensor<S> cross_entropy(const Tensor<S>&, std::span<const int>);                   \
  template TotalLoss<S> total_loss(const EkdTerms<S>&, const EkdWeights&, const EkdOptions&); \
  template Tensor<S> aggregate_attention(const std::vector<Tensor<S>>&, AttentionAggregation);
DDNN_INSTANTIATE(float)
DDNN_INSTANTIATE(double)
#undef DDNN_INSTANTIATE

}  // namespace ddnn::ekd
