#pragma once

#include "ddnn/ops.hpp"
#include "ddnn/tensor.hpp"

#include <span>
#include <vector>

// Embedded knowledge distillation: the loss terms that tie sub-nets to the full net.
namespace ddnn::ekd {

// Floor applied to probabilities inside log.
inline constexpr double kProbabilityFloor = 1e-12;

// Row-wise softmax of N x M logits (M >= 2), max-shifted.
template <typename S>
Tensor<S> softmax_posterior(const Tensor<S>& logits);

// (1/N) sum_n sum_m p_t log(p_t / p_s), with 0 log(0/q) = 0. p_t is a constant target
// unless teacher_grad is set.
template <typename S>
Tensor<S> kl_distillation(const Tensor<S>& p_t, const Tensor<S>& p_s, bool teacher_grad = false);

// Sum of absolute values across channels: N x C x H x W -> N x 1 x H x W.
template <typename S>
Tensor<S> attention_map(const Tensor<S>& features);

// (1/N) sum_n sum_{h,w} (a_s - a_t)^2. Summed over positions, averaged over the batch.
template <typename S>
Tensor<S> attention_mse(const Tensor<S>& a_s, const Tensor<S>& a_t, bool teacher_grad = false);

// -(1/N) sum_n log p(y_n | x_n) for hard labels in [0, M).
template <typename S>
Tensor<S> cross_entropy(const Tensor<S>& logits, std::span<const int> labels);

struct EkdWeights {
  std::vector<double> w;      // KL weight per sub-net
  std::vector<double> alpha;  // attention weight per sub-net

  static EkdWeights uniform(int num_subnets, double w, double alpha);
  void validate(int num_subnets) const;
};

// How one sub-net's per-stage attention losses combine into its single attention term.
enum class AttentionAggregation { mean, sum };

struct EkdOptions {
  bool teacher_grad = false;
  // Weights each sub-net's cross-entropy by 1 instead of 1/K.
  bool unnormalized_subnet_ce = false;
  AttentionAggregation aggregation = AttentionAggregation::mean;
};

struct EkdLossReport {
  double ce_full = 0;
  std::vector<double> ce_sub;
  std::vector<double> kl_sub;
  std::vector<double> att_sub;
  double total = 0;

  int num_subnets() const { return static_cast<int>(ce_sub.size()); }
};

// Differentiable pieces of one step. Undefined kl/att entries count as zero (hard-label
// training). A defined entry is added with its weight even when that weight is zero.
template <typename S>
struct EkdTerms {
  Tensor<S> ce_full;
  std::vector<Tensor<S>> ce_sub;
  std::vector<Tensor<S>> kl_sub;
  std::vector<Tensor<S>> att_sub;
};

template <typename S>
struct TotalLoss {
  Tensor<S> total;
  EkdLossReport report;
};

// L0 + (1/K) sum L_k + (1/K) sum w_k KL_k + (1/K) sum alpha_k MSE_k.
template <typename S>
TotalLoss<S> total_loss(const EkdTerms<S>& terms, const EkdWeights& weights,
                        const EkdOptions& opts = {});

// The same combination over plain numbers.
double combine(double ce_full, const std::vector<double>& ce_sub, const std::vector<double>& kl_sub,
               const std::vector<double>& att_sub, const EkdWeights& weights,
               const EkdOptions& opts = {});
inline double combine(const EkdLossReport& r, const EkdWeights& weights, const EkdOptions& opts = {}) {
  return combine(r.ce_full, r.ce_sub, r.kl_sub, r.att_sub, weights, opts);
}

// Merges per-stage attention losses of one sub-net; an empty list gives an undefined tensor.
template <typename S>
Tensor<S> aggregate_attention(const std::vector<Tensor<S>>& per_stage, AttentionAggregation mode);

}  // namespace ddnn::ekd
