#pragma once

#include "ddnn/data.hpp"
#include "ddnn/ekd.hpp"
#include "ddnn/network.hpp"

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace ddnn::train {

enum class Regime { individual, ddnn_hard, ddnn_ekd };
std::string regime_name(Regime r);
Regime parse_regime(const std::string& s);

// Piecewise-constant learning rate: initial / factor^(number of drops at or before epoch).
struct LrSchedule {
  double initial = 0.1;
  std::vector<int> drops{150, 250};
  double factor = 10.0;

  double lr_at(int epoch) const;
  void validate() const;
};

struct TrainConfig {
  Regime regime = Regime::ddnn_ekd;
  LrSchedule lr;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int batch_size = 128;
  int epochs = 300;
  std::uint64_t seed = 0;
  ekd::EkdWeights weights;  // sized to K; empty for individual training
  ekd::EkdOptions ekd;
  // Runs every net from the input instead of branching off the full net's activations.
  bool reforward_each_net = false;

  void validate(int num_subnets) const;
};

// Plain momentum SGD with coupled L2 decay: v <- mu v + (g + lambda w), w <- w - lr v.
template <typename S>
class Sgd {
 public:
  Sgd(std::vector<Tensor<S>> params, double momentum, double weight_decay);

  void step(double lr);
  const std::vector<detail::Buffer<S>>& velocities() const { return velocity_; }
  const std::vector<Tensor<S>>& params() const { return params_; }

 private:
  std::vector<Tensor<S>> params_;
  std::vector<detail::Buffer<S>> velocity_;
  S momentum_;
  S weight_decay_;
};

// Builds the objective of `regime` from the nets' outputs (full net first).
template <typename S>
ekd::TotalLoss<S> regime_loss(const net::Ddnn<S>& ddnn, const std::vector<net::NetOutput<S>>& outs,
                              std::span<const int> labels, const TrainConfig& cfg);

// Share of the total loss attributable to each net; the shares sum to report.total.
std::vector<double> net_shares(const ekd::EkdLossReport& report, const TrainConfig& cfg);

// One optimisation step on one batch. `correct`, when given, receives per-net counts of
// top-1 hits on the batch (train-mode logits).
template <typename S>
ekd::EkdLossReport train_step(net::Ddnn<S>& ddnn, const data::Batch<S>& batch, const TrainConfig& cfg,
                              Sgd<S>& sgd, double lr, std::vector<int>* correct = nullptr);

struct NetEval {
  std::string net_name;
  double top1_err = 0;  // percent
  double ce = 0;
  double kl = 0;
  double att_mse = 0;
  double total = 0;  // this net's share of the objective
};

struct EvalResult {
  int epoch = -1;
  std::vector<NetEval> nets;
};

// Eval-mode pass over all of `set`; leaves parameters and buffers untouched.
template <typename S>
EvalResult evaluate(net::Ddnn<S>& ddnn, const data::Dataset& set, const data::Normalization& norm,
                    const TrainConfig& cfg, int batch_size = 256);

enum class Augment { none, standard, imagenet };
std::string augment_name(Augment a);
Augment parse_augment(const std::string& s);

struct ExperimentOptions {
  std::filesystem::path metrics_csv;  // empty: no CSV
  bool deterministic = false;         // wall_secs recorded as 0
  Augment augment = Augment::standard;
  int eval_batch_size = 256;
  // Overrides the CSV net names (e.g. an individually trained sub-net reported as "sub1").
  std::vector<std::string> net_names;
  // Called when net k reaches a new best test error.
  std::function<void(int net, int epoch)> on_best;
  std::function<void(const std::string&)> log;
};

struct NetSummary {
  std::string net_name;
  double best_err = 100;
  int best_epoch = -1;
  double final_err = 100;
};

struct ExperimentSummary {
  std::vector<NetSummary> nets;
  std::vector<EvalResult> test_history;
  data::Normalization norm;  // fitted on the training split
  std::string to_string() const;
};

inline constexpr const char* kMetricsHeader =
    "epoch,net_name,split,top1_err,ce,kl,att_mse,total,lr,wall_secs";

template <typename S>
ExperimentSummary run_experiment(net::Ddnn<S>& ddnn, const TrainConfig& cfg, const data::Dataset& train,
                                 const data::Dataset& test, const ExperimentOptions& opts = {});

}  // namespace ddnn::train
