#include "ddnn/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace ddnn::train {

std::string regime_name(Regime r) {
  switch (r) {
    case Regime::individual: return "individual";
    case Regime::ddnn_hard: return "ddnn_hard";
    case Regime::ddnn_ekd: return "ddnn_ekd";
  }
  return "?";
}

Regime parse_regime(const std::string& s) {
  if (s == "individual") return Regime::individual;
  if (s == "ddnn_hard") return Regime::ddnn_hard;
  if (s == "ddnn_ekd") return Regime::ddnn_ekd;
  throw std::invalid_argument("unknown regime '" + s + "' (individual, ddnn_hard, ddnn_ekd)");
}

std::string augment_name(Augment a) {
  switch (a) {
    case Augment::none: return "none";
    case Augment::standard: return "standard";
    case Augment::imagenet: return "imagenet";
  }
  return "?";
}

Augment parse_augment(const std::string& s) {
  if (s == "none") return Augment::none;
  if (s == "standard") return Augment::standard;
  if (s == "imagenet") return Augment::imagenet;
  throw std::invalid_argument("unknown augment '" + s + "' (none, standard, imagenet)");
}

double LrSchedule::lr_at(int epoch) const {
  if (epoch < 0) throw std::invalid_argument("lr_at: negative epoch");
  double lr = initial;
  for (int d : drops) {
    if (epoch >= d) lr /= factor;
  }
  return lr;
}

void LrSchedule::validate() const {
  if (!(initial > 0)) throw std::invalid_argument("lr must be > 0");
  if (!(factor > 1)) throw std::invalid_argument("lr drop factor must be > 1");
  for (int d : drops) {
    if (d < 0) throw std::invalid_argument("lr drop epochs must be >= 0");
  }
}

void TrainConfig::validate(int num_subnets) const {
  lr.validate();
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (batch_size < 2) throw std::invalid_argument("batch_size must be >= 2 (batch statistics)");
  if (momentum < 0 || weight_decay < 0) throw std::invalid_argument("momentum and weight_decay must be >= 0");
  if (regime == Regime::individual && num_subnets != 0) {
    throw std::invalid_argument("individual regime trains a single net; it cannot carry sub-nets");
  }
  weights.validate(num_subnets);
}

template <typename S>
Sgd<S>::Sgd(std::vector<Tensor<S>> params, double momentum, double weight_decay)
    : params_(std::move(params)),
      momentum_(static_cast<S>(momentum)),
      weight_decay_(static_cast<S>(weight_decay)) {
  for (const auto& p : params_) velocity_.push_back(detail::Buffer<S>::Zero(p.numel()));
}

template <typename S>
void Sgd<S>::step(double lr) {
  const S rate = static_cast<S>(lr);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& w = params_[i].mutable_data();
    auto& v = velocity_[i];
    if (params_[i].has_grad()) {
      v = momentum_ * v + (params_[i].grad() + weight_decay_ * w);
    } else {
      v = momentum_ * v + weight_decay_ * w;
    }
    w -= rate * v;
  }
}

template <typename S>
ekd::TotalLoss<S> regime_loss(const net::Ddnn<S>& ddnn, const std::vector<net::NetOutput<S>>& outs,
                              std::span<const int> labels, const TrainConfig& cfg) {
  const int k_count = ddnn.num_subnets();
  if (static_cast<int>(outs.size()) != k_count + 1) {
    throw std::invalid_argument("regime_loss: expected one output per net");
  }
  ekd::EkdTerms<S> terms;
  terms.ce_full = ekd::cross_entropy(outs[0].logits, labels);
  for (int k = 1; k <= k_count; ++k) terms.ce_sub.push_back(ekd::cross_entropy(outs[k].logits, labels));

  if (cfg.regime == Regime::ddnn_ekd && k_count > 0) {
    const Tensor<S> p_t = ekd::softmax_posterior(outs[0].logits);
    auto feature_at = [](const net::NetOutput<S>& o, int stage) {
      for (std::size_t i = 0; i < o.feature_stages.size(); ++i) {
        if (o.feature_stages[i] == stage) return o.stage_features[i];
      }
      throw std::logic_error("regime_loss: stage " + std::to_string(stage) + " was not tapped");
    };
    for (int k = 1; k <= k_count; ++k) {
      terms.kl_sub.push_back(
          ekd::kl_distillation(p_t, ekd::softmax_posterior(outs[k].logits), cfg.ekd.teacher_grad));
      std::vector<Tensor<S>> per_stage;
      for (int stage : ddnn.taps_for(k)) {
        per_stage.push_back(ekd::attention_mse(ekd::attention_map(feature_at(outs[k], stage)),
                                               ekd::attention_map(feature_at(outs[0], stage)),
                                               cfg.ekd.teacher_grad));
      }
      terms.att_sub.push_back(ekd::aggregate_attention(per_stage, cfg.ekd.aggregation));
    }
  }
  return ekd::total_loss(terms, cfg.weights, cfg.ekd);
}

std::vector<double> net_shares(const ekd::EkdLossReport& r, const TrainConfig& cfg) {
  const int k_count = r.num_subnets();
  std::vector<double> shares{r.ce_full};
  for (int k = 0; k < k_count; ++k) {
    const double ce = cfg.ekd.unnormalized_subnet_ce ? r.ce_sub[k] : r.ce_sub[k] / k_count;
    shares.push_back(ce + (cfg.weights.w[k] * r.kl_sub[k] + cfg.weights.alpha[k] * r.att_sub[k]) / k_count);
  }
  return shares;
}

namespace {

template <typename S>
int count_correct(const Tensor<S>& logits, std::span<const int> labels) {
  const Index n = logits.dim(0), m = logits.dim(1);
  const auto& d = logits.data();
  int hits = 0;
  for (Index i = 0; i < n; ++i) {
    Index best = 0;
    for (Index j = 1; j < m; ++j) {
      if (d(i * m + j) > d(i * m + best)) best = j;
    }
    if (best == labels[i]) ++hits;
  }
  return hits;
}

std::string term_name(int index, int k_count) {
  // Report layout: ce_full, ce_sub[K], kl_sub[K], att_sub[K].
  if (index == 0) return "ce_full";
  const int group = (index - 1) / k_count, k = (index - 1) % k_count + 1;
  static const char* names[] = {"ce_sub", "kl_sub", "att_sub"};
  return std::string(names[group]) + std::to_string(k);
}

void check_report(const ekd::EkdLossReport& r) {
  std::vector<double> values{r.ce_full};
  values.insert(values.end(), r.ce_sub.begin(), r.ce_sub.end());
  values.insert(values.end(), r.kl_sub.begin(), r.kl_sub.end());
  values.insert(values.end(), r.att_sub.begin(), r.att_sub.end());
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw NumericError("non-finite loss term " + term_name(static_cast<int>(i), r.num_subnets()) +
                         " = " + std::to_string(values[i]));
    }
  }
  if (!std::isfinite(r.total)) throw NumericError("non-finite total loss");
}

}  // namespace

template <typename S>
ekd::EkdLossReport train_step(net::Ddnn<S>& ddnn, const data::Batch<S>& batch, const TrainConfig& cfg,
                              Sgd<S>& sgd, double lr, std::vector<int>* correct) {
  for (auto& p : ddnn.parameters()) p.zero_grad();
  auto outs = ddnn.forward_all(batch.images, nn::Mode::train, !cfg.reforward_each_net);
  auto loss = regime_loss(ddnn, outs, batch.labels, cfg);
  check_report(loss.report);
  if (correct) {
    correct->clear();
    for (const auto& o : outs) correct->push_back(count_correct(o.logits, batch.labels));
  }
  backward(loss.total, BackwardOptions{.retain_graph = false});
  sgd.step(lr);
  return loss.report;
}

template <typename S>
EvalResult evaluate(net::Ddnn<S>& ddnn, const data::Dataset& set, const data::Normalization& norm,
                    const TrainConfig& cfg, int batch_size) {
  if (set.empty()) throw std::invalid_argument("evaluate: empty dataset");
  if (batch_size < 1) throw std::invalid_argument("evaluate: batch_size must be >= 1");
  NoGradGuard no_grad;
  const int nets = ddnn.num_nets();
  std::vector<long> hits(nets, 0);
  std::vector<double> ce(nets, 0), kl(nets, 0), att(nets, 0), share(nets, 0);
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < set.size(); start += batch_size) {
    idx.clear();
    for (std::size_t i = start; i < std::min(set.size(), start + batch_size); ++i) idx.push_back(i);
    const auto batch = data::make_batch<S>(set, idx, norm);
    auto outs = ddnn.forward_all(batch.images, nn::Mode::eval, !cfg.reforward_each_net);
    const auto report = regime_loss(ddnn, outs, batch.labels, cfg).report;
    const auto shares = net_shares(report, cfg);
    const double n = static_cast<double>(idx.size());
    for (int k = 0; k < nets; ++k) {
      hits[k] += count_correct(outs[k].logits, batch.labels);
      ce[k] += n * (k == 0 ? report.ce_full : report.ce_sub[k - 1]);
      if (k > 0) {
        kl[k] += n * report.kl_sub[k - 1];
        att[k] += n * report.att_sub[k - 1];
      }
      share[k] += n * shares[k];
    }
  }
  EvalResult res;
  const double total = static_cast<double>(set.size());
  for (int k = 0; k < nets; ++k) {
    NetEval e;
    e.net_name = ddnn.net_name(k);
    e.top1_err = 100.0 * (1.0 - static_cast<double>(hits[k]) / total);
    e.ce = ce[k] / total;
    e.kl = kl[k] / total;
    e.att_mse = att[k] / total;
    e.total = share[k] / total;
    res.nets.push_back(e);
  }
  return res;
}

std::string ExperimentSummary::to_string() const {
  std::ostringstream os;
  char line[160];
  std::snprintf(line, sizeof line, "%-10s %10s %10s %10s\n", "net", "best_err", "best_ep", "final_err");
  os << line;
  for (const auto& n : nets) {
    std::snprintf(line, sizeof line, "%-10s %10.2f %10d %10.2f\n", n.net_name.c_str(), n.best_err,
                  n.best_epoch, n.final_err);
    os << line;
  }
  return os.str();
}

namespace {

void write_row(std::ofstream& csv, int epoch, const std::string& name, const char* split,
               const NetEval& e, double lr, double wall) {
  char line[512];
  std::snprintf(line, sizeof line, "%d,%s,%s,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n", epoch, name.c_str(),
                split, e.top1_err, e.ce, e.kl, e.att_mse, e.total, lr, wall);
  csv << line;
}

}  // namespace

template <typename S>
ExperimentSummary run_experiment(net::Ddnn<S>& ddnn, const TrainConfig& cfg, const data::Dataset& train,
                                 const data::Dataset& test, const ExperimentOptions& opts) {
  cfg.validate(ddnn.num_subnets());
  if (train.empty()) throw std::invalid_argument("run_experiment: empty training set");
  const int nets = ddnn.num_nets();
  if (!opts.net_names.empty() && static_cast<int>(opts.net_names.size()) != nets) {
    throw std::invalid_argument("run_experiment: net_names must name every net");
  }
  auto name_of = [&](int k) { return opts.net_names.empty() ? ddnn.net_name(k) : opts.net_names[k]; };

  std::ofstream csv;
  if (!opts.metrics_csv.empty()) {
    csv.open(opts.metrics_csv);
    if (!csv) throw std::runtime_error("cannot write metrics file " + opts.metrics_csv.string());
    csv << kMetricsHeader << '\n';
  }

  ExperimentSummary summary;
  summary.norm = data::Normalization::fit(train);
  for (int k = 0; k < nets; ++k) summary.nets.push_back(NetSummary{name_of(k)});

  Sgd<S> sgd(ddnn.parameters(), cfg.momentum, cfg.weight_decay);
  data::BatchLoader loader(train.size(), static_cast<std::size_t>(cfg.batch_size), cfg.seed);
  data::Rng aug_rng(cfg.seed ^ 0xa5a5a5a5a5a5a5a5ull);
  std::function<data::LabeledImage(const data::LabeledImage&)> transform;
  if (opts.augment == Augment::standard) {
    transform = [&](const data::LabeledImage& img) { return data::augment_train(img, aug_rng); };
  } else if (opts.augment == Augment::imagenet) {
    transform = [&](const data::LabeledImage& img) { return data::random_resized_crop(img, aug_rng); };
  }

  const auto start = std::chrono::steady_clock::now();
  auto wall = [&] {
    if (opts.deterministic) return 0.0;
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  };

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cfg.lr.lr_at(epoch);
    std::vector<double> hits(nets, 0), ce(nets, 0), kl(nets, 0), att(nets, 0), share(nets, 0);
    double seen = 0;
    std::vector<int> correct;
    for (const auto& idx : loader.epoch_batches(epoch)) {
      const auto batch = data::make_batch<S>(train, idx, summary.norm, transform);
      const auto report = train_step(ddnn, batch, cfg, sgd, lr, &correct);
      const auto shares = net_shares(report, cfg);
      const double n = static_cast<double>(idx.size());
      seen += n;
      for (int k = 0; k < nets; ++k) {
        hits[k] += correct[k];
        ce[k] += n * (k == 0 ? report.ce_full : report.ce_sub[k - 1]);
        if (k > 0) {
          kl[k] += n * report.kl_sub[k - 1];
          att[k] += n * report.att_sub[k - 1];
        }
        share[k] += n * shares[k];
      }
    }
    const double train_wall = wall();
    if (csv.is_open()) {
      for (int k = 0; k < nets; ++k) {
        NetEval e{name_of(k), 100.0 * (1.0 - hits[k] / seen), ce[k] / seen, kl[k] / seen,
                  att[k] / seen, share[k] / seen};
        write_row(csv, epoch, e.net_name, "train", e, lr, train_wall);
      }
    }

    if (!test.empty()) {
      EvalResult res = evaluate(ddnn, test, summary.norm, cfg, opts.eval_batch_size);
      res.epoch = epoch;
      const double test_wall = wall();
      for (int k = 0; k < nets; ++k) {
        res.nets[k].net_name = name_of(k);
        if (csv.is_open()) write_row(csv, epoch, name_of(k), "test", res.nets[k], lr, test_wall);
        auto& s = summary.nets[k];
        s.final_err = res.nets[k].top1_err;
        if (res.nets[k].top1_err < s.best_err || s.best_epoch < 0) {
          s.best_err = res.nets[k].top1_err;
          s.best_epoch = epoch;
          if (opts.on_best) opts.on_best(k, epoch);
        }
      }
      if (opts.log) {
        std::ostringstream os;
        os << "epoch " << epoch << " lr " << lr;
        for (const auto& n : res.nets) os << "  " << n.net_name << " " << n.top1_err << "%";
        opts.log(os.str());
      }
      summary.test_history.push_back(std::move(res));
    }
    if (csv.is_open()) {
      csv.flush();
      if (!csv) throw std::runtime_error("write failed on " + opts.metrics_csv.string());
    }
  }
  return summary;
}

#define DDNN_INSTANTIATE(S)                                                                          \
  template class Sgd<S>;                                                                             \
  template ekd::TotalLoss<S> regime_loss(const net::Ddnn<S>&, const std::vector<net::NetOutput<S>>&, \
                                         std::span<const int>, const TrainConfig&);                  \
  template ekd::EkdLossReport train_step(net::Ddnn<S>&, const data::Batch<S>&, const TrainConfig&,   \
                                         Sgd<S>&, double, std::vector<int>*);                        \
  template EvalResult evaluate(net::Ddnn<S>&, const data::Dataset&, const data::Normalization&,      \
                               const TrainConfig&, int);                                             \
  template ExperimentSummary run_experiment(net::Ddnn<S>&, const TrainConfig&, const data::Dataset&, \
                                            const data::Dataset&, const ExperimentOptions&);
DDNN_INSTANTIATE(float)
DDNN_INSTANTIATE(double)
#undef DDNN_INSTANTIATE

}  // namespace ddnn::train
