#include "ddnn/gradcheck.hpp"

#include "ddnn/ekd.hpp"
#include "ddnn/network.hpp"
#include "ddnn/ops.hpp"
#include "ddnn/trainer.hpp"

#include <algorithm>
#include <functional>
#include <numeric>
#include <random>
#include <stdexcept>

namespace ddnn::cli {

namespace {

using T = Tensor<double>;
using Buf = detail::Buffer<double>;
using Rng = std::mt19937_64;

constexpr double kStep = 1e-6;

// Input distributions. Kinked ops get inputs kept clear of their kinks.
enum class Dist { normal, away_from_zero, positive, distinct };

T make_input(const Shape& shape, Dist dist, Rng& rng) {
  const Index n = numel_of(shape);
  Buf b(n);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> mag(0.1, 1.0), pos(0.2, 2.0);
  switch (dist) {
    case Dist::normal:
      for (Index i = 0; i < n; ++i) b(i) = normal(rng);
      break;
    case Dist::away_from_zero:
      for (Index i = 0; i < n; ++i) b(i) = (rng() & 1 ? 1.0 : -1.0) * mag(rng);
      break;
    case Dist::positive:
      for (Index i = 0; i < n; ++i) b(i) = pos(rng);
      break;
    case Dist::distinct: {
      // A shuffled ladder: neighbours differ by far more than the difference step.
      std::vector<Index> order(n);
      std::iota(order.begin(), order.end(), Index{0});
      std::shuffle(order.begin(), order.end(), rng);
      for (Index i = 0; i < n; ++i) b(i) = 0.05 * static_cast<double>(order[i]) - 0.025 * n;
      break;
    }
  }
  return T::from(shape, std::move(b));
}

struct InputSpec {
  Shape shape;
  Dist dist = Dist::normal;
  bool check = true;  // compare this input's gradient
};

using Fn = std::function<T(const std::vector<T>&)>;

// Scalarizes fn with a fixed random projection, then compares backward() against central
// differences for every checked input. Returns the worst relative error.
double compare(const std::vector<InputSpec>& specs, const Fn& fn, Rng& rng) {
  std::vector<T> base;
  for (const auto& s : specs) base.push_back(make_input(s.shape, s.dist, rng));

  T projection;
  auto scalar = [&](const std::vector<T>& xs) {
    T out = fn(xs);
    if (out.numel() == 1 && out.rank() == 0) return out;
    if (!projection.defined()) {
      Buf r(out.numel());
      std::normal_distribution<double> normal(0.0, 1.0);
      for (Index i = 0; i < r.size(); ++i) r(i) = normal(rng);
      projection = T::from(out.shape(), std::move(r));
    }
    return sum_all(mul(out, projection));
  };

  std::vector<T> leaves;
  for (std::size_t i = 0; i < base.size(); ++i) {
    T leaf = base[i].detach();
    leaf.set_requires_grad(specs[i].check);
    leaves.push_back(leaf);
  }
  backward(scalar(leaves));

  double worst = 0;
  for (std::size_t i = 0; i < base.size(); ++i) {
    if (!specs[i].check) continue;
    auto f = [&](const T& probe) {
      std::vector<T> xs = base;
      xs[i] = probe;
      return scalar(xs).item();
    };
    const T fd = finite_difference_grad<double>(f, base[i], kStep);
    const Buf analytic = leaves[i].has_grad() ? leaves[i].grad() : Buf::Zero(fd.numel());
    worst = std::max(worst, max_relative_error<double>(analytic, fd.data()));
  }
  return worst;
}

struct Case {
  std::string name;
  std::string group;
  std::function<double(Rng&)> run;
};

Case simple(std::string name, std::vector<InputSpec> specs, Fn fn, std::string group = "op") {
  return {std::move(name), std::move(group),
          [specs = std::move(specs), fn = std::move(fn)](Rng& rng) { return compare(specs, fn, rng); }};
}

// Relative error of parameter gradients of a small DDNN under the full training objective.
double ddnn_objective_case(Rng& rng) {
  net::NetConfig cfg = net::NetConfig::cifar_resnet({2, 2}, 3);
  cfg.stage_channels = {2, 4};
  cfg.input_shape = {2, 6, 6};
  net::Ddnn<double> ddnn(cfg, {net::SubnetSpec{{2, 1}}}, {}, rng());
  train::TrainConfig tc;
  tc.weights = ekd::EkdWeights::uniform(1, 0.7, 0.3);
  tc.ekd.teacher_grad = true;  // differences see the teacher move, so its gradient must flow too
  const T x = make_input({4, 2, 6, 6}, Dist::normal, rng);
  const std::vector<int> labels{0, 1, 2, 1};

  auto objective = [&] {
    auto outs = ddnn.forward_all(x, nn::Mode::train);
    return train::regime_loss(ddnn, outs, labels, tc).total;
  };
  auto params = ddnn.named_parameters();
  for (auto& [name, p] : params) p.zero_grad();
  backward(objective());

  double worst = 0;
  for (auto& [name, p] : params) {
    // Sample a few tensors: the stem, one deep conv, and the classifier.
    if (name != "stem.conv.weight" && name != "stage1.block1.conv2.weight" && name != "classifier.weight") {
      continue;
    }
    NoGradGuard no_grad;
    auto& d = p.mutable_data();
    Buf fd(d.size());
    for (Index i = 0; i < d.size(); ++i) {
      const double orig = d(i);
      d(i) = orig + kStep;
      const double fp = objective().item();
      d(i) = orig - kStep;
      const double fm = objective().item();
      d(i) = orig;
      fd(i) = (fp - fm) / (2 * kStep);
    }
    worst = std::max(worst, max_relative_error<double>(p.grad(), fd));
  }
  return worst;
}

std::vector<Case> all_cases() {
  using D = Dist;
  std::vector<Case> c;
  c.push_back(simple("add", {{{3, 4}}, {{3, 4}}}, [](auto& x) { return add(x[0], x[1]); }));
  c.push_back(simple("sub", {{{3, 4}}, {{3, 4}}}, [](auto& x) { return sub(x[0], x[1]); }));
  c.push_back(simple("mul", {{{3, 4}}, {{3, 4}}}, [](auto& x) { return mul(x[0], x[1]); }));
  c.push_back(simple("neg", {{{5}}}, [](auto& x) { return neg(x[0]); }));
  c.push_back(simple("scale", {{{2, 3}}}, [](auto& x) { return scale(x[0], 0.7); }));
  c.push_back(simple("add_scalar", {{{2, 3}}}, [](auto& x) { return add_scalar(x[0], 0.3); }));
  c.push_back(simple("relu", {{{4, 5}, D::away_from_zero}}, [](auto& x) { return relu(x[0]); }));
  c.push_back(simple("exp", {{{4, 3}}}, [](auto& x) { return exp(x[0]); }));
  c.push_back(simple("log", {{{4, 3}, D::positive}}, [](auto& x) { return log(x[0]); }));
  c.push_back(simple("log_floored", {{{4, 3}, D::positive}}, [](auto& x) { return log(x[0], 1e-12); }));
  c.push_back(simple("abs", {{{4, 5}, D::away_from_zero}}, [](auto& x) { return abs(x[0]); }));
  c.push_back(simple("square", {{{4, 3}}}, [](auto& x) { return square(x[0]); }));
  c.push_back(simple("sum_axes", {{{2, 3, 4}}}, [](auto& x) { return sum(x[0], {1}); }));
  c.push_back(simple("sum_keepdim", {{{2, 3, 4}}}, [](auto& x) { return sum(x[0], {0, 2}, true); }));
  c.push_back(simple("mean_axes", {{{2, 3, 4}}}, [](auto& x) { return mean(x[0], {0, 2}); }));
  c.push_back(simple("sum_all", {{{3, 4}}}, [](auto& x) { return sum_all(x[0]); }));
  c.push_back(simple("mean_all", {{{3, 4}}}, [](auto& x) { return mean_all(x[0]); }));
  c.push_back(simple("max", {{{3, 5}, D::distinct}}, [](auto& x) { return max(x[0], 1); }));
  c.push_back(simple("pad", {{{1, 2, 3, 3}}},
                     [](auto& x) { return pad(x[0], {{0, 0}, {0, 0}, {1, 2}, {2, 1}}); }));
  c.push_back(simple("slice", {{{2, 5, 3}}}, [](auto& x) { return slice(x[0], 1, 1, 4); }));
  c.push_back(simple("reshape", {{{2, 6}}}, [](auto& x) { return reshape(x[0], {3, 4}); }));
  c.push_back(simple("broadcast_to", {{{1, 3}}}, [](auto& x) { return broadcast_to(x[0], {4, 3}); }));
  c.push_back(simple("matmul", {{{3, 4}}, {{4, 2}}}, [](auto& x) { return matmul(x[0], x[1]); }));
  c.push_back(simple("transpose", {{{3, 4}}}, [](auto& x) { return transpose(x[0]); }));
  c.push_back(simple("conv2d_3x3_s1_p1", {{{2, 3, 5, 5}}, {{4, 3, 3, 3}}},
                     [](auto& x) { return conv2d(x[0], x[1], {1, 1}); }));
  c.push_back(simple("conv2d_3x3_s2_p1", {{{2, 2, 6, 6}}, {{3, 2, 3, 3}}},
                     [](auto& x) { return conv2d(x[0], x[1], {2, 1}); }));
  c.push_back(simple("conv2d_1x1_s2", {{{2, 3, 5, 5}}, {{2, 3, 1, 1}}},
                     [](auto& x) { return conv2d(x[0], x[1], {2, 0}); }));
  c.push_back(simple("conv2d_7x7_s2_p3", {{{1, 2, 9, 9}}, {{2, 2, 7, 7}}},
                     [](auto& x) { return conv2d(x[0], x[1], {2, 3}); }));
  c.push_back(simple("max_pool2d_2x2", {{{2, 2, 4, 4}, D::distinct}},
                     [](auto& x) { return max_pool2d(x[0], {2, 2, 0}); }));
  c.push_back(simple("max_pool2d_3x3_s2_p1", {{{1, 2, 5, 5}, D::distinct}},
                     [](auto& x) { return max_pool2d(x[0], {3, 2, 1}); }));
  c.push_back(simple("batch_norm_train", {{{4, 3, 2, 2}}, {{3}}, {{3}}},
                     [](auto& x) { return batch_norm_train(x[0], x[1], x[2], 1e-5); }));
  c.push_back(simple("batch_norm_eval", {{{4, 3, 2, 2}}, {{3}}, {{3}}}, [](auto& x) {
    Buf mean(3), var(3);
    mean << 0.1, -0.2, 0.3;
    var << 0.5, 1.5, 2.0;
    return batch_norm_eval(x[0], x[1], x[2], mean, var, 1e-5);
  }));
  c.push_back(simple("log_softmax", {{{3, 5}}}, [](auto& x) { return log_softmax(x[0]); }));

  c.push_back(simple("softmax_posterior", {{{3, 5}}},
                     [](auto& x) { return ekd::softmax_posterior(x[0]); }, "loss"));
  c.push_back(simple("cross_entropy", {{{4, 5}}}, [](auto& x) {
    const std::vector<int> labels{0, 3, 4, 1};
    return ekd::cross_entropy(x[0], labels);
  }, "loss"));
  c.push_back(simple("kl_distillation", {{{4, 5}, D::normal, false}, {{4, 5}}}, [](auto& x) {
    return ekd::kl_distillation(ekd::softmax_posterior(x[0]), ekd::softmax_posterior(x[1]));
  }, "loss"));
  c.push_back(simple("kl_distillation_teacher_grad", {{{4, 5}}, {{4, 5}}}, [](auto& x) {
    return ekd::kl_distillation(ekd::softmax_posterior(x[0]), ekd::softmax_posterior(x[1]), true);
  }, "loss"));
  c.push_back(simple("attention_map", {{{2, 3, 4, 4}, D::away_from_zero}},
                     [](auto& x) { return ekd::attention_map(x[0]); }, "loss"));
  c.push_back(simple("attention_mse", {{{2, 3, 4, 4}, D::away_from_zero}, {{2, 5, 4, 4}, D::away_from_zero, false}},
                     [](auto& x) {
                       return ekd::attention_mse(ekd::attention_map(x[0]), ekd::attention_map(x[1]));
                     }, "loss"));
  c.push_back(simple("attention_mse_teacher_grad",
                     {{{2, 3, 4, 4}, D::away_from_zero}, {{2, 5, 4, 4}, D::away_from_zero}}, [](auto& x) {
                       return ekd::attention_mse(ekd::attention_map(x[0]), ekd::attention_map(x[1]), true);
                     }, "loss"));
  // Full objective over raw logits and stage features: full net, then two sub-nets.
  auto objective = [](bool teacher_grad) {
    return [teacher_grad](const std::vector<T>& x) {
      const std::vector<int> labels{2, 0, 1};
      ekd::EkdOptions opts;
      opts.teacher_grad = teacher_grad;
      const T p_t = ekd::softmax_posterior(x[0]);
      const T a_t = ekd::attention_map(x[3]);
      ekd::EkdTerms<double> terms;
      terms.ce_full = ekd::cross_entropy(x[0], labels);
      for (int k = 1; k <= 2; ++k) {
        terms.ce_sub.push_back(ekd::cross_entropy(x[k], labels));
        terms.kl_sub.push_back(ekd::kl_distillation(p_t, ekd::softmax_posterior(x[k]), teacher_grad));
        terms.att_sub.push_back(ekd::attention_mse(ekd::attention_map(x[3 + k]), a_t, teacher_grad));
      }
      ekd::EkdWeights w{{0.8, 1.3}, {0.05, 0.2}};
      return ekd::total_loss(terms, w, opts).total;
    };
  };
  const Shape logits{3, 4}, feat{3, 2, 3, 3};
  c.push_back(simple("total_loss",
                     {{logits, Dist::normal, false}, {logits}, {logits},
                      {feat, Dist::away_from_zero, false}, {feat, Dist::away_from_zero}, {feat, Dist::away_from_zero}},
                     objective(false), "loss"));
  c.push_back(simple("total_loss_teacher_grad",
                     {{logits}, {logits}, {logits},
                      {feat, Dist::away_from_zero}, {feat, Dist::away_from_zero}, {feat, Dist::away_from_zero}},
                     objective(true), "loss"));
  c.push_back({"ddnn_objective", "loss", ddnn_objective_case});
  return c;
}

}  // namespace

std::vector<std::string> gradcheck_case_names() {
  std::vector<std::string> names;
  for (const auto& c : all_cases()) names.push_back(c.name);
  return names;
}

std::vector<GradcheckResult> run_gradcheck(const GradcheckOptions& opts) {
  const auto cases = all_cases();
  std::vector<const Case*> chosen;
  for (const auto& c : cases) {
    if (opts.scope == "all" || (opts.scope == "ops" && c.group == "op") ||
        (opts.scope == "losses" && c.group == "loss") || opts.scope == c.name) {
      chosen.push_back(&c);
    }
  }
  if (chosen.empty()) throw std::invalid_argument("gradcheck: unknown scope '" + opts.scope + "'");

  std::vector<GradcheckResult> results;
  for (const Case* c : chosen) {
    GradcheckResult r{c->name, c->group, 0.0, false};
    for (int seed = 0; seed < opts.seeds; ++seed) {
      Rng rng(0x9e3779b97f4a7c15ull * static_cast<std::uint64_t>(seed + 1));
      r.max_error = std::max(r.max_error, c->run(rng));
    }
    r.passed = r.max_error <= opts.tolerance;
    results.push_back(r);
  }
  return results;
}

}  // namespace ddnn::cli
