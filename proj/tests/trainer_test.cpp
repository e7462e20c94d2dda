#include "support.hpp"

#include "ddnn/trainer.hpp"

#include <fstream>
#include <sstream>

using namespace ddnn;
using namespace ddnn::train;
using testing::Buf;
using testing::tiny_resnet;

namespace {

data::Dataset blobs(int classes, int per_class, std::uint64_t seed, int hw = 8, double noise = 0.25) {
  return data::make_synthetic_set(
      {.classes = classes, .per_class = per_class, .height = hw, .width = hw, .seed = seed, .noise = noise});
}

TrainConfig config_for(Regime regime, int k) {
  TrainConfig c;
  c.regime = regime;
  c.lr.initial = 0.05;
  c.batch_size = 8;
  c.epochs = 1;
  c.weights = ekd::EkdWeights::uniform(k, 1.0, 1e-3);
  return c;
}

std::vector<net::SubnetSpec> one_sub() { return {{{2, 1, 1}}}; }

template <typename S>
std::vector<Buf<S>> state_of(net::Ddnn<S>& d) {
  std::vector<Buf<S>> out;
  d.visit_state({[&](const std::string&, Tensor<S>& t) { out.push_back(t.data()); },
                 [&](const std::string&, Buf<S>& b) { out.push_back(b); }});
  return out;
}

template <typename S>
bool same_state(net::Ddnn<S>& a, net::Ddnn<S>& b) {
  auto sa = state_of(a), sb = state_of(b);
  if (sa.size() != sb.size()) return false;
  for (std::size_t i = 0; i < sa.size(); ++i) {
    if (!testing::bit_equal(sa[i], sb[i])) return false;
  }
  return true;
}

template <typename S>
data::Batch<S> batch_of(const data::Dataset& set, std::size_t first, std::size_t n) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < n; ++i) idx.push_back((first + i) % set.size());
  return data::make_batch<S>(set, idx, data::Normalization::fit(set));
}

}  // namespace

TEST_SUITE("trainer") {

TEST_CASE("learning rate schedule") {
  LrSchedule s;
  CHECK(s.lr_at(0) == doctest::Approx(0.1));
  CHECK(s.lr_at(149) == doctest::Approx(0.1));
  CHECK(s.lr_at(150) == doctest::Approx(0.01));
  CHECK(s.lr_at(249) == doctest::Approx(0.01));
  CHECK(s.lr_at(299) == doctest::Approx(0.001));
  CHECK_THROWS(s.lr_at(-1));
  LrSchedule bad;
  bad.factor = 1;
  CHECK_THROWS(bad.validate());
}

TEST_CASE("config validation") {
  auto c = config_for(Regime::individual, 0);
  CHECK_NOTHROW(c.validate(0));
  CHECK_THROWS_AS(c.validate(1), std::invalid_argument);
  auto e = config_for(Regime::ddnn_ekd, 2);
  CHECK_THROWS_AS(e.validate(1), std::invalid_argument);
  e.batch_size = 1;
  CHECK_THROWS_AS(e.validate(2), std::invalid_argument);
  CHECK(parse_regime(regime_name(Regime::ddnn_hard)) == Regime::ddnn_hard);
  CHECK_THROWS(parse_regime("ekd"));
}

TEST_CASE("plain SGD without momentum or decay") {
  testing::Gen g(1);
  auto w = g.tensor<float>({5}, true);
  w.mutable_grad() = g.values<float>(5);
  const Buf<float> w0 = w.data(), g0 = w.grad();
  Sgd<float> sgd({w}, 0, 0);
  sgd.step(0.1);
  CHECK(testing::bit_equal<float>(w.data(), Buf<float>(w0 - 0.1f * g0)));
}

TEST_CASE("momentum SGD with coupled decay") {
  testing::Gen g(2);
  auto w = g.tensor<double>({4}, true);
  Sgd<double> sgd({w}, 0.9, 1e-2);
  Buf<double> ref = w.data(), v = Buf<double>::Zero(4);
  for (int step = 0; step < 5; ++step) {
    w.mutable_grad() = g.values<double>(4);
    v = 0.9 * v + (w.grad() + 1e-2 * ref);
    ref -= 0.05 * v;
    sgd.step(0.05);
    CHECK((w.data() - ref).abs().maxCoeff() < 1e-15);
  }
}

TEST_CASE("individual regime equals a standalone single-net trainer") {
  auto set = blobs(4, 16, 3);
  auto cfg = config_for(Regime::individual, 0);
  net::Ddnn<float> model(tiny_resnet({2, 1, 1}), {}, {}, 4);
  net::Ddnn<float> oracle(tiny_resnet({2, 1, 1}), {}, {}, 4);
  Sgd<float> sgd(model.parameters(), cfg.momentum, cfg.weight_decay);

  // Reference loop written against the primitives alone.
  auto params = oracle.parameters();
  std::vector<Buf<float>> vel;
  for (auto& p : params) vel.push_back(Buf<float>::Zero(p.numel()));
  const float mu = float(cfg.momentum), wd = float(cfg.weight_decay), lr = float(cfg.lr.initial);

  for (int step = 0; step < 10; ++step) {
    auto batch = batch_of<float>(set, step * 8, 8);
    auto report = train_step(model, batch, cfg, sgd, cfg.lr.initial);
    CHECK(report.num_subnets() == 0);

    for (auto& p : params) p.zero_grad();
    auto out = oracle.forward(0, batch.images, nn::Mode::train);
    auto loss = ekd::cross_entropy(out.logits, std::span<const int>(batch.labels));
    CHECK(loss.item() == report.ce_full);
    CHECK(loss.item() == report.total);
    backward(loss);
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& w = params[i].mutable_data();
      vel[i] = mu * vel[i] + (params[i].grad() + wd * w);
      w -= lr * vel[i];
    }
    CHECK(same_state(model, oracle));
  }
}

TEST_CASE("zero distillation weights reproduce hard-label training") {
  auto set = blobs(4, 16, 5);
  auto hard_cfg = config_for(Regime::ddnn_hard, 1);
  auto zero_cfg = config_for(Regime::ddnn_ekd, 1);
  zero_cfg.weights = ekd::EkdWeights::uniform(1, 0, 0);
  net::Ddnn<float> hard(tiny_resnet({3, 2, 2}), {{{3, 1, 1}}}, {}, 6);
  net::Ddnn<float> zero(tiny_resnet({3, 2, 2}), {{{3, 1, 1}}}, {}, 6);
  Sgd<float> s1(hard.parameters(), 0.9, 1e-4), s2(zero.parameters(), 0.9, 1e-4);
  for (int step = 0; step < 10; ++step) {
    auto batch = batch_of<float>(set, step * 8, 8);
    auto a = train_step(hard, batch, hard_cfg, s1, 0.05);
    auto b = train_step(zero, batch, zero_cfg, s2, 0.05);
    CHECK(a.total == b.total);
    CHECK(a.kl_sub[0] == 0);
    CHECK(a.att_sub[0] == 0);
    CHECK(b.kl_sub[0] > 0);
    CHECK(same_state(hard, zero));
  }
}

TEST_CASE("the report total obeys the loss decomposition every step") {
  auto set = blobs(4, 16, 7);
  for (auto regime : {Regime::ddnn_hard, Regime::ddnn_ekd}) {
    auto cfg = config_for(regime, 2);
    cfg.weights = {{1.0, 0.5}, {1e-3, 2e-3}};
    net::Ddnn<float> d(tiny_resnet({3, 2, 2}), {{{3, 1, 1}}, {{1, 2, 1}}}, {}, 8);
    Sgd<float> sgd(d.parameters(), cfg.momentum, cfg.weight_decay);
    for (int step = 0; step < 10; ++step) {
      auto r = train_step(d, batch_of<float>(set, step * 8, 8), cfg, sgd, 0.05);
      CHECK(std::abs(r.total - ekd::combine(r, cfg.weights, cfg.ekd)) <= 1e-6 * std::max(1.0, std::abs(r.total)));
      const auto shares = net_shares(r, cfg);
      double sum = 0;
      for (double s : shares) sum += s;
      CHECK(sum == doctest::Approx(r.total).epsilon(1e-6));
      if (regime == Regime::ddnn_hard) CHECK(r.kl_sub == std::vector<double>{0, 0});
    }
  }
}

TEST_CASE("one combined backward equals per-term backward passes") {
  auto set = blobs(4, 8, 9);
  auto cfg = config_for(Regime::ddnn_ekd, 1);
  cfg.weights = ekd::EkdWeights::uniform(1, 0.7, 0.3);
  net::Ddnn<double> d(tiny_resnet({2, 2, 1}), {{{2, 1, 1}}}, {}, 10);
  auto batch = batch_of<double>(set, 0, 8);
  auto params = d.parameters();

  for (auto& p : params) p.zero_grad();
  {
    auto outs = d.forward_all(batch.images, nn::Mode::eval);
    backward(regime_loss(d, outs, batch.labels, cfg).total);
  }
  std::vector<Buf<double>> combined;
  for (auto& p : params) combined.push_back(p.grad());

  for (auto& p : params) p.zero_grad();
  for (int term = 0; term < 4; ++term) {
    auto outs = d.forward_all(batch.images, nn::Mode::eval);
    const std::span<const int> y(batch.labels);
    Tensor<double> part;
    switch (term) {
      case 0: part = ekd::cross_entropy(outs[0].logits, y); break;
      case 1: part = ekd::cross_entropy(outs[1].logits, y); break;
      case 2:
        part = scale(ekd::kl_distillation(ekd::softmax_posterior(outs[0].logits),
                                          ekd::softmax_posterior(outs[1].logits)), 0.7);
        break;
      default:
        part = scale(ekd::attention_mse(ekd::attention_map(outs[1].stage_features[0]),
                                        ekd::attention_map(outs[0].stage_features[0])), 0.3);
    }
    backward(part);
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    CHECK(max_relative_error<double>(params[i].grad(), combined[i], 1e-12) < 1e-10);
  }
}

TEST_CASE("distillation terms send nothing down teacher-only paths") {
  auto set = blobs(4, 8, 11);
  net::Ddnn<double> d(tiny_resnet({2, 2, 2}), {{{2, 2, 1}}}, {}, 12);
  auto batch = batch_of<double>(set, 0, 8);
  auto named = d.named_parameters();
  for (bool teacher_grad : {false, true}) {
    for (auto& [_, p] : named) p.zero_grad();
    auto cfg = config_for(Regime::ddnn_ekd, 1);
    cfg.ekd.teacher_grad = teacher_grad;
    auto outs = d.forward_all(batch.images, nn::Mode::train);
    auto loss = regime_loss(d, outs, batch.labels, cfg);
    // KL and attention terms only.
    auto terms = add(ekd::kl_distillation(ekd::softmax_posterior(outs[0].logits),
                                          ekd::softmax_posterior(outs[1].logits), teacher_grad),
                     ekd::attention_mse(ekd::attention_map(outs[1].stage_features[0]),
                                        ekd::attention_map(outs[0].stage_features[0]), teacher_grad));
    backward(terms);
    double teacher_only = 0, shared = 0;
    for (auto& [name, p] : named) {
      if (!p.has_grad()) continue;
      const double g = p.grad().abs().maxCoeff();
      if (name.rfind("stage3.block2.", 0) == 0) teacher_only = std::max(teacher_only, g);
      if (name.rfind("stage1.", 0) == 0) shared = std::max(shared, g);
    }
    CHECK(shared > 0);
    if (teacher_grad) {
      CHECK(teacher_only > 0);
    } else {
      CHECK(teacher_only == 0);
    }
    (void)loss;
  }
}

TEST_CASE("a step moves every net through the shared weights") {
  auto set = blobs(4, 8, 13);
  auto cfg = config_for(Regime::ddnn_ekd, 1);
  net::Ddnn<float> d(tiny_resnet({2, 2, 2}), one_sub(), {}, 14);
  Sgd<float> sgd(d.parameters(), cfg.momentum, cfg.weight_decay);
  auto probe = batch_of<float>(set, 0, 8).images;
  auto before = d.forward_all(probe, nn::Mode::eval);
  train_step(d, batch_of<float>(set, 8, 8), cfg, sgd, 0.05);
  auto after = d.forward_all(probe, nn::Mode::eval);
  for (int k = 0; k < 2; ++k) CHECK((after[k].logits.data() - before[k].logits.data()).abs().maxCoeff() > 0);
}

TEST_CASE("training is deterministic") {
  auto set = blobs(4, 16, 15);
  auto cfg = config_for(Regime::ddnn_ekd, 1);
  auto run = [&] {
    net::Ddnn<float> d(tiny_resnet({2, 2, 2}), one_sub(), {}, 16);
    Sgd<float> sgd(d.parameters(), cfg.momentum, cfg.weight_decay);
    std::vector<double> losses;
    for (int step = 0; step < 6; ++step) losses.push_back(train_step(d, batch_of<float>(set, step * 8, 8), cfg, sgd, 0.05).total);
    return losses;
  };
  CHECK(run() == run());
}

TEST_CASE("non-finite losses name the term") {
  auto set = blobs(4, 8, 17);
  auto cfg = config_for(Regime::ddnn_ekd, 1);
  net::Ddnn<float> d(tiny_resnet({2, 2, 2}), one_sub(), {}, 18);
  for (auto& [name, p] : d.named_parameters()) {
    if (name == "classifier.bias") p.mutable_data()(0) = std::numeric_limits<float>::infinity();
  }
  Sgd<float> sgd(d.parameters(), 0.9, 0);
  try {
    train_step(d, batch_of<float>(set, 0, 8), cfg, sgd, 0.05);
    FAIL("expected a numeric error");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("ce_full") != std::string::npos);
  }
}

TEST_CASE("evaluation") {
  auto ten = blobs(10, 30, 19);
  auto cfg = config_for(Regime::ddnn_ekd, 1);
  net::Ddnn<float> d(tiny_resnet({2, 2, 2}, 10), one_sub(), {}, 20);
  auto norm = data::Normalization::fit(ten);

  const auto before = state_of(d);
  auto first = evaluate(d, ten, norm, cfg, 64);
  auto second = evaluate(d, ten, norm, cfg, 64);
  const auto after = state_of(d);
  for (std::size_t i = 0; i < before.size(); ++i) CHECK(testing::bit_equal(before[i], after[i]));
  REQUIRE(first.nets.size() == 2);
  for (int k = 0; k < 2; ++k) {
    CHECK(first.nets[k].top1_err == second.nets[k].top1_err);
    CHECK(first.nets[k].total == second.nets[k].total);
    // Chance level on a balanced ten-class set.
    CHECK(std::abs(first.nets[k].top1_err - 90) <= 3);
  }
  CHECK(first.nets[1].net_name == "sub1");

  // Batch size does not change the result beyond summation order.
  auto whole = evaluate(d, ten, norm, cfg, 1000);
  CHECK(whole.nets[0].top1_err == first.nets[0].top1_err);
  CHECK(whole.nets[0].ce == doctest::Approx(first.nets[0].ce).epsilon(1e-5));

  CHECK_THROWS(evaluate(d, data::Dataset{}, norm, cfg));
}

TEST_CASE("a memorized training set has zero error") {
  auto tiny = blobs(2, 8, 21, 8, 0.05);
  auto cfg = config_for(Regime::individual, 0);
  cfg.batch_size = 16;
  cfg.epochs = 60;
  cfg.lr.initial = 0.1;
  cfg.weight_decay = 0;
  net::Ddnn<float> d(tiny_resnet({1, 1, 1}, 2), {}, {}, 22);
  ExperimentOptions opts;
  opts.augment = Augment::none;
  auto summary = run_experiment(d, cfg, tiny, tiny, opts);
  CHECK(evaluate(d, tiny, summary.norm, cfg).nets[0].top1_err == 0);
}

TEST_CASE("one-epoch run writes metrics") {
  const auto dir = testing::scratch_dir("trainer_csv");
  auto train_set = blobs(4, 12, 23), test_set = blobs(4, 4, 24);
  std::vector<std::string> headers;
  for (auto regime : {Regime::individual, Regime::ddnn_hard, Regime::ddnn_ekd}) {
    const int k = regime == Regime::individual ? 0 : 1;
    auto cfg = config_for(regime, k);
    net::Ddnn<float> d(tiny_resnet({2, 2, 2}), k ? one_sub() : std::vector<net::SubnetSpec>{}, {}, 25);
    ExperimentOptions opts;
    opts.metrics_csv = dir / (regime_name(regime) + ".csv");
    opts.deterministic = true;
    int best_calls = 0;
    opts.on_best = [&](int, int) { ++best_calls; };
    auto summary = run_experiment(d, cfg, train_set, test_set, opts);
    CHECK(best_calls == k + 1);
    CHECK(summary.test_history.size() == 1);

    std::ifstream f(opts.metrics_csv);
    std::string header, line;
    std::getline(f, header);
    headers.push_back(header);
    int rows = 0;
    while (std::getline(f, line)) {
      ++rows;
      CHECK(std::count(line.begin(), line.end(), ',') == 9);
      CHECK(line.substr(line.size() - 2) == ",0");
    }
    CHECK(rows == 2 * (k + 1));
  }
  CHECK(headers[0] == kMetricsHeader);
  CHECK(headers[1] == headers[0]);
  CHECK(headers[2] == headers[0]);
}

TEST_CASE("individual runs can report under a sub-net name") {
  auto train_set = blobs(4, 6, 26);
  auto cfg = config_for(Regime::individual, 0);
  net::Ddnn<float> d(tiny_resnet({1, 1, 1}), {}, {}, 27);
  ExperimentOptions opts;
  opts.net_names = {"sub1"};
  auto summary = run_experiment(d, cfg, train_set, train_set, opts);
  CHECK(summary.nets[0].net_name == "sub1");
  CHECK(summary.to_string().find("sub1") != std::string::npos);
  opts.net_names = {"a", "b"};
  CHECK_THROWS(run_experiment(d, cfg, train_set, train_set, opts));
}

}  // TEST_SUITE
