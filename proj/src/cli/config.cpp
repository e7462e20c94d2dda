#include "ddnn/config.hpp"

#include <algorithm>
#include <cerrno>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace ddnn::cli {

namespace {

const std::vector<std::pair<std::string, std::string>>& defaults() {
  static const std::vector<std::pair<std::string, std::string>> d = {
      // architecture
      {"family", "resnet-basic"},
      {"stem", "cifar"},
      {"block_order", "post"},
      {"bottleneck_stride", "on_3x3"},
      {"stage_blocks", "3,3,3"},
      {"stage_channels", "16,32,64"},
      {"num_classes", "10"},
      {"input_shape", "3,32,32"},
      {"subnets", "3,2,2"},
      {"classifier_mode", "shared"},
      {"tap_policy", "auto"},
      {"per_net_bn_stats", "false"},
      // optimisation
      {"regime", "ddnn_ekd"},
      {"individual_net", "0"},
      {"lr", "0.1"},
      {"lr_drops", "150,250"},
      {"lr_drop_factor", "10"},
      {"momentum", "0.9"},
      {"weight_decay", "0.0001"},
      {"batch_size", "128"},
      {"epochs", "300"},
      {"seed", "0"},
      {"dtype", "f32"},
      {"ekd_w", "1"},
      {"ekd_alpha", "0.001"},
      {"teacher_grad", "false"},
      {"attention_aggregation", "mean"},
      {"unnormalized_subnet_ce", "false"},
      {"reforward_each_net", "false"},
      {"eval_batch_size", "256"},
      // data
      {"dataset", "cifar10"},
      {"data_dir", ""},
      {"augment", "standard"},
      {"train_subset", "0"},
      {"test_subset", "0"},
      {"synthetic_classes", "4"},
      {"synthetic_train", "2000"},
      {"synthetic_test", "400"},
      {"synthetic_size", "16"},
      {"synthetic_noise", "0.5"},
      {"synthetic_seed", "7"},
      // run
      {"out_dir", "out"},
      {"deterministic", "false"},
      {"checked", "false"},
  };
  return d;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep)) out.push_back(trim(cur));
  return out;
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const std::string& why) {
  throw UsageError("config key '" + key + "': invalid value '" + value + "' (" + why + ")");
}

long parse_long(const std::string& key, const std::string& s) {
  char* end = nullptr;
  errno = 0;
  const long v = std::strtol(s.c_str(), &end, 10);
  if (s.empty() || *end != '\0' || errno != 0) bad_value(key, s, "expected an integer");
  return v;
}

double parse_double(const std::string& key, const std::string& s) {
  char* end = nullptr;
  errno = 0;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || *end != '\0' || errno != 0) bad_value(key, s, "expected a number");
  return v;
}

// Runs `fn`, turning library validation errors into usage errors.
template <typename F>
auto as_usage(F&& fn) {
  try {
    return fn();
  } catch (const UsageError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
}

}  // namespace

std::uint64_t fnv1a64(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

RunConfig::RunConfig() {
  for (const auto& [k, v] : defaults()) values_[k] = v;
}

const std::vector<std::string>& RunConfig::known_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (const auto& kv : defaults()) k.push_back(kv.first);
    return k;
  }();
  return keys;
}

bool RunConfig::has_key(const std::string& key) const { return values_.count(key) != 0; }

void RunConfig::set(const std::string& key, const std::string& value) {
  auto it = values_.find(key);
  if (it == values_.end()) throw UsageError("unknown config key '" + key + "'");
  it->second = trim(value);
}

const std::string& RunConfig::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw UsageError("unknown config key '" + key + "'");
  return it->second;
}

void RunConfig::merge_text(const std::string& text, const std::string& origin) {
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw UsageError(origin + ":" + std::to_string(lineno) + ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq));
    if (!has_key(key)) {
      throw UsageError(origin + ":" + std::to_string(lineno) + ": unknown config key '" + key + "'");
    }
    set(key, line.substr(eq + 1));
  }
}

void RunConfig::merge_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  merge_text(ss.str(), path.string());
}

void RunConfig::apply_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + assignment + "'");
  const std::string key = trim(assignment.substr(0, eq));
  if (!has_key(key)) throw UsageError("unknown config key '" + key + "'");
  set(key, assignment.substr(eq + 1));
}

std::string RunConfig::to_text() const {
  std::string out;
  for (const auto& [k, v] : values_) out += k + "=" + v + "\n";
  return out;
}

std::uint64_t RunConfig::hash() const { return fnv1a64(to_text()); }

std::string RunConfig::hash_hex() const {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(hash()));
  return buf;
}

long RunConfig::get_int(const std::string& key) const { return parse_long(key, get(key)); }
double RunConfig::get_double(const std::string& key) const { return parse_double(key, get(key)); }

bool RunConfig::get_bool(const std::string& key) const {
  const auto& v = get(key);
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  bad_value(key, v, "expected true or false");
}

std::vector<long> RunConfig::get_int_list(const std::string& key) const {
  std::vector<long> out;
  const auto& v = get(key);
  if (v.empty()) return out;
  for (const auto& part : split(v, ',')) out.push_back(parse_long(key, part));
  return out;
}

std::vector<double> RunConfig::get_double_list(const std::string& key) const {
  std::vector<double> out;
  const auto& v = get(key);
  if (v.empty()) return out;
  for (const auto& part : split(v, ',')) out.push_back(parse_double(key, part));
  return out;
}

net::NetConfig RunConfig::net_config() const {
  return as_usage([&] {
    net::NetConfig c;
    c.family = net::parse_family(get("family"));
    const auto& stem = get("stem");
    if (stem == "cifar") {
      c.stem = net::Stem::cifar;
    } else if (stem == "imagenet") {
      c.stem = net::Stem::imagenet;
    } else {
      bad_value("stem", stem, "cifar or imagenet");
    }
    const auto& order = get("block_order");
    if (order == "post") {
      c.block_order = nn::BlockOrder::post;
    } else if (order == "pre") {
      c.block_order = nn::BlockOrder::pre;
    } else {
      bad_value("block_order", order, "post or pre");
    }
    const auto& bs = get("bottleneck_stride");
    if (bs == "on_3x3") {
      c.bottleneck_stride = nn::BottleneckStride::on_3x3;
    } else if (bs == "on_1x1") {
      c.bottleneck_stride = nn::BottleneckStride::on_1x1;
    } else {
      bad_value("bottleneck_stride", bs, "on_3x3 or on_1x1");
    }
    c.stage_blocks.clear();
    for (long b : get_int_list("stage_blocks")) c.stage_blocks.push_back(static_cast<int>(b));
    c.stage_channels.clear();
    for (long ch : get_int_list("stage_channels")) c.stage_channels.push_back(ch);
    c.num_classes = get_int("num_classes");
    const auto shape = get_int_list("input_shape");
    if (shape.size() != 3) bad_value("input_shape", get("input_shape"), "expected C,H,W");
    c.input_shape = {shape[0], shape[1], shape[2]};
    c.validate();
    return c;
  });
}

std::vector<net::SubnetSpec> RunConfig::subnets() const {
  return as_usage([&] {
    std::vector<net::SubnetSpec> out;
    const auto& v = get("subnets");
    if (v.empty() || v == "none") return out;
    const auto mode = ddnn_options().classifier_mode;
    for (const auto& part : split(v, ';')) {
      if (part.empty()) continue;
      net::SubnetSpec s;
      s.classifier_mode = mode;
      for (const auto& b : split(part, ',')) s.prefix_blocks.push_back(static_cast<int>(parse_long("subnets", b)));
      out.push_back(std::move(s));
    }
    return out;
  });
}

net::DdnnOptions RunConfig::ddnn_options() const {
  net::DdnnOptions o;
  const auto& cm = get("classifier_mode");
  if (cm == "shared") {
    o.classifier_mode = net::ClassifierMode::shared;
  } else if (cm == "separate") {
    o.classifier_mode = net::ClassifierMode::separate;
  } else {
    bad_value("classifier_mode", cm, "shared or separate");
  }
  const auto& taps = get("tap_policy");
  if (taps == "none") {
    o.taps_disabled = true;
  } else if (taps != "auto") {
    // Stages are numbered from 1 in configs.
    for (long s : get_int_list("tap_policy")) {
      if (s < 1) bad_value("tap_policy", taps, "stage numbers start at 1");
      o.tap_stages.push_back(static_cast<int>(s - 1));
    }
  }
  o.per_net_bn_stats = get_bool("per_net_bn_stats");
  return o;
}

train::TrainConfig RunConfig::train_config() const {
  return as_usage([&] {
    train::TrainConfig t;
    t.regime = train::parse_regime(get("regime"));
    t.lr.initial = get_double("lr");
    t.lr.drops.clear();
    for (long d : get_int_list("lr_drops")) t.lr.drops.push_back(static_cast<int>(d));
    t.lr.factor = get_double("lr_drop_factor");
    t.momentum = get_double("momentum");
    t.weight_decay = get_double("weight_decay");
    t.batch_size = static_cast<int>(get_int("batch_size"));
    t.epochs = static_cast<int>(get_int("epochs"));
    const long seed = get_int("seed");
    if (seed < 0) bad_value("seed", get("seed"), "must be >= 0");
    t.seed = static_cast<std::uint64_t>(seed);
    t.ekd.teacher_grad = get_bool("teacher_grad");
    t.ekd.unnormalized_subnet_ce = get_bool("unnormalized_subnet_ce");
    const auto& agg = get("attention_aggregation");
    if (agg == "mean") {
      t.ekd.aggregation = ekd::AttentionAggregation::mean;
    } else if (agg == "sum") {
      t.ekd.aggregation = ekd::AttentionAggregation::sum;
    } else {
      bad_value("attention_aggregation", agg, "mean or sum");
    }
    t.reforward_each_net = get_bool("reforward_each_net");

    const int k = static_cast<int>(trained_subnets().size());
    auto per_net = [&](const std::string& key) {
      auto vals = get_double_list(key);
      if (vals.size() == 1) vals.assign(k, vals[0]);
      if (static_cast<int>(vals.size()) != k) {
        bad_value(key, get(key), "give one value or one per sub-net (" + std::to_string(k) + ")");
      }
      return vals;
    };
    t.weights.w = per_net("ekd_w");
    t.weights.alpha = per_net("ekd_alpha");
    t.validate(k);
    return t;
  });
}

train::Augment RunConfig::augment() const {
  return as_usage([&] { return train::parse_augment(get("augment")); });
}

net::NetConfig RunConfig::trained_net_config() const {
  const auto cfg = net_config();
  if (get("regime") != "individual") return cfg;
  const long k = get_int("individual_net");
  if (k == 0) return cfg;
  const auto subs = subnets();
  if (k < 0 || k > static_cast<long>(subs.size())) {
    bad_value("individual_net", get("individual_net"), "0 or a sub-net index 1..K");
  }
  return as_usage([&] { return net::subnet_config(cfg, subs[k - 1]); });
}

std::vector<net::SubnetSpec> RunConfig::trained_subnets() const {
  if (get("regime") == "individual") return {};
  return subnets();
}

std::vector<std::string> RunConfig::trained_net_names() const {
  if (get("regime") == "individual") {
    const long k = get_int("individual_net");
    return {k == 0 ? "full" : "sub" + std::to_string(k)};
  }
  std::vector<std::string> names{"full"};
  for (std::size_t k = 1; k <= subnets().size(); ++k) names.push_back("sub" + std::to_string(k));
  return names;
}

Datasets load_datasets(const RunConfig& cfg) {
  const auto& name = cfg.get("dataset");
  Datasets d;
  if (name == "synthetic") {
    data::SyntheticSpec spec;
    spec.classes = static_cast<int>(cfg.get_int("synthetic_classes"));
    const long n_train = cfg.get_int("synthetic_train"), n_test = cfg.get_int("synthetic_test");
    if (spec.classes < 2 || n_train < spec.classes || n_test < 0 || n_train % spec.classes != 0 ||
        n_test % spec.classes != 0) {
      throw UsageError("synthetic_train/synthetic_test must be positive multiples of synthetic_classes");
    }
    spec.per_class = static_cast<int>((n_train + n_test) / spec.classes);
    spec.height = spec.width = static_cast<int>(cfg.get_int("synthetic_size"));
    spec.channels = static_cast<int>(cfg.get_int_list("input_shape").at(0));
    spec.noise = cfg.get_double("synthetic_noise");
    spec.seed = static_cast<std::uint64_t>(cfg.get_int("synthetic_seed"));
    auto all = as_usage([&] { return data::make_synthetic_set(spec); });
    // Labels cycle through the classes, so both halves stay balanced.
    d.train.num_classes = d.test.num_classes = spec.classes;
    d.train.images.assign(all.images.begin(), all.images.begin() + n_train);
    d.test.images.assign(all.images.begin() + n_train, all.images.end());
    return d;
  }
  data::CifarVariant variant;
  if (name == "cifar10") {
    variant = data::CifarVariant::cifar10;
  } else if (name == "cifar100") {
    variant = data::CifarVariant::cifar100;
  } else {
    throw UsageError("config key 'dataset': invalid value '" + name + "' (cifar10, cifar100 or synthetic)");
  }
  std::string dir = cfg.get("data_dir");
  if (dir.empty()) {
    if (const char* env = std::getenv("DDNN_DATA_DIR")) dir = env;
  }
  if (dir.empty()) throw UsageError("dataset " + name + " needs data_dir or $DDNN_DATA_DIR");
  const auto train_n = static_cast<std::size_t>(std::max(0L, cfg.get_int("train_subset")));
  const auto test_n = static_cast<std::size_t>(std::max(0L, cfg.get_int("test_subset")));
  d.train = data::load_cifar(dir, variant, true, train_n);
  d.test = data::load_cifar(dir, variant, false, test_n);
  return d;
}

}  // namespace ddnn::cli
