#include "ddnn/commands.hpp"

#include "ddnn/gradcheck.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

namespace ddnn::cli {

namespace fs = std::filesystem;

RunConfig resolve_config(const GlobalOptions& g) {
  RunConfig cfg;
  if (g.config) cfg.merge_file(*g.config);
  for (const auto& s : g.sets) cfg.apply_override(s);
  if (g.out) cfg.set("out_dir", *g.out);
  if (g.seed) cfg.set("seed", std::to_string(*g.seed));
  if (g.deterministic) cfg.set("deterministic", "true");
  if (g.checked) cfg.set("checked", "true");
  return cfg;
}

int guarded(std::ostream& err, const std::function<int()>& body) {
  try {
    return body();
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const net::ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
}

std::string format_count(double value) {
  char buf[32];
  if (value >= 1e9) {
    std::snprintf(buf, sizeof buf, "%.2fG", value / 1e9);
  } else if (value >= 1e6) {
    std::snprintf(buf, sizeof buf, "%.2fM", value / 1e6);
  } else if (value >= 1e3) {
    std::snprintf(buf, sizeof buf, "%.2fK", value / 1e3);
  } else {
    std::snprintf(buf, sizeof buf, "%.0f", value);
  }
  return buf;
}

std::string format_dropped_blocks(const std::vector<std::vector<int>>& dropped) {
  std::string out;
  for (std::size_t i = 0; i < dropped.size(); ++i) {
    if (dropped[i].empty()) continue;
    if (!out.empty()) out += ' ';
    out += "stage" + std::to_string(i + 1) + ":{";
    for (std::size_t j = 0; j < dropped[i].size(); ++j) {
      if (j) out += ',';
      out += std::to_string(dropped[i][j]);
    }
    out += '}';
  }
  return out;
}

namespace {

void require_dtype(const RunConfig& cfg) {
  const auto& d = cfg.get("dtype");
  if (d != "f32" && d != "f64") throw UsageError("config key 'dtype': invalid value '" + d + "' (f32 or f64)");
}

void check_dataset_fits(const RunConfig& cfg, const data::Dataset& set, const char* split) {
  if (set.empty()) return;
  const auto net = cfg.trained_net_config();
  const auto& img = set.images[0];
  if (img.channels != net.input_shape[0] || img.height != net.input_shape[1] || img.width != net.input_shape[2]) {
    throw UsageError(std::string(split) + " images are " + std::to_string(img.channels) + "x" +
                     std::to_string(img.height) + "x" + std::to_string(img.width) +
                     " but input_shape is " + cfg.get("input_shape"));
  }
  if (set.num_classes > net.num_classes) {
    throw UsageError("dataset has " + std::to_string(set.num_classes) + " classes but num_classes is " +
                     std::to_string(net.num_classes));
  }
}

net::DdnnOptions trained_options(const RunConfig& cfg) {
  if (cfg.get("regime") == "individual") return {};
  return cfg.ddnn_options();
}

template <typename S>
net::Ddnn<S> build_network(const RunConfig& cfg) {
  try {
    return net::Ddnn<S>(cfg.trained_net_config(), cfg.trained_subnets(), trained_options(cfg),
                        static_cast<std::uint64_t>(cfg.get_int("seed")));
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
}

nlohmann::json norm_json(const data::Normalization& n) { return {{"mean", n.mean}, {"std", n.std}}; }

data::Normalization norm_from_json(const nlohmann::json& j) {
  data::Normalization n;
  n.mean = j.at("mean").get<std::vector<float>>();
  n.std = j.at("std").get<std::vector<float>>();
  return n;
}

nlohmann::json base_meta(const RunConfig& cfg, const data::Normalization& norm) {
  return {{"config", cfg.to_text()},
          {"config_hash", cfg.hash_hex()},
          {"seed", cfg.get_int("seed")},
          {"dtype", cfg.get("dtype")},
          {"net_names", cfg.trained_net_names()},
          {"normalization", norm_json(norm)},
          {"format_version", kCheckpointVersion}};
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed on " + path.string());
}

template <typename S>
int train_typed(const RunConfig& cfg, const Datasets& ds, std::ostream& out) {
  const fs::path dir = cfg.get("out_dir");
  auto ddnn = build_network<S>(cfg);
  const auto tc = cfg.train_config();
  const auto norm = data::Normalization::fit(ds.train);
  const auto names = cfg.trained_net_names();

  train::ExperimentOptions eo;
  eo.metrics_csv = dir / "metrics.csv";
  eo.deterministic = cfg.get_bool("deterministic");
  eo.augment = cfg.augment();
  eo.eval_batch_size = static_cast<int>(cfg.get_int("eval_batch_size"));
  eo.net_names = names;
  eo.on_best = [&](int k, int epoch) {
    auto meta = base_meta(cfg, norm);
    meta["epoch"] = epoch;
    meta["best_for"] = names[k];
    save_checkpoint(dir / ("best_" + names[k] + ".ckpt"), snapshot(ddnn, meta));
  };
  eo.log = [&](const std::string& line) { out << line << '\n' << std::flush; };

  const auto summary = train::run_experiment(ddnn, tc, ds.train, ds.test, eo);
  auto meta = base_meta(cfg, norm);
  meta["epoch"] = tc.epochs - 1;
  save_checkpoint(dir / "final.ckpt", snapshot(ddnn, meta));
  write_text(dir / "summary.txt", summary.to_string());
  out << summary.to_string();
  return kExitOk;
}

template <typename S>
int eval_typed(const RunConfig& cfg, const Checkpoint& ckpt, std::ostream& out) {
  auto ddnn = build_network<S>(cfg);
  restore(ddnn, ckpt);
  const auto ds = load_datasets(cfg);
  check_dataset_fits(cfg, ds.test, "test");
  if (ds.test.empty()) throw UsageError("test split is empty");
  const auto norm = norm_from_json(ckpt.meta.at("normalization"));
  const auto names = ckpt.meta.at("net_names").get<std::vector<std::string>>();
  const auto res = train::evaluate(ddnn, ds.test, norm, cfg.train_config(),
                                   static_cast<int>(cfg.get_int("eval_batch_size")));
  char line[160];
  for (std::size_t k = 0; k < res.nets.size(); ++k) {
    std::snprintf(line, sizeof line, "%-8s top1_err %.2f%%  ce %.6f\n", names.at(k).c_str(),
                  res.nets[k].top1_err, res.nets[k].ce);
    out << line;
  }
  return kExitOk;
}

RunConfig config_from_checkpoint(const GlobalOptions& g, const Checkpoint& ckpt) {
  RunConfig cfg;
  cfg.merge_text(ckpt.meta.at("config").get<std::string>(), "checkpoint config");
  if (cfg.hash_hex() != ckpt.meta.at("config_hash").get<std::string>()) {
    throw CheckpointError("checkpoint config does not match its recorded hash");
  }
  for (const auto& s : g.sets) cfg.apply_override(s);
  if (g.checked) cfg.set("checked", "true");
  return cfg;
}

template <typename S>
int extract_typed(const RunConfig& cfg, const Checkpoint& ckpt, int index, const fs::path& out_path,
                  std::ostream& out) {
  auto ddnn = build_network<S>(cfg);
  restore(ddnn, ckpt);
  if (index < 0 || index > ddnn.num_subnets()) {
    throw UsageError("sub-net index " + std::to_string(index) + " outside 0.." +
                     std::to_string(ddnn.num_subnets()));
  }
  auto part = ddnn.extract(index);
  const auto names = ckpt.meta.at("net_names").get<std::vector<std::string>>();

  // The extracted net is a plain network; describe it as such so it reloads on its own.
  RunConfig sub = cfg;
  std::string blocks;
  for (int b : part.config().stage_blocks) blocks += (blocks.empty() ? "" : ",") + std::to_string(b);
  sub.set("stage_blocks", blocks);
  sub.set("subnets", "");
  sub.set("tap_policy", "auto");
  sub.set("classifier_mode", "shared");
  sub.set("per_net_bn_stats", "false");
  sub.set("regime", "individual");
  sub.set("individual_net", "0");
  sub.set("ekd_w", "1");  // per-sub-net lists no longer apply
  sub.set("ekd_alpha", "0.001");
  auto meta = ckpt.meta;
  meta["config"] = sub.to_text();
  meta["config_hash"] = sub.hash_hex();
  meta["net_names"] = std::vector<std::string>{names.at(index)};
  meta["extracted_from"] = names.at(index);
  save_checkpoint(out_path, snapshot(part, meta));

  const auto& full_cfg = ddnn.config();
  const double p_full = static_cast<double>(net::count_params(full_cfg));
  const double p_sub = static_cast<double>(net::count_params(part.config()));
  const double f_full = static_cast<double>(net::count_flops(full_cfg));
  const double f_sub = static_cast<double>(net::count_flops(part.config()));
  const std::string dropped = format_dropped_blocks(ddnn.dropped_blocks(index));
  out << "extracted " << names.at(index) << " (" << part.config().name() << ") -> " << out_path.string() << '\n';
  out << "dropped blocks: " << (dropped.empty() ? "none" : dropped) << '\n';
  char line[200];
  std::snprintf(line, sizeof line, "params: %s -> %s (-%s, -%.1f%%)\n", format_count(p_full).c_str(),
                format_count(p_sub).c_str(), format_count(p_full - p_sub).c_str(),
                100.0 * (p_full - p_sub) / p_full);
  out << line;
  std::snprintf(line, sizeof line, "FLOPs:  %s -> %s (-%s, -%.1f%%)\n", format_count(f_full).c_str(),
                format_count(f_sub).c_str(), format_count(f_full - f_sub).c_str(),
                100.0 * (f_full - f_sub) / f_full);
  out << line;
  return kExitOk;
}

}  // namespace

int cmd_train(const GlobalOptions& g, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const RunConfig cfg = resolve_config(g);
    require_dtype(cfg);
    // Resolve every typed view up front so config errors surface before any work.
    cfg.trained_net_config();
    cfg.train_config();
    cfg.augment();
    set_checked_mode(cfg.get_bool("checked"));

    const fs::path dir = cfg.get("out_dir");
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw std::runtime_error("cannot create output directory " + dir.string() + ": " + ec.message());
    write_text(dir / "config.cfg", cfg.to_text());

    const auto ds = load_datasets(cfg);
    check_dataset_fits(cfg, ds.train, "train");
    check_dataset_fits(cfg, ds.test, "test");
    if (ds.train.empty()) throw UsageError("training split is empty");
    return cfg.get("dtype") == "f64" ? train_typed<double>(cfg, ds, out) : train_typed<float>(cfg, ds, out);
  });
}

int cmd_eval(const GlobalOptions& g, const fs::path& checkpoint, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const auto ckpt = load_checkpoint(checkpoint);
    const RunConfig cfg = config_from_checkpoint(g, ckpt);
    require_dtype(cfg);
    set_checked_mode(cfg.get_bool("checked"));
    return cfg.get("dtype") == "f64" ? eval_typed<double>(cfg, ckpt, out) : eval_typed<float>(cfg, ckpt, out);
  });
}

int cmd_extract(const GlobalOptions& g, const fs::path& checkpoint, int subnet, const fs::path& out_path,
                std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const auto ckpt = load_checkpoint(checkpoint);
    const RunConfig cfg = config_from_checkpoint(g, ckpt);
    require_dtype(cfg);
    return cfg.get("dtype") == "f64" ? extract_typed<double>(cfg, ckpt, subnet, out_path, out)
                                     : extract_typed<float>(cfg, ckpt, subnet, out_path, out);
  });
}

int cmd_count(const GlobalOptions& g, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const RunConfig cfg = resolve_config(g);
    const auto full = cfg.net_config();
    const auto subs = cfg.subnets();
    const auto opts = cfg.ddnn_options();
    char line[200];
    std::snprintf(line, sizeof line, "%-8s %-12s %-16s %12s %12s\n", "net", "arch", "blocks", "params", "FLOPs");
    out << line;
    auto row = [&](const std::string& name, const net::NetConfig& c) {
      std::string blocks;
      for (int b : c.stage_blocks) blocks += (blocks.empty() ? "[" : ",") + std::to_string(b);
      blocks += "]";
      std::snprintf(line, sizeof line, "%-8s %-12s %-16s %12s %12s\n", name.c_str(), c.name().c_str(),
                    blocks.c_str(), format_count(double(net::count_params(c))).c_str(),
                    format_count(double(net::count_flops(c))).c_str());
      out << line;
    };
    row("full", full);
    for (std::size_t k = 0; k < subs.size(); ++k) {
      try {
        net::validate_subnet(full, subs[k]);
      } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
      }
      row("sub" + std::to_string(k + 1), net::subnet_config(full, subs[k]));
    }
    // Sub-nets reuse the full net's weights; only private classifiers add parameters.
    Index shared = net::count_params(full);
    if (opts.classifier_mode == net::ClassifierMode::separate) {
      shared += static_cast<Index>(subs.size()) * (full.feature_dim() * full.num_classes + full.num_classes);
    }
    out << "ddnn distinct params: " << shared << " (" << format_count(double(shared)) << ")\n";
    return kExitOk;
  });
}

int cmd_gradcheck(const std::string& scope, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    GradcheckOptions opts;
    opts.scope = scope;
    std::vector<GradcheckResult> results;
    try {
      results = run_gradcheck(opts);
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
    int failed = 0;
    char line[160];
    for (const auto& r : results) {
      std::snprintf(line, sizeof line, "%s %-30s max_rel_err %.3e\n", r.passed ? "PASS" : "FAIL", r.name.c_str(),
                    r.max_error);
      out << line;
      if (!r.passed) ++failed;
    }
    out << results.size() - failed << "/" << results.size() << " gradient checks within " << opts.tolerance << '\n';
    return failed == 0 ? kExitOk : kExitFailure;
  });
}

int cmd_plot(const fs::path& csv, const fs::path& svg, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    std::ifstream in(csv);
    if (!in) throw std::runtime_error("cannot read metrics file " + csv.string());
    std::stringstream ss;
    ss << in.rdbuf();
    write_text(svg, metrics_svg(ss.str()));
    out << "wrote " << svg.string() << '\n';
    return kExitOk;
  });
}

}  // namespace ddnn::cli
