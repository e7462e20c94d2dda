// Command-line driver: train, eval, extract, count, gradcheck, plot.
#include "ddnn/commands.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace cli = ddnn::cli;

int main(int argc, char** argv) {
  CLI::App app{"Depth-level dynamic networks with embedded knowledge distillation"};
  app.require_subcommand(1);

  cli::GlobalOptions g;
  std::string config, out;
  std::uint64_t seed = 0;
  auto add_globals = [&](CLI::App* sub) {
    sub->add_option("--config", config, "key=value configuration file")->check(CLI::ExistingFile);
    sub->add_option("--set", g.sets, "override one key (key=value), repeatable")
        ->expected(1)
        ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
    sub->add_option("--out", out, "output directory");
    sub->add_option("--seed", seed, "random seed");
    sub->add_flag("--deterministic", g.deterministic, "bit-reproducible metrics (wall time recorded as 0)");
    sub->add_flag("--checked", g.checked, "warn on numerical hazards in primitives");
  };

  auto* train = app.add_subcommand("train", "train a DDNN (or a single net) and write metrics and checkpoints");
  add_globals(train);

  std::string ckpt_path;
  auto* eval = app.add_subcommand("eval", "evaluate every net stored in a checkpoint on its test split");
  add_globals(eval);
  eval->add_option("checkpoint", ckpt_path, "checkpoint file")->required();

  int subnet = 0;
  std::string extract_out;
  auto* extract = app.add_subcommand("extract", "write one net of a DDNN checkpoint as a standalone checkpoint");
  add_globals(extract);
  extract->add_option("checkpoint", ckpt_path, "DDNN checkpoint")->required();
  extract->add_option("index", subnet, "0 = full net, k = sub-net k")->required();
  extract->add_option("output", extract_out, "output checkpoint")->required();

  auto* count = app.add_subcommand("count", "print parameter and FLOP counts of the configured nets");
  add_globals(count);

  std::string scope = "all";
  auto* gradcheck = app.add_subcommand("gradcheck", "compare analytic gradients with finite differences");
  gradcheck->add_option("scope", scope, "all, ops, losses, or one case name");

  std::string csv, svg;
  auto* plot = app.add_subcommand("plot", "draw error-vs-epoch curves from a metrics CSV");
  plot->add_option("metrics", csv, "metrics CSV")->required();
  plot->add_option("svg", svg, "output SVG")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? cli::kExitOk : cli::kExitUsage;
  }

  if (!config.empty()) g.config = config;
  if (!out.empty()) g.out = out;
  for (auto* sub : {train, eval, extract, count}) {
    if (sub->parsed() && sub->count("--seed")) g.seed = seed;
  }

  if (train->parsed()) return cli::cmd_train(g, std::cout, std::cerr);
  if (eval->parsed()) return cli::cmd_eval(g, ckpt_path, std::cout, std::cerr);
  if (extract->parsed()) return cli::cmd_extract(g, ckpt_path, subnet, extract_out, std::cout, std::cerr);
  if (count->parsed()) return cli::cmd_count(g, std::cout, std::cerr);
  if (gradcheck->parsed()) return cli::cmd_gradcheck(scope, std::cout, std::cerr);
  if (plot->parsed()) return cli::cmd_plot(csv, svg, std::cout, std::cerr);
  return cli::kExitUsage;
}
