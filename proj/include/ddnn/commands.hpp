#pragma once

#include "ddnn/checkpoint.hpp"
#include "ddnn/config.hpp"

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace ddnn::cli {

// Exit statuses shared by every command.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

struct GlobalOptions {
  std::optional<std::filesystem::path> config;
  std::vector<std::string> sets;  // key=value, applied after the config file
  std::optional<std::string> out;
  std::optional<std::uint64_t> seed;
  bool deterministic = false;
  bool checked = false;
};

// Defaults, then the config file, then --set overrides, then the dedicated flags.
RunConfig resolve_config(const GlobalOptions& g);

// Runs `body`, mapping UsageError/ConfigError to 2 and any other exception to 1.
int guarded(std::ostream& err, const std::function<int()>& body);

int cmd_train(const GlobalOptions& g, std::ostream& out, std::ostream& err);
int cmd_eval(const GlobalOptions& g, const std::filesystem::path& checkpoint, std::ostream& out,
             std::ostream& err);
int cmd_extract(const GlobalOptions& g, const std::filesystem::path& checkpoint, int subnet,
                const std::filesystem::path& out_path, std::ostream& out, std::ostream& err);
int cmd_count(const GlobalOptions& g, std::ostream& out, std::ostream& err);
int cmd_gradcheck(const std::string& scope, std::ostream& out, std::ostream& err);
int cmd_plot(const std::filesystem::path& csv, const std::filesystem::path& svg, std::ostream& out,
             std::ostream& err);

// "stage3:{5,6}" style listing of 1-based stages and blocks; stages with nothing dropped are
// omitted. Empty string when nothing is dropped.
std::string format_dropped_blocks(const std::vector<std::vector<int>>& dropped);

// SVG line chart of top1_err against epoch, one polyline per (net_name, split).
std::string metrics_svg(const std::string& csv_text);

// "11.69M" / "1.82G" style short forms.
std::string format_count(double value);

}  // namespace ddnn::cli
