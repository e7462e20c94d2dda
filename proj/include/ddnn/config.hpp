#pragma once

#include "ddnn/data.hpp"
#include "ddnn/network.hpp"
#include "ddnn/trainer.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace ddnn::cli {

// Bad invocation or configuration. Commands map it to exit status 2.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Flat key=value run configuration. Every known key always has a value (its default until
// overridden), so the canonical text form is the full effective configuration.
class RunConfig {
 public:
  RunConfig();

  // Lines of `key = value`; blank lines and `#` comments ignored. Unknown keys throw UsageError.
  void merge_text(const std::string& text, const std::string& origin = "<text>");
  void merge_file(const std::filesystem::path& path);
  // Accepts "key=value".
  void apply_override(const std::string& assignment);
  void set(const std::string& key, const std::string& value);

  const std::string& get(const std::string& key) const;
  bool has_key(const std::string& key) const;
  static const std::vector<std::string>& known_keys();

  // Sorted "key=value" lines.
  std::string to_text() const;
  // FNV-1a 64 of to_text().
  std::uint64_t hash() const;
  std::string hash_hex() const;

  // Typed views; malformed values throw UsageError naming the key.
  net::NetConfig net_config() const;
  std::vector<net::SubnetSpec> subnets() const;
  net::DdnnOptions ddnn_options() const;
  train::TrainConfig train_config() const;
  train::Augment augment() const;
  // The architecture actually trained: the DDNN, or one of its nets alone when regime=individual.
  net::NetConfig trained_net_config() const;
  std::vector<net::SubnetSpec> trained_subnets() const;
  std::vector<std::string> trained_net_names() const;

  std::string get_string(const std::string& key) const { return get(key); }
  long get_int(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::vector<long> get_int_list(const std::string& key) const;
  std::vector<double> get_double_list(const std::string& key) const;

 private:
  std::map<std::string, std::string> values_;
};

std::uint64_t fnv1a64(const std::string& text);

struct Datasets {
  data::Dataset train;
  data::Dataset test;
};

// Loads the dataset named by the config. An empty data_dir falls back to $DDNN_DATA_DIR.
Datasets load_datasets(const RunConfig& cfg);

}  // namespace ddnn::cli
