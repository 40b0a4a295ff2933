#pragma once

// Flat `key = value` run configuration shared by every CLI subcommand.
//
// Layering: built-in defaults, then a config file, then command-line
// overrides. Unknown keys are rejected at every layer. Lists are comma
// separated; injection settings use `&` inside one setting ("4&8,6&8").

#include <lofa/evalharness.hpp>

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace lofa {

struct ConfigKey {
  std::string key;
  std::string default_value;
  std::string help;
};

const std::vector<ConfigKey>& config_keys();

class RunConfig {
 public:
  RunConfig();  // defaults

  // Parses `key = value` lines; `#` starts a comment. Throws ConfigError with the line number.
  void merge_text(const std::string& text, const std::string& origin = "<text>");
  void merge_file(const std::filesystem::path& file);
  // One `key=value` override.
  void set_assignment(const std::string& assignment);
  void set(const std::string& key, const std::string& value);

  const std::string& get(const std::string& key) const;
  int get_int(const std::string& key) const;
  uint64_t get_u64(const std::string& key) const;
  float get_float(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::vector<std::string> get_list(const std::string& key) const;

  const std::map<std::string, std::string>& values() const { return values_; }
  json to_json() const;  // resolved values as strings
  std::string to_text() const;

  // Typed views; each validates and throws ConfigError.
  ModelDims model_dims() const;
  BaseTrainOptions base_train() const;
  FlowTarget flow_target() const;
  BankBuildOptions bank_build() const;
  TrainConfig train() const;
  HyperConfig hyper() const;
  PipelineOptions pipeline() const;
  EvalOptions eval() const;
  ExperimentConfig experiment() const;

 private:
  std::map<std::string, std::string> values_;
};

// Full key reference, one `key = default  # help` line each.
std::string config_reference();

}  // namespace lofa
