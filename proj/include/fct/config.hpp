#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>

#include "fct/train.hpp"

namespace fct {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DataConfig {
  int64_t base_images = 300;   // base-class-only training corpus
  int64_t pool_images = 200;   // all classes; K-shot subsets are drawn from it
  int64_t test_images = 60;    // held-out evaluation corpus
  int64_t min_object = 22;
  int64_t max_object = 34;
  int max_instances = 3;
};

struct PipelineConfig {
  ModelConfig model;
  DataConfig data;
  Schedule pretrain;
  Schedule train_base;
  Schedule finetune;
  Schedule baseline_finetune;
  PostprocessConfig post;

  PipelineConfig();
};

/// Parses `[section]` headers and `key = value` lines; `#` starts a comment.
/// Unknown sections or keys and unparsable values throw ConfigError.
PipelineConfig parse_config(const std::string& text);
/// Throws IoError if the file is missing, ConfigError if it is malformed.
PipelineConfig load_config(const std::filesystem::path& path);
/// Serializes every key; parse_config(config_to_text(c)) reproduces c.
std::string config_to_text(const PipelineConfig& config);

CorpusOptions corpus_options(const PipelineConfig& config);

/// Base-only training corpus, all-class pool for K-shot draws, and test set.
struct Corpora {
  DatasetIndex base;
  DatasetIndex pool;
  DatasetIndex test;
};
/// Deterministic per seed; the three sets use distinct streams.
Corpora generate_corpora(const PipelineConfig& config, uint64_t seed);

}  // namespace fct
