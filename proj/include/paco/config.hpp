#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "paco/corpus.hpp"
#include "paco/model.hpp"

namespace paco {

// Everything a batch run needs, parsed from a key=value config file plus
// command-line overrides. Validated before any output is produced.
struct RunConfig {
  std::string input;
  InputFormat format = InputFormat::tsv;
  std::string out_dir = "paco_out";

  // corpus options
  uint32_t min_word_len = 3;
  uint32_t min_freq = 5;
  std::string stopword_file;  // empty: built-in English list
  double test_fraction = 0.2;
  double rating_scale = 1.0;

  Hyperparameters hyper;

  int threads = 1;
  uint32_t checkpoint_interval = 10;  // iterations between checkpoints
  uint32_t metric_log_every = 1;
  // stop (with a checkpoint) after this many iterations; 0 = run to the end.
  // Like threads, this cannot change results, only when the process exits,
  // so it is excluded from the config hash.
  uint32_t stop_after = 0;

  uint32_t top_k = 15;
  // "user:item" raw-id pairs whose full averaged rate vectors are kept
  std::vector<std::string> inspect_pairs;

  void validate() const;

  // Deterministic dump of every field; also the basis of the config hash.
  std::string canonical() const;
  uint64_t hash() const;
};

RunConfig parse_config_file(const std::string &path);
// Applies one "key=value" override (same keys as the file).
void apply_override(RunConfig &cfg, const std::string &assignment);

}  // namespace paco
