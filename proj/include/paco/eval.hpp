#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <unordered_map>
#include <vector>

#include "paco/corpus.hpp"
#include "paco/model.hpp"
#include "paco/sampler.hpp"

namespace paco {

// Root mean squared error of the averaged predictions on the native rating
// scale. Every test pair must be present in the summary.
double rmse(const PosteriorSummary &summary, const RatingsCorpus &test);

// Held-out log perplexity in nats per word: each pair's averaged rate vector
// is normalized to a multinomial and scored on the observed counts.
// Out-of-vocabulary tokens were pruned at corpus build and do not count
// toward the word total. Throws DataError when the test set has no words.
double perplexity(const PosteriorSummary &summary, const RatingsCorpus &test);

// Per-review joint negative log-likelihood: log perplexity plus the mean
// negative Gaussian log-density of the centered ratings.
double joint_nll(const PosteriorSummary &summary, const RatingsCorpus &test,
                 double sigma2);

// The Gaussian part of joint_nll, reported separately.
double rating_nll(const PosteriorSummary &summary, const RatingsCorpus &test,
                  double sigma2);

struct EvalReport {
  double rmse = 0.0;
  double log_ppx = 0.0;     // nats per word
  double rating_nll = 0.0;  // mean negative Gaussian log-density
  double joint_nll = 0.0;   // log_ppx + rating_nll
  uint64_t n_pairs = 0;
  uint64_t n_words = 0;
};

EvalReport evaluate(const PosteriorSummary &summary, const RatingsCorpus &test,
                    double sigma2);

// Same metrics computed from a single model state instead of a posterior
// average; used for per-iteration logging.
EvalReport evaluate_state(const PacoModel &model, const RatingsCorpus &test);

// RMSE of a model state on its own training corpus.
double train_rmse(const PacoModel &model, const RatingsCorpus &train);

void write_report_text(const EvalReport &r, std::ostream &out);
void write_report_kv(const EvalReport &r, std::ostream &out);

// ---------------------------------------------------------------------------
// Cold-start analysis
// ---------------------------------------------------------------------------

// Native-scale predictions keyed by (user index << 32 | item index).
using BaselinePredictions = std::unordered_map<uint64_t, double>;

BaselinePredictions load_baseline_predictions(const std::string &path,
                                              const RatingsCorpus &corpus);

struct ColdStartBucket {
  std::string label;
  uint64_t count = 0;
  double rmse_model = 0.0;
  double rmse_baseline = 0.0;
  double delta = 0.0;  // rmse_model - rmse_baseline
};

struct ColdStartTable {
  std::vector<ColdStartBucket> by_item;  // bucketed by item train count
  std::vector<ColdStartBucket> by_user;  // bucketed by user train count
};

// Buckets test pairs by the number of training observations of their item
// (and separately their user): 1-2, 3-5, 6-10, 11-20, 21+.
ColdStartTable cold_start_buckets(const PosteriorSummary &summary,
                                  const BaselinePredictions &baseline,
                                  const RatingsCorpus &train,
                                  const RatingsCorpus &test);

void write_cold_start(const ColdStartTable &t, std::ostream &out);

// ---------------------------------------------------------------------------
// Interpretability reports
// ---------------------------------------------------------------------------

struct WordScore {
  uint32_t word = 0;
  double rate = 0.0;
};

// Top-k words of one rate vector, by rate descending with lexicographic
// tie-break on the word string.
std::vector<WordScore> top_words(const SparseRateVector &v, const Vocabulary &vocab,
                                 size_t top_k);

struct BlockReport {
  uint32_t stencil = 0;
  uint32_t row_cluster = 0;
  uint32_t col_cluster = 0;
  double block_mean = 0.0;
  uint64_t n_observations = 0;  // training observations in the block, if known
  std::vector<WordScore> words;
};

struct ItemClusterReport {
  uint32_t stencil = 0;
  uint32_t cluster = 0;
  std::vector<uint32_t> members;  // item indices, by training frequency desc
  std::vector<WordScore> words;
};

struct TopWordsReport {
  std::vector<BlockReport> blocks;                       // per text stencil
  std::vector<std::vector<WordScore>> item_words;        // [item]
  std::vector<ItemClusterReport> item_clusters;
};

// Emits per-block, per-item, and per-item-cluster top words. The training
// corpus, when given, supplies block occupancy and member-item ordering.
TopWordsReport top_words_report(const PacoModel &model, size_t top_k,
                                const RatingsCorpus *train = nullptr);

void write_block_report(const TopWordsReport &r, const PacoModel &model,
                        std::ostream &out);
void write_item_report(const TopWordsReport &r, const PacoModel &model,
                       size_t max_items, std::ostream &out);
void write_item_cluster_report(const TopWordsReport &r, const PacoModel &model,
                               std::ostream &out);

// Top-k predicted words for one pair from its averaged rate vector.
std::vector<WordScore> top_pair_words(const PosteriorSummary &summary,
                                      const Vocabulary &vocab, uint32_t user,
                                      uint32_t item, size_t top_k);

}  // namespace paco
