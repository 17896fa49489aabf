#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "paco/corpus.hpp"
#include "paco/sparse_vec.hpp"

namespace paco {

// Language-model component classes. Each class can carry its own Gamma
// prior (alpha, beta).
enum class LmClass : uint32_t {
  background = 0,
  item = 1,
  block = 2,
  item_cluster = 3,
  user_cluster = 4,
};
inline constexpr size_t kLmClassCount = 5;

struct Hyperparameters {
  uint32_t stencils = 3;        // S
  uint32_t text_stencils = 1;   // S0 <= S: stencils that carry language models
  uint32_t k_max = 32;          // cluster-count cap per stencil side
  double crp_delta = 1.0;       // CRP concentration

  // Gamma(shape alpha, rate beta) prior on Poisson rates, per component class.
  std::array<double, kLmClassCount> alpha{1.0, 1.0, 1.0, 1.0, 1.0};
  std::array<double, kLmClassCount> beta{1.0, 1.0, 1.0, 1.0, 1.0};

  double sigma2 = 1.0;          // initial rating noise variance
  double sigma_l2 = 1.0;        // block-mean prior variance (per stencil)
  double gamma_shape = 2.0;     // inverse-gamma hyperprior on sigma_l2
  double gamma_scale = 1.0;
  double eta_shape = 2.0;       // inverse-gamma hyperprior on sigma2
  double eta_scale = 1.0;

  bool resample_sigma2 = true;
  bool resample_sigma_l2 = false;

  uint32_t burn_in = 50;
  uint32_t n_samples = 50;
  uint64_t seed = 42;

  void validate() const;
};

// One co-clustering layer: a k_n x k_m table of block means plus row and
// column cluster assignments.
struct Stencil {
  uint32_t k_n = 1;
  uint32_t k_m = 1;
  std::vector<double> block_means;  // row-major k_n x k_m
  std::vector<uint32_t> row_of;     // user -> cluster, length N
  std::vector<uint32_t> col_of;     // item -> cluster, length M

  double &mean(uint32_t a, uint32_t b) { return block_means[a * k_m + b]; }
  double mean(uint32_t a, uint32_t b) const { return block_means[a * k_m + b]; }
  double value(uint32_t u, uint32_t m) const { return mean(row_of[u], col_of[m]); }
};

// All Poisson rate vectors: one background, one per item, and per text
// stencil one per block, one per item cluster, one per user cluster.
struct LanguageModelSet {
  SparseRateVector background;
  std::vector<SparseRateVector> item;                       // [m]
  std::vector<std::vector<SparseRateVector>> block;         // [l][a*k_m+b]
  std::vector<std::vector<SparseRateVector>> user_cluster;  // [l][a]
  std::vector<std::vector<SparseRateVector>> item_cluster;  // [l][b]
};

struct PacoModel {
  Hyperparameters hyper;
  size_t n_users = 0;
  size_t n_items = 0;
  Vocabulary vocab;
  std::vector<Stencil> stencils;
  LanguageModelSet lms;
  double global_mean = 0.0;
  double sigma2 = 1.0;
  std::vector<double> sigma_l2;  // per stencil
  double rating_lo = 0.0;        // native-scale prediction clip range
  double rating_hi = 0.0;

  size_t vocab_size() const { return vocab.size(); }

  // The active-component count for any review: background + item + three
  // per text stencil.
  uint32_t components_per_review() const {
    return 2 + 3 * hyper.text_stencils;
  }
};

// global_mean + sum of block means over stencils, clipped into the native
// rating range.
double predict_rating(const PacoModel &model, uint32_t user, uint32_t item);

// Same, without clipping or the global mean (the centered-scale prediction).
double predict_centered(const PacoModel &model, uint32_t user, uint32_t item);

// Elementwise sum of the active component vectors for (user, item), dense
// over the vocabulary. Summation order is fixed: background, item, then per
// text stencil block, item-cluster, user-cluster.
std::vector<double> compute_rate_vector(const PacoModel &model, uint32_t user,
                                        uint32_t item);

// Sum over words of the rate vector (needed for Poisson normalization).
double rate_vector_total(const PacoModel &model, uint32_t user, uint32_t item);

// Storage cost of the rating model in bits:
//   sum over stencils of N*ceil(log2 k_n) + M*ceil(log2 k_m) + 32*k_n*k_m.
// Language-model parameters are not counted.
uint64_t model_size_bits(const PacoModel &model);

void serialize(const PacoModel &model, const std::string &path);
PacoModel deserialize(const std::string &path);

// Stream-level variants used for embedding a model in checkpoint files.
class BinaryWriter;
class BinaryReader;
void write_model(BinaryWriter &w, const PacoModel &model);
PacoModel read_model(BinaryReader &r);

}  // namespace paco
