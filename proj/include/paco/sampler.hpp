#pragma once

#include <cstdint>
#include <functional>
#include <unordered_map>
#include <vector>

#include "paco/corpus.hpp"
#include "paco/model.hpp"
#include "paco/rng.hpp"

namespace paco {

// ---------------------------------------------------------------------------
// Count allocation (thinned "residual" counts)
// ---------------------------------------------------------------------------

// Review-local component roles. Every observed word count is split across
// these; the role resolves to a concrete rate vector through the review's
// current cluster assignments.
//   role 0            background
//   role 1            per-item
//   role 2+3l         block of text stencil l
//   role 3+3l         item cluster of text stencil l
//   role 4+3l         user cluster of text stencil l
struct CountAllocation {
  uint32_t roles = 2;
  // counts[entry * roles + role], aligned with corpus.word_ids /
  // corpus.word_counts. Invariant: the roles of each entry sum to the
  // observed count, exactly.
  std::vector<uint32_t> counts;

  void init(size_t token_entries, uint32_t n_roles) {
    roles = n_roles;
    counts.assign(token_entries * n_roles, 0);
  }
  uint32_t &at(size_t entry, uint32_t role) { return counts[entry * roles + role]; }
  uint32_t at(size_t entry, uint32_t role) const { return counts[entry * roles + role]; }
};

// True iff every token entry's role counts sum to the observed count.
bool check_count_conservation(const CountAllocation &alloc, const RatingsCorpus &corpus);

// Splits every observed count across the review's active components with
// probabilities proportional to the component rates. Parallel over reviews;
// each review uses its own RNG substream keyed by (iteration, pass, review).
void thin_counts(const PacoModel &model, const RatingsCorpus &train,
                 CountAllocation &alloc, uint64_t iteration, uint64_t pass,
                 int threads);

// Single-review variant used by tests; draws from the supplied engine.
void thin_review(const PacoModel &model, const RatingsCorpus &train,
                 uint32_t review, CountAllocation &alloc, Rng &rng);

// ---------------------------------------------------------------------------
// Gamma-posterior rate updates
// ---------------------------------------------------------------------------

// Credited-count summary for one component: per-word sums of thinned counts
// over the reviews whose active set contains the component.
struct ComponentCredits {
  std::unordered_map<uint32_t, uint64_t> word_sums;
  uint64_t n_reviews = 0;  // |R_i|
};

// Draws each credited word's rate from Gamma(alpha + sum, beta + |R_i|);
// all remaining words share one draw from Gamma(alpha, beta + |R_i|) stored
// as the vector's default rate. Everything is floored at kRateFloor.
SparseRateVector sample_mu(const ComponentCredits &credits, double alpha,
                           double beta, Rng &rng);

// ---------------------------------------------------------------------------
// Residual ratings
// ---------------------------------------------------------------------------

// Tracks, per review, the full-model prediction sum_l T[c_u][d_m] so the
// residual against any one stencil is available in O(1).
struct ResidualState {
  std::vector<double> prediction;  // per review index

  void rebuild(const PacoModel &model, const RatingsCorpus &train);
  // centered rating minus all stencils except `exclude`
  double residual_excluding(const PacoModel &model, const RatingsCorpus &train,
                            uint32_t review, uint32_t exclude) const;
  // centered rating minus the full prediction
  double residual_full(const RatingsCorpus &train, uint32_t review) const {
    return train.reviews[review].rating - prediction[review];
  }
};

// ---------------------------------------------------------------------------
// Stencil rating update (Gaussian block means over residuals)
// ---------------------------------------------------------------------------

// Redraws every block mean of stencil l from its Normal posterior given the
// residuals that exclude stencil l, then refreshes `resid`. Empty blocks
// draw from the N(0, sigma_l2) prior.
void update_stencil_ratings(PacoModel &model, uint32_t stencil,
                            const RatingsCorpus &train, ResidualState &resid,
                            Rng &rng);

// ---------------------------------------------------------------------------
// Cluster-assignment sampling with condensed caches
// ---------------------------------------------------------------------------

// Per-sweep caches for one stencil. The tilde/log tables implement the
// condensed form of the text term so each sweep takes one pass over the
// data and one log per distinct (vector, word).
struct AssignmentCaches {
  uint32_t stencil = 0;
  bool user_side = true;  // whether per-entity stats index users or items

  // candidate-side tables (indexed by candidate cluster a, other-side b)
  uint32_t k_cand = 0;   // clusters on the side being sampled
  uint32_t k_other = 0;  // clusters on the fixed side
  std::vector<double> tilde_block;    // [a * k_other + b]: sum_x mu_block
  std::vector<double> tilde_own;      // [a]: sum_x mu_{user or item cluster}
  // log tables: explicit per-word logs plus the log of the default rate
  struct LogTable {
    std::unordered_map<uint32_t, double> entries;
    double log_default = 0.0;
    double at(uint32_t word) const {
      auto it = entries.find(word);
      return it == entries.end() ? log_default : it->second;
    }
  };
  std::vector<LogTable> log_block;  // [a * k_other + b]
  std::vector<LogTable> log_own;    // [a]

  // per-entity statistics (entity = user when user_side, else item)
  // Sparse word vectors are stored sorted by word so every later float sum
  // runs in one fixed order.
  using CountVec = std::vector<std::pair<uint32_t, uint64_t>>;
  using WeightVec = std::vector<std::pair<uint32_t, double>>;
  struct EntityStats {
    // reviews grouped by the fixed side's cluster b
    std::vector<uint32_t> groups;        // distinct b values
    std::vector<uint32_t> eta;           // review count per group
    std::vector<double> eta_w;           // sum of 1/|n| weights per group
    std::vector<double> resid_sum;       // sum of residuals per group
    std::vector<CountVec> hat_eta;       // raw credited counts per group
    std::vector<WeightVec> hat_eta_w;    // length-weighted credited counts
    CountVec hat_eta_own;                // own-cluster credited counts
    WeightVec hat_eta_own_w;
    double total_weight = 0.0;           // sum of eta_w over groups
  };
  std::vector<EntityStats> stats;

  std::vector<uint32_t> occupancy;  // cluster sizes on the sampled side
};

// Builds caches for sampling the user side (user_side=true) or item side of
// one stencil from the current model, residuals, and allocation.
AssignmentCaches build_assignment_caches(const PacoModel &model, uint32_t stencil,
                                         bool user_side,
                                         const CountAllocation &alloc,
                                         const RatingsCorpus &train,
                                         const ResidualState &resid);

// Recomputes the caches from scratch and compares; throws InternalError on
// mismatch (eta exactly, tilde/hat within tol). Debug/test helper.
void verify_assignment_caches(const AssignmentCaches &caches, const PacoModel &model,
                              const CountAllocation &alloc, const RatingsCorpus &train,
                              const ResidualState &resid, double tol = 1e-9);

// Condensed text score of assigning the cached entity to candidate cluster
// `a`, already weighted per review by 1/|n|; the naive equivalent is the
// per-review double sum of log-Poisson terms.
double condensed_text_score(const AssignmentCaches &caches, uint32_t entity,
                            uint32_t a);

struct AssignmentDecision {
  uint32_t cluster = 0;
  bool is_new = false;
};

// Pre-drawn parameters for the sweep's shared new-cluster candidate. Scores
// like any other cluster with CRP weight delta; entities that pick it all
// join the same new cluster.
struct NewClusterProposal {
  bool active = false;
  std::vector<double> block_means;          // one per fixed-side cluster
  double mu_block_default = 1.0;            // per fixed-side cluster draws
  std::vector<double> mu_block_defaults;    // [b]
  double mu_own_default = 1.0;
};

NewClusterProposal draw_new_cluster_proposal(const PacoModel &model, uint32_t stencil,
                                             bool user_side, Rng &rng);

// Samples a cluster for one entity against the sweep-start snapshot. The
// caches are read-only; the caller applies the decision.
AssignmentDecision sample_assignment(const PacoModel &model, uint32_t stencil,
                                     bool user_side, uint32_t entity,
                                     const AssignmentCaches &caches,
                                     const NewClusterProposal &proposal, Rng &rng);

// Convenience wrapper matching the one-entity contract: decide, then apply
// (instantiating new-cluster parameters from the prior when accepted).
uint32_t sample_user_assignment(PacoModel &model, uint32_t stencil, uint32_t user,
                                const AssignmentCaches &caches,
                                const RatingsCorpus &train, ResidualState &resid,
                                Rng &rng);
uint32_t sample_item_assignment(PacoModel &model, uint32_t stencil, uint32_t item,
                                const AssignmentCaches &caches,
                                const RatingsCorpus &train, ResidualState &resid,
                                Rng &rng);

// Removes empty clusters of stencil `l`, renumbering assignments and
// dropping the matching block-mean rows/cols and rate vectors.
void compact_stencil(PacoModel &model, uint32_t stencil);

// ---------------------------------------------------------------------------
// Variance resampling
// ---------------------------------------------------------------------------

// Conjugate inverse-gamma draw for the rating noise given all residuals.
double sample_noise_variance(const PacoModel &model, const RatingsCorpus &train,
                             const ResidualState &resid, Rng &rng);

// ---------------------------------------------------------------------------
// Full Gibbs machinery
// ---------------------------------------------------------------------------

struct GibbsOptions {
  int threads = 1;
  // Degenerate configurations (everything defaults to the full sampler).
  bool update_text = true;
  bool update_assignments = true;
  bool update_ratings = true;
  // Called after each phase with a short label; lets invariant suites check
  // state between phases.
  std::function<void(const char *)> phase_hook;
};

// One sweep of the full sampler: thin, sample background rates, per stencil
// update ratings / re-thin / sample stencil rates / sample assignments, then
// item rates and noise variance.
void gibbs_iteration(PacoModel &model, const RatingsCorpus &train,
                     CountAllocation &alloc, ResidualState &resid,
                     uint64_t iteration, const GibbsOptions &opts);

// Unnormalized joint log posterior of the current state (rating likelihood,
// length-normalized text likelihood, block-mean prior, CRP prior). Used for
// convergence traces.
double joint_log_posterior(const PacoModel &model, const RatingsCorpus &train);

// Running posterior means over a set of probe pairs.
struct PosteriorSummary {
  struct Pair {
    uint32_t user = 0;
    uint32_t item = 0;
    double mean_prediction = 0.0;  // centered scale, clipped natively
    double mean_rate_total = 0.0;  // sum_x lambda_x averaged
    // averaged lambda at this pair's observed test words
    std::vector<std::pair<uint32_t, double>> mean_rate_sparse;
    // full averaged lambda; only kept for report pairs
    std::vector<double> mean_rate_dense;
  };
  std::vector<Pair> pairs;
  std::unordered_map<uint64_t, uint32_t> pair_index;  // (u<<32|m) -> slot
  uint32_t n_samples_used = 0;

  const Pair *find(uint32_t user, uint32_t item) const {
    auto it = pair_index.find((static_cast<uint64_t>(user) << 32) | item);
    return it == pair_index.end() ? nullptr : &pairs[it->second];
  }
};

void save_summary(const PosteriorSummary &s, const std::string &path);
PosteriorSummary load_summary(const std::string &path);

struct TrainOptions {
  GibbsOptions gibbs;
  // corpus holding the probe pairs' reviews; enables averaged rates at each
  // probe pair's observed words (needed for held-out perplexity)
  const RatingsCorpus *probe_corpus = nullptr;
  // pairs whose full averaged rate vector should be retained
  std::vector<std::pair<uint32_t, uint32_t>> report_pairs;
  // called after every iteration with the current state
  std::function<void(uint64_t iter, const PacoModel &, const CountAllocation &)>
      on_iteration;
};

// K-means initialization over residuals (missing entries as zero) followed
// by per-block residual means; all rate vectors start at 1.
PacoModel init_kmeans(const RatingsCorpus &train, const Hyperparameters &hyper);

struct TrainResult {
  PacoModel model;
  PosteriorSummary summary;
};

// Stepwise trainer: owns the model, allocation, and posterior accumulators
// and can round-trip them through a checkpoint stream so an interrupted run
// resumes to a bit-identical result (RNG streams are derived from the
// iteration counter, so no generator state needs saving).
class Trainer {
 public:
  Trainer(const RatingsCorpus &train_corpus, const Hyperparameters &hyper,
          std::vector<std::pair<uint32_t, uint32_t>> probe_pairs,
          TrainOptions opts);

  uint64_t iteration() const { return iteration_; }
  uint64_t total_iterations() const {
    return model_.hyper.burn_in + model_.hyper.n_samples;
  }
  bool done() const { return iteration_ >= total_iterations(); }
  void step();  // one Gibbs iteration plus posterior accumulation

  const PacoModel &model() const { return model_; }
  const CountAllocation &allocation() const { return alloc_; }

  PosteriorSummary summary() const;  // averaged over samples so far

  void save(class BinaryWriter &w) const;
  void restore(class BinaryReader &r);

 private:
  const RatingsCorpus &corpus_;
  TrainOptions opts_;
  std::vector<std::pair<uint32_t, uint32_t>> probe_pairs_;
  PacoModel model_;
  CountAllocation alloc_;
  ResidualState resid_;
  uint64_t iteration_ = 0;
  uint32_t samples_used_ = 0;
  std::vector<std::vector<uint32_t>> probe_words_;
  std::vector<double> pred_sum_;
  std::vector<double> total_sum_;
  std::vector<std::vector<double>> sparse_sum_;
  std::vector<std::vector<double>> dense_sum_;
};

// init_kmeans + burn_in + n_samples Gibbs iterations, averaging predictions
// and rate vectors over the post-burn-in samples for the probe pairs.
TrainResult train(const RatingsCorpus &train_corpus, const Hyperparameters &hyper,
                  const std::vector<std::pair<uint32_t, uint32_t>> &probe_pairs,
                  const TrainOptions &opts = {});

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

struct SyntheticTruth {
  PacoModel model;  // the generating model
  std::vector<std::vector<uint32_t>> user_clusters;  // per stencil
  std::vector<std::vector<uint32_t>> item_clusters;
};

// Samples assignments, block means, and rate vectors from the priors, then
// emits ratings and word counts for a uniformly random set of observed
// cells. Vocabulary words are synthetic ("w000", ...).
std::pair<RatingsCorpus, SyntheticTruth> generate_synthetic(
    const Hyperparameters &hyper, size_t n_users, size_t n_items,
    size_t vocab_size, double density, uint64_t seed);

}  // namespace paco
