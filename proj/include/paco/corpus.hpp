#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace paco {

struct RawObservation {
  std::string user_id;
  std::string item_id;
  double rating = 0.0;
  std::string text;
};

enum class InputFormat { jsonl, tsv };

struct LoadStats {
  size_t parsed = 0;
  size_t malformed = 0;  // skipped lines
};

// Reads `user item rating text` records. Malformed lines are skipped and
// counted; an unreadable file throws DataError.
std::vector<RawObservation> load_observations(const std::string &path,
                                              InputFormat format,
                                              LoadStats *stats = nullptr);

struct Vocabulary {
  std::vector<std::string> words;                     // index -> word
  std::unordered_map<std::string, uint32_t> index;    // word -> index

  size_t size() const { return words.size(); }
  std::optional<uint32_t> lookup(const std::string &w) const {
    auto it = index.find(w);
    if (it == index.end()) return std::nullopt;
    return it->second;
  }
  bool operator==(const Vocabulary &o) const { return words == o.words; }
};

// Lowercase and split on runs of non-alphanumeric bytes.
std::vector<std::string> tokenize(const std::string &text);

std::unordered_set<std::string> default_stopwords();
std::unordered_set<std::string> load_stopwords(const std::string &path);

// Tokens of length >= min_word_len, not stopworded, with total corpus
// occurrence count >= min_freq. Indices are assigned in sorted word order.
Vocabulary build_vocabulary(const std::vector<RawObservation> &observations,
                            size_t min_word_len, size_t min_freq,
                            const std::unordered_set<std::string> &stopwords);

struct Review {
  uint32_t user = 0;
  uint32_t item = 0;
  double rating = 0.0;       // centered once RatingsCorpus::centered is set
  uint32_t word_begin = 0;   // span into word_ids / word_counts
  uint32_t word_end = 0;
};

struct VectorizeStats {
  size_t duplicates_dropped = 0;
};

// Sparse (user,item) -> (rating, bag-of-words counts) store. Reviews are
// sorted by (user, item); word ids within a review are sorted and counts
// are always >= 1.
struct RatingsCorpus {
  size_t n_users = 0;
  size_t n_items = 0;
  std::vector<std::string> user_ids;
  std::vector<std::string> item_ids;
  std::unordered_map<std::string, uint32_t> user_index;
  std::unordered_map<std::string, uint32_t> item_index;

  Vocabulary vocab;

  std::vector<Review> reviews;
  std::vector<uint32_t> word_ids;
  std::vector<uint32_t> word_counts;

  std::vector<std::vector<uint32_t>> by_user;  // user -> review indices
  std::vector<std::vector<uint32_t>> by_item;  // item -> review indices

  bool centered = false;
  double global_mean = 0.0;  // mean subtracted when centered
  double raw_lo = 0.0;       // observed raw rating range of this corpus
  double raw_hi = 0.0;

  size_t review_count() const { return reviews.size(); }
  size_t token_entries() const { return word_ids.size(); }

  // Total token count of review r (|n_{u,m}|_1).
  uint64_t review_word_total(uint32_t r) const {
    uint64_t t = 0;
    for (uint32_t w = reviews[r].word_begin; w < reviews[r].word_end; ++w)
      t += word_counts[w];
    return t;
  }

  const Review *find_review(uint32_t user, uint32_t item) const;

  void rebuild_adjacency();
};

// Builds the uncentered corpus. Duplicate (user,item) pairs keep the last
// occurrence. Out-of-vocabulary tokens are dropped.
RatingsCorpus vectorize(const std::vector<RawObservation> &observations,
                        const Vocabulary &vocab, double rating_scale = 1.0,
                        VectorizeStats *stats = nullptr);

struct SplitStats {
  size_t moved_for_coverage = 0;  // test candidates forced into train
};

// Disjoint train/test partition with the guarantee that every test user and
// item also appears in train. Deterministic in the seed.
std::pair<RatingsCorpus, RatingsCorpus> split_train_test(
    const RatingsCorpus &corpus, double test_fraction, uint64_t seed,
    SplitStats *stats = nullptr);

// Subtracts the train mean from both sets; returns it. Test ratings never
// contribute to the mean.
double center_ratings(RatingsCorpus &train, RatingsCorpus &test);

void save_corpus(const RatingsCorpus &corpus, const std::string &path);
RatingsCorpus load_corpus(const std::string &path);

}  // namespace paco
