#include "paco/corpus.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>

#include "paco/errors.hpp"
#include "paco/io_util.hpp"
#include "paco/rng.hpp"

namespace paco {

std::vector<RawObservation> load_observations(const std::string &path,
                                              InputFormat format,
                                              LoadStats *stats) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open input file: " + path);

  std::vector<RawObservation> out;
  LoadStats local;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    RawObservation obs;
    bool ok = false;
    if (format == InputFormat::tsv) {
      // user<TAB>item<TAB>rating<TAB>text ; text keeps any further tabs
      size_t p1 = line.find('\t');
      size_t p2 = p1 == std::string::npos ? std::string::npos : line.find('\t', p1 + 1);
      size_t p3 = p2 == std::string::npos ? std::string::npos : line.find('\t', p2 + 1);
      if (p3 != std::string::npos && p1 > 0 && p2 > p1 + 1) {
        obs.user_id = line.substr(0, p1);
        obs.item_id = line.substr(p1 + 1, p2 - p1 - 1);
        try {
          size_t used = 0;
          obs.rating = std::stod(line.substr(p2 + 1, p3 - p2 - 1), &used);
          ok = used == p3 - p2 - 1 && std::isfinite(obs.rating);
        } catch (const std::exception &) {
          ok = false;
        }
        obs.text = line.substr(p3 + 1);
      }
    } else {
      try {
        auto j = nlohmann::json::parse(line);
        obs.user_id = j.at("user").get<std::string>();
        obs.item_id = j.at("item").get<std::string>();
        obs.rating = j.at("rating").get<double>();
        obs.text = j.at("text").get<std::string>();
        ok = std::isfinite(obs.rating);
      } catch (const std::exception &) {
        ok = false;
      }
    }
    if (ok && !obs.user_id.empty() && !obs.item_id.empty()) {
      out.push_back(std::move(obs));
      ++local.parsed;
    } else {
      ++local.malformed;
      fprintf(stderr, "warning: skipping malformed record at %s:%zu\n",
              path.c_str(), lineno);
    }
  }
  if (stats) *stats = local;
  return out;
}

std::vector<std::string> tokenize(const std::string &text) {
  std::vector<std::string> tokens;
  std::string cur;
  for (unsigned char c : text) {
    if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      tokens.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) tokens.push_back(std::move(cur));
  return tokens;
}

std::unordered_set<std::string> default_stopwords() {
  static const char *kWords[] = {
      "a",       "about",   "above",  "after",   "again",   "against", "all",
      "am",      "an",      "and",    "any",     "are",     "aren",    "as",
      "at",      "be",      "because","been",    "before",  "being",   "below",
      "between", "both",    "but",    "by",      "can",     "cannot",  "could",
      "did",     "do",      "does",   "doing",   "don",     "down",    "during",
      "each",    "few",     "for",    "from",    "further", "had",     "has",
      "have",    "having",  "he",     "her",     "here",    "hers",    "herself",
      "him",     "himself", "his",    "how",     "i",       "if",      "in",
      "into",    "is",      "isn",    "it",      "its",     "itself",  "just",
      "me",      "more",    "most",   "my",      "myself",  "no",      "nor",
      "not",     "now",     "of",     "off",     "on",      "once",    "only",
      "or",      "other",   "our",    "ours",    "ourselves","out",    "over",
      "own",     "same",    "she",    "should",  "so",      "some",    "such",
      "than",    "that",    "the",    "their",   "theirs",  "them",    "themselves",
      "then",    "there",   "these",  "they",    "this",    "those",   "through",
      "to",      "too",     "under",  "until",   "up",      "very",    "was",
      "we",      "were",    "what",   "when",    "where",   "which",   "while",
      "who",     "whom",    "why",    "will",    "with",    "would",   "you",
      "your",    "yours",   "yourself","yourselves"};
  std::unordered_set<std::string> s;
  for (const char *w : kWords) s.insert(w);
  return s;
}

std::unordered_set<std::string> load_stopwords(const std::string &path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open stopword file: " + path);
  std::unordered_set<std::string> s;
  std::string line;
  while (std::getline(in, line)) {
    for (const auto &t : tokenize(line)) s.insert(t);
  }
  return s;
}

Vocabulary build_vocabulary(const std::vector<RawObservation> &observations,
                            size_t min_word_len, size_t min_freq,
                            const std::unordered_set<std::string> &stopwords) {
  if (min_word_len < 1 || min_freq < 1)
    throw ConfigError("min_word_len and min_freq must be >= 1");

  std::unordered_map<std::string, uint64_t> freq;
  for (const auto &obs : observations) {
    for (auto &tok : tokenize(obs.text)) {
      if (tok.size() < min_word_len) continue;
      if (stopwords.count(tok)) continue;
      ++freq[tok];
    }
  }

  Vocabulary vocab;
  vocab.words.reserve(freq.size());
  for (const auto &kv : freq)
    if (kv.second >= min_freq) vocab.words.push_back(kv.first);
  std::sort(vocab.words.begin(), vocab.words.end());
  for (uint32_t i = 0; i < vocab.words.size(); ++i)
    vocab.index.emplace(vocab.words[i], i);
  if (vocab.words.empty())
    fprintf(stderr, "warning: vocabulary is empty after pruning\n");
  return vocab;
}

const Review *RatingsCorpus::find_review(uint32_t user, uint32_t item) const {
  if (user >= by_user.size()) return nullptr;
  for (uint32_t r : by_user[user])
    if (reviews[r].item == item) return &reviews[r];
  return nullptr;
}

void RatingsCorpus::rebuild_adjacency() {
  by_user.assign(n_users, {});
  by_item.assign(n_items, {});
  for (uint32_t r = 0; r < reviews.size(); ++r) {
    by_user[reviews[r].user].push_back(r);
    by_item[reviews[r].item].push_back(r);
  }
}

RatingsCorpus vectorize(const std::vector<RawObservation> &observations,
                        const Vocabulary &vocab, double rating_scale,
                        VectorizeStats *stats) {
  RatingsCorpus c;
  c.vocab = vocab;

  // Dense ids in first-appearance order; duplicates keep the last record.
  std::unordered_map<std::string, uint32_t> &umap = c.user_index;
  std::unordered_map<std::string, uint32_t> &imap = c.item_index;
  std::map<std::pair<uint32_t, uint32_t>, const RawObservation *> last;
  size_t dupes = 0;
  for (const auto &obs : observations) {
    auto [uit, unew] = umap.emplace(obs.user_id, static_cast<uint32_t>(c.user_ids.size()));
    if (unew) c.user_ids.push_back(obs.user_id);
    auto [iit, inew] = imap.emplace(obs.item_id, static_cast<uint32_t>(c.item_ids.size()));
    if (inew) c.item_ids.push_back(obs.item_id);
    auto key = std::make_pair(uit->second, iit->second);
    auto [oit, onew] = last.emplace(key, &obs);
    if (!onew) {
      oit->second = &obs;  // keep last
      ++dupes;
    }
  }
  if (stats) stats->duplicates_dropped = dupes;
  c.n_users = c.user_ids.size();
  c.n_items = c.item_ids.size();

  bool first = true;
  for (const auto &kv : last) {
    const RawObservation &obs = *kv.second;
    Review rv;
    rv.user = kv.first.first;
    rv.item = kv.first.second;
    rv.rating = obs.rating * rating_scale;
    if (first || rv.rating < c.raw_lo) c.raw_lo = rv.rating;
    if (first || rv.rating > c.raw_hi) c.raw_hi = rv.rating;
    first = false;

    std::map<uint32_t, uint32_t> counts;
    for (const auto &tok : tokenize(obs.text)) {
      if (auto idx = vocab.lookup(tok)) ++counts[*idx];
    }
    rv.word_begin = static_cast<uint32_t>(c.word_ids.size());
    for (const auto &wc : counts) {
      c.word_ids.push_back(wc.first);
      c.word_counts.push_back(wc.second);
    }
    rv.word_end = static_cast<uint32_t>(c.word_ids.size());
    c.reviews.push_back(rv);
  }
  c.rebuild_adjacency();
  return c;
}

namespace {

// Copies a subset of reviews, keeping the shared id maps and vocabulary.
RatingsCorpus subset_corpus(const RatingsCorpus &src, const std::vector<char> &take) {
  RatingsCorpus out;
  out.n_users = src.n_users;
  out.n_items = src.n_items;
  out.user_ids = src.user_ids;
  out.item_ids = src.item_ids;
  out.user_index = src.user_index;
  out.item_index = src.item_index;
  out.vocab = src.vocab;
  out.centered = src.centered;
  out.global_mean = src.global_mean;

  bool first = true;
  for (uint32_t r = 0; r < src.reviews.size(); ++r) {
    if (!take[r]) continue;
    Review rv = src.reviews[r];
    uint32_t b = rv.word_begin, e = rv.word_end;
    rv.word_begin = static_cast<uint32_t>(out.word_ids.size());
    for (uint32_t w = b; w < e; ++w) {
      out.word_ids.push_back(src.word_ids[w]);
      out.word_counts.push_back(src.word_counts[w]);
    }
    rv.word_end = static_cast<uint32_t>(out.word_ids.size());
    if (first || rv.rating < out.raw_lo) out.raw_lo = rv.rating;
    if (first || rv.rating > out.raw_hi) out.raw_hi = rv.rating;
    first = false;
    out.reviews.push_back(rv);
  }
  out.rebuild_adjacency();
  return out;
}

}  // namespace

std::pair<RatingsCorpus, RatingsCorpus> split_train_test(
    const RatingsCorpus &corpus, double test_fraction, uint64_t seed,
    SplitStats *stats) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0))
    throw ConfigError("test_fraction must be in (0,1)");

  const size_t n = corpus.reviews.size();
  std::vector<uint32_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng = substream(seed, {UINT64_C(0x59171)});  // split phase tag
  std::shuffle(order.begin(), order.end(), rng);

  size_t want_test = static_cast<size_t>(std::floor(test_fraction * static_cast<double>(n)));
  std::vector<char> in_test(n, 0);
  for (size_t i = 0; i < want_test; ++i) in_test[order[i]] = 1;

  // Per-entity train counts under the tentative split.
  std::vector<uint32_t> utrain(corpus.n_users, 0), itrain(corpus.n_items, 0);
  for (uint32_t r = 0; r < n; ++r) {
    if (!in_test[r]) {
      ++utrain[corpus.reviews[r].user];
      ++itrain[corpus.reviews[r].item];
    }
  }
  // Move any test review whose user or item lost coverage back into train,
  // scanning in review order so the result is deterministic.
  size_t moved = 0;
  for (uint32_t r = 0; r < n; ++r) {
    if (!in_test[r]) continue;
    const Review &rv = corpus.reviews[r];
    if (utrain[rv.user] == 0 || itrain[rv.item] == 0) {
      in_test[r] = 0;
      ++utrain[rv.user];
      ++itrain[rv.item];
      ++moved;
    }
  }
  if (stats) stats->moved_for_coverage = moved;

  size_t test_n = 0;
  for (char t : in_test) test_n += t;
  if (test_n == 0)
    fprintf(stderr, "warning: corpus too small for requested split; test set is empty\n");

  std::vector<char> in_train(n);
  for (uint32_t r = 0; r < n; ++r) in_train[r] = !in_test[r];
  return {subset_corpus(corpus, in_train), subset_corpus(corpus, in_test)};
}

double center_ratings(RatingsCorpus &train, RatingsCorpus &test) {
  if (train.reviews.empty()) throw DataError("cannot center an empty train corpus");
  PACO_CHECK(!train.centered && !test.centered, "corpus centered twice");
  double sum = 0.0;
  for (const auto &rv : train.reviews) sum += rv.rating;
  double mean = sum / static_cast<double>(train.reviews.size());
  for (auto &rv : train.reviews) rv.rating -= mean;
  for (auto &rv : test.reviews) rv.rating -= mean;
  train.centered = test.centered = true;
  train.global_mean = test.global_mean = mean;
  return mean;
}

namespace {
constexpr char kCorpusMagic[9] = "PACOCRP1";
constexpr uint32_t kCorpusVersion = 1;
}  // namespace

void save_corpus(const RatingsCorpus &c, const std::string &path) {
  BinaryWriter w(path);
  w.magic(kCorpusMagic);
  w.u32(kCorpusVersion);
  w.u64(c.n_users);
  w.u64(c.n_items);
  w.u8(c.centered ? 1 : 0);
  w.f64(c.global_mean);
  w.f64(c.raw_lo);
  w.f64(c.raw_hi);
  for (const auto &s : c.user_ids) w.str(s);
  for (const auto &s : c.item_ids) w.str(s);
  w.u64(c.vocab.size());
  for (const auto &s : c.vocab.words) w.str(s);
  w.u64(c.reviews.size());
  for (const auto &rv : c.reviews) {
    w.u32(rv.user);
    w.u32(rv.item);
    w.f64(rv.rating);
    w.u32(rv.word_begin);
    w.u32(rv.word_end);
  }
  w.u64(c.word_ids.size());
  for (uint32_t v : c.word_ids) w.u32(v);
  for (uint32_t v : c.word_counts) w.u32(v);
  w.close();
}

RatingsCorpus load_corpus(const std::string &path) {
  BinaryReader r(path);
  r.expect_magic(kCorpusMagic);
  uint32_t ver = r.u32();
  if (ver != kCorpusVersion)
    throw DataError("unsupported corpus version " + std::to_string(ver) + " in " + path);
  RatingsCorpus c;
  c.n_users = r.u64();
  c.n_items = r.u64();
  c.centered = r.u8() != 0;
  c.global_mean = r.f64();
  c.raw_lo = r.f64();
  c.raw_hi = r.f64();
  c.user_ids.resize(c.n_users);
  for (auto &s : c.user_ids) s = r.str();
  c.item_ids.resize(c.n_items);
  for (auto &s : c.item_ids) s = r.str();
  for (uint32_t i = 0; i < c.user_ids.size(); ++i) c.user_index.emplace(c.user_ids[i], i);
  for (uint32_t i = 0; i < c.item_ids.size(); ++i) c.item_index.emplace(c.item_ids[i], i);
  c.vocab.words.resize(r.u64());
  for (auto &s : c.vocab.words) s = r.str();
  for (uint32_t i = 0; i < c.vocab.words.size(); ++i) c.vocab.index.emplace(c.vocab.words[i], i);
  c.reviews.resize(r.u64());
  for (auto &rv : c.reviews) {
    rv.user = r.u32();
    rv.item = r.u32();
    rv.rating = r.f64();
    rv.word_begin = r.u32();
    rv.word_end = r.u32();
  }
  size_t nw = r.u64();
  c.word_ids.resize(nw);
  for (auto &v : c.word_ids) v = r.u32();
  c.word_counts.resize(nw);
  for (auto &v : c.word_counts) v = r.u32();
  c.rebuild_adjacency();
  return c;
}

}  // namespace paco
