#include "paco/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <ostream>

#include "paco/errors.hpp"

namespace paco {

namespace {

const PosteriorSummary::Pair &pair_or_throw(const PosteriorSummary &summary,
                                            uint32_t user, uint32_t item) {
  const auto *p = summary.find(user, item);
  if (!p)
    throw DataError("summary has no prediction for pair (" + std::to_string(user) +
                    "," + std::to_string(item) + ")");
  return *p;
}

}  // namespace

double rmse(const PosteriorSummary &summary, const RatingsCorpus &test) {
  if (test.reviews.empty()) throw DataError("empty test set");
  double se = 0.0;
  for (const auto &rv : test.reviews) {
    const auto &p = pair_or_throw(summary, rv.user, rv.item);
    double truth = rv.rating + test.global_mean;  // native scale
    double pred = test.global_mean + p.mean_prediction;
    se += (truth - pred) * (truth - pred);
  }
  return std::sqrt(se / static_cast<double>(test.reviews.size()));
}

double perplexity(const PosteriorSummary &summary, const RatingsCorpus &test) {
  double sum = 0.0;
  uint64_t n_words = 0;
  for (const auto &rv : test.reviews) {
    if (rv.word_begin == rv.word_end) continue;
    const auto &p = pair_or_throw(summary, rv.user, rv.item);
    // averaged rates for this review's words, in corpus word order
    for (uint32_t e = rv.word_begin; e < rv.word_end; ++e) {
      uint32_t x = test.word_ids[e];
      double lam = 0.0;
      bool found = false;
      for (const auto &kv : p.mean_rate_sparse) {
        if (kv.first == x) {
          lam = kv.second;
          found = true;
          break;
        }
      }
      if (!found)
        throw DataError("summary lacks averaged rate for a test word; was the "
                        "summary built against this test corpus?");
      double theta = lam / p.mean_rate_total;
      sum += static_cast<double>(test.word_counts[e]) * std::log(theta);
      n_words += test.word_counts[e];
    }
  }
  if (n_words == 0) throw DataError("no evaluable text in test set");
  return -sum / static_cast<double>(n_words);
}

double rating_nll(const PosteriorSummary &summary, const RatingsCorpus &test,
                  double sigma2) {
  if (test.reviews.empty()) throw DataError("empty test set");
  double s = 0.0;
  for (const auto &rv : test.reviews) {
    const auto &p = pair_or_throw(summary, rv.user, rv.item);
    double e = rv.rating - p.mean_prediction;  // centered scale
    s += 0.5 * std::log(2.0 * M_PI * sigma2) + e * e / (2.0 * sigma2);
  }
  return s / static_cast<double>(test.reviews.size());
}

double joint_nll(const PosteriorSummary &summary, const RatingsCorpus &test,
                 double sigma2) {
  return perplexity(summary, test) + rating_nll(summary, test, sigma2);
}

EvalReport evaluate(const PosteriorSummary &summary, const RatingsCorpus &test,
                    double sigma2) {
  EvalReport r;
  r.rmse = rmse(summary, test);
  r.log_ppx = perplexity(summary, test);
  r.rating_nll = rating_nll(summary, test, sigma2);
  r.joint_nll = r.log_ppx + r.rating_nll;
  r.n_pairs = test.reviews.size();
  for (uint32_t c : test.word_counts) r.n_words += c;
  return r;
}

EvalReport evaluate_state(const PacoModel &model, const RatingsCorpus &test) {
  EvalReport r;
  r.n_pairs = test.reviews.size();
  double se = 0.0, text = 0.0, gauss = 0.0;
  uint64_t n_words = 0;
  for (const auto &rv : test.reviews) {
    double pred_native = predict_rating(model, rv.user, rv.item);
    double truth_native = rv.rating + test.global_mean;
    se += (truth_native - pred_native) * (truth_native - pred_native);
    double e = rv.rating - (pred_native - model.global_mean);
    gauss += 0.5 * std::log(2.0 * M_PI * model.sigma2) + e * e / (2.0 * model.sigma2);
    if (rv.word_begin == rv.word_end) continue;
    std::vector<double> lam = compute_rate_vector(model, rv.user, rv.item);
    double total = 0.0;
    for (double v : lam) total += v;
    for (uint32_t e2 = rv.word_begin; e2 < rv.word_end; ++e2) {
      text += static_cast<double>(test.word_counts[e2]) *
              std::log(lam[test.word_ids[e2]] / total);
      n_words += test.word_counts[e2];
    }
  }
  r.rmse = std::sqrt(se / static_cast<double>(test.reviews.size()));
  r.log_ppx = n_words ? -text / static_cast<double>(n_words) : 0.0;
  r.rating_nll = gauss / static_cast<double>(test.reviews.size());
  r.joint_nll = r.log_ppx + r.rating_nll;
  r.n_words = n_words;
  return r;
}

double train_rmse(const PacoModel &model, const RatingsCorpus &train) {
  if (train.reviews.empty()) throw DataError("empty corpus");
  double se = 0.0;
  for (const auto &rv : train.reviews) {
    double pred = predict_rating(model, rv.user, rv.item);
    double truth = rv.rating + train.global_mean;
    se += (truth - pred) * (truth - pred);
  }
  return std::sqrt(se / static_cast<double>(train.reviews.size()));
}

void write_report_text(const EvalReport &r, std::ostream &out) {
  char buf[256];
  out << "held-out evaluation\n";
  out << "-------------------\n";
  snprintf(buf, sizeof(buf), "%-22s %12.6f\n", "rmse", r.rmse);
  out << buf;
  snprintf(buf, sizeof(buf), "%-22s %12.6f\n", "log perplexity (nats)", r.log_ppx);
  out << buf;
  snprintf(buf, sizeof(buf), "%-22s %12.6f\n", "rating nll", r.rating_nll);
  out << buf;
  snprintf(buf, sizeof(buf), "%-22s %12.6f\n", "joint nll", r.joint_nll);
  out << buf;
  snprintf(buf, sizeof(buf), "%-22s %12llu\n", "pairs",
           static_cast<unsigned long long>(r.n_pairs));
  out << buf;
  snprintf(buf, sizeof(buf), "%-22s %12llu\n", "words",
           static_cast<unsigned long long>(r.n_words));
  out << buf;
}

void write_report_kv(const EvalReport &r, std::ostream &out) {
  char buf[256];
  snprintf(buf, sizeof(buf), "rmse=%.17g\n", r.rmse);
  out << buf;
  snprintf(buf, sizeof(buf), "log_ppx=%.17g\n", r.log_ppx);
  out << buf;
  snprintf(buf, sizeof(buf), "rating_nll=%.17g\n", r.rating_nll);
  out << buf;
  snprintf(buf, sizeof(buf), "joint_nll=%.17g\n", r.joint_nll);
  out << buf;
  out << "n_pairs=" << r.n_pairs << "\n";
  out << "n_words=" << r.n_words << "\n";
}

// ---------------------------------------------------------------------------
// Cold start
// ---------------------------------------------------------------------------

BaselinePredictions load_baseline_predictions(const std::string &path,
                                              const RatingsCorpus &corpus) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open baseline file: " + path);
  BaselinePredictions preds;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    size_t p1 = line.find('\t');
    size_t p2 = p1 == std::string::npos ? std::string::npos : line.find('\t', p1 + 1);
    if (p2 == std::string::npos)
      throw DataError("malformed baseline line " + std::to_string(lineno) + " in " + path);
    auto uit = corpus.user_index.find(line.substr(0, p1));
    auto iit = corpus.item_index.find(line.substr(p1 + 1, p2 - p1 - 1));
    if (uit == corpus.user_index.end() || iit == corpus.item_index.end()) continue;
    double v = std::stod(line.substr(p2 + 1));
    preds[(static_cast<uint64_t>(uit->second) << 32) | iit->second] = v;
  }
  return preds;
}

namespace {

constexpr uint64_t kBucketEdges[] = {2, 5, 10, 20};
const char *kBucketLabels[] = {"1-2", "3-5", "6-10", "11-20", "21+"};

size_t bucket_of(uint64_t count) {
  for (size_t i = 0; i < 4; ++i)
    if (count <= kBucketEdges[i]) return i;
  return 4;
}

std::vector<ColdStartBucket> bucketize(const PosteriorSummary &summary,
                                       const BaselinePredictions &baseline,
                                       const RatingsCorpus &train,
                                       const RatingsCorpus &test, bool by_item) {
  std::vector<ColdStartBucket> buckets(5);
  std::vector<double> se_model(5, 0.0), se_base(5, 0.0);
  std::vector<uint64_t> n(5, 0);
  for (const auto &rv : test.reviews) {
    uint64_t train_count = by_item ? train.by_item[rv.item].size()
                                   : train.by_user[rv.user].size();
    size_t b = bucket_of(train_count);
    const auto &p = pair_or_throw(summary, rv.user, rv.item);
    double truth = rv.rating + test.global_mean;
    double pred = test.global_mean + p.mean_prediction;
    auto bit = baseline.find((static_cast<uint64_t>(rv.user) << 32) | rv.item);
    if (bit == baseline.end())
      throw DataError("baseline is missing prediction for a test pair");
    se_model[b] += (truth - pred) * (truth - pred);
    se_base[b] += (truth - bit->second) * (truth - bit->second);
    ++n[b];
  }
  for (size_t b = 0; b < 5; ++b) {
    buckets[b].label = kBucketLabels[b];
    buckets[b].count = n[b];
    if (n[b]) {
      buckets[b].rmse_model = std::sqrt(se_model[b] / static_cast<double>(n[b]));
      buckets[b].rmse_baseline = std::sqrt(se_base[b] / static_cast<double>(n[b]));
      buckets[b].delta = buckets[b].rmse_model - buckets[b].rmse_baseline;
    }
  }
  return buckets;
}

}  // namespace

ColdStartTable cold_start_buckets(const PosteriorSummary &summary,
                                  const BaselinePredictions &baseline,
                                  const RatingsCorpus &train,
                                  const RatingsCorpus &test) {
  ColdStartTable t;
  t.by_item = bucketize(summary, baseline, train, test, true);
  t.by_user = bucketize(summary, baseline, train, test, false);
  return t;
}

void write_cold_start(const ColdStartTable &t, std::ostream &out) {
  char buf[256];
  auto emit = [&](const char *title, const std::vector<ColdStartBucket> &bs) {
    out << title << "\n";
    snprintf(buf, sizeof(buf), "%-8s %10s %12s %14s %12s\n", "bucket", "count",
             "rmse", "rmse_baseline", "delta");
    out << buf;
    for (const auto &b : bs) {
      snprintf(buf, sizeof(buf), "%-8s %10llu %12.6f %14.6f %12.6f\n",
               b.label.c_str(), static_cast<unsigned long long>(b.count),
               b.rmse_model, b.rmse_baseline, b.delta);
      out << buf;
    }
  };
  emit("test pairs bucketed by item training count", t.by_item);
  out << "\n";
  emit("test pairs bucketed by user training count", t.by_user);
}

// ---------------------------------------------------------------------------
// Top-words reports
// ---------------------------------------------------------------------------

namespace {

std::vector<WordScore> top_of_scores(std::vector<WordScore> scores,
                                     const Vocabulary &vocab, size_t top_k) {
  std::sort(scores.begin(), scores.end(), [&](const WordScore &a, const WordScore &b) {
    if (a.rate != b.rate) return a.rate > b.rate;
    return vocab.words[a.word] < vocab.words[b.word];
  });
  if (scores.size() > top_k) scores.resize(top_k);
  return scores;
}

}  // namespace

std::vector<WordScore> top_words(const SparseRateVector &v, const Vocabulary &vocab,
                                 size_t top_k) {
  std::vector<WordScore> scores(vocab.size());
  for (uint32_t x = 0; x < vocab.size(); ++x) scores[x] = {x, v.at(x)};
  return top_of_scores(std::move(scores), vocab, top_k);
}

TopWordsReport top_words_report(const PacoModel &model, size_t top_k,
                                const RatingsCorpus *train) {
  TopWordsReport rep;
  for (uint32_t l = 0; l < model.hyper.text_stencils; ++l) {
    const Stencil &st = model.stencils[l];
    std::vector<uint64_t> block_obs(static_cast<size_t>(st.k_n) * st.k_m, 0);
    if (train)
      for (const auto &rv : train->reviews)
        ++block_obs[st.row_of[rv.user] * st.k_m + st.col_of[rv.item]];
    for (uint32_t a = 0; a < st.k_n; ++a) {
      for (uint32_t b = 0; b < st.k_m; ++b) {
        BlockReport br;
        br.stencil = l;
        br.row_cluster = a;
        br.col_cluster = b;
        br.block_mean = st.mean(a, b);
        br.n_observations = block_obs[a * st.k_m + b];
        br.words = top_words(model.lms.block[l][a * st.k_m + b], model.vocab, top_k);
        rep.blocks.push_back(std::move(br));
      }
    }
    for (uint32_t b = 0; b < st.k_m; ++b) {
      ItemClusterReport cr;
      cr.stencil = l;
      cr.cluster = b;
      for (uint32_t m = 0; m < model.n_items; ++m)
        if (st.col_of[m] == b) cr.members.push_back(m);
      if (train) {
        std::stable_sort(cr.members.begin(), cr.members.end(),
                         [&](uint32_t x, uint32_t y) {
                           return train->by_item[x].size() > train->by_item[y].size();
                         });
      }
      cr.words = top_words(model.lms.item_cluster[l][b], model.vocab, top_k);
      rep.item_clusters.push_back(std::move(cr));
    }
  }
  rep.item_words.resize(model.n_items);
  for (uint32_t m = 0; m < model.n_items; ++m)
    rep.item_words[m] = top_words(model.lms.item[m], model.vocab, top_k);
  return rep;
}

namespace {
void emit_words(const std::vector<WordScore> &ws, const Vocabulary &vocab,
                std::ostream &out) {
  for (size_t i = 0; i < ws.size(); ++i) {
    if (i) out << ", ";
    out << vocab.words[ws[i].word];
  }
  out << "\n";
}
}  // namespace

void write_block_report(const TopWordsReport &r, const PacoModel &model,
                        std::ostream &out) {
  out << "block language models (per text stencil)\n";
  for (const auto &br : r.blocks) {
    char buf[160];
    snprintf(buf, sizeof(buf),
             "stencil %u block (%u,%u)  mean %+0.4f  train obs %llu\n  ", br.stencil,
             br.row_cluster, br.col_cluster, br.block_mean,
             static_cast<unsigned long long>(br.n_observations));
    out << buf;
    emit_words(br.words, model.vocab, out);
  }
}

void write_item_report(const TopWordsReport &r, const PacoModel &model,
                       size_t max_items, std::ostream &out) {
  out << "item-specific words\n";
  size_t n = std::min(max_items, r.item_words.size());
  for (size_t m = 0; m < n; ++m) {
    out << "item " << m << "\n  ";
    emit_words(r.item_words[m], model.vocab, out);
  }
}

void write_item_cluster_report(const TopWordsReport &r, const PacoModel &model,
                               std::ostream &out) {
  out << "item clusters and cluster words\n";
  for (const auto &cr : r.item_clusters) {
    out << "stencil " << cr.stencil << " item-cluster " << cr.cluster << " members:";
    size_t shown = std::min<size_t>(cr.members.size(), 8);
    for (size_t i = 0; i < shown; ++i) out << " " << cr.members[i];
    if (cr.members.size() > shown) out << " ... (" << cr.members.size() << " total)";
    out << "\n  ";
    emit_words(cr.words, model.vocab, out);
  }
}

std::vector<WordScore> top_pair_words(const PosteriorSummary &summary,
                                      const Vocabulary &vocab, uint32_t user,
                                      uint32_t item, size_t top_k) {
  const auto *p = summary.find(user, item);
  if (!p || p->mean_rate_dense.empty())
    throw DataError("summary holds no full rate vector for pair (" +
                    std::to_string(user) + "," + std::to_string(item) +
                    "); add it to inspect_pairs before training");
  std::vector<WordScore> scores(p->mean_rate_dense.size());
  for (uint32_t x = 0; x < p->mean_rate_dense.size(); ++x)
    scores[x] = {x, p->mean_rate_dense[x]};
  return top_of_scores(std::move(scores), vocab, top_k);
}

}  // namespace paco
