#include "paco/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <random>

#include "paco/errors.hpp"
#include "paco/io_util.hpp"
#include "paco/parallel.hpp"

namespace paco {

namespace {

// Substream phase tags. Every random draw in the sampler comes from a
// stream keyed by (seed, phase, iteration, ...entity), so reruns, resumed
// runs, and any thread count all see the same draws.
enum Phase : uint64_t {
  kPhaseThin = 1,
  kPhaseMu = 2,
  kPhaseRatings = 3,
  kPhaseAssign = 4,
  kPhaseProposal = 5,
  kPhaseSigma = 6,
  kPhaseSigmaL = 7,
  kPhaseKmeans = 8,
  kPhaseSynthetic = 9,
};

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double draw_gamma(double shape, double rate, Rng &rng) {
  std::gamma_distribution<double> g(shape, 1.0 / rate);
  return g(rng);
}

double draw_normal(double mean, double var, Rng &rng) {
  std::normal_distribution<double> n(mean, std::sqrt(var));
  return n(rng);
}

// Inverse-gamma(shape, scale) via the reciprocal of a Gamma draw.
double draw_inverse_gamma(double shape, double scale, Rng &rng) {
  double g = draw_gamma(shape, scale, rng);
  return std::max(1.0 / std::max(g, 1e-300), 1e-12);
}

const SparseRateVector &role_vector(const PacoModel &m, uint32_t role,
                                    uint32_t user, uint32_t item) {
  if (role == 0) return m.lms.background;
  if (role == 1) return m.lms.item[item];
  uint32_t l = (role - 2) / 3;
  uint32_t kind = (role - 2) % 3;
  const Stencil &st = m.stencils[l];
  uint32_t a = st.row_of[user], b = st.col_of[item];
  switch (kind) {
    case 0: return m.lms.block[l][a * st.k_m + b];
    case 1: return m.lms.item_cluster[l][b];
    default: return m.lms.user_cluster[l][a];
  }
}

double rate_at(const PacoModel &m, uint32_t user, uint32_t item, uint32_t word) {
  double s = 0.0;
  uint32_t roles = m.components_per_review();
  for (uint32_t j = 0; j < roles; ++j) s += role_vector(m, j, user, item).at(word);
  return s;
}

}  // namespace

// ---------------------------------------------------------------------------
// Thinning
// ---------------------------------------------------------------------------

bool check_count_conservation(const CountAllocation &alloc, const RatingsCorpus &corpus) {
  if (alloc.counts.size() != corpus.token_entries() * alloc.roles) return false;
  for (size_t e = 0; e < corpus.token_entries(); ++e) {
    uint64_t s = 0;
    for (uint32_t j = 0; j < alloc.roles; ++j) s += alloc.at(e, j);
    if (s != corpus.word_counts[e]) return false;
  }
  return true;
}

void thin_review(const PacoModel &model, const RatingsCorpus &train,
                 uint32_t review, CountAllocation &alloc, Rng &rng) {
  const Review &rv = train.reviews[review];
  const uint32_t roles = alloc.roles;
  const SparseRateVector *comps[2 + 3 * 16];
  PACO_DCHECK(roles <= 2 + 3 * 16, "too many text stencils");
  for (uint32_t j = 0; j < roles; ++j)
    comps[j] = &role_vector(model, j, rv.user, rv.item);

  double rates[2 + 3 * 16];
  for (uint32_t e = rv.word_begin; e < rv.word_end; ++e) {
    const uint32_t x = train.word_ids[e];
    const uint32_t n = train.word_counts[e];
    double lambda = 0.0;
    for (uint32_t j = 0; j < roles; ++j) {
      rates[j] = comps[j]->at(x);
      lambda += rates[j];
    }
    // sequential binomial split of the multinomial
    uint32_t remaining = n;
    double rem_rate = lambda;
    for (uint32_t j = 0; j + 1 < roles; ++j) {
      uint32_t k = 0;
      if (remaining > 0) {
        double p = rates[j] / rem_rate;
        if (p >= 1.0) {
          k = remaining;
        } else if (p > 0.0) {
          std::binomial_distribution<uint32_t> bin(remaining, p);
          k = bin(rng);
        }
      }
      alloc.at(e, j) = k;
      remaining -= k;
      rem_rate -= rates[j];
      if (rem_rate <= 0.0) rem_rate = kRateFloor;
    }
    alloc.at(e, roles - 1) = remaining;
  }
}

void thin_counts(const PacoModel &model, const RatingsCorpus &train,
                 CountAllocation &alloc, uint64_t iteration, uint64_t pass,
                 int threads) {
  const uint64_t seed = model.hyper.seed;
  parallel_for(train.review_count(), threads, [&](size_t lo, size_t hi) {
    for (size_t r = lo; r < hi; ++r) {
      Rng rng = substream(seed, {kPhaseThin, iteration, pass, r});
      thin_review(model, train, static_cast<uint32_t>(r), alloc, rng);
    }
  });
}

// ---------------------------------------------------------------------------
// Gamma-posterior rate updates
// ---------------------------------------------------------------------------

SparseRateVector sample_mu(const ComponentCredits &credits, double alpha,
                           double beta, Rng &rng) {
  SparseRateVector v;
  std::vector<std::pair<uint32_t, uint64_t>> sorted(credits.word_sums.begin(),
                                                    credits.word_sums.end());
  std::sort(sorted.begin(), sorted.end());
  const double rate = beta + static_cast<double>(credits.n_reviews);
  for (const auto &ws : sorted)
    v.set(ws.first, draw_gamma(alpha + static_cast<double>(ws.second), rate, rng));
  // One shared draw from the untouched-word posterior Gamma(alpha, rate)
  // serves as the default for every word never credited to this component.
  v.set_default_rate(draw_gamma(alpha, rate, rng));
  return v;
}

namespace {

ComponentCredits collect_background_credits(const CountAllocation &alloc,
                                            const RatingsCorpus &train) {
  ComponentCredits c;
  c.n_reviews = train.review_count();
  for (size_t e = 0; e < train.token_entries(); ++e) {
    uint32_t n = alloc.at(e, 0);
    if (n) c.word_sums[train.word_ids[e]] += n;
  }
  return c;
}

std::vector<ComponentCredits> collect_item_credits(const CountAllocation &alloc,
                                                   const RatingsCorpus &train) {
  std::vector<ComponentCredits> out(train.n_items);
  for (uint32_t m = 0; m < train.n_items; ++m)
    out[m].n_reviews = train.by_item[m].size();
  for (const auto &rv : train.reviews) {
    auto &c = out[rv.item];
    for (uint32_t e = rv.word_begin; e < rv.word_end; ++e) {
      uint32_t n = alloc.at(e, 1);
      if (n) c.word_sums[train.word_ids[e]] += n;
    }
  }
  return out;
}

struct StencilCredits {
  std::vector<ComponentCredits> block;  // [a*k_m+b]
  std::vector<ComponentCredits> ucl;    // [a]
  std::vector<ComponentCredits> icl;    // [b]
};

StencilCredits collect_stencil_credits(const PacoModel &model, uint32_t l,
                                       const CountAllocation &alloc,
                                       const RatingsCorpus &train) {
  const Stencil &st = model.stencils[l];
  StencilCredits sc;
  sc.block.resize(static_cast<size_t>(st.k_n) * st.k_m);
  sc.ucl.resize(st.k_n);
  sc.icl.resize(st.k_m);
  const uint32_t role_block = 2 + 3 * l, role_icl = 3 + 3 * l, role_ucl = 4 + 3 * l;
  for (const auto &rv : train.reviews) {
    uint32_t a = st.row_of[rv.user], b = st.col_of[rv.item];
    auto &cb = sc.block[a * st.k_m + b];
    auto &cu = sc.ucl[a];
    auto &ci = sc.icl[b];
    ++cb.n_reviews;
    ++cu.n_reviews;
    ++ci.n_reviews;
    for (uint32_t e = rv.word_begin; e < rv.word_end; ++e) {
      uint32_t x = train.word_ids[e];
      if (uint32_t n = alloc.at(e, role_block)) cb.word_sums[x] += n;
      if (uint32_t n = alloc.at(e, role_icl)) ci.word_sums[x] += n;
      if (uint32_t n = alloc.at(e, role_ucl)) cu.word_sums[x] += n;
    }
  }
  return sc;
}

}  // namespace

// ---------------------------------------------------------------------------
// Residuals
// ---------------------------------------------------------------------------

void ResidualState::rebuild(const PacoModel &model, const RatingsCorpus &train) {
  prediction.assign(train.review_count(), 0.0);
  for (size_t r = 0; r < train.review_count(); ++r) {
    const Review &rv = train.reviews[r];
    double s = 0.0;
    for (const auto &st : model.stencils) s += st.value(rv.user, rv.item);
    prediction[r] = s;
  }
}

double ResidualState::residual_excluding(const PacoModel &model,
                                         const RatingsCorpus &train,
                                         uint32_t review, uint32_t exclude) const {
  const Review &rv = train.reviews[review];
  const Stencil &st = model.stencils[exclude];
  return rv.rating - (prediction[review] - st.value(rv.user, rv.item));
}

// ---------------------------------------------------------------------------
// Stencil rating update
// ---------------------------------------------------------------------------

void update_stencil_ratings(PacoModel &model, uint32_t stencil,
                            const RatingsCorpus &train, ResidualState &resid,
                            Rng &rng) {
  Stencil &st = model.stencils[stencil];
  const size_t nblocks = static_cast<size_t>(st.k_n) * st.k_m;
  std::vector<double> sum(nblocks, 0.0);
  std::vector<uint64_t> cnt(nblocks, 0);
  for (uint32_t r = 0; r < train.review_count(); ++r) {
    const Review &rv = train.reviews[r];
    size_t ab = static_cast<size_t>(st.row_of[rv.user]) * st.k_m + st.col_of[rv.item];
    sum[ab] += resid.residual_excluding(model, train, r, stencil);
    ++cnt[ab];
  }
  const double sl2 = model.sigma_l2[stencil];
  const double s2 = model.sigma2;
  std::vector<double> old = st.block_means;
  for (size_t ab = 0; ab < nblocks; ++ab) {
    if (cnt[ab] == 0) {
      st.block_means[ab] = draw_normal(0.0, sl2, rng);
    } else {
      double v = 1.0 / (1.0 / sl2 + static_cast<double>(cnt[ab]) / s2);
      double mean = v * sum[ab] / s2;
      st.block_means[ab] = draw_normal(mean, v, rng);
    }
  }
  for (uint32_t r = 0; r < train.review_count(); ++r) {
    const Review &rv = train.reviews[r];
    size_t ab = static_cast<size_t>(st.row_of[rv.user]) * st.k_m + st.col_of[rv.item];
    resid.prediction[r] += st.block_means[ab] - old[ab];
  }
}

// ---------------------------------------------------------------------------
// K-means initialization
// ---------------------------------------------------------------------------

namespace {

struct SparsePoint {
  std::vector<std::pair<uint32_t, double>> coords;
  double norm2 = 0.0;
};

double point_centroid_dist2(const SparsePoint &p, const std::vector<double> &c,
                            double cnorm2) {
  double dot = 0.0;
  for (const auto &iv : p.coords) dot += iv.second * c[iv.first];
  return std::max(0.0, p.norm2 - 2.0 * dot + cnorm2);
}

std::vector<uint32_t> kmeans(const std::vector<SparsePoint> &pts, uint32_t dim,
                             uint32_t k, Rng &rng, int max_iters = 50) {
  const size_t n = pts.size();
  std::vector<uint32_t> assign(n, 0);
  if (n == 0) return assign;
  if (k > n) k = static_cast<uint32_t>(n);
  if (k == 0) k = 1;

  // k-means++ seeding
  std::vector<std::vector<double>> cent(k, std::vector<double>(dim, 0.0));
  std::vector<double> cnorm(k, 0.0);
  auto set_centroid = [&](uint32_t c, const SparsePoint &p) {
    std::fill(cent[c].begin(), cent[c].end(), 0.0);
    for (const auto &iv : p.coords) cent[c][iv.first] = iv.second;
    cnorm[c] = p.norm2;
  };
  {
    std::uniform_int_distribution<size_t> pick(0, n - 1);
    set_centroid(0, pts[pick(rng)]);
    std::vector<double> mind(n, std::numeric_limits<double>::max());
    for (uint32_t c = 1; c < k; ++c) {
      double total = 0.0;
      for (size_t i = 0; i < n; ++i) {
        double d = point_centroid_dist2(pts[i], cent[c - 1], cnorm[c - 1]);
        if (d < mind[i]) mind[i] = d;
        total += mind[i];
      }
      size_t chosen = 0;
      if (total > 0.0) {
        double u = std::uniform_real_distribution<double>(0.0, total)(rng);
        double acc = 0.0;
        for (size_t i = 0; i < n; ++i) {
          acc += mind[i];
          if (u < acc) {
            chosen = i;
            break;
          }
          chosen = i;
        }
      } else {
        chosen = std::uniform_int_distribution<size_t>(0, n - 1)(rng);
      }
      set_centroid(c, pts[chosen]);
    }
  }

  // Lloyd iterations; ties go to the lowest cluster index.
  std::vector<double> sums;
  std::vector<uint64_t> counts(k, 0);
  for (int it = 0; it < max_iters; ++it) {
    bool changed = it == 0;
    for (size_t i = 0; i < n; ++i) {
      uint32_t best = 0;
      double bestd = std::numeric_limits<double>::max();
      for (uint32_t c = 0; c < k; ++c) {
        double d = point_centroid_dist2(pts[i], cent[c], cnorm[c]);
        if (d < bestd - 1e-15) {
          bestd = d;
          best = c;
        }
      }
      if (assign[i] != best) {
        assign[i] = best;
        changed = true;
      }
    }
    if (!changed) break;
    sums.assign(static_cast<size_t>(k) * dim, 0.0);
    std::fill(counts.begin(), counts.end(), 0);
    for (size_t i = 0; i < n; ++i) {
      ++counts[assign[i]];
      for (const auto &iv : pts[i].coords)
        sums[static_cast<size_t>(assign[i]) * dim + iv.first] += iv.second;
    }
    for (uint32_t c = 0; c < k; ++c) {
      if (counts[c] == 0) continue;  // empty clusters keep their centroid
      double norm = 0.0;
      for (uint32_t j = 0; j < dim; ++j) {
        double v = sums[static_cast<size_t>(c) * dim + j] / static_cast<double>(counts[c]);
        cent[c][j] = v;
        norm += v * v;
      }
      cnorm[c] = norm;
    }
  }
  return assign;
}

// Renumbers labels to a dense range, preserving ascending label order.
uint32_t compact_labels(std::vector<uint32_t> &labels) {
  std::vector<uint32_t> used(labels.begin(), labels.end());
  std::sort(used.begin(), used.end());
  used.erase(std::unique(used.begin(), used.end()), used.end());
  std::unordered_map<uint32_t, uint32_t> remap;
  for (uint32_t i = 0; i < used.size(); ++i) remap[used[i]] = i;
  for (auto &l : labels) l = remap[l];
  return static_cast<uint32_t>(used.size());
}

}  // namespace

PacoModel init_kmeans(const RatingsCorpus &train, const Hyperparameters &hyper) {
  hyper.validate();
  if (train.reviews.empty()) throw DataError("cannot initialize from an empty corpus");

  PacoModel model;
  model.hyper = hyper;
  model.n_users = train.n_users;
  model.n_items = train.n_items;
  model.vocab = train.vocab;
  model.global_mean = train.global_mean;
  model.sigma2 = hyper.sigma2;
  model.sigma_l2.assign(hyper.stencils, hyper.sigma_l2);
  model.rating_lo = train.raw_lo;
  model.rating_hi = train.raw_hi;

  std::vector<double> res(train.review_count());
  for (size_t r = 0; r < res.size(); ++r) res[r] = train.reviews[r].rating;

  const uint32_t k0 = std::min<uint32_t>(hyper.k_max, 8);
  model.stencils.resize(hyper.stencils);
  for (uint32_t l = 0; l < hyper.stencils; ++l) {
    Stencil &st = model.stencils[l];

    std::vector<SparsePoint> upts(train.n_users), ipts(train.n_items);
    for (uint32_t u = 0; u < train.n_users; ++u) {
      for (uint32_t r : train.by_user[u]) {
        upts[u].coords.emplace_back(train.reviews[r].item, res[r]);
        upts[u].norm2 += res[r] * res[r];
      }
    }
    for (uint32_t m = 0; m < train.n_items; ++m) {
      for (uint32_t r : train.by_item[m]) {
        ipts[m].coords.emplace_back(train.reviews[r].user, res[r]);
        ipts[m].norm2 += res[r] * res[r];
      }
    }
    Rng urng = substream(hyper.seed, {kPhaseKmeans, l, 0});
    Rng irng = substream(hyper.seed, {kPhaseKmeans, l, 1});
    st.row_of = kmeans(upts, static_cast<uint32_t>(train.n_items), k0, urng);
    st.col_of = kmeans(ipts, static_cast<uint32_t>(train.n_users), k0, irng);
    st.k_n = compact_labels(st.row_of);
    st.k_m = compact_labels(st.col_of);

    // block means of the residual
    const size_t nb = static_cast<size_t>(st.k_n) * st.k_m;
    std::vector<double> sum(nb, 0.0);
    std::vector<uint64_t> cnt(nb, 0);
    for (uint32_t r = 0; r < train.review_count(); ++r) {
      const Review &rv = train.reviews[r];
      size_t ab = static_cast<size_t>(st.row_of[rv.user]) * st.k_m + st.col_of[rv.item];
      sum[ab] += res[r];
      ++cnt[ab];
    }
    st.block_means.assign(nb, 0.0);
    for (size_t ab = 0; ab < nb; ++ab)
      if (cnt[ab]) st.block_means[ab] = sum[ab] / static_cast<double>(cnt[ab]);

    for (uint32_t r = 0; r < train.review_count(); ++r) {
      const Review &rv = train.reviews[r];
      res[r] -= st.value(rv.user, rv.item);
    }
  }

  // All rate vectors start as the all-ones vector.
  model.lms.background = SparseRateVector(1.0);
  model.lms.item.assign(train.n_items, SparseRateVector(1.0));
  model.lms.block.resize(hyper.text_stencils);
  model.lms.user_cluster.resize(hyper.text_stencils);
  model.lms.item_cluster.resize(hyper.text_stencils);
  for (uint32_t l = 0; l < hyper.text_stencils; ++l) {
    const Stencil &st = model.stencils[l];
    model.lms.block[l].assign(static_cast<size_t>(st.k_n) * st.k_m, SparseRateVector(1.0));
    model.lms.user_cluster[l].assign(st.k_n, SparseRateVector(1.0));
    model.lms.item_cluster[l].assign(st.k_m, SparseRateVector(1.0));
  }
  return model;
}

// ---------------------------------------------------------------------------
// Assignment caches
// ---------------------------------------------------------------------------

namespace {

AssignmentCaches::LogTable make_log_table(const SparseRateVector &v) {
  AssignmentCaches::LogTable t;
  t.log_default = std::log(v.default_rate());
  t.entries.reserve(v.entries().size());
  for (const auto &kv : v.entries()) t.entries.emplace(kv.first, std::log(kv.second));
  return t;
}

}  // namespace

AssignmentCaches build_assignment_caches(const PacoModel &model, uint32_t stencil,
                                         bool user_side,
                                         const CountAllocation &alloc,
                                         const RatingsCorpus &train,
                                         const ResidualState &resid) {
  const Stencil &st = model.stencils[stencil];
  const bool has_text = stencil < model.hyper.text_stencils;
  const size_t W = model.vocab_size();

  AssignmentCaches c;
  c.stencil = stencil;
  c.user_side = user_side;
  c.k_cand = user_side ? st.k_n : st.k_m;
  c.k_other = user_side ? st.k_m : st.k_n;

  auto block_vec = [&](uint32_t cand, uint32_t other) -> const SparseRateVector & {
    uint32_t a = user_side ? cand : other;
    uint32_t b = user_side ? other : cand;
    return model.lms.block[stencil][a * st.k_m + b];
  };

  if (has_text) {
    c.tilde_block.resize(static_cast<size_t>(c.k_cand) * c.k_other);
    c.log_block.resize(c.tilde_block.size());
    c.tilde_own.resize(c.k_cand);
    c.log_own.resize(c.k_cand);
    for (uint32_t a = 0; a < c.k_cand; ++a) {
      for (uint32_t b = 0; b < c.k_other; ++b) {
        const SparseRateVector &v = block_vec(a, b);
        c.tilde_block[a * c.k_other + b] = v.total(W);
        c.log_block[a * c.k_other + b] = make_log_table(v);
      }
      const SparseRateVector &own = user_side ? model.lms.user_cluster[stencil][a]
                                              : model.lms.item_cluster[stencil][a];
      c.tilde_own[a] = own.total(W);
      c.log_own[a] = make_log_table(own);
    }
  }

  const size_t n_entities = user_side ? train.n_users : train.n_items;
  c.stats.resize(n_entities);
  const uint32_t role_block = 2 + 3 * stencil;
  const uint32_t role_own = user_side ? 4 + 3 * stencil : 3 + 3 * stencil;

  for (size_t ent = 0; ent < n_entities; ++ent) {
    auto &s = c.stats[ent];
    const auto &review_ids = user_side ? train.by_user[ent] : train.by_item[ent];
    std::map<uint32_t, uint64_t> own_raw;
    std::map<uint32_t, double> own_w;
    std::vector<std::map<uint32_t, uint64_t>> grp_raw;
    std::vector<std::map<uint32_t, double>> grp_w;
    for (uint32_t r : review_ids) {
      const Review &rv = train.reviews[r];
      uint32_t g = user_side ? st.col_of[rv.item] : st.row_of[rv.user];
      size_t slot = 0;
      for (; slot < s.groups.size(); ++slot)
        if (s.groups[slot] == g) break;
      if (slot == s.groups.size()) {
        s.groups.push_back(g);
        s.eta.push_back(0);
        s.eta_w.push_back(0.0);
        s.resid_sum.push_back(0.0);
        grp_raw.emplace_back();
        grp_w.emplace_back();
      }
      uint64_t len = train.review_word_total(r);
      double w = len > 0 ? 1.0 / static_cast<double>(len) : 0.0;
      ++s.eta[slot];
      s.eta_w[slot] += w;
      s.total_weight += w;
      s.resid_sum[slot] += resid.residual_excluding(model, train, r, stencil);
      if (has_text) {
        for (uint32_t e = rv.word_begin; e < rv.word_end; ++e) {
          uint32_t x = train.word_ids[e];
          if (uint32_t n = alloc.at(e, role_block)) {
            grp_raw[slot][x] += n;
            grp_w[slot][x] += w * static_cast<double>(n);
          }
          if (uint32_t n = alloc.at(e, role_own)) {
            own_raw[x] += n;
            own_w[x] += w * static_cast<double>(n);
          }
        }
      }
    }
    s.hat_eta.resize(s.groups.size());
    s.hat_eta_w.resize(s.groups.size());
    for (size_t g = 0; g < s.groups.size(); ++g) {
      s.hat_eta[g].assign(grp_raw[g].begin(), grp_raw[g].end());
      s.hat_eta_w[g].assign(grp_w[g].begin(), grp_w[g].end());
    }
    s.hat_eta_own.assign(own_raw.begin(), own_raw.end());
    s.hat_eta_own_w.assign(own_w.begin(), own_w.end());
  }

  c.occupancy.assign(c.k_cand, 0);
  const auto &labels = user_side ? st.row_of : st.col_of;
  for (uint32_t lab : labels) ++c.occupancy[lab];
  return c;
}

void verify_assignment_caches(const AssignmentCaches &caches, const PacoModel &model,
                              const CountAllocation &alloc, const RatingsCorpus &train,
                              const ResidualState &resid, double tol) {
  const Stencil &st = model.stencils[caches.stencil];
  const bool has_text = caches.stencil < model.hyper.text_stencils;
  const size_t W = model.vocab_size();

  // tilde sums recomputed word-by-word, the slow way
  if (has_text) {
    for (uint32_t a = 0; a < caches.k_cand; ++a) {
      for (uint32_t b = 0; b < caches.k_other; ++b) {
        uint32_t ua = caches.user_side ? a : b;
        uint32_t ib = caches.user_side ? b : a;
        const SparseRateVector &v = model.lms.block[caches.stencil][ua * st.k_m + ib];
        double s = 0.0;
        for (uint32_t x = 0; x < W; ++x) s += v.at(x);
        PACO_CHECK(std::abs(s - caches.tilde_block[a * caches.k_other + b]) <=
                       tol * std::max(1.0, std::abs(s)),
                   "tilde_block mismatch");
      }
      const SparseRateVector &own = caches.user_side
                                        ? model.lms.user_cluster[caches.stencil][a]
                                        : model.lms.item_cluster[caches.stencil][a];
      double s = 0.0;
      for (uint32_t x = 0; x < W; ++x) s += own.at(x);
      PACO_CHECK(std::abs(s - caches.tilde_own[a]) <= tol * std::max(1.0, std::abs(s)),
                 "tilde_own mismatch");
    }
  }

  const size_t n_entities = caches.user_side ? train.n_users : train.n_items;
  const uint32_t role_block = 2 + 3 * caches.stencil;
  const uint32_t role_own = caches.user_side ? 4 + 3 * caches.stencil : 3 + 3 * caches.stencil;
  for (size_t ent = 0; ent < n_entities; ++ent) {
    const auto &s = caches.stats[ent];
    const auto &review_ids = caches.user_side ? train.by_user[ent] : train.by_item[ent];
    // eta per group, recomputed directly
    for (size_t g = 0; g < s.groups.size(); ++g) {
      uint32_t want = s.groups[g];
      uint32_t n = 0;
      double rsum = 0.0;
      uint64_t raw = 0, raw_cache = 0;
      for (uint32_t r : review_ids) {
        const Review &rv = train.reviews[r];
        uint32_t grp = caches.user_side ? st.col_of[rv.item] : st.row_of[rv.user];
        if (grp != want) continue;
        ++n;
        rsum += resid.residual_excluding(model, train, r, caches.stencil);
        if (has_text)
          for (uint32_t e = rv.word_begin; e < rv.word_end; ++e)
            raw += alloc.at(e, role_block);
      }
      for (const auto &kv : s.hat_eta[g]) raw_cache += kv.second;
      PACO_CHECK(n == s.eta[g], "eta mismatch");
      PACO_CHECK(raw == raw_cache, "hat_eta mismatch");
      PACO_CHECK(std::abs(rsum - s.resid_sum[g]) <= tol * std::max(1.0, std::abs(rsum)),
                 "resid_sum mismatch");
    }
    uint64_t own_raw = 0, own_cache = 0;
    for (uint32_t r : review_ids) {
      const Review &rv = train.reviews[r];
      if (has_text)
        for (uint32_t e = rv.word_begin; e < rv.word_end; ++e)
          own_raw += alloc.at(e, role_own);
    }
    for (const auto &kv : s.hat_eta_own) own_cache += kv.second;
    PACO_CHECK(own_raw == own_cache, "hat_eta_own mismatch");
  }
}

double condensed_text_score(const AssignmentCaches &caches, uint32_t entity,
                            uint32_t a) {
  if (caches.tilde_own.empty()) return 0.0;  // non-text stencil
  const auto &s = caches.stats[entity];
  double score = 0.0;
  for (size_t g = 0; g < s.groups.size(); ++g) {
    uint32_t b = s.groups[g];
    const auto &lt = caches.log_block[a * caches.k_other + b];
    score -= s.eta_w[g] * caches.tilde_block[a * caches.k_other + b];
    for (const auto &xw : s.hat_eta_w[g]) score += xw.second * lt.at(xw.first);
  }
  score -= s.total_weight * caches.tilde_own[a];
  const auto &lo = caches.log_own[a];
  for (const auto &xw : s.hat_eta_own_w) score += xw.second * lo.at(xw.first);
  return score;
}

// ---------------------------------------------------------------------------
// Assignment sampling
// ---------------------------------------------------------------------------

NewClusterProposal draw_new_cluster_proposal(const PacoModel &model, uint32_t stencil,
                                             bool user_side, Rng &rng) {
  const Stencil &st = model.stencils[stencil];
  const uint32_t k_cand = user_side ? st.k_n : st.k_m;
  const uint32_t k_other = user_side ? st.k_m : st.k_n;
  NewClusterProposal p;
  if (k_cand >= model.hyper.k_max) return p;  // cap reached: no new-cluster move
  p.active = true;
  p.block_means.resize(k_other);
  for (auto &t : p.block_means) t = draw_normal(0.0, model.sigma_l2[stencil], rng);
  if (stencil < model.hyper.text_stencils) {
    const double a_blk = model.hyper.alpha[static_cast<size_t>(LmClass::block)];
    const double b_blk = model.hyper.beta[static_cast<size_t>(LmClass::block)];
    p.mu_block_defaults.resize(k_other);
    for (auto &d : p.mu_block_defaults) d = std::max(draw_gamma(a_blk, b_blk, rng), kRateFloor);
    const size_t own_cls = static_cast<size_t>(user_side ? LmClass::user_cluster
                                                         : LmClass::item_cluster);
    p.mu_own_default =
        std::max(draw_gamma(model.hyper.alpha[own_cls], model.hyper.beta[own_cls], rng),
                 kRateFloor);
  }
  return p;
}

namespace {

double rating_score(const AssignmentCaches &caches, const Stencil &st, double sigma2,
                    uint32_t entity, uint32_t a) {
  const auto &s = caches.stats[entity];
  double score = 0.0;
  for (size_t g = 0; g < s.groups.size(); ++g) {
    uint32_t b = s.groups[g];
    double t = caches.user_side ? st.mean(a, b) : st.mean(b, a);
    score += (2.0 * t * s.resid_sum[g] - t * t * static_cast<double>(s.eta[g])) /
             (2.0 * sigma2);
  }
  return score;
}

double rating_score_new(const AssignmentCaches &caches, const NewClusterProposal &p,
                        double sigma2, uint32_t entity) {
  const auto &s = caches.stats[entity];
  double score = 0.0;
  for (size_t g = 0; g < s.groups.size(); ++g) {
    double t = p.block_means[s.groups[g]];
    score += (2.0 * t * s.resid_sum[g] - t * t * static_cast<double>(s.eta[g])) /
             (2.0 * sigma2);
  }
  return score;
}

double text_score_new(const AssignmentCaches &caches, const NewClusterProposal &p,
                      size_t vocab_size, uint32_t entity) {
  if (p.mu_block_defaults.empty()) return 0.0;
  const auto &s = caches.stats[entity];
  const double W = static_cast<double>(vocab_size);
  double score = 0.0;
  for (size_t g = 0; g < s.groups.size(); ++g) {
    double def = p.mu_block_defaults[s.groups[g]];
    double logdef = std::log(def);
    score -= s.eta_w[g] * def * W;
    for (const auto &xw : s.hat_eta_w[g]) score += xw.second * logdef;
  }
  double own_log = std::log(p.mu_own_default);
  score -= s.total_weight * p.mu_own_default * W;
  for (const auto &xw : s.hat_eta_own_w) score += xw.second * own_log;
  return score;
}

}  // namespace

AssignmentDecision sample_assignment(const PacoModel &model, uint32_t stencil,
                                     bool user_side, uint32_t entity,
                                     const AssignmentCaches &caches,
                                     const NewClusterProposal &proposal, Rng &rng) {
  const Stencil &st = model.stencils[stencil];
  const uint32_t k = caches.k_cand;
  const uint32_t cur = user_side ? st.row_of[entity] : st.col_of[entity];
  const double delta = model.hyper.crp_delta;

  const bool singleton = caches.occupancy[cur] <= 1;
  const bool try_new = proposal.active && !singleton;

  std::vector<double> scores(k + (try_new ? 1 : 0), kNegInf);
  for (uint32_t a = 0; a < k; ++a) {
    uint32_t occ = caches.occupancy[a] - (a == cur ? 1 : 0);
    double lw;
    if (occ > 0)
      lw = std::log(static_cast<double>(occ));
    else if (a == cur)
      lw = std::log(delta);  // own singleton doubles as the "new" table
    else
      continue;
    scores[a] = lw + rating_score(caches, st, model.sigma2, entity, a) +
                condensed_text_score(caches, entity, a);
  }
  if (try_new) {
    scores[k] = std::log(delta) +
                rating_score_new(caches, proposal, model.sigma2, entity) +
                text_score_new(caches, proposal, model.vocab_size(), entity);
  }

  double mx = kNegInf;
  for (double s : scores) mx = std::max(mx, s);
  PACO_CHECK(std::isfinite(mx), "assignment posterior is degenerate");
  double total = 0.0;
  for (double &s : scores) {
    s = std::isfinite(s) ? std::exp(s - mx) : 0.0;
    total += s;
  }
  double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng) * total;
  uint32_t pick = 0;
  double acc = 0.0;
  for (uint32_t i = 0; i < scores.size(); ++i) {
    acc += scores[i];
    if (u < acc) {
      pick = i;
      break;
    }
    pick = i;
  }
  AssignmentDecision d;
  d.is_new = pick == k;
  d.cluster = d.is_new ? k : pick;
  return d;
}

namespace {

// Adds the proposal as a concrete cluster on the sampled side; returns its
// index.
uint32_t instantiate_new_cluster(PacoModel &model, uint32_t stencil, bool user_side,
                                 const NewClusterProposal &proposal) {
  Stencil &st = model.stencils[stencil];
  const bool has_text = stencil < model.hyper.text_stencils;
  uint32_t idx;
  if (user_side) {
    idx = st.k_n;
    st.block_means.insert(st.block_means.end(), proposal.block_means.begin(),
                          proposal.block_means.end());
    st.k_n += 1;
    if (has_text) {
      auto &blocks = model.lms.block[stencil];
      for (uint32_t b = 0; b < st.k_m; ++b)
        blocks.emplace_back(proposal.mu_block_defaults[b]);
      model.lms.user_cluster[stencil].emplace_back(proposal.mu_own_default);
    }
  } else {
    idx = st.k_m;
    std::vector<double> means(static_cast<size_t>(st.k_n) * (st.k_m + 1));
    for (uint32_t a = 0; a < st.k_n; ++a) {
      for (uint32_t b = 0; b < st.k_m; ++b) means[a * (st.k_m + 1) + b] = st.mean(a, b);
      means[a * (st.k_m + 1) + st.k_m] = proposal.block_means[a];
    }
    st.block_means = std::move(means);
    if (has_text) {
      auto &blocks = model.lms.block[stencil];
      std::vector<SparseRateVector> nb(static_cast<size_t>(st.k_n) * (st.k_m + 1));
      for (uint32_t a = 0; a < st.k_n; ++a) {
        for (uint32_t b = 0; b < st.k_m; ++b)
          nb[a * (st.k_m + 1) + b] = std::move(blocks[a * st.k_m + b]);
        nb[a * (st.k_m + 1) + st.k_m] = SparseRateVector(proposal.mu_block_defaults[a]);
      }
      blocks = std::move(nb);
      model.lms.item_cluster[stencil].emplace_back(proposal.mu_own_default);
    }
    st.k_m += 1;
  }
  return idx;
}

// Moves one entity to its sampled cluster and keeps the running prediction
// sums coherent.
void apply_assignment(PacoModel &model, uint32_t stencil, bool user_side,
                      uint32_t entity, uint32_t target, const RatingsCorpus &train,
                      ResidualState &resid) {
  Stencil &st = model.stencils[stencil];
  auto &labels = user_side ? st.row_of : st.col_of;
  uint32_t old = labels[entity];
  if (old == target) return;
  labels[entity] = target;
  const auto &review_ids = user_side ? train.by_user[entity] : train.by_item[entity];
  for (uint32_t r : review_ids) {
    const Review &rv = train.reviews[r];
    uint32_t other = user_side ? st.col_of[rv.item] : st.row_of[rv.user];
    double oldv = user_side ? st.mean(old, other) : st.mean(other, old);
    double newv = user_side ? st.mean(target, other) : st.mean(other, target);
    resid.prediction[r] += newv - oldv;
  }
}

}  // namespace

uint32_t sample_user_assignment(PacoModel &model, uint32_t stencil, uint32_t user,
                                const AssignmentCaches &caches,
                                const RatingsCorpus &train, ResidualState &resid,
                                Rng &rng) {
  NewClusterProposal prop = draw_new_cluster_proposal(model, stencil, true, rng);
  AssignmentDecision d = sample_assignment(model, stencil, true, user, caches, prop, rng);
  uint32_t target = d.is_new ? instantiate_new_cluster(model, stencil, true, prop)
                             : d.cluster;
  apply_assignment(model, stencil, true, user, target, train, resid);
  return target;
}

uint32_t sample_item_assignment(PacoModel &model, uint32_t stencil, uint32_t item,
                                const AssignmentCaches &caches,
                                const RatingsCorpus &train, ResidualState &resid,
                                Rng &rng) {
  NewClusterProposal prop = draw_new_cluster_proposal(model, stencil, false, rng);
  AssignmentDecision d = sample_assignment(model, stencil, false, item, caches, prop, rng);
  uint32_t target = d.is_new ? instantiate_new_cluster(model, stencil, false, prop)
                             : d.cluster;
  apply_assignment(model, stencil, false, item, target, train, resid);
  return target;
}

void compact_stencil(PacoModel &model, uint32_t stencil) {
  Stencil &st = model.stencils[stencil];
  const bool has_text = stencil < model.hyper.text_stencils;

  std::vector<uint32_t> ucnt(st.k_n, 0), icnt(st.k_m, 0);
  for (uint32_t a : st.row_of) ++ucnt[a];
  for (uint32_t b : st.col_of) ++icnt[b];
  std::vector<uint32_t> umap(st.k_n, UINT32_MAX), imap(st.k_m, UINT32_MAX);
  uint32_t kn = 0, km = 0;
  for (uint32_t a = 0; a < st.k_n; ++a)
    if (ucnt[a]) umap[a] = kn++;
  for (uint32_t b = 0; b < st.k_m; ++b)
    if (icnt[b]) imap[b] = km++;
  if (kn == st.k_n && km == st.k_m) return;

  for (auto &a : st.row_of) a = umap[a];
  for (auto &b : st.col_of) b = imap[b];

  std::vector<double> means(static_cast<size_t>(kn) * km);
  for (uint32_t a = 0; a < st.k_n; ++a) {
    if (umap[a] == UINT32_MAX) continue;
    for (uint32_t b = 0; b < st.k_m; ++b) {
      if (imap[b] == UINT32_MAX) continue;
      means[umap[a] * km + imap[b]] = st.block_means[a * st.k_m + b];
    }
  }
  if (has_text) {
    auto &blocks = model.lms.block[stencil];
    auto &ucl = model.lms.user_cluster[stencil];
    auto &icl = model.lms.item_cluster[stencil];
    std::vector<SparseRateVector> nb(static_cast<size_t>(kn) * km);
    std::vector<SparseRateVector> nu(kn), ni(km);
    for (uint32_t a = 0; a < st.k_n; ++a) {
      if (umap[a] == UINT32_MAX) continue;
      nu[umap[a]] = std::move(ucl[a]);
      for (uint32_t b = 0; b < st.k_m; ++b) {
        if (imap[b] == UINT32_MAX) continue;
        nb[umap[a] * km + imap[b]] = std::move(blocks[a * st.k_m + b]);
      }
    }
    for (uint32_t b = 0; b < st.k_m; ++b)
      if (imap[b] != UINT32_MAX) ni[imap[b]] = std::move(icl[b]);
    blocks = std::move(nb);
    ucl = std::move(nu);
    icl = std::move(ni);
  }
  st.block_means = std::move(means);
  st.k_n = kn;
  st.k_m = km;
}

// ---------------------------------------------------------------------------
// Variance resampling
// ---------------------------------------------------------------------------

double sample_noise_variance(const PacoModel &model, const RatingsCorpus &train,
                             const ResidualState &resid, Rng &rng) {
  double ssr = 0.0;
  for (uint32_t r = 0; r < train.review_count(); ++r) {
    double e = resid.residual_full(train, r);
    ssr += e * e;
  }
  double shape = model.hyper.eta_shape + 0.5 * static_cast<double>(train.review_count());
  double scale = model.hyper.eta_scale + 0.5 * ssr;
  return draw_inverse_gamma(shape, scale, rng);
}

// ---------------------------------------------------------------------------
// Full Gibbs iteration
// ---------------------------------------------------------------------------

namespace {

void sample_stencil_mu(PacoModel &model, uint32_t l, const StencilCredits &sc,
                       uint64_t iteration, int threads) {
  const Hyperparameters &h = model.hyper;
  const uint64_t seed = h.seed;
  auto &blocks = model.lms.block[l];
  auto &ucl = model.lms.user_cluster[l];
  auto &icl = model.lms.item_cluster[l];
  const double a_blk = h.alpha[static_cast<size_t>(LmClass::block)];
  const double b_blk = h.beta[static_cast<size_t>(LmClass::block)];
  const double a_u = h.alpha[static_cast<size_t>(LmClass::user_cluster)];
  const double b_u = h.beta[static_cast<size_t>(LmClass::user_cluster)];
  const double a_i = h.alpha[static_cast<size_t>(LmClass::item_cluster)];
  const double b_i = h.beta[static_cast<size_t>(LmClass::item_cluster)];

  parallel_for(sc.block.size(), threads, [&](size_t lo, size_t hi) {
    for (size_t i = lo; i < hi; ++i) {
      Rng rng = substream(seed, {kPhaseMu, iteration, 1 + l,
                                 static_cast<uint64_t>(LmClass::block), i});
      blocks[i] = sample_mu(sc.block[i], a_blk, b_blk, rng);
    }
  });
  parallel_for(sc.ucl.size(), threads, [&](size_t lo, size_t hi) {
    for (size_t i = lo; i < hi; ++i) {
      Rng rng = substream(seed, {kPhaseMu, iteration, 1 + l,
                                 static_cast<uint64_t>(LmClass::user_cluster), i});
      ucl[i] = sample_mu(sc.ucl[i], a_u, b_u, rng);
    }
  });
  parallel_for(sc.icl.size(), threads, [&](size_t lo, size_t hi) {
    for (size_t i = lo; i < hi; ++i) {
      Rng rng = substream(seed, {kPhaseMu, iteration, 1 + l,
                                 static_cast<uint64_t>(LmClass::item_cluster), i});
      icl[i] = sample_mu(sc.icl[i], a_i, b_i, rng);
    }
  });
}

void assignment_sweep(PacoModel &model, uint32_t l, bool user_side,
                      const CountAllocation &alloc, const RatingsCorpus &train,
                      ResidualState &resid, uint64_t iteration, int threads) {
  AssignmentCaches caches = build_assignment_caches(model, l, user_side, alloc, train, resid);
#ifndef NDEBUG
  verify_assignment_caches(caches, model, alloc, train, resid);
#endif
  Rng prop_rng = substream(model.hyper.seed,
                           {kPhaseProposal, iteration, l, user_side ? 0u : 1u});
  NewClusterProposal prop = draw_new_cluster_proposal(model, l, user_side, prop_rng);

  const size_t n = user_side ? train.n_users : train.n_items;
  std::vector<AssignmentDecision> decisions(n);
  parallel_for(n, threads, [&](size_t lo, size_t hi) {
    for (size_t e = lo; e < hi; ++e) {
      Rng rng = substream(model.hyper.seed,
                          {kPhaseAssign, iteration, l, user_side ? 0u : 1u, e});
      decisions[e] = sample_assignment(model, l, user_side, static_cast<uint32_t>(e),
                                       caches, prop, rng);
    }
  });

  uint32_t created = UINT32_MAX;
  for (size_t e = 0; e < n; ++e) {
    uint32_t target;
    if (decisions[e].is_new) {
      if (created == UINT32_MAX)
        created = instantiate_new_cluster(model, l, user_side, prop);
      target = created;
    } else {
      target = decisions[e].cluster;
    }
    apply_assignment(model, l, user_side, static_cast<uint32_t>(e), target, train, resid);
  }
  compact_stencil(model, l);
}

}  // namespace

void gibbs_iteration(PacoModel &model, const RatingsCorpus &train,
                     CountAllocation &alloc, ResidualState &resid,
                     uint64_t iteration, const GibbsOptions &opts) {
  const Hyperparameters &h = model.hyper;
  const uint64_t seed = h.seed;
  const int threads = opts.threads;
  auto phase = [&](const char *name) {
    if (opts.phase_hook) opts.phase_hook(name);
  };

  if (opts.update_text) {
    thin_counts(model, train, alloc, iteration, 0, threads);
    phase("thin");
    ComponentCredits bg = collect_background_credits(alloc, train);
    Rng rng = substream(seed, {kPhaseMu, iteration, 0,
                               static_cast<uint64_t>(LmClass::background), 0});
    model.lms.background =
        sample_mu(bg, h.alpha[static_cast<size_t>(LmClass::background)],
                  h.beta[static_cast<size_t>(LmClass::background)], rng);
    phase("mu_background");
  }

  for (uint32_t l = 0; l < h.stencils; ++l) {
    if (opts.update_ratings) {
      Rng rng = substream(seed, {kPhaseRatings, iteration, l});
      update_stencil_ratings(model, l, train, resid, rng);
      if (h.resample_sigma_l2) {
        const Stencil &st = model.stencils[l];
        double ss = 0.0;
        for (double t : st.block_means) ss += t * t;
        Rng rng2 = substream(seed, {kPhaseSigmaL, iteration, l});
        model.sigma_l2[l] = draw_inverse_gamma(
            h.gamma_shape + 0.5 * static_cast<double>(st.block_means.size()),
            h.gamma_scale + 0.5 * ss, rng2);
      }
      phase("ratings");
    }
    if (opts.update_text && iteration > 0) {
      thin_counts(model, train, alloc, iteration, 1 + l, threads);
      phase("thin_stencil");
    }
    if (opts.update_text && l < h.text_stencils) {
      StencilCredits sc = collect_stencil_credits(model, l, alloc, train);
      sample_stencil_mu(model, l, sc, iteration, threads);
      phase("mu_stencil");
    }
    if (opts.update_assignments) {
      assignment_sweep(model, l, true, alloc, train, resid, iteration, threads);
      phase("assign_users");
      assignment_sweep(model, l, false, alloc, train, resid, iteration, threads);
      phase("assign_items");
    }
  }

  if (opts.update_text) {
    std::vector<ComponentCredits> ic = collect_item_credits(alloc, train);
    const double a_m = h.alpha[static_cast<size_t>(LmClass::item)];
    const double b_m = h.beta[static_cast<size_t>(LmClass::item)];
    parallel_for(ic.size(), threads, [&](size_t lo, size_t hi) {
      for (size_t m = lo; m < hi; ++m) {
        Rng rng = substream(seed, {kPhaseMu, iteration, 1 + h.stencils,
                                   static_cast<uint64_t>(LmClass::item), m});
        model.lms.item[m] = sample_mu(ic[m], a_m, b_m, rng);
      }
    });
    phase("mu_item");
  }

  if (opts.update_ratings && h.resample_sigma2) {
    Rng rng = substream(seed, {kPhaseSigma, iteration});
    model.sigma2 = sample_noise_variance(model, train, resid, rng);
    phase("sigma2");
  }

  if (opts.update_text)
    PACO_DCHECK(check_count_conservation(alloc, train), "count conservation after sweep");
}

// ---------------------------------------------------------------------------
// Joint log posterior (unnormalized)
// ---------------------------------------------------------------------------

double joint_log_posterior(const PacoModel &model, const RatingsCorpus &train) {
  double lp = 0.0;
  const double s2 = model.sigma2;
  const double log_norm = -0.5 * std::log(2.0 * M_PI * s2);
  for (uint32_t r = 0; r < train.review_count(); ++r) {
    const Review &rv = train.reviews[r];
    double pred = 0.0;
    for (const auto &st : model.stencils) pred += st.value(rv.user, rv.item);
    double e = rv.rating - pred;
    lp += log_norm - e * e / (2.0 * s2);
  }
  for (uint32_t r = 0; r < train.review_count(); ++r) {
    const Review &rv = train.reviews[r];
    uint64_t len = train.review_word_total(r);
    if (len == 0) continue;
    double s = -rate_vector_total(model, rv.user, rv.item);
    for (uint32_t e = rv.word_begin; e < rv.word_end; ++e) {
      double lam = rate_at(model, rv.user, rv.item, train.word_ids[e]);
      double n = train.word_counts[e];
      s += n * std::log(lam) - std::lgamma(n + 1.0);
    }
    lp += s / static_cast<double>(len);
  }
  for (uint32_t l = 0; l < model.hyper.stencils; ++l) {
    const Stencil &st = model.stencils[l];
    double sl2 = model.sigma_l2[l];
    double c = -0.5 * std::log(2.0 * M_PI * sl2);
    for (double t : st.block_means) lp += c - t * t / (2.0 * sl2);
    // CRP partition probability on both sides
    auto eppf = [&](const std::vector<uint32_t> &labels, uint32_t k) {
      std::vector<uint64_t> cnt(k, 0);
      for (uint32_t a : labels) ++cnt[a];
      double s = static_cast<double>(k) * std::log(model.hyper.crp_delta);
      for (uint64_t n : cnt)
        if (n) s += std::lgamma(static_cast<double>(n));
      for (size_t i = 0; i < labels.size(); ++i)
        s -= std::log(model.hyper.crp_delta + static_cast<double>(i));
      return s;
    };
    lp += eppf(st.row_of, st.k_n) + eppf(st.col_of, st.k_m);
  }
  return lp;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

Trainer::Trainer(const RatingsCorpus &train_corpus, const Hyperparameters &hyper,
                 std::vector<std::pair<uint32_t, uint32_t>> probe_pairs,
                 TrainOptions opts)
    : corpus_(train_corpus), opts_(std::move(opts)), probe_pairs_(std::move(probe_pairs)) {
  hyper.validate();
  if (hyper.n_samples < 1) throw ConfigError("n_samples must be >= 1");
  model_ = init_kmeans(train_corpus, hyper);
  alloc_.init(train_corpus.token_entries(), model_.components_per_review());
  resid_.rebuild(model_, train_corpus);

  // report pairs always get averaged, probe pair or not
  for (const auto &rp : opts_.report_pairs) {
    bool present = false;
    for (const auto &p : probe_pairs_) present = present || p == rp;
    if (!present) probe_pairs_.push_back(rp);
  }

  probe_words_.resize(probe_pairs_.size());
  pred_sum_.assign(probe_pairs_.size(), 0.0);
  total_sum_.assign(probe_pairs_.size(), 0.0);
  sparse_sum_.resize(probe_pairs_.size());
  dense_sum_.resize(probe_pairs_.size());
  for (size_t i = 0; i < probe_pairs_.size(); ++i) {
    auto [u, m] = probe_pairs_[i];
    if (opts_.probe_corpus) {
      if (const Review *rv = opts_.probe_corpus->find_review(u, m)) {
        for (uint32_t e = rv->word_begin; e < rv->word_end; ++e)
          probe_words_[i].push_back(opts_.probe_corpus->word_ids[e]);
      }
    }
    sparse_sum_[i].assign(probe_words_[i].size(), 0.0);
    for (const auto &rp : opts_.report_pairs)
      if (rp.first == u && rp.second == m)
        dense_sum_[i].assign(model_.vocab_size(), 0.0);
  }
}

void Trainer::step() {
  PACO_CHECK(!done(), "step past the final iteration");
  gibbs_iteration(model_, corpus_, alloc_, resid_, iteration_, opts_.gibbs);
  if (iteration_ >= model_.hyper.burn_in) {
    ++samples_used_;
    for (size_t i = 0; i < probe_pairs_.size(); ++i) {
      auto [u, m] = probe_pairs_[i];
      pred_sum_[i] += predict_rating(model_, u, m) - model_.global_mean;
      total_sum_[i] += rate_vector_total(model_, u, m);
      for (size_t w = 0; w < probe_words_[i].size(); ++w)
        sparse_sum_[i][w] += rate_at(model_, u, m, probe_words_[i][w]);
      if (!dense_sum_[i].empty()) {
        std::vector<double> lam = compute_rate_vector(model_, u, m);
        for (size_t x = 0; x < lam.size(); ++x) dense_sum_[i][x] += lam[x];
      }
    }
  }
  ++iteration_;
  if (opts_.on_iteration) opts_.on_iteration(iteration_ - 1, model_, alloc_);
}

PosteriorSummary Trainer::summary() const {
  PosteriorSummary s;
  s.n_samples_used = samples_used_;
  const double ns = samples_used_ ? static_cast<double>(samples_used_) : 1.0;
  s.pairs.resize(probe_pairs_.size());
  for (size_t i = 0; i < probe_pairs_.size(); ++i) {
    auto &p = s.pairs[i];
    p.user = probe_pairs_[i].first;
    p.item = probe_pairs_[i].second;
    s.pair_index.emplace((static_cast<uint64_t>(p.user) << 32) | p.item,
                         static_cast<uint32_t>(i));
    p.mean_prediction = pred_sum_[i] / ns;
    p.mean_rate_total = total_sum_[i] / ns;
    p.mean_rate_sparse.reserve(probe_words_[i].size());
    for (size_t w = 0; w < probe_words_[i].size(); ++w)
      p.mean_rate_sparse.emplace_back(probe_words_[i][w], sparse_sum_[i][w] / ns);
    if (!dense_sum_[i].empty()) {
      p.mean_rate_dense.resize(dense_sum_[i].size());
      for (size_t x = 0; x < dense_sum_[i].size(); ++x)
        p.mean_rate_dense[x] = dense_sum_[i][x] / ns;
    }
  }
  return s;
}

void Trainer::save(BinaryWriter &w) const {
  w.u64(iteration_);
  w.u32(samples_used_);
  write_model(w, model_);
  w.u32(alloc_.roles);
  w.u64(alloc_.counts.size());
  for (uint32_t v : alloc_.counts) w.u32(v);
  // The incrementally maintained predictions are part of the resumable
  // state: rebuilding them would differ from the live values by ulps and
  // the next draws would diverge.
  w.u64(resid_.prediction.size());
  for (double v : resid_.prediction) w.f64(v);
  w.u64(pred_sum_.size());
  for (size_t i = 0; i < pred_sum_.size(); ++i) {
    w.f64(pred_sum_[i]);
    w.f64(total_sum_[i]);
    w.u64(sparse_sum_[i].size());
    for (double v : sparse_sum_[i]) w.f64(v);
    w.u64(dense_sum_[i].size());
    for (double v : dense_sum_[i]) w.f64(v);
  }
}

void Trainer::restore(BinaryReader &r) {
  iteration_ = r.u64();
  samples_used_ = r.u32();
  model_ = read_model(r);
  alloc_.roles = r.u32();
  alloc_.counts.resize(r.u64());
  for (uint32_t &v : alloc_.counts) v = r.u32();
  PACO_CHECK(alloc_.counts.size() == corpus_.token_entries() * alloc_.roles,
             "checkpoint allocation does not match the corpus");
  resid_.prediction.resize(r.u64());
  for (double &v : resid_.prediction) v = r.f64();
  PACO_CHECK(resid_.prediction.size() == corpus_.review_count(),
             "checkpoint residuals do not match the corpus");
  size_t n = r.u64();
  PACO_CHECK(n == probe_pairs_.size(), "checkpoint probe set does not match config");
  for (size_t i = 0; i < n; ++i) {
    pred_sum_[i] = r.f64();
    total_sum_[i] = r.f64();
    sparse_sum_[i].resize(r.u64());
    for (double &v : sparse_sum_[i]) v = r.f64();
    dense_sum_[i].resize(r.u64());
    for (double &v : dense_sum_[i]) v = r.f64();
  }
}

TrainResult train(const RatingsCorpus &train_corpus, const Hyperparameters &hyper,
                  const std::vector<std::pair<uint32_t, uint32_t>> &probe_pairs,
                  const TrainOptions &opts) {
  Trainer trainer(train_corpus, hyper, probe_pairs, opts);
  while (!trainer.done()) trainer.step();
  TrainResult result;
  result.summary = trainer.summary();
  result.model = trainer.model();
  return result;
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

namespace {

std::vector<uint32_t> crp_partition(size_t n, double delta, uint32_t k_max, Rng &rng) {
  std::vector<uint32_t> labels(n, 0);
  std::vector<double> sizes;
  for (size_t i = 0; i < n; ++i) {
    if (sizes.empty()) {
      sizes.push_back(1.0);
      labels[i] = 0;
      continue;
    }
    double total = static_cast<double>(i) + (sizes.size() < k_max ? delta : 0.0);
    double u = std::uniform_real_distribution<double>(0.0, total)(rng);
    double acc = 0.0;
    uint32_t pick = static_cast<uint32_t>(sizes.size());
    for (uint32_t c = 0; c < sizes.size(); ++c) {
      acc += sizes[c];
      if (u < acc) {
        pick = c;
        break;
      }
    }
    if (pick == sizes.size())
      sizes.push_back(1.0);
    else
      sizes[pick] += 1.0;
    labels[i] = pick;
  }
  return labels;
}

std::string padded_name(const char *prefix, size_t i, size_t total) {
  size_t width = 1;
  for (size_t t = total; t >= 10; t /= 10) ++width;
  char buf[32];
  snprintf(buf, sizeof(buf), "%s%0*zu", prefix, static_cast<int>(width), i);
  return buf;
}

}  // namespace

std::pair<RatingsCorpus, SyntheticTruth> generate_synthetic(
    const Hyperparameters &hyper, size_t n_users, size_t n_items,
    size_t vocab_size, double density, uint64_t seed) {
  hyper.validate();
  if (!(density > 0.0 && density <= 1.0))
    throw ConfigError("density must be in (0,1]");

  Rng rng = substream(seed, {kPhaseSynthetic});
  SyntheticTruth truth;
  PacoModel &model = truth.model;
  model.hyper = hyper;
  model.hyper.seed = seed;
  model.n_users = n_users;
  model.n_items = n_items;
  model.sigma2 = hyper.sigma2;
  model.sigma_l2.assign(hyper.stencils, hyper.sigma_l2);
  model.rating_lo = -1e300;
  model.rating_hi = 1e300;
  for (size_t x = 0; x < vocab_size; ++x)
    model.vocab.words.push_back(padded_name("w", x, vocab_size));
  for (uint32_t x = 0; x < vocab_size; ++x)
    model.vocab.index.emplace(model.vocab.words[x], x);

  model.stencils.resize(hyper.stencils);
  for (uint32_t l = 0; l < hyper.stencils; ++l) {
    Stencil &st = model.stencils[l];
    st.row_of = crp_partition(n_users, hyper.crp_delta, hyper.k_max, rng);
    st.col_of = crp_partition(n_items, hyper.crp_delta, hyper.k_max, rng);
    st.k_n = *std::max_element(st.row_of.begin(), st.row_of.end()) + 1;
    st.k_m = *std::max_element(st.col_of.begin(), st.col_of.end()) + 1;
    st.block_means.resize(static_cast<size_t>(st.k_n) * st.k_m);
    for (auto &t : st.block_means) t = draw_normal(0.0, hyper.sigma_l2, rng);
    truth.user_clusters.push_back(st.row_of);
    truth.item_clusters.push_back(st.col_of);
  }

  auto draw_dense_vector = [&](LmClass cls) {
    SparseRateVector v(kRateFloor);
    double a = hyper.alpha[static_cast<size_t>(cls)];
    double b = hyper.beta[static_cast<size_t>(cls)];
    for (uint32_t x = 0; x < vocab_size; ++x) v.set(x, draw_gamma(a, b, rng));
    return v;
  };
  model.lms.background = draw_dense_vector(LmClass::background);
  model.lms.item.resize(n_items);
  for (auto &v : model.lms.item) v = draw_dense_vector(LmClass::item);
  model.lms.block.resize(hyper.text_stencils);
  model.lms.user_cluster.resize(hyper.text_stencils);
  model.lms.item_cluster.resize(hyper.text_stencils);
  for (uint32_t l = 0; l < hyper.text_stencils; ++l) {
    const Stencil &st = model.stencils[l];
    for (size_t i = 0; i < static_cast<size_t>(st.k_n) * st.k_m; ++i)
      model.lms.block[l].push_back(draw_dense_vector(LmClass::block));
    for (uint32_t a = 0; a < st.k_n; ++a)
      model.lms.user_cluster[l].push_back(draw_dense_vector(LmClass::user_cluster));
    for (uint32_t b = 0; b < st.k_m; ++b)
      model.lms.item_cluster[l].push_back(draw_dense_vector(LmClass::item_cluster));
  }

  // observed cells: uniform distinct sample
  const size_t total_cells = n_users * n_items;
  size_t want = static_cast<size_t>(std::llround(density * static_cast<double>(total_cells)));
  want = std::max<size_t>(1, std::min(want, total_cells));
  std::vector<uint64_t> cells(total_cells);
  std::iota(cells.begin(), cells.end(), 0);
  for (size_t i = 0; i < want; ++i) {
    size_t j = i + static_cast<size_t>(std::uniform_int_distribution<uint64_t>(
                       0, total_cells - 1 - i)(rng));
    std::swap(cells[i], cells[j]);
  }
  cells.resize(want);
  std::sort(cells.begin(), cells.end());

  RatingsCorpus corpus;
  corpus.n_users = n_users;
  corpus.n_items = n_items;
  for (size_t u = 0; u < n_users; ++u) corpus.user_ids.push_back(padded_name("u", u, n_users));
  for (size_t m = 0; m < n_items; ++m) corpus.item_ids.push_back(padded_name("i", m, n_items));
  for (uint32_t u = 0; u < n_users; ++u) corpus.user_index.emplace(corpus.user_ids[u], u);
  for (uint32_t m = 0; m < n_items; ++m) corpus.item_index.emplace(corpus.item_ids[m], m);
  corpus.vocab = model.vocab;

  bool first = true;
  for (uint64_t cell : cells) {
    uint32_t u = static_cast<uint32_t>(cell / n_items);
    uint32_t m = static_cast<uint32_t>(cell % n_items);
    Review rv;
    rv.user = u;
    rv.item = m;
    double mean = 0.0;
    for (const auto &st : model.stencils) mean += st.value(u, m);
    rv.rating = mean + draw_normal(0.0, hyper.sigma2, rng);
    if (first || rv.rating < corpus.raw_lo) corpus.raw_lo = rv.rating;
    if (first || rv.rating > corpus.raw_hi) corpus.raw_hi = rv.rating;
    first = false;
    rv.word_begin = static_cast<uint32_t>(corpus.word_ids.size());
    for (uint32_t x = 0; x < vocab_size; ++x) {
      double lam = rate_at(model, u, m, x);
      std::poisson_distribution<uint32_t> poi(lam);
      uint32_t n = poi(rng);
      if (n > 0) {
        corpus.word_ids.push_back(x);
        corpus.word_counts.push_back(n);
      }
    }
    rv.word_end = static_cast<uint32_t>(corpus.word_ids.size());
    corpus.reviews.push_back(rv);
  }
  corpus.rebuild_adjacency();
  return {std::move(corpus), std::move(truth)};
}

// ---------------------------------------------------------------------------
// Posterior summary serialization
// ---------------------------------------------------------------------------

namespace {
constexpr char kSummaryMagic[9] = "PACOSUM1";
}

void save_summary(const PosteriorSummary &s, const std::string &path) {
  BinaryWriter w(path);
  w.magic(kSummaryMagic);
  w.u32(1);
  w.u32(s.n_samples_used);
  w.u64(s.pairs.size());
  for (const auto &p : s.pairs) {
    w.u32(p.user);
    w.u32(p.item);
    w.f64(p.mean_prediction);
    w.f64(p.mean_rate_total);
    w.u64(p.mean_rate_sparse.size());
    for (const auto &kv : p.mean_rate_sparse) {
      w.u32(kv.first);
      w.f64(kv.second);
    }
    w.u64(p.mean_rate_dense.size());
    for (double v : p.mean_rate_dense) w.f64(v);
  }
  w.close();
}

PosteriorSummary load_summary(const std::string &path) {
  BinaryReader r(path);
  r.expect_magic(kSummaryMagic);
  uint32_t ver = r.u32();
  if (ver != 1)
    throw DataError("unsupported summary version " + std::to_string(ver) + " in " + path);
  PosteriorSummary s;
  s.n_samples_used = r.u32();
  s.pairs.resize(r.u64());
  for (uint32_t i = 0; i < s.pairs.size(); ++i) {
    auto &p = s.pairs[i];
    p.user = r.u32();
    p.item = r.u32();
    p.mean_prediction = r.f64();
    p.mean_rate_total = r.f64();
    p.mean_rate_sparse.resize(r.u64());
    for (auto &kv : p.mean_rate_sparse) {
      kv.first = r.u32();
      kv.second = r.f64();
    }
    p.mean_rate_dense.resize(r.u64());
    for (double &v : p.mean_rate_dense) v = r.f64();
    s.pair_index.emplace((static_cast<uint64_t>(p.user) << 32) | p.item, i);
  }
  return s;
}

}  // namespace paco
