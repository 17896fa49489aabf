#include "paco/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "paco/errors.hpp"
#include "paco/io_util.hpp"

namespace paco {

void Hyperparameters::validate() const {
  if (text_stencils > stencils) throw ConfigError("S0 must be <= S");
  if (text_stencils > 16) throw ConfigError("at most 16 text stencils supported");
  if (k_max < 1) throw ConfigError("k_max must be >= 1");
  if (!(crp_delta > 0)) throw ConfigError("crp_delta must be > 0");
  for (size_t i = 0; i < kLmClassCount; ++i) {
    if (!(alpha[i] > 0) || !(beta[i] > 0))
      throw ConfigError("gamma prior parameters must be > 0");
  }
  if (!(sigma2 > 0) || !(sigma_l2 > 0))
    throw ConfigError("variances must be > 0");
  if (!(gamma_shape > 0) || !(gamma_scale > 0) || !(eta_shape > 0) || !(eta_scale > 0))
    throw ConfigError("variance hyperprior parameters must be > 0");
}

namespace {
void check_pair(const PacoModel &model, uint32_t user, uint32_t item) {
  if (user >= model.n_users || item >= model.n_items)
    throw std::out_of_range("user/item index out of range");
}
}  // namespace

double predict_centered(const PacoModel &model, uint32_t user, uint32_t item) {
  check_pair(model, user, item);
  double s = 0.0;
  for (const auto &st : model.stencils) s += st.value(user, item);
  return s;
}

double predict_rating(const PacoModel &model, uint32_t user, uint32_t item) {
  double pred = model.global_mean + predict_centered(model, user, item);
  return std::clamp(pred, model.rating_lo, model.rating_hi);
}

std::vector<double> compute_rate_vector(const PacoModel &model, uint32_t user,
                                        uint32_t item) {
  check_pair(model, user, item);
  const size_t W = model.vocab_size();
  std::vector<double> lambda(W, 0.0);
  auto add = [&](const SparseRateVector &v) {
    const double def = v.default_rate();
    for (auto &x : lambda) x += def;
    for (const auto &kv : v.entries()) lambda[kv.first] += kv.second - def;
  };
  add(model.lms.background);
  add(model.lms.item[item]);
  for (uint32_t l = 0; l < model.hyper.text_stencils; ++l) {
    const Stencil &st = model.stencils[l];
    uint32_t a = st.row_of[user], b = st.col_of[item];
    add(model.lms.block[l][a * st.k_m + b]);
    add(model.lms.item_cluster[l][b]);
    add(model.lms.user_cluster[l][a]);
  }
  return lambda;
}

double rate_vector_total(const PacoModel &model, uint32_t user, uint32_t item) {
  check_pair(model, user, item);
  const size_t W = model.vocab_size();
  double t = model.lms.background.total(W) + model.lms.item[item].total(W);
  for (uint32_t l = 0; l < model.hyper.text_stencils; ++l) {
    const Stencil &st = model.stencils[l];
    uint32_t a = st.row_of[user], b = st.col_of[item];
    t += model.lms.block[l][a * st.k_m + b].total(W);
    t += model.lms.item_cluster[l][b].total(W);
    t += model.lms.user_cluster[l][a].total(W);
  }
  return t;
}

uint64_t model_size_bits(const PacoModel &model) {
  auto log2ceil = [](uint32_t k) -> uint64_t {
    if (k <= 1) return 0;
    uint64_t bits = 0;
    uint32_t v = k - 1;
    while (v) {
      ++bits;
      v >>= 1;
    }
    return bits;
  };
  uint64_t total = 0;
  for (const auto &st : model.stencils) {
    total += model.n_users * log2ceil(st.k_n);
    total += model.n_items * log2ceil(st.k_m);
    total += 32ULL * st.k_n * st.k_m;
  }
  return total;
}

namespace {
constexpr char kModelMagic[9] = "PACOMDL1";
constexpr uint32_t kModelVersion = 1;

void write_rate_vector(BinaryWriter &w, const SparseRateVector &v) {
  w.f64(v.default_rate());
  auto entries = v.sorted_entries();
  w.u64(entries.size());
  for (const auto &kv : entries) {
    w.u32(kv.first);
    w.f64(kv.second);
  }
}

SparseRateVector read_rate_vector(BinaryReader &r) {
  SparseRateVector v(r.f64());
  size_t n = r.u64();
  for (size_t i = 0; i < n; ++i) {
    uint32_t word = r.u32();
    v.set(word, r.f64());
  }
  return v;
}
}  // namespace

void write_model(BinaryWriter &w, const PacoModel &m) {
  w.magic(kModelMagic);
  w.u32(kModelVersion);
  w.u64(m.n_users);
  w.u64(m.n_items);
  w.u64(m.vocab_size());
  w.u32(m.hyper.stencils);
  w.u32(m.hyper.text_stencils);

  for (const auto &s : m.vocab.words) w.str(s);

  const Hyperparameters &h = m.hyper;
  w.u32(h.k_max);
  w.f64(h.crp_delta);
  for (double v : h.alpha) w.f64(v);
  for (double v : h.beta) w.f64(v);
  w.f64(h.sigma2);
  w.f64(h.sigma_l2);
  w.f64(h.gamma_shape);
  w.f64(h.gamma_scale);
  w.f64(h.eta_shape);
  w.f64(h.eta_scale);
  w.u8(h.resample_sigma2 ? 1 : 0);
  w.u8(h.resample_sigma_l2 ? 1 : 0);
  w.u32(h.burn_in);
  w.u32(h.n_samples);
  w.u64(h.seed);

  w.f64(m.global_mean);
  w.f64(m.sigma2);
  for (double v : m.sigma_l2) w.f64(v);
  w.f64(m.rating_lo);
  w.f64(m.rating_hi);

  for (const auto &st : m.stencils) {
    w.u32(st.k_n);
    w.u32(st.k_m);
    for (double v : st.block_means) w.f64(v);
    for (uint32_t v : st.row_of) w.u32(v);
    for (uint32_t v : st.col_of) w.u32(v);
  }

  write_rate_vector(w, m.lms.background);
  for (const auto &v : m.lms.item) write_rate_vector(w, v);
  for (uint32_t l = 0; l < m.hyper.text_stencils; ++l) {
    for (const auto &v : m.lms.block[l]) write_rate_vector(w, v);
    for (const auto &v : m.lms.user_cluster[l]) write_rate_vector(w, v);
    for (const auto &v : m.lms.item_cluster[l]) write_rate_vector(w, v);
  }
}

void serialize(const PacoModel &m, const std::string &path) {
  BinaryWriter w(path);
  write_model(w, m);
  w.close();
}

PacoModel read_model(BinaryReader &r) {
  r.expect_magic(kModelMagic);
  uint32_t ver = r.u32();
  if (ver != kModelVersion)
    throw DataError("unsupported model version " + std::to_string(ver));

  PacoModel m;
  m.n_users = r.u64();
  m.n_items = r.u64();
  size_t W = r.u64();
  m.hyper.stencils = r.u32();
  m.hyper.text_stencils = r.u32();

  m.vocab.words.resize(W);
  for (auto &s : m.vocab.words) s = r.str();
  for (uint32_t i = 0; i < W; ++i) m.vocab.index.emplace(m.vocab.words[i], i);

  Hyperparameters &h = m.hyper;
  h.k_max = r.u32();
  h.crp_delta = r.f64();
  for (double &v : h.alpha) v = r.f64();
  for (double &v : h.beta) v = r.f64();
  h.sigma2 = r.f64();
  h.sigma_l2 = r.f64();
  h.gamma_shape = r.f64();
  h.gamma_scale = r.f64();
  h.eta_shape = r.f64();
  h.eta_scale = r.f64();
  h.resample_sigma2 = r.u8() != 0;
  h.resample_sigma_l2 = r.u8() != 0;
  h.burn_in = r.u32();
  h.n_samples = r.u32();
  h.seed = r.u64();

  m.global_mean = r.f64();
  m.sigma2 = r.f64();
  m.sigma_l2.resize(h.stencils);
  for (double &v : m.sigma_l2) v = r.f64();
  m.rating_lo = r.f64();
  m.rating_hi = r.f64();

  m.stencils.resize(h.stencils);
  for (auto &st : m.stencils) {
    st.k_n = r.u32();
    st.k_m = r.u32();
    st.block_means.resize(static_cast<size_t>(st.k_n) * st.k_m);
    for (double &v : st.block_means) v = r.f64();
    st.row_of.resize(m.n_users);
    for (uint32_t &v : st.row_of) v = r.u32();
    st.col_of.resize(m.n_items);
    for (uint32_t &v : st.col_of) v = r.u32();
  }

  m.lms.background = read_rate_vector(r);
  m.lms.item.resize(m.n_items);
  for (auto &v : m.lms.item) v = read_rate_vector(r);
  m.lms.block.resize(h.text_stencils);
  m.lms.user_cluster.resize(h.text_stencils);
  m.lms.item_cluster.resize(h.text_stencils);
  for (uint32_t l = 0; l < h.text_stencils; ++l) {
    const Stencil &st = m.stencils[l];
    m.lms.block[l].resize(static_cast<size_t>(st.k_n) * st.k_m);
    for (auto &v : m.lms.block[l]) v = read_rate_vector(r);
    m.lms.user_cluster[l].resize(st.k_n);
    for (auto &v : m.lms.user_cluster[l]) v = read_rate_vector(r);
    m.lms.item_cluster[l].resize(st.k_m);
    for (auto &v : m.lms.item_cluster[l]) v = read_rate_vector(r);
  }
  return m;
}

PacoModel deserialize(const std::string &path) {
  BinaryReader r(path);
  return read_model(r);
}

}  // namespace paco
