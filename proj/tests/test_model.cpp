#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "paco/errors.hpp"
#include "paco/model.hpp"
#include "paco/rng.hpp"

using namespace paco;
namespace fs = std::filesystem;

namespace {

// Minimal hand-built model: one user cluster layout per stencil, vocab of
// the given size, all rates at 1 unless edited.
PacoModel tiny_model(size_t n_users, size_t n_items, size_t n_words, uint32_t S,
                     uint32_t S0) {
  PacoModel m;
  m.hyper.stencils = S;
  m.hyper.text_stencils = S0;
  m.n_users = n_users;
  m.n_items = n_items;
  for (size_t x = 0; x < n_words; ++x) {
    m.vocab.words.push_back("w" + std::to_string(x));
    m.vocab.index.emplace(m.vocab.words.back(), static_cast<uint32_t>(x));
  }
  m.sigma_l2.assign(S, 1.0);
  m.stencils.resize(S);
  for (auto &st : m.stencils) {
    st.k_n = st.k_m = 1;
    st.block_means = {0.0};
    st.row_of.assign(n_users, 0);
    st.col_of.assign(n_items, 0);
  }
  m.lms.background = SparseRateVector(1.0);
  m.lms.item.assign(n_items, SparseRateVector(1.0));
  m.lms.block.resize(S0);
  m.lms.user_cluster.resize(S0);
  m.lms.item_cluster.resize(S0);
  for (uint32_t l = 0; l < S0; ++l) {
    m.lms.block[l].assign(1, SparseRateVector(1.0));
    m.lms.user_cluster[l].assign(1, SparseRateVector(1.0));
    m.lms.item_cluster[l].assign(1, SparseRateVector(1.0));
  }
  m.rating_lo = 1.0;
  m.rating_hi = 5.0;
  return m;
}

}  // namespace

TEST_CASE("predict_rating adds block means to the global mean and clips") {
  PacoModel m = tiny_model(2, 2, 1, 1, 0);
  m.global_mean = 3.0;
  m.stencils[0].block_means = {2.0};
  CHECK(predict_rating(m, 0, 0) == doctest::Approx(5.0));

  m.stencils[0].block_means = {0.0};
  CHECK(predict_rating(m, 1, 1) == doctest::Approx(3.0));

  m.stencils[0].block_means = {4.2};  // 3 + 4.2 = 7.2 clips to 5
  CHECK(predict_rating(m, 0, 1) == doctest::Approx(5.0));
  m.stencils[0].block_means = {-9.0};
  CHECK(predict_rating(m, 0, 1) == doctest::Approx(1.0));
}

TEST_CASE("predict_rating rejects out-of-range indices") {
  PacoModel m = tiny_model(2, 2, 1, 1, 0);
  CHECK_THROWS_AS(predict_rating(m, 2, 0), std::out_of_range);
  CHECK_THROWS_AS(predict_rating(m, 0, 5), std::out_of_range);
  CHECK_THROWS_AS(compute_rate_vector(m, 9, 0), std::out_of_range);
}

TEST_CASE("rate vector is the elementwise sum of active components") {
  PacoModel m = tiny_model(1, 1, 2, 1, 1);
  m.lms.background.set(0, 1.0);
  m.lms.background.set(1, 1.0);
  m.lms.item[0] = SparseRateVector(kRateFloor);
  m.lms.item[0].set(1, 2.0);
  m.lms.block[0][0] = SparseRateVector(kRateFloor);
  m.lms.block[0][0].set(0, 1.0);
  m.lms.user_cluster[0][0] = SparseRateVector(kRateFloor);
  m.lms.item_cluster[0][0] = SparseRateVector(kRateFloor);

  auto lam = compute_rate_vector(m, 0, 0);
  REQUIRE(lam.size() == 2);
  CHECK(lam[0] == doctest::Approx(2.0).epsilon(1e-9));
  CHECK(lam[1] == doctest::Approx(3.0).epsilon(1e-9));
}

TEST_CASE("rate vector with every component at the floor") {
  PacoModel m = tiny_model(1, 1, 3, 1, 1);  // 5 active components
  m.lms.background = SparseRateVector(kRateFloor);
  m.lms.item[0] = SparseRateVector(kRateFloor);
  m.lms.block[0][0] = SparseRateVector(kRateFloor);
  m.lms.user_cluster[0][0] = SparseRateVector(kRateFloor);
  m.lms.item_cluster[0][0] = SparseRateVector(kRateFloor);
  auto lam = compute_rate_vector(m, 0, 0);
  for (double v : lam) CHECK(v == doctest::Approx(5 * kRateFloor).epsilon(1e-12));
  for (double v : lam) CHECK(v > 0.0);
}

TEST_CASE("rate vector with no text stencils is background plus item") {
  PacoModel m = tiny_model(1, 1, 2, 1, 0);
  m.lms.background.set(0, 0.5);
  m.lms.item[0].set(0, 0.25);
  auto lam = compute_rate_vector(m, 0, 0);
  CHECK(lam[0] == doctest::Approx(0.75));
  CHECK(lam[1] == doctest::Approx(2.0));
}

TEST_CASE("rate additivity is exact at every word") {
  PacoModel m = tiny_model(3, 4, 7, 2, 2);
  Rng rng(7);
  auto randomize = [&](SparseRateVector &v) {
    for (uint32_t x = 0; x < 7; ++x)
      if (rng() % 2) v.set(x, static_cast<double>(rng() % 1000 + 1) / 256.0);
  };
  randomize(m.lms.background);
  for (auto &v : m.lms.item) randomize(v);
  for (uint32_t l = 0; l < 2; ++l) {
    for (auto &v : m.lms.block[l]) randomize(v);
    for (auto &v : m.lms.user_cluster[l]) randomize(v);
    for (auto &v : m.lms.item_cluster[l]) randomize(v);
  }
  auto lam = compute_rate_vector(m, 1, 2);
  for (uint32_t x = 0; x < 7; ++x) {
    double expect = m.lms.background.at(x) + m.lms.item[2].at(x);
    for (uint32_t l = 0; l < 2; ++l) {
      expect += m.lms.block[l][0].at(x);
      expect += m.lms.item_cluster[l][0].at(x);
      expect += m.lms.user_cluster[l][0].at(x);
    }
    CHECK(lam[x] == expect);  // fixed summation order makes this exact
  }
  double total = 0.0;
  for (double v : lam) total += v;
  CHECK(rate_vector_total(m, 1, 2) == doctest::Approx(total).epsilon(1e-12));
}

TEST_CASE("editing one block mean shifts the prediction by exactly the delta") {
  PacoModel m = tiny_model(4, 4, 1, 2, 0);
  m.rating_lo = -100;
  m.rating_hi = 100;
  Stencil &st = m.stencils[1];
  st.k_n = 2;
  st.k_m = 2;
  st.block_means = {0.5, -0.25, 1.5, 2.0};
  st.row_of = {0, 0, 1, 1};
  st.col_of = {0, 1, 0, 1};
  double before = predict_centered(m, 2, 1);  // block (1,1) = 2.0
  st.block_means[3] = -1.0;
  double after = predict_centered(m, 2, 1);
  CHECK(after - before == doctest::Approx(-3.0).epsilon(1e-15));
  // pairs outside the block are untouched
  CHECK(predict_centered(m, 0, 0) == doctest::Approx(0.5));
}

TEST_CASE("model size in bits follows the stencil cost formula") {
  PacoModel m = tiny_model(1000, 500, 1, 1, 0);
  Stencil &st = m.stencils[0];
  st.k_n = 4;
  st.k_m = 4;
  st.block_means.assign(16, 0.0);
  st.row_of.assign(1000, 0);
  st.col_of.assign(500, 0);
  CHECK(model_size_bits(m) == 1000 * 2 + 500 * 2 + 32 * 16);  // 3512

  // k=1 contributes no assignment bits
  PacoModel one = tiny_model(1000, 500, 1, 1, 0);
  CHECK(model_size_bits(one) == 32);

  // additivity over stencils
  PacoModel two = tiny_model(1000, 500, 1, 2, 0);
  for (auto &s : two.stencils) {
    s.k_n = 4;
    s.k_m = 4;
    s.block_means.assign(16, 0.0);
  }
  CHECK(model_size_bits(two) == 2 * 3512);
}

TEST_CASE("model size is invariant under cluster relabeling") {
  PacoModel m = tiny_model(10, 10, 1, 1, 0);
  Stencil &st = m.stencils[0];
  st.k_n = 3;
  st.k_m = 2;
  st.block_means = {1, 2, 3, 4, 5, 6};
  st.row_of = {0, 1, 2, 0, 1, 2, 0, 1, 2, 0};
  st.col_of = {0, 1, 0, 1, 0, 1, 0, 1, 0, 1};
  uint64_t before = model_size_bits(m);
  // swap labels 0<->2 on the user side, permute the table rows to match
  for (auto &a : st.row_of) a = a == 0 ? 2 : (a == 2 ? 0 : a);
  std::swap(st.block_means[0], st.block_means[4]);
  std::swap(st.block_means[1], st.block_means[5]);
  CHECK(model_size_bits(m) == before);
}

TEST_CASE("ceil of log2 drives assignment bits") {
  PacoModel m = tiny_model(100, 100, 1, 1, 0);
  Stencil &st = m.stencils[0];
  st.k_n = 3;  // ceil(log2 3) = 2
  st.k_m = 5;  // ceil(log2 5) = 3
  st.block_means.assign(15, 0.0);
  CHECK(model_size_bits(m) == 100 * 2 + 100 * 3 + 32 * 15);
}

TEST_CASE("serialization round-trips the full parameter state") {
  PacoModel m = tiny_model(5, 6, 4, 2, 1);
  m.global_mean = 3.14159265358979;
  m.sigma2 = 0.123456789;
  m.sigma_l2 = {0.5, 0.25};
  m.hyper.seed = 987654321;
  m.hyper.alpha[2] = 1.75;
  Stencil &st = m.stencils[0];
  st.k_n = 2;
  st.k_m = 2;
  st.block_means = {0.1, -0.2, 0.3, 1.0 / 3.0};
  st.row_of = {0, 1, 0, 1, 1};
  st.col_of = {1, 0, 1, 0, 1, 0};
  m.lms.block[0].assign(4, SparseRateVector(0.5));
  m.lms.user_cluster[0].assign(2, SparseRateVector(2.0));
  m.lms.item_cluster[0].assign(2, SparseRateVector(3.0));
  m.lms.block[0][2].set(3, 0.777777777777);
  m.lms.item[4].set(0, 1e-9);

  fs::path p = fs::temp_directory_path() / "paco_model_rt.bin";
  serialize(m, p.string());
  PacoModel d = deserialize(p.string());

  CHECK(d.n_users == m.n_users);
  CHECK(d.vocab == m.vocab);
  CHECK(d.global_mean == m.global_mean);
  CHECK(d.sigma2 == m.sigma2);
  CHECK(d.sigma_l2 == m.sigma_l2);
  CHECK(d.hyper.seed == m.hyper.seed);
  CHECK(d.hyper.alpha == m.hyper.alpha);
  CHECK(d.stencils[0].block_means == m.stencils[0].block_means);
  CHECK(d.stencils[0].row_of == m.stencils[0].row_of);
  CHECK(d.stencils[0].col_of == m.stencils[0].col_of);
  CHECK(d.lms.block[0][2] == m.lms.block[0][2]);
  CHECK(d.lms.item[4] == m.lms.item[4]);
  CHECK(d.lms.background == m.lms.background);

  // predictions agree bit-exactly on a probe grid
  for (uint32_t u = 0; u < 5; ++u)
    for (uint32_t mm = 0; mm < 6; ++mm)
      CHECK(predict_rating(d, u, mm) == predict_rating(m, u, mm));
}

TEST_CASE("corrupted magic and truncation are reported") {
  fs::path p = fs::temp_directory_path() / "paco_model_bad.bin";
  {
    std::ofstream f(p, std::ios::binary);
    f << "WRONGMAG rest of file";
  }
  CHECK_THROWS_WITH_AS(deserialize(p.string()),
                       doctest::Contains("bad format"), DataError);

  PacoModel m = tiny_model(2, 2, 2, 1, 1);
  fs::path good = fs::temp_directory_path() / "paco_model_trunc.bin";
  serialize(m, good.string());
  auto size = fs::file_size(good);
  fs::resize_file(good, size / 2);
  CHECK_THROWS_WITH_AS(deserialize(good.string()),
                       doctest::Contains("truncated"), DataError);
}

TEST_CASE("hyperparameter validation") {
  Hyperparameters h;
  h.text_stencils = 5;
  h.stencils = 3;
  CHECK_THROWS_AS(h.validate(), ConfigError);
  h.text_stencils = 1;
  h.crp_delta = 0.0;
  CHECK_THROWS_AS(h.validate(), ConfigError);
  h.crp_delta = 1.0;
  h.sigma2 = -1.0;
  CHECK_THROWS_AS(h.validate(), ConfigError);
  h.sigma2 = 1.0;
  CHECK_NOTHROW(h.validate());
}
