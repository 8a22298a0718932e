#include <doctest.h>

#include <random>
#include <set>
#include <vector>

#include "mwm/machine_model.hpp"
#include "test_helpers.hpp"

using namespace mwm;

namespace {

MachineConfig make_config(int h, int max_shut, bool exclude_all_open = false) {
  MachineConfig c;
  c.hopper_count = h;
  c.target = 500.0;
  c.alpha = 0.123;
  c.max_shut = max_shut;
  c.exclude_all_open = exclude_all_open;
  c.epsilon = 1e-5;
  c.setpoint_fraction = 0.6;
  return c;
}

long long binomial(int n, int k) {
  long long r = 1;
  for (int i = 1; i <= k; ++i) r = r * (n - i + 1) / i;
  return r;
}

}  // namespace

TEST_CASE("enumerate_combinations: golden counts") {
  struct Row {
    int h, shut;
    std::size_t k;
  };
  // Each K equals sum_{s=0}^{max_shut} C(H, s); the closed form is
  // cross-checked for the whole grid in the next test case.
  const std::vector<Row> rows = {{4, 2, 11}, {4, 3, 15}, {5, 2, 16}, {6, 2, 22}, {7, 2, 29},
                                 {8, 2, 37}, {6, 3, 42}, {9, 2, 46}, {7, 3, 64}, {12, 2, 79},
                                 {8, 3, 93}, {9, 3, 130}, {12, 3, 299}, {2, 1, 3}};
  for (const auto& row : rows) {
    const OpeningMatrix p = enumerate_combinations(make_config(row.h, row.shut));
    CHECK(p.count() == row.k);
  }
}

TEST_CASE("enumerate_combinations: closed-form count and row validity") {
  for (int h = 2; h <= 12; ++h) {
    for (int shut = 0; shut <= std::min(3, h - 1); ++shut) {
      const OpeningMatrix p = enumerate_combinations(make_config(h, shut));
      long long expected = 0;
      for (int s = 0; s <= shut; ++s) expected += binomial(h, s);
      CHECK(static_cast<long long>(p.count()) == expected);

      std::set<std::vector<std::uint8_t>> distinct(p.rows.begin(), p.rows.end());
      CHECK(distinct.size() == p.count());
      for (std::size_t i = 0; i < p.count(); ++i) {
        const std::size_t open = p.open_count(i);
        CHECK(open >= p.hoppers - static_cast<std::size_t>(shut));
        CHECK(open <= p.hoppers);
      }
    }
  }
}

TEST_CASE("enumerate_combinations: deterministic shut-set order, all-open first") {
  const OpeningMatrix p = enumerate_combinations(make_config(3, 2));
  const std::vector<std::vector<std::uint8_t>> expected = {
      {1, 1, 1}, {0, 1, 1}, {0, 0, 1}, {0, 1, 0}, {1, 0, 1}, {1, 0, 0}, {1, 1, 0}};
  REQUIRE(p.count() == expected.size());
  for (std::size_t i = 0; i < expected.size(); ++i) CHECK(p.rows[i] == expected[i]);
}

TEST_CASE("enumerate_combinations: exclude_all_open drops exactly one row") {
  const OpeningMatrix with = enumerate_combinations(make_config(5, 2, false));
  const OpeningMatrix without = enumerate_combinations(make_config(5, 2, true));
  CHECK(with.count() == 16);
  CHECK(without.count() == 15);
  for (const auto& row : without.rows) {
    std::size_t open = 0;
    for (auto v : row) open += v;
    CHECK(open < row.size());
  }
}

TEST_CASE("config validation") {
  CHECK_THROWS_AS(enumerate_combinations(make_config(1, 0)), ConfigError);
  CHECK_THROWS_AS(enumerate_combinations(make_config(4, 4)), ConfigError);
  MachineConfig c = make_config(4, 2);
  c.alpha = 1.2;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = make_config(4, 2);
  c.epsilon = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK(config_warnings(make_config(12, 3)).size() == 1);
  CHECK(config_warnings(make_config(12, 2)).empty());
  CHECK(config_warnings(make_config(4, 2)).empty());
}

TEST_CASE("combination_distribution: all-open row sums means and variances") {
  const MachineConfig config = make_config(4, 2);
  Setpoints sp{{125.0, 125.0, 125.0, 125.0}};
  const CombinationSet set = combination_distribution(enumerate_combinations(config), sp, config.alpha);
  CHECK(set.theta[0] == doctest::Approx(500.0));
  const double unit = 0.123 * 125.0;
  CHECK(set.sigma(0, 0) == doctest::Approx(4.0 * unit * unit));
}

TEST_CASE("combination_distribution: reference H=4 setup") {
  const MachineConfig config = make_config(4, 2);
  Setpoints sp{{294.9, 276.7, 183.7, 66.6}};
  const CombinationSet set = combination_distribution(enumerate_combinations(config), sp, config.alpha);
  REQUIRE(set.open.count() == 11);
  // Every hopper appears in 7 of the 11 rows, so the mean combination
  // weight is 7/11 of the total setpoint mass.
  double total = 0.0;
  for (double v : sp.mu) total += v;
  double mean = 0.0;
  for (double t : set.theta) mean += t;
  mean /= 11.0;
  CHECK(mean == doctest::Approx(7.0 * total / 11.0).epsilon(1e-12));
  CHECK(mean == doctest::Approx(523.027).epsilon(1e-4));
}

TEST_CASE("combination_distribution: diagonal equals direct sum of selected variances") {
  std::mt19937_64 gen(99);
  std::uniform_real_distribution<double> unif(10.0, 400.0);
  for (int rep = 0; rep < 20; ++rep) {
    const int h = 2 + static_cast<int>(gen() % 7);
    const MachineConfig config = make_config(h, std::min(3, h - 1));
    Setpoints sp;
    sp.mu.resize(static_cast<std::size_t>(h));
    for (auto& v : sp.mu) v = unif(gen);
    const OpeningMatrix p = enumerate_combinations(config);
    const CombinationSet set = combination_distribution(p, sp, config.alpha);
    for (std::size_t i = 0; i < p.count(); ++i) {
      double direct = 0.0;
      for (std::size_t j = 0; j < p.hoppers; ++j)
        if (p.rows[i][j]) direct += (config.alpha * sp.mu[j]) * (config.alpha * sp.mu[j]);
      CHECK(set.sigma(i, i) == doctest::Approx(direct).epsilon(1e-12));
    }
  }
}

TEST_CASE("combination_distribution: permutation equivariance") {
  const MachineConfig config = make_config(5, 2);
  const OpeningMatrix p = enumerate_combinations(config);
  Setpoints sp{{210.0, 180.0, 140.0, 90.0, 60.0}};
  const CombinationSet base = combination_distribution(p, sp, config.alpha);

  std::vector<std::size_t> perm = {3, 0, 4, 1, 2};  // new hopper j holds mu[perm[j]]
  Setpoints permuted;
  permuted.mu.resize(5);
  for (std::size_t j = 0; j < 5; ++j) permuted.mu[j] = sp.mu[perm[j]];
  const CombinationSet other = combination_distribution(p, permuted, config.alpha);

  // Row map: the row whose shut set is relabeled through perm.
  std::vector<std::size_t> row_map(p.count());
  for (std::size_t i = 0; i < p.count(); ++i) {
    std::vector<std::uint8_t> relabeled(5);
    for (std::size_t j = 0; j < 5; ++j) relabeled[j] = p.rows[i][perm[j]];
    bool found = false;
    for (std::size_t i2 = 0; i2 < p.count(); ++i2) {
      if (p.rows[i2] == relabeled) {
        row_map[i] = i2;
        found = true;
        break;
      }
    }
    REQUIRE(found);
  }
  for (std::size_t i = 0; i < p.count(); ++i) {
    CHECK(other.theta[row_map[i]] == doctest::Approx(base.theta[i]).epsilon(1e-12));
    for (std::size_t i2 = 0; i2 < p.count(); ++i2)
      CHECK(other.sigma(row_map[i], row_map[i2]) == doctest::Approx(base.sigma(i, i2)).epsilon(1e-12));
  }
}

TEST_CASE("combination covariance is positive semidefinite") {
  const MachineConfig config = make_config(6, 3);
  Setpoints sp{{180.0, 160.0, 150.0, 140.0, 110.0, 55.0}};
  const CombinationSet set = combination_distribution(enumerate_combinations(config), sp, config.alpha);
  const Vector ev = oracle::symmetric_eigenvalues(set.sigma);
  double trace = 0.0;
  for (std::size_t i = 0; i < set.open.count(); ++i) trace += set.sigma(i, i);
  CHECK(ev.front() >= -1e-8 * trace);
}

TEST_CASE("integral_count: golden values") {
  const IntegralCount h1 = integral_count(1);
  CHECK(h1.count == 1.0);
  CHECK(h1.dimension == 1);
  const IntegralCount h2 = integral_count(2);
  CHECK(h2.count == 12.0);
  CHECK(h2.dimension == 3);
  const IntegralCount h3 = integral_count(3);
  CHECK(h3.count == 448.0);
  CHECK(h3.dimension == 7);
  const IntegralCount h4 = integral_count(4);
  CHECK(h4.count == 245760.0);
  CHECK(h4.dimension == 15);
  CHECK(h4.exact_integer);

  const IntegralCount h5 = integral_count(5);
  CHECK(h5.count == doctest::Approx(3.3286e10).epsilon(1e-4));
  CHECK(h5.exact_integer);  // still fits 64-bit
  const IntegralCount h8 = integral_count(8);
  CHECK(h8.count == doctest::Approx(7.3817e78).epsilon(1e-4));
  CHECK_FALSE(h8.exact_integer);  // only representable in floating form
}

TEST_CASE("setpoints validation and canonical order") {
  Setpoints sp{{100.0, 250.0, 50.0}};
  const Setpoints sorted = sp.sorted_descending();
  CHECK(sorted.mu == Vector{250.0, 100.0, 50.0});
  Setpoints bad{{100.0, -1.0}};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}
