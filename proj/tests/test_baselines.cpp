#include <catch2/catch_amalgamated.hpp>

#include "oracles.hpp"
#include "pathmix/baselines.hpp"

using namespace pathmix;

namespace {

Cohort cohort_from_rows(const std::vector<std::vector<int>>& rows, int timesteps) {
  const int courses = static_cast<int>(rows.at(0).size()) / timesteps;
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < rows.size(); ++i) ids.push_back("s" + std::to_string(i));
  Cohort c(make_synthetic_vocabulary(courses), timesteps, ids);
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (int v = 0; v < static_cast<int>(rows[i].size()); ++v)
      if (rows[i][v]) c.set(static_cast<int>(i), v / courses, v % courses, true);
  return c;
}

// Direct linear-domain mixture evaluation, used as the enumeration oracle
// for small instances.
double direct_nb_prob(const NaiveBayesParams& p, const std::vector<int>& x) {
  double total = 0.0;
  for (int k = 0; k < p.k_classes; ++k) {
    double prod = p.theta(k);
    for (int v = 0; v < p.flat_dim(); ++v)
      prod *= x[v] ? p.phi(k, v) : 1.0 - p.phi(k, v);
    total += prod;
  }
  return total;
}

void require_monotone(const std::vector<double>& trace, double rel_slack) {
  for (std::size_t i = 1; i < trace.size(); ++i) {
    REQUIRE(trace[i] >= trace[i - 1] - rel_slack * std::abs(trace[i - 1]));
  }
}

}  // namespace

TEST_CASE("nb_fit_em with one class reduces to clamped empirical frequencies") {
  const Cohort c = cohort_from_rows({{1, 0, 1}, {1, 1, 0}, {1, 0, 0}, {1, 0, 1}}, 1);
  const NbFit fit = nb_fit_em(c, 1, 50, 1e-9, 3);
  REQUIRE(fit.params.theta(0) == Catch::Approx(1.0));
  REQUIRE(fit.params.phi(0, 0) == Catch::Approx(1.0 - kBernoulliClamp));
  REQUIRE(fit.params.phi(0, 1) == Catch::Approx(0.25));
  REQUIRE(fit.params.phi(0, 2) == Catch::Approx(0.5));
}

TEST_CASE("nb_fit_em recovers two deterministic blocks") {
  std::vector<std::vector<int>> rows;
  for (int i = 0; i < 20; ++i) rows.push_back({1, 1, 1, 0, 0, 0});
  for (int i = 0; i < 20; ++i) rows.push_back({0, 0, 0, 1, 1, 1});
  const Cohort c = cohort_from_rows(rows, 1);
  const NbFit fit = nb_fit_em(c, 2, 200, 1e-10, 11);
  require_monotone(fit.trace, 1e-9);

  // Align classes to blocks by the first coordinate.
  const int a = fit.params.phi(0, 0) > 0.5 ? 0 : 1;
  const int b = 1 - a;
  for (int v = 0; v < 3; ++v) {
    REQUIRE(fit.params.phi(a, v) > 0.95);
    REQUIRE(fit.params.phi(b, v) < 0.05);
  }
  for (int v = 3; v < 6; ++v) {
    REQUIRE(fit.params.phi(a, v) < 0.05);
    REQUIRE(fit.params.phi(b, v) > 0.95);
  }
  REQUIRE(fit.params.theta(0) == Catch::Approx(0.5).margin(0.05));
}

TEST_CASE("nb_fit_em trace is monotone on a noisy cohort") {
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<double> unif;
  std::vector<std::vector<int>> rows;
  for (int i = 0; i < 60; ++i) {
    std::vector<int> r(8);
    for (auto& v : r) v = unif(rng) < 0.4 ? 1 : 0;
    rows.push_back(r);
  }
  const Cohort c = cohort_from_rows(rows, 2);
  const NbFit fit = nb_fit_em(c, 3, 80, 0.0, 5);
  require_monotone(fit.trace, 1e-9);
  REQUIRE_THROWS_AS(nb_fit_em(c, 61, 10, 1e-6, 1), DataError);
}

TEST_CASE("model_loglik matches direct enumeration-style evaluation") {
  NaiveBayesParams p;
  p.k_classes = 2;
  p.timesteps = 1;
  p.courses = 3;
  p.theta = VectorXd(2);
  p.theta << 0.3, 0.7;
  p.phi = MatrixXd(2, 3);
  p.phi << 0.2, 0.5, 0.9, 0.7, 0.1, 0.4;

  const std::vector<std::vector<int>> rows = {{0, 0, 0}, {1, 0, 1}, {1, 1, 1}};
  const Cohort c = cohort_from_rows(rows, 1);
  const VectorXd ll = model_loglik(p, c);
  for (int i = 0; i < 3; ++i) {
    REQUIRE(ll(i) == Catch::Approx(std::log(direct_nb_prob(p, rows[i]))).epsilon(1e-12));
  }

  // K=1 with all-0.5 Bernoullis: T*M * ln(1/2) for every student.
  NaiveBayesParams half;
  half.k_classes = 1;
  half.timesteps = 1;
  half.courses = 3;
  half.theta = VectorXd::Ones(1);
  half.phi = MatrixXd::Constant(1, 3, 0.5);
  const VectorXd ll_half = model_loglik(half, c);
  for (int i = 0; i < 3; ++i) REQUIRE(ll_half(i) == Catch::Approx(3.0 * std::log(0.5)));
}

TEST_CASE("model_loglik near log theta for a saturated matching pattern") {
  NaiveBayesParams p;
  p.k_classes = 2;
  p.timesteps = 1;
  p.courses = 4;
  p.theta = VectorXd(2);
  p.theta << 0.25, 0.75;
  p.phi = MatrixXd(2, 4);
  p.phi << 1.0 - kBernoulliClamp, 1.0 - kBernoulliClamp, kBernoulliClamp, kBernoulliClamp,
      kBernoulliClamp, kBernoulliClamp, 1.0 - kBernoulliClamp, 1.0 - kBernoulliClamp;
  const Cohort c = cohort_from_rows({{1, 1, 0, 0}}, 1);
  const VectorXd ll = model_loglik(p, c);
  REQUIRE(ll(0) == Catch::Approx(std::log(0.25)).margin(1e-3));
}

TEST_CASE("nb model_sample: determinism, saturation, and analytic marginals") {
  NaiveBayesParams p;
  p.k_classes = 2;
  p.timesteps = 2;
  p.courses = 3;
  p.theta = VectorXd(2);
  p.theta << 0.4, 0.6;
  p.phi = MatrixXd(2, 6);
  p.phi << 0.2, 0.8, 0.5, 0.3, 0.6, 0.7, 0.7, 0.3, 0.4, 0.6, 0.2, 0.5;

  const Cohort a = model_sample(p, 50, 17);
  const Cohort b = model_sample(p, 50, 17);
  for (int i = 0; i < 50; ++i)
    for (int t = 0; t < 2; ++t)
      for (int j = 0; j < 3; ++j) REQUIRE(a(i, t, j) == b(i, t, j));

  const int n = 50000;
  const Cohort big = model_sample(p, n, 23);
  for (int v = 0; v < 6; ++v) {
    const double expected = p.theta(0) * p.phi(0, v) + p.theta(1) * p.phi(1, v);
    double freq = 0.0;
    for (int i = 0; i < n; ++i) freq += big(i, v / 3, v % 3);
    freq /= n;
    const double se = std::sqrt(expected * (1.0 - expected) / n);
    REQUIRE(std::abs(freq - expected) < 3.0 * se + 1e-9);
  }

  NaiveBayesParams sat = p;
  sat.phi.setConstant(1.0 - kBernoulliClamp);
  const Cohort ones = model_sample(sat, 30, 5);
  REQUIRE(ones.total_enrollments() == 30 * 6);
}

TEST_CASE("sampling then fitting recovers marginal frequencies") {
  NaiveBayesParams p;
  p.k_classes = 2;
  p.timesteps = 1;
  p.courses = 4;
  p.theta = VectorXd(2);
  p.theta << 0.5, 0.5;
  p.phi = MatrixXd(2, 4);
  p.phi << 0.2, 0.7, 0.4, 0.6, 0.8, 0.3, 0.5, 0.4;
  const int n = 50000;
  const Cohort sample = model_sample(p, n, 31);
  const NbFit fit = nb_fit_em(sample, 2, 40, 1e-8, 7);
  for (int v = 0; v < 4; ++v) {
    const double target = p.theta(0) * p.phi(0, v) + p.theta(1) * p.phi(1, v);
    const double fitted = fit.params.theta(0) * fit.params.phi(0, v) +
                          fit.params.theta(1) * fit.params.phi(1, v);
    const double se = std::sqrt(target * (1.0 - target) / n);
    REQUIRE(std::abs(fitted - target) < 3.0 * se + 1e-6);
  }
}

TEST_CASE("tan_fit_em links deterministically copied variables") {
  std::mt19937_64 rng(41);
  std::uniform_real_distribution<double> unif;
  std::vector<std::vector<int>> rows;
  for (int i = 0; i < 200; ++i) {
    std::vector<int> r(4);
    r[0] = unif(rng) < 0.5 ? 1 : 0;
    r[1] = unif(rng) < 0.5 ? 1 : 0;
    r[2] = r[1];  // exact copy
    r[3] = unif(rng) < 0.3 ? 1 : 0;
    rows.push_back(r);
  }
  const Cohort c = cohort_from_rows(rows, 1);
  const TanFit fit = tan_fit_em(c, 1, 30, 1e-10, 1);
  require_monotone(fit.trace, 1e-9);

  const auto& parent = fit.params.parent[0];
  REQUIRE((parent[2] == 1 || parent[1] == 2));
  const int child = parent[2] == 1 ? 2 : 1;
  REQUIRE(fit.params.cpt[0](child, 1) >= 1.0 - 2.0 * kBernoulliClamp);
  REQUIRE(fit.params.cpt[0](child, 0) <= 2.0 * kBernoulliClamp);

  // Valid spanning tree: single root, parents acyclic.
  int roots = 0;
  for (int v = 0; v < 4; ++v)
    if (parent[v] == -1) ++roots;
  REQUIRE(roots == 1);
  REQUIRE(parent[0] == -1);  // rooted at variable 0
}

TEST_CASE("tan on independent variables stays close to naive Bayes") {
  std::mt19937_64 rng(77);
  std::uniform_real_distribution<double> unif;
  const std::vector<double> probs = {0.3, 0.5, 0.7, 0.4, 0.6, 0.2};
  std::vector<std::vector<int>> rows;
  for (int i = 0; i < 400; ++i) {
    std::vector<int> r(6);
    for (int v = 0; v < 6; ++v) r[v] = unif(rng) < probs[v] ? 1 : 0;
    rows.push_back(r);
  }
  const Cohort c = cohort_from_rows(rows, 2);
  const NbFit nb = nb_fit_em(c, 1, 30, 1e-10, 2);
  const TanFit tan = tan_fit_em(c, 1, 30, 1e-10, 2);
  const double nb_ll = model_loglik(nb.params, c).sum();
  const double tan_ll = model_loglik(tan.params, c).sum();
  REQUIRE(tan_ll >= nb_ll - 1e-6);               // trees can only add fit
  REQUIRE((tan_ll - nb_ll) / 400.0 < 0.05);      // but only noise-level here
}

TEST_CASE("tan_fit_em trace is monotone on a mixed cohort") {
  std::mt19937_64 rng(123);
  std::uniform_real_distribution<double> unif;
  std::vector<std::vector<int>> rows;
  for (int i = 0; i < 80; ++i) {
    std::vector<int> r(6);
    const bool block = i % 2 == 0;
    for (int v = 0; v < 6; ++v) {
      const double p = block == (v < 3) ? 0.8 : 0.2;
      r[v] = unif(rng) < p ? 1 : 0;
    }
    rows.push_back(r);
  }
  const Cohort c = cohort_from_rows(rows, 1);
  const TanFit fit = tan_fit_em(c, 2, 60, 0.0, 9);
  require_monotone(fit.trace, 1e-9);
}

TEST_CASE("tan model_sample hits analytic marginals") {
  // Chain 0 -> 1 -> 2 with known CPTs, single class.
  TanParams p;
  p.k_classes = 1;
  p.timesteps = 1;
  p.courses = 3;
  p.theta = VectorXd::Ones(1);
  p.parent = {{-1, 0, 1}};
  p.cpt = {MatrixXd(3, 2)};
  p.cpt[0] << 0.6, 0.6, 0.2, 0.9, 0.7, 0.3;
  const int n = 50000;
  const Cohort s = model_sample(p, n, 13);
  const double p0 = 0.6;
  const double p1 = 0.4 * 0.2 + 0.6 * 0.9;
  const double p2 = (1.0 - p1) * 0.7 + p1 * 0.3;
  const double expected[3] = {p0, p1, p2};
  for (int v = 0; v < 3; ++v) {
    double freq = 0.0;
    for (int i = 0; i < n; ++i) freq += s(i, 0, v);
    freq /= n;
    const double se = std::sqrt(expected[v] * (1.0 - expected[v]) / n);
    REQUIRE(std::abs(freq - expected[v]) < 3.5 * se);
  }
}
