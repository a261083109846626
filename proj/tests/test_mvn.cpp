#include <catch2/catch_amalgamated.hpp>

#include "oracles.hpp"
#include "pathmix/mvn.hpp"

using namespace pathmix;

TEST_CASE("normal_cdf matches high-precision reference values") {
  // Reference values computed with mpmath (50 digits), frozen here.
  struct Ref {
    double x, phi;
  };
  const Ref refs[] = {
      {0.0, 0.5},
      {1.0, 0.84134474606854294859},
      {-1.0, 0.15865525393145705141},
      {2.0, 0.9772498680518207928},
      {-2.0, 0.0227501319481792072},
      {6.0, 0.99999999901341235496},
      {-6.0, 9.865876450376981407e-10},
  };
  for (const auto& r : refs) {
    REQUIRE(std::abs(normal_cdf(r.x) - r.phi) < 1e-10);
  }
}

TEST_CASE("normal_quantile inverts normal_cdf") {
  for (double p : {1e-12, 1e-6, 0.02, 0.2425, 0.5, 0.7, 0.97, 1.0 - 1e-9}) {
    const double x = normal_quantile(p);
    REQUIRE(std::abs(normal_cdf(x) - p) < 1e-13 * std::max(1.0, std::abs(x)));
  }
  REQUIRE(normal_quantile(0.5) == Catch::Approx(0.0).margin(1e-15));
}

TEST_CASE("logpdf standard normal modes") {
  MvnParams p1{VectorXd::Zero(1), MatrixXd::Identity(1, 1)};
  REQUIRE(logpdf(VectorXd::Zero(1), p1) == Catch::Approx(-0.5 * std::log(2.0 * std::numbers::pi)).epsilon(1e-14));

  MvnParams p2{VectorXd::Zero(2), MatrixXd::Identity(2, 2)};
  REQUIRE(logpdf(VectorXd::Zero(2), p2) == Catch::Approx(-std::log(2.0 * std::numbers::pi)).epsilon(1e-14));
}

TEST_CASE("logpdf agrees with dense-formula evaluation") {
  const int m = 3;
  const MatrixXd cov = oracles::random_spd(m, 11);
  const VectorXd mean = oracles::random_vector(m, 12);
  const MvnParams p{mean, cov};
  for (std::uint64_t s = 0; s < 5; ++s) {
    const VectorXd x = oracles::random_vector(m, 100 + s);
    REQUIRE(std::abs(logpdf(x, p) - oracles::dense_logpdf(x, mean, cov)) < 1e-10);
  }
}

TEST_CASE("logpdf_rows matches per-row logpdf") {
  const MvnParams p{oracles::random_vector(4, 3), oracles::random_spd(4, 4)};
  const MatrixXd rows = sample_mvn(p, 6, 99);
  const VectorXd batch = logpdf_rows(rows, p);
  for (int i = 0; i < rows.rows(); ++i) {
    REQUIRE(batch(i) == Catch::Approx(logpdf(rows.row(i).transpose(), p)).epsilon(1e-12));
  }
}

TEST_CASE("logpdf rejects non positive-definite covariance") {
  MvnParams p{VectorXd::Zero(2), MatrixXd::Zero(2, 2)};
  p.cov << 1.0, 2.0, 2.0, 1.0;
  REQUIRE_THROWS_AS(logpdf(VectorXd::Zero(2), p), NumericError);
}

TEST_CASE("sample_mvn is deterministic and collapses at tiny covariance") {
  MvnParams p{VectorXd::Constant(3, 2.5), 1e-12 * MatrixXd::Identity(3, 3)};
  const MatrixXd a = sample_mvn(p, 10, 42);
  const MatrixXd b = sample_mvn(p, 10, 42);
  REQUIRE((a - b).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE((a.array() - 2.5).abs().maxCoeff() < 1e-4);
}

TEST_CASE("sample_mvn mean converges at CLT scale") {
  MvnParams p{VectorXd::Zero(2), MatrixXd::Identity(2, 2)};
  const MatrixXd s = sample_mvn(p, 1'000'000, 7);
  REQUIRE(s.colwise().mean().cwiseAbs().maxCoeff() < 4e-3);
}

TEST_CASE("sample_mvn moments converge to the target distribution") {
  const MvnParams p{oracles::random_vector(3, 21), oracles::random_spd(3, 22)};
  const int n = 200'000;
  const MatrixXd s = sample_mvn(p, n, 5);
  const VectorXd mean = s.colwise().mean().transpose();
  MatrixXd centered = s.rowwise() - mean.transpose();
  const MatrixXd cov = centered.transpose() * centered / (n - 1);
  REQUIRE((mean - p.mean).cwiseAbs().maxCoeff() < 0.02);
  REQUIRE((cov - p.cov).cwiseAbs().maxCoeff() < 0.03);
}

TEST_CASE("condition: diagonal covariance leaves the marginal unchanged") {
  MvnParams p{VectorXd::Zero(3), MatrixXd::Identity(3, 3)};
  p.mean << 1.0, -2.0, 0.5;
  const MvnParams c = condition(p, {0}, VectorXd::Constant(1, 10.0));
  REQUIRE(c.mean(0) == Catch::Approx(-2.0));
  REQUIRE(c.mean(1) == Catch::Approx(0.5));
  REQUIRE((c.cov - MatrixXd::Identity(2, 2)).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("condition: textbook bivariate identity") {
  MvnParams p{VectorXd::Zero(2), oracles::equicorrelated(2, 0.5)};
  const MvnParams c = condition(p, {0}, VectorXd::Constant(1, 1.0));
  REQUIRE(c.mean(0) == Catch::Approx(0.5).epsilon(1e-12));
  REQUIRE(c.cov(0, 0) == Catch::Approx(0.75).epsilon(1e-12));
}

TEST_CASE("condition agrees with dense-formula evaluation") {
  const int m = 4;
  const MvnParams p{oracles::random_vector(m, 31), oracles::random_spd(m, 32)};
  const std::vector<int> obs{1, 3};
  VectorXd vals(2);
  vals << 0.7, -0.4;
  const MvnParams c = condition(p, obs, vals);
  const auto ref = oracles::dense_condition(p.mean, p.cov, obs, vals);
  REQUIRE((c.mean - ref.mean).cwiseAbs().maxCoeff() < 1e-10);
  REQUIRE((c.cov - ref.cov).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("condition/marginal agree with dense formulas on random instances") {
  for (std::uint64_t s = 0; s < 10; ++s) {
    const int m = 3 + static_cast<int>(s % 6);  // up to 8
    const MvnParams p{oracles::random_vector(m, 500 + s), oracles::random_spd(m, 600 + s)};
    std::vector<int> obs;
    for (int j = 0; j < m - 1; j += 2) obs.push_back(j);
    const VectorXd vals = oracles::random_vector(static_cast<int>(obs.size()), 700 + s);
    const MvnParams c = condition(p, obs, vals);
    const auto ref = oracles::dense_condition(p.mean, p.cov, obs, vals);
    REQUIRE((c.mean - ref.mean).cwiseAbs().maxCoeff() < 1e-10);
    REQUIRE((c.cov - ref.cov).cwiseAbs().maxCoeff() < 1e-10);

    const MvnParams marg = marginal(p, obs);
    for (std::size_t a = 0; a < obs.size(); ++a) {
      REQUIRE(marg.mean(a) == p.mean(obs[a]));
      for (std::size_t b = 0; b < obs.size(); ++b) {
        REQUIRE(marg.cov(a, b) == p.cov(obs[a], obs[b]));
      }
    }
  }
}

TEST_CASE("condition input validation") {
  const MvnParams p{VectorXd::Zero(3), MatrixXd::Identity(3, 3)};
  REQUIRE_THROWS_AS(condition(p, {0, 1, 2}, VectorXd::Zero(3)), DataError);
  REQUIRE_THROWS_AS(condition(p, {0, 0}, VectorXd::Zero(2)), DataError);
  REQUIRE_THROWS_AS(condition(p, {5}, VectorXd::Zero(1)), DataError);
}

TEST_CASE("regularize_cov") {
  const MatrixXd z = regularize_cov(MatrixXd::Zero(3, 3), 1e-4);
  REQUIRE((z - 1e-4 * MatrixXd::Identity(3, 3)).cwiseAbs().maxCoeff() == 0.0);

  const MatrixXd spd = oracles::random_spd(3, 8);
  const MatrixXd r = regularize_cov(spd, 0.25);
  Eigen::SelfAdjointEigenSolver<MatrixXd> before(spd), after(r);
  for (int i = 0; i < 3; ++i) {
    REQUIRE(after.eigenvalues()(i) == Catch::Approx(before.eigenvalues()(i) + 0.25).epsilon(1e-10));
  }

  // Rank-deficient covariance from two points in R^3 becomes factorizable.
  MatrixXd pts(2, 3);
  pts << 1.0, 2.0, 3.0, -1.0, 0.0, 1.0;
  const VectorXd mean = pts.colwise().mean().transpose();
  MatrixXd centered = pts.rowwise() - mean.transpose();
  const MatrixXd cov = centered.transpose() * centered / 2.0;
  REQUIRE_NOTHROW(factorize(regularize_cov(cov, 1e-4), "test"));
}
