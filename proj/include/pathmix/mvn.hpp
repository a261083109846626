#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "pathmix/errors.hpp"
#include "pathmix/rng.hpp"

namespace pathmix {

using Eigen::MatrixXd;
using Eigen::VectorXd;

inline constexpr double kDefaultCovEpsilon = 1e-4;
inline constexpr double kLog2Pi = 1.8378770664093454836;

// Standard normal CDF via erfc; keeps both tails accurate to well below
// 1e-10 in absolute terms.
inline double normal_cdf(double x) {
  return 0.5 * std::erfc(-x / std::numbers::sqrt2);
}

inline double normal_logpdf1(double x) { return -0.5 * (kLog2Pi + x * x); }

// Inverse standard normal CDF: Acklam's rational approximation followed by
// one Halley refinement against normal_cdf, near machine precision on (0,1).
inline double normal_quantile(double p) {
  if (!(p > 0.0) || !(p < 1.0)) {
    if (p == 0.0) return -std::numeric_limits<double>::infinity();
    if (p == 1.0) return std::numeric_limits<double>::infinity();
    throw NumericError("normal_quantile: p outside [0,1]");
  }
  static constexpr double a[6] = {-3.969683028665376e+01, 2.209460984245205e+02,
                                  -2.759285104469687e+02, 1.383577518672690e+02,
                                  -3.066479806614716e+01, 2.506628277459239e+00};
  static constexpr double b[5] = {-5.447609879822406e+01, 1.615858368580409e+02,
                                  -1.556989798598866e+02, 6.680131188771972e+01,
                                  -1.328068155288572e+01};
  static constexpr double c[6] = {-7.784894002430293e-03, -3.223964580411365e-01,
                                  -2.400758277161838e+00, -2.549732539343734e+00,
                                  4.374664141464968e+00,  2.938163982698783e+00};
  static constexpr double d[4] = {7.784695709041462e-03, 3.224671290700398e-01,
                                  2.445134137142996e+00, 3.754408661907416e+00};
  constexpr double p_low = 0.02425;
  double x;
  if (p < p_low) {
    const double q = std::sqrt(-2.0 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  } else if (p <= 1.0 - p_low) {
    const double q = p - 0.5;
    const double r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  } else {
    const double q = std::sqrt(-2.0 * std::log1p(-p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  // Halley step.
  const double e = normal_cdf(x) - p;
  const double u = e * std::sqrt(2.0 * std::numbers::pi) * std::exp(0.5 * x * x);
  x -= u / (1.0 + 0.5 * x * u);
  return x;
}

// Mean and covariance of one multivariate normal emission.
struct MvnParams {
  VectorXd mean;
  MatrixXd cov;

  int dim() const { return static_cast<int>(mean.size()); }
};

// Symmetrize and add epsilon to the diagonal. Weighted sample covariances
// from few effective samples are rank-deficient; the default epsilon keeps
// their factorizations stable.
inline MatrixXd regularize_cov(const MatrixXd& cov, double epsilon = kDefaultCovEpsilon) {
  if (cov.rows() != cov.cols()) throw DataError("regularize_cov: matrix not square");
  MatrixXd sym = 0.5 * (cov + cov.transpose());
  sym.diagonal().array() += epsilon;
  return sym;
}

inline Eigen::LLT<MatrixXd> factorize(const MatrixXd& cov, const char* context) {
  Eigen::LLT<MatrixXd> llt(cov);
  if (llt.info() != Eigen::Success) {
    throw NumericError(std::string(context) + ": covariance not positive-definite");
  }
  return llt;
}

// Exact multivariate normal log-density via triangular factorization.
inline double logpdf(const VectorXd& x, const Eigen::LLT<MatrixXd>& llt, const VectorXd& mean) {
  const auto& L = llt.matrixLLT();
  double logdet = 0.0;
  for (int i = 0; i < L.rows(); ++i) logdet += std::log(L(i, i));
  const VectorXd v = llt.matrixL().solve(x - mean);
  return -0.5 * (mean.size() * kLog2Pi + v.squaredNorm()) - logdet;
}

inline double logpdf(const VectorXd& x, const MvnParams& p) {
  if (x.size() != p.mean.size()) throw DataError("logpdf: dimension mismatch");
  return logpdf(x, factorize(p.cov, "logpdf"), p.mean);
}

// Log-density of every row of a sample matrix under one Gaussian; the
// factorization is shared across the batch.
inline VectorXd logpdf_rows(const MatrixXd& rows, const MvnParams& p) {
  if (rows.cols() != p.mean.size()) throw DataError("logpdf_rows: dimension mismatch");
  const auto llt = factorize(p.cov, "logpdf_rows");
  const auto& L = llt.matrixLLT();
  double logdet = 0.0;
  for (int i = 0; i < L.rows(); ++i) logdet += std::log(L(i, i));
  const double base = -0.5 * p.mean.size() * kLog2Pi - logdet;
  MatrixXd centered = rows.transpose();
  centered.colwise() -= p.mean;
  const MatrixXd v = llt.matrixL().solve(centered);
  return (-0.5 * v.colwise().squaredNorm().array() + base).transpose();
}

// Draw n samples (one per row), deterministic per seed.
inline MatrixXd sample_mvn(const MvnParams& p, int n, std::uint64_t seed) {
  if (n < 0) throw DataError("sample_mvn: negative sample count");
  const auto llt = factorize(p.cov, "sample_mvn");
  const MatrixXd L = llt.matrixL();
  auto rng = make_rng(seed);
  std::normal_distribution<double> gauss;
  const int m = p.dim();
  MatrixXd out(n, m);
  VectorXd z(m);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < m; ++j) z(j) = gauss(rng);
    out.row(i) = (p.mean + L * z).transpose();
  }
  return out;
}

namespace detail {

inline void check_index_subset(const std::vector<int>& idx, int m, const char* context) {
  std::vector<int> sorted = idx;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    if (sorted[i] < 0 || sorted[i] >= m) throw DataError(std::string(context) + ": index out of range");
    if (i > 0 && sorted[i] == sorted[i - 1]) throw DataError(std::string(context) + ": duplicate index");
  }
}

inline std::vector<int> complement_indices(const std::vector<int>& idx, int m) {
  std::vector<bool> in(m, false);
  for (int j : idx) in[j] = true;
  std::vector<int> rest;
  for (int j = 0; j < m; ++j)
    if (!in[j]) rest.push_back(j);
  return rest;
}

}  // namespace detail

// Marginal over a coordinate subset.
inline MvnParams marginal(const MvnParams& p, const std::vector<int>& idx) {
  detail::check_index_subset(idx, p.dim(), "marginal");
  const int s = static_cast<int>(idx.size());
  MvnParams out;
  out.mean.resize(s);
  out.cov.resize(s, s);
  for (int a = 0; a < s; ++a) {
    out.mean(a) = p.mean(idx[a]);
    for (int b = 0; b < s; ++b) out.cov(a, b) = p.cov(idx[a], idx[b]);
  }
  return out;
}

// Precomputed conditional of the unobserved coordinates given the observed
// subset; cond_mean is the only part that depends on the observed values.
struct MvnConditioner {
  std::vector<int> observed;
  std::vector<int> rest;
  VectorXd mean_obs;
  VectorXd mean_rest;
  MatrixXd gain;      // S_LG S_GG^{-1}
  MatrixXd cond_cov;  // S_LL - gain S_GL

  VectorXd cond_mean(const VectorXd& y) const { return mean_rest + gain * (y - mean_obs); }
};

inline MvnConditioner make_conditioner(const MvnParams& p, const std::vector<int>& observed_idx) {
  const int m = p.dim();
  detail::check_index_subset(observed_idx, m, "condition");
  if (observed_idx.empty() || static_cast<int>(observed_idx.size()) >= m)
    throw DataError("condition: observed subset must be non-empty and proper");
  MvnConditioner c;
  c.observed = observed_idx;
  std::sort(c.observed.begin(), c.observed.end());
  c.rest = detail::complement_indices(c.observed, m);
  const int g = static_cast<int>(c.observed.size());
  const int l = static_cast<int>(c.rest.size());
  MatrixXd s_gg(g, g), s_lg(l, g), s_ll(l, l);
  c.mean_obs.resize(g);
  c.mean_rest.resize(l);
  for (int a = 0; a < g; ++a) {
    c.mean_obs(a) = p.mean(c.observed[a]);
    for (int b = 0; b < g; ++b) s_gg(a, b) = p.cov(c.observed[a], c.observed[b]);
  }
  for (int a = 0; a < l; ++a) {
    c.mean_rest(a) = p.mean(c.rest[a]);
    for (int b = 0; b < g; ++b) s_lg(a, b) = p.cov(c.rest[a], c.observed[b]);
    for (int b = 0; b < l; ++b) s_ll(a, b) = p.cov(c.rest[a], c.rest[b]);
  }
  Eigen::LLT<MatrixXd> llt(s_gg);
  if (llt.info() != Eigen::Success) throw NumericError("condition: observed block singular");
  c.gain = llt.solve(s_lg.transpose()).transpose();
  c.cond_cov = s_ll - c.gain * s_lg.transpose();
  c.cond_cov = 0.5 * (c.cond_cov + c.cond_cov.transpose());
  return c;
}

// Conditional distribution of the remaining coordinates given observed values.
inline MvnParams condition(const MvnParams& p, const std::vector<int>& observed_idx,
                           const VectorXd& observed_vals) {
  if (static_cast<int>(observed_idx.size()) != observed_vals.size())
    throw DataError("condition: index/value length mismatch");
  const MvnConditioner c = make_conditioner(p, observed_idx);
  return MvnParams{c.cond_mean(observed_vals), c.cond_cov};
}

// Sign pattern of a binary vector: bit 1 asks the coordinate to be positive,
// bit 0 negative.
struct BinaryPattern {
  std::vector<std::uint8_t> bits;

  int size() const { return static_cast<int>(bits.size()); }

  std::vector<int> positive_indices() const {
    std::vector<int> idx;
    for (int j = 0; j < size(); ++j)
      if (bits[j]) idx.push_back(j);
    return idx;
  }
  std::vector<int> negative_indices() const {
    std::vector<int> idx;
    for (int j = 0; j < size(); ++j)
      if (!bits[j]) idx.push_back(j);
    return idx;
  }
};

// Monte-Carlo probability with its standard error and sample count.
struct ProbEstimate {
  double value = 0.0;
  double std_error = 0.0;
  long long sample_count = 0;

  // 3-sigma interval, clamped into [0,1] for reporting.
  std::pair<double, double> interval3() const {
    return {std::max(0.0, value - 3.0 * std_error), std::min(1.0, value + 3.0 * std_error)};
  }
};

// How the tail factor P(x_L < 0 | x_G = y) is estimated: a product of
// univariate conditional CDFs (fast, biased) or an inner Monte-Carlo over
// the exact conditional normal (consistent).
enum class TailMode { kProductCdf, kNestedMc };

inline constexpr int kNestedInnerSamples = 32;

namespace detail {

inline ProbEstimate summarize_weights(const VectorXd& w) {
  const long long k = w.size();
  const double mean = w.mean();
  double se = 0.0;
  if (k > 1) {
    const double ss = (w.array() - mean).square().sum();
    se = std::sqrt(ss / static_cast<double>(k - 1) / static_cast<double>(k));
  }
  return ProbEstimate{mean, se, k};
}

}  // namespace detail

// Monte-Carlo estimate of P(x_G > 0, x_L < 0) under p: samples y over the
// positive subset, keeps those with y > 0, and weights each by an estimate
// of the conditional tail over the negative subset.
inline ProbEstimate orthant_prob_mc(const MvnParams& p, const BinaryPattern& pattern,
                                    long long k_mc, std::uint64_t seed, TailMode mode) {
  if (k_mc < 1) throw DataError("orthant_prob_mc: sample count must be >= 1");
  if (pattern.size() != p.dim()) throw DataError("orthant_prob_mc: pattern/dimension mismatch");
  const std::vector<int> pos = pattern.positive_indices();
  const std::vector<int> neg = pattern.negative_indices();
  auto rng = make_rng(seed);
  std::normal_distribution<double> gauss;
  VectorXd w(k_mc);

  if (pos.empty()) {
    // Pure tail on the full vector.
    if (mode == TailMode::kProductCdf) {
      double prod = 1.0;
      for (int j = 0; j < p.dim(); ++j) {
        const double sd = std::sqrt(p.cov(j, j));
        if (!(sd > 0.0)) throw NumericError("orthant_prob_mc: zero variance");
        prod *= normal_cdf(-p.mean(j) / sd);
      }
      return ProbEstimate{prod, 0.0, k_mc};
    }
    const auto llt = factorize(p.cov, "orthant_prob_mc");
    const MatrixXd L = llt.matrixL();
    VectorXd z(p.dim());
    for (long long i = 0; i < k_mc; ++i) {
      for (int j = 0; j < p.dim(); ++j) z(j) = gauss(rng);
      const VectorXd x = p.mean + L * z;
      w(i) = (x.array() < 0.0).all() ? 1.0 : 0.0;
    }
    return detail::summarize_weights(w);
  }

  if (neg.empty()) {
    // Fraction of full-vector samples in the positive orthant.
    const auto llt = factorize(p.cov, "orthant_prob_mc");
    const MatrixXd L = llt.matrixL();
    VectorXd z(p.dim());
    for (long long i = 0; i < k_mc; ++i) {
      for (int j = 0; j < p.dim(); ++j) z(j) = gauss(rng);
      const VectorXd x = p.mean + L * z;
      w(i) = (x.array() > 0.0).all() ? 1.0 : 0.0;
    }
    return detail::summarize_weights(w);
  }

  const MvnConditioner cond = make_conditioner(p, pos);
  const MvnParams marg = marginal(p, pos);
  const MatrixXd Lg = factorize(marg.cov, "orthant_prob_mc").matrixL();
  const int g = static_cast<int>(pos.size());
  const int l = static_cast<int>(neg.size());

  VectorXd cond_sd;
  MatrixXd Lc;
  if (mode == TailMode::kProductCdf) {
    cond_sd = cond.cond_cov.diagonal().array().sqrt();
    if (!(cond_sd.array() > 0.0).all()) throw NumericError("orthant_prob_mc: zero conditional variance");
  } else {
    Lc = factorize(regularize_cov(cond.cond_cov, 1e-12), "orthant_prob_mc").matrixL();
  }

  VectorXd z(g), y(g), u(l), v(l);
  for (long long i = 0; i < k_mc; ++i) {
    for (int j = 0; j < g; ++j) z(j) = gauss(rng);
    y = marg.mean + Lg * z;
    if (!(y.array() > 0.0).all()) {
      w(i) = 0.0;
      if (mode == TailMode::kNestedMc) {
        // Keep the stream aligned so estimates for different patterns under
        // the same seed stay independent of acceptance order.
        for (int s = 0; s < kNestedInnerSamples * l; ++s) gauss(rng);
      }
      continue;
    }
    const VectorXd cm = cond.cond_mean(y);
    if (mode == TailMode::kProductCdf) {
      double prod = 1.0;
      for (int j = 0; j < l; ++j) prod *= normal_cdf(-cm(j) / cond_sd(j));
      w(i) = prod;
    } else {
      int hits = 0;
      for (int s = 0; s < kNestedInnerSamples; ++s) {
        for (int j = 0; j < l; ++j) u(j) = gauss(rng);
        v = cm + Lc * u;
        if ((v.array() < 0.0).all()) ++hits;
      }
      w(i) = static_cast<double>(hits) / kNestedInnerSamples;
    }
  }
  return detail::summarize_weights(w);
}

namespace detail {

// Gauss-Legendre nodes/weights on (0,1), by Newton iteration on P_n.
inline void gauss_legendre_unit(int n, std::vector<double>& nodes, std::vector<double>& weights) {
  nodes.resize(n);
  weights.resize(n);
  for (int i = 0; i < (n + 1) / 2; ++i) {
    double x = std::cos(std::numbers::pi * (i + 0.75) / (n + 0.5));
    double p0 = 0.0, p1 = 0.0;
    for (int iter = 0; iter < 100; ++iter) {
      p0 = 1.0;
      p1 = 0.0;
      for (int j = 0; j < n; ++j) {
        const double p2 = p1;
        p1 = p0;
        p0 = ((2.0 * j + 1.0) * x * p1 - j * p2) / (j + 1.0);
      }
      const double dp = n * (x * p0 - p1) / (x * x - 1.0);
      const double dx = p0 / dp;
      x -= dx;
      if (std::abs(dx) < 1e-15) break;
    }
    const double dp = n * (x * p0 - p1) / (x * x - 1.0);
    nodes[i] = 0.5 * (1.0 - x);
    nodes[n - 1 - i] = 0.5 * (1.0 + x);
    weights[i] = weights[n - 1 - i] = 1.0 / ((1.0 - x * x) * dp * dp);
  }
}

}  // namespace detail

// Orthant probability for m <= 4 by sequential conditioning over the
// Cholesky factor: the first m-1 transformed coordinates are integrated on
// a tensor Gauss-Legendre grid, refined until successive grids agree to
// 1e-7; the innermost coordinate is a single CDF evaluation.
inline double orthant_prob_exact_small(const MvnParams& p, const BinaryPattern& pattern) {
  const int m = p.dim();
  if (m > 4) throw DataError("orthant_prob_exact_small: dimension must be <= 4");
  if (pattern.size() != m) throw DataError("orthant_prob_exact_small: pattern/dimension mismatch");
  const MatrixXd L = factorize(p.cov, "orthant_prob_exact_small").matrixL();
  const double inf = std::numeric_limits<double>::infinity();
  VectorXd lo(m), hi(m);
  for (int j = 0; j < m; ++j) {
    lo(j) = pattern.bits[j] ? 0.0 : -inf;
    hi(j) = pattern.bits[j] ? inf : 0.0;
  }

  const auto phi_clamped = [](double x) { return normal_cdf(x); };
  const auto inv_clamped = [](double u) {
    return normal_quantile(std::clamp(u, 1e-300, 1.0 - 1e-16));
  };

  const double d1 = std::isinf(lo(0)) ? 0.0 : phi_clamped((lo(0) - p.mean(0)) / L(0, 0));
  const double e1 = std::isinf(hi(0)) ? 1.0 : phi_clamped((hi(0) - p.mean(0)) / L(0, 0));
  if (m == 1) return e1 - d1;

  const int qdim = m - 1;
  const auto integrand = [&](const double* wpt) {
    double prod = e1 - d1;
    double d = d1, e = e1;
    VectorXd y(m);
    for (int i = 1; i < m; ++i) {
      if (prod <= 0.0) return 0.0;
      y(i - 1) = inv_clamped(d + wpt[i - 1] * (e - d));
      double t = 0.0;
      for (int j = 0; j < i; ++j) t += L(i, j) * y(j);
      d = std::isinf(lo(i)) ? 0.0 : phi_clamped((lo(i) - p.mean(i) - t) / L(i, i));
      e = std::isinf(hi(i)) ? 1.0 : phi_clamped((hi(i) - p.mean(i) - t) / L(i, i));
      prod *= std::max(0.0, e - d);
    }
    return prod;
  };

  double prev = -1.0;
  std::vector<double> nodes, weights;
  for (int n = 8; n <= 256; n *= 2) {
    detail::gauss_legendre_unit(n, nodes, weights);
    double total = 0.0;
    int idx[3] = {0, 0, 0};
    const long long cells = static_cast<long long>(std::pow(n, qdim));
    for (long long c = 0; c < cells; ++c) {
      long long rem = c;
      double wprod = 1.0;
      double pt[3];
      for (int dmn = 0; dmn < qdim; ++dmn) {
        idx[dmn] = static_cast<int>(rem % n);
        rem /= n;
        pt[dmn] = nodes[idx[dmn]];
        wprod *= weights[idx[dmn]];
      }
      total += wprod * integrand(pt);
    }
    if (prev >= 0.0 && std::abs(total - prev) < 1e-7) return total;
    prev = total;
  }
  return prev;
}

// Reward used when the orthant probability feeds a gradient signal: the
// product of univariate conditional tail CDFs over the negative subset
// times the fraction of positive-subset coordinates that landed positive.
// Empty subsets contribute a neutral factor of 1.
inline double smoothed_orthant_reward(const VectorXd& y, const MvnConditioner* cond,
                                      const MvnParams& p, const BinaryPattern& pattern) {
  const std::vector<int> pos = pattern.positive_indices();
  const std::vector<int> neg = pattern.negative_indices();
  if (static_cast<int>(pos.size()) != y.size())
    throw DataError("smoothed_orthant_reward: y must cover the positive subset");
  double frac = 1.0;
  if (!pos.empty()) {
    int hits = 0;
    for (int j = 0; j < y.size(); ++j)
      if (y(j) > 0.0) ++hits;
    frac = static_cast<double>(hits) / static_cast<double>(pos.size());
  }
  double prod = 1.0;
  if (!neg.empty()) {
    if (pos.empty()) {
      for (int j : neg) {
        const double sd = std::sqrt(p.cov(j, j));
        if (!(sd > 0.0)) throw NumericError("smoothed_orthant_reward: zero variance");
        prod *= normal_cdf(-p.mean(j) / sd);
      }
    } else {
      const VectorXd cm = cond->cond_mean(y);
      for (int j = 0; j < cm.size(); ++j) {
        const double sd = std::sqrt(cond->cond_cov(j, j));
        if (!(sd > 0.0)) throw NumericError("smoothed_orthant_reward: zero conditional variance");
        prod *= normal_cdf(-cm(j) / sd);
      }
    }
  }
  return prod * frac;
}

inline double smoothed_orthant_reward(const VectorXd& y, const MvnParams& p,
                                      const BinaryPattern& pattern) {
  const std::vector<int> pos = pattern.positive_indices();
  const std::vector<int> neg = pattern.negative_indices();
  if (!pos.empty() && !neg.empty()) {
    const MvnConditioner cond = make_conditioner(p, pos);
    return smoothed_orthant_reward(y, &cond, p, pattern);
  }
  return smoothed_orthant_reward(y, nullptr, p, pattern);
}

}  // namespace pathmix
