#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "pathmix/cmm.hpp"
#include "pathmix/mvn.hpp"
#include "pathmix/rng.hpp"

namespace pathmix {

// Score-function (likelihood-ratio) gradient of the log smoothed-pattern
// probability for one emission/pattern pair. The emission is treated as a
// stochastic policy over the positive-subset draw y; the smoothed reward is
// not differentiated through its own parameter dependence.
struct PatternGradient {
  double log_prob = 0.0;
  double mean_reward = 0.0;
  double baseline = 0.0;
  VectorXd grad_mean;  // d log_prob / d mean, full dimension (zeros off the positive set)
  MatrixXd grad_chol;  // d log_prob / d tril(L), L the factor of the full covariance
};

// RNG discipline: exactly k_mc * |G| normal draws in sample-major,
// coordinate-minor order; tests reproduce the stream to build frozen-seed
// finite-difference references.
inline PatternGradient pattern_score_gradient(const MvnParams& emission, const BinaryPattern& pattern,
                                              long long k_mc, std::uint64_t seed,
                                              bool use_baseline = true) {
  if (k_mc < 1) throw DataError("pattern_score_gradient: k_mc must be >= 1");
  if (pattern.size() != emission.dim()) throw DataError("pattern_score_gradient: pattern mismatch");
  const int m = emission.dim();
  const std::vector<int> pos = pattern.positive_indices();
  const std::vector<int> neg = pattern.negative_indices();

  PatternGradient out;
  out.grad_mean = VectorXd::Zero(m);
  out.grad_chol = MatrixXd::Zero(m, m);

  if (pos.empty()) {
    // Nothing is sampled; the reward is deterministic and the score term
    // vanishes everywhere.
    double prod = 1.0;
    for (int j : neg) prod *= normal_cdf(-emission.mean(j) / std::sqrt(emission.cov(j, j)));
    out.mean_reward = prod;
    out.baseline = use_baseline ? prod : 0.0;
    out.log_prob = prod > 0.0 ? std::log(prod) : -std::numeric_limits<double>::infinity();
    return out;
  }

  const MvnParams marg = marginal(emission, pos);
  const auto llt = factorize(marg.cov, "pattern_score_gradient");
  const MatrixXd Lg = llt.matrixL();
  const int g = static_cast<int>(pos.size());
  const MatrixXd prec = llt.solve(MatrixXd::Identity(g, g));
  MvnConditioner cond;
  if (!neg.empty()) cond = make_conditioner(emission, pos);

  auto rng = make_rng(seed);
  std::normal_distribution<double> gauss;
  VectorXd z(g), y(g), score(g);
  double sum_r = 0.0;
  VectorXd sum_score = VectorXd::Zero(g);
  VectorXd sum_r_score = VectorXd::Zero(g);
  MatrixXd sum_smat = MatrixXd::Zero(g, g);
  MatrixXd sum_r_smat = MatrixXd::Zero(g, g);
  for (long long s = 0; s < k_mc; ++s) {
    for (int j = 0; j < g; ++j) z(j) = gauss(rng);
    y = marg.mean + Lg * z;
    const double r = smoothed_orthant_reward(y, neg.empty() ? nullptr : &cond, emission, pattern);
    score = llt.matrixU().solve(z);  // Sigma_GG^{-1} (y - mu_G) = L^{-T} z
    const MatrixXd smat = 0.5 * (score * score.transpose() - prec);
    sum_r += r;
    sum_score += score;
    sum_r_score += r * score;
    sum_smat += smat;
    sum_r_smat += r * smat;
  }

  const double kd = static_cast<double>(k_mc);
  out.mean_reward = sum_r / kd;
  out.baseline = use_baseline ? out.mean_reward : 0.0;
  out.log_prob = out.mean_reward > 0.0 ? std::log(out.mean_reward)
                                       : -std::numeric_limits<double>::infinity();
  if (out.mean_reward > 0.0) {
    const VectorXd g_mean = (sum_r_score - out.baseline * sum_score) / kd / out.mean_reward;
    const MatrixXd g_cov = (sum_r_smat - out.baseline * sum_smat) / kd / out.mean_reward;
    MatrixXd g_cov_full = MatrixXd::Zero(m, m);
    for (int a = 0; a < g; ++a) {
      out.grad_mean(pos[a]) = g_mean(a);
      for (int b = 0; b < g; ++b) g_cov_full(pos[a], pos[b]) = g_cov(a, b);
    }
    const MatrixXd l_full = factorize(emission.cov, "pattern_score_gradient").matrixL();
    out.grad_chol = (2.0 * g_cov_full * l_full).triangularView<Eigen::Lower>();
  }
  return out;
}

struct RefineResult {
  CmmParams params;
  std::vector<double> trace;  // objective per step, before that step's update
  std::vector<std::string> events;
};

// Emission refinement against the smoothed binary-pattern objective:
// J = (1/N) sum_i sum_t sum_k gamma_i(t,k) log p_hat(pattern_i^t; t,k),
// with gamma recomputed from the current parameters each step and p_hat the
// Monte-Carlo smoothed-reward average. Ascends mean and covariance factor;
// theta and transitions stay fixed. No monotonicity is guaranteed.
inline RefineResult refine_policy_gradient(const CmmParams& start, const Cohort& c, int steps,
                                           double learning_rate, long long k_mc,
                                           std::uint64_t seed) {
  if (steps < 1) throw DataError("refine_policy_gradient: steps must be >= 1");
  if (k_mc < 1) throw DataError("refine_policy_gradient: k_mc must be >= 1");
  start.validate();
  if (c.timesteps() != start.timesteps || c.num_courses() != start.courses)
    throw DataError("refine_policy_gradient: cohort shape mismatch");
  constexpr double kRewardFloor = 1e-300;

  RefineResult out;
  out.params = start;
  const int n = c.num_students();
  const RelaxedCohort x = shift_to_pm1(c);

  // Group students sharing a timestep pattern once; responsibilities vary
  // per step but the groups do not.
  struct Group {
    BinaryPattern pattern;
    std::vector<int> members;
  };
  std::vector<std::vector<Group>> groups(c.timesteps());
  for (int t = 0; t < c.timesteps(); ++t) {
    std::map<std::vector<std::uint8_t>, std::vector<int>> by_bits;
    for (int i = 0; i < n; ++i) {
      std::vector<std::uint8_t> bits(c.num_courses());
      for (int j = 0; j < c.num_courses(); ++j) bits[j] = c(i, t, j);
      by_bits[bits].push_back(i);
    }
    for (auto& [bits, members] : by_bits)
      groups[t].push_back(Group{BinaryPattern{bits}, std::move(members)});
  }

  CmmParams last_finite = out.params;
  for (int step = 0; step < steps; ++step) {
    const auto likes = pm1_loglike(out.params, x);
    detail::CmmSuffStats stats;
    detail::cmm_e_step(out.params, likes, 1, stats);

    double objective = 0.0;
    bool finite = true;
    std::vector<std::vector<VectorXd>> mean_updates(c.timesteps());
    std::vector<std::vector<MatrixXd>> chol_updates(c.timesteps());
    for (int t = 0; t < c.timesteps() && finite; ++t) {
      mean_updates[t].assign(out.params.k_states, VectorXd::Zero(c.num_courses()));
      chol_updates[t].assign(out.params.k_states, MatrixXd::Zero(c.num_courses(), c.num_courses()));
      for (std::size_t gi = 0; gi < groups[t].size() && finite; ++gi) {
        const Group& grp = groups[t][gi];
        for (int k = 0; k < out.params.k_states; ++k) {
          double weight = 0.0;
          for (int i : grp.members) weight += stats.gammas[t](i, k);
          if (weight <= 0.0) continue;
          const auto est = pattern_score_gradient(out.params.emissions[t][k], grp.pattern, k_mc,
                                                  derive_seed(seed, step, t, k, gi), true);
          objective += weight * std::log(std::max(est.mean_reward, kRewardFloor));
          if (!est.grad_mean.allFinite() || !est.grad_chol.allFinite()) {
            out.events.push_back("step " + std::to_string(step) + ": non-finite gradient at (t=" +
                                 std::to_string(t) + ", k=" + std::to_string(k) + "); aborting");
            finite = false;
            break;
          }
          mean_updates[t][k] += weight * est.grad_mean;
          chol_updates[t][k] += weight * est.grad_chol;
        }
      }
    }
    if (!finite) {
      out.params = last_finite;
      return out;
    }
    out.trace.push_back(objective / n);
    last_finite = out.params;

    if (learning_rate != 0.0) {
      for (int t = 0; t < c.timesteps(); ++t)
        for (int k = 0; k < out.params.k_states; ++k) {
          MvnParams& e = out.params.emissions[t][k];
          MatrixXd l = factorize(e.cov, "refine_policy_gradient").matrixL();
          e.mean += (learning_rate / n) * mean_updates[t][k];
          l += (learning_rate / n) * chol_updates[t][k];
          for (int j = 0; j < l.rows(); ++j) l(j, j) = std::max(l(j, j), 1e-6);
          e.cov = l * l.transpose();
          e.cov = 0.5 * (e.cov + e.cov.transpose());
        }
    }
  }
  return out;
}

}  // namespace pathmix
