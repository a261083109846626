#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "pathmix/cohort.hpp"
#include "pathmix/errors.hpp"
#include "pathmix/mvn.hpp"
#include "pathmix/parallel.hpp"
#include "pathmix/rng.hpp"

namespace pathmix {

// Latent chain whose transition and emission parameters differ at every
// timestep. transitions[t](k, k') = P(h^{t+1} = k' | h^t = k).
struct CmmParams {
  int k_states = 0;
  int timesteps = 0;
  int courses = 0;
  VectorXd theta;                                 // K
  std::vector<MatrixXd> transitions;              // T-1 of K x K, row-stochastic
  std::vector<std::vector<MvnParams>> emissions;  // [t][k], dimension M
  std::uint64_t vocab_fingerprint = 0;

  void validate() const {
    if (k_states < 1 || timesteps < 1 || courses < 1)
      throw DataError("cmm: non-positive dimensions");
    if (theta.size() != k_states) throw DataError("cmm: theta size mismatch");
    if (std::abs(theta.sum() - 1.0) > 1e-9 || theta.minCoeff() < 0.0)
      throw DataError("cmm: theta is not a distribution");
    if (static_cast<int>(transitions.size()) != timesteps - 1)
      throw DataError("cmm: transition count mismatch");
    for (const MatrixXd& phi : transitions) {
      if (phi.rows() != k_states || phi.cols() != k_states)
        throw DataError("cmm: transition shape mismatch");
      if (phi.minCoeff() < 0.0) throw DataError("cmm: negative transition entry");
      for (int k = 0; k < k_states; ++k)
        if (std::abs(phi.row(k).sum() - 1.0) > 1e-9)
          throw DataError("cmm: transition row does not sum to 1");
    }
    if (static_cast<int>(emissions.size()) != timesteps)
      throw DataError("cmm: emission timestep mismatch");
    for (const auto& per_t : emissions) {
      if (static_cast<int>(per_t.size()) != k_states) throw DataError("cmm: emission state mismatch");
      for (const MvnParams& e : per_t) {
        if (e.dim() != courses || e.cov.rows() != courses || e.cov.cols() != courses)
          throw DataError("cmm: emission dimension mismatch");
        factorize(e.cov, "cmm emission");
      }
    }
  }
};

// Smoothed posteriors for one student: gamma(t,k) and pairwise xi[t](k,k')
// plus the total log-likelihood of the record.
struct PosteriorSet {
  MatrixXd gamma;            // T x K
  std::vector<MatrixXd> xi;  // T-1 of K x K
  double loglik = 0.0;
};

namespace detail {

inline double log_sum_exp(const VectorXd& v) {
  const double mx = v.maxCoeff();
  if (!std::isfinite(mx)) return mx;
  return mx + std::log((v.array() - mx).exp().sum());
}

}  // namespace detail

// Scaled (log-space) forward-backward over a per-timestep per-state
// observation log-likelihood matrix. -inf entries mark impossible states.
inline void forward_backward_into(const VectorXd& log_theta, const std::vector<MatrixXd>& log_phi,
                                  const MatrixXd& loglike, PosteriorSet& out) {
  const int t_count = static_cast<int>(loglike.rows());
  const int k_count = static_cast<int>(loglike.cols());

  MatrixXd la(t_count, k_count), lb(t_count, k_count);
  la.row(0) = log_theta.transpose() + loglike.row(0);
  VectorXd scratch(k_count);
  for (int t = 0; t + 1 < t_count; ++t) {
    for (int k = 0; k < k_count; ++k) {
      for (int k2 = 0; k2 < k_count; ++k2) scratch(k2) = la(t, k2) + log_phi[t](k2, k);
      la(t + 1, k) = loglike(t + 1, k) + detail::log_sum_exp(scratch);
    }
  }
  for (int t = 0; t < t_count; ++t) {
    if (!std::isfinite(detail::log_sum_exp(la.row(t).transpose())))
      throw NumericError("forward_backward: impossible observation at timestep " + std::to_string(t));
  }

  lb.row(t_count - 1).setZero();
  for (int t = t_count - 2; t >= 0; --t) {
    for (int k = 0; k < k_count; ++k) {
      for (int k2 = 0; k2 < k_count; ++k2)
        scratch(k2) = log_phi[t](k, k2) + loglike(t + 1, k2) + lb(t + 1, k2);
      lb(t, k) = detail::log_sum_exp(scratch);
    }
  }

  out.loglik = detail::log_sum_exp(la.row(t_count - 1).transpose());
  out.gamma.resize(t_count, k_count);
  for (int t = 0; t < t_count; ++t) {
    for (int k = 0; k < k_count; ++k) {
      const double lg = la(t, k) + lb(t, k) - out.loglik;
      out.gamma(t, k) = std::isfinite(lg) ? std::exp(lg) : 0.0;
    }
    out.gamma.row(t) /= out.gamma.row(t).sum();
  }
  out.xi.resize(std::max(0, t_count - 1));
  for (int t = 0; t + 1 < t_count; ++t) {
    MatrixXd& x = out.xi[t];
    x.resize(k_count, k_count);
    for (int k = 0; k < k_count; ++k)
      for (int k2 = 0; k2 < k_count; ++k2) {
        const double lx =
            la(t, k) + log_phi[t](k, k2) + loglike(t + 1, k2) + lb(t + 1, k2) - out.loglik;
        x(k, k2) = std::isfinite(lx) ? std::exp(lx) : 0.0;
      }
    x /= x.sum();
  }
}

inline PosteriorSet forward_backward(const VectorXd& theta, const std::vector<MatrixXd>& transitions,
                                     const MatrixXd& loglike) {
  const VectorXd log_theta = theta.array().log();
  std::vector<MatrixXd> log_phi;
  log_phi.reserve(transitions.size());
  for (const MatrixXd& m : transitions) log_phi.push_back(m.array().log().matrix());
  PosteriorSet out;
  forward_backward_into(log_theta, log_phi, loglike, out);
  return out;
}

inline PosteriorSet forward_backward(const CmmParams& p, const MatrixXd& loglike) {
  if (loglike.rows() != p.timesteps || loglike.cols() != p.k_states)
    throw DataError("forward_backward: loglike shape mismatch");
  return forward_backward(p.theta, p.transitions, loglike);
}

// Per-timestep N x K observation log-likelihood matrices of the shifted data.
inline std::vector<MatrixXd> pm1_loglike(const CmmParams& p, const RelaxedCohort& x) {
  if (x.timesteps() != p.timesteps || x.num_courses() != p.courses)
    throw DataError("pm1_loglike: shape mismatch");
  std::vector<MatrixXd> likes(p.timesteps);
  for (int t = 0; t < p.timesteps; ++t) {
    likes[t].resize(x.num_students(), p.k_states);
    for (int k = 0; k < p.k_states; ++k)
      likes[t].col(k) = logpdf_rows(x.by_timestep[t], p.emissions[t][k]);
  }
  return likes;
}

struct EmOptions {
  int max_iters = 200;
  double tol = 1e-6;
  int restarts = 5;
  std::uint64_t seed = 0;
  int threads = 1;
  double cov_epsilon = kDefaultCovEpsilon;
};

struct CmmFit {
  CmmParams params;
  std::vector<double> trace;  // winning restart
  std::vector<std::vector<double>> restart_traces;
  std::vector<std::string> events;
  int best_restart = -1;
};

namespace detail {

struct CmmSuffStats {
  VectorXd theta_acc;             // K
  std::vector<MatrixXd> xi_acc;   // T-1 of K x K
  std::vector<MatrixXd> gammas;   // T of N x K
  double loglik = 0.0;

  void init(int n, int t_count, int k_count) {
    theta_acc = VectorXd::Zero(k_count);
    xi_acc.assign(std::max(0, t_count - 1), MatrixXd::Zero(k_count, k_count));
    gammas.assign(t_count, MatrixXd::Zero(n, k_count));
    loglik = 0.0;
  }
};

// E pass: per-student forward-backward, accumulated into sufficient stats.
// Partials are reduced in chunk order, so results do not depend on the
// thread count.
inline void cmm_e_step(const CmmParams& p, const std::vector<MatrixXd>& likes, int threads,
                       CmmSuffStats& stats) {
  const int n = static_cast<int>(likes[0].rows());
  const int t_count = p.timesteps;
  const int k_count = p.k_states;
  stats.init(n, t_count, k_count);

  const VectorXd log_theta = p.theta.array().log();
  std::vector<MatrixXd> log_phi;
  for (const MatrixXd& m : p.transitions) log_phi.push_back(m.array().log().matrix());

  constexpr int kChunk = 256;
  const int n_chunks = (n + kChunk - 1) / kChunk;
  std::vector<VectorXd> theta_parts(n_chunks);
  std::vector<std::vector<MatrixXd>> xi_parts(n_chunks);
  std::vector<double> ll_parts(n_chunks, 0.0);

  parallel_chunks(n, kChunk, threads, [&](int begin, int end, int chunk) {
    VectorXd theta_acc = VectorXd::Zero(k_count);
    std::vector<MatrixXd> xi_acc(std::max(0, t_count - 1), MatrixXd::Zero(k_count, k_count));
    double ll = 0.0;
    PosteriorSet post;
    MatrixXd like(t_count, k_count);
    for (int i = begin; i < end; ++i) {
      for (int t = 0; t < t_count; ++t) like.row(t) = likes[t].row(i);
      forward_backward_into(log_theta, log_phi, like, post);
      ll += post.loglik;
      theta_acc += post.gamma.row(0).transpose();
      for (int t = 0; t + 1 < t_count; ++t) xi_acc[t] += post.xi[t];
      for (int t = 0; t < t_count; ++t) stats.gammas[t].row(i) = post.gamma.row(t);
    }
    theta_parts[chunk] = std::move(theta_acc);
    xi_parts[chunk] = std::move(xi_acc);
    ll_parts[chunk] = ll;
  });

  for (int c = 0; c < n_chunks; ++c) {
    stats.theta_acc += theta_parts[c];
    for (int t = 0; t + 1 < t_count; ++t) stats.xi_acc[t] += xi_parts[c][t];
    stats.loglik += ll_parts[c];
  }
}

// Closed-form M step: responsibility-weighted means and covariances per
// (t, k), transition rows from pairwise posteriors. Components whose
// effective weight collapses are reseeded from a random student.
inline void cmm_m_step(const CmmSuffStats& stats, const RelaxedCohort& x, double cov_epsilon,
                       std::mt19937_64& reseed_rng, CmmParams& p, std::vector<std::string>* events,
                       const std::string& event_prefix) {
  const int n = x.num_students();
  const int t_count = p.timesteps;
  const int k_count = p.k_states;
  // Weighted covariances collapse below ~2 effective samples.
  constexpr double kDegenerate = 2.0;

  p.theta = stats.theta_acc / stats.theta_acc.sum();
  for (int t = 0; t + 1 < t_count; ++t) {
    for (int k = 0; k < k_count; ++k) {
      const double row_sum = stats.xi_acc[t].row(k).sum();
      if (row_sum < kDegenerate) {
        p.transitions[t].row(k).setConstant(1.0 / k_count);
      } else {
        p.transitions[t].row(k) = stats.xi_acc[t].row(k) / row_sum;
      }
    }
  }
  std::uniform_int_distribution<int> pick(0, n - 1);
  for (int t = 0; t < t_count; ++t) {
    const MatrixXd& xt = x.by_timestep[t];
    for (int k = 0; k < k_count; ++k) {
      const VectorXd g = stats.gammas[t].col(k);
      const double w = g.sum();
      MvnParams& e = p.emissions[t][k];
      if (w < kDegenerate) {
        // Re-seed as a floor-width component on a random student so it can
        // compete with already-sharpened incumbents.
        const int r = pick(reseed_rng);
        e.mean = xt.row(r).transpose();
        e.cov = cov_epsilon * MatrixXd::Identity(xt.cols(), xt.cols());
        if (events)
          events->push_back(event_prefix + ": reseeded emission (t=" + std::to_string(t) +
                            ", k=" + std::to_string(k) + ") from student " + std::to_string(r));
        continue;
      }
      e.mean = xt.transpose() * g / w;
      MatrixXd second = (xt.array().colwise() * g.array()).matrix().transpose() * xt / w;
      e.cov = regularize_cov(second - e.mean * e.mean.transpose(), cov_epsilon);
    }
  }
}

// Seeded anchor initialization: at every timestep, K student rows picked by
// distance-weighted sampling (first uniform, later ones proportional to
// squared distance from the chosen set) become the initial emission means,
// spread by the diagonal of that slice's covariance. Uniform transitions
// decouple the chain at the first E step, so anchor labels need no
// consistency across timesteps. Random-responsibility starts put every
// initial mean at the cohort average, which reliably strands EM in merged
// or spiked optima once clusters are actually separated; anchors are just
// as cheap and seed-reproducible.
inline CmmParams cmm_init_params(const RelaxedCohort& x, int k_states, double cov_epsilon,
                                 std::uint64_t fingerprint, std::mt19937_64& rng) {
  const int n = x.num_students();
  const int t_count = x.timesteps();
  const int m = x.num_courses();
  CmmParams p;
  p.k_states = k_states;
  p.timesteps = t_count;
  p.courses = m;
  p.vocab_fingerprint = fingerprint;
  p.theta = VectorXd::Constant(k_states, 1.0 / k_states);
  p.transitions.assign(std::max(0, t_count - 1),
                       MatrixXd::Constant(k_states, k_states, 1.0 / k_states));

  std::uniform_int_distribution<int> uniform_pick(0, n - 1);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  p.emissions.assign(t_count, std::vector<MvnParams>(k_states));
  for (int t = 0; t < t_count; ++t) {
    const MatrixXd& xt = x.by_timestep[t];
    std::vector<int> anchors{uniform_pick(rng)};
    VectorXd dist2 = (xt.rowwise() - xt.row(anchors[0])).rowwise().squaredNorm();
    while (static_cast<int>(anchors.size()) < k_states) {
      const double total = dist2.sum();
      int chosen = 0;
      if (total <= 0.0) {
        chosen = uniform_pick(rng);
      } else {
        double u = unif(rng) * total;
        for (chosen = 0; chosen + 1 < n; ++chosen) {
          u -= dist2(chosen);
          if (u < 0.0) break;
        }
      }
      anchors.push_back(chosen);
      dist2 = dist2.cwiseMin((xt.rowwise() - xt.row(chosen)).rowwise().squaredNorm());
    }

    const VectorXd mean = xt.colwise().mean().transpose();
    const MatrixXd centered = xt.rowwise() - mean.transpose();
    // Diagonal spread only: a full covariance would explain away the very
    // directions that separate the anchors.
    const MatrixXd cov =
        MatrixXd((centered.array().square().colwise().mean() + cov_epsilon).matrix().asDiagonal());
    for (int k = 0; k < k_states; ++k)
      p.emissions[t][k] = MvnParams{xt.row(anchors[k]).transpose(), cov};
  }
  return p;
}

}  // namespace detail

// EM on the {-1,+1} relaxation with exact Gaussian emission likelihoods.
// Returns the best of `restarts` seeded runs.
inline CmmFit em_fit_pm1(const Cohort& c, int k_states, const EmOptions& opt) {
  const int n = c.num_students();
  if (k_states < 1) throw DataError("em_fit_pm1: k_states must be >= 1");
  if (n < k_states) throw DataError("em_fit_pm1: fewer students than states");
  if (opt.max_iters < 1 || opt.restarts < 1) throw DataError("em_fit_pm1: bad iteration settings");
  const RelaxedCohort x = shift_to_pm1(c);

  CmmFit best;
  for (int restart = 0; restart < opt.restarts; ++restart) {
    auto rng = make_rng(derive_seed(opt.seed, 0x5eed, restart));
    CmmParams p = detail::cmm_init_params(x, k_states, opt.cov_epsilon, c.vocab().fingerprint(), rng);

    std::vector<std::string> events;
    const std::string prefix = "restart " + std::to_string(restart);
    detail::CmmSuffStats stats;

    std::vector<double> trace;
    double prev = -std::numeric_limits<double>::infinity();
    for (int iter = 0; iter < opt.max_iters; ++iter) {
      const auto likes = pm1_loglike(p, x);
      detail::cmm_e_step(p, likes, opt.threads, stats);
      trace.push_back(stats.loglik);
      if (iter > 0 && stats.loglik - prev <= opt.tol * std::abs(prev)) break;
      prev = stats.loglik;
      detail::cmm_m_step(stats, x, opt.cov_epsilon, rng, p, &events,
                         prefix + " iter " + std::to_string(iter));
      if (iter + 1 == opt.max_iters) {
        // Loop is about to end on the iteration cap; score the final M step.
        const auto final_likes = pm1_loglike(p, x);
        detail::cmm_e_step(p, final_likes, opt.threads, stats);
        trace.push_back(stats.loglik);
      }
    }

    if (best.best_restart < 0 || trace.back() > best.trace.back()) {
      best.params = p;
      best.trace = trace;
      best.best_restart = restart;
    }
    best.restart_traces.push_back(std::move(trace));
    for (auto& e : events) best.events.push_back(std::move(e));
  }
  return best;
}

// Ancestral sampling from the generative process; binary entries are the
// sign of the relaxed draw.
inline Cohort sample_students(const CmmParams& p, int n, std::uint64_t seed,
                              const CourseVocabulary* vocab = nullptr) {
  if (n < 1) throw DataError("sample_students: n must be >= 1");
  p.validate();
  CourseVocabulary v = vocab ? *vocab : make_synthetic_vocabulary(p.courses);
  if (v.size() != p.courses) throw DataError("sample_students: vocabulary size mismatch");
  std::vector<std::string> ids;
  ids.reserve(n);
  for (int i = 0; i < n; ++i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "synth_%06d", i);
    ids.push_back(buf);
  }
  Cohort c(std::move(v), p.timesteps, std::move(ids));

  std::vector<std::vector<MatrixXd>> chol(p.timesteps);
  for (int t = 0; t < p.timesteps; ++t)
    for (int k = 0; k < p.k_states; ++k)
      chol[t].push_back(factorize(p.emissions[t][k].cov, "sample_students").matrixL());

  auto rng = make_rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::normal_distribution<double> gauss;
  VectorXd z(p.courses);
  for (int i = 0; i < n; ++i) {
    int state = 0;
    {
      double u = unif(rng);
      for (state = 0; state + 1 < p.k_states; ++state) {
        u -= p.theta(state);
        if (u < 0.0) break;
      }
    }
    for (int t = 0; t < p.timesteps; ++t) {
      if (t > 0) {
        double u = unif(rng);
        int nxt = 0;
        for (nxt = 0; nxt + 1 < p.k_states; ++nxt) {
          u -= p.transitions[t - 1](state, nxt);
          if (u < 0.0) break;
        }
        state = nxt;
      }
      for (int j = 0; j < p.courses; ++j) z(j) = gauss(rng);
      const VectorXd bar = p.emissions[t][state].mean + chol[t][state] * z;
      for (int j = 0; j < p.courses; ++j)
        if (bar(j) > 0.0) c.set(i, t, j, true);
    }
  }
  return c;
}

enum class LikMode { kPm1Exact, kBinaryMc };

struct LogLikEstimate {
  double log_value = 0.0;
  double std_error = 0.0;
  long long sample_count = 0;
};

// Log-likelihood of one student record. pm1-exact scores the shifted vector
// with the Gaussian density; binary-mc scores the actual binary pattern with
// the orthant estimator per (t, state) and propagates the estimator noise
// through the smoothing weights.
inline LogLikEstimate student_loglik(const CmmParams& p, const BinaryRecord& record, LikMode mode,
                                     long long k_mc = 0, std::uint64_t seed = 0) {
  if (static_cast<int>(record.size()) != p.timesteps) throw DataError("student_loglik: record length mismatch");
  for (const auto& pat : record)
    if (pat.size() != p.courses) throw DataError("student_loglik: pattern width mismatch");

  MatrixXd like(p.timesteps, p.k_states);
  if (mode == LikMode::kPm1Exact) {
    VectorXd pm1(p.courses);
    for (int t = 0; t < p.timesteps; ++t) {
      for (int j = 0; j < p.courses; ++j) pm1(j) = record[t].bits[j] ? 1.0 : -1.0;
      for (int k = 0; k < p.k_states; ++k) like(t, k) = logpdf(pm1, p.emissions[t][k]);
    }
    const PosteriorSet post = forward_backward(p, like);
    return LogLikEstimate{post.loglik, 0.0, 0};
  }

  if (k_mc < 1) throw DataError("student_loglik: k_mc must be >= 1 in MC mode");
  MatrixXd rel_var(p.timesteps, p.k_states);
  for (int t = 0; t < p.timesteps; ++t)
    for (int k = 0; k < p.k_states; ++k) {
      const auto est = orthant_prob_mc(p.emissions[t][k], record[t], k_mc,
                                       derive_seed(seed, t, k), TailMode::kNestedMc);
      like(t, k) = est.value > 0.0 ? std::log(est.value) : -std::numeric_limits<double>::infinity();
      rel_var(t, k) = est.value > 0.0 ? (est.std_error / est.value) * (est.std_error / est.value) : 0.0;
    }
  const PosteriorSet post = forward_backward(p, like);
  // Delta method: d loglik / d like(t,k) = gamma(t,k).
  double var = 0.0;
  for (int t = 0; t < p.timesteps; ++t)
    for (int k = 0; k < p.k_states; ++k)
      var += post.gamma(t, k) * post.gamma(t, k) * rel_var(t, k);
  return LogLikEstimate{post.loglik, std::sqrt(var), k_mc};
}

inline LogLikEstimate student_loglik(const CmmParams& p, const Cohort& c, int student, LikMode mode,
                                     long long k_mc = 0, std::uint64_t seed = 0) {
  return student_loglik(p, c.record(student), mode, k_mc, seed);
}

// Per-timestep evidence: nullopt (or an empty map) = unobserved; otherwise a
// partial assignment course index -> 0/1.
struct ObservationMask {
  std::vector<std::optional<std::map<int, int>>> steps;

  static ObservationMask unobserved(int timesteps) {
    ObservationMask m;
    m.steps.assign(timesteps, std::nullopt);
    return m;
  }

  bool has_evidence(int t) const { return steps[t].has_value() && !steps[t]->empty(); }
};

// State occupancy prior at each timestep under theta and the transition chain.
inline MatrixXd prior_state_marginals(const CmmParams& p) {
  MatrixXd out(p.timesteps, p.k_states);
  out.row(0) = p.theta.transpose();
  for (int t = 1; t < p.timesteps; ++t)
    out.row(t) = out.row(t - 1) * p.transitions[t - 1];
  return out;
}

inline double emission_take_probability(const CmmParams& p, int t, int k, int course) {
  const MvnParams& e = p.emissions[t][k];
  return normal_cdf(e.mean(course) / std::sqrt(e.cov(course, course)));
}

struct CourseProbability {
  int course = 0;
  double probability = 0.0;
  double std_error = 0.0;
};

// Probability that each query course is taken at query_t given the partial
// evidence: evidence likelihoods come from orthant estimates over the
// mentioned courses (everything unmentioned is marginalized out of the
// emission), the state posterior from forward-backward, and the answer from
// per-state take probabilities. Standard errors come from independent
// replicates of the whole estimate.
inline std::vector<CourseProbability> infer_intermediate(const CmmParams& p, const ObservationMask& mask,
                                                         int query_t, const std::vector<int>& query_courses,
                                                         long long k_mc, std::uint64_t seed,
                                                         int replicates = 8) {
  if (static_cast<int>(mask.steps.size()) != p.timesteps)
    throw DataError("infer_intermediate: mask length mismatch");
  if (query_t < 0 || query_t >= p.timesteps) throw DataError("infer_intermediate: query_t out of range");
  if (query_courses.empty()) throw DataError("infer_intermediate: no query courses");
  for (int j : query_courses)
    if (j < 0 || j >= p.courses) throw DataError("infer_intermediate: query course out of range");
  for (int t = 0; t < p.timesteps; ++t) {
    if (!mask.steps[t].has_value()) continue;
    for (const auto& [course, value] : *mask.steps[t]) {
      if (course < 0 || course >= p.courses) throw DataError("infer_intermediate: mask course out of range");
      if (value != 0 && value != 1) throw DataError("infer_intermediate: mask values must be 0/1");
      if (t == query_t)
        for (int j : query_courses)
          if (j == course) throw DataError("infer_intermediate: query course already observed at query_t");
    }
  }

  std::vector<int> evidence_steps;
  for (int t = 0; t < p.timesteps; ++t)
    if (mask.has_evidence(t)) evidence_steps.push_back(t);

  const auto answer_from_gamma = [&](const VectorXd& gamma) {
    std::vector<double> ans;
    ans.reserve(query_courses.size());
    for (int j : query_courses) {
      double a = 0.0;
      for (int k = 0; k < p.k_states; ++k) a += gamma(k) * emission_take_probability(p, query_t, k, j);
      ans.push_back(a);
    }
    return ans;
  };

  std::vector<CourseProbability> out;
  if (evidence_steps.empty()) {
    const VectorXd gamma = prior_state_marginals(p).row(query_t).transpose();
    for (std::size_t q = 0; q < query_courses.size(); ++q) {
      const auto ans = answer_from_gamma(gamma);
      out.push_back(CourseProbability{query_courses[q], ans[q], 0.0});
    }
    return out;
  }

  if (k_mc < 1) throw DataError("infer_intermediate: k_mc must be >= 1");
  if (replicates < 1) throw DataError("infer_intermediate: replicates must be >= 1");

  std::vector<std::vector<double>> reps(query_courses.size());
  for (int r = 0; r < replicates; ++r) {
    MatrixXd like = MatrixXd::Zero(p.timesteps, p.k_states);
    for (int t : evidence_steps) {
      std::vector<int> mentioned;
      BinaryPattern pat;
      for (const auto& [course, value] : *mask.steps[t]) {
        mentioned.push_back(course);
        pat.bits.push_back(static_cast<std::uint8_t>(value));
      }
      for (int k = 0; k < p.k_states; ++k) {
        const MvnParams sub = marginal(p.emissions[t][k], mentioned);
        const auto est =
            orthant_prob_mc(sub, pat, k_mc, derive_seed(seed, r, t, k), TailMode::kNestedMc);
        like(t, k) =
            est.value > 0.0 ? std::log(est.value) : -std::numeric_limits<double>::infinity();
      }
    }
    const PosteriorSet post = forward_backward(p, like);
    const auto ans = answer_from_gamma(post.gamma.row(query_t).transpose());
    for (std::size_t q = 0; q < query_courses.size(); ++q) reps[q].push_back(ans[q]);
  }

  for (std::size_t q = 0; q < query_courses.size(); ++q) {
    double mean = 0.0;
    for (double v : reps[q]) mean += v;
    mean /= replicates;
    double se = 0.0;
    if (replicates > 1) {
      double ss = 0.0;
      for (double v : reps[q]) ss += (v - mean) * (v - mean);
      se = std::sqrt(ss / (replicates - 1.0) / replicates);
    }
    out.push_back(CourseProbability{query_courses[q], mean, se});
  }
  return out;
}

// Most probable hidden path under the pm1-exact per-state likelihoods;
// ties break toward the lower state index.
inline std::vector<int> decode_path(const CmmParams& p, const BinaryRecord& record) {
  if (static_cast<int>(record.size()) != p.timesteps) throw DataError("decode_path: record length mismatch");
  MatrixXd like(p.timesteps, p.k_states);
  VectorXd pm1(p.courses);
  for (int t = 0; t < p.timesteps; ++t) {
    if (record[t].size() != p.courses) throw DataError("decode_path: pattern width mismatch");
    for (int j = 0; j < p.courses; ++j) pm1(j) = record[t].bits[j] ? 1.0 : -1.0;
    for (int k = 0; k < p.k_states; ++k) like(t, k) = logpdf(pm1, p.emissions[t][k]);
  }

  MatrixXd delta(p.timesteps, p.k_states);
  Eigen::MatrixXi back(p.timesteps, p.k_states);
  delta.row(0) = p.theta.array().log().matrix().transpose() + like.row(0);
  for (int t = 1; t < p.timesteps; ++t) {
    for (int k = 0; k < p.k_states; ++k) {
      int arg = 0;
      double best = -std::numeric_limits<double>::infinity();
      for (int k2 = 0; k2 < p.k_states; ++k2) {
        const double cand = delta(t - 1, k2) + std::log(p.transitions[t - 1](k2, k));
        if (cand > best) {
          best = cand;
          arg = k2;
        }
      }
      delta(t, k) = like(t, k) + best;
      back(t, k) = arg;
    }
  }
  std::vector<int> path(p.timesteps);
  int arg = 0;
  for (int k = 1; k < p.k_states; ++k)
    if (delta(p.timesteps - 1, k) > delta(p.timesteps - 1, arg)) arg = k;
  path[p.timesteps - 1] = arg;
  for (int t = p.timesteps - 1; t > 0; --t) path[t - 1] = back(t, path[t]);
  return path;
}

inline std::vector<int> decode_path(const CmmParams& p, const Cohort& c, int student) {
  return decode_path(p, c.record(student));
}

// Expected transition counts between adjacent hidden states, summed over the
// cohort; every matrix sums to N.
inline std::vector<MatrixXd> transition_flows(const CmmParams& p, const Cohort& c, int threads = 1) {
  if (c.vocab().fingerprint() != p.vocab_fingerprint)
    throw DataError("transition_flows: vocabulary fingerprint mismatch");
  const RelaxedCohort x = shift_to_pm1(c);
  const auto likes = pm1_loglike(p, x);
  detail::CmmSuffStats stats;
  detail::cmm_e_step(p, likes, threads, stats);
  return stats.xi_acc;
}

}  // namespace pathmix
