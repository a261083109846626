#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <numeric>
#include <string>
#include <vector>

#include "pathmix/cohort.hpp"
#include "pathmix/errors.hpp"
#include "pathmix/rng.hpp"

namespace pathmix {

// Bernoulli and CPT entries are clamped into [delta, 1-delta] so hold-out
// patterns unseen in training never score -inf.
inline constexpr double kBernoulliClamp = 1e-4;

// Mixture of independent Bernoullis over the flattened T*M vector.
// Variable v = t * M + j.
struct NaiveBayesParams {
  int k_classes = 0;
  int timesteps = 0;
  int courses = 0;
  VectorXd theta;  // K
  MatrixXd phi;    // K x (T*M)

  int flat_dim() const { return timesteps * courses; }
};

// One directed spanning tree per class (parent[v], root has parent -1) with
// per-class CPTs: cpt[k](v, a) = P(x_v = 1 | parent value a); root rows carry
// its marginal in both columns.
struct TanParams {
  int k_classes = 0;
  int timesteps = 0;
  int courses = 0;
  VectorXd theta;
  std::vector<std::vector<int>> parent;  // [k][v]
  std::vector<MatrixXd> cpt;             // [k] of (T*M) x 2

  int flat_dim() const { return timesteps * courses; }
};

namespace detail {

inline MatrixXd flatten_binary(const Cohort& c) {
  const int d = c.timesteps() * c.num_courses();
  MatrixXd x(c.num_students(), d);
  for (int i = 0; i < c.num_students(); ++i)
    for (int t = 0; t < c.timesteps(); ++t)
      for (int j = 0; j < c.num_courses(); ++j)
        x(i, t * c.num_courses() + j) = c(i, t, j) ? 1.0 : 0.0;
  return x;
}

inline double clamp_prob(double p) {
  return std::clamp(p, kBernoulliClamp, 1.0 - kBernoulliClamp);
}

// Seeded random soft assignments, one distribution per student.
inline MatrixXd random_responsibilities(int n, int k, std::uint64_t seed) {
  auto rng = make_rng(seed);
  std::uniform_real_distribution<double> unif(0.05, 1.0);
  MatrixXd r(n, k);
  for (int i = 0; i < n; ++i) {
    double total = 0.0;
    for (int c = 0; c < k; ++c) {
      r(i, c) = unif(rng);
      total += r(i, c);
    }
    r.row(i) /= total;
  }
  return r;
}

inline double log_sum_exp_row(const Eigen::RowVectorXd& v) {
  const double mx = v.maxCoeff();
  if (!std::isfinite(mx)) return mx;
  return mx + std::log((v.array() - mx).exp().sum());
}

// Row-wise posterior + per-row log-evidence from per-class log joints.
inline double normalize_log_rows(MatrixXd& log_joint) {
  double total = 0.0;
  for (int i = 0; i < log_joint.rows(); ++i) {
    const double lse = log_sum_exp_row(log_joint.row(i));
    log_joint.row(i) = (log_joint.row(i).array() - lse).exp();
    total += lse;
  }
  return total;
}

}  // namespace detail

struct NbFit {
  NaiveBayesParams params;
  std::vector<double> trace;
};

inline MatrixXd nb_class_log_likelihood(const NaiveBayesParams& p, const MatrixXd& x) {
  const MatrixXd logp = p.phi.array().log().matrix();
  const MatrixXd log1m = (1.0 - p.phi.array()).log().matrix();
  MatrixXd ll = x * logp.transpose() + (MatrixXd::Ones(x.rows(), x.cols()) - x) * log1m.transpose();
  ll.rowwise() += p.theta.array().log().matrix().transpose();
  return ll;  // N x K log of theta_k P(x | k)
}

inline NbFit nb_fit_em(const Cohort& c, int k_classes, int max_iters, double tol, std::uint64_t seed) {
  const int n = c.num_students();
  if (k_classes < 1) throw DataError("nb_fit_em: k_classes must be >= 1");
  if (n == 0) throw DataError("nb_fit_em: empty cohort");
  if (k_classes > n) throw DataError("nb_fit_em: more classes than students");
  const MatrixXd x = detail::flatten_binary(c);

  NbFit fit;
  fit.params.k_classes = k_classes;
  fit.params.timesteps = c.timesteps();
  fit.params.courses = c.num_courses();

  MatrixXd resp = detail::random_responsibilities(n, k_classes, seed);
  double prev = -std::numeric_limits<double>::infinity();
  for (int iter = 0; iter < max_iters; ++iter) {
    const VectorXd weight = resp.colwise().sum().transpose();
    fit.params.theta = weight / n;
    fit.params.phi = (resp.transpose() * x).array().colwise() / weight.array();
    fit.params.phi = fit.params.phi.unaryExpr(&detail::clamp_prob);

    MatrixXd log_joint = nb_class_log_likelihood(fit.params, x);
    const double loglik = detail::normalize_log_rows(log_joint);
    resp = log_joint;
    fit.trace.push_back(loglik);
    if (iter > 0 && loglik - prev <= tol * std::abs(prev)) break;
    prev = loglik;
  }
  return fit;
}

struct TanFit {
  TanParams params;
  std::vector<double> trace;
};

namespace detail {

struct WeightedPairCounts {
  VectorXd n1;   // weighted count of x_v = 1
  MatrixXd n11;  // weighted count of x_a = 1 and x_b = 1
  double total = 0.0;
};

inline WeightedPairCounts pair_counts(const MatrixXd& x, const VectorXd& w) {
  WeightedPairCounts out;
  out.total = w.sum();
  const MatrixXd xw = x.array().colwise() * w.array();
  out.n1 = xw.colwise().sum().transpose();
  out.n11 = xw.transpose() * x;
  return out;
}

inline double mi_term(double pab, double pa, double pb) {
  if (pab <= 0.0 || pa <= 0.0 || pb <= 0.0) return 0.0;
  return pab * std::log(pab / (pa * pb));
}

// Maximum-weight spanning tree over pairwise mutual information, Kruskal
// with lexicographic tie-breaking, rooted at variable 0.
inline std::vector<int> chow_liu_tree(const WeightedPairCounts& counts) {
  const int d = static_cast<int>(counts.n1.size());
  struct Edge {
    double weight;
    int a, b;
  };
  std::vector<Edge> edges;
  edges.reserve(static_cast<std::size_t>(d) * (d - 1) / 2);
  const double w = std::max(counts.total, 1e-300);
  for (int a = 0; a < d; ++a)
    for (int b = a + 1; b < d; ++b) {
      const double p11 = counts.n11(a, b) / w;
      const double pa = counts.n1(a) / w;
      const double pb = counts.n1(b) / w;
      const double p10 = std::max(0.0, pa - p11);
      const double p01 = std::max(0.0, pb - p11);
      const double p00 = std::max(0.0, 1.0 - p11 - p10 - p01);
      const double mi = mi_term(p11, pa, pb) + mi_term(p10, pa, 1.0 - pb) +
                        mi_term(p01, 1.0 - pa, pb) + mi_term(p00, 1.0 - pa, 1.0 - pb);
      edges.push_back({mi, a, b});
    }
  std::sort(edges.begin(), edges.end(), [](const Edge& x, const Edge& y) {
    if (x.weight != y.weight) return x.weight > y.weight;
    if (x.a != y.a) return x.a < y.a;
    return x.b < y.b;
  });

  std::vector<int> find(d);
  std::iota(find.begin(), find.end(), 0);
  const auto root_of = [&find](int v) {
    while (find[v] != v) {
      find[v] = find[find[v]];
      v = find[v];
    }
    return v;
  };
  std::vector<std::vector<int>> adjacency(d);
  int used = 0;
  for (const Edge& e : edges) {
    const int ra = root_of(e.a), rb = root_of(e.b);
    if (ra == rb) continue;
    find[ra] = rb;
    adjacency[e.a].push_back(e.b);
    adjacency[e.b].push_back(e.a);
    if (++used == d - 1) break;
  }

  std::vector<int> parent(d, -2);
  std::deque<int> queue{0};
  parent[0] = -1;
  while (!queue.empty()) {
    const int v = queue.front();
    queue.pop_front();
    for (int u : adjacency[v])
      if (parent[u] == -2) {
        parent[u] = v;
        queue.push_back(u);
      }
  }
  for (int v = 0; v < d; ++v)
    if (parent[v] == -2) throw NumericError("chow_liu_tree: disconnected tree");
  return parent;
}

inline MatrixXd tan_cpt(const WeightedPairCounts& counts, const std::vector<int>& parent) {
  const int d = static_cast<int>(counts.n1.size());
  MatrixXd cpt(d, 2);
  const double w = std::max(counts.total, 1e-300);
  for (int v = 0; v < d; ++v) {
    if (parent[v] < 0) {
      const double p = clamp_prob(counts.n1(v) / w);
      cpt(v, 0) = cpt(v, 1) = p;
      continue;
    }
    const int q = parent[v];
    const double nq1 = counts.n1(q);
    const double nq0 = w - nq1;
    const double n_v1_q1 = q < v ? counts.n11(q, v) : counts.n11(v, q);
    const double n_v1_q0 = counts.n1(v) - n_v1_q1;
    cpt(v, 1) = clamp_prob(nq1 > 1e-12 ? n_v1_q1 / nq1 : 0.5);
    cpt(v, 0) = clamp_prob(nq0 > 1e-12 ? n_v1_q0 / nq0 : 0.5);
  }
  return cpt;
}

inline void validate_tree(const std::vector<int>& parent) {
  const int d = static_cast<int>(parent.size());
  int roots = 0;
  for (int v = 0; v < d; ++v) {
    if (parent[v] == -1) {
      ++roots;
      continue;
    }
    // Walking to the root must terminate: acyclicity check.
    int hops = 0, u = v;
    while (parent[u] != -1) {
      u = parent[u];
      if (++hops > d) throw NumericError("tan: cyclic parent map");
    }
  }
  if (roots != 1) throw NumericError("tan: expected exactly one root");
}

}  // namespace detail

inline MatrixXd tan_class_log_likelihood(const TanParams& p, const MatrixXd& x) {
  const int n = static_cast<int>(x.rows());
  const int d = p.flat_dim();
  MatrixXd ll(n, p.k_classes);
  for (int k = 0; k < p.k_classes; ++k) {
    const auto& parent = p.parent[k];
    const MatrixXd& cpt = p.cpt[k];
    for (int i = 0; i < n; ++i) {
      double acc = std::log(p.theta(k));
      for (int v = 0; v < d; ++v) {
        const int a = parent[v] < 0 ? 0 : static_cast<int>(x(i, parent[v]));
        const double p1 = cpt(v, a);
        acc += x(i, v) > 0.5 ? std::log(p1) : std::log1p(-p1);
      }
      ll(i, k) = acc;
    }
  }
  return ll;
}

// EM over the latent class; each M step re-learns a per-class Chow-Liu tree
// from responsibility-weighted counts and refits the CPTs.
inline TanFit tan_fit_em(const Cohort& c, int k_classes, int max_iters, double tol, std::uint64_t seed) {
  const int n = c.num_students();
  if (k_classes < 1) throw DataError("tan_fit_em: k_classes must be >= 1");
  if (n == 0) throw DataError("tan_fit_em: empty cohort");
  if (k_classes > n) throw DataError("tan_fit_em: more classes than students");
  const MatrixXd x = detail::flatten_binary(c);
  if (x.cols() < 2) throw DataError("tan_fit_em: need at least 2 variables");

  TanFit fit;
  fit.params.k_classes = k_classes;
  fit.params.timesteps = c.timesteps();
  fit.params.courses = c.num_courses();
  fit.params.parent.resize(k_classes);
  fit.params.cpt.resize(k_classes);

  MatrixXd resp = detail::random_responsibilities(n, k_classes, seed);
  double prev = -std::numeric_limits<double>::infinity();
  for (int iter = 0; iter < max_iters; ++iter) {
    fit.params.theta = resp.colwise().sum().transpose() / n;
    for (int k = 0; k < k_classes; ++k) {
      const auto counts = detail::pair_counts(x, resp.col(k));
      fit.params.parent[k] = detail::chow_liu_tree(counts);
      detail::validate_tree(fit.params.parent[k]);
      fit.params.cpt[k] = detail::tan_cpt(counts, fit.params.parent[k]);
    }

    MatrixXd log_joint = tan_class_log_likelihood(fit.params, x);
    const double loglik = detail::normalize_log_rows(log_joint);
    resp = log_joint;
    fit.trace.push_back(loglik);
    if (iter > 0 && loglik - prev <= tol * std::abs(prev)) break;
    prev = loglik;
  }
  return fit;
}

inline VectorXd model_loglik(const NaiveBayesParams& p, const Cohort& c) {
  if (c.timesteps() != p.timesteps || c.num_courses() != p.courses)
    throw DataError("model_loglik: shape mismatch");
  const MatrixXd x = detail::flatten_binary(c);
  const MatrixXd lj = nb_class_log_likelihood(p, x);
  VectorXd out(c.num_students());
  for (int i = 0; i < out.size(); ++i) out(i) = detail::log_sum_exp_row(lj.row(i));
  return out;
}

inline VectorXd model_loglik(const TanParams& p, const Cohort& c) {
  if (c.timesteps() != p.timesteps || c.num_courses() != p.courses)
    throw DataError("model_loglik: shape mismatch");
  const MatrixXd x = detail::flatten_binary(c);
  const MatrixXd lj = tan_class_log_likelihood(p, x);
  VectorXd out(c.num_students());
  for (int i = 0; i < out.size(); ++i) out(i) = detail::log_sum_exp_row(lj.row(i));
  return out;
}

namespace detail {

inline Cohort make_sample_cohort(const CourseVocabulary* vocab, int timesteps, int courses, int n,
                                 const char* prefix) {
  CourseVocabulary v = vocab ? *vocab : make_synthetic_vocabulary(courses);
  if (v.size() != courses) throw DataError("model_sample: vocabulary size mismatch");
  std::vector<std::string> ids;
  ids.reserve(n);
  for (int i = 0; i < n; ++i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%s%06d", prefix, i);
    ids.push_back(buf);
  }
  return Cohort(std::move(v), timesteps, std::move(ids));
}

inline int sample_categorical(const VectorXd& probs, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  double u = unif(rng);
  for (int k = 0; k + 1 < probs.size(); ++k) {
    u -= probs(k);
    if (u < 0.0) return k;
  }
  return static_cast<int>(probs.size()) - 1;
}

}  // namespace detail

inline Cohort model_sample(const NaiveBayesParams& p, int n, std::uint64_t seed,
                           const CourseVocabulary* vocab = nullptr) {
  Cohort c = detail::make_sample_cohort(vocab, p.timesteps, p.courses, n, "nb_");
  auto rng = make_rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  for (int i = 0; i < n; ++i) {
    const int k = detail::sample_categorical(p.theta, rng);
    for (int v = 0; v < p.flat_dim(); ++v)
      if (unif(rng) < p.phi(k, v)) c.set(i, v / p.courses, v % p.courses, true);
  }
  return c;
}

inline Cohort model_sample(const TanParams& p, int n, std::uint64_t seed,
                           const CourseVocabulary* vocab = nullptr) {
  Cohort c = detail::make_sample_cohort(vocab, p.timesteps, p.courses, n, "tan_");
  const int d = p.flat_dim();
  // Ancestral order: parents before children.
  std::vector<std::vector<int>> orders(p.k_classes);
  for (int k = 0; k < p.k_classes; ++k) {
    std::vector<std::vector<int>> children(d);
    int root = -1;
    for (int v = 0; v < d; ++v) {
      if (p.parent[k][v] < 0)
        root = v;
      else
        children[p.parent[k][v]].push_back(v);
    }
    std::deque<int> queue{root};
    while (!queue.empty()) {
      const int v = queue.front();
      queue.pop_front();
      orders[k].push_back(v);
      for (int u : children[v]) queue.push_back(u);
    }
  }
  auto rng = make_rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<std::uint8_t> value(d);
  for (int i = 0; i < n; ++i) {
    const int k = detail::sample_categorical(p.theta, rng);
    for (int v : orders[k]) {
      const int parent = p.parent[k][v];
      const int a = parent < 0 ? 0 : value[parent];
      value[v] = unif(rng) < p.cpt[k](v, a) ? 1 : 0;
      if (value[v]) c.set(i, v / p.courses, v % p.courses, true);
    }
  }
  return c;
}

}  // namespace pathmix
