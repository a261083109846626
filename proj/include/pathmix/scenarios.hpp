#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "pathmix/cmm.hpp"
#include "pathmix/cohort.hpp"
#include "pathmix/errors.hpp"

namespace pathmix {

// Built-in generating models for synthetic cohorts. Each one pins a
// particular stress: parameter recovery, marginal-matching under cross-time
// correlation, intermediate-course inference, and EM stability.
struct Scenario {
  std::string name;
  CmmParams params;
  CourseVocabulary vocab;
};

namespace detail {

// Block-structured emission: state k prefers its own block of courses.
inline MvnParams block_emission(int courses, int block_lo, int block_hi, double mean_in,
                                double mean_out, double variance, double block_cov,
                                double drift) {
  MvnParams e;
  e.mean.resize(courses);
  for (int j = 0; j < courses; ++j)
    e.mean(j) = (j >= block_lo && j < block_hi ? mean_in : mean_out) + drift * std::cos(1.7 * j + drift);
  e.cov = variance * MatrixXd::Identity(courses, courses);
  for (int a = block_lo; a < block_hi; ++a)
    for (int b = block_lo; b < block_hi; ++b)
      if (a != b) e.cov(a, b) = block_cov;
  return e;
}

inline MatrixXd stochastic3(std::initializer_list<double> rows) {
  MatrixXd m(3, 3);
  int i = 0;
  for (double v : rows) {
    m(i / 3, i % 3) = v;
    ++i;
  }
  return m;
}

}  // namespace detail

// Separated states: emission means sit exactly at the sign values, so the
// relaxed data reproduces them and the generating partition is also the
// maximum-likelihood clustering of the sign vectors. Per-timestep variation
// comes from rotating each state's course block (blocks of 3, 3, and 4).
inline Scenario scenario_recovery() {
  Scenario s;
  s.name = "recovery";
  CmmParams& p = s.params;
  p.k_states = 3;
  p.timesteps = 4;
  p.courses = 10;
  p.theta = VectorXd(3);
  p.theta << 0.5, 0.3, 0.2;
  p.transitions = {
      detail::stochastic3({0.70, 0.20, 0.10, 0.15, 0.70, 0.15, 0.10, 0.20, 0.70}),
      detail::stochastic3({0.60, 0.30, 0.10, 0.20, 0.60, 0.20, 0.10, 0.30, 0.60}),
      detail::stochastic3({0.80, 0.10, 0.10, 0.25, 0.50, 0.25, 0.15, 0.15, 0.70}),
  };
  const auto block_of = [](int j) { return j < 3 ? 0 : (j < 6 ? 1 : 2); };
  p.emissions.assign(4, std::vector<MvnParams>(3));
  for (int t = 0; t < 4; ++t)
    for (int k = 0; k < 3; ++k) {
      const int block = (k + t) % 3;
      MvnParams e;
      e.mean.resize(10);
      for (int j = 0; j < 10; ++j) e.mean(j) = block_of(j) == block ? 1.0 : -1.0;
      e.cov = 0.0625 * MatrixXd::Identity(10, 10);
      p.emissions[t][k] = e;
    }
  s.vocab = make_synthetic_vocabulary(10);
  p.vocab_fingerprint = s.vocab.fingerprint();
  p.validate();
  return s;
}

// Persistent states with strong within-timestep correlation; students carry
// their course block across years, which separates models that capture the
// joint structure from ones that only match per-cell frequencies.
inline Scenario scenario_benchmark() {
  Scenario s;
  s.name = "benchmark";
  CmmParams& p = s.params;
  p.k_states = 3;
  p.timesteps = 3;
  p.courses = 9;
  p.theta = VectorXd(3);
  p.theta << 0.40, 0.35, 0.25;
  p.transitions = {
      detail::stochastic3({0.75, 0.20, 0.05, 0.10, 0.75, 0.15, 0.05, 0.20, 0.75}),
      detail::stochastic3({0.70, 0.25, 0.05, 0.15, 0.70, 0.15, 0.10, 0.25, 0.65}),
  };
  // Take probabilities 0.88 / 0.12: the refit-resample map over the sign
  // moments is nearly unbiased there, so marginal errors measure structure,
  // not the relaxation itself.
  p.emissions.resize(3);
  for (int t = 0; t < 3; ++t)
    for (int k = 0; k < 3; ++k)
      p.emissions[t].push_back(detail::block_emission(9, 3 * k, 3 * k + 3, 0.91, -0.91, 0.60, 0.27,
                                                      0.0));
  s.vocab = make_synthetic_vocabulary(9);
  p.vocab_fingerprint = s.vocab.fingerprint();
  p.validate();
  return s;
}

// Saturated block emissions with genuinely mixing transitions: the hidden
// path is near-deterministic given the courses, but the flattened joint
// spreads over many more path combinations than a few mixture components
// can cover.
inline Scenario scenario_coupled() {
  Scenario s;
  s.name = "coupled";
  CmmParams& p = s.params;
  p.k_states = 3;
  p.timesteps = 3;
  p.courses = 9;
  p.theta = VectorXd(3);
  p.theta << 1.0 / 3, 1.0 / 3, 1.0 / 3;
  p.transitions = {
      detail::stochastic3({0.55, 0.35, 0.10, 0.15, 0.55, 0.30, 0.10, 0.35, 0.55}),
      detail::stochastic3({0.60, 0.30, 0.10, 0.20, 0.55, 0.25, 0.10, 0.30, 0.60}),
  };
  p.emissions.resize(3);
  for (int t = 0; t < 3; ++t)
    for (int k = 0; k < 3; ++k)
      p.emissions[t].push_back(detail::block_emission(9, 3 * k, 3 * k + 3, 1.0, -1.0, 0.0625, 0.0,
                                                      0.0));
  s.vocab = make_synthetic_vocabulary(9);
  p.vocab_fingerprint = s.vocab.fingerprint();
  p.validate();
  return s;
}

// Overlapping, interior-probability emissions: every weighted MLE stays away
// from the clamping boundaries, which is what EM-trace checks want.
inline Scenario scenario_em_stress() {
  Scenario s;
  s.name = "em-stress";
  CmmParams& p = s.params;
  p.k_states = 3;
  p.timesteps = 4;
  p.courses = 12;
  p.theta = VectorXd(3);
  p.theta << 0.45, 0.30, 0.25;
  p.transitions = {
      detail::stochastic3({0.60, 0.25, 0.15, 0.20, 0.60, 0.20, 0.15, 0.25, 0.60}),
      detail::stochastic3({0.55, 0.30, 0.15, 0.25, 0.55, 0.20, 0.15, 0.30, 0.55}),
      detail::stochastic3({0.65, 0.20, 0.15, 0.20, 0.65, 0.15, 0.10, 0.20, 0.70}),
  };
  p.emissions.resize(4);
  for (int t = 0; t < 4; ++t)
    for (int k = 0; k < 3; ++k)
      p.emissions[t].push_back(detail::block_emission(12, 4 * k, 4 * k + 4, 0.8, -0.9, 0.70, 0.12,
                                                      0.10 * (t + 1)));
  s.vocab = make_synthetic_vocabulary(12);
  p.vocab_fingerprint = s.vocab.fingerprint();
  p.validate();
  return s;
}

inline Scenario make_scenario(const std::string& name) {
  if (name == "recovery") return scenario_recovery();
  if (name == "benchmark") return scenario_benchmark();
  if (name == "coupled") return scenario_coupled();
  if (name == "em-stress") return scenario_em_stress();
  throw DataError("unknown scenario '" + name + "' (expected recovery|benchmark|coupled|em-stress)");
}

}  // namespace pathmix
