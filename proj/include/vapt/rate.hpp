// Copyright 2026 the vapt-lab authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "vapt/estimation.hpp"

namespace vapt {

enum class LossKind { d1, d2 };
std::string_view loss_kind_name(LossKind k) noexcept;
/// D2 for the identity activation, D1 otherwise.
LossKind loss_kind_for(Activation act) noexcept;

struct SlopeFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r2 = 0.0;
  double slope_stderr = 0.0;
  double ci_low = 0.0;   // 95% t-interval on the slope
  double ci_high = 0.0;
  std::size_t points_used = 0;
  std::vector<std::string> warnings;
};

/// OLS of log(loss) on log(n). Points with loss <= 0 are dropped with a
/// warning; fewer than 3 usable points throws DomainError.
SlopeFit fit_loglog_slope(const std::vector<std::pair<double, double>>& points);

struct TrueModel {
  MixingMeasure measure;
  PretrainedExpertSpec pre;
};

/// Seeded ground truth with well-separated atoms: every W1_j has norm in
/// [1.5, 3], distinct atoms are at least 1.5 apart, ||W2|| >= 1 and b_j in
/// [-0.5, 0.5]. Large W1 keeps tanh away from its linear regime, where the
/// (c W1, W2 / c) rescaling would make the atoms nearly unidentifiable.
TrueModel make_true_model(const RegressionConfig& cfg, std::uint64_t seed);

/// Truth with extra atoms made by splitting true atoms (each copy gets
/// b - log(copies)), then every coordinate perturbed by N(0, perturbation^2).
MixingMeasure oracle_init(const MixingMeasure& truth, std::size_t fitted, double perturbation, Rng& rng);

/// sup over the test inputs of ||W2 s(W1_i x) - W2* s(W1*_j x)||, maximized
/// over cells holding exactly one fitted atom. Zero when no such cell exists.
double prompt_function_error(const MixingMeasure& g, const MixingMeasure& g_star, const VoronoiAssignment& cells,
                             const Tensor& test_inputs, Activation act);

struct RateConfig {
  std::string experiment_id = "rate";
  RegressionConfig regression;  // samples is overwritten by each grid point
  std::vector<std::size_t> sample_sizes{200, 500, 1000, 2000, 5000, 10000};
  std::size_t replications = 20;
  double init_perturbation = 1e-2;
  OptimizerConfig optimizer;
  std::optional<MixingMeasure> true_measure;  // generated from the seed when empty
  std::size_t test_inputs = 100;
  std::size_t jobs = 1;
  double max_failure_rate = 0.1;
};

struct RateRow {
  std::size_t n = 0;
  std::size_t replication = 0;
  double loss = 0.0;
  double prompt_error = 0.0;
  double objective = 0.0;
  FitStatus status = FitStatus::failed;
  std::size_t iterations = 0;
  std::uint64_t seed = 0;
};

struct RatePoint {
  std::size_t n = 0;
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation
  double prompt_error_mean = 0.0;
  std::size_t fits = 0;
  std::size_t failures = 0;
};

struct RateResult {
  std::string experiment_id;
  LossKind kind = LossKind::d1;
  TrueModel truth;
  std::vector<RateRow> rows;  // grid order, then replication order
  std::vector<RatePoint> points;
  SlopeFit loss_slope;
  std::optional<SlopeFit> prompt_slope;
  std::size_t failures = 0;
  std::size_t total = 0;
  bool valid = false;  // failure rate below the limit
};

/// Seed of replication `rep` at sample size n, derived from the master seed.
std::uint64_t replication_seed(std::uint64_t master, std::size_t n, std::size_t rep) noexcept;

/// For each n: sample, fit from the oracle init, record D1 or D2. Needs a
/// strictly increasing grid and at least 10 replications.
/// Replications run on cfg.jobs threads; output does not depend on jobs.
RateResult rate_experiment(const RateConfig& cfg, std::uint64_t seed);

}  // namespace vapt
