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

#include "vapt/rate.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <boost/math/distributions/students_t.hpp>

#include "vapt/ops.hpp"
#include "vapt/parallel.hpp"
#include "vapt/simd.hpp"

namespace vapt {

std::string_view loss_kind_name(LossKind k) noexcept { return k == LossKind::d1 ? "D1" : "D2"; }

LossKind loss_kind_for(Activation act) noexcept { return act == Activation::identity ? LossKind::d2 : LossKind::d1; }


SlopeFit fit_loglog_slope(const std::vector<std::pair<double, double>>& points) {
  SlopeFit fit;
  std::vector<double> lx, ly;
  for (const auto& [n, loss] : points) {
    if (!(n > 0.0) || !(loss > 0.0) || !std::isfinite(loss)) {
      fit.warnings.push_back("dropped point n=" + std::to_string(n) + " loss=" + std::to_string(loss));
      continue;
    }
    lx.push_back(std::log(n));
    ly.push_back(std::log(loss));
  }
  const std::size_t k = lx.size();
  if (k < 3) throw DomainError("fit_loglog_slope: need at least 3 points with positive loss");
  const double mx = std::accumulate(lx.begin(), lx.end(), 0.0) / k;
  const double my = std::accumulate(ly.begin(), ly.end(), 0.0) / k;
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    sxx += (lx[i] - mx) * (lx[i] - mx);
    sxy += (lx[i] - mx) * (ly[i] - my);
    syy += (ly[i] - my) * (ly[i] - my);
  }
  if (sxx == 0.0) throw DomainError("fit_loglog_slope: all n are equal");
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  double sse = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    const double e = ly[i] - (fit.intercept + fit.slope * lx[i]);
    sse += e * e;
  }
  fit.r2 = syy > 0.0 ? 1.0 - sse / syy : 1.0;
  fit.slope_stderr = std::sqrt(sse / static_cast<double>(k - 2) / sxx);
  const boost::math::students_t t_dist(static_cast<double>(k - 2));
  const double half = boost::math::quantile(boost::math::complement(t_dist, 0.025)) * fit.slope_stderr;
  fit.ci_low = fit.slope - half;
  fit.ci_high = fit.slope + half;
  fit.points_used = k;
  return fit;
}

TrueModel make_true_model(const RegressionConfig& cfg_in, std::uint64_t seed) {
  RegressionConfig cfg = cfg_in;
  cfg.validate();
  Rng rng(seed, 0x74727565ULL);
  TrueModel t;
  const std::size_t r = cfg.rank, d = cfg.input_dim;
  for (std::size_t j = 0; j < cfg.true_atoms; ++j) {
    for (std::size_t attempt = 0;; ++attempt) {
      if (attempt == 100000) throw DomainError("make_true_model: could not place well-separated atoms");
      Tensor w1 = random_uniform({r, d}, -3.0, 3.0, rng);
      const double norm = frobenius_norm(w1.values());
      if (norm < 1.5 || norm > 3.0) continue;
      bool apart = true;
      for (const MixingAtom& other : t.measure.atoms) {
        Tensor diff = w1;
        simd::axpy(-1.0, other.w1.values(), diff.values());
        apart = apart && frobenius_norm(diff.values()) >= 1.5;
      }
      if (!apart) continue;
      t.measure.atoms.push_back({rng.uniform(-0.5, 0.5), std::move(w1)});
      break;
    }
  }
  do {
    t.measure.w2 = random_uniform({d, r}, -1.5, 1.5, rng);
  } while (frobenius_norm(t.measure.w2.values()) < 1.0);
  t.pre = PretrainedExpertSpec::random(cfg.pretrained, d, cfg.output_dim, rng);
  return t;
}

MixingMeasure oracle_init(const MixingMeasure& truth, std::size_t fitted, double perturbation, Rng& rng) {
  truth.validate();
  if (fitted < truth.size()) throw ShapeError("oracle_init: fewer fitted atoms than true atoms");
  std::vector<std::size_t> copies(truth.size(), 1);
  for (std::size_t k = truth.size(); k < fitted; ++k) ++copies[(k - truth.size()) % truth.size()];
  MixingMeasure init;
  init.w2 = truth.w2;
  for (std::size_t j = 0; j < truth.size(); ++j) {
    for (std::size_t c = 0; c < copies[j]; ++c) {
      init.atoms.push_back({truth.atoms[j].b - std::log(static_cast<double>(copies[j])), truth.atoms[j].w1});
    }
  }
  for (MixingAtom& a : init.atoms) {
    a.b += perturbation * rng.normal();
    for (double& v : a.w1.values()) v += perturbation * rng.normal();
  }
  for (double& v : init.w2.values()) v += perturbation * rng.normal();
  return init;
}

double prompt_function_error(const MixingMeasure& g, const MixingMeasure& g_star, const VoronoiAssignment& cells,
                             const Tensor& test_inputs, Activation act) {
  double worst = 0.0;
  for (std::size_t j = 0; j < cells.cells.size(); ++j) {
    if (cells.cells[j].size() != 1) continue;
    const std::size_t i = cells.cells[j][0];
    for (std::size_t t = 0; t < test_inputs.rows(); ++t) {
      Tensor diff = atom_prompt(test_inputs.row(t), g, i, act);
      const Tensor truth = atom_prompt(test_inputs.row(t), g_star, j, act);
      simd::axpy(-1.0, truth.values(), diff.values());
      worst = std::max(worst, frobenius_norm(diff.values()));
    }
  }
  return worst;
}

std::uint64_t replication_seed(std::uint64_t master, std::size_t n, std::size_t rep) noexcept {
  return splitmix64(splitmix64(master ^ 0x5241544545585031ULL) + splitmix64(n) + rep);
}

RateResult rate_experiment(const RateConfig& cfg, std::uint64_t seed) {
  if (cfg.sample_sizes.empty()) throw DomainError("rate experiment: empty sample-size grid");
  if (!std::is_sorted(cfg.sample_sizes.begin(), cfg.sample_sizes.end()) ||
      std::adjacent_find(cfg.sample_sizes.begin(), cfg.sample_sizes.end()) != cfg.sample_sizes.end()) {
    throw DomainError("rate experiment: sample sizes must be strictly increasing");
  }
  if (cfg.replications < 10) throw DomainError("rate experiment: at least 10 replications are required");
  RegressionConfig base = cfg.regression;
  base.validate();

  RateResult result;
  result.experiment_id = cfg.experiment_id;
  result.kind = loss_kind_for(base.activation);
  result.truth = make_true_model(base, seed);
  if (cfg.true_measure) {
    const MixingMeasure& m = *cfg.true_measure;
    m.validate();
    if (m.size() != base.true_atoms || m.dim() != base.input_dim || m.rank() != base.rank) {
      throw ShapeError("rate experiment: explicit true measure does not match L, d, r");
    }
    result.truth.measure = m;
  }
  const TrueModel& truth = result.truth;
  Rng test_rng(seed, 0x74657374ULL);
  const Tensor test_inputs = random_uniform({cfg.test_inputs, base.input_dim}, base.input_low, base.input_high, test_rng);

  const std::size_t reps = cfg.replications;
  result.rows.resize(cfg.sample_sizes.size() * reps);
  // Largest n first keeps threads busy until the end; slots are fixed by index.
  parallel_for(result.rows.size(), cfg.jobs, [&](std::size_t task) {
    const std::size_t slot = result.rows.size() - 1 - task;
    const std::size_t n = cfg.sample_sizes[slot / reps];
    const std::size_t rep = slot % reps;
    RateRow row;
    row.n = n;
    row.replication = rep;
    row.seed = replication_seed(seed, n, rep);
    Rng rng(row.seed);
    RegressionConfig rc = base;
    rc.samples = n;
    const Dataset data = sample_dataset(truth.measure, truth.pre, rc, rng);
    const MixingMeasure init = oracle_init(truth.measure, rc.fitted_atoms, cfg.init_perturbation, rng);
    const FitResult fit = fit_least_squares(data, truth.pre, rc, init, cfg.optimizer, rng);
    row.status = fit.status;
    row.iterations = fit.iterations;
    row.objective = fit.objective;
    if (fit.status != FitStatus::failed) {
      const VoronoiAssignment cells = result.kind == LossKind::d1 ? voronoi_assign(fit.measure, truth.measure)
                                                                   : voronoi_assign_products(fit.measure, truth.measure);
      row.loss = result.kind == LossKind::d1 ? voronoi_loss_d1(fit.measure, truth.measure, cells)
                                             : voronoi_loss_d2(fit.measure, truth.measure, cells);
      row.prompt_error = prompt_function_error(fit.measure, truth.measure, cells, test_inputs, rc.activation);
      if (!std::isfinite(row.loss)) row.status = FitStatus::failed;
    }
    result.rows[slot] = row;
  });

  std::vector<std::pair<double, double>> loss_pts, prompt_pts;
  for (std::size_t k = 0; k < cfg.sample_sizes.size(); ++k) {
    RatePoint pt;
    pt.n = cfg.sample_sizes[k];
    std::vector<double> losses;
    double prompt_sum = 0.0;
    for (std::size_t rep = 0; rep < reps; ++rep) {
      const RateRow& row = result.rows[k * reps + rep];
      if (row.status == FitStatus::failed) {
        ++pt.failures;
        continue;
      }
      losses.push_back(row.loss);
      prompt_sum += row.prompt_error;
    }
    pt.fits = losses.size();
    if (!losses.empty()) {
      pt.mean = std::accumulate(losses.begin(), losses.end(), 0.0) / losses.size();
      double ss = 0.0;
      for (double l : losses) ss += (l - pt.mean) * (l - pt.mean);
      pt.std = losses.size() > 1 ? std::sqrt(ss / (losses.size() - 1)) : 0.0;
      pt.prompt_error_mean = prompt_sum / losses.size();
    }
    result.failures += pt.failures;
    result.total += reps;
    loss_pts.emplace_back(static_cast<double>(pt.n), pt.mean);
    prompt_pts.emplace_back(static_cast<double>(pt.n), pt.prompt_error_mean);
    result.points.push_back(pt);
  }
  result.valid = static_cast<double>(result.failures) < cfg.max_failure_rate * static_cast<double>(result.total);
  if (loss_pts.size() >= 3) {
    try {
      result.loss_slope = fit_loglog_slope(loss_pts);
    } catch (const DomainError& e) {
      result.loss_slope.warnings.push_back(e.what());
    }
    try {
      result.prompt_slope = fit_loglog_slope(prompt_pts);
    } catch (const DomainError&) {
    }
  }
  return result;
}

}  // namespace vapt
