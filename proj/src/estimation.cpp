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

#include "vapt/estimation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "vapt/ops.hpp"
#include "vapt/simd.hpp"

namespace vapt {

void MixingMeasure::validate() const {
  if (w2.rank() != 2 || w2.rows() == 0 || w2.cols() == 0) throw ShapeError("mixing measure: W2 must be a d x r matrix");
  require_finite(w2.values(), "mixing measure W2");
  for (const MixingAtom& a : atoms) {
    if (a.w1.shape() != Shape{rank(), dim()}) {
      throw ShapeError("mixing measure: atom W1 must be " + shape_string({rank(), dim()}) + ", got " +
                       shape_string(a.w1.shape()));
    }
    require_finite(a.w1.values(), "mixing measure W1");
    if (!std::isfinite(a.b)) throw DomainError("mixing measure: log-weight is not finite");
  }
}

Tensor MixingMeasure::product(std::size_t i) const { return matmul(w2, atoms.at(i).w1); }

void PretrainedExpertSpec::validate(std::size_t d, std::size_t d_out) const {
  if (a0_bias.size() != a0.size() || eta0.size() != a0.size()) {
    throw ShapeError("pre-trained experts: A0, a0 and eta0 counts differ");
  }
  for (std::size_t j = 0; j < a0.size(); ++j) {
    if (a0[j].shape() != Shape{d, d}) throw ShapeError("pre-trained experts: A0 must be d x d");
    if (eta0[j].shape() != Shape{d_out, d}) throw ShapeError("pre-trained experts: eta0 must be d' x d");
  }
}

PretrainedExpertSpec PretrainedExpertSpec::random(std::size_t count, std::size_t d, std::size_t d_out, Rng& rng) {
  PretrainedExpertSpec s;
  for (std::size_t j = 0; j < count; ++j) {
    s.a0.push_back(Tensor({d, d}));
    s.a0_bias.push_back(0.0);
    s.eta0.push_back(random_normal({d_out, d}, 0.0, 1.0, rng));
  }
  return s;
}

void RegressionConfig::validate() {
  if (input_dim == 0 || output_dim == 0 || rank == 0) throw ShapeError("regression config: d, d' and r must be positive");
  if (true_atoms == 0) throw ShapeError("regression config: at least one true atom is required");
  if (fitted_atoms < true_atoms) throw ShapeError("regression config: fitted atoms L' must be at least L");
  if (!(noise_std >= 0.0) || !std::isfinite(noise_std)) throw DomainError("regression config: noise_std must be >= 0");
  if (!(input_low < input_high)) throw DomainError("regression config: empty input box");
  if (b_matrix.size() == 0) b_matrix = Tensor::eye(input_dim);
  if (c_matrix.size() == 0) {
    c_matrix = Tensor({output_dim, input_dim});
    for (std::size_t k = 0; k < std::min(output_dim, input_dim); ++k) c_matrix.at(k, k) = 1.0;
  }
  if (b_matrix.shape() != Shape{input_dim, input_dim}) throw ShapeError("regression config: B must be d x d");
  if (c_matrix.shape() != Shape{output_dim, input_dim}) throw ShapeError("regression config: C must be d' x d");
}

const Tensor& RegressionConfig::b() const {
  if (b_matrix.size() == 0) throw ShapeError("regression config: call validate() before use");
  return b_matrix;
}

const Tensor& RegressionConfig::c() const {
  if (c_matrix.size() == 0) throw ShapeError("regression config: call validate() before use");
  return c_matrix;
}

namespace {

void check_point(std::span<const double> x, const MixingMeasure& g, const PretrainedExpertSpec& pre,
                 const RegressionConfig& cfg) {
  if (x.size() != cfg.input_dim || g.dim() != cfg.input_dim) throw ShapeError("regression: input dimension mismatch");
  g.validate();
  pre.validate(cfg.input_dim, cfg.output_dim);
}

struct Components {
  std::vector<double> scores;
  std::vector<Tensor> outputs;
};

Components components(std::span<const double> x, const MixingMeasure& g, const PretrainedExpertSpec& pre,
                      const RegressionConfig& cfg) {
  check_point(x, g, pre, cfg);
  Components c;
  for (std::size_t j = 0; j < pre.size(); ++j) {
    c.scores.push_back(simd::dot(x, matvec(pre.a0[j], x)) + pre.a0_bias[j]);
    c.outputs.push_back(Tensor({cfg.output_dim}, matvec(pre.eta0[j], x)));
  }
  for (std::size_t i = 0; i < g.size(); ++i) {
    const Tensor prompt = atom_prompt(x, g, i, cfg.activation);
    c.scores.push_back(simd::dot(matvec(cfg.b(), prompt.values()), x) + g.atoms[i].b);
    c.outputs.push_back(Tensor({cfg.output_dim}, matvec(cfg.c(), prompt.values())));
  }
  return c;
}

}  // namespace

Tensor atom_prompt(std::span<const double> x, const MixingMeasure& g, std::size_t i, Activation act) {
  std::vector<double> hidden = matvec(g.atoms.at(i).w1, x);
  for (double& h : hidden) h = activate(act, h);
  return Tensor({g.dim()}, matvec(g.w2, hidden));
}

std::vector<double> regression_gates(std::span<const double> x, const MixingMeasure& g,
                                     const PretrainedExpertSpec& pre, const RegressionConfig& cfg) {
  std::vector<double> s = components(x, g, pre, cfg).scores;
  softmax_inplace(s);
  return s;
}

Tensor eval_true_regression(std::span<const double> x, const MixingMeasure& g, const PretrainedExpertSpec& pre,
                            const RegressionConfig& cfg) {
  Components c = components(x, g, pre, cfg);
  softmax_inplace(c.scores);
  Tensor out({cfg.output_dim});
  for (std::size_t m = 0; m < c.scores.size(); ++m) simd::axpy(c.scores[m], c.outputs[m].values(), out.values());
  return out;
}

Dataset sample_dataset(const MixingMeasure& g_star, const PretrainedExpertSpec& pre, const RegressionConfig& cfg,
                       Rng& rng) {
  Dataset data{Tensor({cfg.samples, cfg.input_dim}), Tensor({cfg.samples, cfg.output_dim})};
  for (std::size_t i = 0; i < cfg.samples; ++i) {
    auto x = data.x.row(i);
    rng.fill_uniform(x, cfg.input_low, cfg.input_high);
    const Tensor f = eval_true_regression(x, g_star, pre, cfg);
    auto y = data.y.row(i);
    for (std::size_t k = 0; k < cfg.output_dim; ++k) y[k] = f[k] + cfg.noise_std * rng.normal();
  }
  return data;
}

// Voronoi ------------------------------------------------------------------------

namespace {

double sq_dist(std::span<const double> a, std::span<const double> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
  return acc;
}

void check_pair(const MixingMeasure& g, const MixingMeasure& g_star) {
  g.validate();
  g_star.validate();
  if (g.w2.shape() != g_star.w2.shape()) throw ShapeError("voronoi: measures differ in r or d");
  if (g_star.size() == 0) throw ShapeError("voronoi: true measure has no atoms");
}

template <typename Dist>
VoronoiAssignment assign(std::size_t fitted, std::size_t truth, Dist dist) {
  VoronoiAssignment a;
  a.cells.resize(truth);
  for (std::size_t i = 0; i < fitted; ++i) {
    std::size_t best = 0;
    double best_d = dist(i, 0);
    for (std::size_t j = 1; j < truth; ++j) {
      const double dj = dist(i, j);
      if (dj < best_d) {
        best_d = dj;
        best = j;
      }
    }
    a.cells[best].push_back(i);
  }
  return a;
}

double mass_term(const MixingMeasure& g, const MixingMeasure& g_star, const VoronoiAssignment& cells) {
  double total = 0.0;
  for (std::size_t j = 0; j < g_star.size(); ++j) {
    double mass = 0.0;
    for (std::size_t i : cells.cells[j]) mass += std::exp(g.atoms[i].b);
    total += std::abs(mass - std::exp(g_star.atoms[j].b));
  }
  return total;
}

void check_cells(const VoronoiAssignment& cells, std::size_t fitted, std::size_t truth) {
  if (cells.cells.size() != truth) throw ShapeError("voronoi: one cell per true atom is required");
  std::vector<bool> seen(fitted, false);
  for (const auto& cell : cells.cells) {
    for (std::size_t i : cell) {
      if (i >= fitted || seen[i]) throw ShapeError("voronoi: cells must partition the fitted atoms");
      seen[i] = true;
    }
  }
  if (std::find(seen.begin(), seen.end(), false) != seen.end()) {
    throw ShapeError("voronoi: cells must partition the fitted atoms");
  }
}

}  // namespace

VoronoiAssignment voronoi_assign(const MixingMeasure& g, const MixingMeasure& g_star) {
  check_pair(g, g_star);
  const double w2 = sq_dist(g.w2.values(), g_star.w2.values());
  return assign(g.size(), g_star.size(), [&](std::size_t i, std::size_t j) {
    return sq_dist(g.atoms[i].w1.values(), g_star.atoms[j].w1.values()) + w2;
  });
}

VoronoiAssignment voronoi_assign_products(const MixingMeasure& g, const MixingMeasure& g_star) {
  check_pair(g, g_star);
  std::vector<Tensor> fitted, truth;
  for (std::size_t i = 0; i < g.size(); ++i) fitted.push_back(g.product(i));
  for (std::size_t j = 0; j < g_star.size(); ++j) truth.push_back(g_star.product(j));
  return assign(g.size(), g_star.size(),
                [&](std::size_t i, std::size_t j) { return sq_dist(fitted[i].values(), truth[j].values()); });
}

double voronoi_loss_d1(const MixingMeasure& g, const MixingMeasure& g_star) {
  return voronoi_loss_d1(g, g_star, voronoi_assign(g, g_star));
}

double voronoi_loss_d1(const MixingMeasure& g, const MixingMeasure& g_star, const VoronoiAssignment& cells) {
  check_pair(g, g_star);
  check_cells(cells, g.size(), g_star.size());
  const double dw2 = std::sqrt(sq_dist(g.w2.values(), g_star.w2.values()));
  double total = mass_term(g, g_star, cells);
  for (std::size_t j = 0; j < g_star.size(); ++j) {
    const bool single = cells.cells[j].size() == 1;
    for (std::size_t i : cells.cells[j]) {
      const double d1sq = sq_dist(g.atoms[i].w1.values(), g_star.atoms[j].w1.values());
      const double term = single ? std::sqrt(d1sq) + dw2 : d1sq + dw2 * dw2;
      total += std::exp(g.atoms[i].b) * term;
    }
  }
  return total;
}

double voronoi_loss_d2(const MixingMeasure& g, const MixingMeasure& g_star) {
  return voronoi_loss_d2(g, g_star, voronoi_assign_products(g, g_star));
}

double voronoi_loss_d2(const MixingMeasure& g, const MixingMeasure& g_star, const VoronoiAssignment& cells) {
  check_pair(g, g_star);
  check_cells(cells, g.size(), g_star.size());
  double total = mass_term(g, g_star, cells);
  for (std::size_t j = 0; j < g_star.size(); ++j) {
    const bool single = cells.cells[j].size() == 1;
    const Tensor truth = g_star.product(j);
    for (std::size_t i : cells.cells[j]) {
      const double dsq = sq_dist(g.product(i).values(), truth.values());
      total += std::exp(g.atoms[i].b) * (single ? std::sqrt(dsq) : dsq);
    }
  }
  return total;
}

}  // namespace vapt
