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

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "vapt/gradient.hpp"
#include "vapt/prompts.hpp"
#include "vapt/rng.hpp"
#include "vapt/tensor.hpp"

namespace vapt {

/// One prompt atom: log-weight b and first projector layer W1 (r x d).
struct MixingAtom {
  double b = 0.0;
  Tensor w1;
};

/// sum_i exp(b_i) delta_(W1_i, W2) with a single W2 (d x r) shared by all atoms.
struct MixingMeasure {
  std::vector<MixingAtom> atoms;
  Tensor w2;

  std::size_t size() const noexcept { return atoms.size(); }
  std::size_t rank() const noexcept { return w2.cols(); }
  std::size_t dim() const noexcept { return w2.rows(); }
  /// Throws ShapeError on inconsistent shapes, DomainError on non-finite entries.
  void validate() const;
  /// W2 * W1_i (d x d).
  Tensor product(std::size_t i) const;
};

/// Known pre-trained experts: score X^T A0_j X + a0_j, expert eta0_j X.
struct PretrainedExpertSpec {
  std::vector<Tensor> a0;      // d x d each
  std::vector<double> a0_bias;
  std::vector<Tensor> eta0;    // d' x d each

  std::size_t size() const noexcept { return a0.size(); }
  void validate(std::size_t d, std::size_t d_out) const;
  /// N experts with A0 = 0, a0 = 0 and eta0 entries drawn N(0, 1).
  static PretrainedExpertSpec random(std::size_t count, std::size_t d, std::size_t d_out, Rng& rng);
};

struct RegressionConfig {
  std::size_t input_dim = 2;    // d
  std::size_t output_dim = 2;   // d'
  std::size_t rank = 1;         // r
  std::size_t pretrained = 1;   // N
  std::size_t true_atoms = 2;   // L
  std::size_t fitted_atoms = 2; // L'
  std::size_t samples = 1000;   // n
  double noise_std = 0.1;       // nu
  Activation activation = Activation::tanh;
  Tensor b_matrix;              // d x d, identity when empty
  Tensor c_matrix;              // d' x d, rectangular identity when empty
  double input_low = -1.0;      // X ~ uniform[low, high]^d
  double input_high = 1.0;

  /// Fills empty B and C and checks every invariant (L' >= L, nu >= 0, ...).
  void validate();
  const Tensor& b() const;
  const Tensor& c() const;
};

/// Gate weights of the N + l components at x, pre-trained experts first.
std::vector<double> regression_gates(std::span<const double> x, const MixingMeasure& g,
                                     const PretrainedExpertSpec& pre, const RegressionConfig& cfg);

/// f_G(x) in R^{d'}.
Tensor eval_true_regression(std::span<const double> x, const MixingMeasure& g, const PretrainedExpertSpec& pre,
                            const RegressionConfig& cfg);

/// W2 sigma(W1_i x), the prompt produced by atom i.
Tensor atom_prompt(std::span<const double> x, const MixingMeasure& g, std::size_t i, Activation act);

struct Dataset {
  Tensor x;  // n x d
  Tensor y;  // n x d'
  std::size_t size() const noexcept { return x.rows(); }
};

/// X_i iid uniform on the input box, Y_i = f_G(X_i) + N(0, nu^2 I).
Dataset sample_dataset(const MixingMeasure& g_star, const PretrainedExpertSpec& pre, const RegressionConfig& cfg,
                       Rng& rng);

// Least squares --------------------------------------------------------------

/// Segments "b" (l), "w1" (l x r x d), "w2" (d x r).
ParamVector flatten(const MixingMeasure& g);
MixingMeasure unflatten_measure(std::span<const double> p, std::size_t atoms, std::size_t rank, std::size_t dim);

/// sum_i ||Y_i - f_G(X_i)||^2 over a fixed dataset, batched across samples.
class RegressionObjective final : public Objective {
 public:
  RegressionObjective(const Dataset& data, PretrainedExpertSpec pre, RegressionConfig cfg, std::size_t atoms);
  std::size_t dimension() const override;
  double value(std::span<const double> p) const override;
  double value_and_gradient(std::span<const double> p, std::span<double> g) const override;

 private:
  double evaluate(std::span<const double> p, double* gradient) const;

  std::vector<std::vector<double>> x_cols_;   // d columns of length n
  std::vector<std::vector<double>> bt_x_;     // (B^T X) columns
  std::vector<std::vector<double>> y_cols_;   // d' columns
  std::vector<std::vector<double>> pre_scores_;
  std::vector<std::vector<std::vector<double>>> pre_outputs_;  // [j][k][n]
  PretrainedExpertSpec pre_;
  RegressionConfig cfg_;
  std::size_t atoms_;
};

struct OptimizerConfig {
  std::size_t max_iterations = 5000;
  std::size_t stall_window = 50;
  double stall_tolerance = 1e-10;
  double box_bound = 5.0;
  double initial_step = 1e-3;
  double min_step = 1e-15;
  double max_step = 0.5;
  std::size_t restarts = 3;
  double restart_jitter = 1e-2;
};

enum class FitStatus { converged, max_iterations, failed };
std::string_view fit_status_name(FitStatus s) noexcept;

struct FitResult {
  MixingMeasure measure;
  std::vector<double> parameters;  // flat optimum, layout of the objective
  double objective = 0.0;
  std::size_t iterations = 0;
  std::size_t restarts = 0;
  FitStatus status = FitStatus::failed;
  std::vector<double> trace;  // objective after every accepted step, starting point first
  std::string diagnostics;
};

/// Clamps every coordinate to [-bound, bound].
void project_to_box(std::span<double> p, double bound) noexcept;

/// Adaptive per-coordinate step minimization (resilient backpropagation with
/// step rejection) of the least-squares objective from `init`. Non-finite
/// objectives restart from init jittered by `restart_jitter`; if every start
/// fails the result has status failed and a diagnostic message.
FitResult fit_least_squares(const Dataset& data, const PretrainedExpertSpec& pre, const RegressionConfig& cfg,
                            const MixingMeasure& init, const OptimizerConfig& opt, Rng& rng);

/// Generic minimizer behind fit_least_squares.
FitResult minimize_boxed(const Objective& loss, std::vector<double> start, const OptimizerConfig& opt, Rng& rng);

/// Random inits drawn uniformly from the box; returns the best fit. Stress mode only.
FitResult fit_multistart(const Dataset& data, const PretrainedExpertSpec& pre, const RegressionConfig& cfg,
                         std::size_t starts, const OptimizerConfig& opt, Rng& rng);

// Voronoi losses ---------------------------------------------------------------

/// cells[j] lists the fitted atoms whose nearest true atom is j.
struct VoronoiAssignment {
  std::vector<std::vector<std::size_t>> cells;
};

/// Nearest true atom under the Frobenius distance of (W1_i, W2) to (W1*_j, W2*);
/// ties go to the smallest j.
VoronoiAssignment voronoi_assign(const MixingMeasure& g, const MixingMeasure& g_star);
/// Same rule over the products W2 W1_i versus W2* W1*_j.
VoronoiAssignment voronoi_assign_products(const MixingMeasure& g, const MixingMeasure& g_star);

double voronoi_loss_d1(const MixingMeasure& g, const MixingMeasure& g_star);
double voronoi_loss_d1(const MixingMeasure& g, const MixingMeasure& g_star, const VoronoiAssignment& cells);
double voronoi_loss_d2(const MixingMeasure& g, const MixingMeasure& g_star);
double voronoi_loss_d2(const MixingMeasure& g, const MixingMeasure& g_star, const VoronoiAssignment& cells);

}  // namespace vapt
