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
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "vapt/attention.hpp"
#include "vapt/prompts.hpp"
#include "vapt/tensor.hpp"

namespace vapt {

/// Named slices of a flat parameter vector.
class ParamLayout {
 public:
  struct Segment {
    std::string name;
    Shape shape;
    std::size_t offset = 0;
    std::size_t size() const noexcept { return shape_product(shape); }
    friend bool operator==(const Segment&, const Segment&) = default;
  };

  void add(std::string name, Shape shape);
  const std::vector<Segment>& segments() const noexcept { return segments_; }
  const Segment& find(std::string_view name) const;
  std::size_t total() const noexcept { return total_; }

  friend bool operator==(const ParamLayout&, const ParamLayout&) = default;

 private:
  std::vector<Segment> segments_;
  std::size_t total_ = 0;
};

/// All trainable scalars of one parameterization, flattened in layout order.
/// Frozen weights never appear in a ParamVector.
struct ParamVector {
  std::vector<double> values;
  ParamLayout layout;

  std::size_t size() const noexcept { return values.size(); }
  std::span<double> segment(std::string_view name);
  std::span<const double> segment(std::string_view name) const;
  Tensor segment_tensor(std::string_view name) const;
};

/// A scalar loss over a flat parameter vector with an exact gradient.
class Objective {
 public:
  virtual ~Objective() = default;
  virtual std::size_t dimension() const = 0;
  virtual double value(std::span<const double> p) const = 0;
  /// Writes d(loss)/dp into `gradient` (same length as p) and returns the loss.
  virtual double value_and_gradient(std::span<const double> p, std::span<double> gradient) const = 0;
};

/// Objective from two callables. Handy for tests and quick compositions.
class LambdaObjective final : public Objective {
 public:
  using ValueFn = std::function<double(std::span<const double>)>;
  using GradFn = std::function<double(std::span<const double>, std::span<double>)>;
  LambdaObjective(std::size_t dim, ValueFn value, GradFn grad)
      : dim_(dim), value_(std::move(value)), grad_(std::move(grad)) {}
  std::size_t dimension() const override { return dim_; }
  double value(std::span<const double> p) const override { return value_(p); }
  double value_and_gradient(std::span<const double> p, std::span<double> g) const override { return grad_(p, g); }

 private:
  std::size_t dim_;
  ValueFn value_;
  GradFn grad_;
};

/// a * first + b * second; both must share a dimension.
class LinearCombination final : public Objective {
 public:
  LinearCombination(double a, const Objective& first, double b, const Objective& second);
  std::size_t dimension() const override { return first_.dimension(); }
  double value(std::span<const double> p) const override;
  double value_and_gradient(std::span<const double> p, std::span<double> g) const override;

 private:
  double a_, b_;
  const Objective& first_;
  const Objective& second_;
};

/// Exact gradient. Throws DomainError if the loss or gradient is non-finite.
ParamVector grad(const Objective& loss, const ParamVector& p);

/// Central differences (loss(p + h e_i) - loss(p - h e_i)) / 2h.
ParamVector finite_diff_grad(const Objective& loss, const ParamVector& p, double h = 1e-5);

/// Largest elementwise |a - b| / max(|a|, |b|, 1e-8) between grad and
/// finite_diff_grad.
double grad_check(const Objective& loss, const ParamVector& p, double h = 1e-5);

// Flattening --------------------------------------------------------------

/// Segments block<l>.conv_kernel, block<l>.alphas, block<l>.ln_gain,
/// block<l>.ln_bias for every block, then projector.w1 and projector.w2.
ParamVector flatten(const VaptParams& params);
/// Inverse of flatten; shape, activation and LayerNorm mode come from `like`.
VaptParams unflatten(const ParamVector& p, const VaptParams& like);

/// One N_p x d prompt block per layer, segments prompts<l>.
ParamVector flatten_prompts(const std::vector<Tensor>& prompts);
std::vector<Tensor> unflatten_prompts(const ParamVector& p);

// Attention-side losses ---------------------------------------------------

/// One training pair routed through block `block`.
struct AttentionSample {
  std::size_t block = 0;
  Tensor x;       // N x d
  Tensor target;  // N x d
};

/// d(loss)/dP for a prompted attention pass, given d(loss)/d(output).
Tensor prompted_msa_prompt_adjoint(const AttentionTrace& trace, const Tensor& x, const Tensor& prompts,
                                   const AttentionWeights& w, const Tensor& output_adjoint);

/// 1/2 sum ||prompted_msa_forward(X, P_l, W_l) - Y||^2 over the samples, as a
/// function of the per-block prompts P_l (VPT mode).
class VptPromptLoss final : public Objective {
 public:
  VptPromptLoss(std::vector<AttentionWeights> weights, std::vector<AttentionSample> samples, ParamLayout layout);
  std::size_t dimension() const override { return layout_.total(); }
  double value(std::span<const double> p) const override;
  double value_and_gradient(std::span<const double> p, std::span<double> g) const override;

 private:
  std::vector<AttentionWeights> weights_;
  std::vector<AttentionSample> samples_;
  ParamLayout layout_;
};

/// 1/2 sum ||vapt_forward(X, params, W_l, l) - Y||^2 as a function of every
/// trainable VAPT scalar (VAPT mode).
class VaptLoss final : public Objective {
 public:
  VaptLoss(VaptParams like, std::vector<AttentionWeights> weights, std::vector<AttentionSample> samples);
  std::size_t dimension() const override { return layout_.total(); }
  double value(std::span<const double> p) const override;
  double value_and_gradient(std::span<const double> p, std::span<double> g) const override;

 private:
  VaptParams like_;
  ParamLayout layout_;
  std::vector<AttentionWeights> weights_;
  std::vector<AttentionSample> samples_;
};

}  // namespace vapt
