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
#include <string_view>
#include <vector>

#include "vapt/attention.hpp"
#include "vapt/rng.hpp"
#include "vapt/tensor.hpp"

namespace vapt {

enum class Activation { relu, tanh, identity };

std::string_view activation_name(Activation a) noexcept;
Activation parse_activation(std::string_view name);
double activate(Activation a, double x) noexcept;
/// Derivative of the activation; relu uses 0 at the kink.
double activation_derivative(Activation a, double x) noexcept;

/// Geometry of the prompt generator. Tokens form an H x W map (N = H * W);
/// the stride-1 unpadded convolution leaves an H' x W' map.
struct PromptShapeConfig {
  std::size_t blocks = 1;   // L
  std::size_t prompts = 1;  // N_p
  std::size_t height = 1;   // H
  std::size_t width = 1;    // W
  std::size_t kernel = 1;   // K
  std::size_t rank = 1;     // r
  std::size_t dim = 1;      // d

  std::size_t tokens() const noexcept { return height * width; }
  std::size_t conv_height() const noexcept { return height - kernel + 1; }
  std::size_t conv_width() const noexcept { return width - kernel + 1; }
  std::size_t conv_tokens() const noexcept { return conv_height() * conv_width(); }

  /// Throws ShapeError unless L, N_p, H, W, K, r, d >= 1 and K <= min(H, W).
  void validate() const;

  friend bool operator==(const PromptShapeConfig&, const PromptShapeConfig&) = default;
};

struct BlockParams {
  Tensor conv_kernel;  // K x K
  Tensor alphas;       // N_p x (H' * W'), token-wise projector coefficients
  Tensor ln_gain;      // d
  Tensor ln_bias;      // d

  friend bool operator==(const BlockParams&, const BlockParams&) = default;
};

/// g(x) = W2 * act(W1 * x), one instance shared by every block.
struct FeatureProjector {
  Tensor w1;  // r x d
  Tensor w2;  // d x r
  Activation activation = Activation::relu;

  friend bool operator==(const FeatureProjector&, const FeatureProjector&) = default;
};

struct VaptParams {
  PromptShapeConfig shape;
  std::vector<BlockParams> blocks;
  FeatureProjector projector;
  /// When false the per-token LayerNorm is skipped entirely (test mode for
  /// exact algebraic identities).
  bool layer_norm = true;

  /// Kernel ~ U(-1/K, 1/K), alphas ~ U(-1/sqrt(H'W'), 1/sqrt(H'W')),
  /// W1, W2 ~ U(-1/sqrt(d), 1/sqrt(d)), LayerNorm gain 1 and bias 0.
  static VaptParams initialize(const PromptShapeConfig& shape, Activation activation, Rng& rng);

  /// Checks every tensor against the shape config and r < d.
  void validate() const;

  friend bool operator==(const VaptParams&, const VaptParams&) = default;
};

/// sum_k alpha_row[k] * x_conv_flat[k]
Tensor token_wise_project(const Tensor& x_conv_flat, const Tensor& alpha_row);

/// Intermediates of the prompt pipeline for one block.
struct PromptTrace {
  Tensor xhat;                  // N x d, normalized tokens before the affine step
  std::vector<double> inv_std;  // per token
  Tensor normalized;            // N x d, LayerNorm output (or X when bypassed)
  Tensor conv;                  // (H' * W') x d, flattened row-major
  Tensor aggregated;            // N_p x d
  Tensor hidden;                // N_p x r, W1 * aggregated
  Tensor activated;             // N_p x r
  Tensor prompts;               // N_p x d
};

PromptTrace trace_adaptive_prompts(const Tensor& x, const VaptParams& params, std::size_t block);

/// LayerNorm per token -> H x W x d map -> shared-kernel convolution ->
/// flatten -> token-wise projection per prompt -> shared feature projector.
Tensor generate_adaptive_prompts(const Tensor& x, const VaptParams& params, std::size_t block);

/// Prompted attention with prompts generated from X itself.
Tensor vapt_forward(const Tensor& x, const VaptParams& params, const AttentionWeights& w, std::size_t block);

/// L*N_p*H'*W' + L*K^2 + 2*r*d (LayerNorm affine terms not included).
std::uint64_t vapt_param_count(const PromptShapeConfig& cfg);
/// vapt_param_count plus 2*L*d LayerNorm gains and biases.
std::uint64_t vapt_param_count_with_layer_norm(const PromptShapeConfig& cfg);
/// L*N_p*d. Only needs L, N_p, d.
std::uint64_t vpt_param_count(const PromptShapeConfig& cfg);

/// Number of trainable scalars actually stored in `params`.
std::uint64_t count_trainable_scalars(const VaptParams& params, bool include_layer_norm);

}  // namespace vapt
