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

#include "vapt/prompts.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "vapt/ops.hpp"
#include "vapt/simd.hpp"

namespace vapt {

std::string_view activation_name(Activation a) noexcept {
  switch (a) {
    case Activation::relu:
      return "relu";
    case Activation::tanh:
      return "tanh";
    case Activation::identity:
      return "identity";
  }
  return "?";
}

Activation parse_activation(std::string_view name) {
  if (name == "relu") return Activation::relu;
  if (name == "tanh") return Activation::tanh;
  if (name == "identity") return Activation::identity;
  throw std::invalid_argument("unknown activation '" + std::string(name) + "'");
}

double activate(Activation a, double x) noexcept {
  switch (a) {
    case Activation::relu:
      return x > 0.0 ? x : 0.0;
    case Activation::tanh:
      return std::tanh(x);
    case Activation::identity:
      return x;
  }
  return x;
}

double activation_derivative(Activation a, double x) noexcept {
  switch (a) {
    case Activation::relu:
      return x > 0.0 ? 1.0 : 0.0;
    case Activation::tanh: {
      const double t = std::tanh(x);
      return 1.0 - t * t;
    }
    case Activation::identity:
      return 1.0;
  }
  return 1.0;
}

void PromptShapeConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v == 0) throw ShapeError(std::string("prompt shape: ") + name + " must be >= 1");
  };
  positive(blocks, "blocks");
  positive(prompts, "prompts");
  positive(height, "height");
  positive(width, "width");
  positive(kernel, "kernel");
  positive(rank, "rank");
  positive(dim, "dim");
  if (kernel > height || kernel > width) {
    throw ShapeError("prompt shape: kernel " + std::to_string(kernel) + " exceeds the " + std::to_string(height) + "x" +
                     std::to_string(width) + " feature map");
  }
}

VaptParams VaptParams::initialize(const PromptShapeConfig& shape, Activation activation, Rng& rng) {
  shape.validate();
  VaptParams p;
  p.shape = shape;
  const double k_bound = 1.0 / static_cast<double>(shape.kernel);
  const double a_bound = 1.0 / std::sqrt(static_cast<double>(shape.conv_tokens()));
  const double w_bound = 1.0 / std::sqrt(static_cast<double>(shape.dim));
  for (std::size_t l = 0; l < shape.blocks; ++l) {
    BlockParams b;
    b.conv_kernel = random_uniform({shape.kernel, shape.kernel}, -k_bound, k_bound, rng);
    b.alphas = random_uniform({shape.prompts, shape.conv_tokens()}, -a_bound, a_bound, rng);
    b.ln_gain = Tensor::filled({shape.dim}, 1.0);
    b.ln_bias = Tensor({shape.dim});
    p.blocks.push_back(std::move(b));
  }
  p.projector.w1 = random_uniform({shape.rank, shape.dim}, -w_bound, w_bound, rng);
  p.projector.w2 = random_uniform({shape.dim, shape.rank}, -w_bound, w_bound, rng);
  p.projector.activation = activation;
  p.validate();
  return p;
}

void VaptParams::validate() const {
  shape.validate();
  if (shape.rank >= shape.dim) throw ShapeError("vapt params: projector rank must be smaller than d");
  if (blocks.size() != shape.blocks) throw ShapeError("vapt params: block count mismatch");
  const std::size_t k = shape.kernel, d = shape.dim;
  for (const BlockParams& b : blocks) {
    if (b.conv_kernel.shape() != Shape{k, k}) throw ShapeError("vapt params: conv kernel must be K x K");
    if (b.alphas.shape() != Shape{shape.prompts, shape.conv_tokens()}) {
      throw ShapeError("vapt params: alphas must be N_p x (H' * W')");
    }
    if (b.ln_gain.shape() != Shape{d} || b.ln_bias.shape() != Shape{d}) {
      throw ShapeError("vapt params: LayerNorm terms must have length d");
    }
  }
  if (projector.w1.shape() != Shape{shape.rank, d}) throw ShapeError("vapt params: W1 must be r x d");
  if (projector.w2.shape() != Shape{d, shape.rank}) throw ShapeError("vapt params: W2 must be d x r");
}

Tensor token_wise_project(const Tensor& x_conv_flat, const Tensor& alpha_row) {
  if (x_conv_flat.rank() != 2 || alpha_row.size() != x_conv_flat.rows()) {
    throw ShapeError("token_wise_project: " + std::to_string(alpha_row.size()) + " coefficients for " +
                     shape_string(x_conv_flat.shape()) + " tokens");
  }
  Tensor out({x_conv_flat.cols()});
  for (std::size_t k = 0; k < alpha_row.size(); ++k) simd::axpy(alpha_row[k], x_conv_flat.row(k), out.values());
  return out;
}

PromptTrace trace_adaptive_prompts(const Tensor& x, const VaptParams& params, std::size_t block) {
  const PromptShapeConfig& s = params.shape;
  if (block >= params.blocks.size()) throw IndexError("generate_adaptive_prompts: block index out of range");
  if (x.rank() != 2 || x.rows() != s.tokens() || x.cols() != s.dim) {
    throw ShapeError("generate_adaptive_prompts: X must be " + std::to_string(s.tokens()) + " x " +
                     std::to_string(s.dim) + " (N = H * W), got " + shape_string(x.shape()));
  }
  require_finite(x, "generate_adaptive_prompts input");
  const BlockParams& b = params.blocks[block];
  const FeatureProjector& g = params.projector;
  const std::size_t n = s.tokens(), d = s.dim, r = s.rank, np = s.prompts;

  PromptTrace t;
  if (params.layer_norm) {
    t.xhat = Tensor({n, d});
    t.normalized = Tensor({n, d});
    t.inv_std.resize(n);
    for (std::size_t k = 0; k < n; ++k) {
      const NormalizedRow nr = normalize_row(x.row(k));
      t.inv_std[k] = nr.inv_std;
      auto xh = t.xhat.row(k);
      auto out = t.normalized.row(k);
      for (std::size_t c = 0; c < d; ++c) {
        xh[c] = nr.xhat[c];
        out[c] = b.ln_gain[c] * nr.xhat[c] + b.ln_bias[c];
      }
    }
  } else {
    t.normalized = x;
  }

  t.conv = channelwise_conv2d(t.normalized.reshaped({s.height, s.width, d}), b.conv_kernel)
               .reshaped({s.conv_tokens(), d});

  t.aggregated = Tensor({np, d});
  t.hidden = Tensor({np, r});
  t.activated = Tensor({np, r});
  t.prompts = Tensor({np, d});
  for (std::size_t j = 0; j < np; ++j) {
    const auto alpha = b.alphas.row(j);
    auto agg = t.aggregated.row(j);
    for (std::size_t k = 0; k < alpha.size(); ++k) simd::axpy(alpha[k], t.conv.row(k), agg);
    for (std::size_t q = 0; q < r; ++q) {
      t.hidden.at(j, q) = simd::dot(g.w1.row(q), agg);
      t.activated.at(j, q) = activate(g.activation, t.hidden.at(j, q));
    }
    const auto act = t.activated.row(j);
    auto prompt = t.prompts.row(j);
    for (std::size_t c = 0; c < d; ++c) prompt[c] = simd::dot(g.w2.row(c), act);
  }
  require_finite(t.prompts, "generate_adaptive_prompts");
  return t;
}

Tensor generate_adaptive_prompts(const Tensor& x, const VaptParams& params, std::size_t block) {
  return trace_adaptive_prompts(x, params, block).prompts;
}

Tensor vapt_forward(const Tensor& x, const VaptParams& params, const AttentionWeights& w, std::size_t block) {
  return prompted_msa_forward(x, generate_adaptive_prompts(x, params, block), w);
}

std::uint64_t vapt_param_count(const PromptShapeConfig& cfg) {
  cfg.validate();
  const std::uint64_t l = cfg.blocks, np = cfg.prompts, k = cfg.kernel;
  return l * np * cfg.conv_height() * cfg.conv_width() + l * k * k + 2ull * cfg.rank * cfg.dim;
}

std::uint64_t vapt_param_count_with_layer_norm(const PromptShapeConfig& cfg) {
  return vapt_param_count(cfg) + 2ull * cfg.blocks * cfg.dim;
}

std::uint64_t vpt_param_count(const PromptShapeConfig& cfg) {
  return static_cast<std::uint64_t>(cfg.blocks) * cfg.prompts * cfg.dim;
}

std::uint64_t count_trainable_scalars(const VaptParams& params, bool include_layer_norm) {
  std::uint64_t total = params.projector.w1.size() + params.projector.w2.size();
  for (const BlockParams& b : params.blocks) {
    total += b.conv_kernel.size() + b.alphas.size();
    if (include_layer_norm) total += b.ln_gain.size() + b.ln_bias.size();
  }
  return total;
}

}  // namespace vapt
