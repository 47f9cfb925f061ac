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

#include "vapt/gradient.hpp"

#include <algorithm>
#include <cmath>

#include "vapt/ops.hpp"
#include "vapt/simd.hpp"

namespace vapt {

void ParamLayout::add(std::string name, Shape shape) {
  Segment s{std::move(name), std::move(shape), total_};
  total_ += s.size();
  segments_.push_back(std::move(s));
}

const ParamLayout::Segment& ParamLayout::find(std::string_view name) const {
  for (const Segment& s : segments_) {
    if (s.name == name) return s;
  }
  throw IndexError("param layout: no segment named '" + std::string(name) + "'");
}

std::span<double> ParamVector::segment(std::string_view name) {
  const auto& s = layout.find(name);
  return std::span<double>(values).subspan(s.offset, s.size());
}

std::span<const double> ParamVector::segment(std::string_view name) const {
  const auto& s = layout.find(name);
  return std::span<const double>(values).subspan(s.offset, s.size());
}

Tensor ParamVector::segment_tensor(std::string_view name) const {
  const auto& s = layout.find(name);
  const auto v = segment(name);
  return Tensor(s.shape, std::vector<double>(v.begin(), v.end()));
}

LinearCombination::LinearCombination(double a, const Objective& first, double b, const Objective& second)
    : a_(a), b_(b), first_(first), second_(second) {
  if (first.dimension() != second.dimension()) throw ShapeError("linear combination: dimension mismatch");
}

double LinearCombination::value(std::span<const double> p) const { return a_ * first_.value(p) + b_ * second_.value(p); }

double LinearCombination::value_and_gradient(std::span<const double> p, std::span<double> g) const {
  std::vector<double> g2(g.size());
  const double v1 = first_.value_and_gradient(p, g);
  const double v2 = second_.value_and_gradient(p, g2);
  simd::scale(a_, g);
  simd::axpy(b_, g2, g);
  return a_ * v1 + b_ * v2;
}

ParamVector grad(const Objective& loss, const ParamVector& p) {
  if (p.size() != loss.dimension()) throw ShapeError("grad: parameter length does not match the objective");
  ParamVector g{std::vector<double>(p.size()), p.layout};
  const double v = loss.value_and_gradient(p.values, g.values);
  if (!std::isfinite(v)) throw DomainError("grad: loss is not finite");
  require_finite(g.values, "grad");
  return g;
}

ParamVector finite_diff_grad(const Objective& loss, const ParamVector& p, double h) {
  if (!(h > 0.0)) throw DomainError("finite_diff_grad: step must be positive");
  ParamVector g{std::vector<double>(p.size()), p.layout};
  std::vector<double> probe = p.values;
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const double saved = probe[i];
    probe[i] = saved + h;
    const double up = loss.value(probe);
    probe[i] = saved - h;
    const double down = loss.value(probe);
    probe[i] = saved;
    g.values[i] = (up - down) / (2.0 * h);
  }
  return g;
}

double grad_check(const Objective& loss, const ParamVector& p, double h) {
  const ParamVector exact = grad(loss, p);
  const ParamVector approx = finite_diff_grad(loss, p, h);
  double worst = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double a = exact.values[i], b = approx.values[i];
    const double denom = std::max({std::abs(a), std::abs(b), 1e-8});
    worst = std::max(worst, std::abs(a - b) / denom);
  }
  return worst;
}

// Flattening --------------------------------------------------------------

namespace {

ParamLayout vapt_layout(const VaptParams& params) {
  ParamLayout layout;
  for (std::size_t l = 0; l < params.blocks.size(); ++l) {
    const BlockParams& b = params.blocks[l];
    const std::string prefix = "block" + std::to_string(l) + ".";
    layout.add(prefix + "conv_kernel", b.conv_kernel.shape());
    layout.add(prefix + "alphas", b.alphas.shape());
    layout.add(prefix + "ln_gain", b.ln_gain.shape());
    layout.add(prefix + "ln_bias", b.ln_bias.shape());
  }
  layout.add("projector.w1", params.projector.w1.shape());
  layout.add("projector.w2", params.projector.w2.shape());
  return layout;
}

void append(std::vector<double>& out, const Tensor& t) { out.insert(out.end(), t.data().begin(), t.data().end()); }

Tensor slice(std::span<const double> p, const ParamLayout::Segment& s) {
  const auto v = p.subspan(s.offset, s.size());
  return Tensor(s.shape, std::vector<double>(v.begin(), v.end()));
}

VaptParams unflatten_span(std::span<const double> p, const ParamLayout& layout, const VaptParams& like) {
  VaptParams out;
  out.shape = like.shape;
  out.layer_norm = like.layer_norm;
  out.projector.activation = like.projector.activation;
  const auto& segs = layout.segments();
  std::size_t k = 0;
  for (std::size_t l = 0; l < like.blocks.size(); ++l) {
    BlockParams b;
    b.conv_kernel = slice(p, segs[k++]);
    b.alphas = slice(p, segs[k++]);
    b.ln_gain = slice(p, segs[k++]);
    b.ln_bias = slice(p, segs[k++]);
    out.blocks.push_back(std::move(b));
  }
  out.projector.w1 = slice(p, segs[k++]);
  out.projector.w2 = slice(p, segs[k++]);
  return out;
}

}  // namespace

ParamVector flatten(const VaptParams& params) {
  ParamVector p;
  p.layout = vapt_layout(params);
  p.values.reserve(p.layout.total());
  for (const BlockParams& b : params.blocks) {
    append(p.values, b.conv_kernel);
    append(p.values, b.alphas);
    append(p.values, b.ln_gain);
    append(p.values, b.ln_bias);
  }
  append(p.values, params.projector.w1);
  append(p.values, params.projector.w2);
  return p;
}

VaptParams unflatten(const ParamVector& p, const VaptParams& like) {
  if (!(p.layout == vapt_layout(like)) || p.size() != p.layout.total()) {
    throw ShapeError("unflatten: parameter vector does not match the VAPT layout");
  }
  return unflatten_span(p.values, p.layout, like);
}

ParamVector flatten_prompts(const std::vector<Tensor>& prompts) {
  ParamVector p;
  for (std::size_t l = 0; l < prompts.size(); ++l) {
    p.layout.add("prompts" + std::to_string(l), prompts[l].shape());
    append(p.values, prompts[l]);
  }
  return p;
}

std::vector<Tensor> unflatten_prompts(const ParamVector& p) {
  if (p.size() != p.layout.total()) throw ShapeError("unflatten_prompts: size mismatch");
  std::vector<Tensor> out;
  for (const auto& s : p.layout.segments()) out.push_back(slice(p.values, s));
  return out;
}

// Adjoints ----------------------------------------------------------------

Tensor prompted_msa_prompt_adjoint(const AttentionTrace& trace, const Tensor& x, const Tensor& prompts,
                                   const AttentionWeights& w, const Tensor& output_adjoint) {
  const std::size_t n = x.rows(), np = prompts.rows(), dv = w.head_dim();
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dv));
  Tensor d_prompts({np, w.model_dim()});
  if (np == 0) return d_prompts;
  // d(concat) = d(out) * W_O^T
  const Tensor d_concat = matmul_bt(output_adjoint, w.output());
  for (std::size_t m = 0; m < w.heads(); ++m) {
    const AttentionTrace::Head& h = trace.heads[m];
    Tensor d_head({n, dv});
    for (std::size_t i = 0; i < n; ++i) {
      const auto src = d_concat.row(i).subspan(m * dv, dv);
      std::copy(src.begin(), src.end(), d_head.row(i).begin());
    }
    // Softmax adjoint per row, then scale.
    Tensor d_scores = matmul_bt(d_head, h.values);
    for (std::size_t i = 0; i < n; ++i) {
      auto ds = d_scores.row(i);
      const auto a = h.gates.row(i);
      const double centre = simd::dot(ds, a);
      for (std::size_t k = 0; k < ds.size(); ++k) ds[k] = a[k] * (ds[k] - centre) * inv_scale;
    }
    // Only prompt rows of the key/value adjoints are needed.
    for (std::size_t j = 0; j < np; ++j) {
      const std::size_t col = n + j;
      std::vector<double> d_key(dv, 0.0), d_value(dv, 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        simd::axpy(d_scores.at(i, col), h.queries.row(i), d_key);
        simd::axpy(h.gates.at(i, col), d_head.row(i), d_value);
      }
      auto dp = d_prompts.row(j);
      for (std::size_t c = 0; c < w.model_dim(); ++c) {
        dp[c] += simd::dot(w.key(m).row(c), d_key) + simd::dot(w.value(m).row(c), d_value);
      }
    }
  }
  return d_prompts;
}

namespace {

/// Residual r = out - Y, returns 1/2 ||r||^2 and leaves r in `out`.
double residual_half_sq(Tensor& out, const Tensor& target) {
  if (out.shape() != target.shape()) throw ShapeError("attention loss: target shape mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] -= target[i];
    acc += out[i] * out[i];
  }
  return 0.5 * acc;
}

void check_samples(const std::vector<AttentionWeights>& weights, const std::vector<AttentionSample>& samples) {
  for (const AttentionSample& s : samples) {
    if (s.block >= weights.size()) throw IndexError("attention loss: sample block has no attention weights");
  }
}

}  // namespace

VptPromptLoss::VptPromptLoss(std::vector<AttentionWeights> weights, std::vector<AttentionSample> samples,
                             ParamLayout layout)
    : weights_(std::move(weights)), samples_(std::move(samples)), layout_(std::move(layout)) {
  check_samples(weights_, samples_);
  if (layout_.segments().size() != weights_.size()) throw ShapeError("vpt loss: one prompt block per attention block");
}

double VptPromptLoss::value(std::span<const double> p) const {
  double total = 0.0;
  for (const AttentionSample& s : samples_) {
    const Tensor prompts = slice(p, layout_.segments()[s.block]);
    Tensor out = prompted_msa_forward(s.x, prompts, weights_[s.block]);
    total += residual_half_sq(out, s.target);
  }
  return total;
}

double VptPromptLoss::value_and_gradient(std::span<const double> p, std::span<double> g) const {
  std::fill(g.begin(), g.end(), 0.0);
  double total = 0.0;
  for (const AttentionSample& s : samples_) {
    const auto& seg = layout_.segments()[s.block];
    const Tensor prompts = slice(p, seg);
    AttentionTrace trace = trace_prompted_msa(s.x, prompts, weights_[s.block]);
    total += residual_half_sq(trace.result, s.target);
    const Tensor dp = prompted_msa_prompt_adjoint(trace, s.x, prompts, weights_[s.block], trace.result);
    simd::axpy(1.0, dp.values(), g.subspan(seg.offset, seg.size()));
  }
  return total;
}

VaptLoss::VaptLoss(VaptParams like, std::vector<AttentionWeights> weights, std::vector<AttentionSample> samples)
    : like_(std::move(like)), layout_(vapt_layout(like_)), weights_(std::move(weights)), samples_(std::move(samples)) {
  like_.validate();
  check_samples(weights_, samples_);
}

double VaptLoss::value(std::span<const double> p) const {
  const VaptParams params = unflatten_span(p, layout_, like_);
  double total = 0.0;
  for (const AttentionSample& s : samples_) {
    Tensor out = vapt_forward(s.x, params, weights_[s.block], s.block);
    total += residual_half_sq(out, s.target);
  }
  return total;
}

double VaptLoss::value_and_gradient(std::span<const double> p, std::span<double> g) const {
  const VaptParams params = unflatten_span(p, layout_, like_);
  std::fill(g.begin(), g.end(), 0.0);
  const PromptShapeConfig& shape = params.shape;
  const std::size_t d = shape.dim, r = shape.rank, k = shape.kernel, wo = shape.conv_width(), ho = shape.conv_height();
  const auto& segs = layout_.segments();
  const std::size_t w1_at = segs[4 * params.blocks.size()].offset;
  const std::size_t w2_at = segs[4 * params.blocks.size() + 1].offset;
  auto g_w1 = g.subspan(w1_at, r * d);
  auto g_w2 = g.subspan(w2_at, d * r);
  const FeatureProjector& proj = params.projector;

  double total = 0.0;
  for (const AttentionSample& s : samples_) {
    const std::size_t l = s.block;
    const BlockParams& b = params.blocks[l];
    auto g_kernel = g.subspan(segs[4 * l].offset, k * k);
    auto g_alpha = g.subspan(segs[4 * l + 1].offset, b.alphas.size());
    auto g_gain = g.subspan(segs[4 * l + 2].offset, d);
    auto g_bias = g.subspan(segs[4 * l + 3].offset, d);

    const PromptTrace pt = trace_adaptive_prompts(s.x, params, l);
    AttentionTrace at = trace_prompted_msa(s.x, pt.prompts, weights_[l]);
    total += residual_half_sq(at.result, s.target);
    const Tensor d_prompts = prompted_msa_prompt_adjoint(at, s.x, pt.prompts, weights_[l], at.result);

    // Feature projector and token-wise projection.
    Tensor d_conv({shape.conv_tokens(), d});
    std::vector<double> d_act(r), d_agg(d);
    for (std::size_t j = 0; j < shape.prompts; ++j) {
      const auto dp = d_prompts.row(j);
      for (std::size_t c = 0; c < d; ++c) simd::axpy(dp[c], pt.activated.row(j), g_w2.subspan(c * r, r));
      std::fill(d_act.begin(), d_act.end(), 0.0);
      for (std::size_t c = 0; c < d; ++c) simd::axpy(dp[c], proj.w2.row(c), d_act);
      std::fill(d_agg.begin(), d_agg.end(), 0.0);
      for (std::size_t q = 0; q < r; ++q) {
        const double d_hidden = d_act[q] * activation_derivative(proj.activation, pt.hidden.at(j, q));
        simd::axpy(d_hidden, pt.aggregated.row(j), g_w1.subspan(q * d, d));
        simd::axpy(d_hidden, proj.w1.row(q), d_agg);
      }
      for (std::size_t t = 0; t < shape.conv_tokens(); ++t) {
        g_alpha[j * shape.conv_tokens() + t] += simd::dot(d_agg, pt.conv.row(t));
        simd::axpy(b.alphas.at(j, t), d_agg, d_conv.row(t));
      }
    }

    // Shared-kernel convolution.
    Tensor d_normed({shape.tokens(), d});
    for (std::size_t i = 0; i < ho; ++i) {
      for (std::size_t jj = 0; jj < wo; ++jj) {
        const auto dc = d_conv.row(i * wo + jj);
        for (std::size_t a = 0; a < k; ++a) {
          for (std::size_t bb = 0; bb < k; ++bb) {
            const std::size_t token = (i + a) * shape.width + (jj + bb);
            g_kernel[a * k + bb] += simd::dot(dc, pt.normalized.row(token));
            simd::axpy(b.conv_kernel.at(a, bb), dc, d_normed.row(token));
          }
        }
      }
    }

    // LayerNorm affine terms (X itself is not trainable).
    if (params.layer_norm) {
      for (std::size_t t = 0; t < shape.tokens(); ++t) {
        simd::mul_add(d_normed.row(t), pt.xhat.row(t), g_gain);
        simd::axpy(1.0, d_normed.row(t), g_bias);
      }
    }
  }
  return total;
}

}  // namespace vapt
