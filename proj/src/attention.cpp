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

#include "vapt/attention.hpp"

#include <cmath>
#include <string>

#include "vapt/ops.hpp"
#include "vapt/simd.hpp"

namespace vapt {
namespace {

void check_inputs(const Tensor& x, const Tensor& prompts, const AttentionWeights& w) {
  if (x.rank() != 2 || x.cols() != w.model_dim()) {
    throw ShapeError("attention: X must be N x " + std::to_string(w.model_dim()) + ", got " + shape_string(x.shape()));
  }
  if (x.rows() == 0) throw ShapeError("attention: X has no tokens");
  if (prompts.rank() != 2 || prompts.cols() != w.model_dim()) {
    throw ShapeError("attention: P must be Np x " + std::to_string(w.model_dim()) + ", got " +
                     shape_string(prompts.shape()));
  }
  require_finite(x, "attention input");
  require_finite(prompts, "attention prompts");
}

}  // namespace

AttentionWeights::AttentionWeights(std::vector<Tensor> query, std::vector<Tensor> key, std::vector<Tensor> value,
                                   Tensor output)
    : query_(std::move(query)), key_(std::move(key)), value_(std::move(value)), output_(std::move(output)) {
  const std::size_t m = query_.size();
  if (m == 0 || key_.size() != m || value_.size() != m) throw ShapeError("attention weights: inconsistent head count");
  model_dim_ = query_[0].rows();
  if (model_dim_ % m != 0) throw ShapeError("attention weights: d is not divisible by the head count");
  const Shape head_shape{model_dim_, model_dim_ / m};
  for (std::size_t h = 0; h < m; ++h) {
    if (query_[h].shape() != head_shape || key_[h].shape() != head_shape || value_[h].shape() != head_shape) {
      throw ShapeError("attention weights: head " + std::to_string(h) + " projections must be " +
                       shape_string(head_shape));
    }
  }
  if (output_.shape() != Shape{model_dim_, model_dim_}) throw ShapeError("attention weights: W_O must be d x d");
}

AttentionWeights AttentionWeights::random(std::size_t model_dim, std::size_t heads, Rng& rng) {
  if (heads == 0 || model_dim % heads != 0) throw ShapeError("attention weights: d is not divisible by the head count");
  const double bound = 1.0 / std::sqrt(static_cast<double>(model_dim));
  const Shape head_shape{model_dim, model_dim / heads};
  std::vector<Tensor> q, k, v;
  for (std::size_t h = 0; h < heads; ++h) {
    q.push_back(random_uniform(head_shape, -bound, bound, rng));
    k.push_back(random_uniform(head_shape, -bound, bound, rng));
    v.push_back(random_uniform(head_shape, -bound, bound, rng));
  }
  Tensor o = random_uniform({model_dim, model_dim}, -bound, bound, rng);
  return AttentionWeights(std::move(q), std::move(k), std::move(v), std::move(o));
}

AttentionTrace trace_prompted_msa(const Tensor& x, const Tensor& prompts, const AttentionWeights& w) {
  check_inputs(x, prompts, w);
  const Tensor stacked = vstack(x, prompts);
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(w.head_dim()));
  AttentionTrace trace;
  trace.heads.reserve(w.heads());
  std::vector<Tensor> outputs;
  for (std::size_t m = 0; m < w.heads(); ++m) {
    AttentionTrace::Head h;
    h.queries = matmul(x, w.query(m));
    h.keys = matmul(stacked, w.key(m));
    h.values = matmul(stacked, w.value(m));
    Tensor scores = matmul_bt(h.queries, h.keys);
    simd::scale(inv_scale, scores.values());
    h.gates = softmax_rows(scores);
    h.output = matmul(h.gates, h.values);
    outputs.push_back(h.output);
    trace.heads.push_back(std::move(h));
  }
  trace.result = project_heads(outputs, w);
  require_finite(trace.result, "prompted_msa_forward");
  return trace;
}

std::vector<Tensor> prompted_head_outputs(const Tensor& x, const Tensor& prompts, const AttentionWeights& w) {
  AttentionTrace trace = trace_prompted_msa(x, prompts, w);
  std::vector<Tensor> out;
  out.reserve(trace.heads.size());
  for (auto& h : trace.heads) out.push_back(std::move(h.output));
  return out;
}

Tensor project_heads(const std::vector<Tensor>& heads, const AttentionWeights& w) {
  if (heads.size() != w.heads()) throw ShapeError("project_heads: head count mismatch");
  const std::size_t n = heads.at(0).rows(), dv = w.head_dim();
  Tensor concat({n, w.model_dim()});
  for (std::size_t m = 0; m < heads.size(); ++m) {
    if (heads[m].shape() != Shape{n, dv}) throw ShapeError("project_heads: head output shape mismatch");
    for (std::size_t i = 0; i < n; ++i) {
      const auto src = heads[m].row(i);
      std::copy(src.begin(), src.end(), concat.row(i).begin() + static_cast<std::ptrdiff_t>(m * dv));
    }
  }
  return matmul(concat, w.output());
}

Tensor msa_forward(const Tensor& x, const AttentionWeights& w) {
  return prompted_msa_forward(x, no_prompts(w.model_dim()), w);
}

Tensor prompted_msa_forward(const Tensor& x, const Tensor& prompts, const AttentionWeights& w) {
  return trace_prompted_msa(x, prompts, w).result;
}

MoEDecomposition moe_decompose(const Tensor& x, const Tensor& prompts, const AttentionWeights& w, std::size_t head,
                               std::size_t row) {
  check_inputs(x, prompts, w);
  if (head >= w.heads()) throw IndexError("moe_decompose: head index out of range");
  if (row >= x.rows()) throw IndexError("moe_decompose: row index out of range");
  const std::size_t n = x.rows(), np = prompts.rows(), dv = w.head_dim();
  const Tensor& wq = w.query(head);
  const Tensor& wk = w.key(head);
  const Tensor& wv = w.value(head);

  MoEDecomposition dec;
  dec.head = head;
  dec.row = row;
  dec.pretrained = n;
  dec.expert_values = Tensor({n + np, dv});
  dec.scores.resize(n + np);

  // q_i = W_Q^T x_i; score_ij = q_i . (W_K^T t_j) / sqrt(d_v), t_j in [X; P].
  const std::vector<double> query = matvec_t(wq, x.row(row));
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dv));
  for (std::size_t j = 0; j < n + np; ++j) {
    const auto token = j < n ? x.row(j) : prompts.row(j - n);
    const std::vector<double> key = matvec_t(wk, token);
    dec.scores[j] = simd::dot(query, key) * inv_scale;
    const std::vector<double> value = matvec_t(wv, token);
    std::copy(value.begin(), value.end(), dec.expert_values.row(j).begin());
  }
  return dec;
}

std::vector<double> moe_gates(const MoEDecomposition& dec) {
  std::vector<double> g = dec.scores;
  softmax_inplace(g);
  return g;
}

Tensor moe_eval(const MoEDecomposition& dec) {
  const std::vector<double> g = moe_gates(dec);
  Tensor out({dec.expert_values.cols()});
  for (std::size_t k = 0; k < g.size(); ++k) simd::axpy(g[k], dec.expert_values.row(k), out.values());
  return out;
}

}  // namespace vapt
