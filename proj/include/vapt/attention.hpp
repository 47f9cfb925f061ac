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
#include <vector>

#include "vapt/rng.hpp"
#include "vapt/tensor.hpp"

namespace vapt {

/// Frozen multi-head projections. Head m uses query/key/value matrices of
/// shape d x (d / M); the output map is (M * d/M) x d. No biases.
class AttentionWeights {
 public:
  AttentionWeights(std::vector<Tensor> query, std::vector<Tensor> key, std::vector<Tensor> value, Tensor output);

  /// Entries uniform on [-1/sqrt(d), 1/sqrt(d)).
  static AttentionWeights random(std::size_t model_dim, std::size_t heads, Rng& rng);

  std::size_t heads() const noexcept { return query_.size(); }
  std::size_t model_dim() const noexcept { return model_dim_; }
  std::size_t head_dim() const noexcept { return model_dim_ / query_.size(); }

  const Tensor& query(std::size_t m) const { return query_.at(m); }
  const Tensor& key(std::size_t m) const { return key_.at(m); }
  const Tensor& value(std::size_t m) const { return value_.at(m); }
  const Tensor& output() const noexcept { return output_; }

 private:
  std::size_t model_dim_ = 0;
  std::vector<Tensor> query_, key_, value_;
  Tensor output_;
};

/// Empty N_p = 0 prompt block for a model dimension.
inline Tensor no_prompts(std::size_t model_dim) { return Tensor({0, model_dim}); }

/// Per-head attention outputs (before the output map) for the N input rows
/// when keys and values come from the stacked [X; P]. Prompt-position query
/// rows are never formed.
std::vector<Tensor> prompted_head_outputs(const Tensor& x, const Tensor& prompts, const AttentionWeights& w);

/// Concat(h_1..h_M) * W_O.
Tensor project_heads(const std::vector<Tensor>& heads, const AttentionWeights& w);

Tensor msa_forward(const Tensor& x, const AttentionWeights& w);
Tensor prompted_msa_forward(const Tensor& x, const Tensor& prompts, const AttentionWeights& w);

/// Intermediates of one prompted forward pass, kept for the adjoint.
struct AttentionTrace {
  struct Head {
    Tensor queries;  // N x dk
    Tensor keys;     // (N + Np) x dk
    Tensor values;   // (N + Np) x dv
    Tensor gates;    // N x (N + Np), softmax rows
    Tensor output;   // N x dv
  };
  std::vector<Head> heads;
  Tensor result;  // N x d
};
AttentionTrace trace_prompted_msa(const Tensor& x, const Tensor& prompts, const AttentionWeights& w);

/// One attention-output row of one head viewed as a mixture of experts:
/// N pre-trained experts W_V^T x_j followed by N_p prompt experts W_V^T p_j,
/// with scores x_i^T W_Q W_K^T (x_j | p_j) / sqrt(d_v).
struct MoEDecomposition {
  std::size_t head = 0;
  std::size_t row = 0;
  std::size_t pretrained = 0;  // N; experts [N, N + Np) are prompt experts
  Tensor expert_values;        // (N + Np) x dv
  std::vector<double> scores;  // N + Np

  std::size_t experts() const noexcept { return scores.size(); }
};

/// Indices are zero-based. Throws IndexError for head >= M or row >= N.
MoEDecomposition moe_decompose(const Tensor& x, const Tensor& prompts, const AttentionWeights& w, std::size_t head,
                               std::size_t row);

/// softmax(scores)
std::vector<double> moe_gates(const MoEDecomposition& dec);

/// sum_k softmax(scores)_k * expert_values[k]
Tensor moe_eval(const MoEDecomposition& dec);

}  // namespace vapt
