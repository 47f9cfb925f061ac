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

#include <span>

#include "vapt/rng.hpp"
#include "vapt/tensor.hpp"

namespace vapt {

inline constexpr double kLayerNormEps = 1e-5;

/// Row-wise softmax of a matrix. Rows are shifted by their maximum before
/// exponentiation. Throws DomainError on non-finite input.
Tensor softmax_rows(const Tensor& m);

/// In-place softmax of one vector, returns nothing; same shift rule.
void softmax_inplace(std::span<double> v);

/// Stride-1, unpadded 2D convolution of an H x W x d feature map with one
/// K x K kernel shared by every channel:
///   out[i, j, c] = sum_{a,b} kernel[a, b] * x[i + a, j + b, c].
Tensor channelwise_conv2d(const Tensor& x, const Tensor& kernel);

/// gain * (v - mean) / sqrt(var + eps) + bias, with population variance.
Tensor layer_norm(const Tensor& v, const Tensor& gain, const Tensor& bias, double eps = kLayerNormEps);

/// Normalized values and 1/sqrt(var + eps) for one vector, before the affine
/// step. Used by the backward pass.
struct NormalizedRow {
  std::vector<double> xhat;
  double inv_std = 0.0;
};
NormalizedRow normalize_row(std::span<const double> v, double eps = kLayerNormEps);

/// Row-wise layer_norm over the last axis of a matrix.
Tensor layer_norm_rows(const Tensor& m, const Tensor& gain, const Tensor& bias, double eps = kLayerNormEps);

Tensor matmul(const Tensor& a, const Tensor& b);
/// a * b^T
Tensor matmul_bt(const Tensor& a, const Tensor& b);
/// a^T * b
Tensor matmul_at(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& m);
/// Vertical concatenation of two matrices with equal column counts.
Tensor vstack(const Tensor& top, const Tensor& bottom);

/// Matrix times vector.
std::vector<double> matvec(const Tensor& m, std::span<const double> v);
/// Transposed matrix times vector.
std::vector<double> matvec_t(const Tensor& m, std::span<const double> v);

double frobenius_norm(std::span<const double> v);

/// I.i.d. uniform entries on [lo, hi).
Tensor random_uniform(Shape shape, double lo, double hi, Rng& rng);
Tensor random_normal(Shape shape, double mean, double stddev, Rng& rng);

}  // namespace vapt
