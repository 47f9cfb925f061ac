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

#include "vapt/ops.hpp"

#include <cmath>
#include <string>

#include "vapt/simd.hpp"

namespace vapt {

void softmax_inplace(std::span<double> v) {
  if (v.empty()) return;
  require_finite(v, "softmax");
  const double shift = simd::max(v);
  for (double& x : v) x = std::exp(x - shift);
  simd::scale(1.0 / simd::sum(v), v);
}

Tensor softmax_rows(const Tensor& m) {
  Tensor out = m;
  const std::size_t r = out.rows();
  for (std::size_t i = 0; i < r; ++i) softmax_inplace(out.row(i));
  return out;
}

Tensor channelwise_conv2d(const Tensor& x, const Tensor& kernel) {
  if (x.rank() != 3) throw ShapeError("channelwise_conv2d: input must be H x W x d, got " + shape_string(x.shape()));
  if (kernel.rank() != 2 || kernel.dim(0) != kernel.dim(1)) {
    throw ShapeError("channelwise_conv2d: kernel must be K x K, got " + shape_string(kernel.shape()));
  }
  const std::size_t h = x.dim(0), w = x.dim(1), d = x.dim(2), k = kernel.dim(0);
  if (k == 0 || k > h || k > w) {
    throw ShapeError("channelwise_conv2d: kernel size " + std::to_string(k) + " does not fit " + shape_string(x.shape()));
  }
  const std::size_t ho = h - k + 1, wo = w - k + 1;
  Tensor out({ho, wo, d});
  const auto in = x.values();
  auto dst = out.values();
  for (std::size_t i = 0; i < ho; ++i) {
    for (std::size_t j = 0; j < wo; ++j) {
      auto o = dst.subspan((i * wo + j) * d, d);
      for (std::size_t a = 0; a < k; ++a) {
        for (std::size_t b = 0; b < k; ++b) {
          simd::axpy(kernel.at(a, b), in.subspan(((i + a) * w + (j + b)) * d, d), o);
        }
      }
    }
  }
  require_finite(out, "channelwise_conv2d");
  return out;
}

NormalizedRow normalize_row(std::span<const double> v, double eps) {
  const double n = static_cast<double>(v.size());
  const double mean = simd::sum(v) / n;
  NormalizedRow r;
  r.xhat.assign(v.begin(), v.end());
  for (double& x : r.xhat) x -= mean;
  const double var = simd::dot(r.xhat, r.xhat) / n;
  r.inv_std = 1.0 / std::sqrt(var + eps);
  simd::scale(r.inv_std, r.xhat);
  return r;
}

Tensor layer_norm(const Tensor& v, const Tensor& gain, const Tensor& bias, double eps) {
  if (v.rank() != 1 || v.size() == 0) throw ShapeError("layer_norm: expected a non-empty vector");
  if (gain.shape() != v.shape() || bias.shape() != v.shape()) throw ShapeError("layer_norm: gain/bias shape mismatch");
  if (!(eps > 0.0)) throw DomainError("layer_norm: eps must be positive");
  require_finite(v, "layer_norm");
  const NormalizedRow r = normalize_row(v.values(), eps);
  Tensor out({v.size()});
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = gain[i] * r.xhat[i] + bias[i];
  require_finite(out, "layer_norm");
  return out;
}

Tensor layer_norm_rows(const Tensor& m, const Tensor& gain, const Tensor& bias, double eps) {
  const std::size_t rows = m.rows(), d = m.cols();
  if (gain.size() != d || bias.size() != d) throw ShapeError("layer_norm_rows: gain/bias shape mismatch");
  if (!(eps > 0.0)) throw DomainError("layer_norm: eps must be positive");
  require_finite(m, "layer_norm_rows");
  Tensor out({rows, d});
  for (std::size_t i = 0; i < rows; ++i) {
    const NormalizedRow r = normalize_row(m.row(i), eps);
    auto o = out.row(i);
    for (std::size_t c = 0; c < d; ++c) o[c] = gain[c] * r.xhat[c] + bias[c];
  }
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  if (b.rows() != k) throw ShapeError("matmul: " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  Tensor out({n, m});
  for (std::size_t i = 0; i < n; ++i) {
    auto o = out.row(i);
    for (std::size_t p = 0; p < k; ++p) simd::axpy(a.at(i, p), b.row(p), o);
  }
  return out;
}

Tensor matmul_bt(const Tensor& a, const Tensor& b) {
  const std::size_t n = a.rows(), m = b.rows();
  if (a.cols() != b.cols()) throw ShapeError("matmul_bt: " + shape_string(a.shape()) + " x " + shape_string(b.shape()) + "^T");
  Tensor out({n, m});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) out.at(i, j) = simd::dot(a.row(i), b.row(j));
  }
  return out;
}

Tensor matmul_at(const Tensor& a, const Tensor& b) {
  const std::size_t k = a.rows(), n = a.cols(), m = b.cols();
  if (b.rows() != k) throw ShapeError("matmul_at: " + shape_string(a.shape()) + "^T x " + shape_string(b.shape()));
  Tensor out({n, m});
  for (std::size_t p = 0; p < k; ++p) {
    for (std::size_t i = 0; i < n; ++i) simd::axpy(a.at(p, i), b.row(p), out.row(i));
  }
  return out;
}

Tensor transpose(const Tensor& m) {
  const std::size_t r = m.rows(), c = m.cols();
  Tensor out({c, r});
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out.at(j, i) = m.at(i, j);
  }
  return out;
}

Tensor vstack(const Tensor& top, const Tensor& bottom) {
  if (bottom.rows() == 0) return top;
  if (top.cols() != bottom.cols()) throw ShapeError("vstack: column mismatch");
  std::vector<double> data(top.data());
  data.insert(data.end(), bottom.data().begin(), bottom.data().end());
  return Tensor({top.rows() + bottom.rows(), top.cols()}, std::move(data));
}

std::vector<double> matvec(const Tensor& m, std::span<const double> v) {
  if (m.cols() != v.size()) throw ShapeError("matvec: length mismatch");
  std::vector<double> out(m.rows());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = simd::dot(m.row(i), v);
  return out;
}

std::vector<double> matvec_t(const Tensor& m, std::span<const double> v) {
  if (m.rows() != v.size()) throw ShapeError("matvec_t: length mismatch");
  std::vector<double> out(m.cols(), 0.0);
  for (std::size_t i = 0; i < v.size(); ++i) simd::axpy(v[i], m.row(i), out);
  return out;
}

double frobenius_norm(std::span<const double> v) { return std::sqrt(simd::dot(v, v)); }

Tensor random_uniform(Shape shape, double lo, double hi, Rng& rng) {
  Tensor t(std::move(shape));
  rng.fill_uniform(t.values(), lo, hi);
  return t;
}

Tensor random_normal(Shape shape, double mean, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  rng.fill_normal(t.values(), mean, stddev);
  return t;
}

}  // namespace vapt
