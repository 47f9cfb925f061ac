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

// Straight-line reference implementations used only by tests. They avoid the
// library's kernels and helpers on purpose so that agreement means two
// independent routes computed the same quantity.

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "vapt/attention.hpp"
#include "vapt/estimation.hpp"
#include "vapt/tensor.hpp"

namespace oracle {

using vapt::Tensor;

/// Prompted multi-head attention for the first N rows, per head, before W_O.
inline std::vector<Tensor> naive_head_outputs(const Tensor& x, const Tensor& p, const vapt::AttentionWeights& w) {
  const std::size_t n = x.rows(), np = p.rows(), d = x.cols(), dv = w.head_dim();
  auto token = [&](std::size_t j, std::size_t c) { return j < n ? x.at(j, c) : p.at(j - n, c); };
  std::vector<Tensor> heads;
  for (std::size_t m = 0; m < w.heads(); ++m) {
    const Tensor& wq = w.query(m);
    const Tensor& wk = w.key(m);
    const Tensor& wv = w.value(m);
    Tensor out({n, dv});
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> scores(n + np);
      for (std::size_t j = 0; j < n + np; ++j) {
        double s = 0.0;
        for (std::size_t a = 0; a < dv; ++a) {
          double qa = 0.0, ka = 0.0;
          for (std::size_t c = 0; c < d; ++c) {
            qa += x.at(i, c) * wq.at(c, a);
            ka += token(j, c) * wk.at(c, a);
          }
          s += qa * ka;
        }
        scores[j] = s / std::sqrt(static_cast<double>(dv));
      }
      const double mx = *std::max_element(scores.begin(), scores.end());
      double z = 0.0;
      for (double& s : scores) z += (s = std::exp(s - mx));
      for (std::size_t j = 0; j < n + np; ++j) {
        for (std::size_t a = 0; a < dv; ++a) {
          double va = 0.0;
          for (std::size_t c = 0; c < d; ++c) va += token(j, c) * wv.at(c, a);
          out.at(i, a) += scores[j] / z * va;
        }
      }
    }
    heads.push_back(out);
  }
  return heads;
}

inline Tensor naive_project(const std::vector<Tensor>& heads, const vapt::AttentionWeights& w) {
  const std::size_t n = heads[0].rows(), dv = w.head_dim(), d = w.model_dim();
  Tensor out({n, d});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < d; ++c) {
      double acc = 0.0;
      for (std::size_t m = 0; m < heads.size(); ++m)
        for (std::size_t a = 0; a < dv; ++a) acc += heads[m].at(i, a) * w.output().at(m * dv + a, c);
      out.at(i, c) = acc;
    }
  return out;
}

inline Tensor naive_prompted_msa(const Tensor& x, const Tensor& p, const vapt::AttentionWeights& w) {
  return naive_project(naive_head_outputs(x, p, w), w);
}

}  // namespace oracle

#include "vapt/prompts.hpp"

namespace oracle {

/// Adaptive prompts by direct index arithmetic on the N x d token matrix.
inline Tensor naive_adaptive_prompts(const Tensor& x, const vapt::VaptParams& params, std::size_t block) {
  const auto& s = params.shape;
  const auto& b = params.blocks[block];
  const std::size_t d = s.dim, hw = s.width, ho = s.conv_height(), wo = s.conv_width(), k = s.kernel;
  Tensor normed = x;
  if (params.layer_norm) {
    for (std::size_t t = 0; t < x.rows(); ++t) {
      double mean = 0.0, var = 0.0;
      for (std::size_t c = 0; c < d; ++c) mean += x.at(t, c);
      mean /= double(d);
      for (std::size_t c = 0; c < d; ++c) var += (x.at(t, c) - mean) * (x.at(t, c) - mean);
      var /= double(d);
      for (std::size_t c = 0; c < d; ++c)
        normed.at(t, c) = b.ln_gain[c] * (x.at(t, c) - mean) / std::sqrt(var + 1e-5) + b.ln_bias[c];
    }
  }
  Tensor prompts({s.prompts, d});
  for (std::size_t j = 0; j < s.prompts; ++j) {
    std::vector<double> agg(d, 0.0);
    for (std::size_t i = 0; i < ho; ++i)
      for (std::size_t jj = 0; jj < wo; ++jj) {
        const double alpha = b.alphas.at(j, i * wo + jj);
        for (std::size_t c = 0; c < d; ++c) {
          double conv = 0.0;
          for (std::size_t a = 0; a < k; ++a)
            for (std::size_t bb = 0; bb < k; ++bb) conv += b.conv_kernel.at(a, bb) * normed.at((i + a) * hw + jj + bb, c);
          agg[c] += alpha * conv;
        }
      }
    std::vector<double> act(s.rank);
    for (std::size_t q = 0; q < s.rank; ++q) {
      double h = 0.0;
      for (std::size_t c = 0; c < d; ++c) h += params.projector.w1.at(q, c) * agg[c];
      act[q] = vapt::activate(params.projector.activation, h);
    }
    for (std::size_t c = 0; c < d; ++c) {
      double v = 0.0;
      for (std::size_t q = 0; q < s.rank; ++q) v += params.projector.w2.at(c, q) * act[q];
      prompts.at(j, c) = v;
    }
  }
  return prompts;
}

// Brute-force nearest true atom over the concatenated (W1, W2) vector.
std::vector<std::size_t> brute_assign(const vapt::MixingMeasure& g, const vapt::MixingMeasure& s) {
  std::vector<std::size_t> owner;
  for (std::size_t i = 0; i < g.size(); ++i) {
    std::vector<double> dist;
    for (std::size_t j = 0; j < s.size(); ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < g.atoms[i].w1.size(); ++k) {
        acc += std::pow(g.atoms[i].w1[k] - s.atoms[j].w1[k], 2);
      }
      for (std::size_t k = 0; k < g.w2.size(); ++k) acc += std::pow(g.w2[k] - s.w2[k], 2);
      dist.push_back(acc);
    }
    owner.push_back(std::min_element(dist.begin(), dist.end()) - dist.begin());
  }
  return owner;
}

// Straight-line D1/D2 from atom lists; `products` switches to W2 W1 matrices.
double straight_line_loss(const vapt::MixingMeasure& g, const vapt::MixingMeasure& s, bool products) {
  auto atom_vec = [&](const vapt::MixingMeasure& m, std::size_t i) {
    std::vector<double> v;
    if (products) {
      const std::size_t d = m.w2.rows(), r = m.w2.cols();
      for (std::size_t a = 0; a < d; ++a) {
        for (std::size_t c = 0; c < d; ++c) {
          double acc = 0.0;
          for (std::size_t q = 0; q < r; ++q) acc += m.w2.at(a, q) * m.atoms[i].w1.at(q, c);
          v.push_back(acc);
        }
      }
    } else {
      v.assign(m.atoms[i].w1.data().begin(), m.atoms[i].w1.data().end());
    }
    return v;
  };
  auto dist2 = [](const std::vector<double>& a, const std::vector<double>& b) {
    double acc = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) acc += (a[k] - b[k]) * (a[k] - b[k]);
    return acc;
  };
  double w2sq = 0.0;
  for (std::size_t k = 0; k < g.w2.size(); ++k) w2sq += std::pow(g.w2[k] - s.w2[k], 2);
  if (products) w2sq = 0.0;
  std::vector<std::size_t> owner(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < s.size(); ++j) {
      const double dd = dist2(atom_vec(g, i), atom_vec(s, j)) + w2sq;
      if (dd < best) {
        best = dd;
        owner[i] = j;
      }
    }
  }
  double total = 0.0;
  for (std::size_t j = 0; j < s.size(); ++j) {
    double mass = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (owner[i] == j) {
        mass += std::exp(g.atoms[i].b);
        ++count;
      }
    }
    total += std::abs(mass - std::exp(s.atoms[j].b));
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (owner[i] != j) continue;
      const double p = dist2(atom_vec(g, i), atom_vec(s, j));
      double term;
      if (products) {
        term = count == 1 ? std::sqrt(p) : p;
      } else {
        term = count == 1 ? std::sqrt(p) + std::sqrt(w2sq) : p + w2sq;
      }
      total += std::exp(g.atoms[i].b) * term;
    }
  }
  return total;
}

}  // namespace oracle
