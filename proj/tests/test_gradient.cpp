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

#include <cmath>

#include "doctest.h"
#include "vapt/gradient.hpp"
#include "vapt/ops.hpp"
#include "vapt/rng.hpp"

using namespace vapt;

namespace {

ParamVector single(double v) {
  ParamVector p;
  p.layout.add("x", {1});
  p.values = {v};
  return p;
}

LambdaObjective power(int k) {
  return LambdaObjective(
      1, [k](std::span<const double> p) { return std::pow(p[0], k); },
      [k](std::span<const double> p, std::span<double> g) {
        g[0] = k * std::pow(p[0], k - 1);
        return std::pow(p[0], k);
      });
}

PromptShapeConfig tiny_shape() {
  PromptShapeConfig s;
  s.blocks = 2;
  s.prompts = 2;
  s.height = 3;
  s.width = 3;
  s.kernel = 2;
  s.rank = 2;
  s.dim = 4;
  return s;
}

VaptParams random_params(Activation act, std::uint64_t seed) {
  Rng rng(seed, 1);
  VaptParams p = VaptParams::initialize(tiny_shape(), act, rng);
  ParamVector flat = flatten(p);
  rng.fill_normal(flat.values, 0.0, 0.5);
  return unflatten(flat, p);
}

// Targets sit near the model output so the loss stays O(1e-3); this keeps
// central-difference roundoff well below the gradient entries.
template <typename Model>
std::vector<AttentionSample> nearby_samples(const PromptShapeConfig& s, Rng& rng, Model model) {
  std::vector<AttentionSample> out;
  for (std::size_t l = 0; l < s.blocks; ++l) {
    Tensor x = random_normal({s.tokens(), s.dim}, 0.0, 1.0, rng);
    Tensor y = model(x, l);
    for (double& v : y.values()) v += 0.01 * rng.normal();
    out.push_back({l, std::move(x), std::move(y)});
  }
  return out;
}

std::vector<AttentionSample> vapt_samples(const VaptParams& params, const std::vector<AttentionWeights>& w, Rng& rng) {
  return nearby_samples(params.shape, rng,
                        [&](const Tensor& x, std::size_t l) { return vapt_forward(x, params, w[l], l); });
}

std::vector<AttentionWeights> random_weights(const PromptShapeConfig& s, Rng& rng) {
  std::vector<AttentionWeights> out;
  for (std::size_t l = 0; l < s.blocks; ++l) out.push_back(AttentionWeights::random(s.dim, 2, rng));
  return out;
}

}  // namespace

TEST_CASE("grad of simple objectives") {
  LambdaObjective half_sq(
      3,
      [](std::span<const double> p) { return 0.5 * (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]); },
      [](std::span<const double> p, std::span<double> g) {
        for (std::size_t i = 0; i < 3; ++i) g[i] = p[i];
        return 0.5 * (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]);
      });
  ParamVector p;
  p.layout.add("p", {3});
  p.values = {1.5, -2.0, 0.25};
  CHECK(grad(half_sq, p).values == p.values);

  LambdaObjective constant(
      1, [](std::span<const double>) { return 4.0; },
      [](std::span<const double>, std::span<double> g) {
        g[0] = 0.0;
        return 4.0;
      });
  CHECK(grad(constant, single(2.0)).values[0] == 0.0);

  CHECK(std::abs(grad(power(2), single(3.0)).values[0] - 6.0) < 1e-9);
  CHECK(std::abs(finite_diff_grad(power(2), single(3.0)).values[0] - 6.0) < 1e-9);
  const double h = 1e-3;
  CHECK(std::abs(finite_diff_grad(power(3), single(1.0), h).values[0] - 3.0) < 2.0 * h * h);
}

TEST_CASE("grad rejects non-finite values") {
  LambdaObjective bad(
      1, [](std::span<const double>) { return std::nan(""); },
      [](std::span<const double>, std::span<double> g) {
        g[0] = 1.0;
        return std::nan("");
      });
  CHECK_THROWS_AS(grad(bad, single(0.0)), DomainError);
}

TEST_CASE("gradient is linear in the loss") {
  const auto sq = power(2), cube = power(3);
  const LinearCombination combo(2.5, sq, -0.75, cube);
  const ParamVector p = single(1.3);
  const double expected = 2.5 * grad(sq, p).values[0] - 0.75 * grad(cube, p).values[0];
  CHECK(std::abs(grad(combo, p).values[0] - expected) < 1e-10);
}

TEST_CASE("flatten and unflatten round-trip bitwise") {
  const VaptParams params = random_params(Activation::tanh, 3);
  const ParamVector flat = flatten(params);
  CHECK(flat.size() == count_trainable_scalars(params, true));
  const VaptParams back = unflatten(flat, params);
  CHECK(flatten(back).values == flat.values);
  CHECK(back.projector.w1 == params.projector.w1);
  CHECK(back.blocks[1].alphas == params.blocks[1].alphas);
  CHECK(flat.segment_tensor("block1.conv_kernel") == params.blocks[1].conv_kernel);

  ParamVector short_vec = flat;
  short_vec.values.pop_back();
  CHECK_THROWS_AS(unflatten(short_vec, params), ShapeError);

  Rng rng(9);
  std::vector<Tensor> prompts = {random_normal({2, 4}, 0, 1, rng), random_normal({3, 4}, 0, 1, rng)};
  const auto round = unflatten_prompts(flatten_prompts(prompts));
  CHECK(round[0] == prompts[0]);
  CHECK(round[1] == prompts[1]);
}

TEST_CASE("frozen attention weights are not parameters") {
  const VaptParams params = random_params(Activation::tanh, 4);
  Rng rng(4, 2);
  const auto weights = random_weights(params.shape, rng);
  VaptLoss loss(params, weights, vapt_samples(params, weights, rng));
  CHECK(loss.dimension() == count_trainable_scalars(params, true));
  const ParamVector flat = flatten(params);
  for (const auto& s : flat.layout.segments()) {
    CHECK(s.name.find("attention") == std::string::npos);
  }
}

TEST_CASE("VPT prompt gradient matches finite differences") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed, 7);
    const PromptShapeConfig s = tiny_shape();
    std::vector<Tensor> prompts;
    for (std::size_t l = 0; l < s.blocks; ++l) prompts.push_back(random_normal({s.prompts, s.dim}, 0, 1, rng));
    const ParamVector p = flatten_prompts(prompts);
    const auto weights = random_weights(s, rng);
    const auto samples = nearby_samples(
        s, rng, [&](const Tensor& x, std::size_t l) { return prompted_msa_forward(x, prompts[l], weights[l]); });
    VptPromptLoss loss(weights, samples, p.layout);
    CHECK(grad_check(loss, p) < 1e-5);
  }
}

TEST_CASE("VAPT gradient matches finite differences") {
  for (Activation act : {Activation::tanh, Activation::identity}) {
    for (bool ln : {true, false}) {
      for (std::uint64_t seed = 0; seed < 20; ++seed) {
        VaptParams params = random_params(act, 100 + seed);
        params.layer_norm = ln;
        Rng rng(seed, 11);
        const auto weights = random_weights(params.shape, rng);
        VaptLoss loss(params, weights, vapt_samples(params, weights, rng));
        const double err = grad_check(loss, flatten(params));
        INFO("activation " << activation_name(act) << " layer_norm " << ln << " seed " << seed);
        CHECK(err < 1e-5);
      }
    }
  }
}

TEST_CASE("ReLU gradient away from kinks") {
  int checked = 0;
  for (std::uint64_t seed = 0; seed < 20 && checked < 5; ++seed) {
    const VaptParams params = random_params(Activation::relu, 500 + seed);
    Rng rng(seed, 13);
    const auto weights = random_weights(params.shape, rng);
    const auto samples = vapt_samples(params, weights, rng);
    bool near_kink = false;
    for (const auto& s : samples) {
      const PromptTrace t = trace_adaptive_prompts(s.x, params, s.block);
      for (double h : t.hidden.values()) near_kink = near_kink || std::abs(h) < 1e-3;
    }
    if (near_kink) continue;
    VaptLoss loss(params, weights, samples);
    CHECK(grad_check(loss, flatten(params)) < 1e-5);
    ++checked;
  }
  CHECK(checked > 0);
}
