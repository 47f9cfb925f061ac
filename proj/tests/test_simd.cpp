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
#include <limits>
#include <utility>
#include <vector>

#include "doctest.h"
#include "vapt/ops.hpp"
#include "vapt/rng.hpp"
#include "vapt/simd.hpp"

using namespace vapt;

namespace {

std::vector<double> draw(Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  rng.fill_uniform(v, -3.0, 3.0);
  return v;
}

bool close(double a, double b, double tol) { return std::abs(a - b) <= tol * std::max({1.0, std::abs(a), std::abs(b)}); }

}  // namespace

TEST_CASE("scalar table is always available and is the reference") {
  CHECK(simd::cpu_supports(simd::Isa::scalar));
  CHECK(simd::scalar_kernels().isa == simd::Isa::scalar);
  CHECK_THROWS(simd::parse_isa("sse9"));
}

TEST_CASE("AVX2 kernels agree with the scalar reference") {
  if (!simd::cpu_supports(simd::Isa::avx2)) {
    MESSAGE("AVX2 not available on this build/CPU; skipping");
    return;
  }
  const simd::Kernels& ref = simd::scalar_kernels();
  const simd::Kernels& vec = *simd::avx2_kernels();
  Rng rng(101);
  // Lengths cover every tail case of the 4- and 8-wide loops.
  for (std::size_t n : {0u, 1u, 2u, 3u, 4u, 5u, 7u, 8u, 9u, 12u, 15u, 16u, 17u, 31u, 64u, 1000u, 1003u}) {
    const auto a = draw(rng, n), b = draw(rng, n), y0 = draw(rng, n);
    CHECK(close(ref.dot(a.data(), b.data(), n), vec.dot(a.data(), b.data(), n), 1e-13));
    CHECK(close(ref.sum(a.data(), n), vec.sum(a.data(), n), 1e-13));
    CHECK(ref.max(a.data(), n) == vec.max(a.data(), n));

    auto y1 = y0, y2 = y0;
    ref.axpy(0.37, a.data(), y1.data(), n);
    vec.axpy(0.37, a.data(), y2.data(), n);
    for (std::size_t i = 0; i < n; ++i) CHECK(close(y1[i], y2[i], 1e-14));

    y1 = y0, y2 = y0;
    ref.mul_add(a.data(), b.data(), y1.data(), n);
    vec.mul_add(a.data(), b.data(), y2.data(), n);
    for (std::size_t i = 0; i < n; ++i) CHECK(close(y1[i], y2[i], 1e-14));

    y1 = y0, y2 = y0;
    ref.scale(-1.7, y1.data(), n);
    vec.scale(-1.7, y2.data(), n);
    CHECK(y1 == y2);

    y1 = y0, y2 = y0;
    ref.vmax(a.data(), y1.data(), n);
    vec.vmax(a.data(), y2.data(), n);
    CHECK(y1 == y2);
  }
}

TEST_CASE("vectorized exp and tanh agree with libm") {
  const simd::Kernels& ref = simd::scalar_kernels();
  if (!simd::cpu_supports(simd::Isa::avx2)) return;
  const simd::Kernels& vec = *simd::avx2_kernels();
  Rng rng(7);
  const std::pair<double, double> ranges[] = {{-1e-8, 1e-8}, {-1.0, 1.0}, {-40.0, 40.0}, {-708.0, 709.7}};
  for (const auto& [lo, hi] : ranges) {
    for (std::size_t n : {1u, 3u, 4u, 5u, 9u, 1001u}) {
      std::vector<double> x(n), e_ref(n), e_vec(n), t_ref(n), t_vec(n);
      rng.fill_uniform(x, lo, hi);
      ref.vexp(x.data(), e_ref.data(), n);
      vec.vexp(x.data(), e_vec.data(), n);
      ref.vtanh(x.data(), t_ref.data(), n);
      vec.vtanh(x.data(), t_vec.data(), n);
      for (std::size_t i = 0; i < n; ++i) {
        CHECK(std::abs(e_vec[i] - e_ref[i]) <= 1e-15 * e_ref[i]);
        CHECK(std::abs(t_vec[i] - t_ref[i]) <= 1e-15 * std::abs(t_ref[i]));
      }
    }
  }
  const double inf = std::numeric_limits<double>::infinity();
  const std::vector<double> special = {0.0, -0.0, inf, -inf, 710.0, -800.0, std::nan("")};
  std::vector<double> e(special.size()), t(special.size());
  vec.vexp(special.data(), e.data(), special.size());
  vec.vtanh(special.data(), t.data(), special.size());
  CHECK(e[0] == 1.0);
  CHECK(e[2] == inf);
  CHECK(e[3] == 0.0);
  CHECK(e[4] == inf);
  CHECK(e[5] == 0.0);
  CHECK(std::isnan(e[6]));
  CHECK(t[0] == 0.0);
  CHECK(std::signbit(t[1]));
  CHECK(t[2] == 1.0);
  CHECK(t[3] == -1.0);
  CHECK(std::isnan(t[6]));

  // In-place use, as the softmax does.
  std::vector<double> x = {-1.0, 0.5, 2.0, -3.0, 0.25};
  vec.vexp(x.data(), x.data(), x.size());
  CHECK(std::abs(x[2] - std::exp(2.0)) <= 1e-15 * std::exp(2.0));
}

TEST_CASE("dense ops give the same results under either kernel table") {
  if (!simd::cpu_supports(simd::Isa::avx2)) return;
  Rng rng(202);
  const Tensor x = random_uniform({7, 6, 9}, -1.0, 1.0, rng);
  const Tensor k = random_uniform({3, 3}, -1.0, 1.0, rng);
  const Tensor a = random_uniform({9, 13}, -2.0, 2.0, rng), b = random_uniform({13, 11}, -2.0, 2.0, rng);
  Tensor conv_s, conv_v, mm_s, mm_v, sm_s, sm_v;
  {
    simd::ScopedIsa scope(simd::Isa::scalar);
    conv_s = channelwise_conv2d(x, k);
    mm_s = matmul(a, b);
    sm_s = softmax_rows(a);
  }
  {
    simd::ScopedIsa scope(simd::Isa::avx2);
    conv_v = channelwise_conv2d(x, k);
    mm_v = matmul(a, b);
    sm_v = softmax_rows(a);
  }
  CHECK(max_abs_diff(conv_s, conv_v) < 1e-13);
  CHECK(max_abs_diff(mm_s, mm_v) < 1e-12);
  CHECK(max_abs_diff(sm_s, sm_v) < 1e-15);
}
