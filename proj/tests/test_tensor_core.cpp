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
#include <cstring>
#include <algorithm>

#include "doctest.h"
#include "vapt/ops.hpp"
#include "vapt/rng.hpp"
#include "vapt/tensor.hpp"

using namespace vapt;

TEST_CASE("tensor rejects a data length that disagrees with the shape") {
  CHECK_THROWS_AS(Tensor({2, 3}, std::vector<double>(5)), ShapeError);
  CHECK_NOTHROW(Tensor({2, 3}, std::vector<double>(6)));
  CHECK(Tensor({0, 4}).size() == 0);
}

TEST_CASE("softmax_rows examples") {
  SUBCASE("zero row is uniform") {
    const Tensor s = softmax_rows(Tensor({1, 2}, {0.0, 0.0}));
    CHECK(s[0] == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(s[1] == doctest::Approx(0.5).epsilon(1e-15));
  }
  SUBCASE("constant rows give 1/3 for any constant") {
    for (double c : {-700.0, -3.5, 0.0, 12.0, 650.0}) {
      const Tensor s = softmax_rows(Tensor({1, 3}, {c, c, c}));
      for (std::size_t k = 0; k < 3; ++k) CHECK(std::abs(s[k] - 1.0 / 3.0) < 1e-15);
    }
  }
  SUBCASE("[1,2,3] matches direct exp(x_i)/sum exp") {
    const double denom = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
    const Tensor s = softmax_rows(Tensor({1, 3}, {1.0, 2.0, 3.0}));
    CHECK(std::abs(s[0] - std::exp(1.0) / denom) < 1e-15);
    CHECK(std::abs(s[1] - std::exp(2.0) / denom) < 1e-15);
    CHECK(std::abs(s[2] - std::exp(3.0) / denom) < 1e-15);
  }
  SUBCASE("non-finite input is a domain error") {
    CHECK_THROWS_AS(softmax_rows(Tensor({1, 2}, {0.0, std::nan("")})), DomainError);
    CHECK_THROWS_AS(softmax_rows(Tensor({1, 2}, {INFINITY, 0.0})), DomainError);
  }
}

TEST_CASE("softmax rows sum to one and are shift invariant on random inputs") {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t r = 1 + rng.next_u32() % 5, c = 1 + rng.next_u32() % 12;
    const Tensor m = random_uniform({r, c}, -50.0, 50.0, rng);
    const Tensor s = softmax_rows(m);
    Tensor shifted = m;
    for (std::size_t i = 0; i < r; ++i) {
      const double offset = rng.uniform(-20.0, 20.0);
      for (double& v : shifted.row(i)) v += offset;
    }
    const Tensor s2 = softmax_rows(shifted);
    for (std::size_t i = 0; i < r; ++i) {
      double total = 0.0;
      for (double v : s.row(i)) {
        CHECK(v >= 0.0);
        total += v;
      }
      CHECK(std::abs(total - 1.0) < 1e-12);
    }
    CHECK(max_abs_diff(s, s2) < 1e-12);
  }
}

TEST_CASE("channelwise_conv2d examples") {
  SUBCASE("2x2 single channel with ones kernel sums to 10") {
    const Tensor x({2, 2, 1}, {1.0, 2.0, 3.0, 4.0});
    const Tensor out = channelwise_conv2d(x, Tensor({2, 2}, {1.0, 1.0, 1.0, 1.0}));
    CHECK(out.shape() == Shape{1, 1, 1});
    CHECK(out[0] == 10.0);
  }
  SUBCASE("unit 1x1 kernel is the identity") {
    Rng rng(3);
    const Tensor x = random_uniform({4, 5, 3}, -1.0, 1.0, rng);
    CHECK(channelwise_conv2d(x, Tensor({1, 1}, {1.0})) == x);
  }
  SUBCASE("zero input gives zero output") {
    const Tensor out = channelwise_conv2d(Tensor({3, 3, 2}), Tensor({2, 2}, {0.3, -1.0, 2.0, 0.5}));
    for (double v : out.values()) CHECK(v == 0.0);
  }
  SUBCASE("kernel larger than the map is a shape error") {
    CHECK_THROWS_AS(channelwise_conv2d(Tensor({2, 4, 1}), Tensor({3, 3})), ShapeError);
    CHECK_THROWS_AS(channelwise_conv2d(Tensor({4, 2, 1}), Tensor({3, 3})), ShapeError);
  }
  SUBCASE("same kernel on every channel, matches direct summation") {
    Rng rng(5);
    const Tensor x = random_uniform({5, 4, 3}, -1.0, 1.0, rng);
    const Tensor k = random_uniform({3, 3}, -1.0, 1.0, rng);
    const Tensor out = channelwise_conv2d(x, k);
    REQUIRE(out.shape() == Shape{3, 2, 3});
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 2; ++j)
        for (std::size_t c = 0; c < 3; ++c) {
          double acc = 0.0;
          for (std::size_t a = 0; a < 3; ++a)
            for (std::size_t b = 0; b < 3; ++b) acc += k.at(a, b) * x.at(i + a, j + b, c);
          CHECK(std::abs(out.at(i, j, c) - acc) < 1e-14);
        }
  }
}

TEST_CASE("channelwise_conv2d is linear in the input") {
  Rng rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor x = random_uniform({6, 5, 4}, -2.0, 2.0, rng);
    const Tensor y = random_uniform({6, 5, 4}, -2.0, 2.0, rng);
    const Tensor k = random_uniform({3, 3}, -1.0, 1.0, rng);
    const double a = rng.uniform(-3.0, 3.0), b = rng.uniform(-3.0, 3.0);
    Tensor mix(x.shape());
    for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = a * x[i] + b * y[i];
    const Tensor lhs = channelwise_conv2d(mix, k);
    const Tensor cx = channelwise_conv2d(x, k), cy = channelwise_conv2d(y, k);
    Tensor rhs(cx.shape());
    for (std::size_t i = 0; i < rhs.size(); ++i) rhs[i] = a * cx[i] + b * cy[i];
    CHECK(max_abs_diff(lhs, rhs) < 1e-12);
  }
}

TEST_CASE("layer_norm examples") {
  const Tensor ones3 = Tensor::filled({3}, 1.0), zeros3({3});
  SUBCASE("constant vector collapses to zero") {
    const Tensor out = layer_norm(Tensor({3}, {4.0, 4.0, 4.0}), ones3, zeros3);
    for (double v : out.values()) CHECK(v == 0.0);
  }
  SUBCASE("[-1, 1] is already normalized") {
    const Tensor out = layer_norm(Tensor({2}, {-1.0, 1.0}), Tensor::filled({2}, 1.0), Tensor({2}), 1e-14);
    CHECK(std::abs(out[0] + 1.0) < 1e-12);
    CHECK(std::abs(out[1] - 1.0) < 1e-12);
  }
  SUBCASE("[1,2,3] matches scalar recomputation") {
    const double mean = 2.0;
    const double var = ((1 - mean) * (1 - mean) + 0.0 + (3 - mean) * (3 - mean)) / 3.0;
    const double denom = std::sqrt(var + 1e-5);
    const Tensor out = layer_norm(Tensor({3}, {1.0, 2.0, 3.0}), ones3, zeros3, 1e-5);
    CHECK(std::abs(out[0] - (1.0 - mean) / denom) < 1e-15);
    CHECK(std::abs(out[1]) < 1e-15);
    CHECK(std::abs(out[2] - (3.0 - mean) / denom) < 1e-15);
  }
  SUBCASE("gain and bias apply after normalization") {
    const Tensor out = layer_norm(Tensor({3}, {1.0, 2.0, 3.0}), Tensor({3}, {2.0, 2.0, 2.0}), Tensor({3}, {1.0, 1.0, 1.0}));
    const Tensor base = layer_norm(Tensor({3}, {1.0, 2.0, 3.0}), ones3, zeros3);
    for (std::size_t i = 0; i < 3; ++i) CHECK(std::abs(out[i] - (2.0 * base[i] + 1.0)) < 1e-15);
  }
  SUBCASE("bad eps and shape mismatch are rejected") {
    CHECK_THROWS_AS(layer_norm(ones3, ones3, zeros3, 0.0), DomainError);
    CHECK_THROWS_AS(layer_norm(ones3, Tensor({2}), zeros3), ShapeError);
  }
}

TEST_CASE("layer_norm is invariant to adding a constant and standardizes") {
  Rng rng(23);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t d = 2 + rng.next_u32() % 30;
    const Tensor v = random_uniform({d}, -10.0, 10.0, rng);
    Tensor shifted = v;
    const double c = rng.uniform(-100.0, 100.0);
    for (double& x : shifted.values()) x += c;
    const Tensor g = Tensor::filled({d}, 1.0), b({d});
    const Tensor a = layer_norm(v, g, b), s = layer_norm(shifted, g, b);
    CHECK(max_abs_diff(a, s) < 1e-10);
    double mean = 0.0, var = 0.0;
    for (double x : a.values()) mean += x;
    mean /= static_cast<double>(d);
    for (double x : a.values()) var += (x - mean) * (x - mean);
    var /= static_cast<double>(d);
    CHECK(std::abs(mean) < 1e-12);
    CHECK(var <= 1.0);
    CHECK(var > 1.0 - 1e-3);
  }
}

TEST_CASE("matrix helpers agree with index loops") {
  Rng rng(29);
  const Tensor a = random_uniform({3, 5}, -1, 1, rng), b = random_uniform({5, 4}, -1, 1, rng);
  const Tensor c = matmul(a, b);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < 5; ++p) acc += a.at(i, p) * b.at(p, j);
      CHECK(std::abs(c.at(i, j) - acc) < 1e-14);
    }
  CHECK(max_abs_diff(matmul_bt(a, transpose(b)), c) < 1e-14);
  CHECK(max_abs_diff(matmul_at(transpose(a), b), c) < 1e-14);
  CHECK_THROWS_AS(matmul(a, a), ShapeError);
}

TEST_CASE("Philox4x32-10 known-answer vectors") {
  using A4 = std::array<std::uint32_t, 4>;
  CHECK(philox4x32_10(A4{0, 0, 0, 0}, {0, 0}) == A4{0x6627e8d5u, 0xe169c58du, 0xbc57ac4cu, 0x9b00dbd8u});
  CHECK(philox4x32_10(A4{0xffffffffu, 0xffffffffu, 0xffffffffu, 0xffffffffu}, {0xffffffffu, 0xffffffffu}) ==
        A4{0x408f276du, 0x41c83b0eu, 0xa20bc7c6u, 0x6d5451fdu});
  CHECK(philox4x32_10(A4{0x243f6a88u, 0x85a308d3u, 0x13198a2eu, 0x03707344u}, {0xa4093822u, 0x299f31d0u}) ==
        A4{0xd16cfe09u, 0x94fdccebu, 0x5001e420u, 0x24126ea1u});
}

TEST_CASE("rng streams are reproducible and split streams differ") {
  Rng a(42), b(42);
  for (int i = 0; i < 1000; ++i) {
    const double x = a.normal(), y = b.normal();
    CHECK(std::memcmp(&x, &y, sizeof x) == 0);
  }
  Rng c1 = Rng(42).split(1), c1b = Rng(42).split(1), c2 = Rng(42).split(2);
  int same = 0;
  for (int i = 0; i < 100; ++i) {
    const auto u = c1.next_u64();
    CHECK(u == c1b.next_u64());
    same += u == c2.next_u64();
  }
  CHECK(same == 0);
  Rng u(7);
  double lo = 1.0, hi = 0.0, mean = 0.0;
  for (int i = 0; i < 100000; ++i) {
    const double x = u.uniform();
    lo = std::min(lo, x);
    hi = std::max(hi, x);
    mean += x;
  }
  CHECK(lo >= 0.0);
  CHECK(hi < 1.0);
  CHECK(std::abs(mean / 100000 - 0.5) < 0.01);
}
