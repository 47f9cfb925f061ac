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

#include <atomic>
#include <cstdlib>
#include <stdexcept>
#include <string>

#include "vapt/simd.hpp"

namespace vapt::simd {

#if !defined(VAPT_HAVE_AVX2)
const Kernels* avx2_kernels() noexcept { return nullptr; }
#endif

bool cpu_supports(Isa isa) noexcept {
  switch (isa) {
    case Isa::scalar:
      return true;
    case Isa::avx2:
#if defined(VAPT_HAVE_AVX2) && (defined(__GNUC__) || defined(__clang__))
      return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
      return false;
#endif
  }
  return false;
}

std::string_view isa_name(Isa isa) noexcept { return isa == Isa::avx2 ? "avx2" : "scalar"; }

Isa parse_isa(std::string_view name) {
  if (name == "scalar") return Isa::scalar;
  if (name == "avx2") return Isa::avx2;
  throw std::invalid_argument("unknown SIMD level '" + std::string(name) + "'");
}

namespace {

const Kernels* table_for(Isa isa) {
  if (!cpu_supports(isa)) return nullptr;
  return isa == Isa::avx2 ? avx2_kernels() : &scalar_kernels();
}

const Kernels* initial_table() {
  if (const char* env = std::getenv("VAPT_SIMD"); env != nullptr && std::string_view(env) != "auto") {
    try {
      if (const Kernels* k = table_for(parse_isa(env))) return k;
    } catch (const std::invalid_argument&) {
      // fall through to the best available table
    }
  }
  if (const Kernels* k = table_for(Isa::avx2)) return k;
  return &scalar_kernels();
}

std::atomic<const Kernels*>& current() {
  static std::atomic<const Kernels*> table{initial_table()};
  return table;
}

}  // namespace

const Kernels& active() noexcept { return *current().load(std::memory_order_acquire); }

Isa active_isa() noexcept { return active().isa; }

void select_isa(Isa isa) {
  const Kernels* k = table_for(isa);
  if (k == nullptr) {
    throw std::runtime_error("SIMD level '" + std::string(isa_name(isa)) + "' is not available");
  }
  current().store(k, std::memory_order_release);
}

double dot(std::span<const double> a, std::span<const double> b) noexcept {
  return active().dot(a.data(), b.data(), a.size());
}
void axpy(double alpha, std::span<const double> x, std::span<double> y) noexcept {
  active().axpy(alpha, x.data(), y.data(), x.size());
}
void mul_add(std::span<const double> a, std::span<const double> b, std::span<double> y) noexcept {
  active().mul_add(a.data(), b.data(), y.data(), y.size());
}
void scale(double alpha, std::span<double> x) noexcept { active().scale(alpha, x.data(), x.size()); }
double sum(std::span<const double> x) noexcept { return active().sum(x.data(), x.size()); }
double max(std::span<const double> x) noexcept { return active().max(x.data(), x.size()); }
void vmax(std::span<const double> a, std::span<double> y) noexcept { active().vmax(a.data(), y.data(), y.size()); }
void vexp(std::span<const double> x, std::span<double> y) noexcept { active().vexp(x.data(), y.data(), y.size()); }
void vtanh(std::span<const double> x, std::span<double> y) noexcept { active().vtanh(x.data(), y.data(), y.size()); }

}  // namespace vapt::simd
