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

// Data-parallel inner loops used by the dense ops and the batched regression
// objective. Each kernel has a scalar reference and, where the build and CPU
// allow, an AVX2+FMA variant. The active table is chosen once at startup
// (best available, overridable with VAPT_SIMD=scalar|avx2) and can be
// switched explicitly for equivalence testing.

#include <cstddef>
#include <span>
#include <string_view>

namespace vapt::simd {

enum class Isa { scalar, avx2 };

struct Kernels {
  Isa isa;
  double (*dot)(const double* a, const double* b, std::size_t n);
  // y += alpha * x
  void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
  // y += a * b, elementwise
  void (*mul_add)(const double* a, const double* b, double* y, std::size_t n);
  void (*scale)(double alpha, double* x, std::size_t n);
  double (*sum)(const double* x, std::size_t n);
  double (*max)(const double* x, std::size_t n);
  // y = max(y, a), elementwise
  void (*vmax)(const double* a, double* y, std::size_t n);
  // y = exp(x), y = tanh(x), elementwise; y may alias x
  void (*vexp)(const double* x, double* y, std::size_t n);
  void (*vtanh)(const double* x, double* y, std::size_t n);
};

const Kernels& scalar_kernels() noexcept;
/// nullptr when the AVX2 variant was not compiled in.
const Kernels* avx2_kernels() noexcept;

bool cpu_supports(Isa isa) noexcept;
std::string_view isa_name(Isa isa) noexcept;
Isa parse_isa(std::string_view name);

/// Currently selected kernel table.
const Kernels& active() noexcept;
Isa active_isa() noexcept;
/// Throws std::runtime_error if the ISA is unavailable on this build or CPU.
void select_isa(Isa isa);

/// Restores the previous ISA on destruction. Test helper.
class ScopedIsa {
 public:
  explicit ScopedIsa(Isa isa) : previous_(active_isa()) { select_isa(isa); }
  ~ScopedIsa() { select_isa(previous_); }
  ScopedIsa(const ScopedIsa&) = delete;
  ScopedIsa& operator=(const ScopedIsa&) = delete;

 private:
  Isa previous_;
};

// Convenience wrappers over the active table. Lengths must agree; the
// caller is responsible for that (checked only in debug builds).
double dot(std::span<const double> a, std::span<const double> b) noexcept;
void axpy(double alpha, std::span<const double> x, std::span<double> y) noexcept;
void mul_add(std::span<const double> a, std::span<const double> b, std::span<double> y) noexcept;
void scale(double alpha, std::span<double> x) noexcept;
double sum(std::span<const double> x) noexcept;
double max(std::span<const double> x) noexcept;
void vmax(std::span<const double> a, std::span<double> y) noexcept;
void vexp(std::span<const double> x, std::span<double> y) noexcept;
void vtanh(std::span<const double> x, std::span<double> y) noexcept;

}  // namespace vapt::simd
