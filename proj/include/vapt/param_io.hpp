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

// Binary parameter files. Layout (all integers and doubles little-endian):
//
//   offset  size  field
//   0       8     magic "VAPTPRM1"
//   8       4     u32 format version (1)
//   12      4     u32 activation (0 relu, 1 tanh, 2 identity)
//   16      4     u32 LayerNorm enabled (0 or 1)
//   20      4     u32 reserved, 0
//   24      56    u64 L, N_p, H, W, K, r, d
//   80      ...   f64 payload: for each block l in order
//                   conv kernel (K*K), alphas (N_p*H'*W'),
//                   LayerNorm gain (d), LayerNorm bias (d)
//                 then W1 (r*d) and W2 (d*r), all row-major.
//
// save_params also writes "<path>.json" with the same shape config, which
// load_params cross-checks against the binary header.

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "vapt/prompts.hpp"

namespace vapt {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kParamMagic[8] = {'V', 'A', 'P', 'T', 'P', 'R', 'M', '1'};
inline constexpr std::uint32_t kParamFormatVersion = 1;

std::vector<std::uint8_t> encode_params(const VaptParams& params);
VaptParams decode_params(std::span<const std::uint8_t> bytes);

nlohmann::ordered_json shape_to_json(const PromptShapeConfig& shape);
/// Strict: every field required, unknown keys rejected.
PromptShapeConfig shape_from_json(const nlohmann::json& j);

nlohmann::ordered_json params_sidecar(const VaptParams& params);

void save_params(const std::filesystem::path& path, const VaptParams& params);
VaptParams load_params(const std::filesystem::path& path);

}  // namespace vapt
