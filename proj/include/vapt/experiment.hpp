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

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "vapt/estimation.hpp"
#include "vapt/prompts.hpp"
#include "vapt/rate.hpp"

namespace vapt {

enum class Suite { equivalence, gradcheck, params, rate_nonlinear, rate_linear, all };
std::string_view suite_name(Suite s) noexcept;
/// Throws std::invalid_argument for an unknown name.
Suite parse_suite(std::string_view name);

enum class OutputFormat { csv, json, table };
std::string_view format_name(OutputFormat f) noexcept;
OutputFormat parse_format(std::string_view name);

struct EquivalenceSettings {
  std::size_t instances = 100;
  std::size_t max_tokens = 8;
  std::size_t max_dim = 16;
  std::size_t max_prompts = 4;
  double tolerance = 1e-10;
};

struct GradcheckSettings {
  std::size_t seeds = 20;
  double step = 1e-5;
  double tolerance = 1e-5;
};

struct RateSettings {
  std::size_t input_dim = 2;
  std::size_t output_dim = 2;
  std::size_t rank = 1;
  std::size_t pretrained_experts = 1;
  std::size_t true_atoms = 2;
  std::size_t fitted_atoms = 2;
  double noise_std = 0.1;
  std::vector<std::size_t> sample_sizes{200, 500, 1000, 2000, 5000, 10000};
  std::size_t replications = 20;
  double init_perturbation = 1e-2;
  double box_bound = 5.0;
  std::size_t max_iterations = 5000;
  std::size_t test_inputs = 100;
  double max_failure_rate = 0.1;
  std::pair<double, double> slope_window{-0.65, -0.35};
  double prompt_slope_max = -0.3;
  double noiseless_tolerance = 1e-6;
  std::optional<MixingMeasure> true_measure;
};

struct ExperimentConfig {
  Suite suite = Suite::all;
  std::uint64_t seed = 7;
  std::string output_dir = "vapt-out";
  std::size_t jobs = 1;
  OutputFormat format = OutputFormat::table;
  EquivalenceSettings equivalence;
  GradcheckSettings gradcheck;
  PromptShapeConfig params{12, 10, 14, 14, 3, 8, 768};
  RateSettings rate;
};

struct ConfigIssue {
  std::size_t line = 0;  // 0 when no line applies
  std::string key;       // dotted path, e.g. "rate.noise_std"
  std::string message;
};

class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string source, std::vector<ConfigIssue> issues);
  const std::vector<ConfigIssue>& issues() const noexcept { return issues_; }

 private:
  std::vector<ConfigIssue> issues_;
};

/// Strict JSON schema: "suite" is required, every other key has a default,
/// unknown keys are rejected at every level. All problems found are
/// reported together with their line numbers.
ExperimentConfig parse_config_text(std::string_view text, std::string_view source = "<config>");
ExperimentConfig parse_config(const std::filesystem::path& path);

/// Every key in fixed order, two-space indent, trailing newline. A parsed
/// emit is emitted back byte for byte.
std::string emit_config(const ExperimentConfig& cfg);

/// Semantic checks shared by the parser and the command line overrides.
std::vector<ConfigIssue> validate_config(const ExperimentConfig& cfg);

/// The rate experiment a suite would run: tanh for rate-nonlinear, identity
/// for rate-linear.
RateConfig rate_config_for(const ExperimentConfig& cfg, Suite track);

struct SuiteReport {
  std::string name;
  bool passed = false;
  std::vector<std::string> failures;  // names of violated invariants
  std::string csv;
  std::string summary_json;
  std::string table;
};

/// Runs one suite in memory. Suite::all is not accepted here.
SuiteReport run_single_suite(Suite suite, const ExperimentConfig& cfg);

/// Runs cfg.suite (every suite for all), writes <suite>.csv,
/// <suite>_summary.json and <suite>.txt under cfg.output_dir, prints the
/// chosen format to `out`. Returns 0 when every assertion holds, 1 otherwise.
int run_suite(const ExperimentConfig& cfg, std::ostream& out, std::ostream& err);

}  // namespace vapt
