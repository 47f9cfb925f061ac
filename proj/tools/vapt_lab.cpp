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


// vapt_lab: runs the lab suites and writes CSV, summary JSON and a table.
//
//   vapt_lab --suite rate-nonlinear --config configs/rate_nonlinear.json --out runs/a
//
// Every flag can also come from the environment: VAPT_SUITE, VAPT_CONFIG,
// VAPT_SEED, VAPT_OUT, VAPT_JOBS, VAPT_FORMAT. Flags beat the environment,
// which beats the config file. Exit status: 0 all assertions hold, 1 an
// assertion failed, 2 bad flags or config.

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "vapt/experiment.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Prompt-attention laboratory suites"};
  std::optional<std::string> suite, config, out, format;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> jobs;
  app.add_option("--suite", suite, "equivalence, gradcheck, params, rate-nonlinear, rate-linear or all")
      ->envname("VAPT_SUITE");
  app.add_option("--config", config, "JSON config file")->envname("VAPT_CONFIG");
  app.add_option("--seed", seed, "master seed")->envname("VAPT_SEED");
  app.add_option("--out", out, "output directory")->envname("VAPT_OUT");
  app.add_option("--jobs", jobs, "worker threads")->envname("VAPT_JOBS");
  app.add_option("--format", format, "stdout format: csv, json or table")->envname("VAPT_FORMAT");
  bool print_config = false;
  app.add_flag("--print-config", print_config, "print the effective config and exit");
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  vapt::ExperimentConfig cfg;
  try {
    if (config) cfg = vapt::parse_config(*config);
    if (suite) cfg.suite = vapt::parse_suite(*suite);
    if (format) cfg.format = vapt::parse_format(*format);
  } catch (const vapt::ConfigError& e) {
    std::cerr << e.what() << '\n';
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << e.what() << '\n';
    return 2;
  }
  if (seed) cfg.seed = *seed;
  if (out) cfg.output_dir = *out;
  if (jobs) cfg.jobs = *jobs;
  if (print_config) {
    std::cout << vapt::emit_config(cfg);
    return 0;
  }

  try {
    return vapt::run_suite(cfg, std::cout, std::cerr);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
}
