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


#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "vapt/experiment.hpp"

using namespace vapt;

namespace {

std::string read_file(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

std::string error_of(std::string_view text) {
  try {
    parse_config_text(text, "t.json");
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

std::filesystem::path scratch_dir(const char* name) {
  auto p = std::filesystem::temp_directory_path() / "vapt_config_test" / name;
  std::filesystem::remove_all(p);
  return p;
}

ExperimentConfig small_rate(const char* dir) {
  ExperimentConfig cfg = parse_config_text(R"({"suite": "rate-nonlinear"})");
  cfg.output_dir = scratch_dir(dir).string();
  cfg.rate.sample_sizes = {50, 80, 120};
  cfg.rate.replications = 10;
  cfg.rate.max_iterations = 40;
  cfg.rate.slope_window = {-10.0, 10.0};
  cfg.rate.prompt_slope_max = 10.0;
  return cfg;
}

}  // namespace

TEST_CASE("minimal config fills defaults") {
  const ExperimentConfig cfg = parse_config_text(R"({"suite": "params"})");
  CHECK(cfg.suite == Suite::params);
  CHECK(cfg.seed == 7);
  CHECK(cfg.jobs == 1);
  CHECK(cfg.params == PromptShapeConfig{12, 10, 14, 14, 3, 8, 768});
  CHECK(cfg.rate.sample_sizes == std::vector<std::size_t>{200, 500, 1000, 2000, 5000, 10000});
  CHECK(cfg.rate.replications == 20);
  CHECK(cfg.equivalence.tolerance == 1e-10);
  ExperimentConfig defaults;
  defaults.suite = Suite::params;
  CHECK(emit_config(cfg) == emit_config(defaults));
}

TEST_CASE("unknown keys are named with their line") {
  const std::string top = error_of("{\n  \"suite\": \"params\",\n  \"foo\": 1\n}\n");
  CHECK(top.find("\"foo\"") != std::string::npos);
  CHECK(top.find("t.json:3:") != std::string::npos);

  const std::string nested = error_of("{\"suite\": \"params\",\n \"rate\": {\n  \"rank\": 1,\n  \"bar\": 2}}");
  CHECK(nested.find("rate.bar") != std::string::npos);
  CHECK(nested.find("t.json:4:") != std::string::npos);
}

TEST_CASE("missing, mistyped and invalid values") {
  CHECK(error_of(R"({"seed": 3})").find("missing required key \"suite\"") != std::string::npos);
  CHECK(error_of(R"({"suite": "nope"})").find("unknown suite") != std::string::npos);
  CHECK(error_of(R"({"suite": "all", "seed": -1})").find("seed: must be a non-negative integer") !=
        std::string::npos);
  CHECK(error_of(R"({"suite": "all", "rate": {"noise_std": "x"}})").find("rate.noise_std: expected a number") !=
        std::string::npos);
  CHECK(error_of(R"({"suite": "all", "params": []})").find("params: expected an object") != std::string::npos);

  const std::string reps = error_of("{\"suite\": \"all\",\n\"rate\": {\n\"replications\": 9}}");
  CHECK(reps.find("t.json:3: rate.replications: must be at least 10") != std::string::npos);
  CHECK(error_of(R"({"suite": "all", "rate": {"sample_sizes": [100, 100, 200]}})").find("strictly increasing") !=
        std::string::npos);
  CHECK(error_of(R"({"suite": "all", "rate": {"fitted_atoms": 1}})").find("rate:") != std::string::npos);
  CHECK(error_of(R"({"suite": "all", "params": {"rank": 768}})").find("params.rank") != std::string::npos);
  CHECK(error_of(R"({"suite": "all", "jobs": 0})").find("jobs: must be at least 1") != std::string::npos);

  const std::string several = error_of(R"({"suite": "all", "a": 1, "b": 2})");
  CHECK(several.find("\"a\"") != std::string::npos);
  CHECK(several.find("\"b\"") != std::string::npos);
}

TEST_CASE("syntax errors carry a line") {
  const std::string e = error_of("{\n\"suite\": \"all\",\n\"seed\": ,\n}");
  CHECK(e.find("t.json:3:") != std::string::npos);
  CHECK_THROWS_AS(parse_config("/nonexistent/vapt.json"), ConfigError);
}

TEST_CASE("emit, parse, emit is byte-identical") {
  ExperimentConfig cfg;
  cfg.seed = 18446744073709551615ull;
  cfg.rate.noise_std = 0.1;
  cfg.rate.init_perturbation = 1e-300;
  cfg.rate.box_bound = 12345.678901234567;
  cfg.rate.true_atoms = 2;
  MixingMeasure m;
  m.atoms = {{0.25, Tensor({1, 2}, {1.5, -2.0 / 3.0})}, {-0.125, Tensor({1, 2}, {0.1, 2.2})}};
  m.w2 = Tensor({2, 1}, {1.0, -1.0 / 7.0});
  cfg.rate.true_measure = m;
  const std::string once = emit_config(cfg);
  const ExperimentConfig back = parse_config_text(once);
  CHECK(emit_config(back) == once);
  CHECK(back.seed == cfg.seed);
  CHECK(back.rate.box_bound == cfg.rate.box_bound);
  REQUIRE(back.rate.true_measure);
  CHECK(back.rate.true_measure->w2 == m.w2);
  CHECK(back.rate.true_measure->atoms[0].w1 == m.atoms[0].w1);

  CHECK(error_of(R"({"suite": "all", "rate": {"true_measure": {"b": [0], "w1": [[[1, 2]]], "w2": [[1], [2]]}}})")
            .find("rate.true_measure: atom count") != std::string::npos);
}

TEST_CASE("shipped configs parse and round-trip") {
  const std::filesystem::path dir = std::filesystem::path(VAPT_SOURCE_DIR) / "configs";
  int seen = 0;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.path().extension() != ".json") continue;
    ++seen;
    INFO(entry.path().string());
    const ExperimentConfig cfg = parse_config(entry.path());
    CHECK(emit_config(parse_config_text(emit_config(cfg))) == emit_config(cfg));
    if (entry.path().filename() != "minimal.json") CHECK(read_file(entry.path()) == emit_config(cfg));
  }
  CHECK(seen >= 5);
}

TEST_CASE("suite and format names") {
  for (Suite s : {Suite::equivalence, Suite::gradcheck, Suite::params, Suite::rate_nonlinear, Suite::rate_linear,
                  Suite::all}) {
    CHECK(parse_suite(suite_name(s)) == s);
  }
  for (OutputFormat f : {OutputFormat::csv, OutputFormat::json, OutputFormat::table}) {
    CHECK(parse_format(format_name(f)) == f);
  }
  CHECK_THROWS_AS(parse_format("xml"), std::invalid_argument);
}

TEST_CASE("run_suite writes artifacts and reports exit codes") {
  ExperimentConfig cfg = parse_config_text(R"({"suite": "params", "format": "json"})");
  cfg.output_dir = scratch_dir("params").string();
  std::ostringstream out, err;
  CHECK(run_suite(cfg, out, err) == 0);
  const std::filesystem::path dir(cfg.output_dir);
  for (const char* f : {"params.csv", "params_summary.json", "params.txt"}) CHECK(std::filesystem::exists(dir / f));
  const auto summary = nlohmann::ordered_json::parse(read_file(dir / "params_summary.json"));
  CHECK(summary["passed"] == true);
  CHECK(summary["results"]["vapt_params"] == 29676);
  CHECK(summary["results"]["vpt_params"] == 92160);
  CHECK(summary["config"].dump(2) + "\n" == emit_config(cfg));
  CHECK(out.str() == read_file(dir / "params_summary.json"));

  ExperimentConfig strict = cfg;
  strict.suite = Suite::gradcheck;
  strict.gradcheck.seeds = 1;
  strict.gradcheck.tolerance = 1e-300;
  std::ostringstream out2, err2;
  CHECK(run_suite(strict, out2, err2) == 1);
  CHECK(err2.str().find("gradient_check.vapt-tanh") != std::string::npos);

  ExperimentConfig broken = cfg;
  broken.jobs = 0;
  std::ostringstream out3, err3;
  CHECK(run_suite(broken, out3, err3) == 2);
  CHECK(err3.str().find("jobs") != std::string::npos);
}

TEST_CASE("equivalence suite stays below its tolerance") {
  ExperimentConfig cfg = parse_config_text(R"({"suite": "equivalence"})");
  const SuiteReport r = run_single_suite(Suite::equivalence, cfg);
  CHECK(r.passed);
  CHECK(std::count(r.csv.begin(), r.csv.end(), '\n') == 101);
}

TEST_CASE("rate suite CSV is exact and deterministic") {
  const ExperimentConfig cfg = small_rate("rate");
  const SuiteReport a = run_single_suite(Suite::rate_nonlinear, cfg);
  const SuiteReport b = run_single_suite(Suite::rate_nonlinear, cfg);
  ExperimentConfig threaded = cfg;
  threaded.jobs = 3;
  const SuiteReport c = run_single_suite(Suite::rate_nonlinear, threaded);
  CHECK(a.csv == b.csv);
  CHECK(a.csv == c.csv);
  std::istringstream lines(a.csv);
  std::string header, first;
  std::getline(lines, header);
  std::getline(lines, first);
  CHECK(header == "experiment_id,n,replication,loss_kind,loss,fit_status,iterations,seed");
  CHECK(first.rfind("rate-nonlinear,50,0,D1,", 0) == 0);
  CHECK(std::count(a.csv.begin(), a.csv.end(), '\n') == 31);

  const SuiteReport lin = run_single_suite(Suite::rate_linear, cfg);
  CHECK(lin.csv.find("rate-linear,50,0,D2,") != std::string::npos);
  const auto summary = nlohmann::json::parse(lin.summary_json);
  CHECK(summary["results"]["loss_kind"] == "D2");
  CHECK(summary["results"]["points"].size() == 3);
}
