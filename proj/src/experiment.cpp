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


#include "vapt/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <fstream>
#include <ostream>
#include <sstream>

#include "json.hpp"
#include "vapt/attention.hpp"
#include "vapt/gradient.hpp"
#include "vapt/ops.hpp"
#include "vapt/parallel.hpp"

namespace vapt {

namespace {

using nlohmann::json;
using ojson = nlohmann::ordered_json;
using Path = std::vector<std::string>;

constexpr std::uint64_t kEquivalenceStream = 0x6571756976;
constexpr std::uint64_t kGradcheckStream = 0x67726164;

std::string strf(const char* fmt, ...) __attribute__((format(printf, 1, 2)));
std::string strf(const char* fmt, ...) {
  va_list args;
  va_start(args, fmt);
  va_list copy;
  va_copy(copy, args);
  const int n = std::vsnprintf(nullptr, 0, fmt, copy);
  va_end(copy);
  std::string out(static_cast<std::size_t>(n), '\0');
  std::vsnprintf(out.data(), out.size() + 1, fmt, args);
  va_end(args);
  return out;
}

std::string g17(double v) { return strf("%.17g", v); }

std::string dotted(const Path& p) {
  std::string out;
  for (const auto& k : p) out += (out.empty() ? "" : ".") + k;
  return out;
}

Path split_dotted(std::string_view key) {
  Path out;
  std::size_t start = 0;
  while (start <= key.size()) {
    const std::size_t dot = key.find('.', start);
    const std::size_t end = dot == std::string_view::npos ? key.size() : dot;
    out.emplace_back(key.substr(start, end - start));
    if (dot == std::string_view::npos) break;
    start = dot + 1;
  }
  return out;
}

// Line of the last key of `path`, found by scanning for each quoted key
// followed by a colon after the previous one. 0 when a key is absent.
std::size_t line_of(std::string_view text, const Path& path) {
  std::size_t pos = 0, found = std::string_view::npos;
  for (const auto& key : path) {
    const std::string needle = "\"" + key + "\"";
    std::size_t at = text.find(needle, pos);
    while (at != std::string_view::npos) {
      std::size_t k = at + needle.size();
      while (k < text.size() && (text[k] == ' ' || text[k] == '\t' || text[k] == '\n' || text[k] == '\r')) ++k;
      if (k < text.size() && text[k] == ':') break;
      at = text.find(needle, at + 1);
    }
    if (at == std::string_view::npos) break;
    found = pos = at;
  }
  if (found == std::string_view::npos) return 0;
  return 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(found), '\n'));
}

class Reader {
 public:
  explicit Reader(std::string_view text) : text_(text) {}

  void issue(const Path& path, std::string message) {
    issues.push_back({line_of(text_, path), dotted(path), std::move(message)});
  }

  bool object(const json& j, const Path& path) {
    if (j.is_object()) return true;
    issue(path, "expected an object");
    return false;
  }

  void allow(const json& j, const Path& path, std::initializer_list<std::string_view> keys) {
    for (const auto& [k, v] : j.items()) {
      if (std::find(keys.begin(), keys.end(), k) == keys.end()) {
        Path at = path;
        at.push_back(k);
        issue(at, "unknown key \"" + k + "\"");
      }
    }
  }

  template <typename T>
  void field(const json& j, const Path& path, const char* key, T& out) {
    if (!j.contains(key)) return;
    Path at = path;
    at.emplace_back(key);
    read(j.at(key), at, out);
  }

  template <std::unsigned_integral T>
  void read(const json& v, const Path& path, T& out) {
    if (v.is_number_unsigned()) {
      out = static_cast<T>(v.get<std::uint64_t>());
    } else if (v.is_number_integer()) {
      issue(path, "must be a non-negative integer");
    } else {
      issue(path, "expected an integer");
    }
  }

  void read(const json& v, const Path& path, double& out) {
    if (v.is_number()) {
      out = v.get<double>();
    } else {
      issue(path, "expected a number");
    }
  }

  void read(const json& v, const Path& path, std::string& out) {
    if (v.is_string()) {
      out = v.get<std::string>();
    } else {
      issue(path, "expected a string");
    }
  }

  void read(const json& v, const Path& path, std::vector<std::size_t>& out) {
    if (!v.is_array()) {
      issue(path, "expected an array of integers");
      return;
    }
    std::vector<std::size_t> vals(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) read(v[i], path, vals[i]);
    out = std::move(vals);
  }

  void read(const json& v, const Path& path, std::pair<double, double>& out) {
    if (!v.is_array() || v.size() != 2) {
      issue(path, "expected [low, high]");
      return;
    }
    read(v[0], path, out.first);
    read(v[1], path, out.second);
  }

  void read(const json& v, const Path& path, Tensor& out) {
    if (!v.is_array() || v.empty() || !v[0].is_array() || v[0].empty()) {
      issue(path, "expected a non-empty matrix (array of rows)");
      return;
    }
    const std::size_t rows = v.size(), cols = v[0].size();
    Tensor t({rows, cols});
    for (std::size_t i = 0; i < rows; ++i) {
      if (!v[i].is_array() || v[i].size() != cols) {
        issue(path, "matrix rows differ in length");
        return;
      }
      for (std::size_t k = 0; k < cols; ++k) read(v[i][k], path, t.at(i, k));
    }
    out = std::move(t);
  }

  void read(const json& v, const Path& path, std::optional<MixingMeasure>& out) {
    if (v.is_null()) {
      out.reset();
      return;
    }
    if (!object(v, path)) return;
    allow(v, path, {"b", "w1", "w2"});
    for (const char* k : {"b", "w1", "w2"}) {
      if (!v.contains(k)) issue(path, std::string("missing key \"") + k + "\"");
    }
    if (!v.contains("b") || !v.contains("w1") || !v.contains("w2")) return;
    const Path pb = with(path, "b"), pw1 = with(path, "w1");
    const json& b = v.at("b");
    const json& w1 = v.at("w1");
    if (!b.is_array() || !w1.is_array() || b.size() != w1.size()) {
      issue(pb, "b and w1 must be arrays of equal length");
      return;
    }
    MixingMeasure m;
    m.atoms.resize(b.size());
    for (std::size_t i = 0; i < b.size(); ++i) {
      read(b[i], pb, m.atoms[i].b);
      read(w1[i], pw1, m.atoms[i].w1);
    }
    read(v.at("w2"), with(path, "w2"), m.w2);
    out = std::move(m);
  }

  std::vector<ConfigIssue> issues;

 private:
  static Path with(Path p, const char* k) {
    p.emplace_back(k);
    return p;
  }
  std::string_view text_;
};

ojson matrix_json(const Tensor& t) {
  ojson rows = ojson::array();
  for (std::size_t i = 0; i < t.rows(); ++i) {
    ojson row = ojson::array();
    for (double v : t.row(i)) row.push_back(v);
    rows.push_back(std::move(row));
  }
  return rows;
}

ojson measure_json(const MixingMeasure& m) {
  ojson b = ojson::array(), w1 = ojson::array();
  for (const auto& a : m.atoms) {
    b.push_back(a.b);
    w1.push_back(matrix_json(a.w1));
  }
  ojson out = ojson::object();
  out["b"] = std::move(b);
  out["w1"] = std::move(w1);
  out["w2"] = matrix_json(m.w2);
  return out;
}

ojson config_json(const ExperimentConfig& cfg) {
  ojson j = ojson::object();
  j["suite"] = suite_name(cfg.suite);
  j["seed"] = cfg.seed;
  j["output_dir"] = cfg.output_dir;
  j["jobs"] = cfg.jobs;
  j["format"] = format_name(cfg.format);

  const auto& e = cfg.equivalence;
  ojson eq = ojson::object();
  eq["instances"] = e.instances;
  eq["max_tokens"] = e.max_tokens;
  eq["max_dim"] = e.max_dim;
  eq["max_prompts"] = e.max_prompts;
  eq["tolerance"] = e.tolerance;
  j["equivalence"] = std::move(eq);

  ojson gc = ojson::object();
  gc["seeds"] = cfg.gradcheck.seeds;
  gc["step"] = cfg.gradcheck.step;
  gc["tolerance"] = cfg.gradcheck.tolerance;
  j["gradcheck"] = std::move(gc);

  const auto& s = cfg.params;
  ojson ps = ojson::object();
  ps["blocks"] = s.blocks;
  ps["prompts"] = s.prompts;
  ps["height"] = s.height;
  ps["width"] = s.width;
  ps["kernel"] = s.kernel;
  ps["rank"] = s.rank;
  ps["dim"] = s.dim;
  j["params"] = std::move(ps);

  const auto& r = cfg.rate;
  ojson rt = ojson::object();
  rt["input_dim"] = r.input_dim;
  rt["output_dim"] = r.output_dim;
  rt["rank"] = r.rank;
  rt["pretrained_experts"] = r.pretrained_experts;
  rt["true_atoms"] = r.true_atoms;
  rt["fitted_atoms"] = r.fitted_atoms;
  rt["noise_std"] = r.noise_std;
  rt["sample_sizes"] = r.sample_sizes;
  rt["replications"] = r.replications;
  rt["init_perturbation"] = r.init_perturbation;
  rt["box_bound"] = r.box_bound;
  rt["max_iterations"] = r.max_iterations;
  rt["test_inputs"] = r.test_inputs;
  rt["max_failure_rate"] = r.max_failure_rate;
  rt["slope_window"] = ojson::array({r.slope_window.first, r.slope_window.second});
  rt["prompt_slope_max"] = r.prompt_slope_max;
  rt["noiseless_tolerance"] = r.noiseless_tolerance;
  if (r.true_measure) rt["true_measure"] = measure_json(*r.true_measure);
  j["rate"] = std::move(rt);
  return j;
}

void read_config(Reader& rd, const json& root, ExperimentConfig& cfg) {
  if (!rd.object(root, {})) return;
  rd.allow(root, {}, {"suite", "seed", "output_dir", "jobs", "format", "equivalence", "gradcheck", "params", "rate"});

  if (!root.contains("suite")) {
    rd.issues.push_back({1, "suite", "missing required key \"suite\""});
  } else {
    std::string name;
    rd.field(root, {}, "suite", name);
    try {
      if (root.at("suite").is_string()) cfg.suite = parse_suite(name);
    } catch (const std::invalid_argument& e) {
      rd.issue({"suite"}, e.what());
    }
  }
  rd.field(root, {}, "seed", cfg.seed);
  rd.field(root, {}, "output_dir", cfg.output_dir);
  rd.field(root, {}, "jobs", cfg.jobs);
  if (root.contains("format")) {
    std::string name;
    rd.field(root, {}, "format", name);
    try {
      if (root.at("format").is_string()) cfg.format = parse_format(name);
    } catch (const std::invalid_argument& e) {
      rd.issue({"format"}, e.what());
    }
  }

  if (root.contains("equivalence")) {
    const Path p{"equivalence"};
    const json& j = root.at("equivalence");
    if (rd.object(j, p)) {
      rd.allow(j, p, {"instances", "max_tokens", "max_dim", "max_prompts", "tolerance"});
      auto& e = cfg.equivalence;
      rd.field(j, p, "instances", e.instances);
      rd.field(j, p, "max_tokens", e.max_tokens);
      rd.field(j, p, "max_dim", e.max_dim);
      rd.field(j, p, "max_prompts", e.max_prompts);
      rd.field(j, p, "tolerance", e.tolerance);
    }
  }
  if (root.contains("gradcheck")) {
    const Path p{"gradcheck"};
    const json& j = root.at("gradcheck");
    if (rd.object(j, p)) {
      rd.allow(j, p, {"seeds", "step", "tolerance"});
      rd.field(j, p, "seeds", cfg.gradcheck.seeds);
      rd.field(j, p, "step", cfg.gradcheck.step);
      rd.field(j, p, "tolerance", cfg.gradcheck.tolerance);
    }
  }
  if (root.contains("params")) {
    const Path p{"params"};
    const json& j = root.at("params");
    if (rd.object(j, p)) {
      rd.allow(j, p, {"blocks", "prompts", "height", "width", "kernel", "rank", "dim"});
      auto& s = cfg.params;
      rd.field(j, p, "blocks", s.blocks);
      rd.field(j, p, "prompts", s.prompts);
      rd.field(j, p, "height", s.height);
      rd.field(j, p, "width", s.width);
      rd.field(j, p, "kernel", s.kernel);
      rd.field(j, p, "rank", s.rank);
      rd.field(j, p, "dim", s.dim);
    }
  }
  if (root.contains("rate")) {
    const Path p{"rate"};
    const json& j = root.at("rate");
    if (rd.object(j, p)) {
      rd.allow(j, p,
               {"input_dim", "output_dim", "rank", "pretrained_experts", "true_atoms", "fitted_atoms", "noise_std",
                "sample_sizes", "replications", "init_perturbation", "box_bound", "max_iterations", "test_inputs",
                "max_failure_rate", "slope_window", "prompt_slope_max", "noiseless_tolerance", "true_measure"});
      auto& r = cfg.rate;
      rd.field(j, p, "input_dim", r.input_dim);
      rd.field(j, p, "output_dim", r.output_dim);
      rd.field(j, p, "rank", r.rank);
      rd.field(j, p, "pretrained_experts", r.pretrained_experts);
      rd.field(j, p, "true_atoms", r.true_atoms);
      rd.field(j, p, "fitted_atoms", r.fitted_atoms);
      rd.field(j, p, "noise_std", r.noise_std);
      rd.field(j, p, "sample_sizes", r.sample_sizes);
      rd.field(j, p, "replications", r.replications);
      rd.field(j, p, "init_perturbation", r.init_perturbation);
      rd.field(j, p, "box_bound", r.box_bound);
      rd.field(j, p, "max_iterations", r.max_iterations);
      rd.field(j, p, "test_inputs", r.test_inputs);
      rd.field(j, p, "max_failure_rate", r.max_failure_rate);
      rd.field(j, p, "slope_window", r.slope_window);
      rd.field(j, p, "prompt_slope_max", r.prompt_slope_max);
      rd.field(j, p, "noiseless_tolerance", r.noiseless_tolerance);
      rd.field(j, p, "true_measure", r.true_measure);
    }
  }
}

std::string format_issues(std::string_view source, const std::vector<ConfigIssue>& issues) {
  std::string out;
  for (const auto& i : issues) {
    if (!out.empty()) out += '\n';
    out += std::string(source);
    if (i.line > 0) out += ":" + std::to_string(i.line);
    out += ": ";
    if (!i.key.empty()) out += i.key + ": ";
    out += i.message;
  }
  return out;
}

// Suites --------------------------------------------------------------------

struct Report {
  SuiteReport out;
  ojson results = ojson::object();
  void fail(std::string invariant, const std::string& detail) {
    out.failures.push_back(invariant + ": " + detail);
  }
};

void run_equivalence(const ExperimentConfig& cfg, Report& rep) {
  const auto& s = cfg.equivalence;
  struct Row {
    std::size_t heads = 0, dim = 0, tokens = 0, prompts = 0;
    double diff = 0.0;
  };
  std::vector<Row> rows(s.instances);
  const Rng base(cfg.seed, kEquivalenceStream);
  parallel_for(s.instances, cfg.jobs, [&](std::size_t i) {
    Rng rng = base.split(i);
    std::vector<std::size_t> head_choices;
    for (std::size_t m : {1, 2, 4}) {
      if (m <= s.max_dim) head_choices.push_back(m);
    }
    Row r;
    r.heads = head_choices[rng.next_u32() % head_choices.size()];
    r.dim = r.heads * (1 + rng.next_u32() % (s.max_dim / r.heads));
    r.tokens = 1 + rng.next_u32() % s.max_tokens;
    r.prompts = rng.next_u32() % (s.max_prompts + 1);
    const AttentionWeights w = AttentionWeights::random(r.dim, r.heads, rng);
    const Tensor x = random_normal({r.tokens, r.dim}, 0.0, 1.0, rng);
    const Tensor p = random_normal({r.prompts, r.dim}, 0.0, 1.0, rng);
    const std::vector<Tensor> heads = prompted_head_outputs(x, p, w);
    for (std::size_t m = 0; m < r.heads; ++m) {
      for (std::size_t row = 0; row < r.tokens; ++row) {
        const Tensor mixed = moe_eval(moe_decompose(x, p, w, m, row));
        const auto ref = heads[m].row(row);
        for (std::size_t a = 0; a < ref.size(); ++a) r.diff = std::max(r.diff, std::abs(mixed[a] - ref[a]));
      }
    }
    rows[i] = r;
  });

  double worst = 0.0;
  rep.out.csv = "instance,heads,dim,tokens,prompts,max_abs_diff\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const Row& r = rows[i];
    worst = std::max(worst, r.diff);
    rep.out.csv += strf("%zu,%zu,%zu,%zu,%zu,%s\n", i, r.heads, r.dim, r.tokens, r.prompts, g17(r.diff).c_str());
  }
  rep.results["instances"] = s.instances;
  rep.results["max_abs_diff"] = worst;
  rep.results["tolerance"] = s.tolerance;
  if (!(worst < s.tolerance)) rep.fail("moe_attention_equivalence", strf("max_abs_diff %.3e >= %.3e", worst, s.tolerance));
  rep.out.table = strf("MoE vs attention rows over %zu instances\n  max_abs_diff %.3e (tolerance %.1e)\n",
                       s.instances, worst, s.tolerance);
}

PromptShapeConfig gradcheck_shape() { return PromptShapeConfig{2, 2, 3, 3, 2, 2, 4}; }

// Targets sit near the model output so the loss stays small and central
// difference roundoff stays well below the gradient entries.
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

double gradcheck_case(std::size_t mode, Rng rng, double step) {
  const PromptShapeConfig s = gradcheck_shape();
  std::vector<AttentionWeights> weights;
  for (std::size_t l = 0; l < s.blocks; ++l) weights.push_back(AttentionWeights::random(s.dim, 2, rng));
  if (mode == 0) {
    std::vector<Tensor> prompts;
    for (std::size_t l = 0; l < s.blocks; ++l) prompts.push_back(random_normal({s.prompts, s.dim}, 0.0, 1.0, rng));
    const ParamVector p = flatten_prompts(prompts);
    const auto samples = nearby_samples(
        s, rng, [&](const Tensor& x, std::size_t l) { return prompted_msa_forward(x, prompts[l], weights[l]); });
    return grad_check(VptPromptLoss(weights, samples, p.layout), p, step);
  }
  const Activation act = mode == 1 ? Activation::tanh : Activation::identity;
  VaptParams params = VaptParams::initialize(s, act, rng);
  ParamVector flat = flatten(params);
  rng.fill_normal(flat.values, 0.0, 0.5);
  params = unflatten(flat, params);
  const auto samples =
      nearby_samples(s, rng, [&](const Tensor& x, std::size_t l) { return vapt_forward(x, params, weights[l], l); });
  return grad_check(VaptLoss(params, weights, samples), flat, step);
}

void run_gradcheck(const ExperimentConfig& cfg, Report& rep) {
  const auto& g = cfg.gradcheck;
  const char* modes[] = {"vpt", "vapt-tanh", "vapt-identity"};
  const std::size_t tasks = 3 * g.seeds;
  std::vector<double> errors(tasks);
  const Rng base(cfg.seed, kGradcheckStream);
  parallel_for(tasks, cfg.jobs, [&](std::size_t t) { errors[t] = gradcheck_case(t / g.seeds, base.split(t), g.step); });

  rep.out.csv = "mode,seed,max_rel_error\n";
  rep.out.table = strf("finite-difference checks, step %.1e, tolerance %.1e\n", g.step, g.tolerance);
  ojson per_mode = ojson::object();
  for (std::size_t m = 0; m < 3; ++m) {
    double worst = 0.0;
    for (std::size_t k = 0; k < g.seeds; ++k) {
      const double e = errors[m * g.seeds + k];
      worst = std::max(worst, e);
      rep.out.csv += strf("%s,%zu,%s\n", modes[m], k, g17(e).c_str());
    }
    per_mode[modes[m]] = worst;
    rep.out.table += strf("  %-14s worst %.3e over %zu seeds\n", modes[m], worst, g.seeds);
    if (!(worst < g.tolerance)) rep.fail(std::string("gradient_check.") + modes[m], strf("%.3e >= %.1e", worst, g.tolerance));
  }
  rep.results["seeds"] = g.seeds;
  rep.results["max_rel_error"] = per_mode;
  rep.results["tolerance"] = g.tolerance;
}

// Trainable scalars counted from the flattened layout, LayerNorm excluded.
std::uint64_t enumerate_scalars(const PromptShapeConfig& s) {
  Rng rng(0);
  const ParamVector flat = flatten(VaptParams::initialize(s, Activation::tanh, rng));
  std::uint64_t n = 0;
  for (const auto& seg : flat.layout.segments()) {
    if (!seg.name.ends_with(".ln_gain") && !seg.name.ends_with(".ln_bias")) n += seg.size();
  }
  return n;
}

void run_params(const ExperimentConfig& cfg, Report& rep) {
  std::vector<PromptShapeConfig> grid{cfg.params};
  for (std::size_t l : {1, 2, 3})
    for (std::size_t np : {1, 5})
      for (auto [h, w] : {std::pair{4, 4}, std::pair{5, 3}})
        for (std::size_t k : {1, 3})
          for (auto [r, d] : {std::pair{1, 4}, std::pair{2, 8}})
            grid.push_back(PromptShapeConfig{l, np, std::size_t(h), std::size_t(w), k, std::size_t(r), std::size_t(d)});

  rep.out.csv = "blocks,prompts,height,width,kernel,rank,dim,vapt_params,enumerated,vapt_with_layer_norm,vpt_params\n";
  std::size_t mismatches = 0;
  for (const auto& s : grid) {
    const std::uint64_t count = vapt_param_count(s), listed = enumerate_scalars(s);
    if (count != listed) ++mismatches;
    rep.out.csv += strf("%zu,%zu,%zu,%zu,%zu,%zu,%zu,%llu,%llu,%llu,%llu\n", s.blocks, s.prompts, s.height, s.width,
                        s.kernel, s.rank, s.dim, static_cast<unsigned long long>(count),
                        static_cast<unsigned long long>(listed),
                        static_cast<unsigned long long>(vapt_param_count_with_layer_norm(s)),
                        static_cast<unsigned long long>(vpt_param_count(s)));
  }
  const auto& s = cfg.params;
  const std::uint64_t vapt = vapt_param_count(s), vpt = vpt_param_count(s);
  rep.results["vapt_params"] = vapt;
  rep.results["vapt_params_with_layer_norm"] = vapt_param_count_with_layer_norm(s);
  rep.results["vpt_params"] = vpt;
  rep.results["configs_checked"] = grid.size();
  rep.results["mismatches"] = mismatches;
  rep.out.table = strf("L=%zu Np=%zu H=%zu W=%zu K=%zu r=%zu d=%zu\n  VAPT %llu (with LayerNorm %llu)\n  VPT  %llu\n"
                       "  counter vs enumeration: %zu configs, %zu mismatches\n",
                       s.blocks, s.prompts, s.height, s.width, s.kernel, s.rank, s.dim,
                       static_cast<unsigned long long>(vapt),
                       static_cast<unsigned long long>(vapt_param_count_with_layer_norm(s)),
                       static_cast<unsigned long long>(vpt), grid.size(), mismatches);
  if (mismatches > 0) rep.fail("param_count_enumeration", strf("%zu of %zu configs disagree", mismatches, grid.size()));
}

ojson slope_json(const SlopeFit& f) {
  ojson j = ojson::object();
  j["slope"] = f.slope;
  j["intercept"] = f.intercept;
  j["r2"] = f.r2;
  j["slope_stderr"] = f.slope_stderr;
  j["slope_ci95"] = ojson::array({f.ci_low, f.ci_high});
  j["points_used"] = f.points_used;
  j["warnings"] = f.warnings;
  return j;
}

void run_rate(Suite track, const ExperimentConfig& cfg, Report& rep) {
  const RateSettings& s = cfg.rate;
  const RateResult res = rate_experiment(rate_config_for(cfg, track), cfg.seed);
  const std::string kind(loss_kind_name(res.kind));

  rep.out.csv = "experiment_id,n,replication,loss_kind,loss,fit_status,iterations,seed\n";
  for (const auto& r : res.rows) {
    rep.out.csv += strf("%s,%zu,%zu,%s,%s,%s,%zu,%llu\n", res.experiment_id.c_str(), r.n, r.replication, kind.c_str(),
                        g17(r.loss).c_str(), std::string(fit_status_name(r.status)).c_str(), r.iterations,
                        static_cast<unsigned long long>(r.seed));
  }

  ojson points = ojson::array();
  for (const auto& p : res.points) {
    ojson j = ojson::object();
    j["n"] = p.n;
    j["mean"] = p.mean;
    j["std"] = p.std;
    j["prompt_error_mean"] = p.prompt_error_mean;
    j["fits"] = p.fits;
    j["failures"] = p.failures;
    points.push_back(std::move(j));
  }
  rep.results["loss_kind"] = kind;
  rep.results["slope"] = res.loss_slope.slope;
  rep.results["loss_fit"] = slope_json(res.loss_slope);
  rep.results["prompt_error_fit"] = res.prompt_slope ? slope_json(*res.prompt_slope) : ojson(nullptr);
  rep.results["failures"] = res.failures;
  rep.results["total_fits"] = res.total;
  rep.results["valid"] = res.valid;
  rep.results["points"] = std::move(points);
  rep.results["true_measure"] = measure_json(res.truth.measure);

  std::string& t = rep.out.table;
  t = strf("%s: mean %s over %zu replications, seed %llu\n", res.experiment_id.c_str(), kind.c_str(), s.replications,
           static_cast<unsigned long long>(cfg.seed));
  t += strf("  %8s  %12s  %12s  %12s  %5s  %5s\n", "n", "mean", "std", "prompt_err", "fits", "fail");
  for (const auto& p : res.points) {
    t += strf("  %8zu  %12.5e  %12.5e  %12.5e  %5zu  %5zu\n", p.n, p.mean, p.std, p.prompt_error_mean, p.fits,
              p.failures);
  }
  const SlopeFit& f = res.loss_slope;
  t += strf("  slope %.4f  95%% CI [%.4f, %.4f]  r2 %.4f  window [%.2f, %.2f]\n", f.slope, f.ci_low, f.ci_high, f.r2,
            s.slope_window.first, s.slope_window.second);
  if (res.prompt_slope) t += strf("  prompt error slope %.4f\n", res.prompt_slope->slope);

  if (!res.valid) {
    rep.fail("failure_rate", strf("%zu of %zu fits failed (limit %.0f%%)", res.failures, res.total,
                                  100.0 * s.max_failure_rate));
  }
  if (s.noise_std == 0.0) {
    for (const auto& p : res.points) {
      if (!(p.mean < s.noiseless_tolerance)) {
        rep.fail("noiseless_consistency", strf("mean %s %.3e >= %.1e at n=%zu", kind.c_str(), p.mean,
                                               s.noiseless_tolerance, p.n));
      }
    }
    return;
  }
  if (f.points_used < 3) {
    rep.fail("slope_window", "fewer than 3 usable grid points");
  } else if (!(f.slope >= s.slope_window.first && f.slope <= s.slope_window.second)) {
    rep.fail("slope_window", strf("slope %.4f outside [%.2f, %.2f]", f.slope, s.slope_window.first,
                                  s.slope_window.second));
  }
  if (s.fitted_atoms > s.true_atoms) {
    for (std::size_t i = 1; i < res.points.size(); ++i) {
      if (!(res.points[i].mean < res.points[i - 1].mean)) {
        rep.fail("strictly_decreasing_mean", strf("mean at n=%zu (%.4e) is not below n=%zu (%.4e)", res.points[i].n,
                                                  res.points[i].mean, res.points[i - 1].n, res.points[i - 1].mean));
      }
    }
  } else if (track == Suite::rate_nonlinear) {
    if (!res.prompt_slope) {
      rep.fail("prompt_error_slope", "no slope could be fitted");
    } else if (!(res.prompt_slope->slope <= s.prompt_slope_max)) {
      rep.fail("prompt_error_slope", strf("slope %.4f above %.2f", res.prompt_slope->slope, s.prompt_slope_max));
    }
  }
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  f << text;
  if (!f) throw std::runtime_error("cannot write " + path.string());
}

void emit(const SuiteReport& r, OutputFormat fmt, std::ostream& out) {
  switch (fmt) {
    case OutputFormat::csv: out << r.csv; break;
    case OutputFormat::json: out << r.summary_json; break;
    case OutputFormat::table: out << r.table; break;
  }
}

}  // namespace

std::string_view suite_name(Suite s) noexcept {
  switch (s) {
    case Suite::equivalence: return "equivalence";
    case Suite::gradcheck: return "gradcheck";
    case Suite::params: return "params";
    case Suite::rate_nonlinear: return "rate-nonlinear";
    case Suite::rate_linear: return "rate-linear";
    case Suite::all: return "all";
  }
  return "all";
}

Suite parse_suite(std::string_view name) {
  for (Suite s : {Suite::equivalence, Suite::gradcheck, Suite::params, Suite::rate_nonlinear, Suite::rate_linear,
                  Suite::all}) {
    if (suite_name(s) == name) return s;
  }
  throw std::invalid_argument("unknown suite \"" + std::string(name) +
                              "\" (expected equivalence, gradcheck, params, rate-nonlinear, rate-linear or all)");
}

std::string_view format_name(OutputFormat f) noexcept {
  switch (f) {
    case OutputFormat::csv: return "csv";
    case OutputFormat::json: return "json";
    case OutputFormat::table: return "table";
  }
  return "table";
}

OutputFormat parse_format(std::string_view name) {
  for (OutputFormat f : {OutputFormat::csv, OutputFormat::json, OutputFormat::table}) {
    if (format_name(f) == name) return f;
  }
  throw std::invalid_argument("unknown format \"" + std::string(name) + "\" (expected csv, json or table)");
}

ConfigError::ConfigError(std::string source, std::vector<ConfigIssue> issues)
    : std::runtime_error(format_issues(source, issues)), issues_(std::move(issues)) {}

std::vector<ConfigIssue> validate_config(const ExperimentConfig& cfg) {
  std::vector<ConfigIssue> out;
  auto bad = [&](std::string key, std::string msg) { out.push_back({0, std::move(key), std::move(msg)}); };
  if (cfg.jobs < 1) bad("jobs", "must be at least 1");
  if (cfg.output_dir.empty()) bad("output_dir", "must not be empty");

  const auto& e = cfg.equivalence;
  if (e.instances < 1) bad("equivalence.instances", "must be at least 1");
  if (e.max_tokens < 1) bad("equivalence.max_tokens", "must be at least 1");
  if (e.max_dim < 1) bad("equivalence.max_dim", "must be at least 1");
  if (!(e.tolerance > 0.0)) bad("equivalence.tolerance", "must be positive");

  const auto& g = cfg.gradcheck;
  if (g.seeds < 1) bad("gradcheck.seeds", "must be at least 1");
  if (!(g.step > 0.0)) bad("gradcheck.step", "must be positive");
  if (!(g.tolerance > 0.0)) bad("gradcheck.tolerance", "must be positive");

  try {
    cfg.params.validate();
    if (cfg.params.rank >= cfg.params.dim) bad("params.rank", "must be below params.dim");
  } catch (const std::exception& ex) {
    bad("params", ex.what());
  }

  const auto& r = cfg.rate;
  if (r.sample_sizes.size() < 3) bad("rate.sample_sizes", "needs at least 3 grid points");
  for (std::size_t i = 0; i < r.sample_sizes.size(); ++i) {
    if (r.sample_sizes[i] < 1) bad("rate.sample_sizes", "entries must be positive");
    if (i > 0 && r.sample_sizes[i] <= r.sample_sizes[i - 1]) bad("rate.sample_sizes", "must be strictly increasing");
  }
  if (r.replications < 10) bad("rate.replications", "must be at least 10");
  if (!(r.init_perturbation >= 0.0)) bad("rate.init_perturbation", "must be non-negative");
  if (!(r.box_bound > 0.0)) bad("rate.box_bound", "must be positive");
  if (r.max_iterations < 1) bad("rate.max_iterations", "must be at least 1");
  if (r.test_inputs < 1) bad("rate.test_inputs", "must be at least 1");
  if (!(r.max_failure_rate >= 0.0 && r.max_failure_rate <= 1.0)) bad("rate.max_failure_rate", "must lie in [0, 1]");
  if (!(r.slope_window.first < r.slope_window.second)) bad("rate.slope_window", "low must be below high");
  if (!(r.noiseless_tolerance > 0.0)) bad("rate.noiseless_tolerance", "must be positive");
  try {
    RegressionConfig reg = rate_config_for(cfg, Suite::rate_nonlinear).regression;
    reg.validate();
  } catch (const std::exception& ex) {
    bad("rate", ex.what());
  }
  if (r.true_measure) {
    const MixingMeasure& m = *r.true_measure;
    try {
      m.validate();
      if (m.size() != r.true_atoms) bad("rate.true_measure", "atom count must equal rate.true_atoms");
      if (m.dim() != r.input_dim || m.rank() != r.rank) {
        bad("rate.true_measure", "w1 must be rank x input_dim and w2 input_dim x rank");
      }
    } catch (const std::exception& ex) {
      bad("rate.true_measure", ex.what());
    }
  }
  return out;
}

ExperimentConfig parse_config_text(std::string_view text, std::string_view source) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    const std::size_t line =
        1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + std::min(e.byte, text.size()), '\n'));
    throw ConfigError(std::string(source), {{line, "", e.what()}});
  }
  ExperimentConfig cfg;
  Reader rd(text);
  read_config(rd, root, cfg);
  if (rd.issues.empty()) {
    for (auto& i : validate_config(cfg)) {
      i.line = line_of(text, split_dotted(i.key));
      rd.issues.push_back(std::move(i));
    }
  }
  if (!rd.issues.empty()) throw ConfigError(std::string(source), std::move(rd.issues));
  return cfg;
}

ExperimentConfig parse_config(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError(path.string(), {{0, "", "cannot open file"}});
  std::ostringstream buf;
  buf << f.rdbuf();
  return parse_config_text(buf.str(), path.string());
}

std::string emit_config(const ExperimentConfig& cfg) { return config_json(cfg).dump(2) + "\n"; }

RateConfig rate_config_for(const ExperimentConfig& cfg, Suite track) {
  const RateSettings& s = cfg.rate;
  RateConfig rc;
  rc.experiment_id = std::string(suite_name(track));
  RegressionConfig& reg = rc.regression;
  reg.input_dim = s.input_dim;
  reg.output_dim = s.output_dim;
  reg.rank = s.rank;
  reg.pretrained = s.pretrained_experts;
  reg.true_atoms = s.true_atoms;
  reg.fitted_atoms = s.fitted_atoms;
  reg.noise_std = s.noise_std;
  reg.activation = track == Suite::rate_linear ? Activation::identity : Activation::tanh;
  rc.sample_sizes = s.sample_sizes;
  rc.replications = s.replications;
  rc.init_perturbation = s.init_perturbation;
  rc.optimizer.box_bound = s.box_bound;
  rc.optimizer.max_iterations = s.max_iterations;
  rc.true_measure = s.true_measure;
  rc.test_inputs = s.test_inputs;
  rc.jobs = cfg.jobs;
  rc.max_failure_rate = s.max_failure_rate;
  return rc;
}

SuiteReport run_single_suite(Suite suite, const ExperimentConfig& cfg) {
  if (suite == Suite::all) throw std::invalid_argument("run_single_suite: pick one suite");
  const auto start = std::chrono::steady_clock::now();
  Report rep;
  rep.out.name = std::string(suite_name(suite));
  try {
    switch (suite) {
      case Suite::equivalence: run_equivalence(cfg, rep); break;
      case Suite::gradcheck: run_gradcheck(cfg, rep); break;
      case Suite::params: run_params(cfg, rep); break;
      case Suite::rate_nonlinear:
      case Suite::rate_linear: run_rate(suite, cfg, rep); break;
      case Suite::all: break;
    }
  } catch (const std::exception& e) {
    rep.fail("exception", e.what());
  }
  rep.out.passed = rep.out.failures.empty();
  const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  ojson summary = ojson::object();
  summary["suite"] = rep.out.name;
  summary["passed"] = rep.out.passed;
  summary["failures"] = rep.out.failures;
  summary["elapsed_seconds"] = elapsed;
  summary["results"] = std::move(rep.results);
  summary["config"] = config_json(cfg);
  rep.out.summary_json = summary.dump(2) + "\n";

  rep.out.table = "== " + rep.out.name + " ==\n" + rep.out.table;
  for (const auto& f : rep.out.failures) rep.out.table += "  FAILED " + f + "\n";
  rep.out.table += rep.out.passed ? "  PASS\n" : "  FAIL\n";
  return std::move(rep.out);
}

int run_suite(const ExperimentConfig& cfg, std::ostream& out, std::ostream& err) {
  if (auto issues = validate_config(cfg); !issues.empty()) {
    err << ConfigError("config", std::move(issues)).what() << '\n';
    return 2;
  }
  const std::filesystem::path dir(cfg.output_dir);
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) {
    err << "output_dir: cannot create " << dir << ": " << ec.message() << '\n';
    return 2;
  }

  std::vector<Suite> suites{cfg.suite};
  if (cfg.suite == Suite::all) {
    suites = {Suite::equivalence, Suite::gradcheck, Suite::params, Suite::rate_nonlinear, Suite::rate_linear};
  }
  bool passed = true;
  ojson overview = ojson::array();
  std::string tables;
  for (Suite s : suites) {
    const SuiteReport r = run_single_suite(s, cfg);
    write_file(dir / (r.name + ".csv"), r.csv);
    write_file(dir / (r.name + "_summary.json"), r.summary_json);
    write_file(dir / (r.name + ".txt"), r.table);
    emit(r, cfg.format, out);
    out.flush();
    for (const auto& f : r.failures) err << r.name << ": " << f << '\n';
    passed = passed && r.passed;
    tables += r.table;
    ojson o = ojson::object();
    o["suite"] = r.name;
    o["passed"] = r.passed;
    o["failures"] = r.failures;
    overview.push_back(std::move(o));
  }
  if (cfg.suite == Suite::all) {
    ojson summary = ojson::object();
    summary["suite"] = "all";
    summary["passed"] = passed;
    summary["suites"] = std::move(overview);
    summary["config"] = config_json(cfg);
    write_file(dir / "all_summary.json", summary.dump(2) + "\n");
    write_file(dir / "all.txt", tables);
  }
  return passed ? 0 : 1;
}

}  // namespace vapt
