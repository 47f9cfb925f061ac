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

#include <algorithm>
#include <cmath>
#include <limits>

#include "vapt/estimation.hpp"
#include "vapt/simd.hpp"

namespace vapt {

using Column = std::vector<double>;

ParamVector flatten(const MixingMeasure& g) {
  g.validate();
  ParamVector p;
  p.layout.add("b", {g.size()});
  p.layout.add("w1", {g.size(), g.rank(), g.dim()});
  p.layout.add("w2", g.w2.shape());
  for (const MixingAtom& a : g.atoms) p.values.push_back(a.b);
  for (const MixingAtom& a : g.atoms) p.values.insert(p.values.end(), a.w1.data().begin(), a.w1.data().end());
  p.values.insert(p.values.end(), g.w2.data().begin(), g.w2.data().end());
  return p;
}

MixingMeasure unflatten_measure(std::span<const double> p, std::size_t atoms, std::size_t rank, std::size_t dim) {
  const std::size_t block = rank * dim;
  if (p.size() != atoms + atoms * block + block) throw ShapeError("unflatten_measure: length does not match l, r, d");
  MixingMeasure g;
  for (std::size_t i = 0; i < atoms; ++i) {
    const auto w = p.subspan(atoms + i * block, block);
    g.atoms.push_back({p[i], Tensor({rank, dim}, std::vector<double>(w.begin(), w.end()))});
  }
  const auto w2 = p.subspan(atoms + atoms * block, block);
  g.w2 = Tensor({dim, rank}, std::vector<double>(w2.begin(), w2.end()));
  return g;
}

// Batched objective ---------------------------------------------------------
//
// Every per-sample quantity is stored as a column of length n so the inner
// loops run through the SIMD kernels.

RegressionObjective::RegressionObjective(const Dataset& data, PretrainedExpertSpec pre, RegressionConfig cfg,
                                         std::size_t atoms)
    : pre_(std::move(pre)), cfg_(std::move(cfg)), atoms_(atoms) {
  cfg_.validate();
  pre_.validate(cfg_.input_dim, cfg_.output_dim);
  const std::size_t n = data.size(), d = cfg_.input_dim, d_out = cfg_.output_dim;
  if (data.x.shape() != Shape{n, d} || data.y.shape() != Shape{n, d_out}) {
    throw ShapeError("regression objective: dataset shape does not match the config");
  }
  x_cols_.assign(d, Column(n));
  y_cols_.assign(d_out, Column(n));
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t c = 0; c < d; ++c) x_cols_[c][s] = data.x.at(s, c);
    for (std::size_t k = 0; k < d_out; ++k) y_cols_[k][s] = data.y.at(s, k);
  }
  const Tensor& b = cfg_.b();
  bt_x_.assign(d, Column(n, 0.0));
  for (std::size_t c = 0; c < d; ++c) {
    for (std::size_t e = 0; e < d; ++e) simd::axpy(b.at(e, c), x_cols_[e], bt_x_[c]);
  }
  // Pre-trained components never change during a fit.
  for (std::size_t j = 0; j < pre_.size(); ++j) {
    Column score(n, pre_.a0_bias[j]);
    for (std::size_t c = 0; c < d; ++c) {
      Column ax(n, 0.0);
      for (std::size_t e = 0; e < d; ++e) simd::axpy(pre_.a0[j].at(c, e), x_cols_[e], ax);
      simd::mul_add(x_cols_[c], ax, score);
    }
    pre_scores_.push_back(std::move(score));
    std::vector<Column> out(d_out, Column(n, 0.0));
    for (std::size_t k = 0; k < d_out; ++k) {
      for (std::size_t c = 0; c < d; ++c) simd::axpy(pre_.eta0[j].at(k, c), x_cols_[c], out[k]);
    }
    pre_outputs_.push_back(std::move(out));
  }
}

std::size_t RegressionObjective::dimension() const {
  const std::size_t block = cfg_.rank * cfg_.input_dim;
  return atoms_ + atoms_ * block + block;
}

double RegressionObjective::value(std::span<const double> p) const { return evaluate(p, nullptr); }

double RegressionObjective::value_and_gradient(std::span<const double> p, std::span<double> g) const {
  if (g.size() != dimension()) throw ShapeError("regression objective: gradient length mismatch");
  return evaluate(p, g.data());
}

double RegressionObjective::evaluate(std::span<const double> p, double* gradient) const {
  if (p.size() != dimension()) throw ShapeError("regression objective: parameter length mismatch");
  const std::size_t n = x_cols_.empty() ? 0 : x_cols_[0].size();
  const std::size_t d = cfg_.input_dim, d_out = cfg_.output_dim, r = cfg_.rank, L = atoms_, N = pre_.size();
  const std::size_t m_total = N + L;
  const double* b = p.data();
  const double* w1 = p.data() + L;
  const double* w2 = w1 + L * r * d;
  const Tensor& cmat = cfg_.c();
  const Activation act = cfg_.activation;
  const simd::Kernels& k = simd::active();

  // Samples are processed in fixed-size chunks so the scratch stays in cache;
  // the chunk size is constant, which keeps the summation order deterministic.
  constexpr std::size_t kChunk = 512;
  std::vector<double> scratch((2 * L * r + L * d + m_total + L * d_out + d_out + 6) * kChunk);
  double* cursor = scratch.data();
  auto take = [&](std::size_t count) {
    double* out = cursor;
    cursor += count * kChunk;
    return out;
  };
  double* hidden = take(L * r);    // [i*r+q]
  double* act_out = take(L * r);   // [i*r+q]
  double* prompt = take(L * d);    // [i*d+c]
  double* gates = take(m_total);   // [m]
  double* outs = take(L * d_out);  // [i*d_out+kk]
  double* resid = take(d_out);     // [kk]
  double* shift = take(1);
  double* total = take(1);
  double* fe = take(1);
  double* dscore = take(1);
  double* dp = take(1);
  double* tmp = take(1);
  std::vector<double> dz_all(r * kChunk);

  double* gb = gradient;
  double* gw1 = gradient ? gradient + L : nullptr;
  double* gw2 = gradient ? gw1 + L * r * d : nullptr;
  if (gradient) std::fill(gradient, gradient + dimension(), 0.0);

  double loss = 0.0;
  for (std::size_t start = 0; start < n; start += kChunk) {
    const std::size_t m = std::min(kChunk, n - start);
    auto col = [&](double* base, std::size_t idx) { return base + idx * kChunk; };
    auto x = [&](std::size_t c) { return x_cols_[c].data() + start; };

    // Forward.
    for (std::size_t j = 0; j < N; ++j) std::copy_n(pre_scores_[j].data() + start, m, col(gates, j));
    for (std::size_t i = 0; i < L; ++i) {
      for (std::size_t q = 0; q < r; ++q) {
        double* h = col(hidden, i * r + q);
        std::fill_n(h, m, 0.0);
        for (std::size_t c = 0; c < d; ++c) k.axpy(w1[(i * r + q) * d + c], x(c), h, m);
        double* z = col(act_out, i * r + q);
        if (act == Activation::tanh) {
          k.vtanh(h, z, m);
        } else {
          for (std::size_t s = 0; s < m; ++s) z[s] = activate(act, h[s]);
        }
      }
      double* score = col(gates, N + i);
      std::fill_n(score, m, b[i]);
      for (std::size_t kk = 0; kk < d_out; ++kk) std::fill_n(col(outs, i * d_out + kk), m, 0.0);
      for (std::size_t c = 0; c < d; ++c) {
        double* pc = col(prompt, i * d + c);
        std::fill_n(pc, m, 0.0);
        for (std::size_t q = 0; q < r; ++q) k.axpy(w2[c * r + q], col(act_out, i * r + q), pc, m);
        k.mul_add(pc, bt_x_[c].data() + start, score, m);
        for (std::size_t kk = 0; kk < d_out; ++kk) k.axpy(cmat.at(kk, c), pc, col(outs, i * d_out + kk), m);
      }
    }

    // Softmax over components, shifted by the per-sample maximum.
    std::copy_n(col(gates, 0), m, shift);
    for (std::size_t c = 1; c < m_total; ++c) k.vmax(col(gates, c), shift, m);
    std::fill_n(total, m, 0.0);
    for (std::size_t c = 0; c < m_total; ++c) {
      double* g = col(gates, c);
      for (std::size_t s = 0; s < m; ++s) g[s] -= shift[s];
      k.vexp(g, g, m);
      k.axpy(1.0, g, total, m);
    }
    for (std::size_t s = 0; s < m; ++s) total[s] = 1.0 / total[s];
    for (std::size_t c = 0; c < m_total; ++c) {
      double* g = col(gates, c);
      for (std::size_t s = 0; s < m; ++s) g[s] *= total[s];
    }
    auto output_of = [&](std::size_t c, std::size_t kk) -> const double* {
      return c < N ? pre_outputs_[c][kk].data() + start : col(outs, (c - N) * d_out + kk);
    };

    if (gradient) std::fill_n(fe, m, 0.0);
    for (std::size_t kk = 0; kk < d_out; ++kk) {
      double* f = tmp;
      std::fill_n(f, m, 0.0);
      for (std::size_t c = 0; c < m_total; ++c) k.mul_add(col(gates, c), output_of(c, kk), f, m);
      double* e = col(resid, kk);
      const double* y = y_cols_[kk].data() + start;
      for (std::size_t s = 0; s < m; ++s) e[s] = y[s] - f[s];
      loss += k.dot(e, e, m);
      if (gradient) {
        // e becomes dLoss/df = -2 (Y - f); fe accumulates f . dLoss/df.
        for (std::size_t s = 0; s < m; ++s) {
          e[s] *= -2.0;
          fe[s] += f[s] * e[s];
        }
      }
    }
    if (!gradient) continue;

    for (std::size_t i = 0; i < L; ++i) {
      const double* gate = col(gates, N + i);
      // dscore = gate * (out . e - f . e)
      std::fill_n(tmp, m, 0.0);
      for (std::size_t kk = 0; kk < d_out; ++kk) k.mul_add(col(outs, i * d_out + kk), col(resid, kk), tmp, m);
      for (std::size_t s = 0; s < m; ++s) dscore[s] = gate[s] * (tmp[s] - fe[s]);
      gb[i] += k.sum(dscore, m);

      std::fill(dz_all.begin(), dz_all.end(), 0.0);
      for (std::size_t c = 0; c < d; ++c) {
        // dp_c = gate * sum_k C[k,c] e_k + dscore * (B^T X)_c
        std::fill_n(tmp, m, 0.0);
        for (std::size_t kk = 0; kk < d_out; ++kk) k.axpy(cmat.at(kk, c), col(resid, kk), tmp, m);
        std::fill_n(dp, m, 0.0);
        k.mul_add(gate, tmp, dp, m);
        k.mul_add(dscore, bt_x_[c].data() + start, dp, m);
        for (std::size_t q = 0; q < r; ++q) {
          gw2[c * r + q] += k.dot(dp, col(act_out, i * r + q), m);
          k.axpy(w2[c * r + q], dp, dz_all.data() + q * kChunk, m);
        }
      }
      for (std::size_t q = 0; q < r; ++q) {
        double* dh = dz_all.data() + q * kChunk;
        if (act == Activation::tanh) {
          const double* z = col(act_out, i * r + q);
          for (std::size_t s = 0; s < m; ++s) dh[s] *= 1.0 - z[s] * z[s];
        } else if (act != Activation::identity) {
          const double* h = col(hidden, i * r + q);
          for (std::size_t s = 0; s < m; ++s) dh[s] *= activation_derivative(act, h[s]);
        }
        for (std::size_t c = 0; c < d; ++c) gw1[(i * r + q) * d + c] += k.dot(dh, x(c), m);
      }
    }
  }
  return loss;
}

// Optimizer -----------------------------------------------------------------

std::string_view fit_status_name(FitStatus s) noexcept {
  switch (s) {
    case FitStatus::converged: return "converged";
    case FitStatus::max_iterations: return "max_iterations";
    case FitStatus::failed: return "failed";
  }
  return "failed";
}

void project_to_box(std::span<double> p, double bound) noexcept {
  for (double& v : p) v = std::clamp(v, -bound, bound);
}

namespace {

struct Run {
  bool ok = false;
  std::vector<double> x;
  double f = 0.0;
  std::size_t iterations = 0;
  FitStatus status = FitStatus::failed;
  std::vector<double> trace;
  std::string why;
};

Run rprop(const Objective& loss, std::vector<double> x, const OptimizerConfig& opt) {
  Run run;
  const std::size_t dim = x.size();
  project_to_box(x, opt.box_bound);
  std::vector<double> g(dim), g_prev(dim, 0.0), g_use(dim), step(dim, opt.initial_step), x_new(dim), g_new(dim);
  double f = loss.value_and_gradient(x, g);
  if (!std::isfinite(f)) {
    run.why = "objective is not finite at the starting point";
    return run;
  }
  run.trace.push_back(f);
  run.status = FitStatus::max_iterations;
  while (run.iterations < opt.max_iterations) {
    if (f == 0.0) {
      run.status = FitStatus::converged;
      break;
    }
    ++run.iterations;
    for (std::size_t i = 0; i < dim; ++i) {
      g_use[i] = g[i];
      const double s = g_prev[i] * g[i];
      if (s > 0.0) {
        step[i] = std::min(step[i] * 1.2, opt.max_step);
      } else if (s < 0.0) {
        step[i] = std::max(step[i] * 0.5, opt.min_step);
        g_use[i] = 0.0;
      }
      x_new[i] = g_use[i] > 0.0 ? x[i] - step[i] : g_use[i] < 0.0 ? x[i] + step[i] : x[i];
    }
    project_to_box(x_new, opt.box_bound);
    const double f_new = loss.value_and_gradient(x_new, g_new);
    if (!std::isfinite(f_new)) {
      run.why = "objective became non-finite at iteration " + std::to_string(run.iterations);
      return run;
    }
    if (f_new <= f) {
      x.swap(x_new);
      g_prev = g_use;
      g.swap(g_new);
      f = f_new;
      run.trace.push_back(f);
      const std::size_t t = run.trace.size();
      if (t > opt.stall_window) {
        const double before = run.trace[t - 1 - opt.stall_window];
        if (before - f <= opt.stall_tolerance * std::abs(before)) {
          run.status = FitStatus::converged;
          break;
        }
      }
    } else {
      for (double& s : step) s = std::max(s * 0.5, opt.min_step);
      std::fill(g_prev.begin(), g_prev.end(), 0.0);
    }
    if (*std::max_element(step.begin(), step.end()) <= opt.min_step) {
      run.status = FitStatus::converged;
      break;
    }
  }
  run.ok = true;
  run.x = std::move(x);
  run.f = f;
  return run;
}

}  // namespace

FitResult minimize_boxed(const Objective& loss, std::vector<double> start, const OptimizerConfig& opt, Rng& rng) {
  if (start.size() != loss.dimension()) throw ShapeError("minimize: start length does not match the objective");
  FitResult result;
  std::size_t total_iterations = 0;
  for (std::size_t attempt = 0; attempt <= opt.restarts; ++attempt) {
    std::vector<double> x = start;
    if (attempt > 0) {
      for (double& v : x) v += opt.restart_jitter * rng.normal();
    }
    Run run = rprop(loss, std::move(x), opt);
    total_iterations += run.iterations;
    if (run.ok) {
      result.objective = run.f;
      result.iterations = total_iterations;
      result.restarts = attempt;
      result.status = run.status;
      result.trace = std::move(run.trace);
      result.parameters = std::move(run.x);
      result.diagnostics.clear();
      return result;
    }
    result.diagnostics += "start " + std::to_string(attempt) + ": " + run.why + "\n";
  }
  result.iterations = total_iterations;
  result.restarts = opt.restarts;
  result.status = FitStatus::failed;
  return result;
}

namespace {

FitResult finish(FitResult raw, std::size_t atoms, const RegressionConfig& cfg) {
  if (raw.status == FitStatus::failed) return raw;
  raw.measure = unflatten_measure(raw.parameters, atoms, cfg.rank, cfg.input_dim);
  return raw;
}

}  // namespace

FitResult fit_least_squares(const Dataset& data, const PretrainedExpertSpec& pre, const RegressionConfig& cfg,
                            const MixingMeasure& init, const OptimizerConfig& opt, Rng& rng) {
  RegressionConfig c = cfg;
  c.validate();
  init.validate();
  if (init.dim() != c.input_dim || init.rank() != c.rank) throw ShapeError("fit: init does not match d and r");
  const RegressionObjective objective(data, pre, c, init.size());
  return finish(minimize_boxed(objective, flatten(init).values, opt, rng), init.size(), c);
}

FitResult fit_multistart(const Dataset& data, const PretrainedExpertSpec& pre, const RegressionConfig& cfg,
                         std::size_t starts, const OptimizerConfig& opt, Rng& rng) {
  RegressionConfig c = cfg;
  c.validate();
  const RegressionObjective objective(data, pre, c, c.fitted_atoms);
  FitResult best;
  best.objective = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < std::max<std::size_t>(starts, 1); ++k) {
    std::vector<double> x(objective.dimension());
    rng.fill_uniform(x, -opt.box_bound, opt.box_bound);
    FitResult r = minimize_boxed(objective, std::move(x), opt, rng);
    if (r.status != FitStatus::failed && r.objective < best.objective) best = std::move(r);
  }
  return finish(std::move(best), c.fitted_atoms, c);
}

}  // namespace vapt
