#pragma once

#include "chivi/gradients.hpp"

#include <chrono>
#include <deque>
#include <functional>
#include <string>

namespace chivi {

enum class ScheduleKind { robbins_monro, adaptive };

struct Schedule {
  ScheduleKind kind = ScheduleKind::adaptive;
  double base_rate = 0.1;  // rho_0
  double decay = 1.0;      // kappa, robbins_monro only
  // adaptive (bias-corrected first/second moments)
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  void validate() const {
    require(base_rate > 0, "Schedule: base_rate must be positive");
    if (kind == ScheduleKind::robbins_monro)
      require(decay > 0.5 && decay <= 1.0,
              "Schedule: robbins_monro decay must lie in (0.5, 1]");
  }
};

// rho_t. For the adaptive schedule this is the base rate; the per-coordinate
// scaling lives in AdamState.
inline double step_size(const Schedule& schedule, int t) {
  schedule.validate();
  require(t >= 0, "step_size: t must be >= 0");
  if (schedule.kind == ScheduleKind::robbins_monro)
    return schedule.base_rate / std::pow(1.0 + t, schedule.decay);
  return schedule.base_rate;
}

struct AdamState {
  Vec m, v;
  int t = 0;

  void init(int dim) {
    m = Vec::Zero(dim);
    v = Vec::Zero(dim);
    t = 0;
  }

  // Returns the update for a descent step on gradient g.
  Vec update(const Vec& g, const Schedule& s) {
    ++t;
    m = s.beta1 * m + (1.0 - s.beta1) * g;
    v = s.beta2 * v + (1.0 - s.beta2) * g.cwiseProduct(g);
    const double bc1 = 1.0 - std::pow(s.beta1, t);
    const double bc2 = 1.0 - std::pow(s.beta2, t);
    return (s.base_rate * (m / bc1).array() /
            ((v / bc2).array().sqrt() + s.epsilon))
        .matrix();
  }
};

enum class InitKind { zero, seeded_random };

struct ConvergenceConfig {
  int window = 20;     // recorded monitor points per window
  double tol = 1e-4;   // relative change of window means
};

struct OptimizerConfig {
  double n = 2.0;                 // divergence order
  int samples_per_step = 32;      // S / B
  int minibatch = 0;              // 0 = full batch
  int max_iters = 2000;
  std::uint64_t seed = 0;
  EstimatorTag estimator = EstimatorTag::reparam;
  Schedule schedule;
  InitKind init = InitKind::zero;
  double init_std = 0.1;
  ConvergenceConfig convergence;
  int trace_every = 10;
  int monitor_samples = 1000;
  // Final parameters are the average of iterates over the trailing fraction
  // of the run; 0 disables and returns the last iterate.
  double average_tail = 0.5;
  // divergence guards
  double max_grad_norm = 1e10;
  double max_param_abs = 1e6;
  // Skip CUBO updates whose batch weight ESS falls below this; a degenerate
  // batch is a single draw in disguise and stepping on it random-walks the
  // parameters. 0 disables the gate. ELBO steps are never gated.
  double min_step_ess = 1.5;
  // log-scale clamp, prevents degenerate collapse / blowup
  double log_scale_min = -10.0;
  double log_scale_max = 5.0;

  void validate(int data_count) const {
    require(n > 1.0 && n <= 4.0, "OptimizerConfig: n must lie in (1, 4]");
    require(samples_per_step >= 1, "OptimizerConfig: samples_per_step >= 1");
    require(minibatch >= 0 && minibatch <= data_count,
            "OptimizerConfig: minibatch must lie in [0, N]");
    require(max_iters >= 0, "OptimizerConfig: max_iters >= 0");
    require(trace_every >= 1, "OptimizerConfig: trace_every >= 1");
    require(monitor_samples >= 1, "OptimizerConfig: monitor_samples >= 1");
    require(average_tail >= 0.0 && average_tail <= 1.0,
            "OptimizerConfig: average_tail in [0, 1]");
    require(min_step_ess >= 0.0, "OptimizerConfig: min_step_ess >= 0");
    require(convergence.window >= 1, "OptimizerConfig: window >= 1");
    schedule.validate();
  }
};

struct TraceRow {
  int iteration = 0;
  double elbo = 0.0;
  double cubo = 0.0;
  double n = 0.0;
  int samples = 0;
  double elbo_se = 0.0;
  double cubo_se = 0.0;
  double grad_norm = 0.0;
  double log_scale_correction = 0.0;
};

struct FitResult {
  GaussianParams params;
  std::vector<TraceRow> trace;
  bool converged = false;
  int iterations_run = 0;
  double wall_ms = 0.0;
  std::string abort_reason;  // non-empty on divergence-guard abort
  int clamp_events = 0;
  int skipped_steps = 0;  // CUBO steps dropped by the weight-ESS gate
};

struct FitHooks {
  int checkpoint_every = 0;
  std::function<void(int, const GaussianParams&)> checkpoint;
};

namespace detail {

enum class FitObjective { cubo_min, elbo_max };

inline FitResult run_fit(const Model& model, GaussianParams params,
                         const OptimizerConfig& cfg, FitObjective objective,
                         const FitHooks& hooks = {}) {
  cfg.validate(model.data_count);
  params.validate();
  require(params.dim() == model.latent_dim, "run_fit: dimension mismatch");
  const auto t_start = std::chrono::steady_clock::now();

  NoiseStream init_rng(cfg.seed, 0);
  NoiseStream opt_rng(cfg.seed, 1);
  NoiseStream sub_rng(cfg.seed, 2);
  NoiseStream monitor_rng(cfg.seed, 3);

  if (cfg.init == InitKind::seeded_random)
    params = GaussianParams::perturbed_init(model.latent_dim, init_rng,
                                            cfg.init_std);

  FitResult result;
  AdamState adam_mean, adam_ell;
  adam_mean.init(model.latent_dim);
  adam_ell.init(model.latent_dim);

  const bool use_subsample =
      cfg.minibatch >= 1 && cfg.minibatch < model.data_count;

  Vec avg_mean = Vec::Zero(model.latent_dim);
  Vec avg_ell = Vec::Zero(model.latent_dim);
  int avg_count = 0;
  const int avg_start =
      cfg.average_tail > 0
          ? static_cast<int>((1.0 - cfg.average_tail) * cfg.max_iters)
          : cfg.max_iters;

  std::deque<double> monitor_metric;
  double last_grad_norm = 0.0;
  double last_scale_corr = 0.0;

  auto record_monitor = [&](int iteration, const GaussianParams& p) {
    const auto lw =
        compute_log_weights(model, p, cfg.monitor_samples, monitor_rng);
    const auto eb = elbo_estimate(lw);
    const auto cb = cubo_estimate(lw, cfg.n);
    TraceRow row;
    row.iteration = iteration;
    row.elbo = eb.value;
    row.cubo = cb.value;
    row.n = cfg.n;
    row.samples = cfg.monitor_samples;
    row.elbo_se = eb.std_error;
    row.cubo_se = cb.std_error;
    row.grad_norm = last_grad_norm;
    row.log_scale_correction = last_scale_corr;
    result.trace.push_back(row);
    monitor_metric.push_back(objective == FitObjective::cubo_min ? cb.value
                                                                 : eb.value);
  };

  auto window_converged = [&]() {
    const int w = cfg.convergence.window;
    if (static_cast<int>(monitor_metric.size()) < 2 * w) return false;
    double recent = 0.0, previous = 0.0;
    const auto sz = monitor_metric.size();
    for (int i = 0; i < w; ++i) {
      recent += monitor_metric[sz - 1 - i];
      previous += monitor_metric[sz - 1 - w - i];
    }
    recent /= w;
    previous /= w;
    const double denom = std::max(1.0, std::abs(previous));
    return std::abs(recent - previous) / denom < cfg.convergence.tol;
  };

  int t = 0;
  for (; t < cfg.max_iters; ++t) {
    Subsample idx;
    const Subsample* sub = nullptr;
    if (use_subsample) {
      idx = sub_rng.subsample(model.data_count, cfg.minibatch);
      sub = &idx;
    }

    GradientEstimate g;
    try {
      switch (objective == FitObjective::elbo_max ? EstimatorTag::elbo_reparam
                                                  : cfg.estimator) {
        case EstimatorTag::reparam:
          g = reparam_grad(model, params, cfg.n, cfg.samples_per_step, opt_rng,
                           sub);
          break;
        case EstimatorTag::score:
          g = score_grad(model, params, cfg.n, cfg.samples_per_step, opt_rng,
                         sub);
          break;
        case EstimatorTag::elbo_reparam:
          g = elbo_reparam_grad(model, params, cfg.samples_per_step, opt_rng,
                                sub);
          break;
      }
    } catch (const std::exception& e) {
      result.abort_reason = std::string("gradient evaluation failed: ") + e.what();
      break;
    }

    last_grad_norm = g.norm();
    last_scale_corr = g.log_scale_correction;
    if (!(last_grad_norm <= cfg.max_grad_norm)) {
      result.abort_reason = "gradient norm " + std::to_string(last_grad_norm) +
                            " exceeds configured bound";
      break;
    }

    const bool gated = objective == FitObjective::cubo_min &&
                       cfg.min_step_ess > 0.0 && g.ess < cfg.min_step_ess;
    if (gated) {
      ++result.skipped_steps;
    } else {
      // descent on the CUBO estimators, ascent on the ELBO
      const double sign = objective == FitObjective::elbo_max ? -1.0 : 1.0;
      if (cfg.schedule.kind == ScheduleKind::adaptive) {
        params.mean -= adam_mean.update(sign * g.d_mean, cfg.schedule);
        params.log_scale -= adam_ell.update(sign * g.d_log_scale, cfg.schedule);
      } else {
        const double rho = step_size(cfg.schedule, t);
        params.mean -= rho * sign * g.d_mean;
        params.log_scale -= rho * sign * g.d_log_scale;
      }

      for (int i = 0; i < params.log_scale.size(); ++i) {
        if (params.log_scale[i] < cfg.log_scale_min) {
          params.log_scale[i] = cfg.log_scale_min;
          ++result.clamp_events;
        } else if (params.log_scale[i] > cfg.log_scale_max) {
          params.log_scale[i] = cfg.log_scale_max;
          ++result.clamp_events;
        }
      }

      if (params.mean.cwiseAbs().maxCoeff() > cfg.max_param_abs) {
        result.abort_reason = "parameter magnitude exceeds configured bound";
        break;
      }
    }

    if (t >= avg_start) {
      avg_mean += params.mean;
      avg_ell += params.log_scale;
      ++avg_count;
    }

    if (hooks.checkpoint_every > 0 && hooks.checkpoint &&
        (t + 1) % hooks.checkpoint_every == 0)
      hooks.checkpoint(t + 1, params);

    if ((t + 1) % cfg.trace_every == 0) {
      record_monitor(t + 1, params);
      if (window_converged()) {
        result.converged = true;
        ++t;
        break;
      }
    }
  }

  result.iterations_run = t;
  if (avg_count > 0 && result.abort_reason.empty()) {
    params.mean = avg_mean / avg_count;
    params.log_scale = avg_ell / avg_count;
  }
  result.params = params;
  // final bounds on the returned (possibly averaged) parameters; replaces a
  // same-iteration row so trace iterations stay strictly increasing
  if (cfg.max_iters > 0 && result.abort_reason.empty()) {
    if (!result.trace.empty() &&
        result.trace.back().iteration == result.iterations_run)
      result.trace.pop_back();
    record_monitor(result.iterations_run, params);
  }

  result.wall_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() -
                                                t_start)
          .count();
  return result;
}

}  // namespace detail

// Algorithm with average-likelihood subsampling; minibatch = 0 or N uses the
// full data each step.
inline FitResult chivi_fit(const Model& model, const GaussianParams& init,
                           const OptimizerConfig& cfg, const FitHooks& hooks = {}) {
  return detail::run_fit(model, init, cfg, detail::FitObjective::cubo_min, hooks);
}

// Full-batch variant.
inline FitResult chivi_fit_full(const Model& model, const GaussianParams& init,
                                OptimizerConfig cfg, const FitHooks& hooks = {}) {
  cfg.minibatch = 0;
  return detail::run_fit(model, init, cfg, detail::FitObjective::cubo_min, hooks);
}

// ELBO-maximizing baseline on the same machinery.
inline FitResult klvi_fit(const Model& model, const GaussianParams& init,
                          const OptimizerConfig& cfg, const FitHooks& hooks = {}) {
  return detail::run_fit(model, init, cfg, detail::FitObjective::elbo_max, hooks);
}

struct GapRow {
  int iteration = 0;
  double cubo = 0.0;
  double elbo = 0.0;
  double gap = 0.0;
  double joint_se = 0.0;
};

struct SandwichResult {
  FitResult chivi;
  FitResult klvi;
  std::vector<GapRow> gap_trace;
};

// Minimize CUBO and maximize ELBO with independent seeds; the aligned traces
// bracket log p(x).
inline SandwichResult sandwich_run(const Model& model, const GaussianParams& init,
                                   const OptimizerConfig& chivi_cfg,
                                   const OptimizerConfig& klvi_cfg) {
  SandwichResult out;
  out.chivi = chivi_fit(model, init, chivi_cfg);
  out.klvi = klvi_fit(model, init, klvi_cfg);
  std::size_t i = 0, j = 0;
  while (i < out.chivi.trace.size() && j < out.klvi.trace.size()) {
    const auto& a = out.chivi.trace[i];
    const auto& b = out.klvi.trace[j];
    if (a.iteration < b.iteration) { ++i; continue; }
    if (b.iteration < a.iteration) { ++j; continue; }
    GapRow row;
    row.iteration = a.iteration;
    row.cubo = a.cubo;
    row.elbo = b.elbo;
    row.gap = a.cubo - b.elbo;
    row.joint_se = std::sqrt(a.cubo_se * a.cubo_se + b.elbo_se * b.elbo_se);
    out.gap_trace.push_back(row);
    ++i;
    ++j;
  }
  return out;
}

}  // namespace chivi
