#pragma once

#include "chivi/model.hpp"
#include "chivi/variational.hpp"

#include <vector>

namespace chivi {

// log w^(s) = log p(x, z^(s)) - log q(z^(s); lambda) over S draws from q.
struct LogWeights {
  std::vector<double> values;
  std::vector<Vec> z_draws;
  double max_log_w = 0.0;

  int count() const { return static_cast<int>(values.size()); }
};

enum class BoundKind { cubo, elbo };

struct BoundEstimate {
  double value = 0.0;
  double order_n = 0.0;  // 0 for ELBO
  int sample_count = 0;
  double std_error = 0.0;
  BoundKind kind = BoundKind::elbo;
  // The plug-in CUBO estimate is biased (log of a Monte Carlo mean); the
  // bias shrinks as sample_count grows. ELBO estimates are unbiased.
  bool biased = false;
};

inline LogWeights compute_log_weights(const Model& model,
                                      const GaussianParams& params, int samples,
                                      NoiseStream& rng,
                                      const Subsample* subsample = nullptr) {
  require(samples >= 1, "compute_log_weights: need S >= 1");
  require(params.dim() == model.latent_dim,
          "compute_log_weights: dimension mismatch");
  LogWeights lw;
  lw.values.reserve(samples);
  lw.z_draws.reserve(samples);
  for (int s = 0; s < samples; ++s) {
    const Vec z = reparam_sample(params, rng.next(model.latent_dim));
    lw.values.push_back(log_joint(model, z, subsample) - log_q(params, z));
    lw.z_draws.push_back(z);
  }
  lw.max_log_w = *std::max_element(lw.values.begin(), lw.values.end());
  return lw;
}

// w~^(s) = exp(log w^(s) - max log w); all in (0, 1], at least one exactly 1.
inline std::vector<double> stabilize(const LogWeights& lw) {
  require(!lw.values.empty(), "stabilize: empty log-weights");
  std::vector<double> out(lw.values.size());
  for (std::size_t s = 0; s < lw.values.size(); ++s)
    out[s] = std::exp(lw.values[s] - lw.max_log_w);
  return out;
}

// Plug-in estimate of CUBO_n = (1/n) log E_q[w^n], computed through the
// stabilized weights. Standard error by the delta method on the
// exponentiated mean.
inline BoundEstimate cubo_estimate(const LogWeights& lw, double n) {
  require(!lw.values.empty(), "cubo_estimate: empty log-weights");
  require(n > 1.0,
          "cubo_estimate: order n must exceed 1; use elbo_estimate for the "
          "lower bound");
  const auto wt = stabilize(lw);
  std::vector<double> powered(wt.size());
  for (std::size_t s = 0; s < wt.size(); ++s) powered[s] = std::pow(wt[s], n);
  const auto ms = mean_std(powered);

  BoundEstimate est;
  est.kind = BoundKind::cubo;
  est.order_n = n;
  est.sample_count = lw.count();
  est.biased = true;
  est.value = lw.max_log_w + std::log(ms.mean) / n;
  const double se_mean = ms.std / std::sqrt(static_cast<double>(wt.size()));
  est.std_error = ms.mean > 0 ? se_mean / (n * ms.mean) : 0.0;
  return est;
}

inline BoundEstimate elbo_estimate(const LogWeights& lw) {
  require(!lw.values.empty(), "elbo_estimate: empty log-weights");
  const auto ms = mean_std(lw.values);
  BoundEstimate est;
  est.kind = BoundKind::elbo;
  est.order_n = 0.0;
  est.sample_count = lw.count();
  est.value = ms.mean;
  est.std_error = ms.std / std::sqrt(static_cast<double>(lw.values.size()));
  return est;
}

// Truncated Taylor combination of an f-divergence from chi-divergences:
// D_f = sum_{i=2..k} f^(i)(1)/i! * D_chi^i. The chi values come from the
// oracle module; this is pure combination.
inline double f_divergence_taylor(const std::vector<double>& chi_divs,
                                  const std::vector<double>& f_derivs_at_1) {
  require(chi_divs.size() == f_derivs_at_1.size(),
          "f_divergence_taylor: length mismatch");
  require(!chi_divs.empty(), "f_divergence_taylor: need at least order 2");
  double total = 0.0;
  double factorial = 1.0;  // i! starting at i = 2
  for (std::size_t idx = 0; idx < chi_divs.size(); ++idx) {
    const double i = static_cast<double>(idx) + 2.0;
    factorial *= i;
    total += f_derivs_at_1[idx] / factorial * chi_divs[idx];
  }
  return total;
}

}  // namespace chivi
