#pragma once

#include "chivi/model.hpp"
#include "chivi/oracle.hpp"
#include "chivi/rng.hpp"

namespace chivi::oracle {

struct HmcConfig {
  double step_size = 0.1;
  int leapfrog_steps = 10;
  int num_samples = 2000;
  int burn_in = 500;
  std::uint64_t seed = 0;
  Vec diag_mass;  // empty = identity
  Vec init;       // empty = zeros

  void validate() const {
    require(step_size > 0, "HmcConfig: step_size must be positive");
    require(leapfrog_steps >= 1, "HmcConfig: leapfrog_steps >= 1");
    require(num_samples > burn_in && burn_in >= 0,
            "HmcConfig: need num_samples > burn_in >= 0");
  }
};

// Plain leapfrog HMC with Metropolis correction targeting p(z | x) up to a
// constant. Deliberately simple; this is ground-truth machinery, not a
// sampler product.
inline OracleResult hmc_sample(const Model& model, const HmcConfig& cfg) {
  cfg.validate();
  const int d = model.latent_dim;
  Vec mass = cfg.diag_mass.size() == d ? cfg.diag_mass : Vec::Ones(d);
  require((mass.array() > 0).all(), "hmc_sample: mass must be positive");

  NoiseStream rng(cfg.seed, 11);
  Vec z = cfg.init.size() == d ? cfg.init : Vec::Zero(d);
  double logp = log_joint(model, z);
  Vec grad = grad_z_log_joint(model, z);

  Vec sum = Vec::Zero(d), sum_sq = Vec::Zero(d);
  int kept = 0, accepted = 0;

  for (int it = 0; it < cfg.num_samples; ++it) {
    Vec p(d);
    for (int k = 0; k < d; ++k) p[k] = std::sqrt(mass[k]) * rng.normal();
    const double h0 =
        -logp + 0.5 * (p.array().square() / mass.array()).sum();

    Vec z_new = z, grad_new = grad, p_new = p;
    bool rejected_in_flight = false;
    try {
      p_new += 0.5 * cfg.step_size * grad_new;
      for (int l = 0; l < cfg.leapfrog_steps; ++l) {
        z_new.array() += cfg.step_size * p_new.array() / mass.array();
        grad_new = grad_z_log_joint(model, z_new);
        if (l + 1 < cfg.leapfrog_steps)
          p_new += cfg.step_size * grad_new;
      }
      p_new += 0.5 * cfg.step_size * grad_new;
    } catch (const std::exception&) {
      rejected_in_flight = true;  // left the support; treat as rejection
    }

    bool accept = false;
    if (!rejected_in_flight) {
      const double logp_new = log_joint(model, z_new);
      const double h1 =
          -logp_new + 0.5 * (p_new.array().square() / mass.array()).sum();
      if (std::isfinite(h1) &&
          std::log(rng.uniform() + 1e-300) < h0 - h1) {
        z = z_new;
        logp = logp_new;
        grad = grad_new;
        accept = true;
      }
    }
    if (accept) ++accepted;

    if (it >= cfg.burn_in) {
      sum += z;
      sum_sq += z.cwiseProduct(z);
      ++kept;
    }
  }

  if (accepted == 0)
    throw std::runtime_error(
        "hmc_sample: chain rejected every proposal; reduce step_size");

  OracleResult r;
  r.acceptance_rate =
      static_cast<double>(accepted) / static_cast<double>(cfg.num_samples);
  r.posterior_mean = sum / kept;
  r.posterior_sd =
      ((sum_sq / kept - r.posterior_mean.cwiseProduct(r.posterior_mean))
           .cwiseMax(0.0))
          .cwiseSqrt();
  if (r.acceptance_rate < 0.5 || r.acceptance_rate > 0.95)
    r.warning = "acceptance rate " + std::to_string(r.acceptance_rate) +
                " outside [0.5, 0.95]; adjust step_size";
  return r;
}

}  // namespace chivi::oracle
