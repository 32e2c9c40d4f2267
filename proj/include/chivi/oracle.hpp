#pragma once

#include "chivi/bounds.hpp"
#include "chivi/model.hpp"
#include "chivi/variational.hpp"

#include <json.hpp>

#include <fstream>
#include <map>
#include <string>

namespace chivi::oracle {

// Dense tensor-product quadrature, D <= 3. Trapezoid weights; for rapidly
// decaying smooth integrands on a wide enough range this converges far below
// the tolerances used here.
struct QuadratureGrid {
  struct Axis {
    double lo = 0.0, hi = 0.0;
    int nodes = 64;
  };
  std::vector<Axis> axes;

  int dim() const { return static_cast<int>(axes.size()); }

  void validate() const {
    require(dim() >= 1 && dim() <= 3, "QuadratureGrid: D must be 1..3");
    for (const auto& a : axes) {
      require(a.nodes >= 32, "QuadratureGrid: need >= 32 nodes per dimension");
      require(a.hi > a.lo, "QuadratureGrid: empty axis range");
    }
  }

  QuadratureGrid refined() const {
    QuadratureGrid g = *this;
    for (auto& a : g.axes) a.nodes *= 2;
    return g;
  }

  QuadratureGrid widened(double factor) const {
    QuadratureGrid g = *this;
    for (auto& a : g.axes) {
      const double c = 0.5 * (a.lo + a.hi);
      const double h = 0.5 * (a.hi - a.lo) * factor;
      a.lo = c - h;
      a.hi = c + h;
    }
    return g;
  }
};

// A normalized density the divergence operations can evaluate anywhere.
struct DensitySpec {
  int dim = 1;
  std::function<double(const Vec&)> log_density;
  Vec center;     // grid placement hints
  Vec halfwidth;  // ~1 sd per dimension
};

inline DensitySpec gaussian_spec(const Vec& mean, const Vec& sd) {
  require(mean.size() == sd.size() && (sd.array() > 0).all(),
          "gaussian_spec: invalid moments");
  DensitySpec s;
  s.dim = static_cast<int>(mean.size());
  s.center = mean;
  s.halfwidth = sd;
  s.log_density = [mean, sd](const Vec& z) {
    double v = 0.0;
    for (int d = 0; d < mean.size(); ++d)
      v += log_normal_pdf(z[d], mean[d], sd[d]);
    return v;
  };
  return s;
}

inline DensitySpec spec_from_params(const GaussianParams& q) {
  require(q.family == Family::mean_field, "spec_from_params: mean-field only");
  return gaussian_spec(q.mean, q.sigma());
}

namespace detail {

// Visit every tensor-product node with its log trapezoid weight.
template <typename F>
void for_each_node(const QuadratureGrid& grid, F&& f) {
  grid.validate();
  const int d = grid.dim();
  std::vector<int> idx(d, 0);
  std::vector<double> step(d), log_h(d);
  for (int k = 0; k < d; ++k) {
    step[k] = (grid.axes[k].hi - grid.axes[k].lo) / (grid.axes[k].nodes - 1);
    log_h[k] = std::log(step[k]);
  }
  Vec z(d);
  while (true) {
    double log_w = 0.0;
    bool edge = false;
    for (int k = 0; k < d; ++k) {
      z[k] = grid.axes[k].lo + idx[k] * step[k];
      const bool end = idx[k] == 0 || idx[k] == grid.axes[k].nodes - 1;
      log_w += end ? log_h[k] - std::log(2.0) : log_h[k];
      edge = edge || end;
    }
    f(z, log_w, edge);
    int k = 0;
    for (; k < d; ++k) {
      if (++idx[k] < grid.axes[k].nodes) break;
      idx[k] = 0;
    }
    if (k == d) break;
  }
}

struct LogIntegral {
  double value = -std::numeric_limits<double>::infinity();  // log integral
  double edge_max = -std::numeric_limits<double>::infinity();  // max edge log term
};

// log of integral exp(log_f(z)) dz, plus the largest edge contribution for
// coverage checks.
template <typename F>
LogIntegral log_integrate(const QuadratureGrid& grid, F&& log_f) {
  std::vector<double> terms;
  LogIntegral out;
  for_each_node(grid, [&](const Vec& z, double log_w, bool edge) {
    const double t = log_f(z) + log_w;
    terms.push_back(t);
    if (edge && t > out.edge_max) out.edge_max = t;
  });
  out.value = log_sum_exp(terms);
  return out;
}

// Signed integral of f(z) * exp(log_density(z)) dz (for KL-style integrands).
template <typename LD, typename F>
double weighted_integrate(const QuadratureGrid& grid, LD&& log_density, F&& f) {
  std::vector<double> terms;
  for_each_node(grid, [&](const Vec& z, double log_w, bool) {
    terms.push_back(std::exp(log_density(z) + log_w) * f(z));
  });
  return pairwise_sum(terms);
}

}  // namespace detail

// Laplace pilot: posterior mode by backtracking gradient ascent, scale from a
// finite-difference Hessian diagonal. Good enough to place a grid.
struct LaplacePilot {
  Vec mode;
  Vec sd;
};

inline LaplacePilot laplace_pilot(const Model& model, Vec z0 = Vec()) {
  const int d = model.latent_dim;
  Vec z = z0.size() == d ? z0 : Vec::Zero(d);
  double f = log_joint(model, z);
  for (int it = 0; it < 500; ++it) {
    const Vec g = grad_z_log_joint(model, z);
    if (g.norm() < 1e-10) break;
    double step = 1.0;
    bool moved = false;
    for (int bt = 0; bt < 40; ++bt, step *= 0.5) {
      const Vec trial = z + step * g;
      double ft;
      try {
        ft = log_joint(model, trial);
      } catch (const std::exception&) {
        continue;  // stepped outside the support
      }
      if (std::isfinite(ft) && ft > f) {
        z = trial;
        f = ft;
        moved = true;
        break;
      }
    }
    if (!moved) break;
  }
  LaplacePilot p;
  p.mode = z;
  p.sd = Vec(d);
  const double h = 1e-4;
  for (int k = 0; k < d; ++k) {
    Vec zp = z, zm = z;
    zp[k] += h;
    zm[k] -= h;
    const double curv =
        -(grad_z_log_joint(model, zp)[k] - grad_z_log_joint(model, zm)[k]) /
        (2.0 * h);
    p.sd[k] = curv > 0 ? 1.0 / std::sqrt(curv) : 1.0;
  }
  return p;
}

inline QuadratureGrid grid_for(const Vec& center, const Vec& halfwidth,
                               double sds, int nodes) {
  QuadratureGrid g;
  for (int k = 0; k < center.size(); ++k)
    g.axes.push_back({center[k] - sds * halfwidth[k],
                      center[k] + sds * halfwidth[k], nodes});
  return g;
}

inline QuadratureGrid default_grid(const Model& model, double sds = 8.0,
                                   int nodes = 64) {
  require(model.latent_dim <= 3, "quadrature: latent_dim must be <= 3");
  const auto pilot = laplace_pilot(model);
  return grid_for(pilot.mode, pilot.sd, sds, nodes);
}

namespace detail {

// Refine node counts until successive estimates agree below tol; widen first
// if the edges carry mass.
template <typename Eval>
double refine(QuadratureGrid grid, Eval&& eval, double tol,
              const std::string& what) {
  const int max_nodes = grid.dim() == 1 ? 8192 : (grid.dim() == 2 ? 1024 : 160);
  for (int widen = 0; widen < 6; ++widen) {
    const LogIntegral probe = eval(grid);
    if (probe.edge_max < probe.value + std::log(1e-12)) break;
    grid = grid.widened(1.6);
  }
  double prev = eval(grid).value;
  for (int r = 0; r < 12; ++r) {
    if (grid.axes[0].nodes * 2 > max_nodes)
      break;
    grid = grid.refined();
    const double cur = eval(grid).value;
    if (std::abs(cur - prev) < tol) return cur;
    prev = cur;
  }
  const double cur = eval(grid).value;
  if (std::abs(cur - prev) < tol) return cur;
  throw std::runtime_error(what + ": quadrature did not converge; last two " +
                           std::to_string(prev) + ", " + std::to_string(cur));
}

}  // namespace detail

// log p(x) by log-sum-exp quadrature of the joint.
inline double quad_evidence(const Model& model, double tol = 1e-6) {
  QuadratureGrid grid = default_grid(model);
  return detail::refine(
      grid,
      [&](const QuadratureGrid& g) {
        return detail::log_integrate(
            g, [&](const Vec& z) { return log_joint(model, z); });
      },
      tol, "quad_evidence");
}

// Exact CUBO_n via quadrature: (1/n) log int (p(x,z)/q)^n q dz. Valid for any
// n > 0; n = 1 returns log p(x), n -> 0 approaches the ELBO.
inline double quad_cubo(const Model& model, const GaussianParams& q, double n,
                        double tol = 1e-9) {
  require(n > 0, "quad_cubo: n must be positive");
  const auto pilot = laplace_pilot(model);
  Vec lo = pilot.mode - 8.0 * pilot.sd;
  Vec hi = pilot.mode + 8.0 * pilot.sd;
  const Vec q_sd = q.sigma();
  lo = lo.cwiseMin(q.mean - 10.0 * q_sd);
  hi = hi.cwiseMax(q.mean + 10.0 * q_sd);
  QuadratureGrid grid;
  for (int k = 0; k < model.latent_dim; ++k) grid.axes.push_back({lo[k], hi[k], 64});

  const double value = detail::refine(
      grid,
      [&](const QuadratureGrid& g) {
        return detail::log_integrate(g, [&](const Vec& z) {
          const double lq = log_q(q, z);
          return n * (log_joint(model, z) - lq) + lq;
        });
      },
      tol * n, "quad_cubo");
  return value / n;
}

// Exact ELBO via quadrature: int q (log p(x,z) - log q).
inline double quad_elbo(const Model& model, const GaussianParams& q,
                        int nodes = 2048) {
  const Vec q_sd = q.sigma();
  const auto grid = grid_for(q.mean, q_sd, 10.0, nodes / (q.dim() > 1 ? 16 : 1));
  return detail::weighted_integrate(
      grid, [&](const Vec& z) { return log_q(q, z); },
      [&](const Vec& z) { return log_joint(model, z) - log_q(q, z); });
}

struct QuadDivergence {
  double value = 0.0;
  bool diverged = false;  // integral grows without bound; reported, not thrown
};

// D_chi^n(p || q) = int (p/q)^n q dz - 1 by quadrature over normalized
// densities. A non-integrable pair (q too narrow against p) is detected from
// edge growth and flagged as infinite.
inline QuadDivergence quad_chi_divergence(const DensitySpec& p,
                                          const GaussianParams& q, double n,
                                          double tol = 1e-10) {
  require(n >= 1.0, "quad_chi_divergence: n must be >= 1");
  const auto qs = spec_from_params(q);
  require(p.dim == qs.dim, "quad_chi_divergence: dimension mismatch");

  Vec lo = (p.center - 10.0 * p.halfwidth).cwiseMin(qs.center - 10.0 * qs.halfwidth);
  Vec hi = (p.center + 10.0 * p.halfwidth).cwiseMax(qs.center + 10.0 * qs.halfwidth);
  QuadratureGrid grid;
  for (int k = 0; k < p.dim; ++k) grid.axes.push_back({lo[k], hi[k], 128});

  auto log_term = [&](const Vec& z) {
    return n * p.log_density(z) + (1.0 - n) * log_q(q, z);
  };

  // Edge-growth probe: when the integrand keeps rising as the range widens,
  // the integral is infinite.
  double prev_edge = -std::numeric_limits<double>::infinity();
  for (int widen = 0; widen < 7; ++widen) {
    const auto probe = detail::log_integrate(grid, log_term);
    if (probe.edge_max < probe.value + std::log(1e-12)) break;
    if (widen >= 2 && probe.edge_max > prev_edge) {
      QuadDivergence out;
      out.value = std::numeric_limits<double>::infinity();
      out.diverged = true;
      return out;
    }
    prev_edge = probe.edge_max;
    grid = grid.widened(1.6);
    if (widen == 6)
      throw std::runtime_error(
          "quad_chi_divergence: grid coverage failure, boundary mass above "
          "1e-8 after widening");
  }

  const double log_integral = detail::refine(
      grid,
      [&](const QuadratureGrid& g) { return detail::log_integrate(g, log_term); },
      tol, "quad_chi_divergence");
  QuadDivergence out;
  out.value = std::expm1(log_integral);
  return out;
}

enum class KlDirection { q_from_p, p_from_q };  // KL(p||q) vs KL(q||p)

inline double quad_kl(const DensitySpec& p, const GaussianParams& q,
                      KlDirection direction) {
  const auto qs = spec_from_params(q);
  require(p.dim == qs.dim, "quad_kl: dimension mismatch");
  Vec lo = (p.center - 12.0 * p.halfwidth).cwiseMin(qs.center - 12.0 * qs.halfwidth);
  Vec hi = (p.center + 12.0 * p.halfwidth).cwiseMax(qs.center + 12.0 * qs.halfwidth);
  QuadratureGrid grid;
  const int nodes = p.dim == 1 ? 4096 : (p.dim == 2 ? 512 : 96);
  for (int k = 0; k < p.dim; ++k) grid.axes.push_back({lo[k], hi[k], nodes});

  if (direction == KlDirection::q_from_p)  // KL(p || q)
    return detail::weighted_integrate(
        grid, p.log_density,
        [&](const Vec& z) { return p.log_density(z) - log_q(q, z); });
  return detail::weighted_integrate(
      grid, [&](const Vec& z) { return log_q(q, z); },
      [&](const Vec& z) { return log_q(q, z) - p.log_density(z); });
}

// Posterior of a low-dimensional model as a normalized density.
inline DensitySpec posterior_spec(const Model& model) {
  const auto pilot = laplace_pilot(model);
  const double log_z = quad_evidence(model);
  DensitySpec s;
  s.dim = model.latent_dim;
  s.center = pilot.mode;
  s.halfwidth = pilot.sd;
  s.log_density = [model, log_z](const Vec& z) {
    return log_joint(model, z) - log_z;
  };
  return s;
}

struct IsVariance {
  double empirical = 0.0;       // sample variance of w over S draws, / S
  double empirical_se = 0.0;    // std error of that variance estimate
  double identity_value = 0.0;  // (exp(2 CUBO_2) - p(x)^2)/S, D <= 3 only
  bool identity_available = false;
};

// Variance of the importance-sampling evidence estimator under proposal q,
// with the chi^2 identity check when quadrature applies.
inline IsVariance is_variance(const Model& model, const GaussianParams& q,
                              int samples, std::uint64_t seed = 0) {
  require(samples >= 1000, "is_variance: need S >= 1000");
  NoiseStream rng(seed, 7);
  std::vector<double> w(samples);
  for (int s = 0; s < samples; ++s) {
    const Vec z = reparam_sample(q, rng.next(model.latent_dim));
    w[s] = std::exp(log_joint(model, z) - log_q(q, z));
  }
  const auto ms = mean_std(w);
  const double var = ms.std * ms.std;

  // std error of a sample variance from the fourth central moment
  std::vector<double> m4_terms(samples);
  for (int s = 0; s < samples; ++s) {
    const double d = w[s] - ms.mean;
    m4_terms[s] = d * d * d * d;
  }
  const double m4 = pairwise_sum(m4_terms) / samples;
  const double n_s = static_cast<double>(samples);
  const double var_of_var =
      std::max(0.0, (m4 - var * var * (n_s - 3.0) / (n_s - 1.0)) / n_s);

  IsVariance out;
  out.empirical = var / n_s;
  out.empirical_se = std::sqrt(var_of_var) / n_s;
  if (model.latent_dim <= 3) {
    const double cubo2 = quad_cubo(model, q, 2.0);
    const double log_px = quad_evidence(model);
    out.identity_value =
        (std::exp(2.0 * cubo2) - std::exp(2.0 * log_px)) / n_s;
    out.identity_available = true;
  }
  return out;
}

struct OracleResult {
  double log_evidence = 0.0;
  Vec posterior_mean;
  Vec posterior_sd;
  std::map<std::string, double> divergences;
  double acceptance_rate = -1.0;  // HMC only
  std::string warning;
};

inline nlohmann::json to_json(const OracleResult& r) {
  nlohmann::json j;
  j["log_evidence"] = r.log_evidence;
  j["posterior_mean"] =
      std::vector<double>(r.posterior_mean.begin(), r.posterior_mean.end());
  j["posterior_sd"] =
      std::vector<double>(r.posterior_sd.begin(), r.posterior_sd.end());
  j["divergences"] = r.divergences;
  j["acceptance_rate"] = r.acceptance_rate;
  j["warning"] = r.warning;
  return j;
}

inline OracleResult oracle_from_json(const nlohmann::json& j) {
  OracleResult r;
  r.log_evidence = j.at("log_evidence").get<double>();
  const auto pm = j.at("posterior_mean").get<std::vector<double>>();
  const auto ps = j.at("posterior_sd").get<std::vector<double>>();
  r.posterior_mean = Eigen::Map<const Vec>(pm.data(), static_cast<int>(pm.size()));
  r.posterior_sd = Eigen::Map<const Vec>(ps.data(), static_cast<int>(ps.size()));
  r.divergences = j.at("divergences").get<std::map<std::string, double>>();
  r.acceptance_rate = j.at("acceptance_rate").get<double>();
  r.warning = j.at("warning").get<std::string>();
  return r;
}

// Content-addressed cache for oracle results keyed on a caller-built
// description of (model spec, config).
inline std::string cache_key(const std::string& description) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a(description)));
  return buf;
}

inline bool cache_load(const std::string& dir, const std::string& key,
                       OracleResult& out) {
  std::ifstream in(dir + "/" + key + ".json");
  if (!in) return false;
  nlohmann::json j;
  in >> j;
  out = oracle_from_json(j);
  return true;
}

inline void cache_store(const std::string& dir, const std::string& key,
                        const OracleResult& r) {
  std::ofstream out(dir + "/" + key + ".json");
  out << to_json(r).dump(2) << "\n";
}

}  // namespace chivi::oracle
