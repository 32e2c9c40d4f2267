#pragma once

#include "chivi/common.hpp"
#include "chivi/rng.hpp"
#include "chivi/stats.hpp"

#include <json.hpp>

namespace chivi {

enum class Family { mean_field, full_rank };

// Gaussian variational family. Scale is stored as log sigma per dimension
// (mean-field) or as a lower-triangular factor with positive diagonal
// (full-rank); the unconstrained log parameterization keeps sigma > 0
// through any gradient step.
struct GaussianParams {
  Vec mean;
  Vec log_scale;      // mean-field: log sigma
  Mat scale_tril;     // full-rank only
  Family family = Family::mean_field;

  int dim() const { return static_cast<int>(mean.size()); }

  static GaussianParams mean_field(Vec mu, Vec log_sigma) {
    require(mu.size() == log_sigma.size(), "GaussianParams: size mismatch");
    GaussianParams p;
    p.mean = std::move(mu);
    p.log_scale = std::move(log_sigma);
    return p;
  }

  static GaussianParams zero_init(int dim) {
    return mean_field(Vec::Zero(dim), Vec::Zero(dim));
  }

  static GaussianParams perturbed_init(int dim, NoiseStream& rng,
                                       double std = 0.1) {
    auto p = zero_init(dim);
    for (int i = 0; i < dim; ++i) p.mean[i] = std * rng.normal();
    for (int i = 0; i < dim; ++i) p.log_scale[i] = std * rng.normal();
    return p;
  }

  static GaussianParams full_rank(Vec mu, Mat tril) {
    require(tril.rows() == mu.size() && tril.cols() == mu.size(),
            "GaussianParams: scale factor shape mismatch");
    require((tril.diagonal().array() > 0).all(),
            "GaussianParams: scale factor needs positive diagonal");
    GaussianParams p;
    p.mean = std::move(mu);
    p.scale_tril = std::move(tril);
    p.family = Family::full_rank;
    return p;
  }

  void validate() const {
    require(mean.allFinite(), "GaussianParams: non-finite mean");
    if (family == Family::mean_field)
      require(log_scale.allFinite(), "GaussianParams: non-finite log_scale");
    else
      require(scale_tril.allFinite() &&
                  (scale_tril.diagonal().array() > 0).all(),
              "GaussianParams: invalid scale factor");
  }

  Vec sigma() const {
    require(family == Family::mean_field, "sigma(): mean-field only");
    return log_scale.array().exp();
  }
};

// z = g(lambda, eps): mu + sigma .* eps (mean-field) or mu + L eps.
inline Vec reparam_sample(const GaussianParams& params, const NoiseDraw& eps) {
  require(eps.eps.size() == params.dim(), "reparam_sample: dimension mismatch");
  if (params.family == Family::mean_field)
    return params.mean.array() + params.log_scale.array().exp() * eps.eps.array();
  return params.mean + params.scale_tril.template triangularView<Eigen::Lower>() * eps.eps;
}

inline double log_q(const GaussianParams& params, const Vec& z) {
  require(z.size() == params.dim(), "log_q: dimension mismatch");
  if (params.family == Family::mean_field) {
    const Vec u = (z - params.mean).array() * (-params.log_scale).array().exp();
    return -0.5 * u.squaredNorm() - params.log_scale.sum() -
           0.5 * params.dim() * kLog2Pi;
  }
  const Vec u = params.scale_tril.template triangularView<Eigen::Lower>().solve(
      z - params.mean);
  return -0.5 * u.squaredNorm() -
         params.scale_tril.diagonal().array().log().sum() -
         0.5 * params.dim() * kLog2Pi;
}

struct LogQGrad {
  Vec d_mean;
  Vec d_log_scale;
};

// Gradient of log q(z; lambda) in the parameters, holding z fixed:
// d/dmu = (z - mu)/sigma^2, d/dlog_sigma = ((z - mu)^2/sigma^2 - 1).
inline LogQGrad grad_params_log_q(const GaussianParams& params, const Vec& z) {
  require(params.family == Family::mean_field,
          "grad_params_log_q: mean-field only");
  require(z.size() == params.dim(), "grad_params_log_q: dimension mismatch");
  const Vec inv_var = (-2.0 * params.log_scale).array().exp();
  LogQGrad g;
  g.d_mean = (z - params.mean).array() * inv_var.array();
  g.d_log_scale =
      ((z - params.mean).array().square() * inv_var.array()) - 1.0;
  return g;
}

inline double entropy(const GaussianParams& params) {
  params.validate();
  const double base = 0.5 * params.dim() * (1.0 + kLog2Pi);
  if (params.family == Family::mean_field) return base + params.log_scale.sum();
  return base + params.scale_tril.diagonal().array().log().sum();
}

inline nlohmann::json to_json(const GaussianParams& p) {
  nlohmann::json j;
  j["family"] = p.family == Family::mean_field ? "mean_field" : "full_rank";
  j["mean"] = std::vector<double>(p.mean.begin(), p.mean.end());
  if (p.family == Family::mean_field) {
    j["log_scale"] = std::vector<double>(p.log_scale.begin(), p.log_scale.end());
  } else {
    std::vector<double> tril;
    for (int i = 0; i < p.scale_tril.rows(); ++i)
      for (int jcol = 0; jcol <= i; ++jcol) tril.push_back(p.scale_tril(i, jcol));
    j["scale_tril"] = tril;
  }
  return j;
}

inline GaussianParams params_from_json(const nlohmann::json& j) {
  const auto mean_v = j.at("mean").get<std::vector<double>>();
  Vec mu = Eigen::Map<const Vec>(mean_v.data(), static_cast<int>(mean_v.size()));
  const std::string fam = j.at("family").get<std::string>();
  if (fam == "mean_field") {
    const auto ls = j.at("log_scale").get<std::vector<double>>();
    require(ls.size() == mean_v.size(), "params_from_json: size mismatch");
    return GaussianParams::mean_field(
        mu, Eigen::Map<const Vec>(ls.data(), static_cast<int>(ls.size())));
  }
  require(fam == "full_rank", "params_from_json: unknown family " + fam);
  const auto tril_v = j.at("scale_tril").get<std::vector<double>>();
  const int d = static_cast<int>(mean_v.size());
  require(static_cast<int>(tril_v.size()) == d * (d + 1) / 2,
          "params_from_json: scale_tril size mismatch");
  Mat tril = Mat::Zero(d, d);
  int k = 0;
  for (int i = 0; i < d; ++i)
    for (int jcol = 0; jcol <= i; ++jcol) tril(i, jcol) = tril_v[k++];
  return GaussianParams::full_rank(mu, tril);
}

}  // namespace chivi
