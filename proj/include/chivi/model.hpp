#pragma once

#include "chivi/common.hpp"
#include "chivi/dataset.hpp"
#include "chivi/stats.hpp"

#include <functional>
#include <memory>
#include <optional>
#include <vector>

namespace chivi {

// Probabilistic model contract: log-joint split into a prior term and
// per-datum likelihood terms so the subsampled (average-likelihood) joint
// can be assembled. All callables must be safe to invoke concurrently once
// the model is built.
struct Model {
  int latent_dim = 0;
  int data_count = 0;
  std::function<double(const Vec&)> log_prior;
  std::function<double(int, const Vec&)> log_lik_term;
  // out += grad;  out += scale * grad_i
  std::function<void(const Vec&, Vec&)> accum_grad_log_prior;
  std::function<void(int, const Vec&, double, Vec&)> accum_grad_log_lik;
};

using Subsample = std::vector<int>;

namespace detail {
inline void check_subsample(const Model& m, const Subsample& idx) {
  require(!idx.empty(), "log_joint: empty subsample (M = 0)");
  for (int i : idx)
    require(i >= 0 && i < m.data_count,
            "log_joint: subsample index " + std::to_string(i) +
                " out of range [0, " + std::to_string(m.data_count) + ")");
}
}  // namespace detail

// log p(x, z), with the N/M average-likelihood scaling when a subsample is
// given.
inline double log_joint(const Model& m, const Vec& z,
                        const Subsample* subsample = nullptr) {
  require(z.size() == m.latent_dim, "log_joint: latent dimension mismatch");
  double value = m.log_prior(z);
  if (subsample == nullptr) {
    std::vector<double> terms(m.data_count);
    for (int i = 0; i < m.data_count; ++i) terms[i] = m.log_lik_term(i, z);
    value += pairwise_sum(terms);
  } else {
    detail::check_subsample(m, *subsample);
    std::vector<double> terms(subsample->size());
    for (std::size_t j = 0; j < subsample->size(); ++j)
      terms[j] = m.log_lik_term((*subsample)[j], z);
    const double scale =
        static_cast<double>(m.data_count) / static_cast<double>(subsample->size());
    value += scale * pairwise_sum(terms);
  }
  return value;
}

inline Vec grad_z_log_joint(const Model& m, const Vec& z,
                            const Subsample* subsample = nullptr) {
  require(z.size() == m.latent_dim, "grad_z_log_joint: dimension mismatch");
  Vec g = Vec::Zero(m.latent_dim);
  m.accum_grad_log_prior(z, g);
  if (subsample == nullptr) {
    for (int i = 0; i < m.data_count; ++i) m.accum_grad_log_lik(i, z, 1.0, g);
  } else {
    detail::check_subsample(m, *subsample);
    const double scale =
        static_cast<double>(m.data_count) / static_cast<double>(subsample->size());
    for (int i : *subsample) m.accum_grad_log_lik(i, z, scale, g);
  }
  return g;
}

// Conjugate Gaussian fixture: z ~ N(prior_mean, diag(prior_var)),
// x_i | z ~ N(z, noise_var I). Evidence and posterior are closed form.
struct ConjugateGaussian {
  Model model;
  Vec posterior_mean;
  Vec posterior_sd;
  double log_evidence = 0.0;
};

inline ConjugateGaussian make_conjugate_gaussian(const Vec& prior_mean,
                                                 const Vec& prior_var,
                                                 double noise_var,
                                                 const Mat& data) {
  const int dim = static_cast<int>(prior_mean.size());
  require(prior_var.size() == dim, "make_conjugate_gaussian: size mismatch");
  require((prior_var.array() > 0).all(),
          "make_conjugate_gaussian: prior_var must be positive");
  require(noise_var > 0, "make_conjugate_gaussian: noise_var must be positive");
  require(data.cols() == dim || data.rows() == 0,
          "make_conjugate_gaussian: data column count != latent dim");

  const int n = static_cast<int>(data.rows());
  ConjugateGaussian cg;
  cg.posterior_mean.resize(dim);
  cg.posterior_sd.resize(dim);
  cg.log_evidence = 0.0;
  for (int d = 0; d < dim; ++d) {
    // sequential conjugate updates; each datum contributes its predictive
    double mu = prior_mean[d];
    double var = prior_var[d];
    for (int i = 0; i < n; ++i) {
      cg.log_evidence += log_normal_pdf(data(i, d), mu, std::sqrt(var + noise_var));
      const double prec = 1.0 / var + 1.0 / noise_var;
      mu = (mu / var + data(i, d) / noise_var) / prec;
      var = 1.0 / prec;
    }
    cg.posterior_mean[d] = mu;
    cg.posterior_sd[d] = std::sqrt(var);
  }

  auto data_p = std::make_shared<Mat>(data);
  auto pm = std::make_shared<Vec>(prior_mean);
  auto pv = std::make_shared<Vec>(prior_var);

  cg.model.latent_dim = dim;
  cg.model.data_count = n;
  cg.model.log_prior = [pm, pv, dim](const Vec& z) {
    double v = 0.0;
    for (int d = 0; d < dim; ++d)
      v += log_normal_pdf(z[d], (*pm)[d], std::sqrt((*pv)[d]));
    return v;
  };
  cg.model.log_lik_term = [data_p, noise_var, dim](int i, const Vec& z) {
    double v = 0.0;
    const double sd = std::sqrt(noise_var);
    for (int d = 0; d < dim; ++d)
      v += log_normal_pdf((*data_p)(i, d), z[d], sd);
    return v;
  };
  cg.model.accum_grad_log_prior = [pm, pv](const Vec& z, Vec& out) {
    out.array() -= (z - *pm).array() / pv->array();
  };
  cg.model.accum_grad_log_lik = [data_p, noise_var](int i, const Vec& z,
                                                    double scale, Vec& out) {
    out += scale / noise_var * (data_p->row(i).transpose() - z);
  };
  return cg;
}

// Bayesian probit regression: z = weights, p(y_i | z) = Phi(y_i x_i' z),
// weights ~ N(0, prior_var I).
inline Model make_probit(const Dataset& dataset, double prior_var) {
  dataset.validate();
  require(dataset.rows() > 0, "make_probit: empty dataset");
  require(prior_var > 0, "make_probit: prior_var must be positive");

  auto ds = std::make_shared<Dataset>(dataset);
  const int dim = dataset.cols();

  Model m;
  m.latent_dim = dim;
  m.data_count = dataset.rows();
  m.log_prior = [prior_var, dim](const Vec& z) {
    return -0.5 * z.squaredNorm() / prior_var -
           0.5 * dim * (kLog2Pi + std::log(prior_var));
  };
  m.log_lik_term = [ds](int i, const Vec& z) {
    const double t = ds->labels[i] * ds->features.row(i).dot(z);
    return log_ndtr(t);
  };
  m.accum_grad_log_prior = [prior_var](const Vec& z, Vec& out) {
    out -= z / prior_var;
  };
  m.accum_grad_log_lik = [ds](int i, const Vec& z, double scale, Vec& out) {
    const double y = ds->labels[i];
    const double t = y * ds->features.row(i).dot(z);
    out += scale * y * ndtr_grad_ratio(t) * ds->features.row(i).transpose();
  };
  return m;
}

}  // namespace chivi
