#pragma once

#include "chivi/model.hpp"

#include <Eigen/Cholesky>

#include <memory>

namespace chivi {

struct KernelParams {
  double signal_variance = 1.0;  // sigma^2
  double lengthscale = 1.0;      // phi
  double jitter = -1.0;          // < 0 means default 1e-6 * sigma^2

  void validate() const {
    require(signal_variance > 0, "KernelParams: signal_variance must be > 0");
    require(lengthscale > 0, "KernelParams: lengthscale must be > 0");
  }
  double effective_jitter() const {
    return jitter >= 0 ? jitter : 1e-6 * signal_variance;
  }
};

// k(x, x') = sigma^2 exp(-||x - x'||^2 / (2 phi^2)); rows of a, b are points.
inline Mat squared_exp_kernel(const Mat& a, const Mat& b, const KernelParams& k) {
  k.validate();
  Mat out(a.rows(), b.rows());
  const double inv = 1.0 / (2.0 * k.lengthscale * k.lengthscale);
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < b.rows(); ++j)
      out(i, j) = k.signal_variance *
                  std::exp(-inv * (a.row(i) - b.row(j)).squaredNorm());
  return out;
}

// Cached dense Gaussian prior N(0, K + jitter I). Jitter doubles up to three
// times on factorization failure before erroring.
struct GpPrior {
  Mat kernel;  // without jitter
  Eigen::LLT<Mat> llt;
  double log_det_half = 0.0;  // sum log L_ii
  double jitter_used = 0.0;

  explicit GpPrior(const Mat& k_matrix, double jitter) : kernel(k_matrix) {
    double j = jitter;
    for (int attempt = 0;; ++attempt) {
      Mat stabilized = kernel;
      stabilized.diagonal().array() += j;
      llt.compute(stabilized);
      if (llt.info() == Eigen::Success) {
        jitter_used = j;
        break;
      }
      if (attempt >= 3)
        throw std::runtime_error(
            "GpPrior: Cholesky factorization failed after jitter escalation "
            "(final jitter " + std::to_string(j) + ")");
      j = j > 0 ? 2.0 * j : 1e-10;
    }
    log_det_half = llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
  }

  double log_density(const Vec& f) const {
    const Vec alpha = llt.solve(f);
    return -0.5 * f.dot(alpha) - log_det_half -
           0.5 * static_cast<double>(f.size()) * kLog2Pi;
  }

  Vec grad_log_density(const Vec& f) const { return -llt.solve(f); }
};

struct GpClassification {
  Model model;
  std::shared_ptr<GpPrior> prior;
  Mat inputs;  // training inputs, for predictive cross-kernels
  KernelParams kernel;
};

// GP binary classification: latent f over the training inputs,
// f ~ N(0, K + jitter I), y_i | f ~ Bernoulli through Phi(y_i f_i).
inline GpClassification make_gp_classification(const Dataset& dataset,
                                               const KernelParams& kernel,
                                               int max_points = 600) {
  dataset.validate();
  kernel.validate();
  require(dataset.rows() > 0, "make_gp_classification: empty dataset");
  require(dataset.rows() <= max_points,
          "make_gp_classification: N exceeds configured maximum");

  const int n = dataset.rows();
  auto prior = std::make_shared<GpPrior>(
      squared_exp_kernel(dataset.features, dataset.features, kernel),
      kernel.effective_jitter());
  auto labels = std::make_shared<Vec>(dataset.labels);

  GpClassification gp;
  gp.prior = prior;
  gp.inputs = dataset.features;
  gp.kernel = kernel;
  gp.model.latent_dim = n;
  gp.model.data_count = n;
  gp.model.log_prior = [prior](const Vec& f) { return prior->log_density(f); };
  gp.model.log_lik_term = [labels](int i, const Vec& f) {
    return log_ndtr((*labels)[i] * f[i]);
  };
  gp.model.accum_grad_log_prior = [prior](const Vec& f, Vec& out) {
    out += prior->grad_log_density(f);
  };
  gp.model.accum_grad_log_lik = [labels](int i, const Vec& f, double scale,
                                         Vec& out) {
    const double y = (*labels)[i];
    out[i] += scale * y * ndtr_grad_ratio(y * f[i]);
  };
  return gp;
}

// Discretized spatial domain for the log-Gaussian Cox process; each cell is
// one likelihood term.
struct CoxGrid {
  double x_min = -25, x_max = 25;
  double y_min = 0, y_max = 40;
  int nx = 25, ny = 20;
  std::vector<int> cell_counts;  // row-major, nx * ny
  double cell_area() const {
    return (x_max - x_min) / nx * ((y_max - y_min) / ny);
  }
  int cells() const { return nx * ny; }

  Mat cell_centers() const {
    Mat centers(cells(), 2);
    const double dx = (x_max - x_min) / nx;
    const double dy = (y_max - y_min) / ny;
    for (int iy = 0; iy < ny; ++iy)
      for (int ix = 0; ix < nx; ++ix) {
        const int c = iy * nx + ix;
        centers(c, 0) = x_min + (ix + 0.5) * dx;
        centers(c, 1) = y_min + (iy + 0.5) * dy;
      }
    return centers;
  }

  // Bin point events into cell counts; events outside the extents are
  // dropped.
  static CoxGrid from_events(const Mat& xy, double x_min, double x_max,
                             double y_min, double y_max, int nx, int ny) {
    require(nx > 0 && ny > 0, "CoxGrid: grid resolution must be positive");
    require(x_max > x_min && y_max > y_min, "CoxGrid: empty extents");
    CoxGrid g;
    g.x_min = x_min; g.x_max = x_max; g.y_min = y_min; g.y_max = y_max;
    g.nx = nx; g.ny = ny;
    g.cell_counts.assign(g.cells(), 0);
    for (int i = 0; i < xy.rows(); ++i) {
      const double x = xy(i, 0), y = xy(i, 1);
      if (x < x_min || x >= x_max || y < y_min || y >= y_max) continue;
      const int ix = static_cast<int>((x - x_min) / (x_max - x_min) * nx);
      const int iy = static_cast<int>((y - y_min) / (y_max - y_min) * ny);
      ++g.cell_counts[iy * nx + ix];
    }
    return g;
  }
};

struct CoxProcess {
  Model model;
  std::shared_ptr<GpPrior> prior;
  CoxGrid grid;
  KernelParams kernel;
};

// Discretized inhomogeneous Poisson likelihood with intensity exp(f):
//   count_i * f_i - area * exp(f_i) - log(count_i!)
// The -log(count!) constant keeps CUBO/ELBO comparable to the true
// discretized evidence. Latent values above f_max signal divergence.
inline CoxProcess make_cox_process(const CoxGrid& grid, const KernelParams& kernel,
                                   int max_cells = 1024, double f_max = 30.0) {
  kernel.validate();
  require(static_cast<int>(grid.cell_counts.size()) == grid.cells(),
          "make_cox_process: cell_counts size != nx * ny");
  require(grid.cells() <= max_cells,
          "make_cox_process: grid exceeds configured maximum");
  for (int c : grid.cell_counts)
    require(c >= 0, "make_cox_process: negative cell count");

  auto prior = std::make_shared<GpPrior>(
      squared_exp_kernel(grid.cell_centers(), grid.cell_centers(), kernel),
      kernel.effective_jitter());
  auto counts = std::make_shared<std::vector<int>>(grid.cell_counts);
  const double area = grid.cell_area();

  CoxProcess cox;
  cox.prior = prior;
  cox.grid = grid;
  cox.kernel = kernel;
  cox.model.latent_dim = grid.cells();
  cox.model.data_count = grid.cells();
  cox.model.log_prior = [prior](const Vec& f) { return prior->log_density(f); };
  cox.model.log_lik_term = [counts, area, f_max](int i, const Vec& f) {
    if (f[i] > f_max)
      throw std::domain_error(
          "cox_process: latent value " + std::to_string(f[i]) +
          " exceeds overflow bound, optimization has diverged");
    const double c = (*counts)[i];
    return c * f[i] - area * std::exp(f[i]) - std::lgamma(c + 1.0);
  };
  cox.model.accum_grad_log_prior = [prior](const Vec& f, Vec& out) {
    out += prior->grad_log_density(f);
  };
  cox.model.accum_grad_log_lik = [counts, area, f_max](int i, const Vec& f,
                                                       double scale, Vec& out) {
    if (f[i] > f_max)
      throw std::domain_error(
          "cox_process: latent value " + std::to_string(f[i]) +
          " exceeds overflow bound, optimization has diverged");
    out[i] += scale * ((*counts)[i] - area * std::exp(f[i]));
  };
  return cox;
}

}  // namespace chivi
