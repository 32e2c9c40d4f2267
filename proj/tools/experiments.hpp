#pragma once

#include "report_io.hpp"

#include <atomic>
#include <filesystem>
#include <mutex>
#include <random>
#include <thread>

namespace chivi::cli {

// ---------------------------------------------------------------------------
// shared plumbing

inline std::uint64_t derive_seed(std::uint64_t base, int worker) {
  // splitmix-style scramble keeps worker streams well separated
  std::uint64_t x = base + 0x9e3779b97f4a7c15ULL * (worker + 1);
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Fixed-size worker pool; results land in caller-indexed slots so the
// aggregation order never depends on scheduling.
inline void run_parallel(int jobs, const std::function<void(int)>& work) {
  const int workers =
      std::max(1, std::min(jobs, static_cast<int>(
                                     std::thread::hardware_concurrency())));
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  std::exception_ptr first_error;
  std::mutex error_mutex;
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (int j = next.fetch_add(1); j < jobs; j = next.fetch_add(1)) {
        try {
          work(j);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!first_error) first_error = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

struct Split {
  std::vector<int> train, test;
};

inline Split make_split(int count, double train_fraction, NoiseStream& rng) {
  const auto order = rng.subsample(count, count);  // full shuffle
  Split s;
  const int n_train = std::max(1, static_cast<int>(train_fraction * count));
  for (int i = 0; i < count; ++i)
    (i < n_train ? s.train : s.test).push_back(order[i]);
  return s;
}

inline Dataset take_rows(const Dataset& ds, const std::vector<int>& idx) {
  Dataset out;
  out.features.resize(static_cast<int>(idx.size()), ds.cols());
  out.labels.resize(static_cast<int>(idx.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) {
    out.features.row(static_cast<int>(i)) = ds.features.row(idx[i]);
    out.labels[static_cast<int>(i)] = ds.labels[idx[i]];
  }
  return out;
}

inline bool single_class(const Dataset& ds) {
  return ds.labels.minCoeff() == ds.labels.maxCoeff();
}

// Surfaces when the weight-ESS gate held a CUBO fit at its initializer.
inline void note_if_gated(const FitResult& fit, const std::string& label,
                          std::vector<std::string>& sink) {
  if (fit.iterations_run > 0 &&
      fit.skipped_steps > fit.iterations_run / 2)
    sink.push_back(label + ": " + std::to_string(fit.skipped_steps) + " of " +
                   std::to_string(fit.iterations_run) +
                   " steps gated by degenerate chi-weights; parameters stay "
                   "near the initializer");
}

// ---------------------------------------------------------------------------
// model building from the config's model section

inline ConjugateGaussian build_conjugate(const json& model,
                                         std::uint64_t seed) {
  const int dim = model.value("dim", 1);
  Vec m0 = Vec::Zero(dim), v0 = Vec::Ones(dim);
  if (model.contains("prior_mean")) {
    const auto v = model["prior_mean"].get<std::vector<double>>();
    require(static_cast<int>(v.size()) == dim, "model.prior_mean: wrong size");
    m0 = Eigen::Map<const Vec>(v.data(), dim);
  }
  if (model.contains("prior_var")) {
    const auto v = model["prior_var"].get<std::vector<double>>();
    require(static_cast<int>(v.size()) == dim, "model.prior_var: wrong size");
    v0 = Eigen::Map<const Vec>(v.data(), dim);
  }
  const double noise_var = model.value("noise_var", 1.0);

  Mat data;
  if (model.contains("data")) {
    const auto rows = model["data"].get<std::vector<std::vector<double>>>();
    data.resize(static_cast<int>(rows.size()), dim);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      require(static_cast<int>(rows[i].size()) == dim,
              "model.data: row width != dim");
      for (int d = 0; d < dim; ++d) data(static_cast<int>(i), d) = rows[i][d];
    }
  } else {
    const int count =
        model.contains("synthetic") ? model["synthetic"].value("count", 20) : 20;
    NoiseStream gen(seed, 13);
    data.resize(count, dim);
    Vec z_true(dim);
    for (int d = 0; d < dim; ++d)
      z_true[d] = m0[d] + std::sqrt(v0[d]) * gen.normal();
    for (int i = 0; i < count; ++i)
      for (int d = 0; d < dim; ++d)
        data(i, d) = z_true[d] + std::sqrt(noise_var) * gen.normal();
  }
  return make_conjugate_gaussian(m0, v0, noise_var, data);
}

// Two well-separated gaussian clusters; separable with high margin.
inline Dataset synthetic_clusters(const json& synthetic, std::uint64_t seed) {
  const int count = synthetic.value("count", 80);
  const int features = synthetic.value("features", 2);
  const double distance = synthetic.value("cluster_distance", 4.0);
  NoiseStream gen(seed, 17);
  Dataset ds;
  ds.features.resize(count, features);
  ds.labels.resize(count);
  for (int i = 0; i < count; ++i) {
    const double y = i % 2 == 0 ? 1.0 : -1.0;
    ds.labels[i] = y;
    for (int d = 0; d < features; ++d)
      ds.features(i, d) = (d == 0 ? y * distance / 2.0 : 0.0) +
                          0.5 * gen.normal();
  }
  return ds;
}

inline Dataset build_classification_data(const json& model,
                                         std::uint64_t seed) {
  Dataset ds;
  if (model.contains("csv")) {
    CsvSchema schema;
    schema.label_column = model.value("label_column", "label");
    if (model.contains("feature_columns"))
      schema.feature_columns =
          model["feature_columns"].get<std::vector<std::string>>();
    if (model.contains("label_map"))
      for (const auto& [k, v] : model["label_map"].items())
        schema.label_map[k] = v.get<double>();
    ds = load_csv_dataset(model["csv"].get<std::string>(), schema);
  } else {
    ds = synthetic_clusters(model.value("synthetic", json::object()), seed);
  }
  if (model.value("standardize", true)) ds = standardize_features(ds);
  return ds;
}

// Plug-in predictive through the probit/gaussian convolution identity:
// P(y = 1 | x) = Phi(x' mu / sqrt(1 + x' diag(sigma^2) x)).
inline double probit_predictive(const Vec& x, const GaussianParams& q) {
  const Vec var = q.sigma().array().square();
  const double denom = std::sqrt(1.0 + x.array().square().matrix().dot(var));
  return ndtr(x.dot(q.mean) / denom);
}

inline double probit_test_error(const Dataset& test, const GaussianParams& q) {
  int wrong = 0;
  for (int i = 0; i < test.rows(); ++i) {
    const double p = probit_predictive(test.features.row(i).transpose(), q);
    const double y_hat = p > 0.5 ? 1.0 : -1.0;
    if (y_hat != test.labels[i]) ++wrong;
  }
  return static_cast<double>(wrong) / test.rows();
}

// ---------------------------------------------------------------------------
// experiments

struct ExperimentResult {
  int exit_code = 0;
  RunMeta meta;
};

inline ExperimentResult run_sandwich(const RunConfig& cfg,
                                     const std::string& out_dir) {
  ExperimentResult result;
  auto model_kind = cfg.model.value("kind", "conjugate_gaussian");

  Model model;
  ConjugateGaussian cg;
  if (model_kind == "conjugate_gaussian") {
    cg = build_conjugate(cfg.model, cfg.seed);
    model = cg.model;
    result.meta.notes.push_back("exact log evidence " +
                                fmt(cg.log_evidence));
  } else if (model_kind == "probit") {
    auto ds = build_classification_data(cfg.model, cfg.seed);
    if (cfg.model.value("intercept", true)) ds = with_intercept(ds);
    model = make_probit(ds, cfg.model.value("weight_prior_var", 1.0));
  } else {
    throw std::runtime_error("sandwich: unsupported model kind " + model_kind);
  }

  auto opt = optimizer_from_json(cfg.optimizer);
  opt.seed = cfg.seed;
  auto init = GaussianParams::zero_init(model.latent_dim);
  const auto sw = sandwich_run(model, init, opt, opt);

  write_gap_trace_csv(out_dir + "/trace.csv", sw.gap_trace);
  write_trace_csv(out_dir + "/chivi_trace.csv", sw.chivi.trace);
  write_trace_csv(out_dir + "/klvi_trace.csv", sw.klvi.trace);

  ResultTable table;
  if (!sw.gap_trace.empty()) {
    const auto& last = sw.gap_trace.back();
    table.add(model_kind, "chivi", "final_cubo", {last.cubo});
    table.add(model_kind, "klvi", "final_elbo", {last.elbo});
    table.add(model_kind, "sandwich", "final_gap", {last.gap});
  }
  write_table(out_dir + "/table", table);

  if (!sw.chivi.abort_reason.empty())
    result.meta.warnings.push_back("chivi fit aborted: " +
                                   sw.chivi.abort_reason);
  if (!sw.klvi.abort_reason.empty())
    result.meta.warnings.push_back("klvi fit aborted: " + sw.klvi.abort_reason);
  return result;
}

inline ExperimentResult run_probit_bench(const RunConfig& cfg,
                                         const std::string& out_dir) {
  ExperimentResult result;
  auto ds = build_classification_data(cfg.model, cfg.seed);
  if (cfg.model.value("intercept", true)) ds = with_intercept(ds);
  const double prior_var = cfg.model.value("weight_prior_var", 1.0);
  const std::string dataset_name =
      cfg.model.contains("csv")
          ? std::filesystem::path(cfg.model["csv"].get<std::string>()).stem()
                .string()
          : "synthetic";

  int repeats = cfg.splits.num_repeats;
  if (cfg.paper_scale) repeats = 50;

  auto base_opt = optimizer_from_json(cfg.optimizer);
  std::vector<double> chivi_err(repeats), klvi_err(repeats);
  std::vector<std::string> warnings(repeats);
  std::vector<FitResult> first_fit(1);

  run_parallel(repeats, [&](int r) {
    NoiseStream split_rng(derive_seed(cfg.seed, r), 4);
    Split split = make_split(ds.rows(), cfg.splits.train_fraction, split_rng);
    Dataset train = take_rows(ds, split.train);
    for (int attempt = 0; single_class(train); ++attempt) {
      if (attempt >= 50)
        throw std::runtime_error("probit_bench: could not draw a two-class "
                                 "training split");
      warnings[r] = "repeat " + std::to_string(r) +
                    ": single-class training split, resampled";
      split = make_split(ds.rows(), cfg.splits.train_fraction, split_rng);
      train = take_rows(ds, split.train);
    }
    const Dataset test = take_rows(ds, split.test);

    auto model = make_probit(train, prior_var);
    auto opt = base_opt;
    opt.seed = derive_seed(cfg.seed, r);
    auto init = GaussianParams::zero_init(model.latent_dim);
    auto klvi = klvi_fit(model, init, opt);
    // Warm-start the upper-bound fit from the lower-bound solution: the
    // exponentiated objective has too much gradient variance far from the
    // posterior, where importance weights degenerate to a single draw.
    auto chivi = chivi_fit(model, klvi.params, opt);
    if (!chivi.abort_reason.empty() || !klvi.abort_reason.empty())
      warnings[r] += std::string(warnings[r].empty() ? "" : "; ") + "repeat " +
                     std::to_string(r) + ": fit aborted";
    if (r == 0) {
      std::vector<std::string> gate_note;
      note_if_gated(chivi, "chivi repeat 0", gate_note);
      if (!gate_note.empty())
        warnings[r] += std::string(warnings[r].empty() ? "" : "; ") +
                       gate_note.front();
    }
    chivi_err[r] = probit_test_error(test, chivi.params);
    klvi_err[r] = probit_test_error(test, klvi.params);
    if (r == 0) first_fit[0] = std::move(chivi);
  });

  for (const auto& w : warnings)
    if (!w.empty()) result.meta.warnings.push_back(w);

  write_trace_csv(out_dir + "/trace.csv", first_fit[0].trace);
  ResultTable table;
  table.add(dataset_name, "chivi", "test_error", chivi_err);
  table.add(dataset_name, "klvi", "test_error", klvi_err);
  write_table(out_dir + "/table", table);
  result.meta.notes.push_back(
      "prediction: gaussian-approximate probit predictive, threshold 0.5");
  result.meta.notes.push_back(
      "chivi fits warm-started from the klvi solution");
  return result;
}

// Conditional GP mean of the variational latent at held-out inputs, pushed
// through the link for classification.
inline Vec gp_predict_latent(const GpClassification& gp,
                             const GaussianParams& q, const Mat& test_inputs) {
  const Mat cross = squared_exp_kernel(test_inputs, gp.inputs, gp.kernel);
  return cross * gp.prior->llt.solve(q.mean);
}

inline double gp_test_error(const GpClassification& gp, const GaussianParams& q,
                            const Dataset& test) {
  const Vec f_star = gp_predict_latent(gp, q, test.features);
  int wrong = 0;
  for (int i = 0; i < test.rows(); ++i) {
    const double y_hat = f_star[i] > 0.0 ? 1.0 : -1.0;
    if (y_hat != test.labels[i]) ++wrong;
  }
  return static_cast<double>(wrong) / test.rows();
}

inline ExperimentResult run_gp_bench(const RunConfig& cfg,
                                     const std::string& out_dir) {
  ExperimentResult result;
  auto ds = build_classification_data(cfg.model, cfg.seed);
  const std::string dataset_name =
      cfg.model.contains("csv")
          ? std::filesystem::path(cfg.model["csv"].get<std::string>()).stem()
                .string()
          : "synthetic";

  std::vector<double> sv_grid{0.5, 1.0, 2.0}, ls_grid{0.5, 1.0, 2.0};
  if (cfg.model.contains("kernel_grid")) {
    const auto& g = cfg.model["kernel_grid"];
    if (g.contains("signal_variance"))
      sv_grid = g["signal_variance"].get<std::vector<double>>();
    if (g.contains("lengthscale"))
      ls_grid = g["lengthscale"].get<std::vector<double>>();
  }

  const int folds = cfg.splits.folds;
  require(ds.rows() >= 2 * folds, "gp_bench: dataset too small for the folds");
  NoiseStream shuffle_rng(cfg.seed, 4);
  const auto order = shuffle_rng.subsample(ds.rows(), ds.rows());

  auto base_opt = optimizer_from_json(cfg.optimizer);
  std::vector<double> chivi_err(folds), klvi_err(folds);
  std::vector<std::string> fold_warnings(folds);
  std::vector<FitResult> first_fit(1);

  run_parallel(folds, [&](int fold) {
    std::vector<int> test_idx, train_idx;
    for (int i = 0; i < ds.rows(); ++i)
      (i % folds == fold ? test_idx : train_idx).push_back(order[i]);
    const Dataset train_all = take_rows(ds, train_idx);
    const Dataset test = take_rows(ds, test_idx);

    // inner hold-out slice for the kernel grid search
    const int n_val = std::max(1, train_all.rows() / 5);
    std::vector<int> inner_train, inner_val;
    for (int i = 0; i < train_all.rows(); ++i)
      (i < n_val ? inner_val : inner_train).push_back(i);
    const Dataset fit_part = take_rows(train_all, inner_train);
    const Dataset val_part = take_rows(train_all, inner_val);

    auto opt = base_opt;
    opt.seed = derive_seed(cfg.seed, fold);
    // The GP posterior geometry amplifies rough perturbations of the latent
    // mean through K^-1, so a single degenerate-weight step can ruin the
    // predictive. Gate conservatively unless the config says otherwise.
    if (!cfg.optimizer.contains("min_step_ess")) opt.min_step_ess = 16.0;
    auto inner_opt = opt;
    inner_opt.max_iters = std::min(inner_opt.max_iters, 300);

    KernelParams best;
    double best_err = std::numeric_limits<double>::infinity();
    for (double sv : sv_grid)
      for (double ls : ls_grid) {
        KernelParams k{sv, ls, -1.0};
        try {
          auto gp = make_gp_classification(fit_part, k);
          auto init = GaussianParams::zero_init(gp.model.latent_dim);
          const auto warm = klvi_fit(gp.model, init, inner_opt);
          const auto fit = chivi_fit(gp.model, warm.params, inner_opt);
          const double err = gp_test_error(gp, fit.params, val_part);
          if (err < best_err) {
            best_err = err;
            best = k;
          }
        } catch (const std::exception& e) {
          fold_warnings[fold] = "fold " + std::to_string(fold) +
                                ": kernel candidate skipped: " + e.what();
        }
      }
    if (!std::isfinite(best_err))
      throw std::runtime_error("gp_bench: every kernel candidate failed in "
                               "fold " + std::to_string(fold));

    auto gp = make_gp_classification(train_all, best);
    auto init = GaussianParams::zero_init(gp.model.latent_dim);
    const auto klvi = klvi_fit(gp.model, init, opt);
    auto chivi = chivi_fit(gp.model, klvi.params, opt);
    if (fold == 0) {
      std::vector<std::string> gate_note;
      note_if_gated(chivi, "chivi fold 0", gate_note);
      if (!gate_note.empty())
        fold_warnings[fold] += (fold_warnings[fold].empty() ? "" : "; ") +
                               gate_note.front();
    }
    chivi_err[fold] = gp_test_error(gp, chivi.params, test);
    klvi_err[fold] = gp_test_error(gp, klvi.params, test);
    if (fold == 0) first_fit[0] = std::move(chivi);
  });

  for (const auto& w : fold_warnings)
    if (!w.empty()) result.meta.warnings.push_back(w);

  write_trace_csv(out_dir + "/trace.csv", first_fit[0].trace);
  ResultTable table;
  table.add(dataset_name, "chivi", "test_error", chivi_err);
  table.add(dataset_name, "klvi", "test_error", klvi_err);
  write_table(out_dir + "/table", table);
  result.meta.notes.push_back(
      "chivi fits warm-started from the klvi solution");
  return result;
}

inline ExperimentResult run_cox(const RunConfig& cfg,
                                const std::string& out_dir) {
  ExperimentResult result;
  const auto& m = cfg.model;
  const json grid_cfg = m.value("grid", json::object());
  const int nx = grid_cfg.value("nx", 10), ny = grid_cfg.value("ny", 10);
  const double x_min = grid_cfg.value("x_min", 0.0);
  const double x_max = grid_cfg.value("x_max", 1.0);
  const double y_min = grid_cfg.value("y_min", 0.0);
  const double y_max = grid_cfg.value("y_max", 1.0);

  // The benchmark default uses a visible jitter: at 1e-6 the prior pins the
  // rough directions of the discretized field so hard that every gradient
  // (ELBO included) drowns in the K^-1 noise of its own draws.
  KernelParams kernel{1.0, 0.25, 0.01};
  if (m.contains("kernel")) {
    const auto& k = m["kernel"];
    kernel.signal_variance = k.value("signal_variance", 1.0);
    kernel.lengthscale = k.value("lengthscale", 0.25);
    kernel.jitter = k.value("jitter", 0.01);
  }

  CoxGrid grid;
  if (m.contains("events_csv")) {
    const auto path = m["events_csv"].get<std::string>();
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cox: cannot open " + path);
    std::string line;
    std::getline(in, line);  // header x,y
    std::vector<std::array<double, 2>> pts;
    while (std::getline(in, line)) {
      const auto cells = chivi::detail::split_csv_line(line);
      if (cells.size() < 2) continue;
      pts.push_back({std::stod(cells[0]), std::stod(cells[1])});
    }
    Mat xy(static_cast<int>(pts.size()), 2);
    for (std::size_t i = 0; i < pts.size(); ++i) {
      xy(static_cast<int>(i), 0) = pts[i][0];
      xy(static_cast<int>(i), 1) = pts[i][1];
    }
    grid = CoxGrid::from_events(xy, x_min, x_max, y_min, y_max, nx, ny);
  } else {
    // well-specified synthetic: draw the latent field from the prior,
    // sample cell counts, then blank out a corner to create a data-scarce
    // region
    grid.x_min = x_min; grid.x_max = x_max;
    grid.y_min = y_min; grid.y_max = y_max;
    grid.nx = nx; grid.ny = ny;
    grid.cell_counts.assign(grid.cells(), 0);
    auto prior = GpPrior(
        squared_exp_kernel(grid.cell_centers(), grid.cell_centers(), kernel),
        kernel.effective_jitter());
    NoiseStream field_rng(cfg.seed, 13);
    Vec white(grid.cells());
    for (int i = 0; i < grid.cells(); ++i) white[i] = field_rng.normal();
    const Vec f_true = prior.llt.matrixL() * white;
    const double scale = m.value("intensity_scale", 40.0);
    const double area = grid.cell_area();
    std::mt19937_64 count_rng(derive_seed(cfg.seed, 77));
    const double scarce = m.value("scarce_region_fraction", 0.3);
    for (int iy = 0; iy < ny; ++iy)
      for (int ix = 0; ix < nx; ++ix) {
        const int c = iy * nx + ix;
        std::poisson_distribution<int> pois(area * scale * std::exp(f_true[c]));
        int count = pois(count_rng);
        if (ix < scarce * nx && iy < scarce * ny) count = 0;
        grid.cell_counts[c] = count;
      }
    write_grid_map_csv(out_dir + "/true_field_map.csv", nx, ny, f_true);
    result.meta.notes.push_back("synthetic field, intensity scale " +
                                fmt_short(scale) + ", scarce fraction " +
                                fmt_short(scarce));
  }

  auto cox = make_cox_process(grid, kernel);
  auto opt = optimizer_from_json(cfg.optimizer);
  opt.seed = cfg.seed;
  // same rough-direction amplification concern as the GP benchmark
  if (!cfg.optimizer.contains("min_step_ess")) opt.min_step_ess = 16.0;
  auto init = GaussianParams::zero_init(cox.model.latent_dim);
  const auto klvi = klvi_fit(cox.model, init, opt);
  const auto chivi = chivi_fit(cox.model, klvi.params, opt);
  note_if_gated(chivi, "chivi", result.meta.warnings);
  if (!chivi.abort_reason.empty())
    result.meta.warnings.push_back("chivi fit aborted: " + chivi.abort_reason);
  if (!klvi.abort_reason.empty())
    result.meta.warnings.push_back("klvi fit aborted: " + klvi.abort_reason);
  write_trace_csv(out_dir + "/trace.csv", chivi.trace);

  // ground truth chain, step halved while the acceptance rate is too low
  oracle::HmcConfig hmc;
  hmc.step_size = 0.2;
  hmc.leapfrog_steps = 20;
  hmc.num_samples = 3000;
  hmc.burn_in = 1000;
  if (cfg.oracle.contains("hmc")) {
    const auto& h = cfg.oracle["hmc"];
    hmc.step_size = h.value("step_size", hmc.step_size);
    hmc.leapfrog_steps = h.value("leapfrog_steps", hmc.leapfrog_steps);
    hmc.num_samples = h.value("num_samples", hmc.num_samples);
    hmc.burn_in = h.value("burn_in", hmc.burn_in);
  }
  hmc.seed = cfg.seed;
  // Newton mode and precision diagonal of the latent-Gaussian posterior.
  // Used only to precondition the chain (init + per-coordinate mass); the
  // stationary distribution is unchanged. Without this the tiny-jitter prior
  // makes the leapfrog reject everything at any useful step size.
  const int cells = cox.model.latent_dim;
  const double cell_area = grid.cell_area();
  const Mat kinv = cox.prior->llt.solve(Mat::Identity(cells, cells));
  Vec f_mode = Vec::Zero(cells);
  for (int it = 0; it < 50; ++it) {
    Vec lik_grad(cells), lik_curv(cells);
    for (int i = 0; i < cells; ++i) {
      const double rate = cell_area * std::exp(f_mode[i]);
      lik_grad[i] = grid.cell_counts[i] - rate;
      lik_curv[i] = rate;
    }
    Mat hess = kinv;
    hess.diagonal() += lik_curv;
    const Vec newton = hess.llt().solve(lik_grad - kinv * f_mode);
    f_mode += newton;
    f_mode = f_mode.cwiseMax(-10.0).cwiseMin(10.0);
    if (!f_mode.allFinite())
      throw std::runtime_error("cox: Laplace pilot diverged");
    if (newton.norm() < 1e-8) break;
  }
  hmc.init = f_mode;
  hmc.diag_mass =
      (kinv.diagonal().array() + cell_area * f_mode.array().exp()).matrix();
  oracle::OracleResult truth;
  for (int attempt = 0;; ++attempt) {
    try {
      truth = oracle::hmc_sample(cox.model, hmc);
    } catch (const std::exception& e) {
      if (attempt >= 3) throw;
      hmc.step_size *= 0.5;
      result.meta.warnings.push_back("hmc retry with step " +
                                     fmt_short(hmc.step_size) + ": " + e.what());
      continue;
    }
    if (truth.warning.empty() || attempt >= 3) break;
    if (truth.acceptance_rate > 0.95) break;  // high acceptance is harmless
    hmc.step_size *= 0.5;
    result.meta.warnings.push_back("hmc retry with step " +
                                   fmt_short(hmc.step_size) + ": " +
                                   truth.warning);
  }
  if (!truth.warning.empty()) result.meta.warnings.push_back(truth.warning);
  result.meta.notes.push_back("hmc acceptance " +
                              fmt_short(truth.acceptance_rate));
  result.meta.notes.push_back(
      "chivi fit warm-started from the klvi solution");

  write_grid_map_csv(out_dir + "/chivi_mean_map.csv", nx, ny, chivi.params.mean);
  write_grid_map_csv(out_dir + "/chivi_sd_map.csv", nx, ny,
                     chivi.params.sigma());
  write_grid_map_csv(out_dir + "/klvi_mean_map.csv", nx, ny, klvi.params.mean);
  write_grid_map_csv(out_dir + "/klvi_sd_map.csv", nx, ny, klvi.params.sigma());
  write_grid_map_csv(out_dir + "/hmc_mean_map.csv", nx, ny,
                     truth.posterior_mean);
  write_grid_map_csv(out_dir + "/hmc_sd_map.csv", nx, ny, truth.posterior_sd);

  auto l1 = [&](const Vec& a, const Vec& b) {
    return (a - b).cwiseAbs().mean();
  };
  ResultTable table;
  table.add("cox", "chivi", "sd_l1_vs_hmc",
            {l1(chivi.params.sigma(), truth.posterior_sd)});
  table.add("cox", "klvi", "sd_l1_vs_hmc",
            {l1(klvi.params.sigma(), truth.posterior_sd)});
  table.add("cox", "chivi", "mean_l1_vs_hmc",
            {l1(chivi.params.mean, truth.posterior_mean)});
  table.add("cox", "klvi", "mean_l1_vs_hmc",
            {l1(klvi.params.mean, truth.posterior_mean)});
  write_table(out_dir + "/table", table);
  return result;
}

// ---------------------------------------------------------------------------
// invariant battery

struct PropertyCheck {
  std::string name;
  bool pass = true;
  double slack = 0.0;      // measured margin to the tolerance; >= 0 passes
  double tolerance = 0.0;
  std::string detail;
};

inline ExperimentResult run_property_suite(const RunConfig& cfg,
                                           const std::string& out_dir) {
  ExperimentResult result;
  std::vector<PropertyCheck> checks;
  const bool flip_cubo = cfg.fault_injection == "cubo_sign_flip";

  auto quad_cubo_maybe_flipped = [&](const Model& model,
                                     const GaussianParams& q, double n) {
    const double v = oracle::quad_cubo(model, q, n);
    return flip_cubo ? -v : v;
  };

  auto record = [&](std::string name, double measured, double tolerance,
                    std::string detail = "") {
    PropertyCheck c;
    c.name = std::move(name);
    c.tolerance = tolerance;
    c.slack = tolerance - measured;
    c.pass = measured <= tolerance;
    c.detail = std::move(detail);
    checks.push_back(std::move(c));
  };

  auto random_conjugate = [&](int i) {
    NoiseStream gen(derive_seed(cfg.seed, i), 19);
    Vec m0(1), v0(1);
    m0 << gen.normal();
    v0 << 0.5 + std::abs(gen.normal());
    Mat data(3, 1);
    for (int r = 0; r < 3; ++r) data(r, 0) = m0[0] + gen.normal();
    return make_conjugate_gaussian(m0, v0, 1.0, data);
  };

  // tightness at n = 1
  for (int i = 0; i < 3; ++i) {
    auto cg = random_conjugate(i);
    const double gap =
        std::abs(oracle::quad_cubo(cg.model, GaussianParams::zero_init(1), 1.0) -
                 oracle::quad_evidence(cg.model));
    record("tightness_n1_model" + std::to_string(i), gap, 1e-8);
  }

  // quadrature sandwich and monotonicity, plus the n -> 0 limit
  for (int i = 0; i < 10; ++i) {
    auto cg = random_conjugate(100 + i);
    NoiseStream gen(derive_seed(cfg.seed, 200 + i), 23);
    // q stays close to the posterior so the n -> 0 gap bound is tight
    auto q = GaussianParams::mean_field(
        (cg.posterior_mean.array() + 0.05 * gen.normal()).matrix(),
        (cg.posterior_sd.array().log() + 0.03 * gen.normal()).matrix());
    const double elbo = oracle::quad_elbo(cg.model, q);
    const double log_z = cg.log_evidence;
    record("sandwich_lower_pair" + std::to_string(i), elbo - log_z, 1e-8);
    double prev = -std::numeric_limits<double>::infinity();
    double worst_upper = -std::numeric_limits<double>::infinity();
    double worst_mono = -std::numeric_limits<double>::infinity();
    for (double n : {1.5, 2.0, 3.0, 4.0}) {
      const double cubo = quad_cubo_maybe_flipped(cg.model, q, n);
      worst_upper = std::max(worst_upper, log_z - cubo);
      worst_mono = std::max(worst_mono, prev - cubo);
      prev = cubo;
    }
    record("sandwich_upper_pair" + std::to_string(i), worst_upper, 1e-8);
    record("cubo_monotone_pair" + std::to_string(i), worst_mono, 1e-8,
           flip_cubo ? "fault injection active" : "");
    const double near = oracle::quad_cubo(cg.model, q, 0.01);
    record("cubo_limit_pair" + std::to_string(i), std::abs(near - elbo), 1e-3);
  }

  // importance-sampling variance identity on mismatched gaussians
  for (int i = 0; i < 3; ++i) {
    auto cg = random_conjugate(300 + i);
    auto q = GaussianParams::mean_field(
        (Vec(1) << 0.3 * (i + 1)).finished(),
        (Vec(1) << 0.1 * (i - 1)).finished());
    const auto v = oracle::is_variance(cg.model, q, 100000,
                                       derive_seed(cfg.seed, 400 + i));
    const double err = std::abs(v.empirical - v.identity_value);
    record("is_variance_identity_config" + std::to_string(i), err,
           3.0 * v.empirical_se + 1e-12,
           "empirical " + fmt_short(v.empirical) + " identity " +
               fmt_short(v.identity_value));
  }

  // divergence properties
  {
    auto p = oracle::gaussian_spec((Vec(1) << 0.0).finished(),
                                   (Vec(1) << 1.0).finished());
    auto q = GaussianParams::mean_field((Vec(1) << 0.5).finished(),
                                        (Vec(1) << 0.15).finished());
    const double base = oracle::quad_chi_divergence(p, q, 2.0).value;

    const double a = 2.5, b = -1.0;
    auto p_t = oracle::gaussian_spec((Vec(1) << b).finished(),
                                     (Vec(1) << a).finished());
    auto q_t = GaussianParams::mean_field(
        (Vec(1) << a * 0.5 + b).finished(),
        (Vec(1) << 0.15 + std::log(a)).finished());
    const double mapped = oracle::quad_chi_divergence(p_t, q_t, 2.0).value;
    record("divergence_affine_invariance", std::abs(base - mapped), 1e-6);

    auto p2 = oracle::gaussian_spec((Vec(2) << 0.0, 0.0).finished(),
                                    (Vec(2) << 1.0, 1.0).finished());
    auto q2 = GaussianParams::mean_field((Vec(2) << 0.5, -0.3).finished(),
                                         (Vec(2) << 0.15, 0.2).finished());
    const double joint = oracle::quad_chi_divergence(p2, q2, 2.0).value;
    auto q_b = GaussianParams::mean_field((Vec(1) << -0.3).finished(),
                                          (Vec(1) << 0.2).finished());
    const double d_b = oracle::quad_chi_divergence(p, q_b, 2.0).value;
    record("divergence_factorization",
           std::abs((1.0 + joint) - (1.0 + base) * (1.0 + d_b)), 1e-6);

    // D_f(q || p) = D_{f*}(p || q) for f(t) = (t-1)^2
    auto grid = oracle::grid_for((Vec(1) << 0.0).finished(),
                                 (Vec(1) << 1.5).finished(), 12.0, 4097);
    auto log_p = [](const Vec& z) { return log_normal_pdf(z[0], 0.0, 1.0); };
    auto log_qd = [](const Vec& z) { return log_normal_pdf(z[0], 0.5, 1.3); };
    auto f = [](double t) { return (t - 1.0) * (t - 1.0); };
    const double lhs = oracle::detail::weighted_integrate(
        grid, log_p,
        [&](const Vec& z) { return f(std::exp(log_qd(z) - log_p(z))); });
    const double rhs = oracle::detail::weighted_integrate(
        grid, log_qd, [&](const Vec& z) {
          const double t = std::exp(log_p(z) - log_qd(z));
          return t * f(1.0 / t);
        });
    record("divergence_conjugate_symmetry", std::abs(lhs - rhs), 1e-6);
  }

  // truncated f-divergence series against quadrature KL
  {
    auto p = oracle::gaussian_spec((Vec(1) << 0.0).finished(),
                                   (Vec(1) << 1.0).finished());
    auto q = GaussianParams::mean_field((Vec(1) << 0.04).finished(),
                                        (Vec(1) << 0.02).finished());
    std::vector<double> chi, derivs;
    double fact = 1.0;
    for (int i = 2; i <= 6; ++i) {
      chi.push_back(oracle::quad_chi_divergence(p, q, double(i)).value);
      derivs.push_back((i % 2 == 0 ? 1.0 : -1.0) * fact);
      fact *= (i - 1);
    }
    const double approx = f_divergence_taylor(chi, derivs);
    const double truth = oracle::quad_kl(p, q, oracle::KlDirection::q_from_p);
    record("taylor_kl_truncation", std::abs(approx - truth) / truth, 0.1,
           "chi2 " + fmt_short(chi[0]));
  }

  json report;
  report["suite"] = "property_suite";
  report["seed"] = cfg.seed;
  report["fault_injection"] = cfg.fault_injection;
  int failures = 0;
  for (const auto& c : checks) {
    json entry;
    entry["name"] = c.name;
    entry["pass"] = c.pass;
    entry["slack"] = c.slack;
    entry["tolerance"] = c.tolerance;
    if (!c.detail.empty()) entry["detail"] = c.detail;
    report["checks"].push_back(entry);
    if (!c.pass) {
      ++failures;
      result.meta.warnings.push_back("property check failed: " + c.name);
    }
  }
  report["failures"] = failures;
  write_text(out_dir + "/report.json", report.dump(2) + "\n");
  result.exit_code = failures == 0 ? 0 : 1;
  return result;
}

inline ExperimentResult dispatch_experiment(const RunConfig& cfg,
                                            const std::string& out_dir) {
  if (cfg.experiment == "sandwich") return run_sandwich(cfg, out_dir);
  if (cfg.experiment == "probit_bench") return run_probit_bench(cfg, out_dir);
  if (cfg.experiment == "gp_bench") return run_gp_bench(cfg, out_dir);
  if (cfg.experiment == "cox") return run_cox(cfg, out_dir);
  if (cfg.experiment == "property_suite")
    return run_property_suite(cfg, out_dir);
  throw std::runtime_error("unknown experiment " + cfg.experiment);
}

}  // namespace chivi::cli
