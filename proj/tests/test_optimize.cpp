#include "test_util.hpp"

#include <catch2/catch_amalgamated.hpp>

using namespace chivi;

namespace {

Dataset small_probit_data() {
  Dataset ds;
  ds.features.resize(5, 2);
  ds.features << 0.8, -0.3, 1.4, 0.6, -0.5, 1.0, 0.2, -1.2, 1.8, 0.4;
  ds.labels.resize(5);
  ds.labels << 1, 1, -1, -1, 1;
  return ds;
}

OptimizerConfig quiet_config() {
  OptimizerConfig cfg;
  // exp-bound gradients concentrate on few draws; a healthy per-step batch
  // keeps the scale updates from collapsing
  cfg.schedule.base_rate = 0.02;
  cfg.samples_per_step = 256;
  cfg.max_iters = 600;
  cfg.trace_every = 10;
  cfg.monitor_samples = 500;
  cfg.seed = 3;
  return cfg;
}

bool same_trace(const std::vector<TraceRow>& a, const std::vector<TraceRow>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i].iteration != b[i].iteration || a[i].elbo != b[i].elbo ||
        a[i].cubo != b[i].cubo || a[i].grad_norm != b[i].grad_norm)
      return false;
  return true;
}

// exact posterior marginal moments by brute-force quadrature
struct Moments {
  Vec mean, sd;
};

Moments posterior_moments(const Model& model) {
  const auto pilot = oracle::laplace_pilot(model);
  const auto grid = oracle::grid_for(pilot.mode, pilot.sd, 8.0, 257);
  const double log_z = oracle::quad_evidence(model);
  auto log_post = [&](const Vec& z) { return log_joint(model, z) - log_z; };
  Moments m;
  m.mean = Vec(model.latent_dim);
  m.sd = Vec(model.latent_dim);
  for (int k = 0; k < model.latent_dim; ++k) {
    m.mean[k] = oracle::detail::weighted_integrate(
        grid, log_post, [&](const Vec& z) { return z[k]; });
    const double second = oracle::detail::weighted_integrate(
        grid, log_post, [&](const Vec& z) { return z[k] * z[k]; });
    m.sd[k] = std::sqrt(second - m.mean[k] * m.mean[k]);
  }
  return m;
}

}  // namespace

TEST_CASE("step_size schedule") {
  Schedule s;
  s.kind = ScheduleKind::robbins_monro;
  s.base_rate = 0.1;
  s.decay = 1.0;
  CHECK(step_size(s, 0) == Catch::Approx(0.1));
  CHECK(step_size(s, 9) == Catch::Approx(0.01));

  s.decay = 0.6;
  CHECK(step_size(s, 0) == Catch::Approx(0.1));
  CHECK(step_size(s, 3) == Catch::Approx(0.1 / std::pow(4.0, 0.6)));

  SECTION("decay outside (0.5, 1] rejected") {
    s.decay = 0.5;
    CHECK_THROWS(step_size(s, 1));
    s.decay = 1.01;
    CHECK_THROWS(step_size(s, 1));
  }
  SECTION("adaptive ignores t") {
    Schedule a;
    CHECK(step_size(a, 0) == step_size(a, 1000));
  }
}

TEST_CASE("adam update") {
  Schedule s;
  AdamState st;
  st.init(2);
  SECTION("zero gradient moves nothing") {
    const Vec u = st.update(Vec::Zero(2), s);
    CHECK(u.norm() == 0.0);
  }
  SECTION("first step is base_rate in the gradient's sign pattern") {
    Vec g(2);
    g << 3.0, -0.5;
    const Vec u = st.update(g, s);
    // bias correction makes |update| ~ base_rate regardless of magnitude
    CHECK(u[0] == Catch::Approx(s.base_rate).epsilon(1e-6));
    CHECK(u[1] == Catch::Approx(-s.base_rate).epsilon(1e-6));
  }
}

TEST_CASE("max_iters = 0 is a no-op") {
  auto cg = chivi_test::toy_conjugate_1d(0.5);
  auto init = GaussianParams::mean_field((Vec(1) << 0.7).finished(),
                                         (Vec(1) << -0.2).finished());
  auto cfg = quiet_config();
  cfg.max_iters = 0;
  const auto fit = chivi_fit(cg.model, init, cfg);
  CHECK(fit.iterations_run == 0);
  CHECK(fit.trace.empty());
  CHECK_FALSE(fit.converged);
  CHECK((fit.params.mean - init.mean).norm() == 0.0);
  CHECK((fit.params.log_scale - init.log_scale).norm() == 0.0);
}

TEST_CASE("minibatch = N reproduces the full-batch path bit for bit") {
  auto m = make_probit(small_probit_data(), 1.0);
  auto init = GaussianParams::zero_init(2);
  auto cfg = quiet_config();
  cfg.max_iters = 60;
  cfg.minibatch = m.data_count;
  const auto sub = chivi_fit(m, init, cfg);
  const auto full = chivi_fit_full(m, init, cfg);
  CHECK((sub.params.mean - full.params.mean).norm() == 0.0);
  CHECK((sub.params.log_scale - full.params.log_scale).norm() == 0.0);
  CHECK(same_trace(sub.trace, full.trace));
}

TEST_CASE("same seed gives identical fits") {
  auto m = make_probit(small_probit_data(), 1.0);
  auto init = GaussianParams::zero_init(2);
  auto cfg = quiet_config();
  cfg.max_iters = 80;
  cfg.minibatch = 3;
  const auto a = chivi_fit(m, init, cfg);
  const auto b = chivi_fit(m, init, cfg);
  CHECK((a.params.mean - b.params.mean).norm() == 0.0);
  CHECK((a.params.log_scale - b.params.log_scale).norm() == 0.0);
  CHECK(same_trace(a.trace, b.trace));
  CHECK(a.iterations_run == b.iterations_run);

  auto cfg2 = cfg;
  cfg2.seed = cfg.seed + 1;
  const auto c = chivi_fit(m, init, cfg2);
  CHECK((a.params.mean - c.params.mean).norm() != 0.0);
}

TEST_CASE("chivi_fit recovers the conjugate posterior") {
  auto cg = chivi_test::toy_conjugate_1d(1.0);
  auto cfg = quiet_config();
  cfg.max_iters = 800;
  const auto fit = chivi_fit(cg.model, GaussianParams::zero_init(1), cfg);
  REQUIRE(fit.abort_reason.empty());
  CHECK(std::abs(fit.params.mean[0] - cg.posterior_mean[0]) < 0.05);
  CHECK(std::abs(fit.params.sigma()[0] - cg.posterior_sd[0]) < 0.05);
  // final monitor row brackets the evidence up to MC noise
  const auto& last = fit.trace.back();
  CHECK(last.elbo <= cg.log_evidence + 3 * last.elbo_se);
  CHECK(last.cubo >= cg.log_evidence - 3 * last.cubo_se);
  CHECK(std::abs(last.cubo - cg.log_evidence) < 0.02);
}

TEST_CASE("klvi_fit recovers the conjugate posterior") {
  auto cg = chivi_test::toy_conjugate_1d(-0.6);
  auto cfg = quiet_config();
  cfg.max_iters = 800;
  const auto fit = klvi_fit(cg.model, GaussianParams::zero_init(1), cfg);
  REQUIRE(fit.abort_reason.empty());
  CHECK(std::abs(fit.params.mean[0] - cg.posterior_mean[0]) < 0.05);
  CHECK(std::abs(fit.params.sigma()[0] - cg.posterior_sd[0]) < 0.05);
  const auto& last = fit.trace.back();
  CHECK(std::abs(last.elbo - cg.log_evidence) < 0.02);
}

TEST_CASE("every monitor row keeps elbo below cubo") {
  auto m = make_probit(small_probit_data(), 1.0);
  auto cfg = quiet_config();
  cfg.max_iters = 200;
  const auto fit = chivi_fit(m, GaussianParams::zero_init(2), cfg);
  REQUIRE(!fit.trace.empty());
  for (const auto& row : fit.trace) {
    const double joint_se =
        std::sqrt(row.elbo_se * row.elbo_se + row.cubo_se * row.cubo_se);
    CHECK(row.elbo <= row.cubo + 3 * joint_se);
  }
  // iterations strictly increasing
  for (std::size_t i = 1; i < fit.trace.size(); ++i)
    CHECK(fit.trace[i].iteration > fit.trace[i - 1].iteration);
}

TEST_CASE("cubo fit is wider than the elbo fit on a skewed posterior") {
  auto m = make_probit(small_probit_data(), 2.0);
  auto cfg = quiet_config();
  cfg.max_iters = 1200;
  const auto wide = chivi_fit(m, GaussianParams::zero_init(2), cfg);
  const auto narrow = klvi_fit(m, GaussianParams::zero_init(2), cfg);
  REQUIRE(wide.abort_reason.empty());
  REQUIRE(narrow.abort_reason.empty());

  const auto truth = posterior_moments(m);
  for (int k = 0; k < 2; ++k) {
    INFO("dim " << k << ": chivi sd " << wide.params.sigma()[k] << ", klvi sd "
                << narrow.params.sigma()[k] << ", exact " << truth.sd[k]);
    // the chi^2 fit covers the posterior; the KL fit may underestimate
    CHECK(wide.params.sigma()[k] > narrow.params.sigma()[k] - 0.02);
    CHECK(wide.params.sigma()[k] > 0.85 * truth.sd[k]);
    CHECK(std::abs(wide.params.mean[k] - truth.mean[k]) < 0.15);
  }
}

TEST_CASE("divergence guards abort with a reason") {
  auto cg = chivi_test::toy_conjugate_1d(0.3);
  SECTION("gradient norm bound") {
    auto cfg = quiet_config();
    cfg.max_grad_norm = 1e-12;
    const auto fit = chivi_fit(cg.model, GaussianParams::zero_init(1), cfg);
    CHECK(!fit.abort_reason.empty());
    CHECK(fit.iterations_run == 0);
    CHECK_FALSE(fit.converged);
  }
  SECTION("parameter magnitude bound") {
    auto cfg = quiet_config();
    cfg.max_param_abs = 1e-3;
    auto init = GaussianParams::mean_field((Vec(1) << 0.9).finished(),
                                           Vec::Zero(1));
    const auto fit = chivi_fit(cg.model, init, cfg);
    CHECK(!fit.abort_reason.empty());
  }
  SECTION("gradient failure is reported, not thrown") {
    Model bad;
    bad.latent_dim = 1;
    bad.data_count = 1;
    bad.log_prior = [](const Vec&) {
      return std::numeric_limits<double>::quiet_NaN();
    };
    bad.log_lik_term = [](int, const Vec&) { return 0.0; };
    bad.accum_grad_log_prior = [](const Vec&, Vec&) {};
    bad.accum_grad_log_lik = [](int, const Vec&, double, Vec&) {};
    auto cfg = quiet_config();
    const auto fit = chivi_fit(bad, GaussianParams::zero_init(1), cfg);
    CHECK(fit.abort_reason.find("gradient evaluation failed") !=
          std::string::npos);
  }
}

TEST_CASE("log-scale clamp is counted and respected") {
  auto cg = chivi_test::toy_conjugate_1d(0.2);
  auto cfg = quiet_config();
  cfg.schedule.base_rate = 0.2;
  cfg.log_scale_min = -0.05;
  cfg.log_scale_max = 0.05;
  cfg.max_iters = 50;
  cfg.average_tail = 0.0;
  const auto fit = chivi_fit(cg.model, GaussianParams::zero_init(1), cfg);
  CHECK(fit.clamp_events > 0);
  CHECK(fit.params.log_scale[0] >= cfg.log_scale_min - 1e-12);
  CHECK(fit.params.log_scale[0] <= cfg.log_scale_max + 1e-12);
}

TEST_CASE("checkpoint hook fires on schedule") {
  auto cg = chivi_test::toy_conjugate_1d(0.4);
  auto cfg = quiet_config();
  cfg.max_iters = 25;
  FitHooks hooks;
  hooks.checkpoint_every = 10;
  std::vector<int> seen;
  hooks.checkpoint = [&](int iter, const GaussianParams&) {
    seen.push_back(iter);
  };
  chivi_fit(cg.model, GaussianParams::zero_init(1), cfg, hooks);
  CHECK(seen == std::vector<int>{10, 20});
}

TEST_CASE("window convergence stops an easy run early") {
  auto cg = chivi_test::toy_conjugate_1d(0.1);
  auto cfg = quiet_config();
  cfg.max_iters = 2000;
  cfg.convergence.window = 5;
  cfg.convergence.tol = 1e-4;
  const auto fit = chivi_fit(cg.model, GaussianParams::zero_init(1), cfg);
  CHECK(fit.converged);
  CHECK(fit.iterations_run < cfg.max_iters);
}

TEST_CASE("sandwich_run") {
  auto m = make_probit(small_probit_data(), 1.0);
  auto init = GaussianParams::zero_init(2);

  SECTION("gap narrows and stays nonnegative up to noise") {
    auto cfg = quiet_config();
    cfg.max_iters = 600;
    const auto sw = sandwich_run(m, init, cfg, cfg);
    REQUIRE(!sw.gap_trace.empty());
    const auto& first = sw.gap_trace.front();
    const auto& last = sw.gap_trace.back();
    CHECK(last.gap <= first.gap + 3 * (first.joint_se + last.joint_se));
    for (const auto& row : sw.gap_trace)
      CHECK(row.gap >= -3 * row.joint_se);
    // both endpoints bracket the quadrature evidence
    const double log_z = oracle::quad_evidence(m);
    CHECK(last.elbo <= log_z + 3 * last.joint_se);
    CHECK(last.cubo >= log_z - 3 * last.joint_se);
  }
  SECTION("final gap grows with the divergence order") {
    double prev = -1.0;
    for (double n : {1.5, 2.0, 4.0}) {
      auto cfg = quiet_config();
      cfg.n = n;
      cfg.max_iters = 600;
      const auto sw = sandwich_run(m, init, cfg, cfg);
      const double gap = sw.gap_trace.back().gap;
      INFO("n = " << n << " gap = " << gap);
      CHECK(gap >= prev - 0.02);
      prev = gap;
    }
  }
  SECTION("zero iterations give an empty gap trace") {
    auto cfg = quiet_config();
    cfg.max_iters = 0;
    const auto sw = sandwich_run(m, init, cfg, cfg);
    CHECK(sw.gap_trace.empty());
  }
}
