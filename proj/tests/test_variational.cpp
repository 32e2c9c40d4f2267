#include "test_util.hpp"

#include <catch2/catch_amalgamated.hpp>

using namespace chivi;
using chivi_test::fd_gradient;
using chivi_test::max_rel_err;

TEST_CASE("reparam_sample") {
  auto p = GaussianParams::mean_field((Vec(2) << 0.5, -1.0).finished(),
                                      (Vec(2) << 0.0, std::log(2.0)).finished());
  SECTION("eps = 0 gives the mean") {
    NoiseDraw d;
    d.eps = Vec::Zero(2);
    CHECK((reparam_sample(p, d) - p.mean).norm() == 0.0);
  }
  SECTION("unit scale passes eps through") {
    auto q = GaussianParams::zero_init(2);
    NoiseDraw d;
    d.eps = (Vec(2) << 1.0, -1.0).finished();
    const Vec z = reparam_sample(q, d);
    CHECK(z[0] == 1.0);
    CHECK(z[1] == -1.0);
  }
  SECTION("dimension mismatch rejected") {
    NoiseDraw d;
    d.eps = Vec::Zero(3);
    CHECK_THROWS(reparam_sample(p, d));
  }
  SECTION("empirical covariance matches diag(exp(2 l))") {
    NoiseStream rng(1234);
    const int n = 100000;
    Vec sum = Vec::Zero(2), sum_sq = Vec::Zero(2);
    for (int s = 0; s < n; ++s) {
      const Vec z = reparam_sample(p, rng.next(2));
      sum += z;
      sum_sq += z.cwiseProduct(z);
    }
    for (int d = 0; d < 2; ++d) {
      const double var = sum_sq[d] / n - std::pow(sum[d] / n, 2);
      const double want = std::exp(2.0 * p.log_scale[d]);
      // var of sample variance ~ 2 var^2 / n
      const double se = want * std::sqrt(2.0 / n);
      CHECK(std::abs(var - want) < 3.0 * se);
    }
  }
}

TEST_CASE("log_q closed forms") {
  SECTION("standard normal mode") {
    auto p = GaussianParams::zero_init(1);
    CHECK(log_q(p, Vec::Zero(1)) ==
          Catch::Approx(-0.5 * kLog2Pi).epsilon(1e-14));
  }
  SECTION("value at the mean for any scale") {
    auto p = GaussianParams::mean_field((Vec(3) << 1, 2, 3).finished(),
                                        (Vec(3) << 0.3, -0.7, 1.1).finished());
    CHECK(log_q(p, p.mean) ==
          Catch::Approx(-0.5 * 3 * kLog2Pi - p.log_scale.sum()).epsilon(1e-14));
  }
  SECTION("factorizes over dimensions") {
    auto p2 = GaussianParams::mean_field((Vec(2) << 0.4, -0.9).finished(),
                                         (Vec(2) << 0.2, -0.1).finished());
    Vec z(2);
    z << 1.3, 0.2;
    double sum = 0.0;
    for (int d = 0; d < 2; ++d) {
      auto p1 = GaussianParams::mean_field(p2.mean.segment(d, 1),
                                           p2.log_scale.segment(d, 1));
      sum += log_q(p1, z.segment(d, 1));
    }
    CHECK(log_q(p2, z) == Catch::Approx(sum).epsilon(1e-14));
  }
  SECTION("full-rank with L = I equals mean-field with l = 0") {
    auto fr = GaussianParams::full_rank(Vec::Zero(2), Mat::Identity(2, 2));
    auto mf = GaussianParams::zero_init(2);
    Vec z(2);
    z << 0.7, -1.2;
    CHECK(log_q(fr, z) == Catch::Approx(log_q(mf, z)).epsilon(1e-14));
    CHECK(entropy(fr) == Catch::Approx(entropy(mf)).epsilon(1e-14));
  }
}

TEST_CASE("grad_params_log_q") {
  auto p = GaussianParams::mean_field((Vec(2) << 0.2, -0.5).finished(),
                                      (Vec(2) << 0.1, -0.4).finished());
  SECTION("at the mode") {
    const auto g = grad_params_log_q(p, p.mean);
    CHECK(g.d_mean.norm() == Catch::Approx(0.0).margin(1e-14));
    CHECK(g.d_log_scale[0] == Catch::Approx(-1.0));
    CHECK(g.d_log_scale[1] == Catch::Approx(-1.0));
  }
  SECTION("hand value: mu=0, sigma=1, z=2") {
    auto q = GaussianParams::zero_init(1);
    const auto g = grad_params_log_q(q, (Vec(1) << 2.0).finished());
    CHECK(g.d_mean[0] == Catch::Approx(2.0));
    CHECK(g.d_log_scale[0] == Catch::Approx(3.0));
  }
  SECTION("matches finite differences in the parameters") {
    NoiseStream rng(9);
    for (int rep = 0; rep < 10; ++rep) {
      const Vec z = rng.next(2).eps * 1.5;
      const auto g = grad_params_log_q(p, z);
      const Vec fd_mean = fd_gradient(
          [&](const Vec& mu) {
            auto q = GaussianParams::mean_field(mu, p.log_scale);
            return log_q(q, z);
          },
          p.mean, 1e-6);
      const Vec fd_ell = fd_gradient(
          [&](const Vec& ell) {
            auto q = GaussianParams::mean_field(p.mean, ell);
            return log_q(q, z);
          },
          p.log_scale, 1e-6);
      CHECK(max_rel_err(g.d_mean, fd_mean) < 1e-6);
      CHECK(max_rel_err(g.d_log_scale, fd_ell) < 1e-6);
    }
  }
}

TEST_CASE("entropy") {
  SECTION("standard normal") {
    auto p = GaussianParams::zero_init(1);
    CHECK(entropy(p) == Catch::Approx(0.5 * (1.0 + kLog2Pi)).epsilon(1e-14));
  }
  SECTION("doubling sigma adds log 2 per dimension") {
    auto p = GaussianParams::zero_init(3);
    auto q = GaussianParams::mean_field(Vec::Zero(3),
                                        Vec::Constant(3, std::log(2.0)));
    CHECK(entropy(q) - entropy(p) == Catch::Approx(3.0 * std::log(2.0)).epsilon(1e-13));
  }
  SECTION("pushforward: mean of log_q over samples ~ -entropy") {
    auto p = GaussianParams::mean_field((Vec(2) << 0.3, -0.2).finished(),
                                        (Vec(2) << -0.5, 0.4).finished());
    NoiseStream rng(77);
    const int n = 100000;
    std::vector<double> vals(n);
    for (int s = 0; s < n; ++s)
      vals[s] = log_q(p, reparam_sample(p, rng.next(2)));
    const auto ms = mean_std(vals);
    const double se = ms.std / std::sqrt(double(n));
    CHECK(std::abs(ms.mean + entropy(p)) < 3.0 * se);
  }
}

TEST_CASE("fixed seed reproduces the whole stream") {
  NoiseStream a(555, 2), b(555, 2);
  for (int i = 0; i < 100; ++i) {
    const auto da = a.next(3);
    const auto db = b.next(3);
    CHECK(da.eps == db.eps);
    CHECK(da.index == db.index);
  }
  // distinct streams differ
  NoiseStream c(555, 3);
  CHECK(NoiseStream(555, 2).next(3).eps != c.next(3).eps);
}

TEST_CASE("params JSON round trip") {
  auto p = GaussianParams::mean_field((Vec(2) << 0.25, -1.5).finished(),
                                      (Vec(2) << 0.0, 0.75).finished());
  const auto j = to_json(p);
  CHECK(j["family"] == "mean_field");
  const auto back = params_from_json(j);
  CHECK((back.mean - p.mean).norm() == 0.0);
  CHECK((back.log_scale - p.log_scale).norm() == 0.0);

  Mat tril(2, 2);
  tril << 1.0, 0.0, 0.3, 0.8;
  auto fr = GaussianParams::full_rank(Vec::Zero(2), tril);
  const auto back_fr = params_from_json(to_json(fr));
  CHECK(back_fr.family == Family::full_rank);
  CHECK((back_fr.scale_tril - tril).cwiseAbs().maxCoeff() == 0.0);
}
