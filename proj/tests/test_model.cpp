#include "test_util.hpp"

#include <catch2/catch_amalgamated.hpp>

using namespace chivi;
using chivi_test::fd_gradient;
using chivi_test::max_rel_err;

namespace {

Dataset tiny_probit_data() {
  Dataset ds;
  ds.features.resize(2, 1);
  ds.features << 1.0, -0.5;
  ds.labels.resize(2);
  ds.labels << 1.0, -1.0;
  return ds;
}

}  // namespace

TEST_CASE("log_joint subsample scaling") {
  auto ds = tiny_probit_data();
  auto m = make_probit(ds, 1.0);
  Vec z(1);
  z << 0.3;

  SECTION("all indices equals full") {
    Subsample all{0, 1};
    CHECK(log_joint(m, z, &all) == Catch::Approx(log_joint(m, z)).epsilon(1e-14));
  }
  SECTION("single index scaled by N/M = 2") {
    Subsample one{0};
    CHECK(log_joint(m, z, &one) ==
          Catch::Approx(m.log_prior(z) + 2.0 * m.log_lik_term(0, z)).epsilon(1e-14));
  }
  SECTION("rejects M = 0 and bad indices") {
    Subsample empty;
    CHECK_THROWS_AS(log_joint(m, z, &empty), std::invalid_argument);
    Subsample bad{2};
    CHECK_THROWS_AS(log_joint(m, z, &bad), std::invalid_argument);
  }
}

TEST_CASE("subsampled log_joint is unbiased over subsets") {
  // exhaustive over all size-2 subsets of N = 4
  Dataset ds;
  ds.features.resize(4, 1);
  ds.features << 0.4, -1.1, 2.0, 0.2;
  ds.labels.resize(4);
  ds.labels << 1, -1, 1, 1;
  auto m = make_probit(ds, 2.0);
  Vec z(1);
  z << -0.6;

  double acc = 0.0;
  int count = 0;
  for (int i = 0; i < 4; ++i)
    for (int j = i + 1; j < 4; ++j) {
      Subsample s{i, j};
      acc += log_joint(m, z, &s);
      ++count;
    }
  CHECK(acc / count == Catch::Approx(log_joint(m, z)).epsilon(1e-12));
}

TEST_CASE("conjugate gaussian closed forms") {
  SECTION("single standard datum") {
    auto cg = chivi_test::toy_conjugate_1d(0.0);
    // prior N(0,1), noise 1, x = 0: posterior N(0, 1/2), log p(x) = log N(0; 0, 2)
    CHECK(cg.posterior_mean[0] == Catch::Approx(0.0).margin(1e-14));
    CHECK(cg.posterior_sd[0] == Catch::Approx(std::sqrt(0.5)).epsilon(1e-14));
    CHECK(cg.log_evidence ==
          Catch::Approx(log_normal_pdf(0.0, 0.0, std::sqrt(2.0))).epsilon(1e-14));
  }
  SECTION("zero data points: posterior = prior, log p(x) = 0") {
    Vec m0(1), v0(1);
    m0 << 0.4;
    v0 << 2.0;
    auto cg = make_conjugate_gaussian(m0, v0, 1.0, Mat(0, 1));
    CHECK(cg.log_evidence == 0.0);
    CHECK(cg.posterior_mean[0] == Catch::Approx(0.4));
    CHECK(cg.posterior_sd[0] == Catch::Approx(std::sqrt(2.0)));
  }
  SECTION("diagonal D=2 factorizes into two D=1 problems") {
    Vec m0(2), v0(2);
    m0 << 0.1, -0.4;
    v0 << 1.0, 3.0;
    Mat data(2, 2);
    data << 0.5, 1.0, -0.2, 0.7;
    auto cg2 = make_conjugate_gaussian(m0, v0, 0.8, data);
    double sum = 0.0;
    for (int d = 0; d < 2; ++d) {
      Vec m1(1), v1(1);
      m1 << m0[d];
      v1 << v0[d];
      Mat col(2, 1);
      col << data(0, d), data(1, d);
      auto cg1 = make_conjugate_gaussian(m1, v1, 0.8, col);
      sum += cg1.log_evidence;
      CHECK(cg2.posterior_mean[d] == Catch::Approx(cg1.posterior_mean[0]));
      CHECK(cg2.posterior_sd[d] == Catch::Approx(cg1.posterior_sd[0]));
    }
    CHECK(cg2.log_evidence == Catch::Approx(sum).epsilon(1e-13));
  }
  SECTION("log_joint at posterior mean matches direct Gaussian algebra") {
    auto cg = chivi_test::toy_conjugate_1d(0.9);
    Vec z = cg.posterior_mean;
    const double direct = log_normal_pdf(z[0], 0.0, 1.0) +
                          log_normal_pdf(0.9, z[0], 1.0);
    CHECK(log_joint(cg.model, z) == Catch::Approx(direct).epsilon(1e-14));
  }
  SECTION("rejects non-positive variances") {
    Vec m0 = Vec::Zero(1), v0 = Vec::Zero(1);
    CHECK_THROWS(make_conjugate_gaussian(m0, v0, 1.0, Mat(0, 1)));
    v0 << 1.0;
    CHECK_THROWS(make_conjugate_gaussian(m0, v0, 0.0, Mat(0, 1)));
  }
}

TEST_CASE("probit model basics") {
  auto ds = tiny_probit_data();
  auto m = make_probit(ds, 1.0);

  SECTION("z = 0 gives log(1/2) per term") {
    Vec z = Vec::Zero(1);
    CHECK(m.log_lik_term(0, z) == Catch::Approx(std::log(0.5)).epsilon(1e-14));
    CHECK(m.log_lik_term(1, z) == Catch::Approx(std::log(0.5)).epsilon(1e-14));
  }
  SECTION("deep tail stays finite and matches the oracle") {
    Vec z(1);
    z << -40.0;  // y_1 x_1 z = (-1)(-0.5)(-40) -> t = -20 for datum 1
    const double t = ds.labels[1] * ds.features(1, 0) * z[0];
    CHECK(t == -20.0);
    const double got = m.log_lik_term(1, z);
    CHECK(std::isfinite(got));
    CHECK(std::abs(got - chivi_test::log_ndtr_oracle(t)) < 1e-8 * std::abs(got));
  }
  SECTION("empty dataset rejected") {
    Dataset empty;
    empty.features.resize(0, 1);
    empty.labels.resize(0);
    CHECK_THROWS(make_probit(empty, 1.0));
  }
  SECTION("monotone increasing in y x'z and bounded by 0") {
    double prev = -std::numeric_limits<double>::infinity();
    for (double t = -30.0; t <= 30.0; t += 0.25) {
      const double v = log_ndtr(t);
      CHECK(v >= prev);
      CHECK(v <= 0.0);
      prev = v;
    }
  }
}

TEST_CASE("model gradients match finite differences") {
  NoiseStream rng(42);

  SECTION("conjugate gaussian") {
    Vec m0(2), v0(2);
    m0 << 0.3, -0.8;
    v0 << 1.5, 0.7;
    Mat data(3, 2);
    data << 0.2, 1.1, -0.6, 0.4, 0.9, -0.3;
    auto cg = make_conjugate_gaussian(m0, v0, 1.2, data);
    for (int rep = 0; rep < 20; ++rep) {
      const Vec z = rng.next(2).eps * 2.0;
      const Vec fd = fd_gradient(
          [&](const Vec& zz) { return log_joint(cg.model, zz); }, z);
      CHECK(max_rel_err(grad_z_log_joint(cg.model, z), fd) < 1e-5);
    }
  }

  SECTION("probit, with and without subsample") {
    Dataset ds;
    ds.features.resize(5, 2);
    ds.features << 0.5, -1.0, 1.2, 0.3, -0.7, 0.9, 0.1, -0.2, 2.0, 0.5;
    ds.labels.resize(5);
    ds.labels << 1, -1, 1, 1, -1;
    auto m = make_probit(ds, 2.0);
    Subsample sub{0, 3};
    for (int rep = 0; rep < 20; ++rep) {
      const Vec z = rng.next(2).eps;
      const Vec fd_full =
          fd_gradient([&](const Vec& zz) { return log_joint(m, zz); }, z);
      CHECK(max_rel_err(grad_z_log_joint(m, z), fd_full) < 1e-5);
      const Vec fd_sub = fd_gradient(
          [&](const Vec& zz) { return log_joint(m, zz, &sub); }, z);
      CHECK(max_rel_err(grad_z_log_joint(m, z, &sub), fd_sub) < 1e-5);
    }
  }
}

TEST_CASE("csv loading") {
  const std::string dir = CHIVI_TEST_FIXTURES;

  SECTION("3-row fixture") {
    CsvSchema schema;
    schema.label_column = "cls";
    schema.label_map = {{"b", -1.0}, {"g", 1.0}};
    auto ds = load_csv_dataset(dir + "/tiny.csv", schema);
    REQUIRE(ds.rows() == 3);
    REQUIRE(ds.cols() == 2);
    CHECK(ds.features(0, 0) == Catch::Approx(1.5));
    CHECK(ds.features(2, 1) == Catch::Approx(-0.25));
    CHECK(ds.labels[0] == 1.0);
    CHECK(ds.labels[1] == -1.0);
    CHECK(ds.labels[2] == 1.0);
  }
  SECTION("NaN cell names the row") {
    CsvSchema schema;
    schema.label_column = "cls";
    schema.label_map = {{"b", -1.0}, {"g", 1.0}};
    CHECK_THROWS_WITH(load_csv_dataset(dir + "/bad_nan.csv", schema),
                      Catch::Matchers::ContainsSubstring("row 4"));
  }
  SECTION("missing column") {
    CsvSchema schema;
    schema.label_column = "nope";
    CHECK_THROWS_WITH(load_csv_dataset(dir + "/tiny.csv", schema),
                      Catch::Matchers::ContainsSubstring("nope"));
  }
  SECTION("unmappable label") {
    CsvSchema schema;
    schema.label_column = "cls";
    schema.label_map = {{"g", 1.0}};
    CHECK_THROWS_WITH(load_csv_dataset(dir + "/tiny.csv", schema),
                      Catch::Matchers::ContainsSubstring("label"));
  }
}

TEST_CASE("standardize_features centers and scales") {
  Dataset ds;
  ds.features.resize(4, 2);
  ds.features << 1, 10, 2, 20, 3, 30, 4, 40;
  ds.labels = Vec::Ones(4);
  auto out = standardize_features(ds);
  for (int j = 0; j < 2; ++j) {
    CHECK(out.features.col(j).mean() == Catch::Approx(0.0).margin(1e-12));
    const double sd = std::sqrt(out.features.col(j).squaredNorm() / 3.0);
    CHECK(sd == Catch::Approx(1.0).epsilon(1e-12));
  }
}
