#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>
#include <cmath>

#include "fomemo/metrics.hpp"
#include "fomemo/rng.hpp"

using namespace fomemo;

namespace {
Eigen::MatrixXd mat(std::initializer_list<std::initializer_list<double>> rows) {
  const int n = static_cast<int>(rows.size());
  const int m = static_cast<int>(rows.begin()->size());
  Eigen::MatrixXd out(n, m);
  int i = 0;
  for (const auto& row : rows) {
    int j = 0;
    for (double v : row) out(i, j++) = v;
    ++i;
  }
  return out;
}

Eigen::MatrixXd random_front(Rng& rng, int n, int m) {
  Eigen::MatrixXd pts(n, m);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) pts(i, j) = rng.uniform(0.05, 0.95);
  return pts;
}
}  // namespace

TEST_CASE("min-max normalization maps the trajectory onto [0,1]") {
  const auto nt = normalize_trajectory(mat({{1, 10}, {3, 30}, {2, 20}}));
  REQUIRE(nt.bounds.offset(0) == 1.0);
  REQUIRE(nt.bounds.range(0) == 2.0);
  REQUIRE(nt.values(0, 0) == 0.0);
  REQUIRE(nt.values(1, 1) == 1.0);
  REQUIRE(nt.values(2, 0) == Catch::Approx(0.5));
  REQUIRE(nt.values.minCoeff() >= 0.0);
  REQUIRE(nt.values.maxCoeff() <= 1.0);
}

TEST_CASE("degenerate objectives normalize to zero with unit range") {
  const auto nt = normalize_trajectory(mat({{4, 1}, {4, 2}}));
  REQUIRE(nt.bounds.range(0) == 1.0);
  REQUIRE(nt.bounds.offset(0) == 4.0);
  REQUIRE(nt.values(0, 0) == 0.0);
  REQUIRE(nt.values(1, 0) == 0.0);

  const auto single = normalize_trajectory(mat({{7, -2}}));
  REQUIRE(single.values(0, 0) == 0.0);
  REQUIRE(single.values(0, 1) == 0.0);

  REQUIRE_THROWS_AS(normalize_trajectory(Eigen::MatrixXd(0, 2)),
                    EmptyTrajectory);
}

TEST_CASE("normalization round-trips through its bounds") {
  Rng rng(5);
  Eigen::MatrixXd raw(6, 3);
  for (int i = 0; i < raw.size(); ++i)
    raw.data()[i] = rng.uniform(-10.0, 10.0);
  const auto nt = normalize_trajectory(raw);
  for (int i = 0; i < raw.rows(); ++i)
    for (int j = 0; j < raw.cols(); ++j)
      REQUIRE(nt.values(i, j) * nt.bounds.range(j) + nt.bounds.offset(j) ==
              Catch::Approx(raw(i, j)).margin(1e-12));
}

TEST_CASE("pareto filter keeps exactly the non-dominated points") {
  const auto all = pareto_filter(mat({{0, 1}, {1, 0}, {0.5, 0.5}}));
  REQUIRE(all.rows() == 3);

  const auto one = pareto_filter(mat({{0, 0}, {1, 1}, {0, 0.5}}));
  REQUIRE(one.rows() == 1);
  REQUIRE(one(0, 0) == 0.0);
  REQUIRE(one(0, 1) == 0.0);

  // Exact duplicates collapse to a single copy.
  const auto dedup = pareto_filter(mat({{0, 1}, {0, 1}, {1, 0}}));
  REQUIRE(dedup.rows() == 2);
}

TEST_CASE("igd+ matches an independently written brute force exactly") {
  Rng rng(77);
  for (int trial = 0; trial < 100; ++trial) {
    const int m = 2 + static_cast<int>(rng.uniform_int(0, 1));
    const auto front = random_front(rng, 1 + (int)rng.uniform_int(0, 19), m);
    const auto ref = random_front(rng, 1 + (int)rng.uniform_int(0, 19), m);
    const double got = igd_plus(front, ref);

    double total = 0.0;
    for (int v = 0; v < ref.rows(); ++v) {
      double best = std::numeric_limits<double>::infinity();
      for (int u = 0; u < front.rows(); ++u) {
        double acc = 0.0;
        for (int j = 0; j < m; ++j) {
          const double d = std::max(front(u, j) - ref(v, j), 0.0);
          acc += d * d;
        }
        best = std::min(best, std::sqrt(acc));
      }
      total += best;
    }
    REQUIRE(got == total / ref.rows());
  }
}

TEST_CASE("igd+ is zero for a dominating front and clamps one-sidedly") {
  const auto ref = mat({{0, 1}, {1, 0}, {0.5, 0.5}});
  REQUIRE(igd_plus(ref, ref) == 0.0);
  REQUIRE(igd_plus(mat({{0, 0}}), ref) == 0.0);
  REQUIRE(igd_plus(mat({{1, 1}}), mat({{0, 0}})) ==
          Catch::Approx(std::sqrt(2.0)));
  REQUIRE_THROWS_AS(igd_plus(Eigen::MatrixXd(0, 2), ref), EmptyTrajectory);
  REQUIRE_THROWS_AS(igd_plus(ref, mat({{0.0}})), ShapeError);
}

TEST_CASE("exact 2-d hypervolume sweeps rectangles correctly") {
  Eigen::VectorXd r(2);
  r << 1, 1;
  REQUIRE(hv_exact_2d(mat({{0.25, 0.75}}), r) == Catch::Approx(0.1875));
  REQUIRE(hv_exact_2d(mat({{0.25, 0.75}, {0.75, 0.25}}), r) ==
          Catch::Approx(0.3125));
  // A dominated point contributes nothing.
  REQUIRE(hv_exact_2d(mat({{0.25, 0.75}, {0.75, 0.25}, {0.8, 0.8}}), r) ==
          Catch::Approx(0.3125));
  REQUIRE_THROWS_AS(hv_exact_2d(mat({{0.5, 1.0}}), r), DomainError);
  REQUIRE_THROWS_AS(hv_exact_2d(mat({{0.5, 0.5, 0.5}}), Eigen::VectorXd(3)),
                    ShapeError);
}

TEST_CASE("monte carlo hypervolume agrees with the exact 2-d sweep") {
  Rng rng(123);
  Eigen::VectorXd r(2);
  r << 1, 1;
  const Eigen::VectorXd z = Eigen::VectorXd::Zero(2);
  for (int trial = 0; trial < 5; ++trial) {
    const auto front = random_front(rng, 6, 2);
    const double exact = hv_exact_2d(front, r);
    const double est = hv_estimate(front, r, z, 200000, 1000 + trial);
    REQUIRE(est == Catch::Approx(exact).epsilon(0.02));
  }
}

TEST_CASE("monte carlo hypervolume matches inclusion-exclusion in 3-d") {
  // Three unit-simplex corners against r = 1.1^3; by inclusion-exclusion the
  // union of the three dominated boxes has volume 0.331.
  const auto front = mat({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}});
  Eigen::VectorXd r = Eigen::VectorXd::Constant(3, 1.1);
  const Eigen::VectorXd z = Eigen::VectorXd::Zero(3);
  const double est = hv_estimate(front, r, z, 200000, 9);
  REQUIRE(est == Catch::Approx(0.331).epsilon(0.025));
}

TEST_CASE("normalized hypervolume uses the reference front for scaling") {
  const auto ref = mat({{0, 1}, {1, 0}});
  const auto res = normalized_hv(mat({{0, 1}, {1, 0}}), ref);
  REQUIRE_FALSE(res.empty_after_filter);
  REQUIRE(res.value == Catch::Approx(0.21).margin(1e-12));

  // A front entirely outside the reference box collapses to zero.
  const auto far = normalized_hv(mat({{5, 5}}), ref);
  REQUIRE(far.empty_after_filter);
  REQUIRE(far.value == 0.0);

  // Points outside the box are dropped, the rest still count.
  const auto mixed = normalized_hv(mat({{5, 5}, {0, 1}}), ref);
  REQUIRE_FALSE(mixed.empty_after_filter);
  REQUIRE(mixed.value == Catch::Approx(0.11).margin(1e-12));
}

TEST_CASE("normalized hypervolume handles three objectives via sampling") {
  const auto ref = mat({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}});
  const auto res = normalized_hv(ref, ref, 200000, 7);
  REQUIRE_FALSE(res.empty_after_filter);
  REQUIRE(res.value == Catch::Approx(0.331).epsilon(0.025));
}

TEST_CASE("normalized hypervolume tolerates fronts beating the reference") {
  const auto ref = mat({{0, 1}, {1, 0}});
  // Better than the reference everywhere: normalizes below zero, still works.
  const auto res = normalized_hv(mat({{-0.5, -0.5}}), ref);
  REQUIRE(res.value == Catch::Approx(1.6 * 1.6).margin(1e-12));
}
