#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>
#include <cmath>
#include <vector>

#include "fomemo/acquisition.hpp"
#include "fomemo/model.hpp"
#include "fomemo/riemann.hpp"
#include "fomemo/rng.hpp"

using namespace fomemo;

namespace {

ModelConfig tiny_mc() {
  ModelConfig c;
  c.embed_dim = 32;
  c.ff_dim = 64;
  c.n_heads = 2;
  c.n_layers = 2;
  c.n_bins = 32;
  c.max_input_dim = 4;
  c.max_objectives = 2;
  c.max_tokens = 16;
  return c;
}

// Small model with a randomized head so posteriors vary across queries.
ModelParams<double> tiny_model(std::uint64_t seed) {
  ModelParams<double> p = init_params<double>(tiny_mc(), seed, false);
  return p;
}

// Support over strictly negative values, mirroring normalized aggregation
// targets. Shifted well below zero so that even the half-normal upper tail
// keeps posterior UCBs negative, the domain of the reduction identities.
RiemannSupport negative_support(int bins, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> samples;
  samples.reserve(4000);
  for (int i = 0; i < 4000; ++i)
    samples.push_back(-std::abs(rng.normal()) * 0.3 - 0.5);
  return build_riemann_support(std::move(samples), bins);
}

Eigen::MatrixXd random_unit(Rng& rng, int rows, int cols) {
  Eigen::MatrixXd m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = rng.uniform();
  return m;
}

AcquisitionSpec fast_spec(AcqKind kind) {
  AcquisitionSpec s;
  s.kind = kind;
  s.candidate_pool = 48;
  s.restarts = 4;
  s.refine_steps = 6;
  s.n_pref_samples = 8;
  return s;
}

}  // namespace

TEST_CASE("best aggregation over the trajectory") {
  Eigen::MatrixXd y(1, 2);
  y << 0.2, 0.4;
  const Preference lam = Preference::project(Eigen::Vector2d(0.5, 0.5));
  CHECK(best_aggregation(y, lam) == Catch::Approx(-0.2).margin(1e-12));

  // Adding points can only raise the max.
  Rng rng(5);
  Eigen::MatrixXd traj = random_unit(rng, 1, 2);
  double prev = best_aggregation(traj, lam);
  for (int i = 0; i < 20; ++i) {
    traj.conservativeResize(traj.rows() + 1, 2);
    traj.row(traj.rows() - 1) = random_unit(rng, 1, 2);
    const double cur = best_aggregation(traj, lam);
    CHECK(cur >= prev);
    prev = cur;
  }

  // A near-degenerate preference is decided by the first objective up to
  // floor-sized effects.
  const Preference edge = Preference::project(Eigen::Vector2d(1.0, 0.0));
  Eigen::MatrixXd two(2, 2);
  two << 0.3, 0.9, 0.5, 0.1;
  CHECK(best_aggregation(two, edge) ==
        Catch::Approx(-0.3).margin(2 * kPreferenceFloor));

  CHECK_THROWS_AS(best_aggregation(Eigen::MatrixXd(0, 2), lam),
                  EmptyTrajectory);
}

TEST_CASE("ei and ucb over histogram posteriors") {
  const RiemannSupport support = negative_support(32, 9);
  Rng rng(2);
  Eigen::VectorXd raw(32);
  for (int i = 0; i < 32; ++i) raw(i) = rng.uniform() + 0.01;
  const Eigen::VectorXd probs = raw / raw.sum();
  const PosteriorHistogram post(support, probs);

  SECTION("ucb identities") {
    CHECK(acq_ucb(post, 0.0) == Catch::Approx(post.mean()).margin(1e-15));
    CHECK(acq_ucb(post, 1.0) ==
          Catch::Approx(post.mean() + post.stddev()).margin(1e-15));
    double prev = acq_ucb(post, 0.0);
    for (double beta : {0.5, 1.0, 2.0, 5.0}) {
      const double cur = acq_ucb(post, beta);
      CHECK(cur >= prev);
      prev = cur;
    }
    CHECK_THROWS_AS(acq_ucb(post, -0.1), DomainError);
  }

  SECTION("ei nonnegative, zero above the support, monotone in g*") {
    CHECK(acq_ei(post, -10.0) >= 0.0);
    // Far above every bin and both tails: no mass can improve.
    CHECK(acq_ei(post, 50.0) == Catch::Approx(0.0).margin(1e-12));
    double prev = acq_ei(post, -2.0);
    for (double g = -1.5; g < 1.0; g += 0.25) {
      const double cur = acq_ei(post, g);
      CHECK(cur <= prev + 1e-12);
      prev = cur;
    }
  }
}

TEST_CASE("uhvi reduction and clamp behavior") {
  const ModelConfig mc = tiny_mc();
  const auto params = tiny_model(21);
  const RiemannSupport support = negative_support(mc.n_bins, 13);
  Rng rng(77);

  SECTION("m=1 reduces to max(0, ucb - g_best)") {
    const std::vector<Preference> lam = {
        Preference(Eigen::VectorXd::Ones(1))};
    for (int t = 0; t < 25; ++t) {
      const int n = 3 + t % 5;
      const Eigen::MatrixXd tx = random_unit(rng, n, 2);
      Eigen::MatrixXd ty = random_unit(rng, n, 1);
      const Eigen::VectorXd x = random_unit(rng, 1, 2).row(0).transpose();

      const double u = acq_uhvi(params, support, tx, ty, x, lam, 1.0);
      const Eigen::MatrixXd probs =
          candidate_probs(params, tx, ty, x.transpose(), lam[0]);
      const double ucb = riemann_mean(support, probs.row(0).transpose()) +
                         riemann_std(support, probs.row(0).transpose());
      REQUIRE(ucb < 0.0);  // the identity's domain; support is negative
      const double gbest = best_aggregation(ty, lam[0]);
      CHECK(u == Catch::Approx(std::max(0.0, ucb - gbest)).margin(1e-6));
    }
  }

  SECTION("positive ucb is clamped out of the candidate term") {
    // A support with almost all mass at +1 forces UCB > 0; the candidate
    // term then contributes nothing and the utility is the best-point term.
    std::vector<double> pos;
    Rng prng(4);
    for (int i = 0; i < 4000; ++i) pos.push_back(1.0 + 0.1 * prng.normal());
    const RiemannSupport pos_support =
        build_riemann_support(std::move(pos), mc.n_bins);
    const std::vector<Preference> lam = {
        Preference(Eigen::VectorXd::Ones(1))};
    const Eigen::MatrixXd tx = random_unit(rng, 4, 2);
    Eigen::MatrixXd ty(4, 1);
    ty << 0.3, 0.55, 0.8, 1.0;  // g_best = -0.3
    const Eigen::VectorXd x = random_unit(rng, 1, 2).row(0).transpose();

    const Eigen::MatrixXd probs =
        candidate_probs(params, tx, ty, x.transpose(), lam[0]);
    const double ucb = riemann_mean(pos_support, probs.row(0).transpose()) +
                       riemann_std(pos_support, probs.row(0).transpose());
    REQUIRE(ucb > 0.0);
    const double u = acq_uhvi(params, pos_support, tx, ty, x, lam, 1.0);
    CHECK(u == Catch::Approx(0.3).margin(1e-9));
  }

  SECTION("nonnegative for random preference sets at m=2") {
    std::vector<Preference> prefs;
    for (int p = 0; p < 6; ++p) prefs.push_back(sample_preference(rng, 2));
    const Eigen::MatrixXd tx = random_unit(rng, 5, 2);
    const Eigen::MatrixXd ty = random_unit(rng, 5, 2);
    const Eigen::MatrixXd X = random_unit(rng, 7, 2);
    const Eigen::VectorXd u =
        uhvi_utilities(params, support, tx, ty, X, prefs, 1.0);
    REQUIRE(u.size() == 7);
    for (int i = 0; i < u.size(); ++i) CHECK(u(i) >= 0.0);
  }
}

TEST_CASE("optimize_utility") {
  SECTION("constant landscape: any pool point, equal utilities") {
    const BatchScorer flat = [](const Eigen::MatrixXd& X) {
      return Eigen::VectorXd::Constant(X.rows(), 0.75);
    };
    Rng rng(3);
    const OptimizeResult res = optimize_utility(flat, 3, 32, 4, 5, rng);
    CHECK(res.utility == Catch::Approx(0.75).margin(1e-9));
    for (int i = 0; i < 3; ++i) {
      CHECK(res.x(i) >= 0.0);
      CHECK(res.x(i) <= 1.0);
    }
  }

  SECTION("refinement never loses to the pool") {
    const Eigen::Vector2d target(0.3123, 0.7841);
    const BatchScorer bowl = [&](const Eigen::MatrixXd& X) {
      Eigen::VectorXd u(X.rows());
      for (Eigen::Index i = 0; i < X.rows(); ++i)
        u(i) = -(X.row(i).transpose() - target).squaredNorm();
      return u;
    };
    Rng rng_pool(17);
    const OptimizeResult pool_only =
        optimize_utility(bowl, 2, 64, 8, 0, rng_pool);
    Rng rng_ref(17);
    const OptimizeResult refined =
        optimize_utility(bowl, 2, 64, 8, 40, rng_ref);
    CHECK(refined.utility >= pool_only.utility);
    // The bowl's argmax sits inside the cube, so refinement should close in.
    CHECK((refined.x - target).norm() < (pool_only.x - target).norm() + 1e-12);
  }

  SECTION("deterministic under a fixed seed") {
    const BatchScorer wavy = [](const Eigen::MatrixXd& X) {
      Eigen::VectorXd u(X.rows());
      for (Eigen::Index i = 0; i < X.rows(); ++i)
        u(i) = std::sin(7.0 * X(i, 0)) * std::cos(3.0 * X(i, 1));
      return u;
    };
    Rng a(99), b(99);
    const OptimizeResult ra = optimize_utility(wavy, 2, 32, 4, 10, a);
    const OptimizeResult rb = optimize_utility(wavy, 2, 32, 4, 10, b);
    REQUIRE(ra.x == rb.x);
    REQUIRE(ra.utility == rb.utility);
  }
}

TEST_CASE("propose_batch bookkeeping") {
  const ModelConfig mc = tiny_mc();
  const auto params = tiny_model(33);
  const RiemannSupport support = negative_support(mc.n_bins, 14);
  Rng rng(1234);
  const Eigen::MatrixXd tx = random_unit(rng, 6, 2);
  const Eigen::MatrixXd ty = random_unit(rng, 6, 2);

  SECTION("ei with q=4 records 4 distinct preferences") {
    int draws = 0;
    const PrefSampler counting = [&](Rng& r, int m) {
      ++draws;
      return sample_preference(r, m);
    };
    AcquisitionSpec spec = fast_spec(AcqKind::EI);
    spec.q = 4;
    Rng prng(5);
    const auto props =
        propose_batch(params, support, tx, ty, spec, prng, counting);
    REQUIRE(props.size() == 4);
    CHECK(draws == 4);
    for (const auto& p : props) {
      REQUIRE(p.preference.size() == 2);
      CHECK(p.preference.sum() == Catch::Approx(1.0).margin(1e-9));
      CHECK(p.utility >= 0.0);
    }
    for (size_t i = 1; i < props.size(); ++i)
      for (size_t j = 0; j < i; ++j)
        CHECK((props[i].preference - props[j].preference)
                  .lpNorm<Eigen::Infinity>() > 1e-12);
  }

  SECTION("uhvi draws exactly q fresh preference sets and shares them") {
    // q * n_pref_samples draws total proves the preference set is sampled
    // once per slot and reused for the pool and every refinement step.
    int draws = 0;
    const PrefSampler counting = [&](Rng& r, int m) {
      ++draws;
      return sample_preference(r, m);
    };
    AcquisitionSpec spec = fast_spec(AcqKind::UHVI);
    spec.q = 3;
    spec.n_pref_samples = 5;
    Rng prng(6);
    const auto props =
        propose_batch(params, support, tx, ty, spec, prng, counting);
    REQUIRE(props.size() == 3);
    CHECK(draws == 15);
    for (const auto& p : props) CHECK(p.preference.size() == 0);
  }

  SECTION("q=1 equals a single optimize_acquisition call") {
    AcquisitionSpec spec = fast_spec(AcqKind::UCB);
    spec.q = 1;
    Rng prng_a(8);
    const auto props =
        propose_batch(params, support, tx, ty, spec, prng_a);
    Rng prng_b(8);
    const Preference lam = sample_preference(prng_b, 2);
    const OptimizeResult direct =
        optimize_acquisition(params, support, tx, ty, spec, lam, prng_b);
    REQUIRE(props.size() == 1);
    REQUIRE(props[0].x == direct.x);
    REQUIRE(props[0].utility == direct.utility);
  }
}

TEST_CASE("rescaling argmax invariance") {
  // A strictly increasing affine map per objective leaves min-max
  // normalization unchanged; with exactly representable transforms the
  // proposals match bitwise. Scale by powers of two and shift by integers
  // so every intermediate rounds identically.
  const ModelConfig mc = tiny_mc();
  const auto params = tiny_model(41);
  const RiemannSupport support = negative_support(mc.n_bins, 15);
  Rng rng(5150);
  const Eigen::MatrixXd tx = random_unit(rng, 7, 2);
  Eigen::MatrixXd raw(7, 2);
  for (int i = 0; i < 7; ++i)
    for (int j = 0; j < 2; ++j)
      raw(i, j) = std::round(rng.uniform() * 64.0) / 64.0;

  Eigen::MatrixXd scaled = raw;
  scaled.col(0) = raw.col(0) * 4.0;
  scaled.col(1) = raw.col(1) * 0.5;
  scaled.col(0).array() += 3.0;
  scaled.col(1).array() -= 2.0;

  const Eigen::MatrixXd na = normalize_trajectory(raw).values;
  const Eigen::MatrixXd nb = normalize_trajectory(scaled).values;
  REQUIRE(na == nb);

  AcquisitionSpec spec = fast_spec(AcqKind::UCB);
  Rng pa(31), pb(31);
  const auto props_a = propose_batch(params, support, tx, na, spec, pa);
  const auto props_b = propose_batch(params, support, tx, nb, spec, pb);
  REQUIRE(props_a[0].x == props_b[0].x);
  REQUIRE(props_a[0].utility == props_b[0].utility);
}

TEST_CASE("run_optimization") {
  const ModelConfig mc = tiny_mc();
  const auto params = tiny_model(55);
  const RiemannSupport support = negative_support(mc.n_bins, 16);
  const BenchmarkProblem prob = make_problem("omnitest");
  AcquisitionSpec spec = fast_spec(AcqKind::UCB);

  SECTION("budget 0 emits exactly the 2(d+1) initial records") {
    const RunHistory h = run_optimization(prob, params, support, spec, 0, 3);
    REQUIRE(h.records.size() == 6);
    for (const auto& r : h.records) {
      CHECK(r.phase == "init");
      CHECK(r.preference.size() == 0);
      CHECK_FALSE(r.has_utility);
      CHECK(r.acq == "ucb");
      CHECK(r.seed == 3);
    }
  }

  SECTION("q batching grows the trajectory by q per round") {
    spec.q = 2;
    const RunHistory h = run_optimization(prob, params, support, spec, 5, 3);
    REQUIRE(h.records.size() == 6 + 5);  // last round truncated to q=1
    int opt = 0;
    for (const auto& r : h.records)
      if (r.phase == "opt") {
        ++opt;
        CHECK(r.has_utility);
        REQUIRE(r.preference.size() == 2);
      }
    CHECK(opt == 5);
    CHECK(h.X.rows() == 11);
    CHECK(h.Y.rows() == 11);
  }

  SECTION("identical seeds reproduce the x/y stream bitwise") {
    const RunHistory a = run_optimization(prob, params, support, spec, 4, 7);
    const RunHistory b = run_optimization(prob, params, support, spec, 4, 7);
    REQUIRE(a.X == b.X);
    REQUIRE(a.Y == b.Y);
    for (size_t i = 0; i < a.records.size(); ++i) {
      CHECK(a.records[i].utility == b.records[i].utility);
      CHECK(a.records[i].preference == b.records[i].preference);
    }
  }

  SECTION("evaluation failure keeps the partial log") {
    BenchmarkProblem flaky = prob;
    int calls = 0;
    flaky.evaluator = [&, inner = prob.evaluator](const Eigen::VectorXd& x) {
      if (++calls > 4) throw std::runtime_error("sensor went dark");
      return inner(x);
    };
    std::vector<RunRecord> seen;
    const RunSink sink = [&](const RunRecord& r) { seen.push_back(r); };
    REQUIRE_THROWS_AS(
        run_optimization(flaky, params, support, spec, 3, 9, sink),
        ProblemEvaluationError);
    REQUIRE(seen.size() == 4);
    for (size_t i = 0; i < seen.size(); ++i)
      CHECK(seen[i].iter == static_cast<std::int64_t>(i));
  }

  SECTION("run records serialize losslessly") {
    const RunHistory h = run_optimization(prob, params, support, spec, 2, 5);
    for (const auto& r : h.records) {
      const auto j = record_to_json(r);
      const RunRecord back = record_from_json(
          nlohmann::json::parse(j.dump()));
      CHECK(back.iter == r.iter);
      CHECK(back.phase == r.phase);
      REQUIRE(back.x == r.x);
      REQUIRE(back.y == r.y);
      CHECK(back.acq == r.acq);
      REQUIRE(back.preference == r.preference);
      CHECK(back.has_utility == r.has_utility);
      CHECK(back.utility == r.utility);
      CHECK(back.seed == r.seed);
    }
  }
}
