#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "fomemo/acquisition.hpp"
#include "fomemo/benchmarks.hpp"
#include "fomemo/errors.hpp"
#include "fomemo/metrics.hpp"
#include "fomemo/prior.hpp"
#include "fomemo/riemann.hpp"
#include "fomemo/rng.hpp"
#include "fomemo/runio.hpp"
#include "fomemo/scalarize.hpp"

namespace fomemo {

// Hyperparameter grid for the baseline GP: isotropic RBF lengthscale
// (log-spaced) crossed with a few signal variances, observation noise fixed.
struct GpFitGrid {
  int n_lengthscales = 16;
  double lengthscale_min = 0.05;
  double lengthscale_max = 2.0;
  std::vector<double> signal_variances = {0.25, 0.5, 1.0, 2.0};
  double noise_variance = 1e-6;
};

// Exact GP posterior over scalarized aggregation values.
struct GPPosterior {
  Eigen::MatrixXd X;  // n x d train inputs (unit cube)
  Eigen::VectorXd y;  // aggregation targets
  double lengthscale = 1.0;
  double signal_variance = 1.0;
  double noise_variance = 1e-6;
  double jitter = 0.0;  // extra diagonal the factorization needed
  double log_marginal = -std::numeric_limits<double>::infinity();
  Eigen::MatrixXd L;      // lower Cholesky of K + (noise + jitter) I
  Eigen::VectorXd alpha;  // (K + (noise + jitter) I)^{-1} y

  // Cross-covariances between the query rows and the training inputs.
  Eigen::MatrixXd kernel_cross(const Eigen::MatrixXd& Xq) const {
    Eigen::MatrixXd K(Xq.rows(), X.rows());
    const double inv2l2 = 0.5 / (lengthscale * lengthscale);
    for (Eigen::Index i = 0; i < Xq.rows(); ++i)
      for (Eigen::Index j = 0; j < X.rows(); ++j)
        K(i, j) = signal_variance *
                  std::exp(-(Xq.row(i) - X.row(j)).squaredNorm() * inv2l2);
    return K;
  }

  void predict_batch(const Eigen::MatrixXd& Xq, Eigen::VectorXd& mean,
                     Eigen::VectorXd& var) const {
    if (Xq.cols() != X.cols())
      throw DimensionError("gp predict: input dimension mismatch");
    const Eigen::MatrixXd Kq = kernel_cross(Xq);
    mean = Kq * alpha;
    // Latent variance s^2 - ||L^{-1} k*||^2, floored at 1e-12.
    const Eigen::MatrixXd V =
        L.triangularView<Eigen::Lower>().solve(Kq.transpose());
    var.resize(Xq.rows());
    for (Eigen::Index i = 0; i < Xq.rows(); ++i)
      var(i) = std::max(signal_variance - V.col(i).squaredNorm(), 1e-12);
  }

  std::pair<double, double> predict(const Eigen::VectorXd& x) const {
    Eigen::VectorXd mean, var;
    predict_batch(x.transpose(), mean, var);
    return {mean(0), var(0)};
  }
};

namespace detail {

// Cholesky with the same escalating-jitter ladder as the prior sampler:
// 1e-8, 1e-7, ... up to jitter_max. Returns false if the ladder runs out.
inline bool chol_with_jitter(const Eigen::MatrixXd& K,
                             Eigen::LLT<Eigen::MatrixXd>& llt,
                             double& jitter_used, double jitter_max = 1e-4) {
  llt.compute(K);
  jitter_used = 0.0;
  for (double jitter = 1e-8;
       llt.info() != Eigen::Success && jitter <= jitter_max * (1.0 + 1e-12);
       jitter *= 10.0) {
    Eigen::MatrixXd Kj = K;
    Kj.diagonal().array() += jitter;
    llt.compute(Kj);
    jitter_used = jitter;
  }
  return llt.info() == Eigen::Success;
}

}  // namespace detail

// Fits the baseline GP by grid search over (lengthscale, signal variance),
// keeping the cell with the highest log marginal likelihood. Cells whose
// factorization fails past the jitter ladder are skipped; if every cell
// fails the inputs are degenerate and FactorizationError is raised.
inline GPPosterior gp_fit(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                          const GpFitGrid& grid = GpFitGrid()) {
  const int n = static_cast<int>(X.rows());
  if (n < 2) throw DomainError("gp_fit: need at least 2 points");
  if (y.size() != n) throw ShapeError("gp_fit: target count mismatch");
  if (grid.n_lengthscales < 1 || grid.signal_variances.empty())
    throw ConfigError("gp_fit: empty hyperparameter grid");

  GPPosterior best;
  bool any = false;
  const double log2pi = std::log(2.0 * M_PI);
  for (int li = 0; li < grid.n_lengthscales; ++li) {
    const double frac = grid.n_lengthscales > 1
                            ? static_cast<double>(li) /
                                  (grid.n_lengthscales - 1)
                            : 0.0;
    const double ls = grid.lengthscale_min *
                      std::pow(grid.lengthscale_max / grid.lengthscale_min,
                               frac);
    for (const double s2 : grid.signal_variances) {
      GpHyper hyper;
      hyper.lengthscales = Eigen::VectorXd::Constant(X.cols(), ls);
      hyper.output_scale = std::sqrt(s2);
      hyper.noise_variance = grid.noise_variance;
      Eigen::MatrixXd K = rbf_kernel_matrix(X, hyper);
      K.diagonal().array() += grid.noise_variance;

      Eigen::LLT<Eigen::MatrixXd> llt;
      double jitter = 0.0;
      if (!detail::chol_with_jitter(K, llt, jitter)) continue;
      const Eigen::VectorXd alpha = llt.solve(y);
      double logdet = 0.0;
      for (int i = 0; i < n; ++i) logdet += std::log(llt.matrixL()(i, i));
      const double lml =
          -0.5 * y.dot(alpha) - logdet - 0.5 * n * log2pi;
      if (!any || lml > best.log_marginal) {
        any = true;
        best.X = X;
        best.y = y;
        best.lengthscale = ls;
        best.signal_variance = s2;
        best.noise_variance = grid.noise_variance;
        best.jitter = jitter;
        best.log_marginal = lml;
        best.L = llt.matrixL();
        best.alpha = alpha;
      }
    }
  }
  if (!any)
    throw FactorizationError(
        "gp_fit: every grid cell failed Cholesky past the jitter ceiling");
  return best;
}

// Closed-form Gaussian expected improvement for maximization:
// (mu - g*) Phi(z) + sigma phi(z) with z = (mu - g*) / sigma.
inline double gaussian_ei(double mean, double stddev, double gstar) {
  if (!(stddev >= 0.0)) throw DomainError("gaussian_ei: negative stddev");
  const double diff = mean - gstar;
  if (stddev == 0.0) return std::max(diff, 0.0);
  const double z = diff / stddev;
  const double pdf = std::exp(-0.5 * z * z) / std::sqrt(2.0 * M_PI);
  return diff * detail::std_normal_cdf(z) + stddev * pdf;
}

struct ParegoKnobs {
  int candidate_pool = 1024;
  int restarts = 20;
  int refine_steps = 50;
  GpFitGrid grid;
};

struct ParegoProposal {
  Eigen::VectorXd x;  // unit cube
  double utility = 0.0;
  Eigen::VectorXd preference;
};

// One ParEGO iteration: draw a preference, scalarize the normalized
// trajectory, refit the GP, and maximize Gaussian EI with the exact same
// pool-plus-refinement optimizer the model acquisitions use.
inline ParegoProposal gp_parego_step(
    const Eigen::MatrixXd& traj_x_unit, const Eigen::MatrixXd& traj_y_raw,
    const ParegoKnobs& knobs, Rng& rng,
    const PrefSampler& sample_pref = default_pref_sampler()) {
  if (traj_x_unit.rows() != traj_y_raw.rows())
    throw ShapeError("gp_parego_step: trajectory row mismatch");
  const int m = static_cast<int>(traj_y_raw.cols());
  const NormalizedTrajectory norm = normalize_trajectory(traj_y_raw);
  const Preference pref = sample_pref(rng, m);

  Eigen::VectorXd g(norm.values.rows());
  for (Eigen::Index i = 0; i < norm.values.rows(); ++i)
    g(i) = aggregation_target(norm.values.row(i).transpose(), pref);
  const double gstar = g.maxCoeff();

  const GPPosterior gp = gp_fit(traj_x_unit, g, knobs.grid);
  const BatchScorer scorer = [&](const Eigen::MatrixXd& Xq) {
    Eigen::VectorXd mean, var;
    gp.predict_batch(Xq, mean, var);
    Eigen::VectorXd u(Xq.rows());
    for (Eigen::Index i = 0; i < Xq.rows(); ++i)
      u(i) = gaussian_ei(mean(i), std::sqrt(var(i)), gstar);
    return u;
  };
  const OptimizeResult res =
      optimize_utility(scorer, static_cast<int>(traj_x_unit.cols()),
                       knobs.candidate_pool, knobs.restarts,
                       knobs.refine_steps, rng);

  ParegoProposal out;
  out.x = res.x;
  out.utility = res.utility;
  out.preference = pref.weights();
  return out;
}

// Non-adaptive baseline: the first `budget` points of the same scrambled
// low-discrepancy stream the adaptive runs use for initialization, so a
// budget of 2(d+1) reproduces their initial design exactly.
inline RunHistory sobol_search(const BenchmarkProblem& problem, int budget,
                               std::uint64_t seed,
                               const RunSink& sink = nullptr) {
  if (budget < 1) throw DomainError("sobol_search: budget must be >= 1");
  RunHistory hist;
  hist.X.resize(0, problem.d);
  hist.Y.resize(0, problem.m);
  detail::RunEmitter emit{problem, hist, sink, seed, "sobol",
                          Eigen::MatrixXd(0, problem.d)};
  const Eigen::MatrixXd U =
      sobol_points(problem.d, budget, derive_seed(seed, "init-design"));
  const int n0 = std::min(2 * (problem.d + 1), budget);
  for (int i = 0; i < budget; ++i)
    emit(U.row(i).transpose(), i < n0 ? "init" : "opt", Eigen::VectorXd(),
         false, 0.0, 0);
  return hist;
}

// Full GP-ParEGO run with the shared initial design and the shared
// per-round seed derivation. `budget` counts post-init evaluations.
inline RunHistory gp_parego_run(
    const BenchmarkProblem& problem, int budget, std::uint64_t seed,
    const RunSink& sink = nullptr, const ParegoKnobs& knobs = ParegoKnobs(),
    const PrefSampler& sample_pref = default_pref_sampler()) {
  if (budget < 0) throw DomainError("gp_parego_run: budget must be >= 0");
  RunHistory hist;
  hist.X.resize(0, problem.d);
  hist.Y.resize(0, problem.m);
  detail::RunEmitter emit{problem, hist, sink, seed, "gp-parego",
                          Eigen::MatrixXd(0, problem.d)};

  const int n0 = 2 * (problem.d + 1);
  const Eigen::MatrixXd U0 = init_design(problem.d, n0, seed);
  for (int i = 0; i < n0; ++i)
    emit(U0.row(i).transpose(), "init", Eigen::VectorXd(), false, 0.0, 0);

  for (int round = 0; round < budget; ++round) {
    Rng prng(derive_seed(seed, "propose", static_cast<std::uint64_t>(round)));
    const auto t0 = std::chrono::steady_clock::now();
    const ParegoProposal p =
        gp_parego_step(emit.Xu, hist.Y, knobs, prng, sample_pref);
    const std::uint64_t ms = detail::elapsed_ms(t0);
    emit(p.x, "opt", p.preference, true, p.utility, ms);
  }
  return hist;
}

}  // namespace fomemo
