#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <chrono>
#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "fomemo/benchmarks.hpp"
#include "fomemo/errors.hpp"
#include "fomemo/metrics.hpp"
#include "fomemo/model.hpp"
#include "fomemo/riemann.hpp"
#include "fomemo/rng.hpp"
#include "fomemo/runio.hpp"
#include "fomemo/scalarize.hpp"

namespace fomemo {

enum class AcqKind { EI, UCB, UHVI };

inline std::string acq_kind_name(AcqKind k) {
  switch (k) {
    case AcqKind::EI: return "ei";
    case AcqKind::UCB: return "ucb";
    case AcqKind::UHVI: return "uhvi";
  }
  throw DomainError("acq_kind_name: unknown kind");
}

inline AcqKind acq_kind_from_string(const std::string& s) {
  if (s == "ei") return AcqKind::EI;
  if (s == "ucb") return AcqKind::UCB;
  if (s == "uhvi") return AcqKind::UHVI;
  throw ConfigError("unknown acquisition \"" + s +
                    "\" (expected ei, ucb, or uhvi)");
}

struct AcquisitionSpec {
  AcqKind kind = AcqKind::UCB;
  double beta = 1.0;        // UCB exploration weight
  int n_pref_samples = 32;  // UHVI preference-set size
  int q = 1;                // proposals per round
  int candidate_pool = 1024;
  int restarts = 20;
  int refine_steps = 50;

  void validate() const {
    if (!(beta >= 0.0)) throw ConfigError("acquisition: beta must be >= 0");
    if (n_pref_samples < 1)
      throw ConfigError("acquisition: n_pref_samples must be >= 1");
    if (q < 1) throw ConfigError("acquisition: q must be >= 1");
    if (candidate_pool < 1)
      throw ConfigError("acquisition: candidate_pool must be >= 1");
    if (restarts < 1) throw ConfigError("acquisition: restarts must be >= 1");
    if (refine_steps < 0)
      throw ConfigError("acquisition: refine_steps must be >= 0");
  }
};

// Injectable preference source so tests can count or pin the draws.
using PrefSampler = std::function<Preference(Rng&, int)>;

inline PrefSampler default_pref_sampler() {
  return [](Rng& rng, int m) { return sample_preference(rng, m); };
}

// Best observed aggregation value over the trajectory, straight from the
// normalized objectives (no model call).
inline double best_aggregation(const Eigen::MatrixXd& traj_y_norm,
                               const Preference& pref) {
  if (traj_y_norm.rows() < 1)
    throw EmptyTrajectory("best_aggregation: empty trajectory");
  double best = -std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < traj_y_norm.rows(); ++i)
    best = std::max(best,
                    aggregation_target(traj_y_norm.row(i).transpose(), pref));
  return best;
}

inline double acq_ei(const PosteriorHistogram& posterior, double gstar) {
  return posterior.ei(gstar);
}

inline double acq_ucb(const PosteriorHistogram& posterior, double beta) {
  if (!(beta >= 0.0)) throw DomainError("acq_ucb: beta must be >= 0");
  return posterior.mean() + beta * posterior.stddev();
}

// Batched bin probabilities for candidate rows sharing one preference.
template <typename S>
inline Eigen::MatrixXd candidate_probs(const ModelParams<S>& params,
                                       const Eigen::MatrixXd& traj_x,
                                       const Eigen::MatrixXd& traj_y_norm,
                                       const Eigen::MatrixXd& X,
                                       const Preference& pref) {
  const Eigen::MatrixXd pref_rows =
      pref.weights().transpose().replicate(X.rows(), 1);
  return predict_probs(params, traj_x, traj_y_norm, X, pref_rows);
}

template <typename S>
inline Eigen::VectorXd ei_utilities(const ModelParams<S>& params,
                                    const RiemannSupport& support,
                                    const Eigen::MatrixXd& traj_x,
                                    const Eigen::MatrixXd& traj_y_norm,
                                    const Eigen::MatrixXd& X,
                                    const Preference& pref) {
  const double gstar = best_aggregation(traj_y_norm, pref);
  const Eigen::MatrixXd probs =
      candidate_probs(params, traj_x, traj_y_norm, X, pref);
  Eigen::VectorXd u(X.rows());
  for (Eigen::Index i = 0; i < X.rows(); ++i)
    u(i) = riemann_ei(support, probs.row(i).transpose(), gstar);
  return u;
}

template <typename S>
inline Eigen::VectorXd ucb_utilities(const ModelParams<S>& params,
                                     const RiemannSupport& support,
                                     const Eigen::MatrixXd& traj_x,
                                     const Eigen::MatrixXd& traj_y_norm,
                                     const Eigen::MatrixXd& X,
                                     const Preference& pref, double beta) {
  const Eigen::MatrixXd probs =
      candidate_probs(params, traj_x, traj_y_norm, X, pref);
  Eigen::VectorXd u(X.rows());
  for (Eigen::Index i = 0; i < X.rows(); ++i)
    u(i) = riemann_mean(support, probs.row(i).transpose()) +
           beta * riemann_std(support, probs.row(i).transpose());
  return u;
}

// Hypervolume-improvement utility over a shared preference set. For each
// preference the trajectory term is (-g*)^m and the candidate term is
// (-UCB)^m with -UCB clamped to >= 0 first: a query outside the trajectory's
// normalized hull can push UCB above 0, and an even power would otherwise
// turn that into spurious dominated volume. (-g* is already >= 0 whenever
// the trajectory is normalized; the clamp there is a no-op kept for safety.)
template <typename S>
inline Eigen::VectorXd uhvi_utilities(const ModelParams<S>& params,
                                      const RiemannSupport& support,
                                      const Eigen::MatrixXd& traj_x,
                                      const Eigen::MatrixXd& traj_y_norm,
                                      const Eigen::MatrixXd& X,
                                      const std::vector<Preference>& pref_set,
                                      double beta) {
  if (traj_y_norm.rows() < 1)
    throw EmptyTrajectory("uhvi_utilities: empty trajectory");
  if (pref_set.empty()) throw DomainError("uhvi_utilities: empty pref set");
  const int m = static_cast<int>(traj_y_norm.cols());
  const double md = static_cast<double>(m);
  const double cm = dimension_constant(m);

  std::vector<ModelInput> batch;
  batch.reserve(pref_set.size());
  for (const Preference& pref : pref_set) {
    ModelInput in;
    in.traj_x = traj_x;
    in.traj_y = traj_y_norm;
    in.query_x = X;
    in.query_pref = pref.weights().transpose().replicate(X.rows(), 1);
    batch.push_back(std::move(in));
  }
  const auto logits = model_forward(params, batch);

  Eigen::VectorXd acc = Eigen::VectorXd::Zero(X.rows());
  for (size_t p = 0; p < pref_set.size(); ++p) {
    const Eigen::MatrixXd probs = softmax_rows(logits[p]);
    const double gstar = best_aggregation(traj_y_norm, pref_set[p]);
    const double best_term = std::pow(std::max(0.0, -gstar), md);
    const double weight = std::pow(lambda_constant(pref_set[p]), md);
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
      const double ucb =
          riemann_mean(support, probs.row(i).transpose()) +
          beta * riemann_std(support, probs.row(i).transpose());
      const double cand_term = std::pow(std::max(0.0, -ucb), md);
      acc(i) += weight * std::max(0.0, best_term - cand_term);
    }
  }
  return cm / static_cast<double>(pref_set.size()) * acc;
}

// Single-point form of the above.
template <typename S>
inline double acq_uhvi(const ModelParams<S>& params,
                       const RiemannSupport& support,
                       const Eigen::MatrixXd& traj_x,
                       const Eigen::MatrixXd& traj_y_norm,
                       const Eigen::VectorXd& x,
                       const std::vector<Preference>& pref_set, double beta) {
  return uhvi_utilities(params, support, traj_x, traj_y_norm, x.transpose(),
                        pref_set, beta)(0);
}

// Shared initial design: both model-based and baseline runs start from the
// same scrambled low-discrepancy points derived from the run seed.
inline Eigen::MatrixXd init_design(int d, int n, std::uint64_t master_seed) {
  return sobol_points(d, n, derive_seed(master_seed, "init-design"));
}

struct OptimizeResult {
  Eigen::VectorXd x;  // unit cube
  double utility = 0.0;
};

using BatchScorer = std::function<Eigen::VectorXd(const Eigen::MatrixXd&)>;

// Maximizes an arbitrary batched utility over the unit cube: score a
// scrambled low-discrepancy pool, take the top `restarts` points, then
// refine each with projected Gaussian perturbations whose step size decays
// geometrically 0.1 -> 0.01, accepting only improvements. The winner can
// therefore never score below the best pool point.
inline OptimizeResult optimize_utility(const BatchScorer& score, int d,
                                       int candidate_pool, int restarts,
                                       int refine_steps, Rng& rng) {
  if (d < 1) throw DimensionError("optimize_utility: d must be >= 1");
  if (candidate_pool < 1)
    throw DomainError("optimize_utility: empty candidate pool");
  const Eigen::MatrixXd pool = sobol_points(d, candidate_pool, rng.next_u64());
  const Eigen::VectorXd pool_u = score(pool);
  if (pool_u.size() != candidate_pool)
    throw ShapeError("optimize_utility: scorer returned wrong arity");

  const int R = std::max(1, std::min(restarts, candidate_pool));
  std::vector<int> order(candidate_pool);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return pool_u(a) > pool_u(b);
  });

  Eigen::MatrixXd pts(R, d);
  Eigen::VectorXd val(R);
  for (int r = 0; r < R; ++r) {
    pts.row(r) = pool.row(order[r]);
    val(r) = pool_u(order[r]);
  }

  for (int t = 0; t < refine_steps; ++t) {
    const double frac =
        refine_steps > 1 ? static_cast<double>(t) / (refine_steps - 1) : 0.0;
    const double sigma = 0.1 * std::pow(0.1, frac);
    Eigen::MatrixXd prop(R, d);
    for (int r = 0; r < R; ++r)
      for (int c = 0; c < d; ++c)
        prop(r, c) = std::clamp(pts(r, c) + sigma * rng.normal(), 0.0, 1.0);
    const Eigen::VectorXd pv = score(prop);
    for (int r = 0; r < R; ++r) {
      if (pv(r) > val(r)) {
        pts.row(r) = prop.row(r);
        val(r) = pv(r);
      }
    }
  }

  int best = 0;
  for (int r = 1; r < R; ++r)
    if (val(r) > val(best)) best = r;
  OptimizeResult res;
  res.x = pts.row(best).transpose();
  res.utility = val(best);
  return res;
}

// One proposed candidate together with the preference that produced it
// (empty for UHVI, which integrates over a preference set).
struct Proposal {
  Eigen::VectorXd x;  // unit cube
  double utility = 0.0;
  Eigen::VectorXd preference;
};

namespace detail {

// Per-slot scoring context: EI/UCB carry one preference, UHVI carries a
// whole preference set. Rebuilding the scorer lets duplicate slots be
// re-optimized under identical semantics with fresh randomness.
template <typename S>
struct SlotContext {
  Preference pref = Preference(Eigen::VectorXd::Ones(1));
  std::vector<Preference> pref_set;

  BatchScorer make_scorer(const ModelParams<S>& params,
                          const RiemannSupport& support,
                          const Eigen::MatrixXd& traj_x,
                          const Eigen::MatrixXd& traj_y_norm,
                          const AcquisitionSpec& spec) const {
    switch (spec.kind) {
      case AcqKind::EI:
        return [&, pref = pref](const Eigen::MatrixXd& X) {
          return ei_utilities(params, support, traj_x, traj_y_norm, X, pref);
        };
      case AcqKind::UCB:
        return [&, pref = pref, beta = spec.beta](const Eigen::MatrixXd& X) {
          return ucb_utilities(params, support, traj_x, traj_y_norm, X, pref,
                               beta);
        };
      case AcqKind::UHVI:
        return [&, set = pref_set, beta = spec.beta](const Eigen::MatrixXd& X) {
          return uhvi_utilities(params, support, traj_x, traj_y_norm, X, set,
                                beta);
        };
    }
    throw DomainError("make_scorer: unknown acquisition kind");
  }
};

}  // namespace detail

// Optimizes one acquisition for one preference (EI/UCB) or preference set
// (UHVI shares the set across every candidate it scores: common random
// numbers within the proposal round).
template <typename S>
inline OptimizeResult optimize_acquisition(const ModelParams<S>& params,
                                           const RiemannSupport& support,
                                           const Eigen::MatrixXd& traj_x,
                                           const Eigen::MatrixXd& traj_y_norm,
                                           const AcquisitionSpec& spec,
                                           const Preference& pref, Rng& rng) {
  spec.validate();
  detail::SlotContext<S> ctx;
  ctx.pref = pref;
  if (spec.kind == AcqKind::UHVI)
    throw DomainError("optimize_acquisition: UHVI requires a preference set");
  const auto scorer =
      ctx.make_scorer(params, support, traj_x, traj_y_norm, spec);
  return optimize_utility(scorer, static_cast<int>(traj_x.cols()),
                          spec.candidate_pool, spec.restarts,
                          spec.refine_steps, rng);
}

template <typename S>
inline OptimizeResult optimize_acquisition(
    const ModelParams<S>& params, const RiemannSupport& support,
    const Eigen::MatrixXd& traj_x, const Eigen::MatrixXd& traj_y_norm,
    const AcquisitionSpec& spec, const std::vector<Preference>& pref_set,
    Rng& rng) {
  spec.validate();
  if (spec.kind != AcqKind::UHVI)
    throw DomainError(
        "optimize_acquisition: preference sets are UHVI-only");
  detail::SlotContext<S> ctx;
  ctx.pref_set = pref_set;
  const auto scorer =
      ctx.make_scorer(params, support, traj_x, traj_y_norm, spec);
  return optimize_utility(scorer, static_cast<int>(traj_x.cols()),
                          spec.candidate_pool, spec.restarts,
                          spec.refine_steps, rng);
}

// Proposes spec.q candidates. EI/UCB draw a fresh preference per slot; UHVI
// draws a fresh preference set per slot. Any candidate that collides with an
// earlier one (pairwise L-infinity below 1e-6) is re-optimized once with
// fresh randomness and then accepted either way.
template <typename S>
inline std::vector<Proposal> propose_batch(
    const ModelParams<S>& params, const RiemannSupport& support,
    const Eigen::MatrixXd& traj_x, const Eigen::MatrixXd& traj_y_norm,
    const AcquisitionSpec& spec, Rng& rng,
    const PrefSampler& sample_pref = default_pref_sampler()) {
  spec.validate();
  if (traj_x.rows() != traj_y_norm.rows())
    throw ShapeError("propose_batch: trajectory row mismatch");
  if (traj_x.rows() < 1)
    throw EmptyTrajectory("propose_batch: empty trajectory");
  const int d = static_cast<int>(traj_x.cols());
  const int m = static_cast<int>(traj_y_norm.cols());

  std::vector<detail::SlotContext<S>> slots(spec.q);
  for (int s = 0; s < spec.q; ++s) {
    if (spec.kind == AcqKind::UHVI) {
      slots[s].pref_set.reserve(spec.n_pref_samples);
      for (int p = 0; p < spec.n_pref_samples; ++p)
        slots[s].pref_set.push_back(sample_pref(rng, m));
    } else {
      slots[s].pref = sample_pref(rng, m);
    }
  }

  std::vector<Proposal> out(spec.q);
  auto run_slot = [&](int s) {
    const auto scorer =
        slots[s].make_scorer(params, support, traj_x, traj_y_norm, spec);
    const OptimizeResult res =
        optimize_utility(scorer, d, spec.candidate_pool, spec.restarts,
                         spec.refine_steps, rng);
    out[s].x = res.x;
    out[s].utility = res.utility;
    out[s].preference = spec.kind == AcqKind::UHVI
                            ? Eigen::VectorXd()
                            : slots[s].pref.weights();
  };
  for (int s = 0; s < spec.q; ++s) run_slot(s);
  for (int s = 1; s < spec.q; ++s) {
    for (int j = 0; j < s; ++j) {
      if ((out[s].x - out[j].x).lpNorm<Eigen::Infinity>() < 1e-6) {
        run_slot(s);
        break;
      }
    }
  }
  return out;
}

struct RunHistory {
  Eigen::MatrixXd X;  // native-bounds inputs, one evaluation per row
  Eigen::MatrixXd Y;  // raw objective values
  std::vector<RunRecord> records;
};

namespace detail {

inline std::uint64_t elapsed_ms(
    std::chrono::steady_clock::time_point since) {
  return static_cast<std::uint64_t>(
      std::chrono::duration_cast<std::chrono::milliseconds>(
          std::chrono::steady_clock::now() - since)
          .count());
}

// Evaluates one unit-cube point, appends it to the history, and emits a
// record. Evaluation failures become ProblemEvaluationError after the
// already-emitted records, so the partial log survives.
struct RunEmitter {
  const BenchmarkProblem& problem;
  RunHistory& hist;
  const RunSink& sink;
  std::uint64_t seed;
  std::string acq;
  Eigen::MatrixXd Xu;  // unit-cube copies of the evaluated inputs

  void operator()(const Eigen::VectorXd& u, const std::string& phase,
                  const Eigen::VectorXd& preference, bool has_utility,
                  double utility, std::uint64_t extra_ms) {
    const auto t0 = std::chrono::steady_clock::now();
    const Eigen::VectorXd x = problem.from_unit(u);
    Eigen::VectorXd y;
    try {
      y = problem.evaluate(x);
    } catch (const std::exception& e) {
      throw ProblemEvaluationError(problem.name + ": evaluation failed: " +
                                   e.what());
    }
    const Eigen::Index n = hist.X.rows();
    hist.X.conservativeResize(n + 1, problem.d);
    hist.Y.conservativeResize(n + 1, problem.m);
    Xu.conservativeResize(n + 1, problem.d);
    hist.X.row(n) = x.transpose();
    hist.Y.row(n) = y.transpose();
    Xu.row(n) = u.transpose();

    RunRecord r;
    r.iter = n;
    r.phase = phase;
    r.x = x;
    r.y = y;
    r.acq = acq;
    r.preference = preference;
    r.has_utility = has_utility;
    r.utility = utility;
    r.seed = seed;
    r.wall_ms = extra_ms + elapsed_ms(t0);
    hist.records.push_back(r);
    if (sink) sink(r);
  }
};

}  // namespace detail

// Full in-context optimization run: 2(d+1) shared initial points, then
// rounds of (renormalize objectives, propose a batch, evaluate). Model
// parameters are never touched. `budget` counts post-init evaluations.
template <typename S>
inline RunHistory run_optimization(
    const BenchmarkProblem& problem, const ModelParams<S>& params,
    const RiemannSupport& support, const AcquisitionSpec& spec, int budget,
    std::uint64_t seed, const RunSink& sink = nullptr,
    const PrefSampler& sample_pref = default_pref_sampler()) {
  spec.validate();
  if (budget < 0) throw DomainError("run_optimization: budget must be >= 0");

  RunHistory hist;
  hist.X.resize(0, problem.d);
  hist.Y.resize(0, problem.m);
  detail::RunEmitter emit{problem, hist,        sink,
                          seed,    acq_kind_name(spec.kind),
                          Eigen::MatrixXd(0, problem.d)};

  const int n0 = 2 * (problem.d + 1);
  const Eigen::MatrixXd U0 = init_design(problem.d, n0, seed);
  for (int i = 0; i < n0; ++i)
    emit(U0.row(i).transpose(), "init", Eigen::VectorXd(), false, 0.0, 0);

  int done = 0;
  for (int round = 0; done < budget; ++round) {
    AcquisitionSpec rs = spec;
    rs.q = std::min(spec.q, budget - done);
    const NormalizedTrajectory norm = normalize_trajectory(hist.Y);
    Rng prng(derive_seed(seed, "propose", static_cast<std::uint64_t>(round)));
    const auto t0 = std::chrono::steady_clock::now();
    const std::vector<Proposal> props = propose_batch(
        params, support, emit.Xu, norm.values, rs, prng, sample_pref);
    const std::uint64_t share = detail::elapsed_ms(t0) / props.size();
    for (const Proposal& p : props)
      emit(p.x, "opt", p.preference, true, p.utility, share);
    done += rs.q;
  }
  return hist;
}

}  // namespace fomemo
