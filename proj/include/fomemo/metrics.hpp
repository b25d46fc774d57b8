#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <vector>

#include "fomemo/errors.hpp"
#include "fomemo/scalarize.hpp"

namespace fomemo {

// Per-objective affine normalization y_norm = (y - offset) / range.
struct ObjectiveBounds {
  Eigen::VectorXd offset;
  Eigen::VectorXd range;

  Eigen::MatrixXd apply(const Eigen::MatrixXd& raw) const {
    Eigen::MatrixXd out = raw;
    for (int j = 0; j < out.cols(); ++j)
      out.col(j) = (out.col(j).array() - offset(j)) / range(j);
    return out;
  }

  Eigen::VectorXd apply_point(const Eigen::VectorXd& y) const {
    return (y.array() - offset.array()) / range.array();
  }
};

struct NormalizedTrajectory {
  Eigen::MatrixXd values;  // n x m in [0, 1] per objective
  ObjectiveBounds bounds;
};

// Min-max normalization per objective over the given rows. A degenerate
// objective (range below 1e-12) keeps range 1 with offset at the observed
// value, so that column maps to 0 instead of blowing up.
inline NormalizedTrajectory normalize_trajectory(const Eigen::MatrixXd& raw) {
  if (raw.rows() < 1)
    throw EmptyTrajectory("normalize_trajectory: no observations");
  const int m = static_cast<int>(raw.cols());
  NormalizedTrajectory out;
  out.bounds.offset.resize(m);
  out.bounds.range.resize(m);
  for (int j = 0; j < m; ++j) {
    const double lo = raw.col(j).minCoeff();
    const double hi = raw.col(j).maxCoeff();
    out.bounds.offset(j) = lo;
    out.bounds.range(j) = (hi - lo < 1e-12) ? 1.0 : hi - lo;
  }
  out.values = out.bounds.apply(raw);
  return out;
}

// Keeps the non-dominated rows (minimization), removing exact duplicates.
// Row order of the survivors is preserved.
inline Eigen::MatrixXd pareto_filter(const Eigen::MatrixXd& pts) {
  const int n = static_cast<int>(pts.rows());
  const int m = static_cast<int>(pts.cols());
  std::vector<bool> keep(n, true);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n && keep[i]; ++j) {
      if (j == i) continue;
      bool all_le = true, any_lt = false, equal = true;
      for (int k = 0; k < m; ++k) {
        if (pts(j, k) > pts(i, k)) all_le = false;
        if (pts(j, k) < pts(i, k)) any_lt = true;
        if (pts(j, k) != pts(i, k)) equal = false;
      }
      if ((all_le && any_lt) || (equal && j < i)) keep[i] = false;
    }
  }
  int cnt = 0;
  for (bool k : keep) cnt += k;
  Eigen::MatrixXd out(cnt, m);
  int r = 0;
  for (int i = 0; i < n; ++i)
    if (keep[i]) out.row(r++) = pts.row(i);
  return out;
}

// IGD+ (inverted generational distance, dominance-compliant variant): the
// mean over reference points of the distance to the front, where only the
// coordinates in which the front point is worse contribute.
inline double igd_plus(const Eigen::MatrixXd& front,
                       const Eigen::MatrixXd& reference) {
  if (front.rows() < 1) throw EmptyTrajectory("igd_plus: empty front");
  if (reference.rows() < 1) throw EmptyTrajectory("igd_plus: empty reference");
  if (front.cols() != reference.cols())
    throw ShapeError("igd_plus: objective dimension mismatch");
  const int m = static_cast<int>(front.cols());
  double total = 0.0;
  for (int v = 0; v < reference.rows(); ++v) {
    double best = std::numeric_limits<double>::infinity();
    for (int u = 0; u < front.rows(); ++u) {
      double acc = 0.0;
      for (int j = 0; j < m; ++j) {
        const double d = std::max(front(u, j) - reference(v, j), 0.0);
        acc += d * d;
      }
      best = std::min(best, std::sqrt(acc));
    }
    total += best;
  }
  return total / reference.rows();
}

// Exact hypervolume for two objectives via the sorted sweep. Every point
// must lie strictly inside the reference point.
inline double hv_exact_2d(const Eigen::MatrixXd& front,
                          const Eigen::VectorXd& r) {
  if (front.cols() != 2 || r.size() != 2)
    throw ShapeError("hv_exact_2d: needs exactly two objectives");
  if (front.rows() < 1) throw EmptyTrajectory("hv_exact_2d: empty front");
  for (int i = 0; i < front.rows(); ++i)
    if (!(front(i, 0) < r(0)) || !(front(i, 1) < r(1)))
      throw DomainError("hv_exact_2d: point not strictly inside reference");

  const Eigen::MatrixXd nd = pareto_filter(front);
  std::vector<int> order(nd.rows());
  for (int i = 0; i < nd.rows(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](int a, int b) { return nd(a, 0) < nd(b, 0); });
  double hv = 0.0;
  double prev_f2 = r(1);
  for (int idx : order) {
    hv += (r(0) - nd(idx, 0)) * (prev_f2 - nd(idx, 1));
    prev_f2 = nd(idx, 1);
  }
  return hv;
}

// Monte Carlo hypervolume for any m, delegating to the scalarization
// identity with the given ideal point z*.
inline double hv_estimate(const Eigen::MatrixXd& front,
                          const Eigen::VectorXd& r, const Eigen::VectorXd& z,
                          int K, std::uint64_t seed) {
  ScalarizationContext ctx;
  ctx.ideal = z;
  return hv_scalarization_estimate(front, r, ctx, K, seed);
}

inline double hv_estimate(const Eigen::MatrixXd& front,
                          const Eigen::VectorXd& r, const Eigen::VectorXd& z,
                          const HvSampler& sampler) {
  ScalarizationContext ctx;
  ctx.ideal = z;
  return hv_scalarization_estimate(front, r, ctx, sampler);
}

struct NormalizedHvResult {
  double value = 0.0;
  // True when every point fell outside the reference box after
  // normalization (the returned value is then 0 by convention).
  bool empty_after_filter = false;
};

// Hypervolume in reference-front-normalized space: objectives are rescaled
// so the reference front spans [0, 1] per objective, the reference point is
// fixed at 1.1 per objective, and points not strictly dominating it are
// dropped. Two objectives use the exact sweep; higher dimensions use the
// scalarization estimator with K directions.
inline NormalizedHvResult normalized_hv(const Eigen::MatrixXd& front,
                                        const Eigen::MatrixXd& reference,
                                        int K = 200000,
                                        std::uint64_t seed = 20240901ULL) {
  if (front.rows() < 1) throw EmptyTrajectory("normalized_hv: empty front");
  if (reference.rows() < 1)
    throw EmptyTrajectory("normalized_hv: empty reference front");
  if (front.cols() != reference.cols())
    throw ShapeError("normalized_hv: objective dimension mismatch");
  const int m = static_cast<int>(front.cols());

  ObjectiveBounds bounds;
  bounds.offset.resize(m);
  bounds.range.resize(m);
  for (int j = 0; j < m; ++j) {
    const double lo = reference.col(j).minCoeff();
    const double hi = reference.col(j).maxCoeff();
    bounds.offset(j) = lo;
    bounds.range(j) = (hi - lo < 1e-12) ? 1.0 : hi - lo;
  }
  const Eigen::MatrixXd norm = bounds.apply(front);

  const double ref_coord = 1.1;
  std::vector<int> kept;
  for (int i = 0; i < norm.rows(); ++i) {
    bool inside = true;
    for (int j = 0; j < m; ++j) inside = inside && norm(i, j) < ref_coord;
    if (inside) kept.push_back(i);
  }
  NormalizedHvResult res;
  if (kept.empty()) {
    res.empty_after_filter = true;
    return res;
  }
  Eigen::MatrixXd pts(static_cast<int>(kept.size()), m);
  for (int i = 0; i < static_cast<int>(kept.size()); ++i)
    pts.row(i) = norm.row(kept[i]);

  Eigen::VectorXd r = Eigen::VectorXd::Constant(m, ref_coord);
  if (m == 1) {
    res.value = ref_coord - pts.col(0).minCoeff();
  } else if (m == 2) {
    res.value = hv_exact_2d(pts, r);
  } else {
    // Points may normalize below 0 when the front beats the reference; the
    // estimator's ideal point tracks the observed minimum in that case.
    Eigen::VectorXd z(m);
    for (int j = 0; j < m; ++j) z(j) = std::min(0.0, pts.col(j).minCoeff());
    res.value = hv_estimate(pts, r, z, K, seed);
  }
  return res;
}

}  // namespace fomemo
