#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>

#include "fomemo/errors.hpp"
#include "fomemo/rng.hpp"

namespace fomemo {

// Smallest admissible preference weight; boundary preferences are projected
// inward by this floor so that reference-vector transforms stay finite.
inline constexpr double kPreferenceFloor = 1e-6;

// Optimization context for scalarization: the ideal point z*. All aggregation
// in this library happens in normalized objective space where z* = 0, so the
// default context is the zero vector.
struct ScalarizationContext {
  Eigen::VectorXd ideal;  // empty means zeros(m)

  double ideal_at(int j) const { return ideal.size() == 0 ? 0.0 : ideal(j); }
};

// Simplex preference weights: sum to one, every component >= kPreferenceFloor.
class Preference {
 public:
  explicit Preference(Eigen::VectorXd w) : w_(std::move(w)) {
    if (w_.size() < 1) throw DomainError("preference: dimension must be >= 1");
    double sum = 0.0;
    for (int i = 0; i < w_.size(); ++i) {
      if (!(w_(i) >= kPreferenceFloor - 1e-12))
        throw DomainError("preference: component below floor");
      sum += w_(i);
    }
    if (std::abs(sum - 1.0) > 1e-9)
      throw DomainError("preference: weights must sum to 1");
  }

  // Projects arbitrary non-negative weights onto the floored simplex:
  // normalize, then shrink toward the interior so every component is at
  // least kPreferenceFloor while the sum stays exactly 1.
  static Preference project(const Eigen::VectorXd& raw) {
    const int m = static_cast<int>(raw.size());
    if (m < 1) throw DomainError("preference: dimension must be >= 1");
    double sum = 0.0;
    for (int i = 0; i < m; ++i) {
      if (!(raw(i) >= 0.0)) throw DomainError("preference: negative weight");
      sum += raw(i);
    }
    if (!(sum > 0.0)) throw DomainError("preference: all weights are zero");
    Eigen::VectorXd w(m);
    const double scale = 1.0 - m * kPreferenceFloor;
    for (int i = 0; i < m; ++i)
      w(i) = kPreferenceFloor + scale * (raw(i) / sum);
    return Preference(std::move(w));
  }

  const Eigen::VectorXd& weights() const { return w_; }
  int dim() const { return static_cast<int>(w_.size()); }
  double operator()(int i) const { return w_(i); }

 private:
  Eigen::VectorXd w_;
};

// Uniform preference over the floored simplex (normalized exponentials,
// projected inward). m = 1 always yields the trivial preference (1).
inline Preference sample_preference(Rng& rng, int m) {
  if (m < 1) throw DomainError("sample_preference: m must be >= 1");
  Eigen::VectorXd u(m);
  for (int i = 0; i < m; ++i) u(i) = rng.exponential();
  return Preference::project(u);
}

// Tchebycheff scalarization s(y) = max_i lambda_i * (y_i - z*_i). Smaller is
// better; zero at the ideal point.
inline double tchebycheff(const Eigen::VectorXd& y, const Preference& pref,
                          const ScalarizationContext& ctx = {}) {
  if (y.size() != pref.dim())
    throw ShapeError("tchebycheff: objective/preference dimension mismatch");
  if (ctx.ideal.size() != 0 && ctx.ideal.size() != y.size())
    throw ShapeError("tchebycheff: ideal point dimension mismatch");
  double s = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < y.size(); ++i)
    s = std::max(s, pref(i) * (y(i) - ctx.ideal_at(i)));
  return s;
}

// Aggregation target g = -s(y): the maximization view of the Tchebycheff
// value that the posterior model is trained to predict.
inline double aggregation_target(const Eigen::VectorXd& y,
                                 const Preference& pref,
                                 const ScalarizationContext& ctx = {}) {
  return -tchebycheff(y, pref, ctx);
}

// c_lambda = sqrt(sum_i 1 / lambda_i^2); rescales a Tchebycheff value onto
// the unit-sphere parameterization (s_w = c_lambda * s_lambda).
inline double lambda_constant(const Preference& pref) {
  double acc = 0.0;
  for (int i = 0; i < pref.dim(); ++i) acc += 1.0 / (pref(i) * pref(i));
  return std::sqrt(acc);
}

// Unit-norm direction on the positive orthant of the sphere.
class RefVec {
 public:
  explicit RefVec(Eigen::VectorXd w) : w_(std::move(w)) {
    if (w_.size() < 1) throw DomainError("refvec: dimension must be >= 1");
    for (int i = 0; i < w_.size(); ++i)
      if (!(w_(i) > 0.0)) throw DomainError("refvec: components must be > 0");
    if (std::abs(w_.norm() - 1.0) > 1e-9)
      throw DomainError("refvec: must have unit L2 norm");
  }

  const Eigen::VectorXd& direction() const { return w_; }
  int dim() const { return static_cast<int>(w_.size()); }
  double operator()(int i) const { return w_(i); }

 private:
  Eigen::VectorXd w_;
};

// w_j = 1 / (lambda_j * c_lambda); unit norm by construction.
inline RefVec preference_to_refvec(const Preference& pref) {
  const double c = lambda_constant(pref);
  Eigen::VectorXd w(pref.dim());
  for (int i = 0; i < pref.dim(); ++i) w(i) = 1.0 / (pref(i) * c);
  return RefVec(std::move(w));
}

// Inverse transform: lambda_j proportional to 1 / w_j, normalized to the
// simplex (exact round trip up to floating-point error).
inline Preference refvec_to_preference(const RefVec& w) {
  Eigen::VectorXd inv(w.dim());
  for (int i = 0; i < w.dim(); ++i) inv(i) = 1.0 / w(i);
  inv /= inv.sum();
  return Preference(std::move(inv));
}

// c_m = pi^{m/2} / (2^m * Gamma(m/2 + 1)): the volume fraction of the unit
// ball's positive orthant; c_1 = 1, c_2 = pi/4.
inline double dimension_constant(int m) {
  if (m < 1) throw DomainError("dimension_constant: m must be >= 1");
  return std::exp(0.5 * m * std::log(M_PI) - m * std::log(2.0) -
                  std::lgamma(0.5 * m + 1.0));
}

// Shared set of unit directions for hypervolume estimation. Reusing one
// sampler across fronts gives common random numbers, which makes estimated
// hypervolume differences far less noisy than independent draws.
struct HvSampler {
  Eigen::MatrixXd W;  // K x m, unit-norm non-negative rows

  int dim() const { return static_cast<int>(W.cols()); }
  int count() const { return static_cast<int>(W.rows()); }
};

inline HvSampler make_hv_sampler(int m, int K, std::uint64_t seed) {
  if (m < 1) throw DomainError("make_hv_sampler: m must be >= 1");
  if (K < 1) throw DomainError("make_hv_sampler: K must be >= 1");
  Rng rng(seed);
  HvSampler s;
  s.W.resize(K, m);
  for (int k = 0; k < K; ++k) {
    double norm2 = 0.0;
    do {
      norm2 = 0.0;
      for (int j = 0; j < m; ++j) {
        const double z = std::abs(rng.normal());
        s.W(k, j) = z;
        norm2 += z * z;
      }
    } while (norm2 < 1e-24);
    const double inv = 1.0 / std::sqrt(norm2);
    for (int j = 0; j < m; ++j)
      s.W(k, j) = std::max(s.W(k, j) * inv, 1e-12);
  }
  return s;
}

// Monte Carlo hypervolume of `front` (rows are points, minimization) against
// reference point r, via scalarization along random unit directions:
//
//   HV = prod_j (r_j - z*_j) - c_m * E_w[ min(T(w), t_exit(w))^m ]
//
// where T(w) = min_i max_j (y_ij - z*_j) / w_j is the attainment distance
// along w and t_exit(w) = min_j (r_j - z*_j) / w_j is where the ray leaves
// the reference box. The clamp at t_exit is required: without it the
// integrand has infinite expectation for m >= 2 (rays grazing an axis),
// while with it the identity above is exact.
inline double hv_scalarization_estimate(const Eigen::MatrixXd& front,
                                        const Eigen::VectorXd& r,
                                        const ScalarizationContext& ctx,
                                        const HvSampler& sampler) {
  const int n = static_cast<int>(front.rows());
  const int m = static_cast<int>(front.cols());
  if (n < 1) throw DomainError("hv_estimate: empty front");
  if (r.size() != m) throw ShapeError("hv_estimate: reference dim mismatch");
  if (sampler.dim() != m) throw ShapeError("hv_estimate: sampler dim mismatch");
  if (ctx.ideal.size() != 0 && ctx.ideal.size() != m)
    throw ShapeError("hv_estimate: ideal dim mismatch");

  Eigen::VectorXd z(m);
  for (int j = 0; j < m; ++j) z(j) = ctx.ideal_at(j);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) {
      if (!(front(i, j) >= z(j)))
        throw DomainError("hv_estimate: point below the ideal point");
      if (!(front(i, j) < r(j)))
        throw DomainError("hv_estimate: point not strictly inside reference");
    }

  const int K = sampler.count();
  double acc = 0.0;
  for (int k = 0; k < K; ++k) {
    double t_exit = std::numeric_limits<double>::infinity();
    for (int j = 0; j < m; ++j)
      t_exit = std::min(t_exit, (r(j) - z(j)) / sampler.W(k, j));
    double t = std::numeric_limits<double>::infinity();
    for (int i = 0; i < n; ++i) {
      double s = -std::numeric_limits<double>::infinity();
      for (int j = 0; j < m; ++j)
        s = std::max(s, (front(i, j) - z(j)) / sampler.W(k, j));
      t = std::min(t, s);
    }
    t = std::min(t, t_exit);
    acc += std::pow(t, m);
  }

  double box = 1.0;
  for (int j = 0; j < m; ++j) box *= r(j) - z(j);
  return box - dimension_constant(m) * acc / K;
}

inline double hv_scalarization_estimate(const Eigen::MatrixXd& front,
                                        const Eigen::VectorXd& r,
                                        const ScalarizationContext& ctx,
                                        int K, std::uint64_t seed) {
  return hv_scalarization_estimate(
      front, r, ctx, make_hv_sampler(static_cast<int>(front.cols()), K, seed));
}

}  // namespace fomemo
