#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <vector>

#include "fomemo/errors.hpp"

namespace fomemo {

// Support of the bar (Riemann) distribution the model predicts over
// aggregation values g: B-1 strictly increasing boundaries carve the line
// into B bins. Interior bins are uniform; the two outer bins are half-normal
// tails with a shared scale, anchored at the outer boundaries.
struct RiemannSupport {
  Eigen::VectorXd boundaries;  // length B-1, strictly increasing
  double tail_scale = 1.0;

  int bins() const { return static_cast<int>(boundaries.size()) + 1; }

  // Bin k covers (b_{k-1}, b_k]; bin 0 is (-inf, b_0], the last bin is
  // (b_{B-2}, inf).
  int bin_index(double g) const {
    const double* begin = boundaries.data();
    const double* end = begin + boundaries.size();
    return static_cast<int>(std::lower_bound(begin, end, g) - begin);
  }

  bool is_left_tail(int k) const { return k == 0; }
  bool is_right_tail(int k) const { return k == bins() - 1; }
  double lower(int k) const { return boundaries(k - 1); }   // interior only
  double upper(int k) const { return boundaries(k); }       // interior only
  double left_anchor() const { return boundaries(0); }
  double right_anchor() const { return boundaries(boundaries.size() - 1); }
};

// Equal-prior-mass support: boundaries at the k/B quantiles of the sample
// set (linear interpolation), tail scale at twice the 95th percentile of the
// overshoots beyond the outer boundaries.
inline RiemannSupport build_riemann_support(std::vector<double> samples,
                                            int B) {
  if (B < 2) throw DomainError("build_riemann_support: need at least 2 bins");
  if (samples.size() < 2)
    throw DomainError("build_riemann_support: need at least 2 samples");
  std::sort(samples.begin(), samples.end());
  const auto quantile = [&](double p) {
    const double pos = p * (samples.size() - 1);
    const size_t lo = static_cast<size_t>(pos);
    const double frac = pos - lo;
    if (lo + 1 >= samples.size()) return samples.back();
    return samples[lo] * (1.0 - frac) + samples[lo + 1] * frac;
  };

  RiemannSupport s;
  s.boundaries.resize(B - 1);
  for (int k = 1; k < B; ++k)
    s.boundaries(k - 1) = quantile(static_cast<double>(k) / B);
  for (int k = 1; k < B - 1; ++k)
    if (!(s.boundaries(k) > s.boundaries(k - 1)))
      throw DegenerateSupport(
          "build_riemann_support: quantile boundaries collapsed");

  std::vector<double> overshoot;
  for (double v : samples) {
    if (v < s.left_anchor()) overshoot.push_back(s.left_anchor() - v);
    if (v > s.right_anchor()) overshoot.push_back(v - s.right_anchor());
  }
  if (overshoot.empty()) {
    s.tail_scale = 1.0;
  } else {
    std::sort(overshoot.begin(), overshoot.end());
    const double pos = 0.95 * (overshoot.size() - 1);
    const size_t lo = static_cast<size_t>(pos);
    const double frac = pos - lo;
    const double p95 = (lo + 1 < overshoot.size())
                           ? overshoot[lo] * (1.0 - frac) +
                                 overshoot[lo + 1] * frac
                           : overshoot.back();
    s.tail_scale = std::max(2.0 * p95, 1e-12);
  }
  return s;
}

namespace detail {
inline double std_normal_cdf(double t) {
  return 0.5 * std::erfc(-t * M_SQRT1_2);
}
inline double std_normal_sf(double t) {  // 1 - Phi(t), accurate for t >> 0
  return 0.5 * std::erfc(t * M_SQRT1_2);
}
inline constexpr double kHalfNormalMean = 0.7978845608028654;  // sqrt(2/pi)
}  // namespace detail

// Per-bin expectation building blocks. All take the probability vector p
// (length B, non-negative, summing to 1) alongside the support.

inline double riemann_bin_mean(const RiemannSupport& s, int k) {
  if (s.is_left_tail(k))
    return s.left_anchor() - s.tail_scale * detail::kHalfNormalMean;
  if (s.is_right_tail(k))
    return s.right_anchor() + s.tail_scale * detail::kHalfNormalMean;
  return 0.5 * (s.lower(k) + s.upper(k));
}

inline double riemann_bin_second_moment(const RiemannSupport& s, int k) {
  const double ts = s.tail_scale;
  if (s.is_left_tail(k)) {
    const double a = s.left_anchor();
    return a * a - 2.0 * a * ts * detail::kHalfNormalMean + ts * ts;
  }
  if (s.is_right_tail(k)) {
    const double a = s.right_anchor();
    return a * a + 2.0 * a * ts * detail::kHalfNormalMean + ts * ts;
  }
  const double l = s.lower(k), u = s.upper(k);
  return (l * l + l * u + u * u) / 3.0;
}

// E[(X - g)_+] restricted to bin k (conditional on the bin).
inline double riemann_bin_ei(const RiemannSupport& s, int k, double g) {
  const double ts = s.tail_scale;
  if (s.is_left_tail(k)) {
    const double a = s.left_anchor();
    if (g >= a) return 0.0;
    const double t = (a - g) / ts;
    return ts * (t * (2.0 * detail::std_normal_cdf(t) - 1.0) -
                 detail::kHalfNormalMean * (1.0 - std::exp(-0.5 * t * t)));
  }
  if (s.is_right_tail(k)) {
    const double a = s.right_anchor();
    if (g <= a) return riemann_bin_mean(s, k) - g;
    const double t = (g - a) / ts;
    return ts * (detail::kHalfNormalMean * std::exp(-0.5 * t * t) -
                 2.0 * t * detail::std_normal_sf(t));
  }
  const double l = s.lower(k), u = s.upper(k);
  if (g <= l) return 0.5 * (l + u) - g;
  if (g >= u) return 0.0;
  return (u - g) * (u - g) / (2.0 * (u - l));
}

// Within-bin cumulative distribution F_k(v) in [0, 1].
inline double riemann_bin_cdf(const RiemannSupport& s, int k, double v) {
  const double ts = s.tail_scale;
  if (s.is_left_tail(k)) {
    const double a = s.left_anchor();
    if (v >= a) return 1.0;
    return 2.0 * detail::std_normal_sf((a - v) / ts);
  }
  if (s.is_right_tail(k)) {
    const double a = s.right_anchor();
    if (v <= a) return 0.0;
    return 2.0 * detail::std_normal_cdf((v - a) / ts) - 1.0;
  }
  const double l = s.lower(k), u = s.upper(k);
  if (v <= l) return 0.0;
  if (v >= u) return 1.0;
  return (v - l) / (u - l);
}

// Log of the bin's base density at g (the bin's conditional pdf).
inline double riemann_bin_log_density(const RiemannSupport& s, int k,
                                      double g) {
  const double ts = s.tail_scale;
  constexpr double kLogSqrt2Pi = 0.9189385332046727;
  if (s.is_left_tail(k)) {
    const double t = (s.left_anchor() - g) / ts;
    return std::log(2.0) - std::log(ts) - kLogSqrt2Pi - 0.5 * t * t;
  }
  if (s.is_right_tail(k)) {
    const double t = (g - s.right_anchor()) / ts;
    return std::log(2.0) - std::log(ts) - kLogSqrt2Pi - 0.5 * t * t;
  }
  return -std::log(s.upper(k) - s.lower(k));
}

inline double riemann_mean(const RiemannSupport& s,
                           const Eigen::Ref<const Eigen::VectorXd>& p) {
  double acc = 0.0;
  for (int k = 0; k < s.bins(); ++k) acc += p(k) * riemann_bin_mean(s, k);
  return acc;
}

inline double riemann_variance(const RiemannSupport& s,
                               const Eigen::Ref<const Eigen::VectorXd>& p) {
  double e1 = 0.0, e2 = 0.0;
  for (int k = 0; k < s.bins(); ++k) {
    e1 += p(k) * riemann_bin_mean(s, k);
    e2 += p(k) * riemann_bin_second_moment(s, k);
  }
  return std::max(e2 - e1 * e1, 0.0);
}

inline double riemann_std(const RiemannSupport& s,
                          const Eigen::Ref<const Eigen::VectorXd>& p) {
  return std::sqrt(riemann_variance(s, p));
}

inline double riemann_cdf(const RiemannSupport& s,
                          const Eigen::Ref<const Eigen::VectorXd>& p,
                          double v) {
  const int idx = s.bin_index(v);
  double acc = 0.0;
  for (int k = 0; k < idx; ++k) acc += p(k);
  return acc + p(idx) * riemann_bin_cdf(s, idx, v);
}

// Expected improvement over threshold g*: E[max(X - g*, 0)].
inline double riemann_ei(const RiemannSupport& s,
                         const Eigen::Ref<const Eigen::VectorXd>& p,
                         double gstar) {
  double acc = 0.0;
  for (int k = 0; k < s.bins(); ++k) acc += p(k) * riemann_bin_ei(s, k, gstar);
  return acc;
}

// Negative log predictive density at g (the held-out evaluation loss).
inline double riemann_nll(const RiemannSupport& s,
                          const Eigen::Ref<const Eigen::VectorXd>& p,
                          double g) {
  const int k = s.bin_index(g);
  return -(std::log(std::max(p(k), 1e-300)) +
           riemann_bin_log_density(s, k, g));
}

// Quantile by bisection on the cdf; prob must lie in (0, 1).
inline double riemann_quantile(const RiemannSupport& s,
                               const Eigen::Ref<const Eigen::VectorXd>& p,
                               double prob) {
  if (!(prob > 0.0 && prob < 1.0))
    throw DomainError("riemann_quantile: prob must be in (0,1)");
  double lo = s.left_anchor() - 10.0 * s.tail_scale;
  double hi = s.right_anchor() + 10.0 * s.tail_scale;
  for (int i = 0; i < 200 && riemann_cdf(s, p, lo) > prob; ++i)
    lo -= (hi - lo);
  for (int i = 0; i < 200 && riemann_cdf(s, p, hi) < prob; ++i)
    hi += (hi - lo);
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    if (riemann_cdf(s, p, mid) < prob)
      lo = mid;
    else
      hi = mid;
  }
  return 0.5 * (lo + hi);
}

// Posterior over aggregation values: a probability vector bound to a
// support. The support is borrowed (it lives in the loaded checkpoint).
class PosteriorHistogram {
 public:
  PosteriorHistogram(const RiemannSupport& support, Eigen::VectorXd probs)
      : support_(&support), p_(std::move(probs)) {
    if (p_.size() != support.bins())
      throw ShapeError("posterior: probability/bin count mismatch");
  }

  const Eigen::VectorXd& probs() const { return p_; }
  const RiemannSupport& support() const { return *support_; }

  double mean() const { return riemann_mean(*support_, p_); }
  double variance() const { return riemann_variance(*support_, p_); }
  double stddev() const { return riemann_std(*support_, p_); }
  double cdf(double v) const { return riemann_cdf(*support_, p_, v); }
  double ei(double gstar) const { return riemann_ei(*support_, p_, gstar); }
  double nll(double g) const { return riemann_nll(*support_, p_, g); }
  double quantile(double prob) const {
    return riemann_quantile(*support_, p_, prob);
  }

 private:
  const RiemannSupport* support_;
  Eigen::VectorXd p_;
};

}  // namespace fomemo
