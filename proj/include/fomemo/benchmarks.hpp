#pragma once

#include <Eigen/Dense>
#include <boost/random/sobol.hpp>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "fomemo/errors.hpp"
#include "fomemo/metrics.hpp"
#include "fomemo/rng.hpp"

namespace fomemo {

// A box-bounded multi-objective test problem. The optimizer always works in
// the unit cube; evaluate_unit maps affinely into the native bounds first,
// and the mapping is exact at box corners.
struct BenchmarkProblem {
  std::string name;
  int d = 0;
  int m = 0;
  Eigen::MatrixX2d bounds;  // d x 2: column 0 = lower, column 1 = upper
  std::function<Eigen::VectorXd(const Eigen::VectorXd&)> evaluator;
  std::function<Eigen::MatrixXd(int)> front_sampler;  // empty if unknown

  Eigen::VectorXd from_unit(const Eigen::VectorXd& u) const {
    if (u.size() != d) throw DimensionError(name + ": expected d=" +
                                            std::to_string(d) + " inputs");
    return bounds.col(0).array() +
           u.array() * (bounds.col(1) - bounds.col(0)).array();
  }

  Eigen::VectorXd to_unit(const Eigen::VectorXd& x) const {
    if (x.size() != d) throw DimensionError(name + ": expected d=" +
                                            std::to_string(d) + " inputs");
    return (x.array() - bounds.col(0).array()) /
           (bounds.col(1) - bounds.col(0)).array();
  }

  Eigen::VectorXd evaluate(const Eigen::VectorXd& x) const {
    if (x.size() != d) throw DimensionError(name + ": expected d=" +
                                            std::to_string(d) + " inputs");
    for (int i = 0; i < d; ++i)
      if (!(x(i) >= bounds(i, 0) && x(i) <= bounds(i, 1)))
        throw BoundsError(name + ": x(" + std::to_string(i) +
                          ") outside [" + std::to_string(bounds(i, 0)) + ", " +
                          std::to_string(bounds(i, 1)) + "]");
    return evaluator(x);
  }

  Eigen::VectorXd evaluate_unit(const Eigen::VectorXd& u) const {
    return evaluate(from_unit(u));
  }

  bool has_front() const { return static_cast<bool>(front_sampler); }

  Eigen::MatrixXd true_front(int n_points) const {
    if (!front_sampler)
      throw NoAnalyticFront(name + ": no analytic front available");
    return front_sampler(n_points);
  }
};

namespace detail {

// The standard two-objective ZDT definitions on the unit cube. ZDT4's tail
// variables live on [-5, 5] and are mapped there internally so every
// instance presents unit-cube bounds.
inline Eigen::VectorXd zdt_eval(int variant, const Eigen::VectorXd& x) {
  const int d = static_cast<int>(x.size());
  const double f1 =
      variant == 6
          ? 1.0 - std::exp(-4.0 * x(0)) * std::pow(std::sin(6.0 * M_PI * x(0)), 6)
          : x(0);
  double g = 1.0;
  switch (variant) {
    case 1:
    case 2:
    case 3:
      g = 1.0 + 9.0 * x.tail(d - 1).sum() / (d - 1);
      break;
    case 4: {
      g = 1.0 + 10.0 * (d - 1);
      for (int i = 1; i < d; ++i) {
        const double z = -5.0 + 10.0 * x(i);
        g += z * z - 10.0 * std::cos(4.0 * M_PI * z);
      }
      break;
    }
    case 6:
      g = 1.0 + 9.0 * std::pow(x.tail(d - 1).sum() / (d - 1), 0.25);
      break;
    default:
      throw ProblemError("zdt_eval: unknown variant " +
                         std::to_string(variant));
  }
  const double r = f1 / g;
  double f2 = 0.0;
  switch (variant) {
    case 1:
    case 4:
      f2 = g * (1.0 - std::sqrt(r));
      break;
    case 2:
    case 6:
      f2 = g * (1.0 - r * r);
      break;
    case 3:
      f2 = g * (1.0 - std::sqrt(r) - r * std::sin(10.0 * M_PI * f1));
      break;
  }
  Eigen::VectorXd f(2);
  f << f1, f2;
  return f;
}

// Evenly spaced points on a parametric curve u in [0, 1] -> R^2.
inline Eigen::MatrixXd sample_curve(
    int n, const std::function<Eigen::Vector2d(double)>& curve) {
  if (n < 2) throw DomainError("true_front: need at least 2 points");
  Eigen::MatrixXd out(n, 2);
  for (int i = 0; i < n; ++i)
    out.row(i) = curve(static_cast<double>(i) / (n - 1)).transpose();
  return out;
}

// Fronts with no closed parametrization (ZDT3's disconnected segments,
// ZDT6's restricted f1 range): dominance-filter a dense sweep of the g=1
// slice, then take evenly spaced indices. The sweep is even in the sweep
// parameter, so index spacing is even within each surviving segment.
inline Eigen::MatrixXd sample_swept_front(
    int n, const std::function<Eigen::Vector2d(double)>& slice) {
  if (n < 2) throw DomainError("true_front: need at least 2 points");
  const int kSweep = 10000;
  Eigen::MatrixXd sweep(kSweep, 2);
  for (int i = 0; i < kSweep; ++i)
    sweep.row(i) = slice(static_cast<double>(i) / (kSweep - 1)).transpose();
  const Eigen::MatrixXd front = pareto_filter(sweep);
  const Eigen::Index size = front.rows();
  if (n > size) throw DomainError("true_front: more points than sweep");
  Eigen::MatrixXd out(n, 2);
  for (int i = 0; i < n; ++i) {
    const Eigen::Index idx = (static_cast<Eigen::Index>(i) * (size - 1)) / (n - 1);
    out.row(i) = front.row(idx);
  }
  return out;
}

}  // namespace detail

inline Eigen::VectorXd zdt_evaluate(int variant, const Eigen::VectorXd& x) {
  if (x.size() < 2) throw DimensionError("zdt: need d >= 2");
  for (Eigen::Index i = 0; i < x.size(); ++i)
    if (!(x(i) >= 0.0 && x(i) <= 1.0))
      throw BoundsError("zdt: x outside the unit cube");
  return detail::zdt_eval(variant, x);
}

inline Eigen::VectorXd omnitest_evaluate(const Eigen::VectorXd& x) {
  if (x.size() != 2) throw DimensionError("omnitest: d must be 2");
  for (Eigen::Index i = 0; i < x.size(); ++i)
    if (!(x(i) >= 0.0 && x(i) <= 6.0))
      throw BoundsError("omnitest: x outside [0, 6]^2");
  Eigen::VectorXd f(2);
  f << std::sin(M_PI * x(0)) + std::sin(M_PI * x(1)),
      std::cos(M_PI * x(0)) + std::cos(M_PI * x(1));
  return f;
}

inline std::vector<std::string> registered_problems() {
  return {"zdt1", "zdt2", "zdt3", "zdt4", "zdt6", "omnitest"};
}

// Factory for the built-in problems. d_override applies to the ZDT family
// (default d=8); omnitest is fixed at d=2.
inline BenchmarkProblem make_problem(const std::string& name,
                                     int d_override = 0) {
  BenchmarkProblem p;
  p.name = name;
  if (name.rfind("zdt", 0) == 0 && name.size() == 4) {
    const int variant = name[3] - '0';
    if (variant != 1 && variant != 2 && variant != 3 && variant != 4 &&
        variant != 6)
      throw ProblemError("unknown problem: " + name);
    p.d = d_override > 0 ? d_override : 8;
    if (p.d < 2 || p.d > 30)
      throw ProblemError(name + ": d must be in [2, 30]");
    p.m = 2;
    p.bounds = Eigen::MatrixX2d(p.d, 2);
    p.bounds.col(0).setZero();
    p.bounds.col(1).setOnes();
    p.evaluator = [variant](const Eigen::VectorXd& x) {
      return detail::zdt_eval(variant, x);
    };
    switch (variant) {
      case 1:
      case 4:
        p.front_sampler = [](int n) {
          return detail::sample_curve(n, [](double u) {
            return Eigen::Vector2d(u * u, 1.0 - u);
          });
        };
        break;
      case 2:
        p.front_sampler = [](int n) {
          return detail::sample_curve(n, [](double u) {
            return Eigen::Vector2d(u, 1.0 - u * u);
          });
        };
        break;
      case 3:
        p.front_sampler = [](int n) {
          return detail::sample_swept_front(n, [](double u) {
            const double f2 =
                1.0 - std::sqrt(u) - u * std::sin(10.0 * M_PI * u);
            return Eigen::Vector2d(u, f2);
          });
        };
        break;
      case 6:
        p.front_sampler = [](int n) {
          return detail::sample_swept_front(n, [](double u) {
            const double f1 = 1.0 - std::exp(-4.0 * u) *
                                        std::pow(std::sin(6.0 * M_PI * u), 6);
            return Eigen::Vector2d(f1, 1.0 - f1 * f1);
          });
        };
        break;
    }
    return p;
  }
  if (name == "omnitest") {
    if (d_override > 0 && d_override != 2)
      throw ProblemError("omnitest: d is fixed at 2");
    p.d = 2;
    p.m = 2;
    p.bounds = Eigen::MatrixX2d(2, 2);
    p.bounds.col(0).setZero();
    p.bounds.col(1).setConstant(6.0);
    p.evaluator = [](const Eigen::VectorXd& x) {
      Eigen::VectorXd f(2);
      f << std::sin(M_PI * x(0)) + std::sin(M_PI * x(1)),
          std::cos(M_PI * x(0)) + std::cos(M_PI * x(1));
      return f;
    };
    // Both coordinates at the same angle t in [pi, 3pi/2] trace the front
    // 2(sin t, cos t); mixed angles give the same direction scaled toward
    // zero, which is dominated in the all-negative quadrant.
    p.front_sampler = [](int n) {
      return detail::sample_curve(n, [](double u) {
        const double t = M_PI + 0.5 * M_PI * u;
        return Eigen::Vector2d(2.0 * std::sin(t), 2.0 * std::cos(t));
      });
    };
    return p;
  }
  std::string known;
  for (const auto& r : registered_problems()) known += " " + r;
  throw ProblemError("unknown problem: " + name + " (registered:" + known +
                     ")");
}

// Scrambled Sobol points in the open unit cube. Digital-shift scrambling:
// each dimension's raw 64-bit values are XORed with a seed-derived mask;
// seed 0 means unscrambled. The generator skips the all-zeros point, and the
// mapping ((v >> 11) * 2^-53 floored at 2^-54) keeps every coordinate inside
// (0, 1) while preserving exact dyadic values in the unscrambled sequence.
inline Eigen::MatrixXd sobol_points(int d, int n, std::uint64_t seed) {
  if (d < 1 || d > 30)
    throw DimensionError("sobol_points: d must be in [1, 30]");
  if (n < 0) throw DomainError("sobol_points: n must be >= 0");
  std::vector<std::uint64_t> mask(static_cast<size_t>(d), 0);
  if (seed != 0)
    for (int j = 0; j < d; ++j)
      mask[static_cast<size_t>(j)] = derive_seed(seed, "sobol", j);
  boost::random::sobol_engine<std::uint64_t, 64u> eng(
      static_cast<std::size_t>(d));
  Eigen::MatrixXd pts(n, d);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) {
      const std::uint64_t v = eng() ^ mask[static_cast<size_t>(j)];
      pts(i, j) = std::max((v >> 11) * 0x1p-53, 0x1p-54);
    }
  return pts;
}

}  // namespace fomemo
