#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <istream>
#include <nlohmann/json.hpp>
#include <ostream>
#include <vector>

#include "fomemo/errors.hpp"
#include "fomemo/metrics.hpp"
#include "fomemo/rng.hpp"
#include "fomemo/scalarize.hpp"

namespace fomemo {

// Bounds for synthetic task shapes: input dimension up to d_max, objective
// count up to m_max, and N total points per task (trajectory + queries).
struct TaskShapeLimits {
  int d_max = 8;
  int m_max = 3;
  int N = 64;

  void validate() const {
    if (d_max < 1) throw DomainError("shape limits: d_max must be >= 1");
    if (m_max < 1) throw DomainError("shape limits: m_max must be >= 1");
    if (N < 2) throw DomainError("shape limits: N must be >= 2");
  }
};

struct TaskShape {
  int d = 0;  // input dimension
  int m = 0;  // objective count
  int n = 0;  // trajectory length, 1 <= n <= N-1
  int N = 0;  // total points (n trajectory + N-n queries)
};

// GP prior hyperparameters for one objective.
struct GpHyper {
  Eigen::VectorXd lengthscales;  // one per input dimension
  double output_scale = 1.0;
  double noise_variance = 1e-4;
};

// d and m are uniform over their ranges; n is drawn with weight 1/(N-n) so
// every trajectory length contributes roughly the same number of query
// points to the training loss.
inline TaskShape sample_task_shape(Rng& rng, const TaskShapeLimits& limits) {
  limits.validate();
  TaskShape s;
  s.d = static_cast<int>(rng.uniform_int(1, limits.d_max));
  s.m = static_cast<int>(rng.uniform_int(1, limits.m_max));
  s.N = limits.N;
  double total = 0.0;
  for (int n = 1; n <= limits.N - 1; ++n) total += 1.0 / (limits.N - n);
  const double u = rng.uniform() * total;
  double acc = 0.0;
  s.n = limits.N - 1;
  for (int n = 1; n <= limits.N - 1; ++n) {
    acc += 1.0 / (limits.N - n);
    if (u < acc) {
      s.n = n;
      break;
    }
  }
  return s;
}

// Lengthscales are Gamma(shape=3, rate=6) per feature (mean 0.5 on the unit
// cube); signal variance is fixed at 1 and observation noise at 1e-4.
inline GpHyper sample_gp_hyper(Rng& rng, int d) {
  if (d < 1) throw DomainError("sample_gp_hyper: d must be >= 1");
  GpHyper h;
  h.lengthscales.resize(d);
  for (int i = 0; i < d; ++i) h.lengthscales(i) = rng.gamma(3.0, 6.0);
  h.output_scale = 1.0;
  h.noise_variance = 1e-4;
  return h;
}

// Squared-exponential kernel with per-dimension (automatic relevance)
// lengthscales. Built pairwise so K is exactly symmetric and the diagonal is
// exactly output_scale^2.
inline Eigen::MatrixXd rbf_kernel_matrix(const Eigen::MatrixXd& X,
                                         const GpHyper& hyper) {
  const int n = static_cast<int>(X.rows());
  const int d = static_cast<int>(X.cols());
  if (hyper.lengthscales.size() != d)
    throw ShapeError("rbf_kernel_matrix: lengthscale count mismatch");
  const double s2 = hyper.output_scale * hyper.output_scale;
  Eigen::MatrixXd K(n, n);
  for (int i = 0; i < n; ++i) {
    K(i, i) = s2;
    for (int j = 0; j < i; ++j) {
      double q = 0.0;
      for (int k = 0; k < d; ++k) {
        const double t = (X(i, k) - X(j, k)) / hyper.lengthscales(k);
        q += t * t;
      }
      const double v = s2 * std::exp(-0.5 * q);
      K(i, j) = v;
      K(j, i) = v;
    }
  }
  return K;
}

// One joint draw from N(0, K + noise_variance I). On Cholesky failure the
// diagonal jitter escalates 1e-8, x10, ... up to jitter_max; exhausting the
// ladder raises FactorizationError (degenerate inputs).
inline Eigen::VectorXd sample_gp_function_values(const Eigen::MatrixXd& X,
                                                 const GpHyper& hyper,
                                                 Rng& rng,
                                                 double jitter_max = 1e-4) {
  const int n = static_cast<int>(X.rows());
  if (n < 1) throw DomainError("sample_gp_function_values: no points");
  Eigen::MatrixXd K = rbf_kernel_matrix(X, hyper);
  K.diagonal().array() += hyper.noise_variance;

  Eigen::LLT<Eigen::MatrixXd> llt(K);
  for (double jitter = 1e-8;
       llt.info() != Eigen::Success && jitter <= jitter_max * (1.0 + 1e-12);
       jitter *= 10.0) {
    Eigen::MatrixXd Kj = K;
    Kj.diagonal().array() += jitter;
    llt.compute(Kj);
  }
  if (llt.info() != Eigen::Success)
    throw FactorizationError(
        "sample_gp_function_values: Cholesky failed past the jitter ceiling");

  Eigen::VectorXd z(n);
  for (int i = 0; i < n; ++i) z(i) = rng.normal();
  return llt.matrixL() * z;
}

// One synthetic multi-objective task prepared for supervised training.
struct TrainingTask {
  TaskShape shape;
  Eigen::MatrixXd inputs;            // N x d, unit cube
  Eigen::MatrixXd raw_observations;  // N x m, pre-normalization
  Eigen::MatrixXd traj_norm;         // n x m, trajectory min-max normalized
  ObjectiveBounds bounds;            // trajectory normalization constants
  Eigen::VectorXd preference;        // simplex weights, length m
  Eigen::VectorXd targets;           // N-n query aggregation targets g

  Eigen::Block<const Eigen::MatrixXd> traj_inputs() const {
    return inputs.topRows(shape.n);
  }
  Eigen::Block<const Eigen::MatrixXd> query_inputs() const {
    return inputs.bottomRows(shape.N - shape.n);
  }
};

using TrainingBatch = std::vector<TrainingTask>;

struct PriorConfig {
  int batch_size = 64;
  TaskShapeLimits limits;
};

// Draws one batch of synthetic tasks. Per element: sample a shape, draw m
// independent GP functions on N uniform unit-cube inputs, split into n
// trajectory rows and N-n query rows, normalize objectives with
// trajectory-only min-max, sample one preference, and compute the query
// aggregation targets g = -max_j lambda_j * y_norm_j (z* = 0). A task whose
// kernel cannot be factorized is resampled, at most 8 times.
inline TrainingBatch generate_training_batch(Rng& rng,
                                             const PriorConfig& cfg) {
  if (cfg.batch_size < 1) throw DomainError("batch_size must be >= 1");
  cfg.limits.validate();

  TrainingBatch batch;
  batch.reserve(cfg.batch_size);
  for (int b = 0; b < cfg.batch_size; ++b) {
    TrainingTask task;
    bool ok = false;
    for (int attempt = 0; attempt < 8 && !ok; ++attempt) {
      task.shape = sample_task_shape(rng, cfg.limits);
      task.inputs.resize(task.shape.N, task.shape.d);
      for (int i = 0; i < task.shape.N; ++i)
        for (int j = 0; j < task.shape.d; ++j)
          task.inputs(i, j) = rng.uniform();
      task.raw_observations.resize(task.shape.N, task.shape.m);
      try {
        for (int j = 0; j < task.shape.m; ++j) {
          const GpHyper hyper = sample_gp_hyper(rng, task.shape.d);
          task.raw_observations.col(j) =
              sample_gp_function_values(task.inputs, hyper, rng);
        }
        ok = true;
      } catch (const FactorizationError&) {
        if (attempt == 7) throw;
      }
    }

    const auto nt =
        normalize_trajectory(task.raw_observations.topRows(task.shape.n));
    task.traj_norm = nt.values;
    task.bounds = nt.bounds;

    const Preference pref = sample_preference(rng, task.shape.m);
    task.preference = pref.weights();

    const int q = task.shape.N - task.shape.n;
    const Eigen::MatrixXd query_norm =
        task.bounds.apply(task.raw_observations.bottomRows(q));
    task.targets.resize(q);
    for (int i = 0; i < q; ++i)
      task.targets(i) =
          aggregation_target(query_norm.row(i).transpose(), pref);

    batch.push_back(std::move(task));
  }
  return batch;
}

namespace detail {
inline void write_f32(std::ostream& os, const Eigen::MatrixXd& m) {
  for (int i = 0; i < m.rows(); ++i)
    for (int j = 0; j < m.cols(); ++j) {
      const float f = static_cast<float>(m(i, j));
      os.write(reinterpret_cast<const char*>(&f), sizeof(float));
    }
}

inline Eigen::MatrixXd read_f32(std::istream& is, int rows, int cols) {
  Eigen::MatrixXd m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) {
      float f = 0.0f;
      is.read(reinterpret_cast<char*>(&f), sizeof(float));
      m(i, j) = static_cast<double>(f);
    }
  return m;
}
}  // namespace detail

// Length-prefixed binary dump of a batch: per record a u32 header length, a
// JSON shape header, then f32 little-endian tensors (inputs, normalized
// trajectory, query targets). Round-trips everything the trainer consumes.
inline void write_batch_dump(std::ostream& os, const TrainingBatch& batch) {
  for (const auto& t : batch) {
    nlohmann::json header;
    header["d"] = t.shape.d;
    header["m"] = t.shape.m;
    header["n"] = t.shape.n;
    header["N"] = t.shape.N;
    header["lambda"] = std::vector<double>(
        t.preference.data(), t.preference.data() + t.preference.size());
    header["offset"] = std::vector<double>(
        t.bounds.offset.data(), t.bounds.offset.data() + t.bounds.offset.size());
    header["range"] = std::vector<double>(
        t.bounds.range.data(), t.bounds.range.data() + t.bounds.range.size());
    const std::string hs = header.dump();
    const std::uint32_t hlen = static_cast<std::uint32_t>(hs.size());
    os.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    os.write(hs.data(), hs.size());
    detail::write_f32(os, t.inputs);
    detail::write_f32(os, t.traj_norm);
    detail::write_f32(os, t.targets);
  }
}

inline TrainingBatch read_batch_dump(std::istream& is) {
  TrainingBatch batch;
  for (;;) {
    std::uint32_t hlen = 0;
    is.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    if (!is) break;
    std::string hs(hlen, '\0');
    is.read(hs.data(), hlen);
    if (!is) throw DomainError("batch dump: truncated header");
    const auto header = nlohmann::json::parse(hs);
    TrainingTask t;
    t.shape.d = header.at("d").get<int>();
    t.shape.m = header.at("m").get<int>();
    t.shape.n = header.at("n").get<int>();
    t.shape.N = header.at("N").get<int>();
    const auto lam = header.at("lambda").get<std::vector<double>>();
    t.preference = Eigen::Map<const Eigen::VectorXd>(lam.data(), lam.size());
    const auto off = header.at("offset").get<std::vector<double>>();
    t.bounds.offset = Eigen::Map<const Eigen::VectorXd>(off.data(), off.size());
    const auto rng_ = header.at("range").get<std::vector<double>>();
    t.bounds.range =
        Eigen::Map<const Eigen::VectorXd>(rng_.data(), rng_.size());
    t.inputs = detail::read_f32(is, t.shape.N, t.shape.d);
    t.traj_norm = detail::read_f32(is, t.shape.n, t.shape.m);
    t.targets = detail::read_f32(is, t.shape.N - t.shape.n, 1);
    if (!is) throw DomainError("batch dump: truncated tensors");
    batch.push_back(std::move(t));
  }
  return batch;
}

}  // namespace fomemo
