#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fomemo/checkpoint.hpp"
#include "fomemo/errors.hpp"
#include "fomemo/model.hpp"
#include "fomemo/prior.hpp"
#include "fomemo/riemann.hpp"
#include "fomemo/rng.hpp"

namespace fomemo {

struct TrainConfig {
  int batch_size = 64;
  int steps_per_epoch = 256;
  int epochs = 50;
  int warmup_epochs = 2;
  double peak_lr = 3e-4;
  int eval_interval = 5;  // epochs between rolling checkpoint saves
  std::uint64_t seed = 20240901ULL;
  int eval_tasks = 512;        // pinned held-out set size
  int support_samples = 200000;  // prior draws behind the bin layout
  TaskShapeLimits limits;

  void validate() const {
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (steps_per_epoch < 1) throw ConfigError("steps_per_epoch must be >= 1");
    if (epochs < 0) throw ConfigError("epochs must be >= 0");
    if (warmup_epochs < 0) throw ConfigError("warmup_epochs must be >= 0");
    if (epochs > 0 && warmup_epochs >= epochs)
      throw ConfigError("warmup_epochs must be < epochs");
    if (!(peak_lr > 0.0)) throw ConfigError("peak_lr must be > 0");
    if (eval_interval < 1) throw ConfigError("eval_interval must be >= 1");
    if (eval_tasks < 1) throw ConfigError("eval_tasks must be >= 1");
    if (support_samples < 2)
      throw ConfigError("support_samples must be >= 2");
    limits.validate();
  }
};

// Linear ramp 0 -> peak over the warmup, then cosine decay to 0. Continuous,
// with its single maximum exactly at the warmup boundary.
inline double lr_schedule(long long step, long long total_steps,
                          long long warmup_steps, double peak_lr) {
  if (step < 0 || step > total_steps)
    throw DomainError("lr_schedule: step outside [0, total_steps]");
  if (warmup_steps > 0 && step <= warmup_steps)
    return peak_lr * static_cast<double>(step) /
           static_cast<double>(warmup_steps);
  if (total_steps == warmup_steps) return peak_lr;
  const double progress = static_cast<double>(step - warmup_steps) /
                          static_cast<double>(total_steps - warmup_steps);
  return peak_lr * 0.5 * (1.0 + std::cos(M_PI * progress));
}

// Streams prior tasks and collects their query aggregation targets until
// `count` values are available; truncated to exactly `count` so the result
// is a pure function of (limits, stream_seed, count).
inline std::vector<double> sample_prior_targets(const TaskShapeLimits& limits,
                                                int count,
                                                std::uint64_t stream_seed) {
  PriorConfig pc;
  pc.batch_size = 64;
  pc.limits = limits;
  Rng rng(stream_seed);
  std::vector<double> out;
  out.reserve(static_cast<size_t>(count) + 1024);
  while (static_cast<int>(out.size()) < count) {
    for (const auto& task : generate_training_batch(rng, pc))
      for (Eigen::Index i = 0; i < task.targets.size(); ++i)
        out.push_back(task.targets(i));
  }
  out.resize(static_cast<size_t>(count));
  return out;
}

inline RiemannSupport build_training_support(const TrainConfig& tc,
                                             int n_bins) {
  return build_riemann_support(
      sample_prior_targets(tc.limits, tc.support_samples,
                           derive_seed(tc.seed, "support")),
      n_bins);
}

// Additive-smoothed bin frequencies of a sample under a fixed support; the
// "predict the prior marginal" baseline that a trained model must beat.
inline Eigen::VectorXd bin_frequency_probs(const RiemannSupport& s,
                                           const std::vector<double>& samples) {
  Eigen::VectorXd counts = Eigen::VectorXd::Ones(s.bins());
  for (double g : samples) counts(s.bin_index(g)) += 1.0;
  return counts / counts.sum();
}

inline std::vector<TrainingTask> make_eval_tasks(const TrainConfig& tc) {
  PriorConfig pc;
  pc.batch_size = tc.eval_tasks;
  pc.limits = tc.limits;
  Rng rng(derive_seed(tc.seed, "eval"));
  return generate_training_batch(rng, pc);
}

inline ModelInput to_model_input(const TrainingTask& t) {
  ModelInput in;
  in.traj_x = t.traj_inputs();
  in.traj_y = t.traj_norm;
  in.query_x = t.query_inputs();
  in.query_pref =
      t.preference.transpose().replicate(t.query_inputs().rows(), 1);
  return in;
}

struct EvalReport {
  double nll = std::numeric_limits<double>::quiet_NaN();
  double cov50 = std::numeric_limits<double>::quiet_NaN();
  double cov90 = std::numeric_limits<double>::quiet_NaN();
};

// Held-out NLL plus empirical coverage of the central 50% and 90% predictive
// intervals, averaged over every query position of `tasks`.
template <typename S>
inline EvalReport eval_calibration(const ModelParams<S>& params,
                                   const RiemannSupport& support,
                                   const std::vector<TrainingTask>& tasks,
                                   int chunk = 64) {
  if (tasks.empty()) throw DomainError("eval_calibration: no tasks");
  double nll_sum = 0.0;
  long long in50 = 0, in90 = 0, total = 0;
  for (size_t base = 0; base < tasks.size();
       base += static_cast<size_t>(chunk)) {
    const size_t stop = std::min(tasks.size(), base + static_cast<size_t>(chunk));
    std::vector<ModelInput> inputs;
    inputs.reserve(stop - base);
    for (size_t i = base; i < stop; ++i)
      inputs.push_back(to_model_input(tasks[i]));
    const auto logits = model_forward<S>(params, inputs);
    for (size_t i = base; i < stop; ++i) {
      const Eigen::MatrixXd probs = softmax_rows(logits[i - base]);
      const Eigen::VectorXd& targets = tasks[i].targets;
      for (Eigen::Index r = 0; r < probs.rows(); ++r) {
        const Eigen::VectorXd p = probs.row(r).transpose();
        const double g = targets(r);
        nll_sum += riemann_nll(support, p, g);
        // g lies in the central interval (q_a, q_{1-a}] iff cdf(g) lies in
        // (a, 1-a]; one cdf evaluation replaces four quantile bisections.
        const double F = riemann_cdf(support, p, g);
        if (F > 0.25 && F <= 0.75) ++in50;
        if (F > 0.05 && F <= 0.95) ++in90;
        ++total;
      }
    }
  }
  EvalReport rep;
  rep.nll = nll_sum / static_cast<double>(total);
  rep.cov50 = static_cast<double>(in50) / static_cast<double>(total);
  rep.cov90 = static_cast<double>(in90) / static_cast<double>(total);
  return rep;
}

// Mean NLL of a fixed histogram (e.g. the bin-frequency baseline) on the
// same held-out targets eval_calibration sees.
inline double fixed_histogram_nll(const RiemannSupport& support,
                                  const Eigen::VectorXd& probs,
                                  const std::vector<TrainingTask>& tasks) {
  double nll_sum = 0.0;
  long long total = 0;
  for (const auto& t : tasks)
    for (Eigen::Index r = 0; r < t.targets.size(); ++r) {
      nll_sum += riemann_nll(support, probs, t.targets(r));
      ++total;
    }
  if (total == 0) throw DomainError("fixed_histogram_nll: no targets");
  return nll_sum / static_cast<double>(total);
}

// Returns the pre-clip global L2 norm; rescales in place when above the cap.
template <typename S>
inline double clip_global_norm(ModelParams<S>& grads, double max_norm) {
  double sq = 0.0;
  for (auto& t : grads.tensors())
    for (Eigen::Index i = 0; i < t.size(); ++i)
      sq += static_cast<double>(t.data[i]) * static_cast<double>(t.data[i]);
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const S scale = static_cast<S>(max_norm / norm);
    for (auto& t : grads.tensors())
      for (Eigen::Index i = 0; i < t.size(); ++i) t.data[i] *= scale;
  }
  return norm;
}

// One adaptive-moment update; `t` is the 1-based step index for bias
// correction.
template <typename S>
inline void adam_step(ModelParams<S>& params, ModelParams<S>& grads,
                      ModelParams<S>& m, ModelParams<S>& v, long long t,
                      double lr, double beta1 = 0.9, double beta2 = 0.999,
                      double eps = 1e-8) {
  if (t < 1) throw DomainError("adam_step: step index must be >= 1");
  const S b1 = static_cast<S>(beta1), b2 = static_cast<S>(beta2);
  const S bc1 = static_cast<S>(1.0 - std::pow(beta1, static_cast<double>(t)));
  const S bc2 = static_cast<S>(1.0 - std::pow(beta2, static_cast<double>(t)));
  const S lr_s = static_cast<S>(lr), eps_s = static_cast<S>(eps);
  auto ps = params.tensors();
  auto gs = grads.tensors();
  auto ms = m.tensors();
  auto vs = v.tensors();
  for (size_t i = 0; i < ps.size(); ++i) {
    S* p = ps[i].data;
    const S* g = gs[i].data;
    S* mm = ms[i].data;
    S* vv = vs[i].data;
    for (Eigen::Index j = 0; j < ps[i].size(); ++j) {
      mm[j] = b1 * mm[j] + (S(1) - b1) * g[j];
      vv[j] = b2 * vv[j] + (S(1) - b2) * g[j] * g[j];
      const S mhat = mm[j] / bc1;
      const S vhat = vv[j] / bc2;
      p[j] -= lr_s * mhat / (std::sqrt(vhat) + eps_s);
    }
  }
}

struct TrainResult {
  std::string checkpoint_path;
  std::string metrics_path;
  long long global_step = 0;
  double final_mean_loss = std::numeric_limits<double>::quiet_NaN();
  EvalReport final_eval;
};

namespace detail {

inline bool same_model_config(const ModelConfig& a, const ModelConfig& b) {
  return a.embed_dim == b.embed_dim && a.ff_dim == b.ff_dim &&
         a.n_heads == b.n_heads && a.n_layers == b.n_layers &&
         a.n_bins == b.n_bins && a.max_input_dim == b.max_input_dim &&
         a.max_objectives == b.max_objectives && a.max_tokens == b.max_tokens;
}

}  // namespace detail

// The pre-training loop. Every stochastic input is drawn from streams
// derived from (seed, purpose[, step]), so an interrupted run resumed from
// its checkpoint consumes exactly the same batches as an uninterrupted one.
inline TrainResult train(const TrainConfig& tc, const ModelConfig& mc,
                         const std::string& out_dir,
                         const std::string& resume_from = "") {
  tc.validate();
  mc.validate();
  std::filesystem::create_directories(out_dir);

  ModelParams<float> params;
  RiemannSupport support;
  TrainState state;
  ModelParams<float> adam_m = make_params<float>(mc);
  ModelParams<float> adam_v = make_params<float>(mc);
  if (!resume_from.empty()) {
    Checkpoint ckpt = load_checkpoint(resume_from);
    if (!detail::same_model_config(ckpt.params.config, mc))
      throw CheckpointError("train: resume model config mismatch");
    if (ckpt.train_state.master_seed != tc.seed)
      throw CheckpointError("train: resume seed mismatch");
    params = std::move(ckpt.params);
    support = std::move(ckpt.support);
    state = ckpt.train_state;
    if (ckpt.has_optimizer) {
      adam_m = std::move(ckpt.adam_m);
      adam_v = std::move(ckpt.adam_v);
    }
  } else {
    params = init_params<float>(mc, derive_seed(tc.seed, "init"));
    support = build_training_support(tc, mc.n_bins);
    state.master_seed = tc.seed;
  }

  const auto eval_tasks = make_eval_tasks(tc);

  const std::string metrics_path = out_dir + "/metrics.csv";
  const bool fresh_csv = !std::filesystem::exists(metrics_path);
  std::ofstream csv(metrics_path, std::ios::app);
  if (!csv) throw Error("train: cannot open " + metrics_path);
  csv.precision(17);
  if (fresh_csv) csv << "epoch,step,mean_loss,heldout_nll,lr,wall_ms\n";

  const long long total_steps =
      static_cast<long long>(tc.epochs) * tc.steps_per_epoch;
  const long long warmup_steps =
      static_cast<long long>(tc.warmup_epochs) * tc.steps_per_epoch;
  PriorConfig pc;
  pc.batch_size = tc.batch_size;
  pc.limits = tc.limits;

  ModelParams<float> grads = make_params<float>(mc);
  TrainResult result;
  result.metrics_path = metrics_path;

  for (long long epoch = state.epoch; epoch < tc.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    double loss_sum = 0.0;
    double lr = 0.0;
    for (int s = 0; s < tc.steps_per_epoch; ++s) {
      Rng rng(derive_seed(tc.seed, "data",
                          static_cast<std::uint64_t>(state.global_step)));
      const auto batch = generate_training_batch(rng, pc);
      std::vector<ModelInput> inputs;
      std::vector<Eigen::VectorXd> targets;
      inputs.reserve(batch.size());
      targets.reserve(batch.size());
      for (const auto& task : batch) {
        inputs.push_back(to_model_input(task));
        targets.push_back(task.targets);
      }
      ForwardCache<float> cache;
      const auto logits = model_forward<float>(params, inputs, &cache);
      std::vector<MatX<float>> dlogits;
      const double loss = bar_loss(support, logits, targets, &dlogits);
      if (!std::isfinite(loss))
        throw Error("train: non-finite loss at step " +
                    std::to_string(state.global_step));
      zero_params(grads);
      model_backward(params, cache, dlogits, grads);
      clip_global_norm(grads, 1.0);
      lr = lr_schedule(state.global_step, total_steps, warmup_steps,
                       tc.peak_lr);
      adam_step(params, grads, adam_m, adam_v, state.global_step + 1, lr);
      ++state.global_step;
      loss_sum += loss;
    }
    state.epoch = epoch + 1;

    const EvalReport ev = eval_calibration(params, support, eval_tasks);
    const auto wall_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                             std::chrono::steady_clock::now() - t0)
                             .count();
    csv << state.epoch << ',' << state.global_step << ','
        << loss_sum / tc.steps_per_epoch << ',' << ev.nll << ',' << lr << ','
        << wall_ms << '\n';
    csv.flush();
    result.final_mean_loss = loss_sum / tc.steps_per_epoch;
    result.final_eval = ev;

    if (state.epoch % tc.eval_interval == 0 && state.epoch < tc.epochs)
      save_checkpoint(out_dir + "/last.ckpt", params, support, state, &adam_m,
                      &adam_v);
  }

  result.checkpoint_path = out_dir + "/model.ckpt";
  save_checkpoint(result.checkpoint_path, params, support, state, &adam_m,
                  &adam_v);
  result.global_step = state.global_step;
  return result;
}

// JSON config parsing for the training pipeline: a versioned document with a
// required "model" block and an optional "train" block.
inline ModelConfig model_config_from_file_json(const nlohmann::json& j) {
  try {
    return detail::model_config_from_json(j);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig tc;
  try {
    tc.batch_size = j.value("batch_size", tc.batch_size);
    tc.steps_per_epoch = j.value("steps_per_epoch", tc.steps_per_epoch);
    tc.epochs = j.value("epochs", tc.epochs);
    tc.warmup_epochs = j.value("warmup_epochs", tc.warmup_epochs);
    tc.peak_lr = j.value("peak_lr", tc.peak_lr);
    tc.eval_interval = j.value("eval_interval", tc.eval_interval);
    tc.seed = j.value("seed", tc.seed);
    tc.eval_tasks = j.value("eval_tasks", tc.eval_tasks);
    tc.support_samples = j.value("support_samples", tc.support_samples);
    if (j.contains("limits")) {
      const auto& l = j.at("limits");
      tc.limits.d_max = l.value("d_max", tc.limits.d_max);
      tc.limits.m_max = l.value("m_max", tc.limits.m_max);
      tc.limits.N = l.value("N", tc.limits.N);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  tc.validate();
  return tc;
}

inline nlohmann::json train_config_to_json(const TrainConfig& tc) {
  return nlohmann::json{{"batch_size", tc.batch_size},
                        {"steps_per_epoch", tc.steps_per_epoch},
                        {"epochs", tc.epochs},
                        {"warmup_epochs", tc.warmup_epochs},
                        {"peak_lr", tc.peak_lr},
                        {"eval_interval", tc.eval_interval},
                        {"seed", tc.seed},
                        {"eval_tasks", tc.eval_tasks},
                        {"support_samples", tc.support_samples},
                        {"limits",
                         {{"d_max", tc.limits.d_max},
                          {"m_max", tc.limits.m_max},
                          {"N", tc.limits.N}}}};
}

}  // namespace fomemo
