#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "fomemo/acquisition.hpp"
#include "fomemo/baselines.hpp"
#include "fomemo/benchmarks.hpp"
#include "fomemo/checkpoint.hpp"
#include "fomemo/errors.hpp"
#include "fomemo/external_problem.hpp"
#include "fomemo/metrics.hpp"
#include "fomemo/runio.hpp"
#include "fomemo/trainer.hpp"

namespace fomemo {

inline constexpr const char* kToolVersion = "fomemo 0.1.0";

// Exit codes: 0 success, 2 configuration error, 3 runtime error, 4 partial
// benchmark failure.
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitRuntime = 3;
inline constexpr int kExitPartial = 4;

inline std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(v));
  return buf;
}

inline std::string iso8601_utc_now() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline nlohmann::json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

inline void write_manifest(const std::string& dir,
                           const nlohmann::json& manifest) {
  std::ofstream out(dir + "/manifest.json");
  if (!out) throw Error("cannot write manifest in " + dir);
  out << manifest.dump(2) << '\n';
}

inline std::string join_args(int argc, char** argv) {
  std::string s;
  for (int i = 0; i < argc; ++i) {
    if (i) s += ' ';
    s += argv[i];
  }
  return s;
}

// Parses the versioned training config document: {"schema":1, "model":{...},
// "train":{...}}.
inline void parse_train_document(const nlohmann::json& doc, ModelConfig& mc,
                                 TrainConfig& tc) {
  if (!doc.contains("schema"))
    throw ConfigError("config missing required field: schema");
  if (doc.at("schema").get<int>() != 1)
    throw ConfigError("unsupported config schema (expected 1)");
  if (!doc.contains("model"))
    throw ConfigError("config missing required field: model");
  mc = model_config_from_file_json(doc.at("model"));
  mc.validate();
  tc = doc.contains("train") ? train_config_from_json(doc.at("train"))
                             : TrainConfig{};
  tc.validate();
}

struct TrainCliOptions {
  std::string config_path;
  std::string out_dir = "runs/train";
  std::string resume;
  bool dry_run = false;
  std::string command_line;  // for the manifest
};

inline int cmd_train(const TrainCliOptions& opt) {
  const nlohmann::json doc = load_json_file(opt.config_path);
  ModelConfig mc;
  TrainConfig tc;
  parse_train_document(doc, mc, tc);

  if (opt.dry_run) {
    // Build everything and take a single optimizer step, writing nothing.
    ModelParams<float> params =
        init_params<float>(mc, derive_seed(tc.seed, "init"));
    TrainConfig small = tc;
    small.support_samples = std::min(tc.support_samples, 5000);
    const RiemannSupport support = build_training_support(small, mc.n_bins);
    PriorConfig pc;
    pc.batch_size = tc.batch_size;
    pc.limits = tc.limits;
    Rng rng(derive_seed(tc.seed, "data", 0));
    const auto batch = generate_training_batch(rng, pc);
    std::vector<ModelInput> inputs;
    std::vector<Eigen::VectorXd> targets;
    for (const auto& task : batch) {
      inputs.push_back(to_model_input(task));
      targets.push_back(task.targets);
    }
    ForwardCache<float> cache;
    const auto logits = model_forward<float>(params, inputs, &cache);
    std::vector<MatX<float>> dlogits;
    const double loss = bar_loss(support, logits, targets, &dlogits);
    ModelParams<float> grads = make_params<float>(mc);
    model_backward(params, cache, dlogits, grads);
    clip_global_norm(grads, 1.0);
    ModelParams<float> m = make_params<float>(mc), v = make_params<float>(mc);
    adam_step(params, grads, m, v, 1,
              lr_schedule(1, static_cast<long long>(tc.epochs) *
                                 tc.steps_per_epoch,
                          static_cast<long long>(tc.warmup_epochs) *
                              tc.steps_per_epoch,
                          tc.peak_lr));
    std::printf("dry-run ok: %lld parameters, one-step loss %.6f\n",
                static_cast<long long>(params.parameter_count()), loss);
    return kExitOk;
  }

  const TrainResult res = train(tc, mc, opt.out_dir, opt.resume);
  nlohmann::json manifest{
      {"schema", 1},
      {"tool", kToolVersion},
      {"command", opt.command_line},
      {"kind", "train"},
      {"config_hash", hex64(fnv1a64(doc.dump()))},
      {"master_seed", tc.seed},
      {"derived_seeds",
       {{"init", derive_seed(tc.seed, "init")},
        {"support", derive_seed(tc.seed, "support")},
        {"eval", derive_seed(tc.seed, "eval")}}},
      {"created", iso8601_utc_now()},
      {"checkpoint", res.checkpoint_path},
      {"metrics", res.metrics_path},
      {"global_step", res.global_step},
      {"final_heldout_nll", res.final_eval.nll},
      {"final_cov50", res.final_eval.cov50},
      {"final_cov90", res.final_eval.cov90}};
  write_manifest(opt.out_dir, manifest);
  std::printf("trained %lld steps; heldout nll %.6f; checkpoint %s\n",
              res.global_step, res.final_eval.nll,
              res.checkpoint_path.c_str());
  return kExitOk;
}

// ---------------------------------------------------------------------------
// Problem selection shared by optimize / bench / posterior / report.

struct ProblemCliOptions {
  std::string problem = "zdt1";
  int dim = 0;  // 0 keeps each problem's default dimensionality
  // The remaining fields only apply to "external:<command>" problems.
  int ext_dim = 0;
  int ext_objectives = 0;
  double ext_timeout = 60.0;
  std::string ext_bounds;  // "lo:hi,lo:hi,..." one pair per input, optional
};

namespace detail {

inline std::vector<std::string> split_on(const std::string& text, char sep) {
  std::vector<std::string> parts;
  std::string cur;
  for (char c : text) {
    if (c == sep) {
      parts.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  parts.push_back(cur);
  return parts;
}

inline double parse_double(const std::string& text, const std::string& what) {
  try {
    size_t pos = 0;
    const double v = std::stod(text, &pos);
    if (pos != text.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw ConfigError(what + ": cannot parse number from '" + text + "'");
  }
}

inline Eigen::MatrixX2d parse_bounds_list(const std::string& text, int d) {
  const auto pairs = split_on(text, ',');
  if (static_cast<int>(pairs.size()) != d)
    throw ConfigError("bounds: expected " + std::to_string(d) +
                      " lo:hi pairs, got " + std::to_string(pairs.size()));
  Eigen::MatrixX2d b(d, 2);
  for (int i = 0; i < d; ++i) {
    const auto lohi = split_on(pairs[i], ':');
    if (lohi.size() != 2)
      throw ConfigError("bounds: expected lo:hi, got '" + pairs[i] + "'");
    b(i, 0) = parse_double(lohi[0], "bounds");
    b(i, 1) = parse_double(lohi[1], "bounds");
    if (!(b(i, 0) < b(i, 1)))
      throw ConfigError("bounds: lower must be below upper in '" + pairs[i] +
                        "'");
  }
  return b;
}

}  // namespace detail

inline constexpr const char kExternalPrefix[] = "external:";

inline BenchmarkProblem problem_from_cli(const ProblemCliOptions& opt) {
  const std::string& name = opt.problem;
  if (name.rfind(kExternalPrefix, 0) == 0) {
    const std::string command = name.substr(sizeof(kExternalPrefix) - 1);
    if (command.empty())
      throw ConfigError("external problem: empty command after 'external:'");
    if (opt.ext_dim < 1 || opt.ext_objectives < 1)
      throw ConfigError(
          "external problem: --ext-dim and --ext-objectives are required");
    Eigen::MatrixX2d bounds;
    if (!opt.ext_bounds.empty())
      bounds = detail::parse_bounds_list(opt.ext_bounds, opt.ext_dim);
    return external_problem(command, opt.ext_dim, opt.ext_objectives, bounds,
                            opt.ext_timeout);
  }
  return make_problem(name, opt.dim);
}

namespace detail {

// Cheap identity stamp for a loaded checkpoint: architecture plus training
// progress. Two checkpoints from different steps of the same run differ.
inline std::string checkpoint_stamp(const Checkpoint& ckpt) {
  nlohmann::json j{{"model", model_config_to_json(ckpt.params.config)},
                   {"global_step", ckpt.train_state.global_step},
                   {"epoch", ckpt.train_state.epoch},
                   {"master_seed", ckpt.train_state.master_seed}};
  return hex64(fnv1a64(j.dump()));
}

// The model attends over every trajectory row, so the whole run must fit in
// the token budget.
inline void check_model_capacity(const ModelConfig& cfg,
                                 const BenchmarkProblem& problem, int budget) {
  if (problem.m > cfg.max_objectives)
    throw ConfigError(problem.name + ": " + std::to_string(problem.m) +
                      " objectives exceed model capacity of " +
                      std::to_string(cfg.max_objectives));
  if (problem.d > cfg.max_input_dim)
    throw ConfigError(problem.name + ": " + std::to_string(problem.d) +
                      " inputs exceed model capacity of " +
                      std::to_string(cfg.max_input_dim));
  const int total = 2 * (problem.d + 1) + budget;
  if (total > cfg.max_tokens - 1)
    throw ConfigError(problem.name + ": " + std::to_string(total) +
                      " total evaluations exceed trajectory capacity of " +
                      std::to_string(cfg.max_tokens - 1) +
                      " (init 2*(d+1) + budget)");
}

inline std::string format_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return std::string(buf);
}

// Best-so-far metric curves against a reference front: igdp(t) and hv(t)
// are computed over all evaluations up to t, which for both metrics equals
// the value on the non-dominated subset.
struct MetricCurves {
  std::vector<double> igdp, hv;
};

inline MetricCurves metric_curves(const Eigen::MatrixXd& Y,
                                  const Eigen::MatrixXd& reference) {
  MetricCurves out;
  const int T = static_cast<int>(Y.rows());
  out.igdp.reserve(T);
  out.hv.reserve(T);
  for (int t = 1; t <= T; ++t) {
    out.igdp.push_back(igd_plus(Y.topRows(t), reference));
    out.hv.push_back(normalized_hv(Y.topRows(t), reference).value);
  }
  return out;
}

inline Eigen::MatrixXd records_to_objectives(
    const std::vector<RunRecord>& records, const std::string& path) {
  if (records.empty()) throw SerializationError(path + ": no records");
  const int m = static_cast<int>(records[0].y.size());
  Eigen::MatrixXd Y(static_cast<int>(records.size()), m);
  for (size_t i = 0; i < records.size(); ++i) {
    if (static_cast<int>(records[i].y.size()) != m)
      throw SerializationError(path + ": inconsistent objective count");
    for (int j = 0; j < m; ++j) Y(static_cast<int>(i), j) = records[i].y[j];
  }
  return Y;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// fomemo optimize: one in-context optimization run on one problem.

struct OptimizeCliOptions {
  ProblemCliOptions problem;
  std::string checkpoint;
  std::string out_dir = "runs/optimize";
  std::string acq = "ucb";
  double beta = 1.0;
  int n_pref_samples = 32;
  int q = 1;
  int budget = 40;
  int candidate_pool = 1024;
  int restarts = 20;
  int refine_steps = 50;
  std::uint64_t seed = 1;
  int front_points = 500;
  std::string command_line;
};

inline AcquisitionSpec acquisition_from_cli(const std::string& acq,
                                            double beta, int n_pref_samples,
                                            int q, int pool, int restarts,
                                            int refine_steps) {
  AcquisitionSpec spec;
  spec.kind = acq_kind_from_string(acq);
  spec.beta = beta;
  spec.n_pref_samples = n_pref_samples;
  spec.q = q;
  spec.candidate_pool = pool;
  spec.restarts = restarts;
  spec.refine_steps = refine_steps;
  spec.validate();
  return spec;
}

inline int cmd_optimize(const OptimizeCliOptions& opt) {
  const auto t0 = std::chrono::steady_clock::now();
  if (opt.checkpoint.empty()) throw ConfigError("optimize: --ckpt is required");
  if (opt.budget < 0) throw ConfigError("optimize: --budget must be >= 0");
  const Checkpoint ckpt = load_checkpoint(opt.checkpoint);
  const BenchmarkProblem problem = problem_from_cli(opt.problem);
  detail::check_model_capacity(ckpt.params.config, problem, opt.budget);
  const AcquisitionSpec spec = acquisition_from_cli(
      opt.acq, opt.beta, opt.n_pref_samples, opt.q, opt.candidate_pool,
      opt.restarts, opt.refine_steps);

  std::filesystem::create_directories(opt.out_dir);
  const std::string run_path =
      (std::filesystem::path(opt.out_dir) / "run.jsonl").string();
  JsonlWriter writer(run_path);
  const RunHistory hist =
      run_optimization<float>(problem, ckpt.params, ckpt.support, spec,
                              opt.budget, opt.seed, writer.sink());

  const nlohmann::json config{{"problem", problem.name},
                              {"d", problem.d},
                              {"m", problem.m},
                              {"acq", opt.acq},
                              {"beta", opt.beta},
                              {"n_pref_samples", opt.n_pref_samples},
                              {"q", opt.q},
                              {"budget", opt.budget},
                              {"candidate_pool", opt.candidate_pool},
                              {"restarts", opt.restarts},
                              {"refine_steps", opt.refine_steps},
                              {"seed", opt.seed},
                              {"checkpoint", detail::checkpoint_stamp(ckpt)}};
  nlohmann::json manifest{
      {"schema", 1},
      {"tool", kToolVersion},
      {"command", opt.command_line},
      {"kind", "optimize"},
      {"config", config},
      {"config_hash", hex64(fnv1a64(config.dump()))},
      {"created", iso8601_utc_now()},
      {"run_file", "run.jsonl"},
      {"evaluations", static_cast<long long>(hist.records.size())}};
  if (problem.has_front()) {
    const Eigen::MatrixXd reference = problem.true_front(opt.front_points);
    manifest["final_igd_plus"] = igd_plus(hist.Y, reference);
    manifest["final_hv"] = normalized_hv(hist.Y, reference).value;
  }
  manifest["wall_ms"] = static_cast<std::uint64_t>(
      std::chrono::duration_cast<std::chrono::milliseconds>(
          std::chrono::steady_clock::now() - t0)
          .count());
  write_manifest(opt.out_dir, manifest);
  if (problem.has_front())
    std::printf("optimize %s: %lld evaluations, igd+ %.6f, hv %.6f -> %s\n",
                problem.name.c_str(),
                static_cast<long long>(hist.records.size()),
                manifest["final_igd_plus"].get<double>(),
                manifest["final_hv"].get<double>(), run_path.c_str());
  else
    std::printf("optimize %s: %lld evaluations -> %s\n", problem.name.c_str(),
                static_cast<long long>(hist.records.size()), run_path.c_str());
  return kExitOk;
}

// ---------------------------------------------------------------------------
// fomemo bench: problems x algorithms x replicates with aggregation.

inline std::vector<std::string> known_bench_algos() {
  return {"fomemo-ei", "fomemo-ucb", "fomemo-uhvi", "sobol", "gp-parego"};
}

struct BenchCliOptions {
  std::vector<std::string> problems{"zdt1", "omnitest"};
  std::vector<std::string> algos{"fomemo-ucb", "sobol", "gp-parego"};
  std::string checkpoint;
  std::string out_dir = "runs/bench";
  int dim = 0;
  int replicates = 5;
  int budget = 40;
  std::uint64_t master_seed = 1;
  double beta = 1.0;
  int n_pref_samples = 32;
  int q = 1;
  int candidate_pool = 1024;
  int restarts = 20;
  int refine_steps = 50;
  int front_points = 500;
  bool fresh = false;  // ignore completed-cell markers and rerun everything
  std::string command_line;
};

namespace detail {

struct BenchCell {
  std::string problem, algo, file;
  int replicate = 0;
  std::uint64_t seed = 0;
  // Filled by the worker.
  std::string status = "pending";  // ok | skipped | failed
  std::string error;
  std::uint64_t wall_ms = 0;
  Eigen::MatrixXd Y;  // raw objectives in evaluation order
};

inline int bench_thread_count(size_t n_cells) {
  int n = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  if (const char* env = std::getenv("FOMEMO_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v >= 1) n = static_cast<int>(v);
  }
  return static_cast<int>(
      std::min<size_t>(static_cast<size_t>(n), std::max<size_t>(n_cells, 1)));
}

}  // namespace detail

inline int cmd_bench(const BenchCliOptions& opt) {
  if (opt.problems.empty()) throw ConfigError("bench: no problems given");
  if (opt.algos.empty()) throw ConfigError("bench: no algorithms given");
  if (opt.replicates < 1)
    throw ConfigError("bench: --replicates must be >= 1");
  if (opt.budget < 0) throw ConfigError("bench: --budget must be >= 0");
  const auto known = known_bench_algos();
  bool needs_model = false;
  for (const auto& a : opt.algos) {
    if (std::find(known.begin(), known.end(), a) == known.end()) {
      std::string list;
      for (const auto& k : known) list += " " + k;
      throw ConfigError("bench: unknown algorithm '" + a + "' (known:" + list +
                        ")");
    }
    needs_model = needs_model || a.rfind("fomemo-", 0) == 0;
  }
  Checkpoint ckpt;
  if (needs_model) {
    if (opt.checkpoint.empty())
      throw ConfigError("bench: --ckpt is required for fomemo-* algorithms");
    ckpt = load_checkpoint(opt.checkpoint);
  }

  // Every problem is instantiated up front so configuration errors surface
  // before any cell runs.
  std::vector<BenchmarkProblem> problems;
  for (const auto& name : opt.problems) {
    ProblemCliOptions pc;
    pc.problem = name;
    pc.dim = opt.dim;
    problems.push_back(problem_from_cli(pc));
    if (needs_model)
      detail::check_model_capacity(ckpt.params.config, problems.back(),
                                   opt.budget);
  }

  const nlohmann::json shared_config{
      {"budget", opt.budget},
      {"dim", opt.dim},
      {"beta", opt.beta},
      {"n_pref_samples", opt.n_pref_samples},
      {"q", opt.q},
      {"candidate_pool", opt.candidate_pool},
      {"restarts", opt.restarts},
      {"refine_steps", opt.refine_steps},
      {"checkpoint", needs_model ? detail::checkpoint_stamp(ckpt) : ""}};

  std::filesystem::create_directories(opt.out_dir);
  std::vector<detail::BenchCell> cells;
  for (size_t pi = 0; pi < problems.size(); ++pi)
    for (const auto& algo : opt.algos)
      for (int k = 0; k < opt.replicates; ++k) {
        detail::BenchCell c;
        c.problem = opt.problems[pi];
        c.algo = algo;
        c.replicate = k;
        c.seed = derive_seed(opt.master_seed,
                             "bench:" + c.problem + ":" + algo,
                             static_cast<std::uint64_t>(k));
        c.file = c.problem + "__" + algo + "__s" + std::to_string(k) +
                 ".jsonl";
        cells.push_back(std::move(c));
      }

  std::mutex io_mutex;
  std::atomic<size_t> next{0};
  std::atomic<int> done{0};
  const auto run_cell = [&](detail::BenchCell& cell) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::string path =
        (std::filesystem::path(opt.out_dir) / cell.file).string();
    nlohmann::json cell_config = shared_config;
    cell_config["problem"] = cell.problem;
    cell_config["algo"] = cell.algo;
    cell_config["replicate"] = cell.replicate;
    cell_config["seed"] = cell.seed;
    const std::string cell_hash = hex64(fnv1a64(cell_config.dump()));

    // A completed-cell marker with a matching hash means the run file can be
    // trusted as-is; resume by re-reading it.
    const std::string done_path = path + ".done";
    if (!opt.fresh && std::filesystem::exists(done_path) &&
        std::filesystem::exists(path)) {
      try {
        const nlohmann::json marker = load_json_file(done_path);
        if (marker.value("config_hash", "") == cell_hash) {
          cell.Y = detail::records_to_objectives(read_run_file(path), path);
          cell.status = "skipped";
          return;
        }
      } catch (const std::exception&) {
        // Unreadable marker or run file: fall through and recompute.
      }
    }

    const BenchmarkProblem* problem = nullptr;
    for (size_t pi = 0; pi < problems.size(); ++pi)
      if (opt.problems[pi] == cell.problem) problem = &problems[pi];

    JsonlWriter writer(path);
    if (cell.algo == "sobol") {
      const int total = 2 * (problem->d + 1) + opt.budget;
      cell.Y = sobol_search(*problem, total, cell.seed, writer.sink()).Y;
    } else if (cell.algo == "gp-parego") {
      ParegoKnobs knobs;
      knobs.candidate_pool = opt.candidate_pool;
      knobs.restarts = opt.restarts;
      knobs.refine_steps = opt.refine_steps;
      cell.Y =
          gp_parego_run(*problem, opt.budget, cell.seed, writer.sink(), knobs)
              .Y;
    } else {
      const AcquisitionSpec spec = acquisition_from_cli(
          cell.algo.substr(sizeof("fomemo-") - 1), opt.beta,
          opt.n_pref_samples, opt.q, opt.candidate_pool, opt.restarts,
          opt.refine_steps);
      cell.Y = run_optimization<float>(*problem, ckpt.params, ckpt.support,
                                       spec, opt.budget, cell.seed,
                                       writer.sink())
                   .Y;
    }
    cell.wall_ms = static_cast<std::uint64_t>(
        std::chrono::duration_cast<std::chrono::milliseconds>(
            std::chrono::steady_clock::now() - t0)
            .count());
    nlohmann::json marker{{"config_hash", cell_hash},
                          {"records", static_cast<long long>(cell.Y.rows())},
                          {"wall_ms", cell.wall_ms}};
    std::ofstream marker_out(done_path, std::ios::trunc);
    marker_out << marker.dump(2) << '\n';
    cell.status = "ok";
  };

  const auto worker = [&]() {
    for (;;) {
      const size_t i = next.fetch_add(1);
      if (i >= cells.size()) return;
      auto& cell = cells[i];
      try {
        run_cell(cell);
      } catch (const std::exception& e) {
        cell.status = "failed";
        cell.error = e.what();
      }
      const int finished = ++done;
      std::lock_guard<std::mutex> lock(io_mutex);
      std::printf("bench [%d/%d] %s %s s%d ... %s%s%s\n", finished,
                  static_cast<int>(cells.size()), cell.problem.c_str(),
                  cell.algo.c_str(), cell.replicate, cell.status.c_str(),
                  cell.error.empty() ? "" : ": ", cell.error.c_str());
      std::fflush(stdout);
    }
  };
  const int n_threads = detail::bench_thread_count(cells.size());
  if (n_threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(n_threads);
    for (int i = 0; i < n_threads; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  // Aggregate best-so-far metric curves over replicates for every problem
  // with an analytic front. Failed cells are left out (n records how many
  // replicates contributed).
  const std::string agg_path =
      (std::filesystem::path(opt.out_dir) / "aggregate.csv").string();
  std::ofstream agg(agg_path, std::ios::trunc);
  if (!agg) throw IoError("cannot open for writing: " + agg_path);
  agg << "problem,algo,budget,metric,mean,std,n\n";
  for (size_t pi = 0; pi < problems.size(); ++pi) {
    if (!problems[pi].has_front()) continue;
    const Eigen::MatrixXd reference =
        problems[pi].true_front(opt.front_points);
    for (const auto& algo : opt.algos) {
      std::vector<detail::MetricCurves> curves;
      for (const auto& cell : cells)
        if (cell.problem == opt.problems[pi] && cell.algo == algo &&
            cell.status != "failed" && cell.Y.rows() > 0)
          curves.push_back(detail::metric_curves(cell.Y, reference));
      if (curves.empty()) continue;
      size_t T = curves[0].igdp.size();
      for (const auto& c : curves) T = std::min(T, c.igdp.size());
      const auto emit = [&](const char* metric, size_t t,
                            const std::vector<double>& vals) {
        double mean = 0.0;
        for (double v : vals) mean += v;
        mean /= static_cast<double>(vals.size());
        double var = 0.0;
        for (double v : vals) var += (v - mean) * (v - mean);
        const double sd = vals.size() > 1
                              ? std::sqrt(var / (vals.size() - 1.0))
                              : 0.0;
        agg << opt.problems[pi] << ',' << algo << ',' << (t + 1) << ','
            << metric << ',' << detail::format_g17(mean) << ','
            << detail::format_g17(sd) << ',' << vals.size() << '\n';
      };
      for (size_t t = 0; t < T; ++t) {
        std::vector<double> igdp, hv;
        for (const auto& c : curves) {
          igdp.push_back(c.igdp[t]);
          hv.push_back(c.hv[t]);
        }
        emit("igdp", t, igdp);
        emit("hv", t, hv);
      }
    }
  }
  agg.close();

  int n_failed = 0, n_skipped = 0;
  nlohmann::json cell_list = nlohmann::json::array();
  for (const auto& cell : cells) {
    nlohmann::json c{{"file", cell.file},       {"problem", cell.problem},
                     {"algo", cell.algo},       {"replicate", cell.replicate},
                     {"seed", cell.seed},       {"status", cell.status},
                     {"records", static_cast<long long>(cell.Y.rows())}};
    if (!cell.error.empty()) c["error"] = cell.error;
    cell_list.push_back(std::move(c));
    n_failed += cell.status == "failed";
    n_skipped += cell.status == "skipped";
  }
  nlohmann::json manifest{
      {"schema", 1},
      {"tool", kToolVersion},
      {"command", opt.command_line},
      {"kind", "bench"},
      {"master_seed", opt.master_seed},
      {"problems", opt.problems},
      {"algos", opt.algos},
      {"replicates", opt.replicates},
      {"config", shared_config},
      {"config_hash", hex64(fnv1a64(shared_config.dump()))},
      {"created", iso8601_utc_now()},
      {"aggregate", "aggregate.csv"},
      {"cells", std::move(cell_list)}};
  write_manifest(opt.out_dir, manifest);
  std::printf("bench: %d cells (%d reused, %d failed) -> %s\n",
              static_cast<int>(cells.size()), n_skipped, n_failed,
              agg_path.c_str());
  return n_failed > 0 ? kExitPartial : kExitOk;
}

// ---------------------------------------------------------------------------
// fomemo posterior: preference-conditioned posterior slices on a 1-d problem.

struct PosteriorCliOptions {
  ProblemCliOptions problem;
  std::string checkpoint;
  std::string out_csv = "posterior.csv";
  std::string prefs;  // "a,b;c,d" — empty means the uniform preference
  int n_traj = 0;     // (0 means 2 * (d + 1))
  int grid = 200;
  double beta = 1.0;
  std::uint64_t seed = 1;
  std::string command_line;
};

inline std::vector<Preference> parse_preferences(const std::string& text,
                                                 int m) {
  std::vector<Preference> out;
  if (text.empty()) {
    out.push_back(Preference::project(Eigen::VectorXd::Ones(m)));
    return out;
  }
  for (const auto& chunk : detail::split_on(text, ';')) {
    const auto parts = detail::split_on(chunk, ',');
    if (static_cast<int>(parts.size()) != m)
      throw ConfigError("preferences: expected " + std::to_string(m) +
                        " weights per preference, got '" + chunk + "'");
    Eigen::VectorXd raw(m);
    for (int i = 0; i < m; ++i)
      raw(i) = detail::parse_double(parts[i], "preferences");
    out.push_back(Preference::project(raw));
  }
  return out;
}

inline int cmd_posterior(const PosteriorCliOptions& opt) {
  if (opt.checkpoint.empty())
    throw ConfigError("posterior: --ckpt is required");
  if (opt.grid < 2) throw ConfigError("posterior: --grid must be >= 2");
  if (opt.beta < 0.0) throw ConfigError("posterior: --beta must be >= 0");
  const Checkpoint ckpt = load_checkpoint(opt.checkpoint);
  const BenchmarkProblem problem = problem_from_cli(opt.problem);
  if (problem.d != 1)
    throw DimensionError("posterior: needs a 1-d problem, " + problem.name +
                         " has d=" + std::to_string(problem.d));
  if (problem.m > ckpt.params.config.max_objectives)
    throw ConfigError(problem.name + ": " + std::to_string(problem.m) +
                      " objectives exceed model capacity of " +
                      std::to_string(ckpt.params.config.max_objectives));
  const int n_traj = opt.n_traj > 0 ? opt.n_traj : 2 * (problem.d + 1);
  if (n_traj > ckpt.params.config.max_tokens - 1)
    throw ConfigError("posterior: --traj exceeds trajectory capacity of " +
                      std::to_string(ckpt.params.config.max_tokens - 1));
  const std::vector<Preference> prefs = parse_preferences(opt.prefs, problem.m);

  const Eigen::MatrixXd Xu = init_design(1, n_traj, opt.seed);
  Eigen::MatrixXd Y(n_traj, problem.m);
  for (int i = 0; i < n_traj; ++i)
    Y.row(i) = problem.evaluate_unit(Xu.row(i).transpose()).transpose();
  const NormalizedTrajectory norm = normalize_trajectory(Y);

  Eigen::MatrixXd grid_x(opt.grid, 1);
  for (int i = 0; i < opt.grid; ++i)
    grid_x(i, 0) = static_cast<double>(i) / (opt.grid - 1);

  const std::filesystem::path csv_path(opt.out_csv);
  if (csv_path.has_parent_path())
    std::filesystem::create_directories(csv_path.parent_path());
  std::ofstream csv(opt.out_csv, std::ios::trunc);
  if (!csv) throw IoError("cannot open for writing: " + opt.out_csv);
  csv << "pref,x,mean,std,ucb\n";
  std::vector<std::string> pref_labels;
  for (const auto& pref : prefs) {
    std::string label;
    for (int i = 0; i < pref.dim(); ++i) {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "%.9g", pref(i));
      label += (i ? ":" : "") + std::string(buf);
    }
    pref_labels.push_back(label);
    const auto posteriors =
        predict_posterior(ckpt.params, ckpt.support, Xu, norm.values, grid_x,
                          pref.weights());
    for (int i = 0; i < opt.grid; ++i) {
      const double mean = posteriors[i].mean();
      const double sd = posteriors[i].stddev();
      const double xn = problem.from_unit(grid_x.row(i).transpose())(0);
      csv << label << ',' << detail::format_g17(xn) << ','
          << detail::format_g17(mean) << ',' << detail::format_g17(sd) << ','
          << detail::format_g17(mean + opt.beta * sd) << '\n';
    }
  }
  csv.close();
  if (!csv) throw IoError("write failed: " + opt.out_csv);

  nlohmann::json manifest{
      {"schema", 1},
      {"tool", kToolVersion},
      {"command", opt.command_line},
      {"kind", "posterior"},
      {"problem", problem.name},
      {"preferences", pref_labels},
      {"trajectory_points", n_traj},
      {"grid", opt.grid},
      {"beta", opt.beta},
      {"seed", opt.seed},
      {"checkpoint", detail::checkpoint_stamp(ckpt)},
      {"created", iso8601_utc_now()},
      {"csv", csv_path.filename().string()}};
  const std::string manifest_dir =
      csv_path.has_parent_path() ? csv_path.parent_path().string() : ".";
  write_manifest(manifest_dir, manifest);
  std::printf("posterior %s: %d preferences x %d grid points -> %s\n",
              problem.name.c_str(), static_cast<int>(prefs.size()), opt.grid,
              opt.out_csv.c_str());
  return kExitOk;
}

// ---------------------------------------------------------------------------
// fomemo report: metric curves from persisted run files.

struct ReportCliOptions {
  std::string runs_dir;
  std::string out_csv;
  std::string reference;  // optional CSV with one front point per line
  int front_points = 500;
  std::string command_line;
};

namespace detail {

inline Eigen::MatrixXd load_front_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open reference front: " + path);
  std::vector<std::vector<double>> rows;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<double> row;
    bool numeric = true;
    for (const auto& tok : split_on(line, ',')) {
      try {
        size_t pos = 0;
        row.push_back(std::stod(tok, &pos));
        numeric = numeric && pos == tok.size();
      } catch (const std::exception&) {
        numeric = false;
      }
    }
    if (!numeric) {
      if (lineno == 1 && rows.empty()) continue;  // header line
      throw SerializationError(path + ":" + std::to_string(lineno) +
                               ": cannot parse front row");
    }
    if (!rows.empty() && row.size() != rows[0].size())
      throw SerializationError(path + ":" + std::to_string(lineno) +
                               ": inconsistent column count");
    rows.push_back(std::move(row));
  }
  if (rows.empty())
    throw SerializationError(path + ": reference front is empty");
  Eigen::MatrixXd front(static_cast<int>(rows.size()),
                        static_cast<int>(rows[0].size()));
  for (size_t i = 0; i < rows.size(); ++i)
    for (size_t j = 0; j < rows[i].size(); ++j)
      front(static_cast<int>(i), static_cast<int>(j)) = rows[i][j];
  return front;
}

inline std::string algo_from_records(const std::vector<RunRecord>& records) {
  const std::string& acq = records.front().acq;
  if (acq == "ei" || acq == "ucb" || acq == "uhvi") return "fomemo-" + acq;
  return acq;  // "sobol", "gp-parego"
}

// Problem name for a run file: the bench manifest's cell table wins, then an
// optimize manifest in the same directory, then the <problem>__... filename
// convention.
inline std::string resolve_problem_name(const std::filesystem::path& file,
                                        const nlohmann::json* manifest) {
  const std::string fname = file.filename().string();
  if (manifest) {
    if (manifest->contains("cells"))
      for (const auto& cell : (*manifest)["cells"])
        if (cell.value("file", "") == fname)
          return cell.value("problem", "");
    if (manifest->value("kind", "") == "optimize" &&
        manifest->contains("config"))
      return (*manifest)["config"].value("problem", "");
  }
  const auto sep = fname.find("__");
  if (sep != std::string::npos && sep > 0) return fname.substr(0, sep);
  throw ProblemError("report: cannot resolve the problem for " + fname +
                     " (no manifest entry and no <problem>__ filename "
                     "prefix)");
}

}  // namespace detail

inline int cmd_report(const ReportCliOptions& opt) {
  if (opt.runs_dir.empty()) throw ConfigError("report: --runs is required");
  if (opt.out_csv.empty()) throw ConfigError("report: --out is required");
  if (!std::filesystem::is_directory(opt.runs_dir))
    throw IoError("report: not a directory: " + opt.runs_dir);

  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(opt.runs_dir))
    if (entry.is_regular_file() && entry.path().extension() == ".jsonl")
      files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  if (files.empty())
    throw IoError("report: no .jsonl run files in " + opt.runs_dir);

  nlohmann::json manifest;
  bool has_manifest = false;
  const auto manifest_path =
      std::filesystem::path(opt.runs_dir) / "manifest.json";
  if (std::filesystem::exists(manifest_path)) {
    manifest = load_json_file(manifest_path.string());
    has_manifest = true;
  }

  Eigen::MatrixXd shared_reference;
  if (!opt.reference.empty())
    shared_reference = detail::load_front_csv(opt.reference);

  const std::filesystem::path csv_path(opt.out_csv);
  if (csv_path.has_parent_path())
    std::filesystem::create_directories(csv_path.parent_path());
  std::ofstream csv(opt.out_csv, std::ios::trunc);
  if (!csv) throw IoError("cannot open for writing: " + opt.out_csv);
  csv << "problem,algo,seed,budget,metric,value,wall_ms\n";

  long long n_rows = 0;
  for (const auto& file : files) {
    const std::vector<RunRecord> records = read_run_file(file.string());
    if (records.empty())
      throw SerializationError(file.string() + ": no records");
    const std::string problem_name = detail::resolve_problem_name(
        file, has_manifest ? &manifest : nullptr);
    const std::string algo = detail::algo_from_records(records);
    const Eigen::MatrixXd Y =
        detail::records_to_objectives(records, file.string());

    Eigen::MatrixXd reference = shared_reference;
    if (reference.rows() == 0) {
      try {
        reference = make_problem(problem_name).true_front(opt.front_points);
      } catch (const NoAnalyticFront&) {
        throw NoAnalyticFront("report: " + problem_name +
                              " has no analytic front; pass --reference");
      }
    }

    const detail::MetricCurves curves = detail::metric_curves(Y, reference);
    std::uint64_t wall = 0;
    for (size_t t = 0; t < curves.igdp.size(); ++t) {
      wall += records[t].wall_ms;
      csv << problem_name << ',' << algo << ',' << records[t].seed << ','
          << (t + 1) << ",igdp," << detail::format_g17(curves.igdp[t]) << ','
          << wall << '\n';
      csv << problem_name << ',' << algo << ',' << records[t].seed << ','
          << (t + 1) << ",hv," << detail::format_g17(curves.hv[t]) << ','
          << wall << '\n';
      n_rows += 2;
    }
  }
  csv.close();
  if (!csv) throw IoError("write failed: " + opt.out_csv);
  std::printf("report: %d runs, %lld metric rows -> %s\n",
              static_cast<int>(files.size()), n_rows, opt.out_csv.c_str());
  return kExitOk;
}

}  // namespace fomemo
