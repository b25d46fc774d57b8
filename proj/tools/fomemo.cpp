#include <CLI11.hpp>

#include <cstdio>
#include <exception>

#include "fomemo/cli.hpp"

namespace {

void add_problem_flags(CLI::App* cmd, fomemo::ProblemCliOptions& opt) {
  cmd->add_option("--problem", opt.problem,
                  "registered problem name or external:<command>");
  cmd->add_option("--dim", opt.dim,
                  "input dimension override for the zdt family");
  cmd->add_option("--ext-dim", opt.ext_dim,
                  "input dimension of an external problem");
  cmd->add_option("--ext-objectives", opt.ext_objectives,
                  "objective count of an external problem");
  cmd->add_option("--ext-timeout", opt.ext_timeout,
                  "per-evaluation timeout for an external problem, seconds");
  cmd->add_option("--ext-bounds", opt.ext_bounds,
                  "external problem bounds as lo:hi,lo:hi,...");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{std::string(fomemo::kToolVersion) +
               ": preference-conditioned in-context multi-objective "
               "optimization"};
  app.require_subcommand(1);

  fomemo::TrainCliOptions train_opt;
  CLI::App* train = app.add_subcommand(
      "train", "Pre-train the aggregation-posterior model on synthetic tasks");
  train->add_option("--config", train_opt.config_path, "JSON config file")
      ->required();
  train->add_option("--out", train_opt.out_dir, "output directory");
  train->add_option("--resume", train_opt.resume,
                    "checkpoint to resume training from");
  train->add_flag("--dry-run", train_opt.dry_run,
                  "validate config, run one step, exit");

  fomemo::OptimizeCliOptions optimize_opt;
  CLI::App* optimize = app.add_subcommand(
      "optimize", "Run one in-context optimization on a problem");
  optimize->add_option("--ckpt", optimize_opt.checkpoint, "model checkpoint")
      ->required();
  add_problem_flags(optimize, optimize_opt.problem);
  optimize->add_option("--acq", optimize_opt.acq,
                       "acquisition: ei, ucb, or uhvi");
  optimize->add_option("--beta", optimize_opt.beta, "ucb/uhvi exploration");
  optimize->add_option("--pref-samples", optimize_opt.n_pref_samples,
                       "preference draws per uhvi proposal");
  optimize->add_option("--q", optimize_opt.q, "proposals per round");
  optimize->add_option("--budget", optimize_opt.budget,
                       "evaluations after the initial design");
  optimize->add_option("--pool", optimize_opt.candidate_pool,
                       "acquisition candidate pool size");
  optimize->add_option("--restarts", optimize_opt.restarts,
                       "local refinement restarts");
  optimize->add_option("--refine-steps", optimize_opt.refine_steps,
                       "local refinement steps per restart");
  optimize->add_option("--seed", optimize_opt.seed, "master seed");
  optimize->add_option("--front-points", optimize_opt.front_points,
                       "reference front sample size for final metrics");
  optimize->add_option("--out", optimize_opt.out_dir, "output directory");

  fomemo::BenchCliOptions bench_opt;
  CLI::App* bench = app.add_subcommand(
      "bench", "Replicated benchmark grid with metric aggregation");
  bench->add_option("--problems", bench_opt.problems,
                    "registered problem names")
      ->delimiter(',');
  bench->add_option("--algos", bench_opt.algos,
                    "fomemo-ei, fomemo-ucb, fomemo-uhvi, sobol, gp-parego")
      ->delimiter(',');
  bench->add_option("--ckpt", bench_opt.checkpoint,
                    "model checkpoint (needed for fomemo-* algorithms)");
  bench->add_option("--dim", bench_opt.dim,
                    "input dimension override for the zdt family");
  bench->add_option("--replicates", bench_opt.replicates,
                    "independent replicates per cell");
  bench->add_option("--budget", bench_opt.budget,
                    "evaluations after the initial design");
  bench->add_option("--seed", bench_opt.master_seed, "master seed");
  bench->add_option("--beta", bench_opt.beta, "ucb/uhvi exploration");
  bench->add_option("--pref-samples", bench_opt.n_pref_samples,
                    "preference draws per uhvi proposal");
  bench->add_option("--q", bench_opt.q, "proposals per round");
  bench->add_option("--pool", bench_opt.candidate_pool,
                    "acquisition candidate pool size");
  bench->add_option("--restarts", bench_opt.restarts,
                    "local refinement restarts");
  bench->add_option("--refine-steps", bench_opt.refine_steps,
                    "local refinement steps per restart");
  bench->add_option("--front-points", bench_opt.front_points,
                    "reference front sample size for metrics");
  bench->add_flag("--fresh", bench_opt.fresh,
                  "ignore completed-cell markers and rerun everything");
  bench->add_option("--out", bench_opt.out_dir, "output directory");

  fomemo::PosteriorCliOptions posterior_opt;
  CLI::App* posterior = app.add_subcommand(
      "posterior", "Posterior slices over a 1-d problem's input range");
  posterior->add_option("--ckpt", posterior_opt.checkpoint, "model checkpoint")
      ->required();
  add_problem_flags(posterior, posterior_opt.problem);
  posterior->add_option("--prefs", posterior_opt.prefs,
                        "preferences as w1,w2[,..][;w1,w2[,..]]...");
  posterior->add_option("--traj", posterior_opt.n_traj,
                        "trajectory points to evaluate first");
  posterior->add_option("--grid", posterior_opt.grid, "query grid size");
  posterior->add_option("--beta", posterior_opt.beta, "ucb column width");
  posterior->add_option("--seed", posterior_opt.seed, "master seed");
  posterior->add_option("--out", posterior_opt.out_csv, "output CSV path");

  fomemo::ReportCliOptions report_opt;
  CLI::App* report = app.add_subcommand(
      "report", "Metric curves from persisted run files");
  report->add_option("--runs", report_opt.runs_dir,
                     "directory holding .jsonl run files")
      ->required();
  report->add_option("--out", report_opt.out_csv, "output CSV path")
      ->required();
  report->add_option("--reference", report_opt.reference,
                     "CSV reference front for problems without one");
  report->add_option("--front-points", report_opt.front_points,
                     "reference front sample size for analytic fronts");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return fomemo::kExitConfig;
  }

  try {
    const std::string command_line = fomemo::join_args(argc, argv);
    if (train->parsed()) {
      train_opt.command_line = command_line;
      return fomemo::cmd_train(train_opt);
    }
    if (optimize->parsed()) {
      optimize_opt.command_line = command_line;
      return fomemo::cmd_optimize(optimize_opt);
    }
    if (bench->parsed()) {
      bench_opt.command_line = command_line;
      return fomemo::cmd_bench(bench_opt);
    }
    if (posterior->parsed()) {
      posterior_opt.command_line = command_line;
      return fomemo::cmd_posterior(posterior_opt);
    }
    if (report->parsed()) {
      report_opt.command_line = command_line;
      return fomemo::cmd_report(report_opt);
    }
  } catch (const fomemo::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return fomemo::kExitConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return fomemo::kExitRuntime;
  }
  return fomemo::kExitOk;
}
