// ntkmeta command-line entry point.
//
//   ntkmeta <subcommand> [--config run.json] [--set key=value ...] [flags]
//
// Every subcommand writes its CSV under the output directory
// ($NTKMETA_OUTPUT_DIR overrides the configured one) and prints a short
// summary. Failures print one line
//   error code=<code> field=<path> message="<text>"
// on stderr and exit nonzero.

#include <clocale>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ntkmeta/csv.hpp"
#include "ntkmeta/error.hpp"
#include "ntkmeta/harness.hpp"

namespace fs = std::filesystem;
using namespace ntkmeta;

namespace {

constexpr int kExitError = 1;
constexpr int kExitCheckFailed = 3;

struct CommonOptions {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> output_dir;
  std::optional<std::string> algorithm;
  std::optional<int> meta_iterations;
  std::optional<std::size_t> workers;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("-c,--config", o.config_path, "JSON run configuration")->check(CLI::ExistingFile);
  cmd->add_option("--set", o.overrides, "Override a config field: dotted.key=value (repeatable)");
  cmd->add_option("--seed", o.seed, "Run seed");
  cmd->add_option("-o,--output-dir", o.output_dir, "Output directory");
  cmd->add_option("--algorithm", o.algorithm, "meta-rkhs-1, meta-rkhs-2, maml, fomaml or reptile");
  cmd->add_option("--meta-iterations", o.meta_iterations, "Outer-loop iterations");
  cmd->add_option("--workers", o.workers, "Worker threads for meta-batch evaluation");
}

RunConfig load_config(const CommonOptions& o) {
  nlohmann::json doc = o.config_path.empty() ? nlohmann::json::object() : load_json(o.config_path);
  for (const std::string& kv : o.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw Error(ErrorCode::config, "expected key=value", kv);
    set_config_value(doc, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (o.seed) doc["seed"] = *o.seed;
  if (o.output_dir) doc["output_dir"] = *o.output_dir;
  if (o.algorithm) doc["algorithm"] = *o.algorithm;
  if (o.meta_iterations) doc["meta_iterations"] = *o.meta_iterations;
  if (o.workers) doc["workers"] = *o.workers;
  RunConfig config = run_config_from_json(doc);
  config.validate();
  return config;
}

fs::path prepare_dir(const RunConfig& config) {
  const fs::path dir = resolve_output_dir(config);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::io, "cannot create " + dir.string() + ": " + ec.message(), "output_dir");
  return dir;
}

void write_csv(const fs::path& dir, const std::string& name, const std::string& csv) {
  write_file_atomic((dir / name).string(), csv);
  std::cout << "wrote " << (dir / name).string() << "\n";
}

Checkpoint checkpoint_or_train(const RunConfig& config, const std::string& path, const fs::path& dir) {
  if (!path.empty()) return checkpoint_from_json(load_json(path));
  std::cout << "no --checkpoint given; training " << config.meta_iterations << " iterations first\n";
  return train(config, dir.string()).checkpoint;
}

void print_error(const Error& e) {
  std::cerr << "error code=" << to_string(e.code()) << " field=" << (e.field().empty() ? "-" : e.field())
            << " message=\"" << e.what() << "\"\n";
}

}  // namespace

int main(int argc, char** argv) {
  std::setlocale(LC_ALL, "C");
  CLI::App app{"NTK meta-learning experiments"};
  app.require_subcommand(1);

  CommonOptions opt;
  std::string checkpoint_path;
  int timing_iterations = 50;

  auto* train_cmd = app.add_subcommand("train", "Meta-train and write metrics, wall time and checkpoint");
  auto* eval_cmd = app.add_subcommand("evaluate", "Adapt on held-out tasks and report query metrics");
  auto* grad_cmd = app.add_subcommand("gradcheck", "Check analytic gradients against finite differences");
  auto* sweep_cmd = app.add_subcommand("theorem-sweep", "Taylor-gap and energy-gap sweeps");
  auto* attack_cmd = app.add_subcommand("attack-sweep", "PGD robust accuracy over the epsilon grid");
  auto* timing_cmd = app.add_subcommand("timing", "Per-iteration wall time of each algorithm");
  auto* expm_cmd = app.add_subcommand("expm-check", "Padé approximants against exact exponentials");
  for (auto* cmd : {train_cmd, eval_cmd, grad_cmd, sweep_cmd, attack_cmd, timing_cmd, expm_cmd})
    add_common(cmd, opt);
  eval_cmd->add_option("--checkpoint", checkpoint_path, "Checkpoint JSON (default: train first)");
  attack_cmd->add_option("--checkpoint", checkpoint_path, "Checkpoint JSON (default: train first)");
  timing_cmd->add_option("--iterations", timing_iterations, "Iterations averaged per algorithm")
      ->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << "error code=usage field=- message=\"" << e.what() << "\"\n";
    return kExitError;
  }

  try {
    const RunConfig config = load_config(opt);
    const fs::path dir = prepare_dir(config);
    std::cout << "config_hash=" << config.hash() << " output_dir=" << dir.string() << "\n";

    if (*train_cmd) {
      const TrainResult r = train(config, dir.string());
      std::cout << "trained " << r.checkpoint.iteration << " iterations, " << r.failed_iterations
                << " skipped\nwrote " << (dir / "checkpoint.json").string() << "\n";
    } else if (*eval_cmd) {
      const EvalResult r = evaluate(config, checkpoint_or_train(config, checkpoint_path, dir));
      for (const EvalRow& row : r.rows) {
        std::cout << row.adaptation << " " << row.metric << " = " << format_double(row.mean) << " ± "
                  << format_double(row.stderr_) << " (n=" << row.n_tasks << ")\n";
      }
      write_csv(dir, "eval.csv", r.csv);
    } else if (*grad_cmd) {
      const GradcheckResult r = gradcheck(config);
      for (const auto& row : r.rows)
        std::cout << row.name << " " << format_double(row.value) << (row.pass ? " ok" : " FAIL") << "\n";
      write_csv(dir, "gradcheck.csv", r.csv);
      if (!r.pass) {
        std::cerr << "error code=check-failed field=- message=\"gradient check above tolerance\"\n";
        return kExitCheckFailed;
      }
    } else if (*sweep_cmd) {
      const SweepReport r = theorem_sweep(config);
      const SweepSummary& s = r.summary;
      std::cout << "k1_identity " << (s.k1_identity ? "ok" : "FAIL") << "\n";
      for (const auto& [arch, frac] : s.trend_fraction)
        std::cout << "trend " << arch << " " << format_double(frac) << "\n";
      std::cout << "monotone " << s.monotone_seeds << "/" << s.total_seeds << "\n";
      write_csv(dir, "theorem_sweep.csv", r.csv);
      if (!(s.k1_identity && s.trend_ok && s.monotone_ok)) {
        std::cerr << "error code=check-failed field=- message=\"sweep criteria not met\"\n";
        return kExitCheckFailed;
      }
    } else if (*attack_cmd) {
      const AttackSweepResult r = attack_sweep(config, checkpoint_or_train(config, checkpoint_path, dir));
      for (const EpsilonPoint& p : r.sweep.points) {
        std::cout << "eps=" << format_double(p.epsilon) << " clean=" << format_double(p.result.clean_accuracy)
                  << " robust=" << format_double(p.result.robust_accuracy) << "\n";
      }
      write_csv(dir, "attack_sweep.csv", r.csv);
    } else if (*timing_cmd) {
      const TimingReport r = timing_smoke(config, timing_iterations);
      for (const TimingRow& row : r.rows) {
        std::cout << row.algorithm << " " << row.setting << " n=" << row.n << " "
                  << format_double(row.ms_per_iter) << " ms\n";
      }
      std::cout << "solve scaling n=32->64: " << format_double(r.solve_scaling()) << "\n";
      write_csv(dir, "timing.csv", r.csv);
    } else if (*expm_cmd) {
      const ExpmCheckResult r = expm_check(config);
      for (const auto& row : r.rows) {
        std::cout << row.check << " order=" << row.order << " n=" << row.n << " "
                  << format_double(row.value) << (row.pass ? " ok" : " FAIL") << "\n";
      }
      write_csv(dir, "expm_check.csv", r.csv);
      if (!r.pass) {
        std::cerr << "error code=check-failed field=- message=\"expm check above tolerance\"\n";
        return kExitCheckFailed;
      }
    }
  } catch (const Error& e) {
    print_error(e);
    return kExitError;
  } catch (const std::exception& e) {
    std::cerr << "error code=internal field=- message=\"" << e.what() << "\"\n";
    return kExitError;
  }
  return 0;
}
