#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "ntkmeta/attacks.hpp"
#include "ntkmeta/meta.hpp"
#include "ntkmeta/network.hpp"
#include "ntkmeta/serialize.hpp"
#include "ntkmeta/tasks.hpp"
#include "ntkmeta/verification.hpp"

namespace ntkmeta {

enum class ExperimentKind {
  sine_regression,
  blob_classification,
  gradcheck,
  theorem_sweep,
  attack_sweep,
  ablation_t
};
enum class Algorithm { meta_rkhs_1, meta_rkhs_2, maml, fomaml, reptile };
enum class OptimizerKind { sgd, adam };

std::string_view to_string(ExperimentKind kind);
std::string_view to_string(Algorithm algorithm);
std::string_view to_string(OptimizerKind kind);
ExperimentKind experiment_from_string(std::string_view name);
Algorithm algorithm_from_string(std::string_view name);
OptimizerKind optimizer_from_string(std::string_view name);

/// 0.01 for Meta-RKHS-II, 1e-3 otherwise.
double default_meta_lr(Algorithm algorithm);

struct NetworkConfig {
  std::vector<std::size_t> hidden = {64, 64};
  /// Conv front channels; empty builds a plain MLP.
  std::vector<std::size_t> conv_channels;
  std::size_t conv_width = 3;
  bool bias = true;

  NetworkSpec build(std::size_t input_dim, std::size_t output_dim) const;
};

struct AttackSettings {
  std::vector<double> epsilons = {0.0, 0.05, 0.1, 0.2, 0.3, 0.5};
  /// Step size, iterations, clip range and restarts; epsilon comes from the grid.
  /// The default step lets 20 iterations reach the largest grid epsilon.
  AttackConfig config = [] {
    AttackConfig c;
    c.step_size = 0.025;
    return c;
  }();
  /// Drops ∂H(x, X)/∂x from closed-form predictor input gradients.
  bool freeze_kernel = false;
};

struct RunConfig {
  static constexpr int kSchemaVersion = 1;

  ExperimentKind experiment = ExperimentKind::sine_regression;
  Algorithm algorithm = Algorithm::meta_rkhs_1;
  MetaConfig meta;
  TaskDistributionSpec tasks;
  NetworkConfig network;
  std::uint64_t seed = 0;
  std::string output_dir = "runs";
  int meta_iterations = 1000;
  int eval_tasks = 100;
  /// Test-time gradient adaptation for every algorithm except Meta-RKHS-II.
  int test_steps = 10;
  double test_lr = 1e-3;
  std::size_t workers = 1;
  OptimizerKind optimizer = OptimizerKind::adam;
  std::vector<AdaptTime> ablation_times = {AdaptTime::finite(0.1), AdaptTime::finite(1.0),
                                           AdaptTime::finite(10.0), AdaptTime::finite(100.0),
                                           AdaptTime::infinite()};
  AttackSettings attack;
  int max_consecutive_failures = 5;
  /// Iterations between intermediate checkpoints; 0 writes only the final one.
  int checkpoint_every = 0;

  NetworkSpec network_spec() const;
  /// Loss the gradient-based algorithms train and adapt with.
  LossKind training_loss() const;
  /// Regularizer weight of Meta-RKHS-I: the inner-loop time k·α.
  double rkhs1_alpha() const;

  /// Throws Error(config) with the dotted path of the first invalid field.
  void validate() const;
  /// FNV-1a of the canonical JSON dump without workers and output_dir.
  std::string hash() const;
};

nlohmann::json to_json(const RunConfig& config);
/// Missing keys take defaults (meta.meta_lr defaults per algorithm); unknown
/// keys and type errors throw Error(config) naming the field.
RunConfig run_config_from_json(const nlohmann::json& j);

/// Sets a dotted key in a raw config document, parsing `value` as JSON when
/// possible and as a string otherwise.
void set_config_value(nlohmann::json& doc, std::string_view dotted_key, std::string_view value);

/// $NTKMETA_OUTPUT_DIR when set, else the configured directory.
std::string resolve_output_dir(const RunConfig& config);

// ---------------------------------------------------------------------------
// Optimizers

class Optimizer {
 public:
  virtual ~Optimizer() = default;
  virtual void step(ParamVector& theta, const Vector& grad) = 0;
  virtual nlohmann::json state() const = 0;
};

class Sgd final : public Optimizer {
 public:
  explicit Sgd(double lr) : lr_(lr) {}
  void step(ParamVector& theta, const Vector& grad) override;
  nlohmann::json state() const override;

 private:
  double lr_;
};

class Adam final : public Optimizer {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}
  void step(ParamVector& theta, const Vector& grad) override;
  nlohmann::json state() const override;

 private:
  double lr_, beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
  Vector m_, v_;
};

std::unique_ptr<Optimizer> make_optimizer(const RunConfig& config);

// ---------------------------------------------------------------------------
// Experiments

/// Meta-batch of tasks for one training iteration.
std::vector<Task> training_batch(const RunConfig& config, std::int64_t iteration);
/// Held-out evaluation tasks, drawn from a stream disjoint from training.
std::vector<Task> evaluation_tasks(const RunConfig& config);

/// One meta-gradient evaluation for the configured algorithm.
ObjectiveAndGrad meta_step(const RunConfig& config, const NetworkSpec& spec,
                           std::span<const double> theta, const std::vector<Task>& tasks);

struct TrainResult {
  Checkpoint checkpoint;
  std::string metrics_csv;
  std::string wall_time_csv;
  int failed_iterations = 0;
};

/// Outer loop. With `write_files`, writes metrics.csv, wall_time.csv,
/// checkpoint.json and config.json under `output_dir`.
TrainResult train(const RunConfig& config, const std::string& output_dir, bool write_files = true);

struct EvalRow {
  std::string adaptation;  // e.g. "steps=10" or "t=inf"
  std::string metric;      // "mse" or "accuracy"
  double mean = 0.0;
  double stderr_ = 0.0;
  std::size_t n_tasks = 0;
};

struct EvalResult {
  std::vector<EvalRow> rows;
  std::string csv;
};

/// Adapts on each held-out task's support set and scores the query set.
/// For the ablation-t experiment, emits one row per configured time.
EvalResult evaluate(const RunConfig& config, const Checkpoint& checkpoint);

/// Checks that the checkpoint was produced for the configured network.
void check_checkpoint(const RunConfig& config, const Checkpoint& checkpoint);

/// Initialization checkpoint (0 meta-iterations).
Checkpoint initial_checkpoint(const RunConfig& config);

struct GradcheckRow {
  std::string name;
  double value = 0.0;
  double tolerance = 0.0;
  bool asserted = true;
  bool pass = true;
};

struct GradcheckResult {
  std::vector<GradcheckRow> rows;
  std::string csv;
  bool pass = true;
};

/// Reverse-mode and meta-gradients against central differences on the
/// configured network and task distribution.
GradcheckResult gradcheck(const RunConfig& config);

struct AttackSweepResult {
  EpsilonSweep sweep;
  std::string csv;
};

/// Predictor factory for the configured algorithm at meta-parameters θ.
PredictorFactory predictor_factory(const RunConfig& config, const NetworkSpec& spec,
                                   const ParamVector& theta);

AttackSweepResult attack_sweep(const RunConfig& config, const Checkpoint& checkpoint);

struct TimingRow {
  std::string algorithm;
  std::string setting;
  std::size_t n = 0;
  double ms_per_iter = 0.0;
  int iterations = 0;
};

struct TimingReport {
  std::vector<TimingRow> rows;
  double rkhs1_ms = 0.0;
  double fomaml5_ms = 0.0;
  double reptile5_ms = 0.0;
  double reptile1_ms = 0.0;
  double solve_ms_n32 = 0.0;
  double solve_ms_n64 = 0.0;
  double single_task_ms = 0.0;
  double solve_scaling() const { return solve_ms_n64 / solve_ms_n32; }
  std::string csv;
};

/// Per-iteration wall time of each algorithm at matched settings, plus the
/// closed-form solve phase at n = 32 and n = 64.
TimingReport timing_smoke(const RunConfig& config, int iterations = 50);

struct ExpmCheckRow {
  std::string check;
  int order = 2;
  std::size_t n = 1;
  double value = 0.0;
  double tolerance = 0.0;
  bool pass = true;
};

struct ExpmCheckResult {
  std::vector<ExpmCheckRow> rows;
  std::string csv;
  bool pass = true;
};

/// Padé approximants against the scalar formulas, the scaling-and-squaring
/// oracle against std::exp, and contraction of e^{-tH} on random PSD Gram
/// matrices.
ExpmCheckResult expm_check(const RunConfig& config);

/// Taylor-gap and energy-gap sweeps keyed on the run seed.
SweepReport theorem_sweep(const RunConfig& config);

}  // namespace ntkmeta
