#include "ntkmeta/harness.hpp"

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <set>
#include <tuple>

#include "ntkmeta/csv.hpp"
#include "ntkmeta/error.hpp"
#include "ntkmeta/parallel.hpp"
#include "ntkmeta/rng.hpp"

namespace ntkmeta {

using nlohmann::json;

namespace {

// Stream ids for derive_key(seed, {stream, ...}).
constexpr std::uint64_t kInitStream = 0x1;
constexpr std::uint64_t kTrainStream = 0x2;
constexpr std::uint64_t kEvalStream = 0x3;
constexpr std::uint64_t kCheckStream = 0x4;
constexpr std::uint64_t kAttackStream = 0x5;
constexpr std::uint64_t kTimingStream = 0x6;

template <class Enum, std::size_t N>
Enum parse_enum(std::string_view name, const std::pair<Enum, const char*> (&table)[N],
                const char* field) {
  for (const auto& [value, text] : table)
    if (name == text) return value;
  throw Error(ErrorCode::config, "unknown value '" + std::string(name) + "'", field);
}

template <class Enum, std::size_t N>
std::string_view enum_name(Enum value, const std::pair<Enum, const char*> (&table)[N]) {
  for (const auto& [v, text] : table)
    if (v == value) return text;
  return "?";
}

constexpr std::pair<ExperimentKind, const char*> kExperiments[] = {
    {ExperimentKind::sine_regression, "sine-regression"},
    {ExperimentKind::blob_classification, "blob-classification"},
    {ExperimentKind::gradcheck, "gradcheck"},
    {ExperimentKind::theorem_sweep, "theorem-sweep"},
    {ExperimentKind::attack_sweep, "attack-sweep"},
    {ExperimentKind::ablation_t, "ablation-t"},
};
constexpr std::pair<Algorithm, const char*> kAlgorithms[] = {
    {Algorithm::meta_rkhs_1, "meta-rkhs-1"}, {Algorithm::meta_rkhs_2, "meta-rkhs-2"},
    {Algorithm::maml, "maml"},               {Algorithm::fomaml, "fomaml"},
    {Algorithm::reptile, "reptile"},
};
constexpr std::pair<OptimizerKind, const char*> kOptimizers[] = {
    {OptimizerKind::sgd, "sgd"},
    {OptimizerKind::adam, "adam"},
};

}  // namespace

std::string_view to_string(ExperimentKind kind) { return enum_name(kind, kExperiments); }
std::string_view to_string(Algorithm algorithm) { return enum_name(algorithm, kAlgorithms); }
std::string_view to_string(OptimizerKind kind) { return enum_name(kind, kOptimizers); }
ExperimentKind experiment_from_string(std::string_view name) {
  return parse_enum(name, kExperiments, "experiment");
}
Algorithm algorithm_from_string(std::string_view name) {
  return parse_enum(name, kAlgorithms, "algorithm");
}
OptimizerKind optimizer_from_string(std::string_view name) {
  return parse_enum(name, kOptimizers, "optimizer");
}

double default_meta_lr(Algorithm algorithm) {
  return algorithm == Algorithm::meta_rkhs_2 ? 0.01 : 1e-3;
}

NetworkSpec NetworkConfig::build(std::size_t input_dim, std::size_t output_dim) const {
  if (conv_channels.empty()) return NetworkSpec::mlp(input_dim, hidden, output_dim, bias);
  return NetworkSpec::conv(input_dim, conv_channels, conv_width, hidden, output_dim, bias);
}

// ---------------------------------------------------------------------------
// RunConfig

NetworkSpec RunConfig::network_spec() const {
  return network.build(tasks.input_dim(), tasks.output_dim());
}

LossKind RunConfig::training_loss() const { return meta.loss; }

double RunConfig::rkhs1_alpha() const { return meta.inner_lr * meta.inner_steps; }

void RunConfig::validate() const {
  auto fail = [](const char* field, const std::string& msg) {
    throw Error(ErrorCode::config, msg, field);
  };
  meta.validate("meta");
  tasks.validate();
  if (network.hidden.empty() && network.conv_channels.empty())
    fail("network.hidden", "at least one hidden layer is required");
  for (std::size_t w : network.hidden)
    if (w == 0) fail("network.hidden", "layer widths must be >= 1");
  for (std::size_t c : network.conv_channels)
    if (c == 0) fail("network.conv_channels", "channel counts must be >= 1");
  if (!network.conv_channels.empty() && network.conv_width == 0)
    fail("network.conv_width", "conv_width must be >= 1");
  if (meta_iterations < 0) fail("meta_iterations", "meta_iterations must be >= 0");
  if (eval_tasks < 1) fail("eval_tasks", "eval_tasks must be >= 1");
  if (test_steps < 0) fail("test_steps", "test_steps must be >= 0");
  if (!(test_lr > 0.0)) fail("test_lr", "test_lr must be > 0");
  if (workers < 1) fail("workers", "workers must be >= 1");
  if (max_consecutive_failures < 1)
    fail("max_consecutive_failures", "max_consecutive_failures must be >= 1");
  if (checkpoint_every < 0) fail("checkpoint_every", "checkpoint_every must be >= 0");
  if (ablation_times.empty()) fail("ablation_times", "ablation_times must not be empty");
  if (output_dir.empty()) fail("output_dir", "output_dir must not be empty");
  const bool classification = tasks.kind == TaskKind::blobs;
  if (meta.loss == LossKind::cross_entropy && !classification)
    fail("meta.loss", "cross-entropy needs a classification task distribution");
  if (experiment == ExperimentKind::blob_classification && !classification)
    fail("tasks.kind", "blob-classification needs tasks.kind = blobs");
  if (experiment == ExperimentKind::attack_sweep && !classification)
    fail("tasks.kind", "attack-sweep needs tasks.kind = blobs");
  if (experiment == ExperimentKind::sine_regression && classification)
    fail("tasks.kind", "sine-regression needs tasks.kind = sine");
  if (attack.epsilons.empty()) fail("attack.epsilons", "epsilon grid must not be empty");
  for (double e : attack.epsilons) {
    AttackConfig c = attack.config;
    c.epsilon = e;
    c.validate("attack");
  }
  attack.config.validate("attack");
  network_spec();
}

std::string RunConfig::hash() const {
  // Where and on how many threads a run executes does not change its results.
  json j = to_json(*this);
  j.erase("workers");
  j.erase("output_dir");
  return fnv1a_hex(j.dump());
}

json to_json(const RunConfig& c) {
  json j;
  j["schema_version"] = RunConfig::kSchemaVersion;
  j["experiment"] = std::string(to_string(c.experiment));
  j["algorithm"] = std::string(to_string(c.algorithm));
  const MetaConfig& m = c.meta;
  j["meta"] = {{"inner_lr", m.inner_lr},
               {"inner_steps", m.inner_steps},
               {"adapt_time", m.adapt_time.to_string()},
               {"pade_order", m.pade_order},
               {"meta_lr", m.meta_lr},
               {"meta_batch", m.meta_batch},
               {"loss", std::string(to_string(m.loss))},
               {"hvp_step", m.hvp_step},
               {"kernel_jitter", m.kernel_jitter},
               {"stop_gradient_kernel", m.stop_gradient_kernel},
               {"rkhs1_split", m.rkhs1_split},
               {"kernel", std::string(to_string(m.kernel.kind))},
               {"rbf_bandwidth", m.kernel.rbf_bandwidth}};
  const SineSpec& s = c.tasks.sine;
  const BlobSpec& b = c.tasks.blobs;
  j["tasks"] = {{"kind", std::string(to_string(c.tasks.kind))},
                {"sine",
                 {{"amplitude", {s.amplitude_lo, s.amplitude_hi}},
                  {"phase", {s.phase_lo, s.phase_hi}},
                  {"x", {s.x_lo, s.x_hi}},
                  {"noise", s.noise},
                  {"support_size", s.support_size},
                  {"query_size", s.query_size}}},
                {"blobs",
                 {{"way", b.way},
                  {"shot", b.shot},
                  {"query_shot", b.query_shot},
                  {"input_dim", b.input_dim},
                  {"spread", b.spread},
                  {"center_scale", b.center_scale}}}};
  j["network"] = {{"hidden", c.network.hidden},
                  {"conv_channels", c.network.conv_channels},
                  {"conv_width", c.network.conv_width},
                  {"bias", c.network.bias}};
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir;
  j["meta_iterations"] = c.meta_iterations;
  j["eval_tasks"] = c.eval_tasks;
  j["test_steps"] = c.test_steps;
  j["test_lr"] = c.test_lr;
  j["workers"] = c.workers;
  j["optimizer"] = std::string(to_string(c.optimizer));
  json times = json::array();
  for (const AdaptTime& t : c.ablation_times) times.push_back(t.to_string());
  j["ablation_times"] = times;
  j["attack"] = {{"epsilons", c.attack.epsilons},
                 {"step_size", c.attack.config.step_size},
                 {"iterations", c.attack.config.iterations},
                 {"clip_lo", c.attack.config.clip_lo},
                 {"clip_hi", c.attack.config.clip_hi},
                 {"restarts", c.attack.config.restarts},
                 {"freeze_kernel", c.attack.freeze_kernel}};
  j["max_consecutive_failures"] = c.max_consecutive_failures;
  j["checkpoint_every"] = c.checkpoint_every;
  return j;
}

namespace {

/// Reads fields from one JSON object, rejecting unknown keys.
class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw Error(ErrorCode::config, "expected an object", where(""));
  }
  ~Reader() noexcept(false) {
    if (std::uncaught_exceptions() > 0) return;
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) throw Error(ErrorCode::config, "unknown key", where(key));
    }
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  template <class T>
  void read(const std::string& key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw Error(ErrorCode::config, "wrong type", where(key));
    }
  }

  void read_time(const std::string& key, AdaptTime& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    out = parse_time(j_.at(key), key);
  }

  AdaptTime parse_time(const json& v, const std::string& key) const {
    try {
      if (v.is_number()) return AdaptTime::finite(v.get<double>());
      if (v.is_string()) return AdaptTime::parse(v.get<std::string>());
    } catch (const Error& e) {
      throw Error(ErrorCode::config, e.what(), where(key));
    }
    throw Error(ErrorCode::config, "expected a number or \"inf\"", where(key));
  }

  template <class Fn>
  void read_string(const std::string& key, Fn&& assign) {
    std::string text;
    const bool present = j_.contains(key);
    read(key, text);
    if (!present) return;
    try {
      assign(text);
    } catch (const Error& e) {
      throw Error(ErrorCode::config, e.what(), where(key));
    }
  }

  void read_range(const std::string& key, double& lo, double& hi) {
    std::vector<double> r;
    const bool present = j_.contains(key);
    read(key, r);
    if (!present) return;
    if (r.size() != 2) throw Error(ErrorCode::config, "expected [lo, hi]", where(key));
    lo = r[0];
    hi = r[1];
  }

  Reader child(const std::string& key) {
    seen_.insert(key);
    return Reader(j_.contains(key) ? j_.at(key) : empty(), where(key));
  }

  std::string where(const std::string& key) const {
    if (path_.empty()) return key;
    return key.empty() ? path_ : path_ + "." + key;
  }

  const json& raw(const std::string& key) const { return j_.at(key); }

 private:
  static const json& empty() {
    static const json e = json::object();
    return e;
  }
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace

RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  Reader r(j, "");
  int version = RunConfig::kSchemaVersion;
  r.read("schema_version", version);
  if (version != RunConfig::kSchemaVersion) {
    throw Error(ErrorCode::config, "unsupported schema_version " + std::to_string(version),
                "schema_version");
  }
  r.read_string("experiment", [&](const std::string& s) { c.experiment = experiment_from_string(s); });
  r.read_string("algorithm", [&](const std::string& s) { c.algorithm = algorithm_from_string(s); });
  c.meta.meta_lr = default_meta_lr(c.algorithm);
  {
    Reader m = r.child("meta");
    m.read("inner_lr", c.meta.inner_lr);
    m.read("inner_steps", c.meta.inner_steps);
    m.read_time("adapt_time", c.meta.adapt_time);
    m.read("pade_order", c.meta.pade_order);
    m.read("meta_lr", c.meta.meta_lr);
    m.read("meta_batch", c.meta.meta_batch);
    m.read_string("loss", [&](const std::string& s) { c.meta.loss = loss_kind_from_string(s); });
    m.read("hvp_step", c.meta.hvp_step);
    m.read("kernel_jitter", c.meta.kernel_jitter);
    m.read("stop_gradient_kernel", c.meta.stop_gradient_kernel);
    m.read("rkhs1_split", c.meta.rkhs1_split);
    m.read_string("kernel", [&](const std::string& s) { c.meta.kernel.kind = kernel_kind_from_string(s); });
    m.read("rbf_bandwidth", c.meta.kernel.rbf_bandwidth);
  }
  {
    Reader t = r.child("tasks");
    t.read_string("kind", [&](const std::string& s) { c.tasks.kind = task_kind_from_string(s); });
    {
      Reader s = t.child("sine");
      s.read_range("amplitude", c.tasks.sine.amplitude_lo, c.tasks.sine.amplitude_hi);
      s.read_range("phase", c.tasks.sine.phase_lo, c.tasks.sine.phase_hi);
      s.read_range("x", c.tasks.sine.x_lo, c.tasks.sine.x_hi);
      s.read("noise", c.tasks.sine.noise);
      s.read("support_size", c.tasks.sine.support_size);
      s.read("query_size", c.tasks.sine.query_size);
    }
    {
      Reader b = t.child("blobs");
      b.read("way", c.tasks.blobs.way);
      b.read("shot", c.tasks.blobs.shot);
      b.read("query_shot", c.tasks.blobs.query_shot);
      b.read("input_dim", c.tasks.blobs.input_dim);
      b.read("spread", c.tasks.blobs.spread);
      b.read("center_scale", c.tasks.blobs.center_scale);
    }
  }
  {
    Reader n = r.child("network");
    n.read("hidden", c.network.hidden);
    n.read("conv_channels", c.network.conv_channels);
    n.read("conv_width", c.network.conv_width);
    n.read("bias", c.network.bias);
  }
  r.read("seed", c.seed);
  r.read("output_dir", c.output_dir);
  r.read("meta_iterations", c.meta_iterations);
  r.read("eval_tasks", c.eval_tasks);
  r.read("test_steps", c.test_steps);
  r.read("test_lr", c.test_lr);
  r.read("workers", c.workers);
  r.read_string("optimizer", [&](const std::string& s) { c.optimizer = optimizer_from_string(s); });
  {
    std::vector<json> raw;
    const bool present = r.has("ablation_times");
    r.read("ablation_times", raw);
    if (present) {
      c.ablation_times.clear();
      for (const json& v : raw) c.ablation_times.push_back(r.parse_time(v, "ablation_times"));
    }
  }
  {
    Reader a = r.child("attack");
    a.read("epsilons", c.attack.epsilons);
    a.read("step_size", c.attack.config.step_size);
    a.read("iterations", c.attack.config.iterations);
    a.read("clip_lo", c.attack.config.clip_lo);
    a.read("clip_hi", c.attack.config.clip_hi);
    a.read("restarts", c.attack.config.restarts);
    a.read("freeze_kernel", c.attack.freeze_kernel);
  }
  r.read("max_consecutive_failures", c.max_consecutive_failures);
  r.read("checkpoint_every", c.checkpoint_every);
  return c;
}

void set_config_value(json& doc, std::string_view dotted_key, std::string_view value) {
  if (dotted_key.empty()) throw Error(ErrorCode::config, "empty override key");
  json parsed;
  try {
    parsed = json::parse(value);
  } catch (const json::parse_error&) {
    parsed = std::string(value);
  }
  json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = dotted_key.find('.', start);
    const std::string key(dotted_key.substr(start, dot - start));
    if (key.empty()) throw Error(ErrorCode::config, "malformed override key", std::string(dotted_key));
    if (!node->is_object()) *node = json::object();
    if (dot == std::string_view::npos) {
      (*node)[key] = parsed;
      return;
    }
    node = &(*node)[key];
    start = dot + 1;
  }
}

std::string resolve_output_dir(const RunConfig& config) {
  if (const char* env = std::getenv("NTKMETA_OUTPUT_DIR"); env && *env) return env;
  return config.output_dir;
}

// ---------------------------------------------------------------------------
// Optimizers

void Sgd::step(ParamVector& theta, const Vector& grad) { axpy(-lr_, grad, theta); }

json Sgd::state() const { return {{"kind", "sgd"}, {"lr", lr_}}; }

void Adam::step(ParamVector& theta, const Vector& grad) {
  if (m_.empty()) {
    m_.assign(theta.size(), 0.0);
    v_.assign(theta.size(), 0.0);
  }
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < theta.size(); ++i) {
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grad[i];
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grad[i] * grad[i];
    theta[i] -= lr_ * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps_);
  }
}

json Adam::state() const {
  return {{"kind", "adam"}, {"lr", lr_}, {"beta1", beta1_}, {"beta2", beta2_}, {"eps", eps_},
          {"t", t_},        {"m", m_},   {"v", v_}};
}

std::unique_ptr<Optimizer> make_optimizer(const RunConfig& config) {
  if (config.optimizer == OptimizerKind::sgd) return std::make_unique<Sgd>(config.meta.meta_lr);
  return std::make_unique<Adam>(config.meta.meta_lr);
}

// ---------------------------------------------------------------------------
// Training

std::vector<Task> training_batch(const RunConfig& config, std::int64_t iteration) {
  std::vector<Task> tasks;
  tasks.reserve(static_cast<std::size_t>(config.meta.meta_batch));
  for (int m = 0; m < config.meta.meta_batch; ++m) {
    tasks.push_back(sample_task(
        config.tasks, derive_key(config.seed, {kTrainStream, static_cast<std::uint64_t>(iteration),
                                               static_cast<std::uint64_t>(m)})));
  }
  return tasks;
}

std::vector<Task> evaluation_tasks(const RunConfig& config) {
  std::vector<Task> tasks;
  for (int i = 0; i < config.eval_tasks; ++i)
    tasks.push_back(sample_task(config.tasks,
                                derive_key(config.seed, {kEvalStream, static_cast<std::uint64_t>(i)})));
  return tasks;
}

namespace {

MamlVariant maml_variant(Algorithm a) {
  switch (a) {
    case Algorithm::fomaml: return MamlVariant::fomaml;
    case Algorithm::reptile: return MamlVariant::reptile;
    default: return MamlVariant::maml;
  }
}

}  // namespace

ObjectiveAndGrad meta_step(const RunConfig& config, const NetworkSpec& spec,
                           std::span<const double> theta, const std::vector<Task>& tasks) {
  const MetaConfig& m = config.meta;
  switch (config.algorithm) {
    case Algorithm::meta_rkhs_1:
      return meta_rkhs_1_step(spec, theta, tasks, config.rkhs1_alpha(), m.hvp_step, m.loss,
                              m.rkhs1_split, config.workers);
    case Algorithm::meta_rkhs_2:
      return meta_rkhs_2_step(spec, theta, tasks, m, config.workers);
    default:
      return maml_step(spec, theta, tasks, m.inner_lr, m.inner_steps, m.hvp_step,
                       maml_variant(config.algorithm), m.loss, config.workers);
  }
}

Checkpoint initial_checkpoint(const RunConfig& config) {
  const NetworkSpec spec = config.network_spec();
  Checkpoint c;
  c.network = spec.describe();
  c.config_hash = config.hash();
  c.iteration = 0;
  c.theta = init_params(spec, derive_key(config.seed, {kInitStream}));
  return c;
}

TrainResult train(const RunConfig& config, const std::string& output_dir, bool write_files) {
  config.validate();
  namespace fs = std::filesystem;
  const NetworkSpec spec = config.network_spec();
  const std::string hash = config.hash();
  TrainResult result;
  result.checkpoint = initial_checkpoint(config);
  ParamVector& theta = result.checkpoint.theta;
  auto optimizer = make_optimizer(config);

  CsvTable metrics({"iter", "meta_loss", "grad_norm", "status", "config_hash"});
  CsvTable wall({"iter", "wall_ms", "config_hash"});
  const fs::path dir(output_dir);
  if (write_files) save_json((dir / "config.json").string(), to_json(config));

  int consecutive = 0;
  for (int it = 0; it < config.meta_iterations; ++it) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::vector<Task> tasks = training_batch(config, it);
    try {
      const ObjectiveAndGrad step = meta_step(config, spec, theta, tasks);
      optimizer->step(theta, step.grad);
      consecutive = 0;
      metrics.row().add(it).add(step.value).add(norm2(step.grad)).add("ok").add(hash);
    } catch (const KernelSingularError& e) {
      ++result.failed_iterations;
      ++consecutive;
      std::cerr << "warning iteration=" << it << " code=kernel-singular min_pivot="
                << format_double(e.min_pivot()) << " message=\"" << e.what() << "\"\n";
      metrics.row().add(it).add(std::nan("")).add(std::nan("")).add("kernel-singular").add(hash);
      if (consecutive >= config.max_consecutive_failures) {
        throw Error(ErrorCode::kernel_singular,
                    "aborting after " + std::to_string(consecutive) +
                        " consecutive kernel-singular iterations");
      }
    }
    const double ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    wall.row().add(it).add(ms).add(hash);
    result.checkpoint.iteration = it + 1;
    if (write_files && config.checkpoint_every > 0 && (it + 1) % config.checkpoint_every == 0) {
      result.checkpoint.optimizer = optimizer->state();
      save_json((dir / "checkpoint.json").string(), checkpoint_to_json(result.checkpoint));
    }
  }
  result.checkpoint.optimizer = optimizer->state();
  result.metrics_csv = metrics.str();
  result.wall_time_csv = wall.str();
  if (write_files) {
    write_file_atomic((dir / "metrics.csv").string(), result.metrics_csv);
    write_file_atomic((dir / "wall_time.csv").string(), result.wall_time_csv);
    save_json((dir / "checkpoint.json").string(), checkpoint_to_json(result.checkpoint));
  }
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation

void check_checkpoint(const RunConfig& config, const Checkpoint& checkpoint) {
  const NetworkSpec spec = config.network_spec();
  if (checkpoint.network != spec.describe() || checkpoint.theta.size() != spec.param_count()) {
    throw Error(ErrorCode::spec_mismatch, "checkpoint network '" + checkpoint.network +
                                              "' does not match configured '" + spec.describe() +
                                              "'");
  }
}

namespace {

struct TaskScore {
  double mse = 0.0;
  double accuracy = 0.0;
};

double accuracy_of(const Matrix& scores, const std::vector<int>& labels) {
  const std::vector<int> pred = decode_labels(scores);
  std::size_t ok = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) ok += pred[i] == labels[i] ? 1 : 0;
  return static_cast<double>(ok) / static_cast<double>(pred.size());
}

TaskScore score(const Task& task, const Matrix& pred, const Matrix& target) {
  TaskScore s;
  s.mse = 2.0 * loss_value(pred, target, LossKind::squared) / static_cast<double>(target.cols());
  if (task.is_classification()) s.accuracy = accuracy_of(pred, task.query_labels);
  return s;
}

EvalRow summarize(std::string adaptation, bool classification, const std::vector<TaskScore>& s) {
  EvalRow row;
  row.adaptation = std::move(adaptation);
  row.metric = classification ? "accuracy" : "mse";
  row.n_tasks = s.size();
  double sum = 0.0;
  for (const auto& x : s) sum += classification ? x.accuracy : x.mse;
  row.mean = sum / static_cast<double>(s.size());
  double var = 0.0;
  for (const auto& x : s) {
    const double d = (classification ? x.accuracy : x.mse) - row.mean;
    var += d * d;
  }
  if (s.size() > 1) {
    var /= static_cast<double>(s.size() - 1);
    row.stderr_ = std::sqrt(var / static_cast<double>(s.size()));
  }
  return row;
}

TaskScore closed_form_score(const RunConfig& config, const NetworkSpec& spec,
                            const ParamVector& theta, const Task& raw, AdaptTime t) {
  const Task task = with_kernel_targets(raw);
  AdaptedPredictor::Options o = adapt_options(config.meta);
  o.time = t;
  const auto p = AdaptedPredictor::fit(spec, theta, task.support, o);
  return score(raw, p.predict(task.query.x), task.query.y);
}

TaskScore gradient_score(const RunConfig& config, const NetworkSpec& spec,
                         const ParamVector& theta, const Task& task) {
  const ParamVector phi =
      adapt_gradient(spec, theta, task.support, config.test_lr, config.test_steps, config.meta.loss);
  return score(task, predict(spec, phi, task.query.x), task.query.y);
}

}  // namespace

EvalResult evaluate(const RunConfig& config, const Checkpoint& checkpoint) {
  config.validate();
  check_checkpoint(config, checkpoint);
  const NetworkSpec spec = config.network_spec();
  const std::vector<Task> tasks = evaluation_tasks(config);
  const bool classification = config.tasks.kind == TaskKind::blobs;
  EvalResult result;

  if (config.algorithm == Algorithm::meta_rkhs_2) {
    std::vector<AdaptTime> times = {config.meta.adapt_time};
    if (config.experiment == ExperimentKind::ablation_t) times = config.ablation_times;
    for (const AdaptTime& t : times) {
      const auto scores = parallel_map(tasks.size(), config.workers, [&](std::size_t i) {
        return closed_form_score(config, spec, checkpoint.theta, tasks[i], t);
      });
      result.rows.push_back(summarize("t=" + t.to_string(), classification, scores));
    }
  } else {
    const auto scores = parallel_map(tasks.size(), config.workers, [&](std::size_t i) {
      return gradient_score(config, spec, checkpoint.theta, tasks[i]);
    });
    result.rows.push_back(
        summarize("steps=" + std::to_string(config.test_steps), classification, scores));
  }

  CsvTable csv({"algorithm", "adaptation", "metric", "mean", "stderr", "n_tasks", "iteration",
                "config_hash"});
  const std::string hash = config.hash();
  for (const EvalRow& r : result.rows) {
    csv.row().add(to_string(config.algorithm)).add(r.adaptation).add(r.metric).add(r.mean)
        .add(r.stderr_).add(static_cast<std::uint64_t>(r.n_tasks)).add(checkpoint.iteration)
        .add(hash);
  }
  result.csv = csv.str();
  return result;
}

// ---------------------------------------------------------------------------
// Gradient checks

GradcheckResult gradcheck(const RunConfig& config) {
  config.validate();
  const NetworkSpec spec = config.network_spec();
  const ParamVector theta = init_params(spec, derive_key(config.seed, {kCheckStream}));
  std::vector<Task> tasks;
  for (std::uint64_t m = 0; m < 2; ++m)
    tasks.push_back(sample_task(config.tasks, derive_key(config.seed, {kCheckStream, m})));
  const MetaConfig& mc = config.meta;
  const double fd = 1e-6;
  GradcheckResult result;
  auto add = [&](std::string name, double value, double tol, bool asserted) {
    GradcheckRow row{std::move(name), value, tol, asserted, !asserted || value <= tol};
    result.pass = result.pass && row.pass;
    result.rows.push_back(std::move(row));
  };

  const Dataset& d = tasks[0].support;
  add("grad_loss",
      relative_error(grad_loss(spec, theta, d, mc.loss),
                     finite_diff_grad([&](std::span<const double> p) { return loss(spec, p, d, mc.loss); },
                                      theta, fd)),
      1e-5, true);

  if (config.tasks.kind == TaskKind::sine || mc.loss == LossKind::cross_entropy ||
      config.tasks.kind == TaskKind::blobs) {
    const double alpha = config.rkhs1_alpha();
    add("meta_rkhs_1_grad",
        relative_error(meta_rkhs_1_grad(spec, theta, tasks, alpha, mc.hvp_step, mc.loss,
                                        mc.rkhs1_split),
                       finite_diff_grad(
                           [&](std::span<const double> p) {
                             return meta_rkhs_1_objective(spec, p, tasks, alpha, mc.loss,
                                                          mc.rkhs1_split);
                           },
                           theta, fd)),
        1e-4, true);
  }

  MetaConfig frozen = mc;
  frozen.stop_gradient_kernel = true;
  MetaConfig full = mc;
  full.stop_gradient_kernel = false;
  const Vector fd_frozen = finite_diff_grad(
      [&](std::span<const double> p) {
        return meta_rkhs_2_objective(spec, p, tasks, frozen, std::span<const double>(theta));
      },
      theta, fd);
  const Vector fd_full = finite_diff_grad(
      [&](std::span<const double> p) { return meta_rkhs_2_objective(spec, p, tasks, frozen); },
      theta, fd);
  const Vector g_frozen = meta_rkhs_2_grad(spec, theta, tasks, frozen);
  add("meta_rkhs_2_grad_frozen_kernel", relative_error(g_frozen, fd_frozen), 1e-5, true);
  add("meta_rkhs_2_grad_through_kernel",
      relative_error(meta_rkhs_2_grad(spec, theta, tasks, full), fd_full), 1e-3, true);
  add("meta_rkhs_2_frozen_vs_full_fd", relative_error(g_frozen, fd_full), 0.0, false);

  const double lr = mc.inner_lr;
  const int k = mc.inner_steps;
  add("maml_grad",
      relative_error(maml_meta_grad(spec, theta, tasks, lr, k, mc.hvp_step, MamlVariant::maml, mc.loss),
                     finite_diff_grad(
                         [&](std::span<const double> p) {
                           double v = 0.0;
                           for (const Task& t : tasks)
                             v += loss(spec, adapt_gradient(spec, p, t.support, lr, k, mc.loss),
                                       t.query, mc.loss);
                           return v / static_cast<double>(tasks.size());
                         },
                         theta, fd)),
      1e-4, true);

  CsvTable csv({"check", "value", "tolerance", "asserted", "pass", "config_hash"});
  const std::string hash = config.hash();
  for (const auto& r : result.rows) {
    csv.row().add(r.name).add(r.value).add(r.tolerance).add(r.asserted ? "yes" : "no").add(r.pass)
        .add(hash);
  }
  result.csv = csv.str();
  return result;
}

// ---------------------------------------------------------------------------
// Attacks

PredictorFactory predictor_factory(const RunConfig& config, const NetworkSpec& spec,
                                   const ParamVector& theta) {
  if (config.algorithm == Algorithm::meta_rkhs_2) {
    const auto options = adapt_options(config.meta);
    const bool freeze = config.attack.freeze_kernel;
    return [spec, theta, options, freeze](const Task& raw) -> std::unique_ptr<Predictor> {
      const Task task = with_kernel_targets(raw);
      return std::make_unique<KernelPredictor>(AdaptedPredictor::fit(spec, theta, task.support, options),
                                               raw.num_classes, freeze);
    };
  }
  const double lr = config.test_lr;
  const int steps = config.test_steps;
  const LossKind loss = config.meta.loss;
  return [spec, theta, lr, steps, loss](const Task& task) -> std::unique_ptr<Predictor> {
    return std::make_unique<NetworkPredictor>(spec, adapt_gradient(spec, theta, task.support, lr, steps, loss),
                                              loss);
  };
}

AttackSweepResult attack_sweep(const RunConfig& config, const Checkpoint& checkpoint) {
  config.validate();
  check_checkpoint(config, checkpoint);
  const NetworkSpec spec = config.network_spec();
  const std::vector<Task> tasks = evaluation_tasks(config);
  AttackConfig base = config.attack.config;
  base.seed = derive_key(config.seed, {kAttackStream});
  AttackSweepResult result;
  result.sweep = epsilon_sweep(predictor_factory(config, spec, checkpoint.theta), tasks,
                               config.attack.epsilons, base, config.workers);
  CsvTable csv({"epsilon", "algorithm", "clean_acc", "robust_acc", "n_tasks", "seed", "config_hash"});
  const std::string hash = config.hash();
  for (const EpsilonPoint& p : result.sweep.points) {
    csv.row().add(p.epsilon).add(to_string(config.algorithm)).add(p.result.clean_accuracy)
        .add(p.result.robust_accuracy).add(static_cast<std::uint64_t>(tasks.size())).add(config.seed)
        .add(hash);
  }
  result.csv = csv.str();
  return result;
}

// ---------------------------------------------------------------------------
// Timing

namespace {

using Clock = std::chrono::steady_clock;

constexpr int kTimingRounds = 5;

template <class Fn>
double mean_ms(int iterations, Fn&& fn) {
  const auto t0 = Clock::now();
  for (int i = 0; i < iterations; ++i) fn(i);
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count() /
         static_cast<double>(iterations);
}

/// Closed-form solve phase on a fixed Gram matrix: factorization, transition
/// matrix and coefficient solve.
double solve_phase_ms(const Matrix& h, double t, int pade_order, double jitter_rel, int repeats) {
  const std::size_t n = h.rows();
  Matrix residual(n, 1);
  for (std::size_t i = 0; i < n; ++i) residual(i, 0) = std::sin(static_cast<double>(i));
  double mean_diag = 0.0;
  for (std::size_t i = 0; i < n; ++i) mean_diag += h(i, i);
  mean_diag /= static_cast<double>(n);
  double sink = 0.0;
  // Median of per-repeat times keeps one-off scheduler noise out.
  std::vector<double> times;
  for (int r = 0; r < repeats; ++r) {
    const auto t0 = Clock::now();
    const SpdFactor f = factor_spd(h, jitter_rel * mean_diag);
    const Matrix transition =
        expm_scaled(h * (-t / static_cast<double>(n)), pade_order) - Matrix::identity(n);
    const Matrix v = f.chol.solve(matmul(transition, residual));
    sink += v(0, 0);
    times.push_back(std::chrono::duration<double, std::milli>(Clock::now() - t0).count());
  }
  std::sort(times.begin(), times.end());
  if (!std::isfinite(sink)) throw Error(ErrorCode::kernel_singular, "timing solve produced non-finite values");
  return times[times.size() / 2];
}

}  // namespace

TimingReport timing_smoke(const RunConfig& config, int iterations) {
  config.validate();
  if (iterations < 1) throw Error(ErrorCode::config, "timing iterations must be >= 1", "iterations");
  const NetworkSpec spec = config.network_spec();
  const ParamVector theta = init_params(spec, derive_key(config.seed, {kTimingStream}));
  std::vector<std::vector<Task>> batches;
  for (int i = 0; i < iterations; ++i) batches.push_back(training_batch(config, i));
  TimingReport rep;
  const MetaConfig& m = config.meta;

  using Step = std::function<void(const std::vector<Task>&)>;
  struct Arm {
    const char* name;
    std::string setting;
    Step step;
    std::vector<double> round_ms;
  };
  std::vector<Arm> arms;
  arms.push_back({"meta-rkhs-1", "alpha=" + format_double(config.rkhs1_alpha()),
                  [&](const std::vector<Task>& b) {
                    meta_rkhs_1_step(spec, theta, b, config.rkhs1_alpha(), m.hvp_step, m.loss);
                  }, {}});
  for (auto [variant, k, name] : {std::tuple{MamlVariant::fomaml, 5, "fomaml"},
                                  std::tuple{MamlVariant::reptile, 5, "reptile"},
                                  std::tuple{MamlVariant::reptile, 1, "reptile"}}) {
    arms.push_back({name, "k=" + std::to_string(k),
                    [&, variant, k](const std::vector<Task>& b) {
                      maml_step(spec, theta, b, m.inner_lr, k, m.hvp_step, variant, m.loss);
                    }, {}});
  }
  arms.push_back({"meta-rkhs-2", "t=" + m.adapt_time.to_string(),
                  [&](const std::vector<Task>& b) { meta_rkhs_2_step(spec, theta, b, m); }, {}});

  // Rounds interleave the arms so slow drift in machine load hits all of
  // them alike; each arm reports the median of its per-round means.
  for (Arm& a : arms) a.step(batches.front());  // warm-up, untimed
  for (int round = 0; round < kTimingRounds; ++round) {
    for (Arm& a : arms) {
      a.round_ms.push_back(
          mean_ms(iterations, [&](int i) { a.step(batches[static_cast<std::size_t>(i)]); }));
    }
  }
  std::vector<double> medians;
  for (Arm& a : arms) {
    std::sort(a.round_ms.begin(), a.round_ms.end());
    medians.push_back(a.round_ms[a.round_ms.size() / 2]);
    rep.rows.push_back({a.name, a.setting, config.tasks.sine.support_size, medians.back(), iterations});
  }
  rep.rkhs1_ms = medians[0];
  rep.fomaml5_ms = medians[1];
  rep.reptile5_ms = medians[2];
  rep.reptile1_ms = medians[3];

  // Solve phase at n = 32 and 64 on NTK Gram matrices of the same network.
  for (std::size_t n : {32u, 64u}) {
    const std::size_t dx = spec.input_dim();
    Matrix x(n, dx);
    CounterRng rng(config.seed, {kTimingStream, n});
    for (double& v : x.data()) v = rng.uniform(-1.0, 1.0);
    const Matrix h = spec.output_dim() == 1 ? gram(spec, theta, x) : gram_scalar(spec, theta, x);
    const double t = m.adapt_time.is_infinite() ? 10.0 : m.adapt_time.value();
    const double ms = solve_phase_ms(h, t, m.pade_order, m.kernel_jitter, 31);
    rep.rows.push_back({"meta-rkhs-2", "solve-phase", n, ms, 31});
    (n == 32 ? rep.solve_ms_n32 : rep.solve_ms_n64) = ms;
  }

  // Single task, single support point.
  {
    RunConfig one = config;
    one.meta.meta_batch = 1;
    one.tasks.sine.support_size = 1;
    one.tasks.sine.query_size = 1;
    one.tasks.blobs.shot = 1;
    const std::vector<Task> b = training_batch(one, 0);
    const auto t0 = Clock::now();
    meta_rkhs_2_step(spec, theta, b, m);
    meta_rkhs_1_step(spec, theta, b, config.rkhs1_alpha(), m.hvp_step, m.loss);
    rep.single_task_ms = std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
    rep.rows.push_back({"meta-rkhs-1+2", "single-task", 1, rep.single_task_ms, 1});
  }

  CsvTable csv({"algorithm", "setting", "n", "ms_per_iter", "iterations", "config_hash"});
  const std::string hash = config.hash();
  for (const TimingRow& r : rep.rows) {
    csv.row().add(r.algorithm).add(r.setting).add(static_cast<std::uint64_t>(r.n)).add(r.ms_per_iter)
        .add(r.iterations).add(hash);
  }
  rep.csv = csv.str();
  return rep;
}

ExpmCheckResult expm_check(const RunConfig& config) {
  config.validate();
  ExpmCheckResult result;
  auto add = [&](std::string check, int order, std::size_t n, double value, double tol) {
    const bool pass = value <= tol;
    result.pass = result.pass && pass;
    result.rows.push_back({std::move(check), order, n, value, tol, pass});
  };
  auto scalar = [](double a) { return Matrix(1, 1, {a}); };

  double pade1 = 0.0, pade2 = 0.0;
  for (double a = -4.0; a <= 4.0; a += 0.25) {
    const double h = a / 2.0, q = a * a / 12.0;
    // Order 1 has its pole at a = 2.
    if (a != 2.0)
      pade1 = std::max(pade1, std::abs(pade_expm(scalar(a), 1)(0, 0) - (1.0 + h) / (1.0 - h)));
    pade2 = std::max(pade2, std::abs(pade_expm(scalar(a), 2)(0, 0) - (1.0 + h + q) / (1.0 - h + q)));
  }
  add("pade_scalar_formula", 1, 1, pade1, 0.0);
  add("pade_scalar_formula", 2, 1, pade2, 0.0);

  double oracle = 0.0;
  for (double a = -100.0; a <= 100.0; a += 0.5) {
    const double want = std::exp(a);
    oracle = std::max(oracle, std::abs(expm_oracle(scalar(a))(0, 0) - want) / want);
  }
  add("oracle_vs_exp", 2, 1, oracle, 1e-10);

  // Random PSD Gram matrices G Gᵀ scaled to spectral radius up to 100.
  CounterRng rng(config.seed, {kCheckStream, 0xE});
  for (std::size_t n : {4u, 16u, 32u}) {
    Matrix g(n, n);
    for (double& v : g.data()) v = rng.normal();
    Matrix h = matmul(g, transpose(g));
    h = h * (100.0 / spectral_radius_sym(h));
    for (int order : {1, 2}) {
      double radius = 0.0, asym = 0.0;
      for (double t : {0.01, 0.1, 1.0, 10.0}) {
        const Matrix e = expm_scaled(h * -t, order);
        radius = std::max(radius, spectral_radius_sym(symmetrize(e)));
        asym = std::max(asym, max_abs(e - transpose(e)));
      }
      add("contraction_radius_minus_1", order, n, radius - 1.0, 1e-9);
      add("asymmetry", order, n, asym, 1e-9);
    }
  }

  CsvTable csv({"check", "order", "n", "value", "tolerance", "pass", "config_hash"});
  const std::string hash = config.hash();
  for (const auto& r : result.rows) {
    csv.row().add(r.check).add(r.order).add(static_cast<std::uint64_t>(r.n)).add(r.value)
        .add(r.tolerance).add(r.pass).add(hash);
  }
  result.csv = csv.str();
  return result;
}

SweepReport theorem_sweep(const RunConfig& config) {
  config.validate();
  SweepConfig sc;
  sc.base_seed = config.seed;
  return theorem_sweeps(sc, config.hash());
}

}  // namespace ntkmeta
