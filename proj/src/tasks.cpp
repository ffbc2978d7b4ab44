#include "ntkmeta/tasks.hpp"

#include <cmath>
#include <string>

#include "ntkmeta/error.hpp"
#include "ntkmeta/rng.hpp"

namespace ntkmeta {

std::string_view to_string(TaskKind kind) { return kind == TaskKind::sine ? "sine" : "blobs"; }

TaskKind task_kind_from_string(std::string_view name) {
  if (name == "sine") return TaskKind::sine;
  if (name == "blobs") return TaskKind::blobs;
  throw Error(ErrorCode::config, "unknown task kind '" + std::string(name) + "'", "tasks.kind");
}

void TaskDistributionSpec::validate() const {
  auto fail = [](const std::string& field, const std::string& msg) {
    throw Error(ErrorCode::config, msg, "tasks." + field);
  };
  if (kind == TaskKind::sine) {
    if (!(sine.amplitude_lo <= sine.amplitude_hi)) fail("sine.amplitude", "empty amplitude range");
    if (!(sine.phase_lo <= sine.phase_hi)) fail("sine.phase", "empty phase range");
    if (!(sine.x_lo < sine.x_hi)) fail("sine.x", "empty x range");
    if (!(sine.noise >= 0.0)) fail("sine.noise", "noise must be >= 0");
    if (sine.support_size == 0) fail("sine.support_size", "support_size must be >= 1");
    if (sine.query_size == 0) fail("sine.query_size", "query_size must be >= 1");
  } else {
    if (blobs.way < 2) fail("blobs.way", "way must be >= 2");
    if (blobs.shot < 1) fail("blobs.shot", "shot must be >= 1");
    if (blobs.query_shot < 1) fail("blobs.query_shot", "query_shot must be >= 1");
    if (blobs.input_dim < 1) fail("blobs.input_dim", "input_dim must be >= 1");
    if (!(blobs.spread >= 0.0)) fail("blobs.spread", "spread must be >= 0");
    if (!(blobs.center_scale > 0.0)) fail("blobs.center_scale", "center_scale must be > 0");
  }
}

std::size_t TaskDistributionSpec::input_dim() const {
  return kind == TaskKind::sine ? 1 : blobs.input_dim;
}

std::size_t TaskDistributionSpec::output_dim() const {
  return kind == TaskKind::sine ? 1 : blobs.way;
}

Matrix one_hot(const std::vector<int>& labels, std::size_t num_classes) {
  Matrix y(labels.size(), num_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes) {
      throw Error(ErrorCode::invalid_argument, "label " + std::to_string(labels[i]) +
                                                   " out of range for " +
                                                   std::to_string(num_classes) + " classes");
    }
    y(i, static_cast<std::size_t>(labels[i])) = 1.0;
  }
  return y;
}

Task sample_sine_task(const SineSpec& spec, std::uint64_t seed) {
  CounterRng rng(seed);
  Task task;
  task.meta.kind = TaskKind::sine;
  task.meta.amplitude = rng.uniform(spec.amplitude_lo, spec.amplitude_hi);
  task.meta.phase = rng.uniform(spec.phase_lo, spec.phase_hi);
  auto draw = [&](std::size_t n) {
    Dataset d{Matrix(n, 1), Matrix(n, 1)};
    for (std::size_t i = 0; i < n; ++i) {
      const double x = rng.uniform(spec.x_lo, spec.x_hi);
      double y = task.meta.amplitude * std::sin(x + task.meta.phase);
      if (spec.noise > 0.0) y += rng.normal(0.0, spec.noise);
      d.x(i, 0) = x;
      d.y(i, 0) = y;
    }
    return d;
  };
  task.support = draw(spec.support_size);
  task.query = draw(spec.query_size);
  return task;
}

Task sample_blob_task(const BlobSpec& spec, std::uint64_t seed) {
  CounterRng rng(seed);
  Task task;
  task.num_classes = spec.way;
  task.meta.kind = TaskKind::blobs;
  task.meta.centers = Matrix(spec.way, spec.input_dim);
  for (double& c : task.meta.centers.data()) c = rng.normal(0.0, spec.center_scale);

  auto draw = [&](std::size_t per_class, std::vector<int>& labels) {
    Matrix x(per_class * spec.way, spec.input_dim);
    labels.clear();
    for (std::size_t k = 0; k < per_class; ++k) {
      for (std::size_t c = 0; c < spec.way; ++c) {
        const std::size_t row = k * spec.way + c;
        for (std::size_t d = 0; d < spec.input_dim; ++d)
          x(row, d) = task.meta.centers(c, d) + (spec.spread > 0.0 ? rng.normal(0.0, spec.spread) : 0.0);
        labels.push_back(static_cast<int>(c));
      }
    }
    return Dataset{std::move(x), one_hot(labels, spec.way)};
  };
  task.support = draw(spec.shot, task.support_labels);
  task.query = draw(spec.query_shot, task.query_labels);
  return task;
}

Task sample_task(const TaskDistributionSpec& spec, std::uint64_t seed) {
  spec.validate();
  return spec.kind == TaskKind::sine ? sample_sine_task(spec.sine, seed)
                                     : sample_blob_task(spec.blobs, seed);
}

Task swap_split(const Task& task) {
  Task out = task;
  std::swap(out.support, out.query);
  std::swap(out.support_labels, out.query_labels);
  return out;
}

}  // namespace ntkmeta
