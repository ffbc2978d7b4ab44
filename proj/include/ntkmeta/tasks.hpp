#pragma once

#include <cstdint>
#include <numbers>
#include <string_view>
#include <vector>

#include "ntkmeta/linalg.hpp"
#include "ntkmeta/network.hpp"

namespace ntkmeta {

enum class TaskKind { sine, blobs };

std::string_view to_string(TaskKind kind);
TaskKind task_kind_from_string(std::string_view name);

/// y = A·sin(x + φ) + N(0, noise²) on x ~ U[x_lo, x_hi].
struct SineSpec {
  double amplitude_lo = 0.1;
  double amplitude_hi = 5.0;
  double phase_lo = 0.0;
  double phase_hi = std::numbers::pi;
  double x_lo = -5.0;
  double x_hi = 5.0;
  double noise = 0.0;
  std::size_t support_size = 10;
  std::size_t query_size = 10;
};

/// N-way k-shot Gaussian clusters.
struct BlobSpec {
  std::size_t way = 5;
  std::size_t shot = 1;
  std::size_t query_shot = 5;
  std::size_t input_dim = 8;
  double spread = 0.01;
  double center_scale = 1.0;
};

struct TaskDistributionSpec {
  TaskKind kind = TaskKind::sine;
  SineSpec sine;
  BlobSpec blobs;

  void validate() const;
  std::size_t input_dim() const;
  std::size_t output_dim() const;
};

/// Parameters the task was drawn with.
struct TaskMeta {
  TaskKind kind = TaskKind::sine;
  double amplitude = 0.0;
  double phase = 0.0;
  Matrix centers;
};

/// One episode. Classification tasks carry class indices alongside one-hot y.
struct Task {
  Dataset support;
  Dataset query;
  std::vector<int> support_labels;
  std::vector<int> query_labels;
  std::size_t num_classes = 0;
  TaskMeta meta;

  bool is_classification() const noexcept { return num_classes > 0; }
};

Matrix one_hot(const std::vector<int>& labels, std::size_t num_classes);

Task sample_sine_task(const SineSpec& spec, std::uint64_t seed);
Task sample_blob_task(const BlobSpec& spec, std::uint64_t seed);
Task sample_task(const TaskDistributionSpec& spec, std::uint64_t seed);

/// Same task with support and query exchanged.
Task swap_split(const Task& task);

}  // namespace ntkmeta
