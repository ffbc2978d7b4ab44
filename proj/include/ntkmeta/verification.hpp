#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "ntkmeta/linalg.hpp"
#include "ntkmeta/network.hpp"
#include "ntkmeta/ntk.hpp"
#include "ntkmeta/tasks.hpp"

namespace ntkmeta {

struct OdeConfig {
  /// RK4 steps per unit of adaptation time.
  int steps_per_unit = 1000;
  /// Extra steps are added so that dt·ρ(H)/n stays below this bound.
  double max_step_stiffness = 0.1;
};

struct OdeResult {
  Matrix predictions;
  long steps = 0;
};

/// Integrates the linearized function-space flow
///   u̇(X) = −(1/n)·H(X, X)·(u(X) − Y),  q̇(x) = −(1/n)·H(x, X)·(u(X) − Y)
/// with fixed-step RK4 from u(0) = f_θ(X), q(0) = f_θ(x).
OdeResult linearized_flow(const NetworkSpec& spec, std::span<const double> theta,
                          const Dataset& support, const Matrix& queries, double t,
                          const OdeConfig& ode = {}, KernelSpec kernel = {});

Matrix linearized_flow_oracle(const NetworkSpec& spec, std::span<const double> theta,
                              const Dataset& support, const Matrix& queries, double t,
                              const OdeConfig& ode = {}, KernelSpec kernel = {});

using Objective = std::function<double(std::span<const double>)>;

/// Coordinate-wise central differences with h_i = step·max(1, |θ_i|).
Vector finite_diff_grad(const Objective& objective, std::span<const double> theta, double step);

/// ‖a − b‖₂ / max(‖b‖₂, tiny).
double relative_error(std::span<const double> a, std::span<const double> b);

/// Learning-rate bound q·r with q = min(1/(L·s^L), L^{−1/(L+1)}),
/// r = min(s^{−L}, s), s = max spectral norm; constants taken as 1.
double learning_rate_bound(const NetworkSpec& spec, std::span<const double> theta);

struct SweepConfig {
  std::vector<std::size_t> depths = {1, 2, 3};
  std::size_t width = 16;
  bool include_conv = true;
  std::size_t conv_input_dim = 6;
  std::vector<std::size_t> conv_channels = {2};
  std::size_t conv_width = 3;
  /// Base α for the Taylor-gap sweep; α/2 is also evaluated.
  double alpha = 0.02;
  int k = 3;
  int draws = 10;
  std::vector<double> times = {0.0, 0.1, 0.5, 1.0, 2.0};
  std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
  std::size_t tasks_per_draw = 4;
  std::size_t batch_size = 6;
  std::uint64_t base_seed = 2024;
};

struct SweepSummary {
  /// Taylor gap at k = 1 stays ≤ 1e-8 everywhere.
  bool k1_identity = true;
  /// gap(α/2) ≤ gap(α) fraction per architecture.
  std::vector<std::pair<std::string, double>> trend_fraction;
  bool trend_ok = true;
  /// |Ẽ(T) − Ē(T)| non-decreasing over the time grid, per seed.
  int monotone_seeds = 0;
  int total_seeds = 0;
  bool monotone_ok = true;
  double max_t0_gap = 0.0;
};

struct SweepReport {
  std::string csv;
  SweepSummary summary;
};

/// Taylor-gap and energy-gap sweeps. CSV columns:
/// sweep_name, seed, arch, depth, alpha, k, time, value, in_regime, pass, config_hash.
SweepReport theorem_sweeps(const SweepConfig& config, const std::string& config_hash = "-");

}  // namespace ntkmeta
