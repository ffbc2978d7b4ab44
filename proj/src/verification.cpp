#include "ntkmeta/verification.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "ntkmeta/csv.hpp"
#include "ntkmeta/error.hpp"
#include "ntkmeta/meta.hpp"
#include "ntkmeta/rng.hpp"

namespace ntkmeta {

OdeResult linearized_flow(const NetworkSpec& spec, std::span<const double> theta,
                          const Dataset& support, const Matrix& queries, double t,
                          const OdeConfig& ode, KernelSpec kernel) {
  if (support.size() == 0) throw Error(ErrorCode::invalid_argument, "support set is empty");
  if (!(t >= 0.0)) throw Error(ErrorCode::invalid_argument, "ODE end time must be >= 0");
  const std::size_t n = support.size();
  const std::size_t dy = spec.output_dim();
  const KernelKind kind = resolve_kernel(kernel.kind, dy);

  OdeResult out;
  out.predictions = predict(spec, theta, queries);
  if (t == 0.0 || queries.rows() == 0) return out;

  // Kernel blocks in the layout of the closed form: scalar kernels act on
  // n × d_y residual matrices, the full NTK on the flattened n·d_y vector.
  Matrix h_ss;
  Matrix h_qs;
  if (kind == KernelKind::rbf) {
    const double bw = kernel.rbf_bandwidth > 0.0 ? kernel.rbf_bandwidth
                                                 : median_bandwidth(support.x);
    h_ss = rbf_gram(support.x, bw);
    h_qs = rbf_cross(queries, support.x, bw);
  } else {
    const bool scalar = kind == KernelKind::ntk_scalar;
    const auto js = batch_jacobians(spec, theta, support.x);
    const auto jq = batch_jacobians(spec, theta, queries);
    h_ss = symmetrize(gram_from_jacobians(js, js, scalar));
    h_qs = gram_from_jacobians(jq, js, scalar);
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  const bool flat = kind == KernelKind::ntk;

  Matrix u = predict(spec, theta, support.x);
  Matrix target = support.y;
  if (flat) {
    u = Matrix(n * dy, 1, u.values());
    target = Matrix(n * dy, 1, target.values());
  }
  Matrix q = out.predictions;
  if (flat) q = Matrix(queries.rows() * dy, 1, q.values());

  const double rho = spectral_radius_sym(h_ss) * inv_n;
  long steps = static_cast<long>(std::ceil(t * ode.steps_per_unit));
  steps = std::max(steps, static_cast<long>(std::ceil(t * rho / ode.max_step_stiffness)));
  steps = std::max(steps, 1L);
  const double dt = t / static_cast<double>(steps);

  // Only u drives the dynamics; q integrates the same residual through H(x, X).
  auto du = [&](const Matrix& state) { return matmul(h_ss, state - target) * -inv_n; };
  auto dq = [&](const Matrix& state) { return matmul(h_qs, state - target) * -inv_n; };
  for (long s = 0; s < steps; ++s) {
    const Matrix k1 = du(u);
    const Matrix u2 = u + k1 * (0.5 * dt);
    const Matrix k2 = du(u2);
    const Matrix u3 = u + k2 * (0.5 * dt);
    const Matrix k3 = du(u3);
    const Matrix u4 = u + k3 * dt;
    const Matrix k4 = du(u4);
    const Matrix q_incr = (dq(u) + dq(u2) * 2.0 + dq(u3) * 2.0 + dq(u4)) * (dt / 6.0);
    u += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    q += q_incr;
  }
  out.predictions = Matrix(queries.rows(), dy, q.values());
  out.steps = steps;
  return out;
}

Matrix linearized_flow_oracle(const NetworkSpec& spec, std::span<const double> theta,
                              const Dataset& support, const Matrix& queries, double t,
                              const OdeConfig& ode, KernelSpec kernel) {
  return linearized_flow(spec, theta, support, queries, t, ode, kernel).predictions;
}

Vector finite_diff_grad(const Objective& objective, std::span<const double> theta, double step) {
  Vector work(theta.begin(), theta.end());
  Vector grad(theta.size());
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double h = step * std::max(1.0, std::abs(theta[i]));
    const double orig = work[i];
    work[i] = orig + h;
    const double fp = objective(work);
    work[i] = orig - h;
    const double fm = objective(work);
    work[i] = orig;
    grad[i] = (fp - fm) / (2.0 * h);
  }
  return grad;
}

double relative_error(std::span<const double> a, std::span<const double> b) {
  double num = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) num += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(num) / std::max(norm2(b), std::numeric_limits<double>::min());
}

double learning_rate_bound(const NetworkSpec& spec, std::span<const double> theta) {
  const auto norms = spectral_norms(spec, theta);
  const double s = *std::max_element(norms.begin(), norms.end());
  const double depth = static_cast<double>(std::max<std::size_t>(spec.hidden_layers(), 1));
  if (s <= 0.0) return 0.0;
  const double q = std::min(1.0 / (depth * std::pow(s, depth)), std::pow(depth, -1.0 / (depth + 1.0)));
  const double r = std::min(std::pow(s, -depth), s);
  return q * r;
}

namespace {

/// Regression episode with y = A·sin(w·x + φ) on x ∈ [−1, 1]^d; support and
/// query share the same draw so one batch serves both roles.
Task sweep_task(std::size_t input_dim, std::size_t n, std::uint64_t key) {
  CounterRng rng(key);
  const double amp = rng.uniform(0.5, 2.0);
  const double phase = rng.uniform(0.0, 3.0);
  Vector w(input_dim);
  for (double& v : w) v = rng.normal(0.0, 1.0);
  Task t;
  t.support = Dataset{Matrix(n, input_dim), Matrix(n, 1)};
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t d = 0; d < input_dim; ++d) t.support.x(i, d) = rng.uniform(-1.0, 1.0);
    t.support.y(i, 0) = amp * std::sin(dot(w, t.support.x.row(i)) + phase);
  }
  t.query = t.support;
  t.meta.amplitude = amp;
  t.meta.phase = phase;
  return t;
}

}  // namespace

SweepReport theorem_sweeps(const SweepConfig& config, const std::string& config_hash) {
  if (config.times.empty() || config.seeds.empty() || config.draws < 1) {
    throw Error(ErrorCode::config, "theorem sweep grid is empty", "sweep");
  }
  CsvTable csv({"sweep_name", "seed", "arch", "depth", "alpha", "k", "time", "value", "in_regime",
                "pass", "config_hash"});
  SweepReport report;
  SweepSummary& summary = report.summary;

  struct Arch {
    std::string name;
    NetworkSpec spec;
  };
  std::vector<Arch> archs;
  for (std::size_t depth : config.depths) {
    archs.push_back({"dense-L" + std::to_string(depth),
                     NetworkSpec::mlp(1, std::vector<std::size_t>(depth, config.width), 1)});
  }
  if (config.include_conv) {
    archs.push_back({"conv", NetworkSpec::conv(config.conv_input_dim, config.conv_channels,
                                               config.conv_width, {config.width}, 1)});
  }

  for (std::size_t a = 0; a < archs.size(); ++a) {
    const Arch& arch = archs[a];
    int improved = 0;
    for (int d = 0; d < config.draws; ++d) {
      const std::uint64_t seed = derive_key(config.base_seed, {0x7a11ULL, a, static_cast<std::uint64_t>(d)});
      const ParamVector theta = init_params(arch.spec, seed);
      std::vector<Task> tasks;
      for (std::size_t m = 0; m < config.tasks_per_draw; ++m)
        tasks.push_back(sweep_task(arch.spec.input_dim(), config.batch_size, derive_key(seed, {m})));
      const double bound = learning_rate_bound(arch.spec, theta);
      double gap_k[2] = {0.0, 0.0};
      for (int which = 0; which < 2; ++which) {
        const double alpha = which == 0 ? config.alpha : config.alpha / 2.0;
        const double g1 = taylor_gap(arch.spec, theta, tasks, alpha, 1);
        const bool ok1 = g1 <= 1e-8;
        summary.k1_identity = summary.k1_identity && ok1;
        csv.row().add("taylor_gap").add(static_cast<std::uint64_t>(d)).add(arch.name)
            .add(static_cast<std::uint64_t>(arch.spec.hidden_layers())).add(alpha).add(1)
            .add("-").add(g1).add(alpha <= bound).add(ok1).add(config_hash);
        gap_k[which] = taylor_gap(arch.spec, theta, tasks, alpha, config.k);
        csv.row().add("taylor_gap").add(static_cast<std::uint64_t>(d)).add(arch.name)
            .add(static_cast<std::uint64_t>(arch.spec.hidden_layers())).add(alpha).add(config.k)
            .add("-").add(gap_k[which]).add(alpha <= bound).add(true).add(config_hash);
      }
      if (gap_k[1] <= gap_k[0]) ++improved;
    }
    const double frac = static_cast<double>(improved) / static_cast<double>(config.draws);
    summary.trend_fraction.emplace_back(arch.name, frac);
    summary.trend_ok = summary.trend_ok && frac >= 0.8;
    csv.row().add("taylor_trend").add("-").add(arch.name)
        .add(static_cast<std::uint64_t>(arch.spec.hidden_layers())).add(config.alpha).add(config.k)
        .add("-").add(frac).add("-").add(frac >= 0.8).add(config_hash);
  }

  // Energy gap |Ẽ(T) − Ē(T)| at fixed θ, one batch per task for both objectives.
  const NetworkSpec spec = NetworkSpec::mlp(1, {config.width, config.width}, 1);
  for (std::uint64_t seed : config.seeds) {
    const std::uint64_t key = derive_key(config.base_seed, {0xe9e7ULL, seed});
    const ParamVector theta = init_params(spec, key);
    std::vector<Task> tasks;
    for (std::size_t m = 0; m < config.tasks_per_draw; ++m)
      tasks.push_back(sweep_task(1, config.batch_size, derive_key(key, {m})));
    std::vector<double> gaps;
    for (double time : config.times) {
      MetaConfig mc;
      mc.adapt_time = AdaptTime::finite(time);
      const double e1 = meta_rkhs_1_objective(spec, theta, tasks, time);
      const double e2 = meta_rkhs_2_objective(spec, theta, tasks, mc);
      gaps.push_back(std::abs(e1 - e2));
      if (time == 0.0) summary.max_t0_gap = std::max(summary.max_t0_gap, gaps.back());
    }
    bool monotone = true;
    for (std::size_t i = 0; i + 1 < gaps.size(); ++i) {
      const bool ok = gaps[i + 1] >= gaps[i] - 1e-12 * (1.0 + gaps[i]);
      monotone = monotone && ok;
    }
    for (std::size_t i = 0; i < gaps.size(); ++i) {
      csv.row().add("energy_gap").add(seed).add("dense-L2").add(static_cast<std::uint64_t>(2))
          .add("-").add("-").add(config.times[i]).add(gaps[i]).add("-").add(monotone)
          .add(config_hash);
    }
    ++summary.total_seeds;
    if (monotone) ++summary.monotone_seeds;
  }
  summary.monotone_ok = summary.monotone_seeds == summary.total_seeds;
  report.csv = csv.str();
  return report;
}

}  // namespace ntkmeta
