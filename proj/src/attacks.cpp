#include "ntkmeta/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "ntkmeta/error.hpp"
#include "ntkmeta/parallel.hpp"
#include "ntkmeta/rng.hpp"

namespace ntkmeta {

void AttackConfig::validate(std::string_view prefix) const {
  const std::string p(prefix);
  if (!(epsilon >= 0.0) || !std::isfinite(epsilon))
    throw Error(ErrorCode::config, "epsilon must be a finite value >= 0", p + ".epsilon");
  if (!(step_size > 0.0) || !std::isfinite(step_size))
    throw Error(ErrorCode::config, "step_size must be > 0", p + ".step_size");
  if (iterations < 1) throw Error(ErrorCode::config, "iterations must be >= 1", p + ".iterations");
  if (restarts < 0) throw Error(ErrorCode::config, "restarts must be >= 0", p + ".restarts");
  if (clip_lo.size() != clip_hi.size())
    throw Error(ErrorCode::config, "clip_lo and clip_hi must have the same length", p + ".clip");
  for (std::size_t i = 0; i < clip_lo.size(); ++i) {
    if (!(clip_lo[i] <= clip_hi[i]))
      throw Error(ErrorCode::config, "clip_lo must not exceed clip_hi", p + ".clip");
  }
}

namespace {

double clip_bound(const Vector& bound, std::size_t i) {
  return bound.size() == 1 ? bound[0] : bound[i];
}

}  // namespace

void project_linf(std::span<double> x, std::span<const double> x0, const AttackConfig& config) {
  const bool clip = !config.clip_lo.empty();
  if (clip && config.clip_lo.size() != 1 && config.clip_lo.size() != x.size()) {
    throw Error(ErrorCode::dimension_mismatch, "clip range length does not match input");
  }
  const double eps = config.epsilon;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double v = x[i];
    if (clip) v = std::clamp(v, clip_bound(config.clip_lo, i), clip_bound(config.clip_hi, i));
    v = std::clamp(v, x0[i] - eps, x0[i] + eps);
    // x0 ± ε can round outward; step back toward x0 until the difference is
    // within ε as evaluated in floating point.
    while (std::abs(v - x0[i]) > eps) v = std::nextafter(v, x0[i]);
    x[i] = v;
  }
}

Vector pgd_linf(const InputLossGrad& loss_grad, std::span<const double> x0,
                const AttackConfig& config) {
  config.validate();
  Vector best(x0.begin(), x0.end());
  if (config.epsilon == 0.0) return best;

  double best_loss = -INFINITY;
  CounterRng rng(config.seed, {0xa77acULL});
  for (int run = 0; run <= config.restarts; ++run) {
    Vector x(x0.begin(), x0.end());
    if (run > 0) {
      for (double& v : x) v += rng.uniform(-config.epsilon, config.epsilon);
      project_linf(x, x0, config);
    }
    for (int it = 0; it < config.iterations; ++it) {
      const Vector g = loss_grad(x).second;
      for (std::size_t i = 0; i < x.size(); ++i) {
        if (g[i] > 0.0) x[i] += config.step_size;
        else if (g[i] < 0.0) x[i] -= config.step_size;
      }
      project_linf(x, x0, config);
    }
    if (config.restarts == 0) return x;
    const double l = loss_grad(x).first;
    if (l > best_loss) {
      best_loss = l;
      best = std::move(x);
    }
  }
  return best;
}

std::vector<int> Predictor::classify(const Matrix& x) const { return decode_labels(scores(x)); }

namespace {

Matrix one_hot_row(int label, std::size_t classes) {
  if (label < 0 || static_cast<std::size_t>(label) >= classes) {
    throw Error(ErrorCode::invalid_argument, "label " + std::to_string(label) + " out of range");
  }
  Matrix m(1, classes);
  m(0, static_cast<std::size_t>(label)) = 1.0;
  return m;
}

}  // namespace

NetworkPredictor::NetworkPredictor(NetworkSpec spec, ParamVector theta, LossKind loss)
    : spec_(std::move(spec)), theta_(std::move(theta)), loss_(loss) {}

Matrix NetworkPredictor::scores(const Matrix& x) const { return predict(spec_, theta_, x); }

std::pair<double, Vector> NetworkPredictor::loss_input_grad(std::span<const double> x,
                                                            int label) const {
  const ForwardResult fr = forward(spec_, theta_, Matrix::row_vector(x));
  const Matrix target = one_hot_row(label, spec_.output_dim());
  const double l = loss_value(fr.outputs, target, loss_);
  const Matrix cot = loss_output_grad(fr.outputs, target, loss_);
  return {l, input_vjp(spec_, theta_, fr.trace, cot).values()};
}

KernelPredictor::KernelPredictor(AdaptedPredictor adapted, std::size_t num_classes,
                                 bool freeze_kernel)
    : adapted_(std::move(adapted)), classes_(num_classes), freeze_(freeze_kernel) {}

Matrix KernelPredictor::scores(const Matrix& x) const { return adapted_.predict(x); }

std::pair<double, Vector> KernelPredictor::loss_input_grad(std::span<const double> x,
                                                           int label) const {
  const Matrix f = adapted_.predict(Matrix::row_vector(x));
  const Matrix target = encode_labels({label}, classes_);
  Vector residual = (f - target).values();
  const double l = 0.5 * dot(residual, residual);
  return {l, adapted_.input_vjp(x, residual, freeze_)};
}

NearestCenterPredictor::NearestCenterPredictor(Matrix centers) : centers_(std::move(centers)) {}

Matrix NearestCenterPredictor::scores(const Matrix& x) const {
  Matrix s(x.rows(), centers_.rows());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (std::size_t k = 0; k < centers_.rows(); ++k) {
      double d2 = 0.0;
      for (std::size_t c = 0; c < x.cols(); ++c) {
        const double d = x(i, c) - centers_(k, c);
        d2 += d * d;
      }
      s(i, k) = -0.5 * d2;
    }
  }
  return s;
}

std::pair<double, Vector> NearestCenterPredictor::loss_input_grad(std::span<const double> x,
                                                                  int label) const {
  const Matrix s = scores(Matrix::row_vector(x));
  const Matrix target = one_hot_row(label, centers_.rows());
  const double l = loss_value(s, target, LossKind::cross_entropy);
  const Matrix ds = loss_output_grad(s, target, LossKind::cross_entropy);
  Vector grad(x.size(), 0.0);
  for (std::size_t k = 0; k < centers_.rows(); ++k) {
    for (std::size_t c = 0; c < x.size(); ++c) grad[c] += ds(0, k) * (centers_(k, c) - x[c]);
  }
  return {l, grad};
}

namespace {

struct TaskCounts {
  std::vector<std::size_t> clean;
  std::vector<std::size_t> robust;
  std::size_t queries = 0;
};

TaskCounts attack_task(const Predictor& model, const Task& task, const std::vector<double>& eps,
                       const AttackConfig& base) {
  if (!task.is_classification()) {
    throw Error(ErrorCode::invalid_argument, "robust accuracy needs classification tasks");
  }
  const Matrix& xq = task.query.x;
  const std::vector<int> clean = model.classify(xq);
  TaskCounts c;
  c.queries = xq.rows();
  c.clean.assign(eps.size(), 0);
  c.robust.assign(eps.size(), 0);
  for (std::size_t i = 0; i < xq.rows(); ++i) {
    const int label = task.query_labels[i];
    const bool ok = clean[i] == label;
    for (std::size_t e = 0; e < eps.size(); ++e) {
      if (ok) ++c.clean[e];
      // A misclassified clean point stays misclassified at x0; attacking it
      // cannot change its contribution to robust accuracy.
      if (!ok) continue;
      if (eps[e] == 0.0) {
        ++c.robust[e];
        continue;
      }
      AttackConfig cfg = base;
      cfg.epsilon = eps[e];
      cfg.seed = derive_key(base.seed, {i});
      auto fn = [&](std::span<const double> x) { return model.loss_input_grad(x, label); };
      const Vector adv = pgd_linf(fn, xq.row(i), cfg);
      if (model.classify(Matrix::row_vector(adv))[0] == label) ++c.robust[e];
    }
  }
  return c;
}

}  // namespace

EpsilonSweep epsilon_sweep(const PredictorFactory& factory, const std::vector<Task>& tasks,
                           std::vector<double> epsilons, const AttackConfig& base,
                           std::size_t workers) {
  if (epsilons.empty()) throw Error(ErrorCode::config, "epsilon grid is empty", "attack.epsilons");
  std::sort(epsilons.begin(), epsilons.end());
  for (double e : epsilons) {
    AttackConfig cfg = base;
    cfg.epsilon = e;
    cfg.validate();
  }
  const auto counts = parallel_map(tasks.size(), workers, [&](std::size_t t) {
    const auto model = factory(tasks[t]);
    AttackConfig cfg = base;
    cfg.seed = derive_key(base.seed, {t});
    return attack_task(*model, tasks[t], epsilons, cfg);
  });

  EpsilonSweep sweep;
  std::size_t queries = 0;
  for (const auto& c : counts) queries += c.queries;
  for (std::size_t e = 0; e < epsilons.size(); ++e) {
    std::size_t clean = 0, robust = 0;
    for (const auto& c : counts) {
      clean += c.clean[e];
      robust += c.robust[e];
    }
    EpsilonPoint p;
    p.epsilon = epsilons[e];
    p.result.queries = queries;
    if (queries > 0) {
      p.result.clean_accuracy = static_cast<double>(clean) / static_cast<double>(queries);
      p.result.robust_accuracy = static_cast<double>(robust) / static_cast<double>(queries);
    }
    sweep.points.push_back(p);
  }
  if (sweep.points.size() > 1) {
    std::size_t ok = 0;
    for (std::size_t e = 0; e + 1 < sweep.points.size(); ++e) {
      if (sweep.points[e + 1].result.robust_accuracy <= sweep.points[e].result.robust_accuracy) ++ok;
    }
    sweep.monotone_fraction = static_cast<double>(ok) / static_cast<double>(sweep.points.size() - 1);
  }
  return sweep;
}

RobustResult robust_accuracy(const PredictorFactory& factory, const std::vector<Task>& tasks,
                             const AttackConfig& config, std::size_t workers) {
  return epsilon_sweep(factory, tasks, {config.epsilon}, config, workers).points[0].result;
}

}  // namespace ntkmeta
