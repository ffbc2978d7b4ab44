#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string_view>
#include <utility>
#include <vector>

#include "ntkmeta/linalg.hpp"
#include "ntkmeta/meta.hpp"
#include "ntkmeta/network.hpp"
#include "ntkmeta/tasks.hpp"

namespace ntkmeta {

struct AttackConfig {
  double epsilon = 0.0;
  double step_size = 0.01;
  int iterations = 20;
  /// Per-feature clip range; a single entry broadcasts. Empty means no clip.
  Vector clip_lo;
  Vector clip_hi;
  /// Extra runs from uniform random starts inside the ball; the run with the
  /// highest final loss wins.
  int restarts = 0;
  std::uint64_t seed = 0;

  void validate(std::string_view prefix = "attack") const;
};

/// Loss at x and its gradient with respect to x.
using InputLossGrad = std::function<std::pair<double, Vector>(std::span<const double>)>;

/// Projected sign-gradient ascent inside the ℓ∞ ball of radius ε around x0.
/// The returned point satisfies |x_i − x0_i| ≤ ε in floating point.
Vector pgd_linf(const InputLossGrad& loss_grad, std::span<const double> x0,
                const AttackConfig& config);

/// Clips to the configured range, then projects onto the ε-ball around x0.
void project_linf(std::span<double> x, std::span<const double> x0, const AttackConfig& config);

/// A classifier that exposes input gradients of its per-example loss.
class Predictor {
 public:
  virtual ~Predictor() = default;
  /// Row-wise class scores; the decision is the argmax.
  virtual Matrix scores(const Matrix& x) const = 0;
  virtual std::pair<double, Vector> loss_input_grad(std::span<const double> x, int label) const = 0;

  std::vector<int> classify(const Matrix& x) const;
};

/// Network with adapted parameters; the attack loss is the training loss on
/// one-hot targets.
class NetworkPredictor final : public Predictor {
 public:
  NetworkPredictor(NetworkSpec spec, ParamVector theta, LossKind loss);
  Matrix scores(const Matrix& x) const override;
  std::pair<double, Vector> loss_input_grad(std::span<const double> x, int label) const override;

 private:
  NetworkSpec spec_;
  ParamVector theta_;
  LossKind loss_;
};

/// Closed-form adapted predictor with squared loss against the centered
/// label encoding.
class KernelPredictor final : public Predictor {
 public:
  KernelPredictor(AdaptedPredictor adapted, std::size_t num_classes, bool freeze_kernel = false);
  Matrix scores(const Matrix& x) const override;
  std::pair<double, Vector> loss_input_grad(std::span<const double> x, int label) const override;

 private:
  AdaptedPredictor adapted_;
  std::size_t classes_;
  bool freeze_;
};

/// Scores −½‖x − c_k‖² with cross-entropy loss.
class NearestCenterPredictor final : public Predictor {
 public:
  explicit NearestCenterPredictor(Matrix centers);
  Matrix scores(const Matrix& x) const override;
  std::pair<double, Vector> loss_input_grad(std::span<const double> x, int label) const override;

 private:
  Matrix centers_;
};

/// Builds the adapted predictor for one task from its support set.
using PredictorFactory = std::function<std::unique_ptr<Predictor>(const Task&)>;

struct RobustResult {
  double clean_accuracy = 0.0;
  double robust_accuracy = 0.0;
  std::size_t queries = 0;
};

/// Adapts on each task's support set, attacks every query point, and reports
/// accuracy pooled over all queries. Tasks run on `workers` threads and are
/// reduced in task order.
RobustResult robust_accuracy(const PredictorFactory& factory, const std::vector<Task>& tasks,
                             const AttackConfig& config, std::size_t workers = 1);

struct EpsilonPoint {
  double epsilon = 0.0;
  RobustResult result;
};

struct EpsilonSweep {
  std::vector<EpsilonPoint> points;
  /// Share of adjacent ε pairs whose robust accuracy does not increase.
  double monotone_fraction = 1.0;
};

/// robust_accuracy over an ε grid (sorted ascending), adapting each task once.
EpsilonSweep epsilon_sweep(const PredictorFactory& factory, const std::vector<Task>& tasks,
                           std::vector<double> epsilons, const AttackConfig& base,
                           std::size_t workers = 1);

}  // namespace ntkmeta
