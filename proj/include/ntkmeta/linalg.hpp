#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace ntkmeta {

using Vector = std::vector<double>;

/// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
  Matrix(std::initializer_list<std::initializer_list<double>> rows);

  static Matrix identity(std::size_t n);
  static Matrix diagonal(std::span<const double> diag);
  static Matrix column(std::span<const double> values);
  static Matrix row_vector(std::span<const double> values);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  bool is_square() const noexcept { return rows_ == cols_; }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  /// Copies rows [begin, begin + count) into a new matrix.
  Matrix row_block(std::size_t begin, std::size_t count) const;

  std::string shape_string() const;

  Matrix& operator+=(const Matrix& other);
  Matrix& operator-=(const Matrix& other);
  Matrix& operator*=(double s);

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

Matrix operator+(Matrix a, const Matrix& b);
Matrix operator-(Matrix a, const Matrix& b);
Matrix operator*(Matrix a, double s);
Matrix operator*(double s, Matrix a);

Matrix matmul(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);
Vector matvec(const Matrix& a, std::span<const double> x);
/// Stacks the rows of `a` on top of the rows of `b`.
Matrix vstack(const Matrix& a, const Matrix& b);
/// (a + aᵀ) / 2.
Matrix symmetrize(const Matrix& a);

double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> v);
double norm_inf(std::span<const double> v);
/// Induced 1-norm: maximum absolute column sum.
double norm1(const Matrix& a);
/// Induced ∞-norm: maximum absolute row sum.
double norm_inf(const Matrix& a);
double max_abs(const Matrix& a);
double trace(const Matrix& a);
bool all_finite(std::span<const double> v);

void axpy(double alpha, std::span<const double> x, std::span<double> y);

/// Cholesky factor L (lower triangular) of a + jitter·I.
class Cholesky {
 public:
  /// Returns false (leaving `*this` unusable) when a pivot is not strictly
  /// positive relative to the diagonal scale; `min_pivot` receives the
  /// smallest pivot seen before stopping.
  bool factor(const Matrix& a, double jitter, double& min_pivot);

  Matrix solve(const Matrix& b) const;
  Vector solve(std::span<const double> b) const;
  std::size_t dim() const noexcept { return lower_.rows(); }
  const Matrix& lower() const noexcept { return lower_; }

 private:
  Matrix lower_;
};

struct SpdOptions {
  /// Largest jitter tried, relative to the mean absolute diagonal.
  double max_jitter_rel = 1e-2;
};

/// Factorization of a + jitter·I after jitter escalation.
struct SpdFactor {
  Cholesky chol;
  double jitter = 0.0;
  int escalations = 0;
};

struct SpdSolution {
  Matrix x;
  double jitter = 0.0;
  int escalations = 0;
};

/// Factors a + jitter·I, escalating jitter ×10 on failure until the cap.
/// Throws KernelSingularError when the cap is reached.
SpdFactor factor_spd(const Matrix& a, double jitter, const SpdOptions& options = {});
SpdSolution solve_spd(const Matrix& a, const Matrix& b, double jitter,
                      const SpdOptions& options = {});

/// Solves a·x = b by LU with partial pivoting. Returns false when a pivot is
/// numerically zero.
bool lu_solve(const Matrix& a, const Matrix& b, Matrix& x);

/// Diagonal [order/order] Padé approximant of e^a, order ∈ {1, 2}.
Matrix pade_expm(const Matrix& a, int order);

/// Default scaling threshold for expm_scaled: ‖a‖₁ / 2^s is pushed below this.
double default_scaling_threshold(int order);

/// Scaling-and-squaring around pade_expm.
Matrix expm_scaled(const Matrix& a, int order, double threshold);
Matrix expm_scaled(const Matrix& a, int order);

/// Reference matrix exponential used to check the approximants.
Matrix expm_oracle(const Matrix& a);

/// Largest |λ| of a symmetric matrix by power iteration.
double spectral_radius_sym(const Matrix& a, int iterations = 500, double tol = 1e-12);

/// Largest singular value by power iteration on aᵀa.
double spectral_norm(const Matrix& a, int iterations = 50, double tol = 1e-8);

}  // namespace ntkmeta
