#include "ntkmeta/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "ntkmeta/error.hpp"

namespace ntkmeta {

namespace {

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw Error(ErrorCode::dimension_mismatch,
                std::string(op) + ": shapes " + a.shape_string() + " and " + b.shape_string());
  }
}

void require_square(const Matrix& a, const char* op) {
  if (!a.is_square()) {
    throw Error(ErrorCode::dimension_mismatch, std::string(op) + ": expected square matrix, got " +
                                                   a.shape_string());
  }
}

double mean_abs_diag(const Matrix& a) {
  if (a.rows() == 0) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < a.rows(); ++i) s += std::abs(a(i, i));
  return s / static_cast<double>(a.rows());
}

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw Error(ErrorCode::dimension_mismatch,
                "matrix data length " + std::to_string(data_.size()) + " does not match " +
                    shape_string());
  }
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows) {
  rows_ = rows.size();
  cols_ = rows_ == 0 ? 0 : rows.begin()->size();
  data_.reserve(rows_ * cols_);
  for (const auto& r : rows) {
    if (r.size() != cols_) throw Error(ErrorCode::dimension_mismatch, "ragged matrix literal");
    data_.insert(data_.end(), r.begin(), r.end());
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::diagonal(std::span<const double> diag) {
  Matrix m(diag.size(), diag.size());
  for (std::size_t i = 0; i < diag.size(); ++i) m(i, i) = diag[i];
  return m;
}

Matrix Matrix::column(std::span<const double> values) {
  return Matrix(values.size(), 1, std::vector<double>(values.begin(), values.end()));
}

Matrix Matrix::row_vector(std::span<const double> values) {
  return Matrix(1, values.size(), std::vector<double>(values.begin(), values.end()));
}

Matrix Matrix::row_block(std::size_t begin, std::size_t count) const {
  if (begin + count > rows_) {
    throw Error(ErrorCode::dimension_mismatch, "row_block out of range for " + shape_string());
  }
  auto first = data_.begin() + static_cast<std::ptrdiff_t>(begin * cols_);
  return Matrix(count, cols_,
                std::vector<double>(first, first + static_cast<std::ptrdiff_t>(count * cols_)));
}

std::string Matrix::shape_string() const {
  std::ostringstream os;
  os << '(' << rows_ << "x" << cols_ << ')';
  return os.str();
}

Matrix& Matrix::operator+=(const Matrix& other) {
  require_same_shape(*this, other, "add");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

Matrix& Matrix::operator-=(const Matrix& other) {
  require_same_shape(*this, other, "subtract");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
  return *this;
}

Matrix& Matrix::operator*=(double s) {
  for (double& v : data_) v *= s;
  return *this;
}

Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
Matrix operator*(Matrix a, double s) { return a *= s; }
Matrix operator*(double s, Matrix a) { return a *= s; }

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw Error(ErrorCode::dimension_mismatch,
                "matmul: shapes " + a.shape_string() + " and " + b.shape_string());
  }
  Matrix c(a.rows(), b.cols());
  const std::size_t n = b.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double* ci = c.row(i).data();
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      const double* bk = b.row(k).data();
      for (std::size_t j = 0; j < n; ++j) ci[j] += aik * bk[j];
    }
  }
  return c;
}

Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

Vector matvec(const Matrix& a, std::span<const double> x) {
  if (a.cols() != x.size()) {
    throw Error(ErrorCode::dimension_mismatch,
                "matvec: matrix " + a.shape_string() + " and vector of length " +
                    std::to_string(x.size()));
  }
  Vector y(a.rows(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i) y[i] = dot(a.row(i), x);
  return y;
}

Matrix vstack(const Matrix& a, const Matrix& b) {
  if (a.empty()) return b;
  if (b.empty()) return a;
  if (a.cols() != b.cols()) {
    throw Error(ErrorCode::dimension_mismatch,
                "vstack: shapes " + a.shape_string() + " and " + b.shape_string());
  }
  std::vector<double> data(a.values());
  data.insert(data.end(), b.values().begin(), b.values().end());
  return Matrix(a.rows() + b.rows(), a.cols(), std::move(data));
}

Matrix symmetrize(const Matrix& a) {
  require_square(a, "symmetrize");
  Matrix s(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    s(i, i) = a(i, i);
    for (std::size_t j = i + 1; j < a.cols(); ++j) {
      const double v = 0.5 * (a(i, j) + a(j, i));
      s(i, j) = v;
      s(j, i) = v;
    }
  }
  return s;
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm2(std::span<const double> v) { return std::sqrt(dot(v, v)); }

double norm_inf(std::span<const double> v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

double norm1(const Matrix& a) {
  double best = 0.0;
  for (std::size_t j = 0; j < a.cols(); ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.rows(); ++i) s += std::abs(a(i, j));
    best = std::max(best, s);
  }
  return best;
}

double norm_inf(const Matrix& a) {
  double best = 0.0;
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double s = 0.0;
    for (double v : a.row(i)) s += std::abs(v);
    best = std::max(best, s);
  }
  return best;
}

double max_abs(const Matrix& a) { return norm_inf(a.data()); }

double trace(const Matrix& a) {
  require_square(a, "trace");
  double s = 0.0;
  for (std::size_t i = 0; i < a.rows(); ++i) s += a(i, i);
  return s;
}

bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

bool Cholesky::factor(const Matrix& a, double jitter, double& min_pivot) {
  require_square(a, "cholesky");
  const std::size_t n = a.rows();
  double scale = 0.0;
  for (std::size_t i = 0; i < n; ++i) scale = std::max(scale, std::abs(a(i, i) + jitter));
  const double floor = std::numeric_limits<double>::epsilon() * static_cast<double>(n) * scale;

  lower_ = Matrix(n, n);
  min_pivot = std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < n; ++j) {
    double d = a(j, j) + jitter;
    const double* lj = lower_.row(j).data();
    for (std::size_t k = 0; k < j; ++k) d -= lj[k] * lj[k];
    min_pivot = std::min(min_pivot, d);
    if (!(d > floor)) {
      lower_ = Matrix();
      return false;
    }
    const double root = std::sqrt(d);
    lower_(j, j) = root;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = a(i, j);
      const double* li = lower_.row(i).data();
      for (std::size_t k = 0; k < j; ++k) s -= li[k] * lj[k];
      lower_(i, j) = s / root;
    }
  }
  return true;
}

Matrix Cholesky::solve(const Matrix& b) const {
  const std::size_t n = dim();
  if (b.rows() != n) {
    throw Error(ErrorCode::dimension_mismatch, "cholesky solve: factor of order " +
                                                   std::to_string(n) + " and rhs " +
                                                   b.shape_string());
  }
  Matrix x = b;
  const std::size_t m = b.cols();
  // Forward substitution L y = b.
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < i; ++k) {
      const double lik = lower_(i, k);
      for (std::size_t c = 0; c < m; ++c) x(i, c) -= lik * x(k, c);
    }
    for (std::size_t c = 0; c < m; ++c) x(i, c) /= lower_(i, i);
  }
  // Back substitution Lᵀ x = y.
  for (std::size_t ii = n; ii-- > 0;) {
    for (std::size_t k = ii + 1; k < n; ++k) {
      const double lki = lower_(k, ii);
      for (std::size_t c = 0; c < m; ++c) x(ii, c) -= lki * x(k, c);
    }
    for (std::size_t c = 0; c < m; ++c) x(ii, c) /= lower_(ii, ii);
  }
  return x;
}

Vector Cholesky::solve(std::span<const double> b) const {
  return solve(Matrix::column(b)).values();
}

SpdFactor factor_spd(const Matrix& a, double jitter, const SpdOptions& options) {
  require_square(a, "solve_spd");
  if (!(jitter >= 0.0)) throw Error(ErrorCode::invalid_argument, "solve_spd: jitter must be >= 0");
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = i + 1; j < a.cols(); ++j) {
      if (std::abs(a(i, j) - a(j, i)) > 1e-10) {
        throw Error(ErrorCode::invalid_argument, "solve_spd: matrix is not symmetric");
      }
    }
  }
  double scale = mean_abs_diag(a);
  if (scale == 0.0) scale = 1.0;
  const double cap = options.max_jitter_rel * scale;

  SpdFactor out;
  out.jitter = jitter;
  double smallest = std::numeric_limits<double>::infinity();
  while (true) {
    double pivot = 0.0;
    if (out.chol.factor(a, out.jitter, pivot)) return out;
    smallest = std::min(smallest, pivot);
    if (out.jitter >= cap) break;
    out.jitter = out.jitter > 0.0 ? std::min(out.jitter * 10.0, cap) : 1e-12 * scale;
    ++out.escalations;
  }
  std::ostringstream os;
  os << "SPD factorization failed at jitter cap " << out.jitter << "; smallest pivot " << smallest;
  throw KernelSingularError(os.str(), smallest, out.jitter);
}

SpdSolution solve_spd(const Matrix& a, const Matrix& b, double jitter, const SpdOptions& options) {
  if (b.rows() != a.rows()) {
    throw Error(ErrorCode::dimension_mismatch,
                "solve_spd: shapes " + a.shape_string() + " and " + b.shape_string());
  }
  SpdFactor f = factor_spd(a, jitter, options);
  return {f.chol.solve(b), f.jitter, f.escalations};
}

bool lu_solve(const Matrix& a, const Matrix& b, Matrix& x) {
  require_square(a, "lu_solve");
  if (b.rows() != a.rows()) {
    throw Error(ErrorCode::dimension_mismatch,
                "lu_solve: shapes " + a.shape_string() + " and " + b.shape_string());
  }
  const std::size_t n = a.rows();
  const std::size_t m = b.cols();
  Matrix lu = a;
  x = b;
  const double tiny = std::numeric_limits<double>::epsilon() * std::max(norm_inf(a), 1e-300);
  for (std::size_t k = 0; k < n; ++k) {
    std::size_t p = k;
    for (std::size_t i = k + 1; i < n; ++i)
      if (std::abs(lu(i, k)) > std::abs(lu(p, k))) p = i;
    if (!(std::abs(lu(p, k)) > tiny)) return false;
    if (p != k) {
      for (std::size_t j = 0; j < n; ++j) std::swap(lu(k, j), lu(p, j));
      for (std::size_t j = 0; j < m; ++j) std::swap(x(k, j), x(p, j));
    }
    for (std::size_t i = k + 1; i < n; ++i) {
      const double f = lu(i, k) / lu(k, k);
      if (f == 0.0) continue;
      for (std::size_t j = k + 1; j < n; ++j) lu(i, j) -= f * lu(k, j);
      for (std::size_t j = 0; j < m; ++j) x(i, j) -= f * x(k, j);
    }
  }
  for (std::size_t ii = n; ii-- > 0;) {
    for (std::size_t j = 0; j < m; ++j) {
      double s = x(ii, j);
      for (std::size_t k = ii + 1; k < n; ++k) s -= lu(ii, k) * x(k, j);
      x(ii, j) = s / lu(ii, ii);
    }
  }
  return true;
}

Matrix pade_expm(const Matrix& a, int order) {
  require_square(a, "pade_expm");
  if (order != 1 && order != 2) {
    throw Error(ErrorCode::invalid_argument, "pade_expm: order must be 1 or 2");
  }
  const std::size_t n = a.rows();
  Matrix num = Matrix::identity(n);
  Matrix den = Matrix::identity(n);
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double half = a.data()[i] / 2.0;
    num.data()[i] += half;
    den.data()[i] -= half;
  }
  if (order == 2) {
    const Matrix sq = matmul(a, a);
    for (std::size_t i = 0; i < sq.size(); ++i) {
      const double term = sq.data()[i] / 12.0;
      num.data()[i] += term;
      den.data()[i] += term;
    }
  }
  Matrix out;
  if (!lu_solve(den, num, out) || !all_finite(out.data())) {
    throw Error(ErrorCode::pade_singular,
                "pade_expm: denominator is singular; scale the argument (expm_scaled) first");
  }
  return out;
}

double default_scaling_threshold(int order) {
  // Keeps ‖A‖·θ^(2·order)·c below 1e-10 for ‖A‖₁ ≤ 100.
  return order == 1 ? std::ldexp(1.0, -16) : std::ldexp(1.0, -9);
}

Matrix expm_scaled(const Matrix& a, int order, double threshold) {
  require_square(a, "expm_scaled");
  if (!(threshold > 0.0)) throw Error(ErrorCode::invalid_argument, "expm_scaled: threshold <= 0");
  const double norm = norm1(a);
  int squarings = 0;
  while (std::ldexp(norm, -squarings) > threshold) ++squarings;
  Matrix r = pade_expm(std::ldexp(1.0, -squarings) * a, order);
  for (int i = 0; i < squarings; ++i) r = matmul(r, r);
  return r;
}

Matrix expm_scaled(const Matrix& a, int order) {
  return expm_scaled(a, order, default_scaling_threshold(order));
}

Matrix expm_oracle(const Matrix& a) { return expm_scaled(a, 2, default_scaling_threshold(2)); }

double spectral_radius_sym(const Matrix& a, int iterations, double tol) {
  require_square(a, "spectral_radius_sym");
  const std::size_t n = a.rows();
  if (n == 0) return 0.0;
  Vector v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = 1.0 + 0.1 * static_cast<double>(i % 7);
  double lambda = 0.0;
  for (int it = 0; it < iterations; ++it) {
    const double nv = norm2(v);
    if (nv == 0.0) return 0.0;
    for (double& x : v) x /= nv;
    // Iterate with A² so that ±λ pairs still converge.
    Vector w = matvec(a, matvec(a, v));
    const double next = std::sqrt(std::abs(dot(v, w)));
    const bool done = std::abs(next - lambda) <= tol * std::max(1.0, next);
    lambda = next;
    v = std::move(w);
    if (done && it > 2) break;
  }
  return lambda;
}

double spectral_norm(const Matrix& a, int iterations, double tol) {
  if (a.empty()) return 0.0;
  const Matrix at = transpose(a);
  Vector v(a.cols());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = 1.0 + 0.1 * static_cast<double>(i % 7);
  double sigma = 0.0;
  for (int it = 0; it < iterations; ++it) {
    const double nv = norm2(v);
    if (nv == 0.0) return 0.0;
    for (double& x : v) x /= nv;
    const Vector av = matvec(a, v);
    const double next = norm2(av);
    Vector w = matvec(at, av);
    const bool done = std::abs(next - sigma) <= tol * std::max(1.0, next);
    sigma = next;
    v = std::move(w);
    if (done && it > 2) break;
  }
  return sigma;
}

}  // namespace ntkmeta
