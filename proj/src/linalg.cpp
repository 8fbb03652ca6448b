#include "sage/linalg.hpp"

#include <Eigen/Dense>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>

#include "sage/error.hpp"

namespace sage {

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  require(data_.size() == rows_ * cols_, "invalid_argument", "matrix data length does not match shape");
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

Vector Matrix::column(std::size_t c) const {
  Vector out(rows_);
  for (std::size_t r = 0; r < rows_; ++r) out[r] = (*this)(r, c);
  return out;
}

Matrix Matrix::transpose() const {
  Matrix t(cols_, rows_);
  for (std::size_t r = 0; r < rows_; ++r)
    for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
  return t;
}

double dot(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size(), "invalid_argument", "dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  require(x.size() == y.size(), "invalid_argument", "axpy: length mismatch");
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

Vector add(std::span<const double> a, std::span<const double> b) {
  Vector out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  return out;
}

Vector sub(std::span<const double> a, std::span<const double> b) {
  Vector out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
  return out;
}

Vector scale(std::span<const double> a, double s) {
  Vector out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * s;
  return out;
}

bool all_finite(std::span<const double> a) {
  return std::all_of(a.begin(), a.end(), [](double v) { return std::isfinite(v); });
}

Vector matvec(const Matrix& a, std::span<const double> x) {
  require(x.size() == a.cols(), "invalid_argument", "matvec: dimension mismatch");
  Vector out(a.rows());
  for (std::size_t r = 0; r < a.rows(); ++r) out[r] = dot(a.row(r), x);
  return out;
}

Vector matvec_transposed(const Matrix& a, std::span<const double> x) {
  require(x.size() == a.rows(), "invalid_argument", "matvec_transposed: dimension mismatch");
  Vector out(a.cols(), 0.0);
  for (std::size_t r = 0; r < a.rows(); ++r) axpy(x[r], a.row(r), out);
  return out;
}

namespace {

void matmul_row(const Matrix& a, const Matrix& b, Matrix& out, std::size_t i) {
  auto dst = out.row(i);
  for (std::size_t k = 0; k < a.cols(); ++k) {
    const double aik = a(i, k);
    if (aik == 0.0) continue;
    const auto src = b.row(k);
    for (std::size_t j = 0; j < b.cols(); ++j) dst[j] += aik * src[j];
  }
}

void gram_row(const Matrix& a, Matrix& out, std::size_t i) {
  for (std::size_t j = 0; j < a.cols(); ++j) {
    double s = 0.0;
    for (std::size_t r = 0; r < a.rows(); ++r) s += a(r, i) * a(r, j);
    out(i, j) = s;
  }
}

}  // namespace

Matrix matmul(const Matrix& a, const Matrix& b) {
  require(a.cols() == b.rows(), "invalid_argument", "matmul: inner dimensions differ");
  Matrix out(a.rows(), b.cols());
  const auto n = static_cast<std::ptrdiff_t>(a.rows());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i) matmul_row(a, b, out, static_cast<std::size_t>(i));
  return out;
}

Matrix matmul_serial(const Matrix& a, const Matrix& b) {
  require(a.cols() == b.rows(), "invalid_argument", "matmul: inner dimensions differ");
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      out(i, j) = s;
    }
  return out;
}

Matrix gram(const Matrix& a) {
  Matrix out(a.cols(), a.cols());
  const auto n = static_cast<std::ptrdiff_t>(a.cols());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i) gram_row(a, out, static_cast<std::size_t>(i));
  return out;
}

Matrix gram_serial(const Matrix& a) {
  Matrix out(a.cols(), a.cols());
  for (std::size_t i = 0; i < a.cols(); ++i) gram_row(a, out, i);
  return out;
}

Matrix operator-(const Matrix& a, const Matrix& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "invalid_argument", "matrix shape mismatch");
  Matrix out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.data().size(); ++i) out.data()[i] = a.data()[i] - b.data()[i];
  return out;
}

double max_abs(const Matrix& a) {
  double m = 0.0;
  for (double v : a.data()) m = std::max(m, std::abs(v));
  return m;
}

double frobenius_norm(const Matrix& a) { return norm(a.data()); }

namespace {

using EigenMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Eigen::Map<const EigenMatrix> as_eigen(const Matrix& a) {
  return {a.data().data(), static_cast<Eigen::Index>(a.rows()), static_cast<Eigen::Index>(a.cols())};
}

// In-place lower Cholesky of a symmetric positive definite matrix. Returns an
// estimate of the condition number ((max L_ii / min L_ii)^2), or nullopt if a
// non-positive pivot shows up.
std::optional<double> cholesky(Matrix& g) {
  const std::size_t n = g.rows();
  double max_pivot = 0.0;
  double min_pivot = std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < n; ++j) {
    double d = g(j, j);
    for (std::size_t k = 0; k < j; ++k) d -= g(j, k) * g(j, k);
    if (!(d > 0.0)) return std::nullopt;
    const double ljj = std::sqrt(d);
    g(j, j) = ljj;
    max_pivot = std::max(max_pivot, ljj);
    min_pivot = std::min(min_pivot, ljj);
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = g(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= g(i, k) * g(j, k);
      g(i, j) = s / ljj;
    }
  }
  const double ratio = max_pivot / min_pivot;
  return ratio * ratio;
}

void cholesky_solve(const Matrix& l, std::span<double> x) {
  const std::size_t n = l.rows();
  for (std::size_t i = 0; i < n; ++i) {
    double s = x[i];
    for (std::size_t k = 0; k < i; ++k) s -= l(i, k) * x[k];
    x[i] = s / l(i, i);
  }
  for (std::size_t i = n; i-- > 0;) {
    double s = x[i];
    for (std::size_t k = i + 1; k < n; ++k) s -= l(k, i) * x[k];
    x[i] = s / l(i, i);
  }
}

void check_inputs(const Matrix& a, std::span<const double> b) {
  require(a.rows() >= 1 && a.cols() >= 1, "invalid_argument", "least squares: empty system");
  require(all_finite(a.data()), "non_finite", "least squares: matrix has non-finite entries");
  require(all_finite(b), "non_finite", "least squares: right-hand side has non-finite entries");
}

}  // namespace

Matrix solve_least_squares(const Matrix& a, const Matrix& b) {
  check_inputs(a, b.data());
  require(b.rows() == a.rows(), "invalid_argument", "least squares: right-hand side has wrong row count");
  Matrix l = gram(a);
  const auto cond = cholesky(l);
  Matrix x(a.cols(), b.cols());
  if (!cond || *cond > kSingularCondition) {
    return matmul(pseudo_inverse(a), b);
  }
  for (std::size_t c = 0; c < b.cols(); ++c) {
    Vector rhs = matvec_transposed(a, b.column(c));
    cholesky_solve(l, rhs);
    for (std::size_t r = 0; r < a.cols(); ++r) x(r, c) = rhs[r];
  }
  return x;
}

Vector solve_least_squares(const Matrix& a, std::span<const double> b) {
  check_inputs(a, b);
  require(b.size() == a.rows(), "invalid_argument", "least squares: right-hand side has wrong length");
  Matrix l = gram(a);
  const auto cond = cholesky(l);
  if (!cond || *cond > kSingularCondition) {
    return matvec(pseudo_inverse(a), b);
  }
  Vector x = matvec_transposed(a, b);
  cholesky_solve(l, x);
  return x;
}

Matrix pseudo_inverse(const Matrix& a) {
  require(all_finite(a.data()), "non_finite", "pseudo_inverse: matrix has non-finite entries");
  if (a.rows() == 0 || a.cols() == 0) return Matrix(a.cols(), a.rows());
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(as_eigen(a), Eigen::ComputeThinU | Eigen::ComputeThinV);
  const auto& s = svd.singularValues();
  const double tol = static_cast<double>(std::max(a.rows(), a.cols())) *
                     std::numeric_limits<double>::epsilon() * (s.size() > 0 ? s(0) : 0.0);
  Eigen::VectorXd inv = s;
  for (Eigen::Index i = 0; i < s.size(); ++i) inv(i) = s(i) > tol ? 1.0 / s(i) : 0.0;
  const Eigen::MatrixXd p = svd.matrixV() * inv.asDiagonal() * svd.matrixU().transpose();
  Matrix out(a.cols(), a.rows());
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c)
      out(r, c) = p(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
  return out;
}

Vector softmax(std::span<const double> logits) {
  Vector out(logits.size());
  if (logits.empty()) return out;
  const double m = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - m);
    z += out[i];
  }
  for (double& v : out) v /= z;
  return out;
}

Vector log_softmax(std::span<const double> logits) {
  Vector out(logits.size());
  if (logits.empty()) return out;
  const double m = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double v : logits) z += std::exp(v - m);
  const double lz = m + std::log(z);
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lz;
  return out;
}

double cross_entropy(std::span<const double> logits, std::size_t target) {
  require(target < logits.size(), "invalid_argument", "cross_entropy: target index out of range");
  const double m = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double v : logits) z += std::exp(v - m);
  return std::max(0.0, m + std::log(z) - logits[target]);
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
}

double gelu(double x) {
  const double u = kGeluC * (x + 0.044715 * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(u));
}

double gelu_grad(double x) {
  const double u = kGeluC * (x + 0.044715 * x * x * x);
  const double t = std::tanh(u);
  const double du = kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

}  // namespace sage
