#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace sage {

using Vector = std::vector<double>;

// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix identity(std::size_t n);
  static Matrix diagonal(std::span<const double> diag);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  Vector column(std::size_t c) const;

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  Matrix transpose() const;

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// --- elementwise / BLAS-1 helpers --------------------------------------------

double dot(std::span<const double> a, std::span<const double> b);
double norm(std::span<const double> a);
// y += alpha * x
void axpy(double alpha, std::span<const double> x, std::span<double> y);
Vector add(std::span<const double> a, std::span<const double> b);
Vector sub(std::span<const double> a, std::span<const double> b);
Vector scale(std::span<const double> a, double s);
bool all_finite(std::span<const double> a);

// --- BLAS-2/3 ---------------------------------------------------------------

// A x
Vector matvec(const Matrix& a, std::span<const double> x);
// Aᵀ x
Vector matvec_transposed(const Matrix& a, std::span<const double> x);

// A B. Rows of the result are computed in parallel.
Matrix matmul(const Matrix& a, const Matrix& b);
// Straight triple loop; kept as the reference for matmul.
Matrix matmul_serial(const Matrix& a, const Matrix& b);
// Aᵀ A, parallel over output rows.
Matrix gram(const Matrix& a);
Matrix gram_serial(const Matrix& a);

Matrix operator-(const Matrix& a, const Matrix& b);
double max_abs(const Matrix& a);
double frobenius_norm(const Matrix& a);

// --- solvers -------------------------------------------------------------------

// argmin_x ‖A x − b‖₂. Normal equations with a Cholesky factorization; when
// the Gram matrix is numerically singular (condition estimate above
// kSingularCondition or a failed factorization) the minimum-norm solution is
// taken from the pseudo-inverse instead.
Vector solve_least_squares(const Matrix& a, std::span<const double> b);

// Column-wise least squares for a matrix right-hand side: argmin_X ‖A X − B‖_F.
Matrix solve_least_squares(const Matrix& a, const Matrix& b);

// Moore-Penrose pseudo-inverse via SVD; singular values below
// max(rows, cols) · eps · σ_max are treated as zero.
Matrix pseudo_inverse(const Matrix& a);

inline constexpr double kSingularCondition = 1e12;

// --- elementary nonlinear functions -------------------------------------------

Vector softmax(std::span<const double> logits);
Vector log_softmax(std::span<const double> logits);
double cross_entropy(std::span<const double> logits, std::size_t target);

// tanh-approximated GELU and its derivative.
double gelu(double x);
double gelu_grad(double x);

}  // namespace sage
