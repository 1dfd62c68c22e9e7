#pragma once

// Dense row-major matrices, stable reductions and a portable seeded RNG.

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace fgvc {

/// Raised when a numerical precondition is violated (non-finite input,
/// shape mismatch, empty reduction).
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised for invalid configuration values or malformed config files.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  /// Builds a matrix from nested rows; all rows must share one length.
  static Matrix from_rows(const std::vector<std::vector<double>>& rows);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }
  bool all_finite() const;

  Matrix& operator+=(const Matrix& o);
  Matrix& operator-=(const Matrix& o);
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

/// a · b
Matrix matmul(const Matrix& a, const Matrix& b);
/// a · bᵀ
Matrix matmul_bt(const Matrix& a, const Matrix& b);
/// aᵀ · b
Matrix matmul_at(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);

double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> v);
/// Frobenius norm.
double frobenius(const Matrix& m);

/// Throws NumericError naming `what` when any entry is NaN or infinite.
void require_finite(const Matrix& m, std::string_view what);

/// Row-wise softmax with max subtraction.
Matrix softmax_rows(const Matrix& m);

struct NormalizedRows {
  Matrix values;
  std::vector<bool> degenerate;  // rows left unchanged because norm < eps
  std::vector<double> norms;     // original row norms

  bool any_degenerate() const;
};

NormalizedRows l2_normalize_rows(const Matrix& m, double eps = 1e-12);

/// ln Σ exp(v_i), stable for large magnitudes. Entries equal to -inf are
/// allowed (they contribute nothing) as long as one entry is finite.
double log_sum_exp(std::span<const double> v);

/// Index of the largest entry; ties go to the lowest index.
std::size_t argmax(std::span<const double> v);

/// xoshiro256** generator seeded through splitmix64.
///
/// Uniform doubles take the top 53 bits of each output. Normal draws use the
/// Marsaglia polar method and cache the second variate of each accepted pair.
/// Child streams are derived from (seed, purpose tag) by hashing the tag with
/// 64-bit FNV-1a and mixing it into the seed with splitmix64.
class SeededRng {
 public:
  using State = std::array<std::uint64_t, 4>;

  explicit SeededRng(std::uint64_t seed = 0);

  /// Independent stream for a named purpose, e.g. derive(seed, "batches").
  static SeededRng derive(std::uint64_t seed, std::string_view tag, std::uint64_t index = 0);

  std::uint64_t next_u64();
  /// Uniform on [0, 1).
  double next_uniform();
  /// Uniform integer on [0, n); n > 0.
  std::uint64_t next_below(std::uint64_t n);
  double next_gaussian();
  /// Gamma(shape, 1) via Marsaglia-Tsang; shape < 1 uses the U^(1/shape) boost.
  double next_gamma(double shape);
  /// Beta(a, b) as X / (X + Y) with X ~ Gamma(a), Y ~ Gamma(b).
  double next_beta(double a, double b);

  /// Full generator state, including the cached normal variate.
  struct Snapshot {
    State state{};
    bool has_spare = false;
    double spare = 0.0;
    friend bool operator==(const Snapshot&, const Snapshot&) = default;
  };
  Snapshot snapshot() const { return {state_, has_spare_, spare_}; }
  void restore(const Snapshot& s);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = next_below(i);
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  State state_{};
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::uint64_t splitmix64(std::uint64_t& x);
std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 1469598103934665603ULL);

}  // namespace fgvc
