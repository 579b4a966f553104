#include "milfuse/matrix.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "milfuse/errors.hpp"

namespace milfuse {

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  Matrix m(rows.size(), rows.size() ? rows.begin()->size() : 0);
  std::size_t i = 0;
  for (const auto& r : rows) {
    if (r.size() != m.cols_)
      throw ShapeError("from_rows: ragged row " + std::to_string(i));
    std::copy(r.begin(), r.end(), m.row_ptr(i));
    ++i;
  }
  return m;
}

bool Matrix::all_finite() const {
  for (double x : data_)
    if (!std::isfinite(x)) return false;
  return true;
}

std::string Matrix::shape_str() const {
  return std::to_string(rows_) + "x" + std::to_string(cols_);
}

namespace {

void check_inner(const Matrix& a, const Matrix& b, std::size_t ak, std::size_t bk,
                 const char* op) {
  if (ak != bk)
    throw ShapeError(std::string(op) + ": incompatible shapes " + a.shape_str() +
                     " and " + b.shape_str());
}

// Dot product with an 8-lane split accumulator and a fixed reduction tree, so
// the summation order (and therefore every result bit) is the same no matter
// where it is called from. noinline keeps the compiler from fusing adjacent
// calls into one worse-scheduled body.
__attribute__((noinline)) double dot_split8(const double* x, const double* y, std::size_t k) {
  constexpr std::size_t L = 8;
  const std::size_t kv = k - k % L;
  double acc[L] = {0, 0, 0, 0, 0, 0, 0, 0};
  for (std::size_t l = 0; l < kv; l += L)
    for (std::size_t u = 0; u < L; ++u) acc[u] += x[l + u] * y[l + u];
  double tail = 0.0;
  for (std::size_t l = kv; l < k; ++l) tail += x[l] * y[l];
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) +
         ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail;
}

// c += a * b with b in row-major order; the j loop over contiguous rows of b
// is the vectorization target. Four output rows share each streamed b row;
// every output still accumulates its l-contributions in ascending order, so
// the blocking does not change a single result bit.
void accumulate_product(const Matrix& a, const Matrix& b, Matrix& c) {
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    double* c0 = c.row_ptr(i);
    double* c1 = c.row_ptr(i + 1);
    double* c2 = c.row_ptr(i + 2);
    double* c3 = c.row_ptr(i + 3);
    for (std::size_t l = 0; l < k; ++l) {
      const double a0 = a(i, l), a1 = a(i + 1, l), a2 = a(i + 2, l), a3 = a(i + 3, l);
      const double* brow = b.row_ptr(l);
      for (std::size_t j = 0; j < m; ++j) {
        const double bv = brow[j];
        c0[j] += a0 * bv;
        c1[j] += a1 * bv;
        c2[j] += a2 * bv;
        c3[j] += a3 * bv;
      }
    }
  }
  for (; i < n; ++i) {
    double* crow = c.row_ptr(i);
    const double* arow = a.row_ptr(i);
    for (std::size_t l = 0; l < k; ++l) {
      const double av = arow[l];
      const double* brow = b.row_ptr(l);
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace

Matrix matmul(const Matrix& a, const Matrix& b) {
  check_inner(a, b, a.cols(), b.rows(), "matmul");
  Matrix c(a.rows(), b.cols());
  accumulate_product(a, b, c);
  return c;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  check_inner(a, b, a.cols(), b.cols(), "matmul_nt");
  Matrix c(a.rows(), b.rows());
  const std::size_t n = a.rows(), k = a.cols(), m = b.rows();
  // Row-by-row dot products through dot_split8, so every output keeps the
  // same fixed summation order and results are identical run to run. Four
  // a-rows advance together so each b row is pulled from memory once per
  // block and served to the other three dots out of L1.
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const double* a0 = a.row_ptr(i);
    const double* a1 = a.row_ptr(i + 1);
    const double* a2 = a.row_ptr(i + 2);
    const double* a3 = a.row_ptr(i + 3);
    for (std::size_t j = 0; j < m; ++j) {
      const double* brow = b.row_ptr(j);
      c(i, j) = dot_split8(a0, brow, k);
      c(i + 1, j) = dot_split8(a1, brow, k);
      c(i + 2, j) = dot_split8(a2, brow, k);
      c(i + 3, j) = dot_split8(a3, brow, k);
    }
  }
  for (; i < n; ++i) {
    const double* arow = a.row_ptr(i);
    double* crow = c.row_ptr(i);
    for (std::size_t j = 0; j < m; ++j) crow[j] = dot_split8(arow, b.row_ptr(j), k);
  }
  return c;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  check_inner(a, b, a.rows(), b.rows(), "matmul_tn");
  Matrix c(a.cols(), b.cols());
  const std::size_t k = a.rows(), n = a.cols(), m = b.cols();
  // Each output row is finished in one pass so it stays cache-resident while
  // the k (typically small) contributions accumulate into it. Four output
  // rows share each streamed b row; per-output accumulation stays in
  // ascending-l order, so results match the single-row path bit for bit.
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    double* c0 = c.row_ptr(i);
    double* c1 = c.row_ptr(i + 1);
    double* c2 = c.row_ptr(i + 2);
    double* c3 = c.row_ptr(i + 3);
    for (std::size_t l = 0; l < k; ++l) {
      const double* al = a.row_ptr(l) + i;
      const double a0 = al[0], a1 = al[1], a2 = al[2], a3 = al[3];
      const double* brow = b.row_ptr(l);
      for (std::size_t j = 0; j < m; ++j) {
        const double bv = brow[j];
        c0[j] += a0 * bv;
        c1[j] += a1 * bv;
        c2[j] += a2 * bv;
        c3[j] += a3 * bv;
      }
    }
  }
  for (; i < n; ++i) {
    double* crow = c.row_ptr(i);
    for (std::size_t l = 0; l < k; ++l) {
      const double av = a.row_ptr(l)[i];
      const double* brow = b.row_ptr(l);
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  // Tiled to keep both access patterns cache-resident.
  constexpr std::size_t B = 32;
  const std::size_t n = a.rows(), m = a.cols();
  for (std::size_t ib = 0; ib < n; ib += B) {
    const std::size_t imax = std::min(ib + B, n);
    for (std::size_t jb = 0; jb < m; jb += B) {
      const std::size_t jmax = std::min(jb + B, m);
      for (std::size_t i = ib; i < imax; ++i) {
        const double* arow = a.row_ptr(i);
        for (std::size_t j = jb; j < jmax; ++j) t(j, i) = arow[j];
      }
    }
  }
  return t;
}

void add_inplace(Matrix& a, const Matrix& b) {
  check_inner(a, b, a.size(), b.size(), "add_inplace");
  double* pa = a.data();
  const double* pb = b.data();
  for (std::size_t i = 0; i < a.size(); ++i) pa[i] += pb[i];
}

void axpy_inplace(Matrix& a, double s, const Matrix& b) {
  check_inner(a, b, a.size(), b.size(), "axpy_inplace");
  double* pa = a.data();
  const double* pb = b.data();
  for (std::size_t i = 0; i < a.size(); ++i) pa[i] += s * pb[i];
}

void scale_inplace(Matrix& a, double s) {
  double* pa = a.data();
  for (std::size_t i = 0; i < a.size(); ++i) pa[i] *= s;
}

Matrix hadamard(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError("hadamard: incompatible shapes " + a.shape_str() + " and " +
                     b.shape_str());
  Matrix c(a.rows(), a.cols());
  const double* pa = a.data();
  const double* pb = b.data();
  double* pc = c.data();
  for (std::size_t i = 0; i < a.size(); ++i) pc[i] = pa[i] * pb[i];
  return c;
}

double max_abs(const Matrix& a) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a.data()[i]));
  return m;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  check_inner(a, b, a.size(), b.size(), "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::fabs(a.data()[i] - b.data()[i]));
  return m;
}

double sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

std::vector<double> softmax(std::span<const double> v) {
  if (v.empty()) throw ContractError("softmax: empty input");
  double mx = v[0];
  for (double x : v) {
    if (!std::isfinite(x)) throw NumericError("softmax: non-finite input entry");
    mx = std::max(mx, x);
  }
  std::vector<double> out(v.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp(v[i] - mx);
    sum += out[i];
  }
  for (double& x : out) x /= sum;
  return out;
}

void softmax_rows_inplace(Matrix& m) {
  for (std::size_t i = 0; i < m.rows(); ++i) {
    double* r = m.row_ptr(i);
    double mx = r[0];
    for (std::size_t j = 1; j < m.cols(); ++j) mx = std::max(mx, r[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < m.cols(); ++j) {
      r[j] = std::exp(r[j] - mx);
      sum += r[j];
    }
    for (std::size_t j = 0; j < m.cols(); ++j) r[j] /= sum;
  }
}

}  // namespace milfuse
