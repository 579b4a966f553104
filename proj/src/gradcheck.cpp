#include "milfuse/gradcheck.hpp"

#include <cmath>

#include "milfuse/errors.hpp"

namespace milfuse {

Matrix finite_diff_grad(const std::function<double(const Matrix&)>& f, Matrix x,
                        double h) {
  if (h <= 0.0) throw ContractError("finite_diff_grad: h must be > 0");
  Matrix g(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (std::size_t j = 0; j < x.cols(); ++j) {
      const double orig = x(i, j);
      x(i, j) = orig + h;
      const double fp = f(x);
      x(i, j) = orig - h;
      const double fm = f(x);
      x(i, j) = orig;
      if (!std::isfinite(fp) || !std::isfinite(fm))
        throw NumericError("finite_diff_grad: non-finite f at entry (" +
                           std::to_string(i) + "," + std::to_string(j) + ")");
      g(i, j) = (fp - fm) / (2.0 * h);
    }
  }
  return g;
}

}  // namespace milfuse
