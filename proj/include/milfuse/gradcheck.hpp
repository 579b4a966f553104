#pragma once

#include <functional>

#include "milfuse/matrix.hpp"

namespace milfuse {

/// Central-difference gradient of a scalar function of a matrix:
/// g(i,j) = (f(x + h e_ij) - f(x - h e_ij)) / (2h).
/// Throws NumericError if any evaluation is non-finite.
Matrix finite_diff_grad(const std::function<double(const Matrix&)>& f, Matrix x,
                        double h = 1e-4);

}  // namespace milfuse
