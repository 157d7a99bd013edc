#pragma once

#include "circuitlab/numcore/tape.hpp"

#include <functional>

namespace clab {

/// Scalar-valued function of one tensor; it must build its graph on x's tape.
using ScalarFunction = std::function<Tensor(const Tensor& x)>;

struct GradCheckReport {
    Matrix analytic;
    Matrix numeric;
    Matrix relative_error;
    double max_relative_error = 0.0;
};

/// Compares backward() against central differences. The relative error of a
/// coordinate is |a - n| / max(|a|, |n|, floor); the floor keeps coordinates
/// whose true derivative is zero from dividing rounding noise by ~0.
GradCheckReport grad_check(const ScalarFunction& f, const Matrix& point, double step = 1e-5, double floor = 1e-5);

}  // namespace clab
