#include "circuitlab/numcore/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace clab {

namespace {

double evaluate(const ScalarFunction& f, const Matrix& x)
{
    Tape tape;
    const Tensor y = f(tape.constant(x));
    if (y.shape() != Shape{1, 1}) throw ShapeError("grad_check: function must return a 1x1 tensor");
    const double v = y.value()(0, 0);
    if (!std::isfinite(v)) throw NumericError("grad_check: non-finite function value");
    return v;
}

}  // namespace

GradCheckReport grad_check(const ScalarFunction& f, const Matrix& point, double step, double floor)
{
    if (!(step > 0.0)) throw std::invalid_argument("grad_check: step must be positive");

    GradCheckReport report;
    {
        Tape tape;
        const Tensor x = tape.variable(point);
        const Tensor y = f(x);
        report.analytic = backward(tape, y).grad(x);
    }

    report.numeric.resize(point.rows(), point.cols());
    report.relative_error.resize(point.rows(), point.cols());
    Matrix probe = point;
    for (Index r = 0; r < point.rows(); ++r) {
        for (Index c = 0; c < point.cols(); ++c) {
            const double orig = probe(r, c);
            probe(r, c) = orig + step;
            const double up = evaluate(f, probe);
            probe(r, c) = orig - step;
            const double down = evaluate(f, probe);
            probe(r, c) = orig;
            const double numeric = (up - down) / (2.0 * step);
            const double analytic = report.analytic(r, c);
            const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
            report.numeric(r, c) = numeric;
            report.relative_error(r, c) = std::abs(analytic - numeric) / denom;
        }
    }
    report.max_relative_error = report.relative_error.size() ? report.relative_error.maxCoeff() : 0.0;
    return report;
}

}  // namespace clab
