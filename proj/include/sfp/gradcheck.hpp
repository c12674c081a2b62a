#pragma once

#include <cmath>
#include <random>
#include <stdexcept>

#include "sfp/matrix.hpp"

namespace sfp {

struct FdReport {
    double max_rel_err = 0.0;
    double max_abs_grad = 0.0;
    std::size_t samples = 0;
};

inline double relative_error(double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

// Central-difference check of an analytic gradient at 64-bit precision.
// `loss(theta)` must be a deterministic scalar; `grad(theta)` is the engine's
// gradient for the same loss. Non-determinism across repeated evaluation is
// an oracle error, not a gradient failure.
template <class LossFn, class GradFn>
inline FdReport finite_diff_check(LossFn&& loss, GradFn&& grad, Matrix<double> theta, double step,
                                  std::size_t samples, std::mt19937_64& rng) {
    const double l0 = loss(theta);
    const double l1 = loss(theta);
    if (std::isnan(l0)) throw std::runtime_error("finite_diff_check: loss is NaN");
    if (l0 != l1) throw std::runtime_error("finite_diff_check: non-deterministic loss");

    const Matrix<double> analytic = grad(theta);
    if (!analytic.same_shape(theta))
        throw std::logic_error("finite_diff_check: gradient shape mismatch");

    FdReport report;
    std::uniform_int_distribution<std::size_t> pick(0, theta.size() - 1);
    const bool sweep = samples >= theta.size();
    const std::size_t count = sweep ? theta.size() : samples;
    for (std::size_t s = 0; s < count; ++s) {
        const std::size_t i = sweep ? s : pick(rng);
        const double saved = theta.data[i];
        theta.data[i] = saved + step;
        const double up = loss(theta);
        theta.data[i] = saved - step;
        const double down = loss(theta);
        theta.data[i] = saved;
        const double fd = (up - down) / (2.0 * step);
        report.max_rel_err = std::max(report.max_rel_err, relative_error(analytic.data[i], fd));
        report.max_abs_grad = std::max(report.max_abs_grad, std::abs(analytic.data[i]));
        ++report.samples;
    }
    return report;
}

}  // namespace sfp
