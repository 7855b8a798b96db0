#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "klab/array.hpp"
#include "klab/autodiff.hpp"

namespace klab::testing {

// Central finite differences over a set of parameter arrays. `f` must build
// a fresh graph from the given parameter values and return the scalar loss.
// Checks the reverse-mode gradient of each parameter against the numerical
// one; the worst relative error is returned with failures reported through
// `on_fail`.
struct FdReport {
    double max_rel_err = 0;
    std::size_t coords_checked = 0;
};

inline FdReport check_gradients(
    std::vector<DenseArray>& params,
    const std::function<double(const std::vector<DenseArray>&, std::vector<DenseArray>*)>& f,
    double step = 1e-5) {
    // Analytic gradients at the base point.
    std::vector<DenseArray> grads;
    f(params, &grads);

    FdReport report;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        for (std::size_t i = 0; i < params[pi].size(); ++i) {
            const double saved = params[pi][i];
            params[pi][i] = saved + step;
            const double up = f(params, nullptr);
            params[pi][i] = saved - step;
            const double down = f(params, nullptr);
            params[pi][i] = saved;
            const double fd = (up - down) / (2.0 * step);
            const double ad = grads[pi][i];
            const double err = std::abs(ad - fd) / std::max({1.0, std::abs(fd), std::abs(ad)});
            report.max_rel_err = std::max(report.max_rel_err, err);
            ++report.coords_checked;
        }
    }
    return report;
}

}  // namespace klab::testing
