#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <stdexcept>
#include <utility>
#include <vector>

#include "hitm/rng.hpp"
#include "hitm/tensor.hpp"

namespace hitm::nn {

/// A scalar map together with its analytic gradient at the evaluation point.
using ScalarMap = std::function<std::pair<double, Tensor>(const Tensor&)>;

struct GradCheckOptions {
    double h = 1e-4;
    /// When > 0 and the input is larger, only this many coordinates are
    /// checked, drawn deterministically from `seed`. 0 means all coordinates.
    std::size_t max_coords = 0;
    std::uint64_t seed = 0x9d15;
};

/// Central-difference check of the analytic gradient of f at x. Returns the
/// maximum over checked coordinates of
///   |analytic - central| / max(1e-8, |analytic| + |central|).
inline double finite_difference_check(const ScalarMap& f, const Tensor& x,
                                      const GradCheckOptions& opt) {
    const auto [value, grad] = f(x);
    if (!std::isfinite(value) || !grad.all_finite())
        throw std::runtime_error("finite_difference_check: non-finite f output");
    if (!grad.same_shape(x))
        throw std::invalid_argument("finite_difference_check: gradient shape " +
                                    grad.shape_string() + " does not match input " +
                                    x.shape_string());

    std::vector<std::size_t> coords(x.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (opt.max_coords > 0 && opt.max_coords < coords.size()) {
        Rng rng(opt.seed);
        for (std::size_t i = 0; i < opt.max_coords; ++i) {
            const std::size_t j = i + rng.below(coords.size() - i);
            std::swap(coords[i], coords[j]);
        }
        coords.resize(opt.max_coords);
    }

    double max_err = 0.0;
    Tensor probe = x;
    for (std::size_t c : coords) {
        const double saved = probe[c];
        probe[c] = saved + opt.h;
        const double fp = f(probe).first;
        probe[c] = saved - opt.h;
        const double fm = f(probe).first;
        probe[c] = saved;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw std::runtime_error(
                "finite_difference_check: non-finite f output at perturbed input");
        const double central = (fp - fm) / (2.0 * opt.h);
        const double analytic = grad[c];
        const double err = std::abs(analytic - central) /
                           std::max(1e-8, std::abs(analytic) + std::abs(central));
        max_err = std::max(max_err, err);
    }
    return max_err;
}

inline double finite_difference_check(const ScalarMap& f, const Tensor& x,
                                      double h) {
    GradCheckOptions opt;
    opt.h = h;
    return finite_difference_check(f, x, opt);
}

}  // namespace hitm::nn
