#pragma once

// Central finite-difference gradient checking for scalar-valued tensor functions.

#include <cmath>
#include <functional>

#include "metabin/tensor.hpp"

namespace metabin {

struct GradCheckResult {
    double max_rel_error = 0.0;
    int64_t worst_index = -1;
    // true when the base point sits too close to a non-differentiable point
    // (relu kink, max/min tie) for the finite-difference stencil to be valid
    bool excluded = false;
    double kink_margin = 0.0;

    bool ok(double tol) const { return !excluded && max_rel_error < tol; }
};

// f maps a leaf tensor x to a scalar Var (it may capture other fixed inputs).
// Relative error per coordinate: |analytic - central| / max(1, |analytic|).
inline GradCheckResult finite_diff_check(const std::function<Var(const Var&)>& f, const Tensor& x,
                                         double h = 1e-5) {
    if (h <= 0.0) throw ContractError("finite_diff_check: h must be positive");

    // analytic gradient, with kink proximity recorded during the forward pass
    Var leaf = Var::param(x);
    KinkMonitor::active() = true;
    KinkMonitor::reset();
    Var out = f(leaf);
    double kink_margin = KinkMonitor::min_margin();
    KinkMonitor::active() = false;
    if (out.numel() != 1) throw ContractError("finite_diff_check: f must be scalar-valued");
    double f0 = out.scalar_value();

    // determinism check: identical inputs must give identical outputs
    {
        Var leaf2 = Var::param(x);
        Var out2 = f(leaf2);
        if (out2.scalar_value() != f0)
            throw ContractError("finite_diff_check: f is not deterministic");
    }

    backward(out);
    Tensor analytic = leaf.grad().numel() ? leaf.grad() : Tensor(x.shape());

    GradCheckResult res;
    // The stencil crosses a kink when the base point is within h of one.
    if (kink_margin < 10.0 * h) {
        res.excluded = true;
        res.kink_margin = kink_margin;
        return res;
    }

    Tensor xt = x;
    for (int64_t i = 0; i < xt.numel(); ++i) {
        double orig = xt[i];
        xt[i] = orig + h;
        double fp = f(Var::constant(xt)).scalar_value();
        xt[i] = orig - h;
        double fm = f(Var::constant(xt)).scalar_value();
        xt[i] = orig;
        double numeric = (fp - fm) / (2.0 * h);
        double rel = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
        if (rel > res.max_rel_error) {
            res.max_rel_error = rel;
            res.worst_index = i;
        }
    }
    return res;
}

}  // namespace metabin
