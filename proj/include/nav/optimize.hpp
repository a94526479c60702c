#pragma once

#include "nav/common.hpp"

#include <functional>

namespace nav {

// Objective callback: returns f(x) and fills grad (same size as x).
// May return a non-finite value or throw ConditioningError; the line search
// treats both as "step too far" and backtracks.
using ObjectiveFn = std::function<double(const VectorXd&, VectorXd&)>;

struct CgOptions {
    int max_iters = 500;
    double grad_tol = 1e-5;
    double wolfe_c1 = 1e-4;
    double wolfe_c2 = 0.1;
    int max_line_search = 30;
};

struct CgResult {
    VectorXd x;
    double value = 0.0;
    VectorXd grad;
    int iterations = 0;
    bool converged = false;
    std::vector<double> trace;  // objective at every accepted iterate
};

/// Polak-Ribiere conjugate-gradient minimization with a strong-Wolfe line
/// search. Throws OptimizationError if the objective is non-finite at x0.
CgResult minimize_cg(const ObjectiveFn& f, const VectorXd& x0, const CgOptions& opts = {});

}  // namespace nav
