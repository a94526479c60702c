#pragma once

#include "nav/common.hpp"

#include <optional>

namespace nav {

// ---------------------------------------------------------------------------
// Squared-exponential kernel with one lengthscale per input dimension.
//
// Multi-output GPs in this project are stacks of independent scalar GPs;
// each output dimension carries its own SeArdHyper. Hyperparameters are
// always optimized in log space so positivity never needs clamping.
// ---------------------------------------------------------------------------

struct SeArdHyper {
    double signal_variance = 1.0;
    VectorXd lengthscales;

    int input_dim() const { return static_cast<int>(lengthscales.size()); }

    void validate() const {
        if (!(signal_variance > 0.0))
            throw InvalidArgumentError("SeArdHyper: signal_variance must be > 0");
        if (lengthscales.size() == 0 || (lengthscales.array() <= 0.0).any())
            throw InvalidArgumentError("SeArdHyper: lengthscales must be positive");
    }

    /// Packs to [log signal_variance, log l_1, ..., log l_D].
    VectorXd to_log_vector() const {
        VectorXd v(1 + lengthscales.size());
        v[0] = std::log(signal_variance);
        v.tail(lengthscales.size()) = lengthscales.array().log();
        return v;
    }

    static SeArdHyper from_log_vector(const VectorXd& v) {
        SeArdHyper h;
        h.signal_variance = std::exp(v[0]);
        h.lengthscales = v.tail(v.size() - 1).array().exp();
        return h;
    }
};

enum class MeanKind {
    kLinearIdentity,  // m(x) = x
    kPdrAdditive,     // m(x, u) = x + u
    kZero,
};

struct MeanSpec {
    MeanKind kind = MeanKind::kZero;
};

double se_ard_eval(const VectorXd& a, const VectorXd& b, const SeArdHyper& hyper);

/// Kernel matrix K(i,j) = k(rows[i], cols[j]). Rows/cols given as one point
/// per matrix row.
MatrixXd kernel_matrix(const MatrixXd& rows, const MatrixXd& cols, const SeArdHyper& hyper);

/// Derivative of kernel_matrix(rows, cols) with respect to one log
/// hyperparameter; index 0 is log signal variance, 1..D are log lengthscales.
MatrixXd kernel_matrix_grad(const MatrixXd& rows, const MatrixXd& cols,
                            const SeArdHyper& hyper, int log_param_index);

VectorXd mean_eval(const MeanSpec& spec, const VectorXd& x,
                   const std::optional<VectorXd>& u = std::nullopt);

const char* mean_kind_name(MeanKind kind);
MeanKind mean_kind_from_name(const std::string& name);

}  // namespace nav
