#include "nav/kernel.hpp"

namespace nav {

double se_ard_eval(const VectorXd& a, const VectorXd& b, const SeArdHyper& hyper) {
    hyper.validate();
    if (a.size() != hyper.lengthscales.size() || b.size() != hyper.lengthscales.size())
        throw ShapeError("se_ard_eval: input dimension does not match lengthscales");
    const double d2 = ((a - b).array() / hyper.lengthscales.array()).square().sum();
    return hyper.signal_variance * std::exp(-0.5 * d2);
}

MatrixXd kernel_matrix(const MatrixXd& rows, const MatrixXd& cols, const SeArdHyper& hyper) {
    hyper.validate();
    if (rows.cols() != hyper.lengthscales.size() || cols.cols() != hyper.lengthscales.size())
        throw ShapeError("kernel_matrix: input dimension does not match lengthscales");
    // Scale inputs once, then use the |a|^2 + |b|^2 - 2ab expansion.
    const MatrixXd rs = rows.array().rowwise() / hyper.lengthscales.transpose().array();
    const MatrixXd cs = cols.array().rowwise() / hyper.lengthscales.transpose().array();
    const VectorXd rn = rs.rowwise().squaredNorm();
    const VectorXd cn = cs.rowwise().squaredNorm();
    MatrixXd d2 = -2.0 * rs * cs.transpose();
    d2.colwise() += rn;
    d2.rowwise() += cn.transpose();
    return hyper.signal_variance * (-0.5 * d2.cwiseMax(0.0).array()).exp();
}

MatrixXd kernel_matrix_grad(const MatrixXd& rows, const MatrixXd& cols,
                            const SeArdHyper& hyper, int log_param_index) {
    const MatrixXd k = kernel_matrix(rows, cols, hyper);
    if (log_param_index == 0) return k;  // dK/dlog(sv) = K
    const int d = log_param_index - 1;
    if (d < 0 || d >= hyper.input_dim())
        throw InvalidArgumentError("kernel_matrix_grad: bad hyperparameter index");
    // dK/dlog(l_d) = K .* (a_d - b_d)^2 / l_d^2
    const double inv_l2 = 1.0 / sq(hyper.lengthscales[d]);
    MatrixXd g(rows.rows(), cols.rows());
    for (int i = 0; i < rows.rows(); ++i)
        for (int j = 0; j < cols.rows(); ++j)
            g(i, j) = k(i, j) * sq(rows(i, d) - cols(j, d)) * inv_l2;
    return g;
}

VectorXd mean_eval(const MeanSpec& spec, const VectorXd& x, const std::optional<VectorXd>& u) {
    switch (spec.kind) {
        case MeanKind::kLinearIdentity:
            return x;
        case MeanKind::kPdrAdditive:
            if (!u.has_value())
                throw InvalidArgumentError("mean_eval: additive mean requires a control vector");
            if (u->size() != x.size())
                throw ShapeError("mean_eval: control dimension does not match state");
            return x + *u;
        case MeanKind::kZero:
            return VectorXd::Zero(x.size());
    }
    throw InvalidArgumentError("mean_eval: unknown mean kind");
}

const char* mean_kind_name(MeanKind kind) {
    switch (kind) {
        case MeanKind::kLinearIdentity: return "linear-identity";
        case MeanKind::kPdrAdditive: return "pdr-additive";
        case MeanKind::kZero: return "zero";
    }
    return "unknown";
}

MeanKind mean_kind_from_name(const std::string& name) {
    if (name == "linear-identity") return MeanKind::kLinearIdentity;
    if (name == "pdr-additive") return MeanKind::kPdrAdditive;
    if (name == "zero") return MeanKind::kZero;
    throw InvalidArgumentError("unknown mean kind: " + name);
}

}  // namespace nav
