#include "nav/gp_regression.hpp"
#include "nav/optimize.hpp"

namespace nav {

// ---------------------------------------------------------------------------
// Strong-Wolfe line search + Polak-Ribiere CG (Nocedal & Wright, alg. 3.5/3.6)
// ---------------------------------------------------------------------------

namespace {

struct LineEval {
    double value = std::numeric_limits<double>::infinity();
    double slope = 0.0;
    VectorXd grad;
    bool finite = false;
};

LineEval eval_line(const ObjectiveFn& f, const VectorXd& x, const VectorXd& p, double alpha) {
    LineEval e;
    VectorXd g(x.size());
    try {
        const double v = f(x + alpha * p, g);
        if (std::isfinite(v) && g.allFinite()) {
            e.value = v;
            e.grad = g;
            e.slope = g.dot(p);
            e.finite = true;
        }
    } catch (const ConditioningError&) {
        // treated as an infinite objective value
    }
    return e;
}

// Cubic-safeguarded zoom on [lo, hi]; phi0/slope0 describe alpha = 0.
bool zoom(const ObjectiveFn& f, const VectorXd& x, const VectorXd& p, double phi0, double slope0,
          double a_lo, double phi_lo, double slope_lo, double a_hi, double phi_hi,
          const CgOptions& opts, double& a_out, LineEval& e_out) {
    for (int i = 0; i < opts.max_line_search; ++i) {
        // Cubic interpolation between lo and hi, bisection fallback.
        double a = 0.5 * (a_lo + a_hi);
        const double d1 = slope_lo + (phi_hi - phi_lo) * 3.0 / (a_hi - a_lo) - 0.0;
        (void)d1;
        LineEval e = eval_line(f, x, p, a);
        if (!e.finite || e.value > phi0 + opts.wolfe_c1 * a * slope0 || e.value >= phi_lo) {
            a_hi = a;
            phi_hi = e.finite ? e.value : phi_hi;
        } else {
            if (std::abs(e.slope) <= -opts.wolfe_c2 * slope0) {
                a_out = a;
                e_out = e;
                return true;
            }
            if (e.slope * (a_hi - a_lo) >= 0.0) {
                a_hi = a_lo;
                phi_hi = phi_lo;
            }
            a_lo = a;
            phi_lo = e.value;
            slope_lo = e.slope;
        }
        if (std::abs(a_hi - a_lo) < 1e-14 * std::max(1.0, std::abs(a_lo))) break;
    }
    // Accept the best sufficient-decrease point even if curvature failed.
    LineEval e = eval_line(f, x, p, a_lo);
    if (e.finite && e.value < phi0) {
        a_out = a_lo;
        e_out = e;
        return true;
    }
    return false;
}

bool wolfe_line_search(const ObjectiveFn& f, const VectorXd& x, const VectorXd& p, double phi0,
                       double slope0, const CgOptions& opts, double& a_out, LineEval& e_out) {
    double a_prev = 0.0, phi_prev = phi0, slope_prev = slope0;
    double a = 1.0;
    for (int i = 0; i < opts.max_line_search; ++i) {
        LineEval e = eval_line(f, x, p, a);
        if (!e.finite) {  // blew up; the minimum is bracketed by [a_prev, a]
            if (zoom(f, x, p, phi0, slope0, a_prev, phi_prev, slope_prev, a, phi0 + 1.0, opts,
                     a_out, e_out))
                return true;
            a *= 0.25;
            continue;
        }
        if (e.value > phi0 + opts.wolfe_c1 * a * slope0 || (i > 0 && e.value >= phi_prev))
            return zoom(f, x, p, phi0, slope0, a_prev, phi_prev, slope_prev, a, e.value, opts,
                        a_out, e_out);
        if (std::abs(e.slope) <= -opts.wolfe_c2 * slope0) {
            a_out = a;
            e_out = e;
            return true;
        }
        if (e.slope >= 0.0)
            return zoom(f, x, p, phi0, slope0, a, e.value, e.slope, a_prev, phi_prev, opts, a_out,
                        e_out);
        a_prev = a;
        phi_prev = e.value;
        slope_prev = e.slope;
        a *= 2.0;
    }
    return false;
}

}  // namespace

CgResult minimize_cg(const ObjectiveFn& f, const VectorXd& x0, const CgOptions& opts) {
    CgResult res;
    res.x = x0;
    res.grad.resize(x0.size());
    double value;
    try {
        value = f(res.x, res.grad);
    } catch (const ConditioningError& e) {
        throw OptimizationError(std::string("objective not evaluable at start: ") + e.what(), x0);
    }
    if (!std::isfinite(value) || !res.grad.allFinite())
        throw OptimizationError("objective non-finite at start", x0);
    res.value = value;
    res.trace.push_back(value);

    VectorXd g = res.grad;
    VectorXd p = -g;
    for (int it = 0; it < opts.max_iters; ++it) {
        if (g.norm() <= opts.grad_tol) {
            res.converged = true;
            break;
        }
        double slope0 = g.dot(p);
        if (slope0 >= 0.0) {  // not a descent direction; restart with steepest descent
            p = -g;
            slope0 = g.dot(p);
        }
        double alpha;
        LineEval e;
        if (!wolfe_line_search(f, res.x, p, res.value, slope0, opts, alpha, e)) break;
        res.x += alpha * p;
        res.value = e.value;
        res.trace.push_back(e.value);
        const VectorXd g_new = e.grad;
        const double beta =
            std::max(0.0, g_new.dot(g_new - g) / std::max(g.dot(g), 1e-300));  // PR+
        p = -g_new + beta * p;
        g = g_new;
        res.iterations = it + 1;
    }
    res.grad = g;
    if (g.norm() <= opts.grad_tol) res.converged = true;
    return res;
}

// ---------------------------------------------------------------------------
// Measurement GP
// ---------------------------------------------------------------------------

void GpMeasurementModel::validate() const {
    if (train_inputs.rows() < 1) throw InvalidArgumentError("measurement GP: needs N >= 1");
    if (train_targets.rows() != train_inputs.rows())
        throw ShapeError("measurement GP: inputs/targets row mismatch");
    if (static_cast<int>(hyper.size()) != output_dim())
        throw ShapeError("measurement GP: one SeArdHyper per output dimension required");
    if (noise_diag.size() != output_dim())
        throw ShapeError("measurement GP: noise diagonal size mismatch");
    if ((noise_diag.array() <= 0.0).any())
        throw InvalidArgumentError("measurement GP: noise variances must be positive");
    for (const auto& h : hyper) {
        h.validate();
        if (h.input_dim() != input_dim())
            throw ShapeError("measurement GP: kernel input dimension mismatch");
    }
}

MatrixXd GpMeasurementModel::mean_at(const MatrixXd& inputs) const {
    MatrixXd m(inputs.rows(), output_dim());
    for (int i = 0; i < inputs.rows(); ++i)
        m.row(i) = mean_eval(mean, inputs.row(i).transpose()).transpose();
    return m;
}

void GpMeasurementModel::finalize() {
    validate();
    const int n = this->n();
    chol_lower_.clear();
    chol_lower_.reserve(output_dim());
    alpha_.resize(n, output_dim());
    prior_mean_ = mean_at(train_inputs);
    for (int d = 0; d < output_dim(); ++d) {
        MatrixXd ky = kernel_matrix(train_inputs, train_inputs, hyper[d]);
        ky.diagonal().array() += noise_diag[d];
        const auto llt = chol_with_jitter(ky, hyper[d].signal_variance);
        chol_lower_.push_back(llt.matrixL());
        const VectorXd r = train_targets.col(d) - prior_mean_.col(d);
        alpha_.col(d) = llt.solve(r);
    }
    finalized_ = true;
}

double log_marginal_likelihood(const GpMeasurementModel& model) {
    if (!model.finalized()) throw InvalidArgumentError("model not finalized");
    const double n = static_cast<double>(model.n());
    double lml = 0.0;
    for (int d = 0; d < model.output_dim(); ++d) {
        const VectorXd r = model.train_targets.col(d) - model.prior_mean().col(d);
        const double logdet =
            2.0 * model.chol(d).diagonal().array().log().sum();
        lml += -0.5 * (r.dot(model.alpha().col(d)) + logdet + n * std::log(2.0 * M_PI));
    }
    return lml;
}

VectorXd lml_gradient(const GpMeasurementModel& model) {
    if (!model.finalized()) throw InvalidArgumentError("model not finalized");
    const int dx = model.input_dim();
    const int per_output = dx + 2;  // log sv, log lengthscales, log noise
    VectorXd grad(per_output * model.output_dim());
    const int n = model.n();
    for (int d = 0; d < model.output_dim(); ++d) {
        const VectorXd a = model.alpha().col(d);
        // W = alpha alpha^T - Ky^{-1}; gradient wrt theta is tr(W dK/dtheta)/2
        MatrixXd kinv = MatrixXd::Identity(n, n);
        model.chol(d).triangularView<Eigen::Lower>().solveInPlace(kinv);
        model.chol(d).transpose().triangularView<Eigen::Upper>().solveInPlace(kinv);
        const MatrixXd w = a * a.transpose() - kinv;
        for (int j = 0; j <= dx; ++j) {
            const MatrixXd dk =
                kernel_matrix_grad(model.train_inputs, model.train_inputs, model.hyper[d], j);
            grad[d * per_output + j] = 0.5 * w.cwiseProduct(dk).sum();
        }
        grad[d * per_output + dx + 1] = 0.5 * model.noise_diag[d] * w.trace();
    }
    return grad;
}

namespace {

VectorXd pack_log_hypers(const GpMeasurementModel& m) {
    const int per_output = m.input_dim() + 2;
    VectorXd v(per_output * m.output_dim());
    for (int d = 0; d < m.output_dim(); ++d) {
        v.segment(d * per_output, per_output - 1) = m.hyper[d].to_log_vector();
        v[d * per_output + per_output - 1] = std::log(m.noise_diag[d]);
    }
    return v;
}

void unpack_log_hypers(const VectorXd& v, GpMeasurementModel& m) {
    const int per_output = m.input_dim() + 2;
    for (int d = 0; d < m.output_dim(); ++d) {
        m.hyper[d] = SeArdHyper::from_log_vector(v.segment(d * per_output, per_output - 1));
        m.noise_diag[d] = std::exp(v[d * per_output + per_output - 1]);
    }
}

}  // namespace

GpMeasurementModel make_measurement_model(const MatrixXd& inputs, const MatrixXd& targets,
                                          const std::vector<SeArdHyper>& hyper,
                                          const VectorXd& noise_diag, MeanSpec mean) {
    GpMeasurementModel m;
    m.train_inputs = inputs;
    m.train_targets = targets;
    m.hyper = hyper;
    m.noise_diag = noise_diag;
    m.mean = mean;
    m.finalize();
    return m;
}

GpMeasurementModel default_init_model(const MatrixXd& inputs, const MatrixXd& targets) {
    const int dx = static_cast<int>(inputs.cols());
    const int dy = static_cast<int>(targets.cols());
    GpMeasurementModel m;
    m.train_inputs = inputs;
    m.train_targets = targets;
    m.mean = MeanSpec{MeanKind::kLinearIdentity};
    m.noise_diag.resize(dy);
    const VectorXd in_mean = inputs.colwise().mean();
    VectorXd in_sd(dx);
    for (int j = 0; j < dx; ++j) {
        const double var = (inputs.col(j).array() - in_mean[j]).square().mean();
        in_sd[j] = std::max(std::sqrt(var), 1e-2);
    }
    for (int d = 0; d < dy; ++d) {
        const double tmean = targets.col(d).mean();
        const double tvar =
            std::max((targets.col(d).array() - tmean).square().mean(), 1e-6);
        SeArdHyper h;
        h.signal_variance = tvar;
        h.lengthscales = in_sd;
        m.hyper.push_back(h);
        m.noise_diag[d] = 0.1 * tvar;
    }
    m.finalize();
    return m;
}

GpMeasurementModel optimize_measurement_gp(const MatrixXd& inputs, const MatrixXd& targets,
                                           const std::optional<GpMeasurementModel>& init,
                                           const GpTrainConfig& config) {
    if (inputs.rows() < 2) throw InvalidArgumentError("optimize_measurement_gp: needs N >= 2");
    GpMeasurementModel model = init.has_value() ? *init : default_init_model(inputs, targets);
    model.train_inputs = inputs;
    model.train_targets = targets;
    model.finalize();

    // Maximize LML by minimizing its negation over the stacked log-hypers.
    GpMeasurementModel scratch = model;
    const ObjectiveFn objective = [&scratch](const VectorXd& v, VectorXd& grad) {
        unpack_log_hypers(v, scratch);
        scratch.finalize();
        grad = -lml_gradient(scratch);
        return -log_marginal_likelihood(scratch);
    };

    CgOptions opts;
    opts.max_iters = config.max_iters;
    opts.grad_tol = config.grad_tol;

    Rng rng(config.seed);
    const VectorXd v0 = pack_log_hypers(model);
    VectorXd best_v = v0;
    double best_value = std::numeric_limits<double>::infinity();
    bool any_success = false;
    std::string last_error;
    for (int r = 0; r < std::max(1, config.restarts); ++r) {
        VectorXd start = v0;
        if (r > 0)
            for (int j = 0; j < start.size(); ++j) start[j] += rng.normal(0.0, 1.0);
        try {
            const CgResult res = minimize_cg(objective, start, opts);
            if (config.trace && r == 0) *config.trace = res.trace;
            if (res.value < best_value) {
                best_value = res.value;
                best_v = res.x;
            }
            any_success = true;
        } catch (const OptimizationError& e) {
            last_error = e.what();
        }
    }
    if (!any_success)
        throw OptimizationError("measurement GP optimization diverged: " + last_error, best_v);

    unpack_log_hypers(best_v, model);
    model.finalize();
    return model;
}

std::pair<VectorXd, MatrixXd> posterior_predict(const GpMeasurementModel& model,
                                                const VectorXd& x_star) {
    if (!model.finalized()) throw InvalidArgumentError("model not finalized");
    if (x_star.size() != model.input_dim()) throw ShapeError("posterior_predict: bad test input");
    MatrixXd mean, var;
    posterior_predict_batch(model, x_star.transpose(), mean, var);
    MatrixXd cov = MatrixXd::Zero(model.output_dim(), model.output_dim());
    cov.diagonal() = var.row(0);
    return {mean.row(0).transpose(), cov};
}

void posterior_predict_batch(const GpMeasurementModel& model, const MatrixXd& x_stars,
                             MatrixXd& means, MatrixXd& vars) {
    const int s = static_cast<int>(x_stars.rows());
    const int dy = model.output_dim();
    means = model.mean_at(x_stars);
    vars.resize(s, dy);
    for (int d = 0; d < dy; ++d) {
        const MatrixXd k_sx = kernel_matrix(model.train_inputs, x_stars, model.hyper[d]);  // N x S
        means.col(d) += k_sx.transpose() * model.alpha().col(d);
        const MatrixXd v = model.chol(d).triangularView<Eigen::Lower>().solve(k_sx);
        // Predictive variance of an observation: prior minus explained, plus noise.
        vars.col(d) = (model.hyper[d].signal_variance + model.noise_diag[d] -
                       v.colwise().squaredNorm().transpose().array())
                          .max(1e-12);
    }
}

VectorXd measurement_loglik_batch(const GpMeasurementModel& model, const MatrixXd& x_stars,
                                  const VectorXd& y) {
    MatrixXd means, vars;
    posterior_predict_batch(model, x_stars, means, vars);
    const int s = static_cast<int>(x_stars.rows());
    VectorXd ll = VectorXd::Zero(s);
    for (int d = 0; d < model.output_dim(); ++d)
        ll.array() += -0.5 * ((2.0 * M_PI * vars.col(d).array()).log() +
                              (y[d] - means.col(d).array()).square() / vars.col(d).array());
    return ll;
}

}  // namespace nav
