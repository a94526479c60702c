#include "nav/lgssm.hpp"

namespace nav {

void LgssmParams::validate() const {
    const auto dx = transition_matrix.rows();
    if (transition_matrix.cols() != dx || transition_noise.rows() != dx ||
        transition_noise.cols() != dx || control_matrix.rows() != dx)
        throw ShapeError("LgssmParams: inconsistent state dimensions");
    if (measurement_matrix.cols() != dx || measurement_noise.rows() != measurement_matrix.rows())
        throw ShapeError("LgssmParams: inconsistent measurement dimensions");
    if (initial.mean.size() != dx || initial.cov.rows() != dx)
        throw ShapeError("LgssmParams: inconsistent initial state");
    if ((transition_noise.diagonal().array() <= 0.0).any() ||
        (measurement_noise.diagonal().array() <= 0.0).any())
        throw InvalidArgumentError("LgssmParams: noise diagonals must be positive");
}

LgssmParams LgssmParams::identity_fusion(int dim, double q_var, double r_var,
                                         const Gaussian& initial) {
    LgssmParams p;
    p.transition_matrix = MatrixXd::Identity(dim, dim);
    p.control_matrix = MatrixXd::Identity(dim, dim);
    p.transition_noise = q_var * MatrixXd::Identity(dim, dim);
    p.measurement_matrix = MatrixXd::Identity(dim, dim);
    p.measurement_noise = r_var * MatrixXd::Identity(dim, dim);
    p.initial = initial;
    return p;
}

KalmanResult kalman_filter(const LgssmParams& params, const MatrixXd& y, const MatrixXd& u) {
    params.validate();
    const int t_max = static_cast<int>(y.rows());
    if (u.rows() != t_max) throw ShapeError("kalman_filter: controls/measurements length mismatch");
    const auto& a = params.transition_matrix;
    const auto& b = params.control_matrix;
    const auto& c = params.measurement_matrix;
    const int dx = static_cast<int>(a.rows());
    const MatrixXd eye = MatrixXd::Identity(dx, dx);

    KalmanResult res;
    res.filtered.push_back(params.initial);
    for (int t = 0; t < t_max; ++t) {
        const Gaussian& prev = res.filtered.back();
        Gaussian pred;
        pred.mean = a * prev.mean + b * u.row(t).transpose();
        pred.cov = a * prev.cov * a.transpose() + params.transition_noise;
        res.predicted.push_back(pred);

        const VectorXd innovation = y.row(t).transpose() - c * pred.mean;
        const MatrixXd s = c * pred.cov * c.transpose() + params.measurement_noise;
        Eigen::LLT<MatrixXd> llt(s);
        if (llt.info() != Eigen::Success)
            throw ConditioningError("kalman_filter: singular innovation covariance");
        res.loglik += gaussian_logpdf(y.row(t).transpose(), c * pred.mean, s);

        const MatrixXd gain = llt.solve(c * pred.cov).transpose();
        Gaussian post;
        post.mean = pred.mean + gain * innovation;
        const MatrixXd j = eye - gain * c;  // Joseph form keeps P symmetric PSD
        post.cov = j * pred.cov * j.transpose() +
                   gain * params.measurement_noise * gain.transpose();
        res.filtered.push_back(post);
    }
    return res;
}

SmootherResult rts_smoother(const LgssmParams& params, const KalmanResult& filter) {
    const int t_max = static_cast<int>(filter.predicted.size());
    if (static_cast<int>(filter.filtered.size()) != t_max + 1)
        throw ShapeError("rts_smoother: inconsistent filter output");
    const auto& a = params.transition_matrix;

    SmootherResult res;
    res.smoothed.resize(t_max + 1);
    res.cross_cov.resize(t_max);
    res.smoothed[t_max] = filter.filtered[t_max];
    for (int t = t_max - 1; t >= 0; --t) {
        const Gaussian& filt = filter.filtered[t];
        const Gaussian& pred = filter.predicted[t];  // prior at t+1
        const auto llt = chol_with_jitter(pred.cov);
        const MatrixXd gain = llt.solve(a * filt.cov).transpose();
        Gaussian sm;
        sm.mean = filt.mean + gain * (res.smoothed[t + 1].mean - pred.mean);
        sm.cov = filt.cov + gain * (res.smoothed[t + 1].cov - pred.cov) * gain.transpose();
        sm.cov = 0.5 * (sm.cov + sm.cov.transpose()).eval();
        res.smoothed[t] = sm;
        res.cross_cov[t] = gain * res.smoothed[t + 1].cov;
    }
    return res;
}

EmResult em_fit(const MatrixXd& y, const MatrixXd& u, const LgssmParams& init,
                const EmConfig& config) {
    if (config.iterations < 1) throw InvalidArgumentError("em_fit: iterations must be >= 1");
    const int t_max = static_cast<int>(y.rows());
    if (t_max < 2) throw DataError("em_fit: needs at least 2 steps");

    EmResult res;
    res.params = init;
    const auto& a = init.transition_matrix;
    const auto& b = init.control_matrix;
    const auto& c = init.measurement_matrix;
    const int dx = static_cast<int>(a.rows());
    const int dy = static_cast<int>(c.rows());

    for (int it = 0; it < config.iterations; ++it) {
        const KalmanResult filt = kalman_filter(res.params, y, u);
        if (!res.loglik_trace.empty() && filt.loglik < res.loglik_trace.back() - 1e-8 &&
            config.check_monotone)
            throw Error("em_fit: log-likelihood decreased between iterations");
        res.loglik_trace.push_back(filt.loglik);
        const SmootherResult sm = rts_smoother(res.params, filt);

        MatrixXd q_acc = MatrixXd::Zero(dx, dx);
        MatrixXd r_acc = MatrixXd::Zero(dy, dy);
        for (int t = 1; t <= t_max; ++t) {
            const Gaussian& cur = sm.smoothed[t];
            const Gaussian& prev = sm.smoothed[t - 1];
            const MatrixXd e_cur = cur.cov + cur.mean * cur.mean.transpose();
            const MatrixXd e_prev = prev.cov + prev.mean * prev.mean.transpose();
            const MatrixXd e_cross = sm.cross_cov[t - 1] + prev.mean * cur.mean.transpose();
            const VectorXd bu = b * u.row(t - 1).transpose();

            MatrixXd dq = e_cur - e_cross.transpose() * a.transpose() - a * e_cross +
                          a * e_prev * a.transpose();
            dq -= cur.mean * bu.transpose() + bu * cur.mean.transpose();
            dq += a * prev.mean * bu.transpose() + bu * prev.mean.transpose() * a.transpose();
            dq += bu * bu.transpose();
            q_acc += dq;

            const VectorXd yt = y.row(t - 1).transpose();
            r_acc += yt * yt.transpose() - yt * cur.mean.transpose() * c.transpose() -
                     c * cur.mean * yt.transpose() + c * e_cur * c.transpose();
        }
        if (config.update_q) {
            MatrixXd q = q_acc / t_max;
            q = 0.5 * (q + q.transpose()).eval();
            q.diagonal() = q.diagonal().cwiseMax(config.min_noise_var);
            res.params.transition_noise = q;
        }
        if (config.update_r) {
            MatrixXd r = r_acc / t_max;
            r = 0.5 * (r + r.transpose()).eval();
            r.diagonal() = r.diagonal().cwiseMax(config.min_noise_var);
            res.params.measurement_noise = r;
        }
    }
    return res;
}

}  // namespace nav
