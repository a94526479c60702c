#pragma once

#include "nav/common.hpp"

namespace nav {

// ---------------------------------------------------------------------------
// Linear Gaussian state-space baseline:
//   x_t = A x_{t-1} + B u_t + q,   y_t = C x_t + r.
// The fusion baseline fixes A = B = C = I and learns Q, R by EM.
// ---------------------------------------------------------------------------

struct LgssmParams {
    MatrixXd transition_matrix;   // A
    MatrixXd control_matrix;      // B
    MatrixXd transition_noise;    // Q
    MatrixXd measurement_matrix;  // C
    MatrixXd measurement_noise;   // R
    Gaussian initial;

    void validate() const;

    /// Identity dynamics/measurement with the given noise scales.
    static LgssmParams identity_fusion(int dim, double q_var, double r_var,
                                       const Gaussian& initial);
};

struct KalmanResult {
    // Index 0 holds the initial state; index t the posterior after y_t.
    std::vector<Gaussian> filtered;   // T+1 entries
    std::vector<Gaussian> predicted;  // T entries, prior at t = 1..T
    double loglik = 0.0;
};

/// Standard predict/update recursions with Joseph-form covariance updates.
/// y is T x Dy (one measurement per row), u is T x Du.
KalmanResult kalman_filter(const LgssmParams& params, const MatrixXd& y, const MatrixXd& u);

struct SmootherResult {
    std::vector<Gaussian> smoothed;  // T+1 entries including the initial state
    // cross_cov[t] = Cov(x_t, x_{t+1} | y_{1:T}) for t = 0..T-1
    std::vector<MatrixXd> cross_cov;
};

SmootherResult rts_smoother(const LgssmParams& params, const KalmanResult& filter);

struct EmConfig {
    int iterations = 30;
    bool update_q = true;
    bool update_r = true;
    bool check_monotone = true;  // throw if the likelihood trace decreases
    double min_noise_var = 1e-10;
};

struct EmResult {
    LgssmParams params;
    std::vector<double> loglik_trace;  // data log-likelihood before each M-step
};

EmResult em_fit(const MatrixXd& y, const MatrixXd& u, const LgssmParams& init,
                const EmConfig& config = {});

}  // namespace nav
