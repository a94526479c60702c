#pragma once

#include "nav/gp_regression.hpp"

#include <functional>
#include <memory>

namespace nav {

// ---------------------------------------------------------------------------
// Variational GP state-space model over 2-D positions.
//
// The transition GP f acts on the augmented input (x_{t-1}, u_t) with an
// additive mean x + u; it is summarized by M inducing values v = f(Z) whose
// Gaussian posterior q(v) = N(mu, Sigma) is kept in blocks, one per state
// dimension. The measurement density p(y_t | x_t) comes from a trained
// measurement GP. Learning alternates particle smoothing of q(x_{0:T}),
// closed-form natural-parameter updates of q(v), and stochastic gradient
// steps on the hyperparameters.
// ---------------------------------------------------------------------------

struct TrajectoryData {
    MatrixXd y;  // T x Dy WiFi position estimates
    MatrixXd u;  // T x Du PDR controls
};

struct GpssmConfig {
    int inducing_count = 50;
    int forward_particles = 500;
    int backward_samples = 50;
    int rounds = 100;
    double learn_rate = 1e-2;  // Adam base rate on log-hyperparameters
    double damping = 0.5;      // natural-parameter step, convex combination
    bool optimize_inducing = false;
    double init_process_noise = 0.05;
    double init_signal_variance = 0.05;
    double init_state_var = 4.0;  // p(x0) variance around the first WiFi fix
    std::uint64_t seed = 1;
    std::vector<double>* surrogate_trace = nullptr;  // per-round monitor value
};

class GpssmModel {
public:
    std::vector<SeArdHyper> transition_hyper;  // per output, over (x, u)
    VectorXd process_noise_diag;               // Q diagonal
    MeanSpec transition_mean{MeanKind::kPdrAdditive};
    MatrixXd inducing_inputs;                  // M x (Dx + Du)
    std::vector<VectorXd> inducing_mean;       // q(v) mean per output, length M
    std::vector<MatrixXd> inducing_cov;        // q(v) covariance per output, M x M
    std::shared_ptr<const GpMeasurementModel> measurement;
    Gaussian initial_state;

    int state_dim() const { return static_cast<int>(process_noise_diag.size()); }
    int aug_dim() const { return static_cast<int>(inducing_inputs.cols()); }
    int control_dim() const { return aug_dim() - state_dim(); }
    int num_inducing() const { return static_cast<int>(inducing_inputs.rows()); }

    void validate() const;

    /// Rebuilds the K_ZZ factorizations and derived vectors; required after
    /// any mutation, const and thread-safe afterwards.
    void finalize();
    bool finalized() const { return finalized_; }

    /// Mean function evaluated at the inducing inputs, one vector per output.
    const VectorXd& prior_mean_z(int output) const { return prior_mean_z_[output]; }
    /// inducing_mean minus prior_mean_z; the offset A * this enters the
    /// auxiliary transition mean.
    const VectorXd& centered_mean(int output) const { return centered_mean_[output]; }
    const MatrixXd& kzz_inverse(int output) const { return kzz_inv_[output]; }
    const MatrixXd& kzz_chol(int output) const { return kzz_chol_[output]; }

    /// Copy with p(x0) re-centered on a trajectory's first WiFi fix.
    GpssmModel with_initial_anchor(const VectorXd& mean) const;

private:
    std::vector<MatrixXd> kzz_chol_;
    std::vector<MatrixXd> kzz_inv_;
    std::vector<VectorXd> prior_mean_z_;
    std::vector<VectorXd> centered_mean_;
    bool finalized_ = false;
};

struct ParticleCloud {
    std::vector<MatrixXd> trajectories;  // each (T+1) x Dx
    VectorXd log_weights;                // normalized: logsumexp == 0

    int size() const { return static_cast<int>(trajectories.size()); }
    int length() const {
        return trajectories.empty() ? 0 : static_cast<int>(trajectories[0].rows()) - 1;
    }
    VectorXd weights() const { return log_weights.array().exp(); }
};

struct NaturalParams {
    std::vector<VectorXd> eta1;  // per output, length M
    std::vector<MatrixXd> eta2;  // per output, M x M, negative definite
};

/// KL(q || p) between multivariate Gaussians, clamped at zero.
double gaussian_kl(const Gaussian& q, const Gaussian& p);

/// Sparse-GP projection of one augmented input: per-output rows
/// a_d = k_d(x, Z) K_ZZ^-1 and residual variances b_d >= 0.
struct PredictiveFactors {
    MatrixXd a;       // Dx x M
    VectorXd b_diag;  // Dx
};
PredictiveFactors predictive_factors(const VectorXd& x_hat, const GpssmModel& model);

// ---------------------------------------------------------------------------
// Generic forward-filter / backward-simulation smoother. The target factors
// as p(x0) * prod_t N(x_t | mean_t(x_{t-1}), diag(q)) * exp(corr_t(x_{t-1}))
//                * exp(meas_t(x_t)).
// Callbacks are batched: states are passed one per row.
// ---------------------------------------------------------------------------

struct AuxiliarySsm {
    int state_dim = 0;
    int t_max = 0;
    Gaussian initial;
    VectorXd q_diag;
    // fills mean (S x Dx) and log_corr (S) for the transition into step t
    std::function<void(const MatrixXd& prev, int t, MatrixXd& mean, VectorXd& log_corr)>
        transition;
    // returns log measurement density at step t for each row state
    std::function<VectorXd(const MatrixXd& states, int t)> log_measurement;
};

ParticleCloud smooth_auxiliary(const AuxiliarySsm& ssm, int n_particles, int n_backward,
                               double ess_fraction, Rng& rng);

/// Particle smoother for the model's own auxiliary SSM given measurements and
/// controls (anchors p(x0) as stored in the model).
ParticleCloud particle_smoother(const GpssmModel& model, const MatrixXd& y, const MatrixXd& u,
                                int n_particles, int n_backward, std::uint64_t seed);

/// Exact coordinate update of q(v) from one trajectory's smoothing cloud.
NaturalParams update_natural_params(const ParticleCloud& cloud, const MatrixXd& u,
                                    const GpssmModel& model);

NaturalParams natural_from_gaussian(const GpssmModel& model);
void gaussian_from_natural(const NaturalParams& nat, GpssmModel& model);

struct ElboTerms {
    double kl = 0.0;                // KL(q(v) || p(v)), enters negatively
    double init_term = 0.0;         // E[log p(x0)]
    double transition_term = 0.0;   // sum_t E[E_f[log p(x_t | f_t)]]
    double measurement_term = 0.0;  // sum_t E[log p(y_t | x_t)]

    double sum() const { return -kl + init_term + transition_term + measurement_term; }
};

/// Monte-Carlo ELBO terms over a fixed cloud; q(v) taken from `natural`.
/// The entropy of q(x_{0:T}) is not representable from samples and is
/// excluded throughout (it also cancels from every gradient used here).
ElboTerms elbo_terms(const ParticleCloud& cloud, const MatrixXd& y, const MatrixXd& u,
                     const GpssmModel& model, const NaturalParams& natural);

struct GpssmGradient {
    std::vector<VectorXd> kernel_log;  // per output: [log sv, log ls_1..aug]
    VectorXd process_log;              // per output: log Q_dd
    MatrixXd inducing;                 // M x aug; zero unless requested

    VectorXd flatten() const;
};

/// Gradient of the fixed-cloud surrogate (elbo_terms sum with the cloud and
/// q(v) held fixed) with respect to the log kernel hyperparameters, log
/// process noise, and optionally the inducing inputs.
GpssmGradient elbo_hyper_gradient(const ParticleCloud& cloud, const MatrixXd& u,
                                  const GpssmModel& model, const NaturalParams& natural,
                                  bool with_inducing = false);

/// Three-phase alternating training: smoothing, natural-parameter update with
/// damping, Adam step on hyperparameters. Multiple trajectories are visited
/// one per round with their sufficient statistics scaled to the full batch.
GpssmModel train_gpssm(const std::vector<TrajectoryData>& trajectories,
                       std::shared_ptr<const GpMeasurementModel> measurement,
                       const GpssmConfig& config);

/// Greedy representative-trajectory selection scored by the fixed-cloud
/// surrogate; the winning trajectories' smoothed states (concatenated with
/// controls) are thinned to M inducing inputs by farthest-point selection.
MatrixXd select_inducing(const std::vector<TrajectoryData>& trajectories,
                         std::shared_ptr<const GpMeasurementModel> measurement,
                         int candidate_count, int m_count, const GpssmConfig& config);

struct NavigationResult {
    MatrixXd mean;                 // (T+1) x Dx smoothed means
    std::vector<MatrixXd> cov;     // per-step sample covariance
};

/// Smoothing pass with a frozen model.
NavigationResult navigate(const GpssmModel& model, const MatrixXd& y, const MatrixXd& u,
                          int n_particles, int n_backward, std::uint64_t seed);

/// Farthest-point thinning of a candidate set (rows) down to m points;
/// returns the selected rows, deterministically.
MatrixXd farthest_point_subset(const MatrixXd& candidates, int m);

}  // namespace nav
