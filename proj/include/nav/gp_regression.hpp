#pragma once

#include "nav/kernel.hpp"

#include <optional>
#include <utility>

namespace nav {

// ---------------------------------------------------------------------------
// Exact GP regression for the WiFi measurement map g: position -> position
// estimate. Outputs are modeled as independent scalar GPs (diagonal noise),
// so every solve is N x N instead of (N*Dy) x (N*Dy).
// ---------------------------------------------------------------------------

class GpMeasurementModel {
public:
    MatrixXd train_inputs;         // N x Dx calibration positions
    MatrixXd train_targets;        // N x Dy WiFi position estimates
    std::vector<SeArdHyper> hyper; // one per output dimension
    VectorXd noise_diag;           // diagonal of R, one entry per output
    MeanSpec mean{MeanKind::kLinearIdentity};

    int n() const { return static_cast<int>(train_inputs.rows()); }
    int input_dim() const { return static_cast<int>(train_inputs.cols()); }
    int output_dim() const { return static_cast<int>(train_targets.cols()); }

    void validate() const;

    /// Precomputes the Cholesky factors and regression weights. Must be called
    /// after any change to data or hyperparameters; all queries are const and
    /// thread-safe afterwards.
    void finalize();
    bool finalized() const { return finalized_; }

    MatrixXd mean_at(const MatrixXd& inputs) const;

    const MatrixXd& chol(int output) const { return chol_lower_[output]; }
    const MatrixXd& alpha() const { return alpha_; }
    const MatrixXd& prior_mean() const { return prior_mean_; }

private:
    std::vector<MatrixXd> chol_lower_;  // per output, lower factor of K + R_dd I
    MatrixXd alpha_;                    // N x Dy, (K + R_dd I)^{-1} (y - m)
    MatrixXd prior_mean_;               // N x Dy
    bool finalized_ = false;
};

struct GpTrainConfig {
    int max_iters = 500;
    double grad_tol = 1e-5;
    int restarts = 3;
    std::uint64_t seed = 1;
    std::vector<double>* trace = nullptr;  // accepted objective values (run 0)
};

double log_marginal_likelihood(const GpMeasurementModel& model);

/// Gradient of the log-marginal likelihood with respect to the stacked
/// log-hyperparameters; layout per output d: [log signal_variance,
/// log lengthscale_1..Dx, log noise_dd], outputs concatenated.
VectorXd lml_gradient(const GpMeasurementModel& model);

GpMeasurementModel make_measurement_model(const MatrixXd& inputs, const MatrixXd& targets,
                                          const std::vector<SeArdHyper>& hyper,
                                          const VectorXd& noise_diag,
                                          MeanSpec mean = {MeanKind::kLinearIdentity});

/// Data-driven starting hyperparameters: lengthscales from input spread,
/// signal variance from target variance, noise at a tenth of it.
GpMeasurementModel default_init_model(const MatrixXd& inputs, const MatrixXd& targets);

GpMeasurementModel optimize_measurement_gp(const MatrixXd& inputs, const MatrixXd& targets,
                                           const std::optional<GpMeasurementModel>& init = {},
                                           const GpTrainConfig& config = {});

/// Posterior predictive of a new observation y* at x*: mean and (diagonal)
/// covariance, measurement noise included.
std::pair<VectorXd, MatrixXd> posterior_predict(const GpMeasurementModel& model,
                                                const VectorXd& x_star);

/// Batched posterior prediction, one test point per row of x_stars.
void posterior_predict_batch(const GpMeasurementModel& model, const MatrixXd& x_stars,
                             MatrixXd& means, MatrixXd& vars);

/// log p(y | x) for one measurement y evaluated at many states.
VectorXd measurement_loglik_batch(const GpMeasurementModel& model, const MatrixXd& x_stars,
                                  const VectorXd& y);

}  // namespace nav
