#include "nav/gpssm.hpp"

#include <algorithm>
#include <iostream>

namespace nav {

// ---------------------------------------------------------------------------
// Model plumbing
// ---------------------------------------------------------------------------

void GpssmModel::validate() const {
    const int dx = state_dim();
    if (dx < 1) throw InvalidArgumentError("GpssmModel: empty state");
    if ((process_noise_diag.array() <= 0.0).any())
        throw InvalidArgumentError("GpssmModel: process noise must be positive");
    if (num_inducing() < 1) throw InvalidArgumentError("GpssmModel: needs at least one inducing input");
    if (static_cast<int>(transition_hyper.size()) != dx ||
        static_cast<int>(inducing_mean.size()) != dx ||
        static_cast<int>(inducing_cov.size()) != dx)
        throw ShapeError("GpssmModel: per-output blocks must match the state dimension");
    for (int d = 0; d < dx; ++d) {
        transition_hyper[d].validate();
        if (transition_hyper[d].input_dim() != aug_dim())
            throw ShapeError("GpssmModel: kernel input dimension must match augmented input");
        if (inducing_mean[d].size() != num_inducing() ||
            inducing_cov[d].rows() != num_inducing() || inducing_cov[d].cols() != num_inducing())
            throw ShapeError("GpssmModel: inducing posterior block size mismatch");
    }
    if (initial_state.mean.size() != dx || initial_state.cov.rows() != dx)
        throw ShapeError("GpssmModel: initial state dimension mismatch");
}

namespace {

// Mean function on an augmented input (x, u), one output dimension at a time.
double transition_mean_base(const MeanSpec& spec, const Eigen::Ref<const VectorXd>& aug, int dx,
                            int d) {
    switch (spec.kind) {
        case MeanKind::kPdrAdditive: return aug[d] + aug[dx + d];
        case MeanKind::kLinearIdentity: return aug[d];
        case MeanKind::kZero: return 0.0;
    }
    throw InvalidArgumentError("transition mean: unknown kind");
}

}  // namespace

void GpssmModel::finalize() {
    validate();
    const int dx = state_dim();
    const int m = num_inducing();
    kzz_chol_.clear();
    kzz_inv_.clear();
    prior_mean_z_.clear();
    centered_mean_.clear();
    for (int d = 0; d < dx; ++d) {
        const MatrixXd kzz = kernel_matrix(inducing_inputs, inducing_inputs, transition_hyper[d]);
        const auto llt = chol_with_jitter(kzz, transition_hyper[d].signal_variance);
        kzz_chol_.push_back(llt.matrixL());
        kzz_inv_.push_back(llt.solve(MatrixXd::Identity(m, m)));
        VectorXd mz(m);
        for (int i = 0; i < m; ++i)
            mz[i] = transition_mean_base(transition_mean, inducing_inputs.row(i), dx, d);
        prior_mean_z_.push_back(mz);
        centered_mean_.push_back(inducing_mean[d] - mz);
    }
    finalized_ = true;
}

GpssmModel GpssmModel::with_initial_anchor(const VectorXd& mean) const {
    GpssmModel copy = *this;
    copy.initial_state.mean = mean;
    return copy;
}

// ---------------------------------------------------------------------------
// Shared sparse-GP projections
// ---------------------------------------------------------------------------

namespace {

struct ProjectionBatch {
    std::vector<MatrixXd> k_xz;  // per output: S x M
    std::vector<MatrixXd> a;     // per output: S x M
    std::vector<VectorXd> b;     // per output: S, clamped at zero
};

ProjectionBatch project(const GpssmModel& model, const MatrixXd& aug) {
    ProjectionBatch pb;
    const int dx = model.state_dim();
    pb.k_xz.reserve(dx);
    pb.a.reserve(dx);
    pb.b.reserve(dx);
    for (int d = 0; d < dx; ++d) {
        MatrixXd k = kernel_matrix(aug, model.inducing_inputs, model.transition_hyper[d]);
        MatrixXd a = k * model.kzz_inverse(d);
        VectorXd b = (model.transition_hyper[d].signal_variance -
                      a.cwiseProduct(k).rowwise().sum().array())
                         .max(0.0);
        pb.k_xz.push_back(std::move(k));
        pb.a.push_back(std::move(a));
        pb.b.push_back(std::move(b));
    }
    return pb;
}

MatrixXd augment(const MatrixXd& states, const Eigen::Ref<const VectorXd>& u) {
    MatrixXd aug(states.rows(), states.cols() + u.size());
    aug.leftCols(states.cols()) = states;
    aug.rightCols(u.size()).rowwise() = u.transpose();
    return aug;
}

// Transition means and log correction factors for a batch of previous states.
void transition_batch(const GpssmModel& model, const MatrixXd& prev,
                      const Eigen::Ref<const VectorXd>& u, MatrixXd& mean, VectorXd& log_corr) {
    const int dx = model.state_dim();
    const MatrixXd aug = augment(prev, u);
    const ProjectionBatch pb = project(model, aug);
    mean.resize(prev.rows(), dx);
    log_corr = VectorXd::Zero(prev.rows());
    for (int d = 0; d < dx; ++d) {
        VectorXd base(prev.rows());
        for (int i = 0; i < prev.rows(); ++i)
            base[i] = transition_mean_base(model.transition_mean, aug.row(i), dx, d);
        mean.col(d) = base + pb.a[d] * model.centered_mean(d);
        const MatrixXd a_sigma = pb.a[d] * model.inducing_cov[d];
        const VectorXd quad = a_sigma.cwiseProduct(pb.a[d]).rowwise().sum();
        log_corr.array() -=
            0.5 * (pb.b[d] + quad).array() / model.process_noise_diag[d];
    }
}

std::vector<int> systematic_resample(const VectorXd& w, Rng& rng) {
    const int s = static_cast<int>(w.size());
    std::vector<int> idx(s);
    const double u0 = rng.uniform() / s;
    double cum = w[0];
    int i = 0;
    for (int j = 0; j < s; ++j) {
        const double uj = u0 + static_cast<double>(j) / s;
        while (uj > cum && i + 1 < s) cum += w[++i];
        idx[j] = i;
    }
    return idx;
}

int categorical_from_log(const VectorXd& logw, Rng& rng) {
    const double lse = logsumexp(logw);
    const double u = rng.uniform();
    double cum = 0.0;
    const int n = static_cast<int>(logw.size());
    for (int i = 0; i < n; ++i) {
        cum += std::exp(logw[i] - lse);
        if (u <= cum) return i;
    }
    return n - 1;
}

}  // namespace

// ---------------------------------------------------------------------------
// Forward filter + backward simulation
// ---------------------------------------------------------------------------

ParticleCloud smooth_auxiliary(const AuxiliarySsm& ssm, int n_particles, int n_backward,
                               double ess_fraction, Rng& rng) {
    if (n_particles < 2) throw InvalidArgumentError("smooth_auxiliary: needs at least 2 particles");
    if (n_backward < 1) throw InvalidArgumentError("smooth_auxiliary: needs at least 1 draw");
    if (ssm.t_max < 1) throw InvalidArgumentError("smooth_auxiliary: needs T >= 1");
    const int s = n_particles;
    const int dx = ssm.state_dim;
    const int t_max = ssm.t_max;
    const VectorXd q_sd = ssm.q_diag.cwiseSqrt();

    std::vector<MatrixXd> states(t_max + 1);
    std::vector<VectorXd> logw_hist(t_max + 1);
    std::vector<MatrixXd> mean_hist(t_max + 1);  // transition means out of t-1
    std::vector<VectorXd> corr_hist(t_max + 1);

    const auto init_llt = chol_with_jitter(ssm.initial.cov);
    const MatrixXd init_l = init_llt.matrixL();
    states[0].resize(s, dx);
    for (int i = 0; i < s; ++i)
        states[0].row(i) = (ssm.initial.mean + init_l * rng.normal_vector(dx)).transpose();
    logw_hist[0] = VectorXd::Constant(s, -std::log(static_cast<double>(s)));

    for (int t = 1; t <= t_max; ++t) {
        ssm.transition(states[t - 1], t, mean_hist[t], corr_hist[t]);

        const VectorXd w = logw_hist[t - 1].array().exp();
        const double ess = 1.0 / w.squaredNorm();
        std::vector<int> parents(s);
        VectorXd carry(s);
        if (ess < ess_fraction * s) {
            parents = systematic_resample(w, rng);
            carry.setConstant(-std::log(static_cast<double>(s)));
        } else {
            for (int i = 0; i < s; ++i) parents[i] = i;
            carry = logw_hist[t - 1];
        }

        states[t].resize(s, dx);
        for (int i = 0; i < s; ++i)
            states[t].row(i) = mean_hist[t].row(parents[i]) +
                               (q_sd.array() * rng.normal_vector(dx).array()).matrix().transpose();

        const VectorXd meas = ssm.log_measurement(states[t], t);
        VectorXd logw(s);
        for (int i = 0; i < s; ++i) logw[i] = carry[i] + meas[i] + corr_hist[t][parents[i]];
        const double lse = logsumexp(logw);
        if (!std::isfinite(lse))
            throw DegenerateLikelihoodError(
                "particle weights collapsed at step " + std::to_string(t), t);
        logw_hist[t] = logw.array() - lse;
    }

    // Backward simulation: every draw is a joint trajectory sample.
    ParticleCloud cloud;
    cloud.trajectories.reserve(n_backward);
    cloud.log_weights = VectorXd::Constant(n_backward, -std::log(static_cast<double>(n_backward)));
    const VectorXd inv_q = ssm.q_diag.cwiseInverse();
    for (int bs = 0; bs < n_backward; ++bs) {
        MatrixXd traj(t_max + 1, dx);
        int j = categorical_from_log(logw_hist[t_max], rng);
        traj.row(t_max) = states[t_max].row(j);
        for (int t = t_max - 1; t >= 0; --t) {
            VectorXd logb = logw_hist[t] + corr_hist[t + 1];
            const MatrixXd diff = mean_hist[t + 1].rowwise() - traj.row(t + 1);
            logb -= 0.5 * (diff.array().square().matrix() * inv_q);
            j = categorical_from_log(logb, rng);
            traj.row(t) = states[t].row(j);
        }
        cloud.trajectories.push_back(std::move(traj));
    }
    return cloud;
}

ParticleCloud particle_smoother(const GpssmModel& model, const MatrixXd& y, const MatrixXd& u,
                                int n_particles, int n_backward, std::uint64_t seed) {
    if (!model.finalized()) throw InvalidArgumentError("particle_smoother: model not finalized");
    if (!model.measurement) throw InvalidArgumentError("particle_smoother: no measurement model");
    if (y.rows() != u.rows()) throw ShapeError("particle_smoother: y/u length mismatch");
    if (y.rows() < 1) throw InvalidArgumentError("particle_smoother: needs T >= 1");

    AuxiliarySsm ssm;
    ssm.state_dim = model.state_dim();
    ssm.t_max = static_cast<int>(y.rows());
    ssm.initial = model.initial_state;
    ssm.q_diag = model.process_noise_diag;
    ssm.transition = [&model, &u](const MatrixXd& prev, int t, MatrixXd& mean, VectorXd& corr) {
        transition_batch(model, prev, u.row(t - 1), mean, corr);
    };
    ssm.log_measurement = [&model, &y](const MatrixXd& st, int t) {
        return measurement_loglik_batch(*model.measurement, st, y.row(t - 1));
    };
    Rng rng(seed);
    return smooth_auxiliary(ssm, n_particles, n_backward, 0.5, rng);
}

// ---------------------------------------------------------------------------
// Gaussians: KL divergence, natural-parameter conversions
// ---------------------------------------------------------------------------

double gaussian_kl(const Gaussian& q, const Gaussian& p) {
    if (q.dim() != p.dim() || q.cov.rows() != q.dim() || p.cov.rows() != p.dim())
        throw ShapeError("gaussian_kl: dimension mismatch");
    if (p.cov.diagonal().maxCoeff() <= 0.0)
        throw ConditioningError("gaussian_kl: reference covariance is singular");
    Eigen::LLT<MatrixXd> llt_p(p.cov);
    if (llt_p.info() != Eigen::Success)
        throw ConditioningError("gaussian_kl: reference covariance is not positive definite");
    const auto llt_q = chol_with_jitter(q.cov);
    const double logdet_p = log_det_from_chol(llt_p);
    const double logdet_q = log_det_from_chol(llt_q);
    const double trace = llt_p.solve(q.cov).trace();
    const VectorXd r = p.mean - q.mean;
    const double maha = r.dot(llt_p.solve(r));
    const double kl = 0.5 * (trace + maha - q.dim() + logdet_p - logdet_q);
    return std::max(kl, 0.0);
}

PredictiveFactors predictive_factors(const VectorXd& x_hat, const GpssmModel& model) {
    if (!model.finalized()) throw InvalidArgumentError("predictive_factors: model not finalized");
    if (x_hat.size() != model.aug_dim())
        throw ShapeError("predictive_factors: augmented input dimension mismatch");
    const ProjectionBatch pb = project(model, x_hat.transpose());
    PredictiveFactors f;
    f.a.resize(model.state_dim(), model.num_inducing());
    f.b_diag.resize(model.state_dim());
    for (int d = 0; d < model.state_dim(); ++d) {
        f.a.row(d) = pb.a[d].row(0);
        f.b_diag[d] = pb.b[d][0];
    }
    return f;
}

NaturalParams natural_from_gaussian(const GpssmModel& model) {
    NaturalParams nat;
    for (int d = 0; d < model.state_dim(); ++d) {
        const auto llt = chol_with_jitter(model.inducing_cov[d]);
        const MatrixXd prec = llt.solve(MatrixXd::Identity(model.num_inducing(), model.num_inducing()));
        nat.eta1.push_back(llt.solve(model.inducing_mean[d]));
        nat.eta2.push_back(-0.5 * prec);
    }
    return nat;
}

void gaussian_from_natural(const NaturalParams& nat, GpssmModel& model) {
    for (int d = 0; d < model.state_dim(); ++d) {
        MatrixXd prec = -2.0 * nat.eta2[d];
        prec = 0.5 * (prec + prec.transpose()).eval();
        const auto llt = chol_with_jitter(prec);
        model.inducing_cov[d] =
            llt.solve(MatrixXd::Identity(prec.rows(), prec.cols()));
        model.inducing_cov[d] =
            0.5 * (model.inducing_cov[d] + model.inducing_cov[d].transpose()).eval();
        model.inducing_mean[d] = llt.solve(nat.eta1[d]);
    }
    model.finalize();
}

// ---------------------------------------------------------------------------
// Natural-parameter update from a smoothing cloud
// ---------------------------------------------------------------------------

NaturalParams update_natural_params(const ParticleCloud& cloud, const MatrixXd& u,
                                    const GpssmModel& model) {
    if (cloud.size() < 1) throw InvalidArgumentError("update_natural_params: empty cloud");
    const int dx = model.state_dim();
    const int m = model.num_inducing();
    const int t_max = cloud.length();
    if (u.rows() != t_max) throw ShapeError("update_natural_params: controls length mismatch");

    const VectorXd w = cloud.weights();
    std::vector<VectorXd> data1(dx, VectorXd::Zero(m));
    std::vector<MatrixXd> data2(dx, MatrixXd::Zero(m, m));

    const int s_n = cloud.size();
    MatrixXd prev(s_n, dx), cur(s_n, dx);
    for (int t = 1; t <= t_max; ++t) {
        for (int s = 0; s < s_n; ++s) {
            prev.row(s) = cloud.trajectories[s].row(t - 1);
            cur.row(s) = cloud.trajectories[s].row(t);
        }
        const MatrixXd aug = augment(prev, u.row(t - 1));
        const ProjectionBatch pb = project(model, aug);
        for (int d = 0; d < dx; ++d) {
            const double inv_q = 1.0 / model.process_noise_diag[d];
            for (int s = 0; s < s_n; ++s) {
                const auto a_row = pb.a[d].row(s);
                const double base = transition_mean_base(model.transition_mean, aug.row(s), dx, d);
                const double resid =
                    cur(s, d) - base + a_row.dot(model.prior_mean_z(d));
                data1[d] += (w[s] * inv_q * resid) * a_row.transpose();
                data2[d] += (w[s] * inv_q) * (a_row.transpose() * a_row);
            }
        }
    }

    NaturalParams nat;
    for (int d = 0; d < dx; ++d) {
        nat.eta1.push_back(model.kzz_inverse(d) * model.prior_mean_z(d) + data1[d]);
        nat.eta2.push_back(-0.5 * (model.kzz_inverse(d) + data2[d]));
    }
    return nat;
}

// ---------------------------------------------------------------------------
// ELBO terms over a fixed cloud
// ---------------------------------------------------------------------------

namespace {

struct PosteriorBlocks {
    std::vector<VectorXd> mu;
    std::vector<MatrixXd> sigma;
    std::vector<VectorXd> mu_centered;  // mu - m_Z
};

PosteriorBlocks blocks_from_natural(const NaturalParams& nat, const GpssmModel& model) {
    PosteriorBlocks b;
    for (int d = 0; d < model.state_dim(); ++d) {
        MatrixXd prec = -2.0 * nat.eta2[d];
        prec = 0.5 * (prec + prec.transpose()).eval();
        const auto llt = chol_with_jitter(prec);
        MatrixXd sigma = llt.solve(MatrixXd::Identity(prec.rows(), prec.cols()));
        b.sigma.push_back(0.5 * (sigma + sigma.transpose()));
        b.mu.push_back(llt.solve(nat.eta1[d]));
        b.mu_centered.push_back(b.mu[d] - model.prior_mean_z(d));
    }
    return b;
}

}  // namespace

ElboTerms elbo_terms(const ParticleCloud& cloud, const MatrixXd& y, const MatrixXd& u,
                     const GpssmModel& model, const NaturalParams& natural) {
    if (!model.finalized()) throw InvalidArgumentError("elbo_terms: model not finalized");
    const int dx = model.state_dim();
    const int t_max = cloud.length();
    if (u.rows() != t_max || (y.rows() != t_max && model.measurement))
        throw ShapeError("elbo_terms: series length mismatch");
    const PosteriorBlocks qb = blocks_from_natural(natural, model);
    const VectorXd w = cloud.weights();
    const int s_n = cloud.size();

    ElboTerms terms;
    for (int d = 0; d < dx; ++d) {
        const MatrixXd kzz =
            kernel_matrix(model.inducing_inputs, model.inducing_inputs, model.transition_hyper[d]);
        terms.kl += gaussian_kl(Gaussian{qb.mu[d], qb.sigma[d]},
                                Gaussian{model.prior_mean_z(d), kzz});
    }

    for (int s = 0; s < s_n; ++s)
        terms.init_term += w[s] * gaussian_logpdf(cloud.trajectories[s].row(0).transpose(),
                                                  model.initial_state.mean,
                                                  model.initial_state.cov);

    MatrixXd prev(s_n, dx), cur(s_n, dx);
    for (int t = 1; t <= t_max; ++t) {
        for (int s = 0; s < s_n; ++s) {
            prev.row(s) = cloud.trajectories[s].row(t - 1);
            cur.row(s) = cloud.trajectories[s].row(t);
        }
        const MatrixXd aug = augment(prev, u.row(t - 1));
        const ProjectionBatch pb = project(model, aug);
        for (int d = 0; d < dx; ++d) {
            const double q = model.process_noise_diag[d];
            const MatrixXd a_sigma = pb.a[d] * qb.sigma[d];
            const VectorXd quad = a_sigma.cwiseProduct(pb.a[d]).rowwise().sum();
            for (int s = 0; s < s_n; ++s) {
                const double base = transition_mean_base(model.transition_mean, aug.row(s), dx, d);
                const double mean = base + pb.a[d].row(s).dot(qb.mu_centered[d]);
                terms.transition_term +=
                    w[s] * (-0.5 * (std::log(2.0 * M_PI * q) + sq(cur(s, d) - mean) / q) -
                            0.5 * (pb.b[d][s] + quad[s]) / q);
            }
        }
        if (model.measurement) {
            const VectorXd ll = measurement_loglik_batch(*model.measurement, cur, y.row(t - 1));
            terms.measurement_term += ll.dot(w);
        }
    }
    return terms;
}

// ---------------------------------------------------------------------------
// Hyperparameter gradient of the fixed-cloud surrogate
// ---------------------------------------------------------------------------

VectorXd GpssmGradient::flatten() const {
    int n = static_cast<int>(process_log.size());
    for (const auto& k : kernel_log) n += static_cast<int>(k.size());
    n += static_cast<int>(inducing.size());
    VectorXd v(n);
    int at = 0;
    for (const auto& k : kernel_log) {
        v.segment(at, k.size()) = k;
        at += static_cast<int>(k.size());
    }
    v.segment(at, process_log.size()) = process_log;
    at += static_cast<int>(process_log.size());
    if (inducing.size() > 0) {
        v.segment(at, inducing.size()) =
            Eigen::Map<const VectorXd>(inducing.data(), inducing.size());
    }
    return v;
}

GpssmGradient elbo_hyper_gradient(const ParticleCloud& cloud, const MatrixXd& u,
                                  const GpssmModel& model, const NaturalParams& natural,
                                  bool with_inducing) {
    if (!model.finalized()) throw InvalidArgumentError("elbo_hyper_gradient: model not finalized");
    const int dx = model.state_dim();
    const int aug_d = model.aug_dim();
    const int m = model.num_inducing();
    const int t_max = cloud.length();
    const PosteriorBlocks qb = blocks_from_natural(natural, model);
    const VectorXd w = cloud.weights();
    const int s_n = cloud.size();

    GpssmGradient grad;
    grad.kernel_log.assign(dx, VectorXd::Zero(1 + aug_d));
    grad.process_log = VectorXd::Zero(dx);
    grad.inducing = with_inducing ? MatrixXd::Zero(m, aug_d) : MatrixXd();

    MatrixXd prev(s_n, dx), cur(s_n, dx);
    for (int d = 0; d < dx; ++d) {
        const auto& hyper = model.transition_hyper[d];
        const double sv = hyper.signal_variance;
        const double q = model.process_noise_diag[d];
        const MatrixXd& kinv = model.kzz_inverse(d);
        const VectorXd& m_z = model.prior_mean_z(d);
        const VectorXd mu_c = qb.mu_centered[d];
        const VectorXd v_mu = kinv * mu_c;
        const MatrixXd s_mat = qb.sigma[d] + mu_c * mu_c.transpose();
        const MatrixXd w1 = kinv * s_mat * kinv - kinv;

        std::vector<MatrixXd> g_kzz;  // dK_ZZ / d(log hyper_j)
        std::vector<VectorXd> g_vmu;
        for (int j = 0; j <= aug_d; ++j) {
            g_kzz.push_back(
                kernel_matrix_grad(model.inducing_inputs, model.inducing_inputs, hyper, j));
            g_vmu.push_back(g_kzz.back() * v_mu);
        }

        // Weighted sums over every (t, sample) pair.
        VectorXd u2 = VectorXd::Zero(m);
        double c2sv = 0.0;
        MatrixXd d2 = MatrixXd::Zero(m, aug_d);
        MatrixXd maa = MatrixXd::Zero(m, m);
        MatrixXd mvsa = MatrixXd::Zero(m, m);
        double cbsv = 0.0, cvssv = 0.0;
        MatrixXd d3a = MatrixXd::Zero(m, aug_d), d3b = MatrixXd::Zero(m, aug_d);
        MatrixXd e2 = MatrixXd::Zero(m, aug_d), e3a = MatrixXd::Zero(m, aug_d),
                 e3b = MatrixXd::Zero(m, aug_d);
        double wtot = 0.0, crq = 0.0, cbq = 0.0;

        for (int t = 1; t <= t_max; ++t) {
            for (int s = 0; s < s_n; ++s) {
                prev.row(s) = cloud.trajectories[s].row(t - 1);
                cur.row(s) = cloud.trajectories[s].row(t);
            }
            const MatrixXd aug = augment(prev, u.row(t - 1));
            const ProjectionBatch pb = project(model, aug);
            const MatrixXd v_sigma_all = kinv * (qb.sigma[d] * pb.a[d].transpose());  // M x S
            for (int s = 0; s < s_n; ++s) {
                const double ws = w[s];
                const VectorXd a = pb.a[d].row(s).transpose();
                const VectorXd k = pb.k_xz[d].row(s).transpose();
                const VectorXd v_sigma = v_sigma_all.col(s);
                const double base = transition_mean_base(model.transition_mean, aug.row(s), dx, d);
                const double mean = base + a.dot(mu_c);
                const double r = cur(s, d) - mean;
                const double a_sigma_a = a.dot(qb.sigma[d] * a);

                u2 += (ws * r / q) * a;
                c2sv += ws * (r / q) * a.dot(mu_c);
                maa += ws * a * a.transpose();
                mvsa += ws * v_sigma * a.transpose();
                cbsv += ws * k.dot(a);
                cvssv += ws * k.dot(v_sigma);
                wtot += ws;
                crq += ws * r * r;
                cbq += ws * (pb.b[d][s] + a_sigma_a);

                for (int c = 0; c < aug_d; ++c) {
                    const double inv_l2 = 1.0 / sq(hyper.lengthscales[c]);
                    for (int mm = 0; mm < m; ++mm) {
                        const double diff = aug(s, c) - model.inducing_inputs(mm, c);
                        const double dsq = diff * diff * inv_l2;
                        d2(mm, c) += ws * (r / q) * k[mm] * v_mu[mm] * dsq;
                        d3a(mm, c) += ws * k[mm] * a[mm] * dsq;
                        d3b(mm, c) += ws * k[mm] * v_sigma[mm] * dsq;
                        if (with_inducing) {
                            e2(mm, c) += ws * (r / q) * k[mm] * v_mu[mm] * diff;
                            e3a(mm, c) += ws * k[mm] * a[mm] * diff;
                            e3b(mm, c) += ws * k[mm] * v_sigma[mm] * diff;
                        }
                    }
                }
            }
        }

        const auto trace_prod = [](const MatrixXd& g, const MatrixXd& x) {
            return g.cwiseProduct(x.transpose()).sum();
        };

        for (int j = 0; j <= aug_d; ++j) {
            const MatrixXd& g = g_kzz[j];
            double val = 0.5 * w1.cwiseProduct(g).sum();  // prior term
            double t2, t3;
            if (j == 0) {
                t2 = c2sv - u2.dot(g_vmu[0]);
                t3 = (-0.5 / q) * (wtot * sv - 2.0 * cbsv + trace_prod(g, maa) +
                                   2.0 * (cvssv - trace_prod(g, mvsa)));
            } else {
                const int c = j - 1;
                t2 = d2.col(c).sum() - u2.dot(g_vmu[j]);
                t3 = (-0.5 / q) * (-2.0 * d3a.col(c).sum() + trace_prod(g, maa) +
                                   2.0 * (d3b.col(c).sum() - trace_prod(g, mvsa)));
            }
            grad.kernel_log[d][j] = val + t2 + t3;
        }
        grad.process_log[d] = -0.5 * wtot + crq / (2.0 * q) + cbq / (2.0 * q);

        if (with_inducing) {
            const MatrixXd kzz =
                kernel_matrix(model.inducing_inputs, model.inducing_inputs, hyper);
            for (int mm = 0; mm < m; ++mm) {
                for (int c = 0; c < aug_d; ++c) {
                    const double inv_l2 = 1.0 / sq(hyper.lengthscales[c]);
                    VectorXd p = VectorXd::Zero(m);
                    for (int i = 0; i < m; ++i) {
                        if (i == mm) continue;
                        p[i] = -kzz(mm, i) *
                               (model.inducing_inputs(mm, c) - model.inducing_inputs(i, c)) *
                               inv_l2;
                    }
                    const bool mean_hit = (c == d || c == dx + d);
                    double val = w1.row(mm).dot(p);  // = 0.5 tr(W1 dK)
                    if (mean_hit) val += v_mu[mm];
                    // transition mean part
                    val += e2(mm, c) * inv_l2 - p.dot(v_mu) * u2[mm] - p.dot(u2) * v_mu[mm];
                    if (mean_hit) val -= u2[mm];
                    // trace-correction part
                    const double db = -2.0 * e3a(mm, c) * inv_l2 + 2.0 * p.dot(maa.col(mm));
                    const double da_sigma = e3b(mm, c) * inv_l2 - p.dot(mvsa.col(mm)) -
                                            p.dot(mvsa.row(mm).transpose());
                    val += (-0.5 / q) * (db + 2.0 * da_sigma);
                    grad.inducing(mm, c) += val;
                }
            }
        }
    }
    return grad;
}

// ---------------------------------------------------------------------------
// Farthest-point thinning
// ---------------------------------------------------------------------------

MatrixXd farthest_point_subset(const MatrixXd& candidates, int m) {
    const int n = static_cast<int>(candidates.rows());
    if (m >= n) return candidates;
    std::vector<int> chosen{0};
    VectorXd min_d2 = (candidates.rowwise() - candidates.row(0)).rowwise().squaredNorm();
    while (static_cast<int>(chosen.size()) < m) {
        int best = 0;
        double best_d2 = -1.0;
        for (int i = 0; i < n; ++i)
            if (min_d2[i] > best_d2) {
                best_d2 = min_d2[i];
                best = i;
            }
        chosen.push_back(best);
        const VectorXd d2 = (candidates.rowwise() - candidates.row(best)).rowwise().squaredNorm();
        min_d2 = min_d2.cwiseMin(d2);
    }
    MatrixXd out(m, candidates.cols());
    for (int i = 0; i < m; ++i) out.row(i) = candidates.row(chosen[i]);
    return out;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

namespace {

MatrixXd dead_reckon_augmented(const TrajectoryData& traj) {
    const int t_max = static_cast<int>(traj.u.rows());
    const int dx = static_cast<int>(traj.y.cols());
    const int du = static_cast<int>(traj.u.cols());
    MatrixXd points(t_max, dx + du);
    VectorXd x = traj.y.row(0).transpose();
    for (int t = 0; t < t_max; ++t) {
        points.row(t).head(dx) = x.transpose();
        points.row(t).tail(du) = traj.u.row(t);
        x += traj.u.row(t).transpose();
    }
    return points;
}

GpssmModel init_gpssm(const std::vector<TrajectoryData>& trajectories,
                      std::shared_ptr<const GpMeasurementModel> measurement,
                      const GpssmConfig& config, const MatrixXd* inducing_override) {
    if (trajectories.empty()) throw InvalidArgumentError("train: needs at least one trajectory");
    const int dx = static_cast<int>(trajectories[0].y.cols());
    const int du = static_cast<int>(trajectories[0].u.cols());
    for (const auto& tr : trajectories) {
        if (tr.y.rows() != tr.u.rows() || tr.y.cols() != dx || tr.u.cols() != du)
            throw ShapeError("train: inconsistent trajectory shapes");
        if (tr.y.rows() < 1) throw DataError("train: empty trajectory");
    }

    int total = 0;
    for (const auto& tr : trajectories) total += static_cast<int>(tr.u.rows());
    MatrixXd pool(total, dx + du);
    int at = 0;
    for (const auto& tr : trajectories) {
        pool.middleRows(at, tr.u.rows()) = dead_reckon_augmented(tr);
        at += static_cast<int>(tr.u.rows());
    }

    GpssmModel model;
    model.measurement = std::move(measurement);
    model.transition_mean = MeanSpec{MeanKind::kPdrAdditive};
    model.process_noise_diag = VectorXd::Constant(dx, config.init_process_noise);

    int m_count = config.inducing_count;
    if (m_count > total) {
        std::cerr << "train: reducing inducing count from " << m_count << " to " << total << "\n";
        m_count = total;
    }
    model.inducing_inputs =
        inducing_override ? *inducing_override : farthest_point_subset(pool, m_count);

    // Lengthscales from the spread of the dead-reckoned pool.
    const VectorXd lo = pool.colwise().minCoeff();
    const VectorXd hi = pool.colwise().maxCoeff();
    const double pos_span = (hi.head(dx) - lo.head(dx)).norm();
    VectorXd ls(dx + du);
    for (int c = 0; c < dx; ++c) ls[c] = std::max(0.15 * pos_span, 1.0);
    for (int c = 0; c < du; ++c) {
        const double mean = pool.col(dx + c).mean();
        const double sd = std::sqrt((pool.col(dx + c).array() - mean).square().mean());
        ls[dx + c] = std::max(2.0 * sd, 0.5);
    }
    for (int d = 0; d < dx; ++d) {
        SeArdHyper h;
        h.signal_variance = config.init_signal_variance;
        h.lengthscales = ls;
        model.transition_hyper.push_back(h);
    }

    model.initial_state.mean = trajectories[0].y.row(0).transpose();
    model.initial_state.cov = config.init_state_var * MatrixXd::Identity(dx, dx);

    // q(v) starts at the prior.
    const int m = model.num_inducing();
    for (int d = 0; d < dx; ++d) {
        VectorXd mz(m);
        for (int i = 0; i < m; ++i)
            mz[i] = transition_mean_base(model.transition_mean, model.inducing_inputs.row(i), dx, d);
        model.inducing_mean.push_back(mz);
        model.inducing_cov.push_back(
            kernel_matrix(model.inducing_inputs, model.inducing_inputs, model.transition_hyper[d]));
    }
    model.finalize();
    return model;
}

NaturalParams prior_natural(const GpssmModel& model) {
    NaturalParams nat;
    for (int d = 0; d < model.state_dim(); ++d) {
        nat.eta1.push_back(model.kzz_inverse(d) * model.prior_mean_z(d));
        nat.eta2.push_back(-0.5 * model.kzz_inverse(d));
    }
    return nat;
}

void apply_hyper_step(GpssmModel& model, const VectorXd& step, bool with_inducing) {
    const int dx = model.state_dim();
    const int aug_d = model.aug_dim();
    int at = 0;
    for (int d = 0; d < dx; ++d) {
        VectorXd v = model.transition_hyper[d].to_log_vector();
        v += step.segment(at, v.size());
        model.transition_hyper[d] = SeArdHyper::from_log_vector(v);
        at += static_cast<int>(v.size());
    }
    for (int d = 0; d < dx; ++d) {
        model.process_noise_diag[d] = std::exp(std::log(model.process_noise_diag[d]) + step[at]);
        ++at;
    }
    if (with_inducing) {
        Eigen::Map<const MatrixXd> dz(step.data() + at, model.num_inducing(), aug_d);
        model.inducing_inputs += dz;
    }
    model.finalize();
}

}  // namespace

GpssmModel train_gpssm(const std::vector<TrajectoryData>& trajectories,
                       std::shared_ptr<const GpMeasurementModel> measurement,
                       const GpssmConfig& config) {
    GpssmModel model = init_gpssm(trajectories, std::move(measurement), config, nullptr);
    Rng rng(config.seed);
    const double n_traj = static_cast<double>(trajectories.size());

    const int n_hyper =
        model.state_dim() * (1 + model.aug_dim()) + model.state_dim() +
        (config.optimize_inducing ? model.num_inducing() * model.aug_dim() : 0);
    VectorXd adam_m = VectorXd::Zero(n_hyper), adam_v = VectorXd::Zero(n_hyper);
    const double beta1 = 0.9, beta2 = 0.999;

    for (int round = 0; round < config.rounds; ++round) {
        const int j = trajectories.size() == 1
                          ? 0
                          : rng.uniform_int(static_cast<int>(trajectories.size()));
        const auto& traj = trajectories[j];
        model.initial_state.mean = traj.y.row(0).transpose();

        double lr = config.learn_rate;
        ParticleCloud cloud;
        for (int attempt = 0;; ++attempt) {
            try {
                cloud = particle_smoother(model, traj.y, traj.u, config.forward_particles,
                                          config.backward_samples, rng.next_u64());
                break;
            } catch (const DegenerateLikelihoodError&) {
                if (attempt >= 5) throw;
                lr *= 0.5;
            }
        }

        // Natural-parameter step: damped move toward the full-batch estimate,
        // with this trajectory's statistics standing in for the batch.
        const NaturalParams prior = prior_natural(model);
        const NaturalParams hat = update_natural_params(cloud, traj.u, model);
        const NaturalParams old = natural_from_gaussian(model);
        NaturalParams next;
        for (int d = 0; d < model.state_dim(); ++d) {
            const VectorXd target1 = prior.eta1[d] + n_traj * (hat.eta1[d] - prior.eta1[d]);
            const MatrixXd target2 = prior.eta2[d] + n_traj * (hat.eta2[d] - prior.eta2[d]);
            next.eta1.push_back((1.0 - config.damping) * old.eta1[d] + config.damping * target1);
            next.eta2.push_back((1.0 - config.damping) * old.eta2[d] + config.damping * target2);
        }
        gaussian_from_natural(next, model);

        // Hyperparameter step on the same cloud.
        const NaturalParams now = natural_from_gaussian(model);
        const GpssmGradient full =
            elbo_hyper_gradient(cloud, traj.u, model, now, config.optimize_inducing);
        ParticleCloud empty;
        empty.trajectories.push_back(cloud.trajectories[0].topRows(1));
        empty.log_weights = VectorXd::Zero(1);
        const GpssmGradient prior_only = elbo_hyper_gradient(
            empty, MatrixXd::Zero(0, model.control_dim()), model, now, config.optimize_inducing);
        VectorXd g = prior_only.flatten() + n_traj * (full.flatten() - prior_only.flatten());

        adam_m = beta1 * adam_m + (1.0 - beta1) * g;
        adam_v = beta2 * adam_v.array().matrix() + (1.0 - beta2) * g.cwiseProduct(g);
        const double bc1 = 1.0 - std::pow(beta1, round + 1);
        const double bc2 = 1.0 - std::pow(beta2, round + 1);
        const VectorXd step =
            lr * (adam_m / bc1).array() / ((adam_v / bc2).array().sqrt() + 1e-8);
        apply_hyper_step(model, step, config.optimize_inducing);

        if (config.surrogate_trace) {
            const ElboTerms terms =
                elbo_terms(cloud, traj.y, traj.u, model, natural_from_gaussian(model));
            config.surrogate_trace->push_back(terms.sum());
        }
    }
    return model;
}

// ---------------------------------------------------------------------------
// Inducing-input selection
// ---------------------------------------------------------------------------

MatrixXd select_inducing(const std::vector<TrajectoryData>& trajectories,
                         std::shared_ptr<const GpMeasurementModel> measurement,
                         int candidate_count, int m_count, const GpssmConfig& config) {
    const int n = static_cast<int>(trajectories.size());
    if (candidate_count < 1 || candidate_count > n)
        throw InvalidArgumentError("select_inducing: candidate count out of range");
    GpssmModel base = init_gpssm(trajectories, measurement, config, nullptr);
    Rng rng(config.seed);

    // One smoothing pass per trajectory under the starting model.
    std::vector<ParticleCloud> clouds;
    std::vector<MatrixXd> candidates;  // smoothed states ++ controls
    for (int j = 0; j < n; ++j) {
        base.initial_state.mean = trajectories[j].y.row(0).transpose();
        ParticleCloud cloud =
            particle_smoother(base, trajectories[j].y, trajectories[j].u,
                              config.forward_particles, config.backward_samples, rng.next_u64());
        const int t_max = cloud.length();
        const VectorXd w = cloud.weights();
        MatrixXd mean = MatrixXd::Zero(t_max + 1, base.state_dim());
        for (int s = 0; s < cloud.size(); ++s) mean += w[s] * cloud.trajectories[s];
        MatrixXd pts(t_max, base.aug_dim());
        pts.leftCols(base.state_dim()) = mean.topRows(t_max);
        pts.rightCols(base.control_dim()) = trajectories[j].u;
        clouds.push_back(std::move(cloud));
        candidates.push_back(std::move(pts));
    }

    int avail = 0;
    for (const auto& c : candidates) avail += static_cast<int>(c.rows());
    if (m_count > avail) {
        std::cerr << "select_inducing: reducing M from " << m_count << " to " << avail << "\n";
        m_count = avail;
    }

    const auto score_with = [&](const std::vector<int>& chosen) {
        int rows = 0;
        for (const int j : chosen) rows += static_cast<int>(candidates[j].rows());
        MatrixXd pool(rows, base.aug_dim());
        int at = 0;
        for (const int j : chosen) {
            pool.middleRows(at, candidates[j].rows()) = candidates[j];
            at += static_cast<int>(candidates[j].rows());
        }
        GpssmModel cand = base;
        cand.inducing_inputs = farthest_point_subset(pool, m_count);
        const int m = cand.num_inducing();
        cand.inducing_mean.clear();
        cand.inducing_cov.clear();
        for (int d = 0; d < cand.state_dim(); ++d) {
            VectorXd mz(m);
            for (int i = 0; i < m; ++i)
                mz[i] = transition_mean_base(cand.transition_mean, cand.inducing_inputs.row(i),
                                             cand.state_dim(), d);
            cand.inducing_mean.push_back(mz);
            cand.inducing_cov.push_back(kernel_matrix(cand.inducing_inputs, cand.inducing_inputs,
                                                      cand.transition_hyper[d]));
        }
        cand.finalize();

        // Full-batch optimal q(v) for this inducing set, then the surrogate.
        NaturalParams nat = prior_natural(cand);
        for (int j = 0; j < n; ++j) {
            cand.initial_state.mean = trajectories[j].y.row(0).transpose();
            const NaturalParams hat = update_natural_params(clouds[j], trajectories[j].u, cand);
            const NaturalParams prior = prior_natural(cand);
            for (int d = 0; d < cand.state_dim(); ++d) {
                nat.eta1[d] += hat.eta1[d] - prior.eta1[d];
                nat.eta2[d] += hat.eta2[d] - prior.eta2[d];
            }
        }
        double score = 0.0;
        for (int j = 0; j < n; ++j) {
            cand.initial_state.mean = trajectories[j].y.row(0).transpose();
            score += elbo_terms(clouds[j], trajectories[j].y, trajectories[j].u, cand, nat).sum();
        }
        return std::make_pair(score, cand.inducing_inputs);
    };

    std::vector<int> chosen;
    MatrixXd best_z;
    for (int k = 0; k < candidate_count; ++k) {
        double best_score = kNegInf;
        int best_j = -1;
        MatrixXd best_cand;
        for (int j = 0; j < n; ++j) {
            if (std::find(chosen.begin(), chosen.end(), j) != chosen.end()) continue;
            std::vector<int> attempt = chosen;
            attempt.push_back(j);
            const auto [score, z] = score_with(attempt);
            if (score > best_score) {
                best_score = score;
                best_j = j;
                best_cand = z;
            }
        }
        chosen.push_back(best_j);
        best_z = best_cand;
    }
    return best_z;
}

NavigationResult navigate(const GpssmModel& model, const MatrixXd& y, const MatrixXd& u,
                          int n_particles, int n_backward, std::uint64_t seed) {
    const GpssmModel anchored = model.with_initial_anchor(y.row(0).transpose());
    const ParticleCloud cloud = particle_smoother(anchored, y, u, n_particles, n_backward, seed);
    const int t_max = cloud.length();
    const int dx = model.state_dim();
    const VectorXd w = cloud.weights();

    NavigationResult res;
    res.mean = MatrixXd::Zero(t_max + 1, dx);
    for (int s = 0; s < cloud.size(); ++s) res.mean += w[s] * cloud.trajectories[s];
    res.cov.assign(t_max + 1, MatrixXd::Zero(dx, dx));
    for (int t = 0; t <= t_max; ++t) {
        for (int s = 0; s < cloud.size(); ++s) {
            const VectorXd diff =
                cloud.trajectories[s].row(t).transpose() - res.mean.row(t).transpose();
            res.cov[t] += w[s] * diff * diff.transpose();
        }
    }
    return res;
}

}  // namespace nav
