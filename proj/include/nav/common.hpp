#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace nav {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Input dimensions do not match what the operation expects.
struct ShapeError : Error {
    using Error::Error;
};

struct InvalidArgumentError : Error {
    using Error::Error;
};

/// A covariance factorization failed even after jitter escalation.
struct ConditioningError : Error {
    using Error::Error;
};

/// Missing, empty, degenerate or misaligned data.
struct DataError : Error {
    using Error::Error;
};

/// Every particle weight collapsed to zero at some filtering step.
struct DegenerateLikelihoodError : DataError {
    DegenerateLikelihoodError(const std::string& msg, int step)
        : DataError(msg), step(step) {}
    int step;
};

/// Hyperparameter search left the region where the objective is finite.
/// Carries the last iterate that still evaluated to a finite value.
struct OptimizationError : Error {
    OptimizationError(const std::string& msg, VectorXd last_iterate)
        : Error(msg), last_valid_iterate(std::move(last_iterate)) {}
    VectorXd last_valid_iterate;
};

// ---------------------------------------------------------------------------
// Deterministic RNG
//
// std::mt19937_64 with hand-rolled uniform/normal transforms so that streams
// are reproducible bit-for-bit regardless of the standard library.
// ---------------------------------------------------------------------------

class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed ? seed : 0x9e3779b97f4a7c15ull) {}

    std::uint64_t next_u64() {
        // splitmix64
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    /// Uniform in [0, 1).
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Standard normal via Box-Muller (no cached spare; fully deterministic).
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    double normal(double mean, double sd) { return mean + sd * normal(); }

    VectorXd normal_vector(int n) {
        VectorXd v(n);
        for (int i = 0; i < n; ++i) v[i] = normal();
        return v;
    }

    /// Uniform integer in [0, n).
    int uniform_int(int n) {
        return static_cast<int>(next_u64() % static_cast<std::uint64_t>(n));
    }

    /// Derive an independent stream (for sub-tasks) without disturbing this one.
    Rng fork() { return Rng(next_u64()); }

private:
    std::uint64_t state_;
};

// ---------------------------------------------------------------------------
// Gaussian
// ---------------------------------------------------------------------------

struct Gaussian {
    VectorXd mean;
    MatrixXd cov;

    int dim() const { return static_cast<int>(mean.size()); }
};

// ---------------------------------------------------------------------------
// Numerics helpers
// ---------------------------------------------------------------------------

/// Cholesky factorization of a symmetric PSD matrix with escalating jitter.
/// Starts at 1e-9*scale and multiplies by 10 up to 1e-3*scale; throws
/// ConditioningError if the factorization still fails.
inline Eigen::LLT<MatrixXd> chol_with_jitter(const MatrixXd& m, double scale) {
    if (scale <= 0.0) scale = 1.0;
    Eigen::LLT<MatrixXd> llt(m);
    if (llt.info() == Eigen::Success) return llt;
    const int n = static_cast<int>(m.rows());
    for (double jitter = 1e-9 * scale; jitter <= 1e-3 * scale * (1.0 + 1e-12); jitter *= 10.0) {
        llt.compute(m + jitter * MatrixXd::Identity(n, n));
        if (llt.info() == Eigen::Success) return llt;
    }
    throw ConditioningError("matrix factorization failed after jitter escalation");
}

inline Eigen::LLT<MatrixXd> chol_with_jitter(const MatrixXd& m) {
    const double scale = m.rows() > 0 ? m.diagonal().cwiseAbs().mean() : 1.0;
    return chol_with_jitter(m, scale);
}

inline double log_det_from_chol(const Eigen::LLT<MatrixXd>& llt) {
    return 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
}

/// Log-density of N(x | mean, cov) for a dense symmetric PD covariance.
inline double gaussian_logpdf(const VectorXd& x, const VectorXd& mean, const MatrixXd& cov) {
    if (x.size() != mean.size() || cov.rows() != x.size() || cov.cols() != x.size())
        throw ShapeError("gaussian_logpdf: dimension mismatch");
    const auto llt = chol_with_jitter(cov);
    const VectorXd r = x - mean;
    const VectorXd w = llt.matrixL().solve(r);
    const double n = static_cast<double>(x.size());
    return -0.5 * (n * std::log(2.0 * M_PI) + log_det_from_chol(llt) + w.squaredNorm());
}

inline double logsumexp(const VectorXd& v) {
    const double m = v.maxCoeff();
    if (!std::isfinite(m)) return m;
    return m + std::log((v.array() - m).exp().sum());
}

inline double sq(double x) { return x * x; }

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

}  // namespace nav
