#pragma once

#include "nav/pathloss.hpp"
#include "nav/pdr.hpp"

namespace nav {

// ---------------------------------------------------------------------------
// Synthetic office environment: random AP layout with log-distance radio
// propagation (optionally warped by a smooth shadowing field), U-shaped
// walks with biased/noisy PDR exports, and RSS scan generation.
// ---------------------------------------------------------------------------

struct ShadowingConfig {
    bool enabled = false;
    double amplitude = 4.0;           // dB
    double correlation_length = 8.0;  // m
    int n_features = 64;              // random Fourier features per AP
};

struct Environment {
    Bounds2d bounds{0.0, 0.0, 40.0, 40.0};
    std::vector<ApModel> aps;  // ground-truth propagation parameters
    double device_height = 1.2;
    double rss_threshold = -85.0;
    ShadowingConfig shadowing;
    std::uint64_t seed = 0;

    /// Shadowing offset (dB) for AP index `ap` at 2-D position p;
    /// zero when the field is disabled.
    double shadow(int ap, const Eigen::Vector2d& p) const;

    // Per-AP random Fourier features, fixed at generation time.
    std::vector<MatrixXd> shadow_freq;   // per AP: K x 2
    std::vector<VectorXd> shadow_phase;  // per AP: K
};

struct WalkSpec {
    std::vector<Eigen::Vector2d> waypoints;
    double step_length = 0.7;
    double heading_bias = 0.0;      // rad per step, accumulating over the walk
    double heading_noise_sd = 0.0;  // rad
    int step_count_hint = 0;        // truncate/extend to this many steps if > 0

    /// Three-leg U across the default 40 m x 40 m floor; 147 steps at 0.7 m.
    static WalkSpec default_u_path();
};

struct SimulatedWalk {
    MatrixXd truth;          // (T+1) x 2 ground-truth positions
    MatrixXd true_controls;  // T x 2 exact per-step displacements
    std::vector<ControlInput> noisy_controls;  // heading bias/noise applied
    ImuLog imu;              // 100 Hz step-bump accelerometer + rotation
    std::vector<double> step_times;
};

Environment gen_environment(std::uint64_t seed, int n_aps, const Bounds2d& bounds,
                            const ShadowingConfig& shadowing = {});

SimulatedWalk gen_walk(const Environment& env, const WalkSpec& spec, std::uint64_t seed);

/// One scan block per position row; readings below the collection threshold
/// are dropped.
std::vector<RssScan> gen_scans(const Environment& env, const MatrixXd& positions,
                               int scans_per_position, std::uint64_t seed);

struct CalibrationSet {
    MatrixXd points;             // n x 2 ground-truth positions
    std::vector<RssScan> scans;  // scans_per_point blocks per point, in order
    int scans_per_point = 1;
};

CalibrationSet gen_calibration(const Environment& env, int n_points, int scans_per_point,
                               std::uint64_t seed);

}  // namespace nav
