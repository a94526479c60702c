#include "nav/simulator.hpp"

#include <cstdio>

namespace nav {

double Environment::shadow(int ap, const Eigen::Vector2d& p) const {
    if (!shadowing.enabled) return 0.0;
    const MatrixXd& freq = shadow_freq[ap];
    const VectorXd& phase = shadow_phase[ap];
    const VectorXd arg = freq * p + phase;
    const double k = static_cast<double>(freq.rows());
    return shadowing.amplitude * std::sqrt(2.0 / k) * arg.array().cos().sum();
}

Environment gen_environment(std::uint64_t seed, int n_aps, const Bounds2d& bounds,
                            const ShadowingConfig& shadowing) {
    if (n_aps < 1) throw InvalidArgumentError("gen_environment: needs at least one AP");
    Environment env;
    env.bounds = bounds;
    env.seed = seed;
    env.shadowing = shadowing;
    Rng rng(seed);
    env.aps.reserve(n_aps);
    for (int i = 0; i < n_aps; ++i) {
        ApModel ap;
        char name[16];
        std::snprintf(name, sizeof(name), "ap%02d", i);
        ap.ap_id = name;
        ap.position = Eigen::Vector3d(rng.uniform(bounds.xmin, bounds.xmax),
                                      rng.uniform(bounds.ymin, bounds.ymax),
                                      rng.uniform(0.0, 4.0));
        ap.a = rng.uniform(-45.0, -35.0);
        ap.b = rng.uniform(-3.5, -1.8);
        ap.sigma = rng.uniform(2.0, 6.0);
        ap.d0 = 1.0;
        env.aps.push_back(ap);
    }
    if (shadowing.enabled) {
        const double inv_len = 1.0 / shadowing.correlation_length;
        for (int i = 0; i < n_aps; ++i) {
            MatrixXd freq(shadowing.n_features, 2);
            VectorXd phase(shadowing.n_features);
            for (int k = 0; k < shadowing.n_features; ++k) {
                freq(k, 0) = rng.normal() * inv_len;
                freq(k, 1) = rng.normal() * inv_len;
                phase[k] = rng.uniform(0.0, 2.0 * M_PI);
            }
            env.shadow_freq.push_back(std::move(freq));
            env.shadow_phase.push_back(std::move(phase));
        }
    }
    return env;
}

WalkSpec WalkSpec::default_u_path() {
    WalkSpec spec;
    // Leg lengths 36.4 / 30.1 / 36.4 m at 0.7 m steps: 52 + 43 + 52 = 147.
    spec.waypoints = {{4.0, 2.0}, {4.0, 38.4}, {34.1, 38.4}, {34.1, 2.0}};
    spec.step_length = 0.7;
    return spec;
}

SimulatedWalk gen_walk(const Environment& env, const WalkSpec& spec, std::uint64_t seed) {
    if (spec.waypoints.size() < 2) throw InvalidArgumentError("gen_walk: needs >= 2 waypoints");
    if (spec.step_length <= 0.0) throw InvalidArgumentError("gen_walk: step length must be > 0");
    for (const auto& wp : spec.waypoints)
        if (!env.bounds.contains(wp.x(), wp.y()))
            throw InvalidArgumentError("gen_walk: waypoint outside the environment");

    std::vector<Eigen::Vector2d> controls;
    Eigen::Vector2d last_dir(0.0, 1.0);
    for (size_t leg = 0; leg + 1 < spec.waypoints.size(); ++leg) {
        const Eigen::Vector2d delta = spec.waypoints[leg + 1] - spec.waypoints[leg];
        const double len = delta.norm();
        const int n = static_cast<int>(std::floor(len / spec.step_length + 1e-9));
        if (n < 1)
            throw DataError("gen_walk: waypoint leg shorter than one step");
        last_dir = delta / len;
        const Eigen::Vector2d u = spec.step_length * last_dir;
        for (int i = 0; i < n; ++i) controls.push_back(u);
    }
    if (spec.step_count_hint > 0) {
        while (static_cast<int>(controls.size()) < spec.step_count_hint)
            controls.push_back(spec.step_length * last_dir);
        controls.resize(spec.step_count_hint);
    }
    const int t_max = static_cast<int>(controls.size());

    SimulatedWalk walk;
    walk.truth.resize(t_max + 1, 2);
    walk.true_controls.resize(t_max, 2);
    Eigen::Vector2d x = spec.waypoints[0];
    walk.truth.row(0) = x.transpose();
    for (int t = 0; t < t_max; ++t) {
        walk.true_controls.row(t) = controls[t].transpose();
        x += controls[t];
        walk.truth.row(t + 1) = x.transpose();
    }

    // Exported controls: the true displacement rotated by the accumulated
    // heading error, so a zero-error walk round-trips bit for bit.
    Rng rng(seed);
    walk.noisy_controls.reserve(t_max);
    const double step_period = 0.5;  // 2 Hz cadence
    for (int t = 0; t < t_max; ++t) {
        const double delta = spec.heading_bias * (t + 1) +
                             (spec.heading_noise_sd > 0.0
                                  ? rng.normal(0.0, spec.heading_noise_sd)
                                  : 0.0);
        ControlInput c;
        c.t = t + 1;
        c.step_length = spec.step_length;
        const double true_heading = std::atan2(controls[t].x(), controls[t].y());
        c.heading = true_heading + delta;
        if (delta == 0.0) {
            c.u = controls[t];
        } else {
            Eigen::Matrix2d rot;
            rot << std::cos(delta), std::sin(delta), -std::sin(delta), std::cos(delta);
            c.u = rot * controls[t];
        }
        walk.noisy_controls.push_back(c);
        walk.step_times.push_back(step_period * (t + 1));
    }

    // 100 Hz accelerometer with one raised-cosine bump per step.
    const double rate = 100.0;
    const double t_end = step_period * (t_max + 1);
    const double bump_half = 0.15, bump_amp = 3.0;
    const int n_samples = static_cast<int>(std::lround(t_end * rate)) + 1;
    walk.imu.linear_accel.reserve(n_samples);
    walk.imu.rotation.reserve(n_samples);
    for (int i = 0; i < n_samples; ++i) {
        const double tau = i / rate;
        double az = 0.0;
        const int nearest = static_cast<int>(std::lround(tau / step_period));
        for (int s = std::max(1, nearest - 1); s <= std::min(t_max, nearest + 1); ++s) {
            const double off = tau - step_period * s;
            if (std::abs(off) <= bump_half) az += bump_amp * sq(std::cos(M_PI * off / (2.0 * bump_half)));
        }
        az += rng.normal(0.0, 0.02);
        walk.imu.linear_accel.push_back({tau, az});

        const int step = std::min(std::max(nearest, 1), t_max);
        walk.imu.rotation.push_back(yaw_quaternion(tau, walk.noisy_controls[step - 1].heading));
    }
    walk.imu.validate();
    return walk;
}

std::vector<RssScan> gen_scans(const Environment& env, const MatrixXd& positions,
                               int scans_per_position, std::uint64_t seed) {
    if (positions.cols() != 2) throw ShapeError("gen_scans: positions must be n x 2");
    for (int i = 0; i < positions.rows(); ++i)
        if (!env.bounds.contains(positions(i, 0), positions(i, 1)))
            throw InvalidArgumentError("gen_scans: position outside the environment");

    Rng rng(seed);
    std::vector<RssScan> scans;
    scans.reserve(positions.rows() * scans_per_position);
    for (int i = 0; i < positions.rows(); ++i) {
        const Eigen::Vector2d p = positions.row(i).transpose();
        const Eigen::Vector3d p3(p.x(), p.y(), env.device_height);
        for (int rep = 0; rep < scans_per_position; ++rep) {
            RssScan scan;
            scan.timestamp = static_cast<double>(i);
            for (size_t ap = 0; ap < env.aps.size(); ++ap) {
                const ApModel& model = env.aps[ap];
                const double d = (p3 - model.position).norm();
                const double mean =
                    model.predict(d) + env.shadow(static_cast<int>(ap), p);
                const double rss = mean + (model.sigma > 0.0 ? rng.normal(0.0, model.sigma) : 0.0);
                if (rss >= env.rss_threshold) scan.readings[model.ap_id] = rss;
            }
            scans.push_back(std::move(scan));
        }
    }
    return scans;
}

CalibrationSet gen_calibration(const Environment& env, int n_points, int scans_per_point,
                               std::uint64_t seed) {
    if (n_points < 1) throw InvalidArgumentError("gen_calibration: needs at least one point");
    Rng rng(seed);
    CalibrationSet set;
    set.scans_per_point = scans_per_point;
    set.points.resize(n_points, 2);
    for (int i = 0; i < n_points; ++i) {
        set.points(i, 0) = rng.uniform(env.bounds.xmin, env.bounds.xmax);
        set.points(i, 1) = rng.uniform(env.bounds.ymin, env.bounds.ymax);
    }
    set.scans = gen_scans(env, set.points, scans_per_point, rng.next_u64());
    return set;
}

}  // namespace nav
