#pragma once

#include "nav/common.hpp"

namespace nav {

// ---------------------------------------------------------------------------
// Pedestrian dead reckoning from logged IMU streams: step detection on the
// vertical linear acceleration, heading from the rotation-vector quaternion,
// one control vector per detected step.
// ---------------------------------------------------------------------------

struct AccelSample {
    double t = 0.0;   // seconds
    double az = 0.0;  // vertical linear acceleration, m/s^2
};

struct RotationSample {
    double t = 0.0;
    // Unit quaternion (w, x, y, z) rotating body coordinates into world
    // coordinates; world x = east, y = north, z = up.
    double w = 1.0, x = 0.0, y = 0.0, z = 0.0;
};

struct ImuLog {
    std::vector<AccelSample> linear_accel;
    std::vector<RotationSample> rotation;

    void validate() const;
};

struct ControlInput {
    int t = 0;              // step index, 1-based
    Eigen::Vector2d u;      // displacement, meters (east, north)
    double step_length = 0.0;
    double heading = 0.0;   // radians, clockwise from north
};

struct StepDetectParams {
    double window = 0.15;         // rolling-mean width, seconds
    double min_prominence = 0.8;  // m/s^2
    double min_interval = 0.3;    // seconds between steps
};

/// Centered rolling mean, then peaks by prominence with a minimum spacing.
/// Spacing conflicts are resolved highest-peak-first.
std::vector<double> detect_steps(const std::vector<AccelSample>& accel,
                                 const StepDetectParams& params = {});

/// Heading of the body +y axis at time t, from the nearest quaternion sample:
/// atan2(east component, north component), in (-pi, pi].
double heading_at(const std::vector<RotationSample>& rotation, double t);

std::vector<ControlInput> build_controls(const std::vector<double>& step_times,
                                         const std::vector<RotationSample>& rotation,
                                         double step_length);

/// x_t = x_{t-1} + u_t; returns the T+1 positions including the start.
std::vector<Eigen::Vector2d> dead_reckon(const Eigen::Vector2d& x0,
                                         const std::vector<ControlInput>& controls);

/// Helper shared with the simulator: quaternion whose body +y axis points at
/// heading psi (radians clockwise from north).
RotationSample yaw_quaternion(double t, double psi);

}  // namespace nav
