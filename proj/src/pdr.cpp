#include "nav/pdr.hpp"

#include <algorithm>

namespace nav {

void ImuLog::validate() const {
    for (size_t i = 1; i < linear_accel.size(); ++i)
        if (linear_accel[i].t <= linear_accel[i - 1].t)
            throw DataError("ImuLog: acceleration timestamps not strictly increasing");
    for (size_t i = 1; i < rotation.size(); ++i)
        if (rotation[i].t <= rotation[i - 1].t)
            throw DataError("ImuLog: rotation timestamps not strictly increasing");
    for (const auto& q : rotation) {
        const double norm = std::sqrt(q.w * q.w + q.x * q.x + q.y * q.y + q.z * q.z);
        if (std::abs(norm - 1.0) > 1e-3)
            throw DataError("ImuLog: quaternion not unit-norm");
    }
}

std::vector<double> detect_steps(const std::vector<AccelSample>& accel,
                                 const StepDetectParams& params) {
    if (accel.empty()) throw DataError("detect_steps: empty acceleration series");
    const int n = static_cast<int>(accel.size());

    // Sample spacing from the median interval; the series is near-uniform.
    double dt = 0.01;
    if (n > 1) {
        std::vector<double> gaps(n - 1);
        for (int i = 1; i < n; ++i) gaps[i - 1] = accel[i].t - accel[i - 1].t;
        std::nth_element(gaps.begin(), gaps.begin() + (n - 1) / 2, gaps.end());
        dt = std::max(gaps[(n - 1) / 2], 1e-6);
    }
    const int half = std::max(0, static_cast<int>(std::lround(params.window / dt)) / 2);
    if (n < 2 * half + 1) throw DataError("detect_steps: series shorter than the rolling window");

    std::vector<double> smooth(n);
    for (int i = 0; i < n; ++i) {
        const int lo = std::max(0, i - half), hi = std::min(n - 1, i + half);
        double s = 0.0;
        for (int j = lo; j <= hi; ++j) s += accel[j].az;
        smooth[i] = s / (hi - lo + 1);
    }

    struct Peak {
        int idx;
        double height, prominence;
    };
    std::vector<Peak> peaks;
    for (int i = 1; i + 1 < n; ++i) {
        if (!(smooth[i] > smooth[i - 1] && smooth[i] >= smooth[i + 1])) continue;
        // Prominence: drop to the lowest point before a higher sample is met,
        // on each side; the larger of the two valley floors is the base.
        double left_min = smooth[i], right_min = smooth[i];
        for (int j = i - 1; j >= 0 && smooth[j] <= smooth[i]; --j)
            left_min = std::min(left_min, smooth[j]);
        for (int j = i + 1; j < n && smooth[j] <= smooth[i]; ++j)
            right_min = std::min(right_min, smooth[j]);
        const double prom = smooth[i] - std::max(left_min, right_min);
        if (prom >= params.min_prominence) peaks.push_back({i, smooth[i], prom});
    }

    // Enforce the minimum interval, keeping taller peaks first.
    std::vector<Peak> by_height = peaks;
    std::stable_sort(by_height.begin(), by_height.end(),
                     [](const Peak& a, const Peak& b) { return a.height > b.height; });
    std::vector<bool> keep(peaks.size(), false);
    std::vector<double> kept_times;
    for (const Peak& p : by_height) {
        const double t = accel[p.idx].t;
        bool ok = true;
        for (const double kt : kept_times)
            if (std::abs(kt - t) < params.min_interval) {
                ok = false;
                break;
            }
        if (ok) kept_times.push_back(t);
    }
    std::sort(kept_times.begin(), kept_times.end());
    return kept_times;
}

namespace {

Eigen::Matrix3d rotation_matrix(const RotationSample& q) {
    Eigen::Matrix3d r;
    const double w = q.w, x = q.x, y = q.y, z = q.z;
    r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
    return r;
}

}  // namespace

double heading_at(const std::vector<RotationSample>& rotation, double t) {
    if (rotation.empty()) throw DataError("heading_at: empty rotation series");
    if (t < rotation.front().t - 1e-9 || t > rotation.back().t + 1e-9)
        throw InvalidArgumentError("heading_at: time outside the rotation series");

    const auto it = std::lower_bound(
        rotation.begin(), rotation.end(), t,
        [](const RotationSample& s, double v) { return s.t < v; });
    const RotationSample* best = (it == rotation.end()) ? &rotation.back() : &*it;
    if (it != rotation.begin()) {
        const RotationSample* prev = &*(it - 1);
        if (std::abs(prev->t - t) <= std::abs(best->t - t)) best = prev;
    }

    const Eigen::Vector3d pointing = rotation_matrix(*best) * Eigen::Vector3d(0, 1, 0);
    double psi = std::atan2(pointing.x(), pointing.y());
    if (psi <= -M_PI) psi += 2.0 * M_PI;
    return psi;
}

std::vector<ControlInput> build_controls(const std::vector<double>& step_times,
                                         const std::vector<RotationSample>& rotation,
                                         double step_length) {
    if (step_times.empty()) throw DataError("build_controls: no steps detected");
    std::vector<ControlInput> controls;
    controls.reserve(step_times.size());
    for (size_t i = 0; i < step_times.size(); ++i) {
        ControlInput c;
        c.t = static_cast<int>(i) + 1;
        c.heading = heading_at(rotation, step_times[i]);
        c.step_length = step_length;
        c.u = step_length * Eigen::Vector2d(std::sin(c.heading), std::cos(c.heading));
        controls.push_back(c);
    }
    return controls;
}

std::vector<Eigen::Vector2d> dead_reckon(const Eigen::Vector2d& x0,
                                         const std::vector<ControlInput>& controls) {
    std::vector<Eigen::Vector2d> traj;
    traj.reserve(controls.size() + 1);
    traj.push_back(x0);
    for (const auto& c : controls) traj.push_back(traj.back() + c.u);
    return traj;
}

RotationSample yaw_quaternion(double t, double psi) {
    // Rotation about world +z by -psi maps body +y to (sin psi, cos psi, 0).
    RotationSample q;
    q.t = t;
    q.w = std::cos(0.5 * psi);
    q.z = -std::sin(0.5 * psi);
    return q;
}

}  // namespace nav
