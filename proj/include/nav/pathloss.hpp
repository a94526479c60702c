#pragma once

#include "nav/common.hpp"

#include <map>
#include <string>

namespace nav {

// ---------------------------------------------------------------------------
// Log-distance propagation model per access point and maximum-likelihood
// position estimation from a single RSS scan.
// ---------------------------------------------------------------------------

struct ApModel {
    std::string ap_id;
    Eigen::Vector3d position;  // AP position, meters
    double a = 0.0;            // RSS at the reference distance, dBm
    double b = 0.0;            // path-loss slope, dB per decade
    double sigma = 1.0;        // residual std, dB
    double d0 = 1.0;           // reference distance, meters

    /// Model-predicted RSS at 3-D distance d (clamped away from zero).
    double predict(double d) const {
        return a + 10.0 * b * std::log10(std::max(d, 0.01) / d0);
    }
};

struct RssScan {
    double timestamp = 0.0;
    std::map<std::string, double> readings;  // ap_id -> dBm
};

struct DeviceGeometry {
    double height = 1.2;  // phone height above ground, meters
};

struct Bounds2d {
    double xmin = 0.0, ymin = 0.0, xmax = 0.0, ymax = 0.0;

    double width() const { return xmax - xmin; }
    double height() const { return ymax - ymin; }
    bool contains(double x, double y) const {
        return x >= xmin && x <= xmax && y >= ymin && y <= ymax;
    }
};

/// One calibration sample for a single AP: where the phone was and what it
/// heard.
struct PathlossSample {
    Eigen::Vector3d position;
    double rss = 0.0;
};

/// Ordinary least-squares fit of (A, B) against 10*log10(d/d0), residual std
/// with denominator max(n-2, 1). Needs >= 2 samples at >= 2 distinct
/// distances, none on top of the AP.
ApModel fit_pathloss(const std::string& ap_id, const Eigen::Vector3d& ap_position,
                     const std::vector<PathlossSample>& calib, double d0 = 1.0);

double rss_loglik(const Eigen::Vector2d& x, const RssScan& scan,
                  const std::map<std::string, ApModel>& aps, const DeviceGeometry& geom);

struct LocalizeResult {
    Eigen::Vector2d estimate;
    double loglik = 0.0;
};

/// Maximum-likelihood position via 3-level coarse-to-fine grid search
/// (cells 2 m, 0.5 m, 0.1 m); ties break toward the lexicographically
/// smallest coordinate. Warns on stderr when fewer than 3 APs are usable.
LocalizeResult wifi_localize(const RssScan& scan, const std::map<std::string, ApModel>& aps,
                             const DeviceGeometry& geom, const Bounds2d& region);

}  // namespace nav
