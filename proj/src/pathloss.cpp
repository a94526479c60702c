#include "nav/pathloss.hpp"

#include <iostream>

namespace nav {

ApModel fit_pathloss(const std::string& ap_id, const Eigen::Vector3d& ap_position,
                     const std::vector<PathlossSample>& calib, double d0) {
    if (d0 <= 0.0) throw InvalidArgumentError("fit_pathloss: d0 must be positive");
    const int n = static_cast<int>(calib.size());
    if (n < 2) throw DataError("fit_pathloss: needs at least 2 samples");

    VectorXd s(n), r(n);
    for (int i = 0; i < n; ++i) {
        const double d = (calib[i].position - ap_position).norm();
        if (d < 1e-12) throw InvalidArgumentError("fit_pathloss: sample at the AP position");
        s[i] = 10.0 * std::log10(d / d0);
        r[i] = calib[i].rss;
    }
    const double s_mean = s.mean();
    const double sxx = (s.array() - s_mean).square().sum();
    if (sxx < 1e-12)
        throw DataError("fit_pathloss: all samples at one distance, slope not identifiable");

    const double r_mean = r.mean();
    const double sxy = ((s.array() - s_mean) * (r.array() - r_mean)).sum();
    ApModel m;
    m.ap_id = ap_id;
    m.position = ap_position;
    m.d0 = d0;
    m.b = sxy / sxx;
    m.a = r_mean - m.b * s_mean;
    const double ssr = (r.array() - m.a - m.b * s.array()).square().sum();
    m.sigma = std::sqrt(std::max(ssr, 0.0) / std::max(n - 2, 1));
    if (!std::isfinite(m.a) || !std::isfinite(m.b) || !std::isfinite(m.sigma))
        throw DataError("fit_pathloss: non-finite fit");
    return m;
}

double rss_loglik(const Eigen::Vector2d& x, const RssScan& scan,
                  const std::map<std::string, ApModel>& aps, const DeviceGeometry& geom) {
    if (scan.readings.empty()) throw DataError("rss_loglik: empty scan");
    double ll = 0.0;
    const Eigen::Vector3d p(x[0], x[1], geom.height);
    for (const auto& [ap_id, rss] : scan.readings) {
        const auto it = aps.find(ap_id);
        if (it == aps.end()) throw DataError("rss_loglik: no fitted model for AP " + ap_id);
        const ApModel& m = it->second;
        const double d = (p - m.position).norm();
        const double var = sq(std::max(m.sigma, 1e-6));
        ll += -0.5 * (std::log(2.0 * M_PI * var) + sq(rss - m.predict(d)) / var);
    }
    return ll;
}

namespace {

// Scans a centered grid; keeps the best node, first-in-lexicographic-order on
// ties (nodes are visited in ascending (x, y)).
void grid_scan(const RssScan& scan, const std::map<std::string, ApModel>& aps,
               const DeviceGeometry& geom, const Bounds2d& region, double x_lo, double x_hi,
               double y_lo, double y_hi, double cell, Eigen::Vector2d& best, double& best_ll) {
    x_lo = std::max(x_lo, region.xmin);
    y_lo = std::max(y_lo, region.ymin);
    x_hi = std::min(x_hi, region.xmax);
    y_hi = std::min(y_hi, region.ymax);
    const int nx = static_cast<int>(std::floor((x_hi - x_lo) / cell + 1e-9)) + 1;
    const int ny = static_cast<int>(std::floor((y_hi - y_lo) / cell + 1e-9)) + 1;
    for (int i = 0; i < nx; ++i) {
        for (int j = 0; j < ny; ++j) {
            const Eigen::Vector2d p(x_lo + i * cell, y_lo + j * cell);
            const double ll = rss_loglik(p, scan, aps, geom);
            if (ll > best_ll) {
                best_ll = ll;
                best = p;
            }
        }
    }
}

}  // namespace

LocalizeResult wifi_localize(const RssScan& scan, const std::map<std::string, ApModel>& aps,
                             const DeviceGeometry& geom, const Bounds2d& region) {
    if (scan.readings.empty()) throw DataError("wifi_localize: no readings in scan");
    if (region.width() <= 0.0 || region.height() <= 0.0)
        throw InvalidArgumentError("wifi_localize: degenerate region");
    if (scan.readings.size() < 3)
        std::cerr << "wifi_localize: only " << scan.readings.size()
                  << " AP(s) in scan; estimate may be ambiguous\n";

    Eigen::Vector2d best(region.xmin, region.ymin);
    double best_ll = kNegInf;
    grid_scan(scan, aps, geom, region, region.xmin, region.xmax, region.ymin, region.ymax, 2.0,
              best, best_ll);
    for (const double cell : {0.5, 0.1}) {
        const double radius = cell * 5.0;  // previous level's cell width
        Eigen::Vector2d center = best;
        grid_scan(scan, aps, geom, region, center[0] - radius, center[0] + radius,
                  center[1] - radius, center[1] + radius, cell, best, best_ll);
    }
    return {best, best_ll};
}

}  // namespace nav
