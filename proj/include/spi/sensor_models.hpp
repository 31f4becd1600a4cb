#pragma once

// Position and range measurement models.
//
// Position: y = x + eta, eta ~ N(0, R_p), H = I.
// Range:    r = |p_a - x| + eta, eta ~ N(0, sigma_r^2), H = -(p_a - x)^T / |p_a - x|.

#include <optional>
#include <variant>
#include <vector>

#include "spi/core.hpp"
#include "spi/quadrature.hpp"
#include "spi/rng.hpp"

namespace spi {

/// Anchor-state separation below which range geometry is singular (m).
inline constexpr double kCoincidenceDistance = 1e-6;

struct PositionSensor
{
    Mat cov;

    explicit PositionSensor(Mat covariance) : cov(std::move(covariance))
    {
        if (cov.rows() < 1 || cov.rows() != cov.cols() || !linalg::is_symmetric(cov, 1e-12)
            || !(linalg::min_eigenvalue(cov) > 0.0))
            throw InvalidArgument("position sensor: covariance must be symmetric positive definite");
        cov = linalg::symmetrize(cov);
    }

    static PositionSensor isotropic(int dim, double variance)
    {
        return PositionSensor(variance * Mat::Identity(dim, dim));
    }

    int dim() const { return static_cast<int>(cov.rows()); }
};

struct RangeSensor
{
    double variance = 0.0;
    std::vector<Vec> anchors;
    /// Indices of the anchors ranged in one query; empty means all.
    std::vector<std::size_t> active;

    RangeSensor(double var, std::vector<Vec> anchor_positions, std::vector<std::size_t> active_subset = {})
        : variance(var), anchors(std::move(anchor_positions)), active(std::move(active_subset))
    {
        if (!(variance > 0.0))
            throw InvalidArgument("range sensor: variance must be positive");
        if (anchors.empty())
            throw InvalidArgument("range sensor: at least one anchor is required");
        for (const auto& a : anchors)
            if (a.size() != anchors.front().size())
                throw InvalidArgument("range sensor: anchors must share one dimension");
        for (std::size_t i : active)
            if (i >= anchors.size())
                throw InvalidArgument("range sensor: active anchor index out of range");
    }

    int dim() const { return static_cast<int>(anchors.front().size()); }

    std::vector<std::size_t> active_indices() const
    {
        if (!active.empty())
            return active;
        std::vector<std::size_t> all(anchors.size());
        for (std::size_t i = 0; i < all.size(); ++i)
            all[i] = i;
        return all;
    }
};

using Sensor = std::variant<PositionSensor, RangeSensor>;

inline int sensor_dim(const Sensor& s)
{
    return std::visit([](const auto& v) { return v.dim(); }, s);
}

enum class MeasurementKind { position, range };

struct MeasurementRecord
{
    double time = 0.0;
    MeasurementKind kind = MeasurementKind::position;
    Vec value;
    std::optional<std::size_t> anchor_index;
};

enum class NoiseMode { sampled, noiseless };

inline Mat position_jacobian(const PositionSensor& sensor)
{
    return Mat::Identity(sensor.dim(), sensor.dim());
}

inline RowVec range_jacobian(const Vec& anchor, const Vec& x)
{
    if (anchor.size() != x.size())
        throw InvalidArgument("range_jacobian: dimension mismatch");
    const Vec diff = anchor - x;
    const double dist = diff.norm();
    if (!(dist > kCoincidenceDistance))
        throw SingularGeometry("range_jacobian: state coincides with anchor", std::nullopt);
    return -diff.transpose() / dist;
}

/// Sum over active anchors of E[H_a^T H_a], with the expectation taken over
/// nominal + offset for a zero-mean quadrature grid of offsets.
inline Mat range_geometry(const RangeSensor& sensor, const Vec& nominal, const std::vector<QuadraturePoint>& offsets)
{
    const int d = sensor.dim();
    if (nominal.size() != d)
        throw InvalidArgument("range_geometry: dimension mismatch");
    Mat info = Mat::Zero(d, d);
    Vec diff(d), h(d);
    for (std::size_t a : sensor.active_indices()) {
        const Vec& anchor = sensor.anchors[a];
        for (const auto& q : offsets) {
            diff.noalias() = anchor - (nominal + q.point);
            const double dist = diff.norm();
            if (!(dist > kCoincidenceDistance))
                throw SingularGeometry("expected_information: quadrature point within "
                                           + std::to_string(kCoincidenceDistance) + " m of anchor "
                                           + std::to_string(a),
                                       a);
            h.noalias() = diff / dist;
            info.noalias() += q.weight * (h * h.transpose());
        }
    }
    return linalg::symmetrize(info);
}

/// Sum over active anchors of E[H_a^T H_a] under N(nominal, spread), i.e. the
/// range information per unit measurement precision.
inline Mat range_geometry(const RangeSensor& sensor, const Vec& nominal, const Mat& spread, int order)
{
    if (nominal.size() != sensor.dim())
        throw InvalidArgument("range_geometry: dimension mismatch");
    return range_geometry(sensor, nominal, gaussian_grid(Vec::Zero(nominal.size()), spread, order));
}

/// E[H^T R^-1 H]. Position sensors return R_p^-1 directly.
inline Mat expected_information(const Sensor& sensor, const Vec& nominal, const Mat& spread, int order)
{
    if (order < 1)
        throw InvalidArgument("expected_information: quadrature order must be >= 1");
    if (spread.rows() != spread.cols() || spread.rows() != nominal.size())
        throw InvalidArgument("expected_information: spread dimension mismatch");
    if (linalg::min_eigenvalue(spread) < -1e-12 * linalg::scale_of(spread))
        throw InvalidArgument("expected_information: spread must be positive semidefinite");
    if (const auto* p = std::get_if<PositionSensor>(&sensor)) {
        if (nominal.size() != p->dim())
            throw InvalidArgument("expected_information: dimension mismatch");
        return linalg::spd_inverse(p->cov, 0.0);
    }
    const auto& r = std::get<RangeSensor>(sensor);
    return range_geometry(r, nominal, spread, order) / r.variance;
}

/// One record for a position sensor, one per active anchor for a range sensor.
inline std::vector<MeasurementRecord> simulate_measurement(const Sensor& sensor, const Vec& true_state,
                                                           double time, GaussianStream& noise,
                                                           NoiseMode mode = NoiseMode::sampled)
{
    std::vector<MeasurementRecord> out;
    if (const auto* p = std::get_if<PositionSensor>(&sensor)) {
        if (true_state.size() != p->dim())
            throw InvalidArgument("simulate_measurement: dimension mismatch");
        Vec value = true_state;
        if (mode == NoiseMode::sampled)
            value += Mat(p->cov.llt().matrixL()) * noise.standard(p->dim());
        out.push_back({time, MeasurementKind::position, std::move(value), std::nullopt});
        return out;
    }
    const auto& r = std::get<RangeSensor>(sensor);
    if (true_state.size() != r.dim())
        throw InvalidArgument("simulate_measurement: dimension mismatch");
    const double sigma = std::sqrt(r.variance);
    for (std::size_t a : r.active_indices()) {
        const double dist = (r.anchors[a] - true_state).norm();
        if (!(dist > kCoincidenceDistance))
            throw SingularGeometry("simulate_measurement: state coincides with anchor " + std::to_string(a), a);
        Vec value(1);
        value[0] = dist + (mode == NoiseMode::sampled ? sigma * noise.next() : 0.0);
        out.push_back({time, MeasurementKind::range, std::move(value), a});
    }
    return out;
}

} // namespace spi
