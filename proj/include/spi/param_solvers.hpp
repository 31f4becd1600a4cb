#pragma once

// Sensor parameter identification along a nominal trajectory: minimal query
// rate (per step or constant) for a known sensor, or minimal-trace precision
// (loosest covariance) for a known rate.

#include <chrono>
#include <limits>
#include <optional>
#include <variant>
#include <vector>

#include "spi/conic.hpp"
#include "spi/motion_prior.hpp"
#include "spi/pcrb.hpp"
#include "spi/sensor_models.hpp"

namespace spi {

struct SolverOptions
{
    SolverTolerances tol;
    Bracket bracket;
    int quadrature_order = 3;
    /// Covariance of the quadrature grid; ka^2 I when unset.
    std::optional<Mat> spread;
    /// Restrict a position covariance to a multiple of the identity.
    bool isotropic_position = false;
    std::size_t max_steps = std::numeric_limits<std::size_t>::max();
};

enum class ScheduleMode { per_step, constant };

inline const char* to_string(ScheduleMode m)
{
    return m == ScheduleMode::constant ? "constant" : "per-step";
}

struct RateSample
{
    double time = 0.0;
    double rate_hz = 0.0;
};

struct ScheduleSolution
{
    ScheduleMode mode = ScheduleMode::constant;
    std::vector<RateSample> rates;
    /// Constant mode only.
    double constant_rate = 0.0;
    /// Sensor information the constant-rate problem was solved with.
    Mat sensor_info;
    SolveStatus status;
    std::vector<InfoState> info_trace;
    std::optional<std::size_t> failed_step;
};

struct PositionCovarianceTarget
{
    int dim = 0;
    bool isotropic = false;
};

struct RangeCovarianceTarget
{
    std::vector<Vec> anchors;
    std::vector<std::size_t> active;
};

using CovarianceTarget = std::variant<PositionCovarianceTarget, RangeCovarianceTarget>;

struct CovarianceSolution
{
    ScheduleMode mode = ScheduleMode::constant;
    std::vector<double> times;
    /// R^-1 per step (a single entry in constant mode). 1x1 for range sensors.
    std::vector<Mat> precision;
    /// R per step; empty when the precision is singular (covariance unbounded).
    std::vector<std::optional<Mat>> implied_cov;
    SolveStatus status;
    /// sqrt(lambda_max(Q / m)): accuracies at or below this are unreachable.
    double ka_min = 0.0;
    std::vector<InfoState> info_trace;
    std::optional<std::size_t> failed_step;
};

namespace detail {

inline Mat quadrature_spread(const AccuracySpec& acc, int d, const SolverOptions& opts)
{
    if (opts.spread) {
        if (opts.spread->rows() != d || opts.spread->cols() != d)
            throw InvalidArgument("solver options: spread dimension mismatch");
        return *opts.spread;
    }
    return acc.ka * acc.ka * Mat::Identity(d, d);
}

inline void check_range_anchors(std::size_t active, int d)
{
    if (active < static_cast<std::size_t>(d))
        throw InvalidArgument("range sensor: at least " + std::to_string(d) + " active anchors are required in "
                              + std::to_string(d) + "-D (a single range cannot constrain the full state)");
}

inline void check_sensor(const MotionPrior& prior, const Sensor& sensor)
{
    if (sensor_dim(sensor) != prior.dim())
        throw InvalidArgument("sensor and motion prior dimensions differ");
    if (const auto* r = std::get_if<RangeSensor>(&sensor))
        check_range_anchors(r->active_indices().size(), prior.dim());
}

inline void check_nominal(const MotionPrior& prior, const Trajectory& nominal)
{
    nominal.validate();
    if (nominal.dim() != prior.dim())
        throw InvalidArgument("nominal trajectory and motion prior dimensions differ");
}

/// Smallest eigenvalue of `info_at(x)` over every nominal sample.
template <typename InfoAt>
double pessimistic_min_eigenvalue(const Trajectory& nominal, InfoAt&& info_at)
{
    double worst = std::numeric_limits<double>::infinity();
    for (const auto& s : nominal.samples)
        worst = std::min(worst, linalg::min_eigenvalue(info_at(s.position)));
    return std::max(worst, 0.0);
}

inline std::optional<Mat> invert_if_definite(const Mat& precision)
{
    const double lo = linalg::min_eigenvalue(precision);
    if (!(lo > 1e-12 * linalg::scale_of(precision)))
        return std::nullopt;
    return linalg::spd_inverse(precision, 0.0);
}

} // namespace detail

/// Sensor information for constant-rate problems. Position sensors use R^-1.
/// Range sensors use the most pessimistic isotropic information along the
/// nominal trajectory: min over samples of lambda_min(E[H^T R^-1 H]), times I.
inline Mat nominal_information(const Sensor& sensor, const Trajectory& nominal, const Mat& spread, int order)
{
    if (const auto* p = std::get_if<PositionSensor>(&sensor))
        return linalg::spd_inverse(p->cov, 0.0);
    // Validates the spread and order once; the grid is then reused at every sample.
    const int d = sensor_dim(sensor);
    expected_information(sensor, nominal.samples.front().position, spread, order);
    const auto& r = std::get<RangeSensor>(sensor);
    const auto offsets = gaussian_grid(Vec::Zero(d), spread, order);
    const double worst = detail::pessimistic_min_eigenvalue(
        nominal, [&](const Vec& x) { return Mat(range_geometry(r, x, offsets) / r.variance); });
    return worst * Mat::Identity(d, d);
}

inline ScheduleSolution solve_constant_rate(const MotionPrior& prior, const Sensor& sensor, const AccuracySpec& acc,
                                            const Trajectory& nominal, const SolverOptions& opts = {})
{
    const auto start = std::chrono::steady_clock::now();
    detail::check_sensor(prior, sensor);
    detail::check_nominal(prior, nominal);
    const int d = prior.dim();

    ScheduleSolution sol;
    sol.mode = ScheduleMode::constant;
    sol.sensor_info = nominal_information(sensor, nominal, detail::quadrature_spread(acc, d, opts), opts.quadrature_order);

    const InfoState j0 = initialize(KnownState{d, acc.ka}, nominal.start_time());
    const LmiInstance lmi = build_rate_lmi(j0, prior, sol.sensor_info, acc);
    const ScalarResult res = minimize_scalar(lmi, opts.bracket, opts.tol);
    sol.status = res.status;
    sol.info_trace.push_back(j0);
    if (res.status.ok()) {
        sol.constant_rate = res.value;
        sol.rates.push_back({nominal.start_time(), res.value});
        sol.info_trace.push_back(recurse(j0, assemble_dblocks(prior, sol.sensor_info, 1.0 / res.value)));
    }
    sol.status.wall_time = detail::seconds_since(start);
    return sol;
}

/// Step-by-step schedule: at t_k solve for m_k given J_k, advance the bound
/// with dt = 1/m_k, and repeat until the nominal horizon is covered.
inline ScheduleSolution solve_per_step_schedule(const MotionPrior& prior, const Sensor& sensor,
                                                const AccuracySpec& acc, const Trajectory& nominal,
                                                const InfoState& init, const SolverOptions& opts = {})
{
    const auto start = std::chrono::steady_clock::now();
    detail::check_sensor(prior, sensor);
    detail::check_nominal(prior, nominal);
    const int d = prior.dim();
    if (init.info.rows() != d)
        throw InvalidArgument("solve_per_step_schedule: initial information dimension mismatch");
    const Mat spread = detail::quadrature_spread(acc, d, opts);

    ScheduleSolution sol;
    sol.mode = ScheduleMode::per_step;
    InfoState state = init;
    state.time = nominal.start_time();
    sol.info_trace.push_back(state);
    double t = nominal.start_time();
    const double end = nominal.end_time();
    std::size_t step = 0;
    while (t < end && step < opts.max_steps) {
        const Mat info = expected_information(sensor, nominal.position_at(t), spread, opts.quadrature_order);
        const ScalarResult res = minimize_scalar(build_rate_lmi(state, prior, info, acc), opts.bracket, opts.tol);
        sol.status.iterations += res.status.iterations;
        if (!res.status.ok()) {
            sol.status.status = res.status.status;
            sol.status.certificate = "step " + std::to_string(step) + " (t = " + detail::fmt(t)
                                     + " s): " + res.status.certificate;
            sol.failed_step = step;
            break;
        }
        if (!res.status.note.empty() && sol.status.note.empty())
            sol.status.note = "step " + std::to_string(step) + ": " + res.status.note;
        sol.rates.push_back({t, res.value});
        const double dt = 1.0 / res.value;
        state = recurse(state, assemble_dblocks(prior, info, dt));
        sol.info_trace.push_back(state);
        t += dt;
        ++step;
    }
    sol.status.wall_time = detail::seconds_since(start);
    return sol;
}

namespace detail {

struct PrecisionParametrization
{
    std::vector<Mat> info_basis;
    std::vector<Mat> precision_basis;
    std::vector<double> identity_params;
};

inline PrecisionParametrization position_parametrization(int d, bool isotropic)
{
    PrecisionParametrization p;
    if (isotropic) {
        p.precision_basis = {Mat::Identity(d, d)};
        p.identity_params = {1.0};
    } else {
        p.precision_basis = symmetric_basis(d);
        p.identity_params.assign(p.precision_basis.size(), 0.0);
        for (int i = 0; i < d; ++i)
            p.identity_params[static_cast<std::size_t>(i)] = 1.0;
    }
    p.info_basis = p.precision_basis;
    return p;
}

inline PrecisionParametrization range_parametrization(const Mat& geometry)
{
    return {{geometry}, {Mat::Identity(1, 1)}, {1.0}};
}

} // namespace detail

/// Loosest sensor covariance (minimal-trace precision) meeting the accuracy
/// at a given query rate. Constant mode solves once with J = ka^-2 I;
/// per-step mode solves at every query time and advances the bound.
inline CovarianceSolution solve_covariance(const MotionPrior& prior, const CovarianceTarget& target, double rate_hz,
                                           const AccuracySpec& acc, const Trajectory& nominal, ScheduleMode mode,
                                           const SolverOptions& opts = {})
{
    const auto start = std::chrono::steady_clock::now();
    if (!(rate_hz > 0.0) || !std::isfinite(rate_hz))
        throw InvalidArgument("solve_covariance: rate must be positive");
    detail::check_nominal(prior, nominal);
    const int d = prior.dim();
    const double dt = 1.0 / rate_hz;
    const Mat spread = detail::quadrature_spread(acc, d, opts);

    std::optional<RangeSensor> geometry_sensor;
    if (const auto* p = std::get_if<PositionCovarianceTarget>(&target)) {
        if (p->dim != d)
            throw InvalidArgument("solve_covariance: sensor and motion prior dimensions differ");
    } else {
        const auto& r = std::get<RangeCovarianceTarget>(target);
        geometry_sensor.emplace(1.0, r.anchors, r.active);
        if (geometry_sensor->dim() != d)
            throw InvalidArgument("solve_covariance: sensor and motion prior dimensions differ");
        detail::check_range_anchors(geometry_sensor->active_indices().size(), d);
    }
    const bool isotropic = opts.isotropic_position
                           || (std::holds_alternative<PositionCovarianceTarget>(target)
                               && std::get<PositionCovarianceTarget>(target).isotropic);

    auto parametrization_at = [&](const Vec& x) {
        if (!geometry_sensor)
            return detail::position_parametrization(d, isotropic);
        return detail::range_parametrization(range_geometry(*geometry_sensor, x, spread, opts.quadrature_order));
    };

    CovarianceSolution sol;
    sol.mode = mode;
    InfoState state = initialize(KnownState{d, acc.ka}, nominal.start_time());
    sol.info_trace.push_back(state);

    std::optional<detail::PrecisionParametrization> constant_param;
    if (mode == ScheduleMode::constant) {
        if (geometry_sensor) {
            range_geometry(*geometry_sensor, nominal.samples.front().position, spread, opts.quadrature_order);
            const auto offsets = gaussian_grid(Vec::Zero(d), spread, opts.quadrature_order);
            const double worst = detail::pessimistic_min_eigenvalue(
                nominal, [&](const Vec& x) { return range_geometry(*geometry_sensor, x, offsets); });
            constant_param = detail::range_parametrization(worst * Mat::Identity(d, d));
        } else {
            constant_param = detail::position_parametrization(d, isotropic);
        }
    }

    double t = nominal.start_time();
    std::size_t step = 0;
    const std::size_t steps = (mode == ScheduleMode::constant) ? 1 : opts.max_steps;
    while (step < steps && (mode == ScheduleMode::constant || t < nominal.end_time())) {
        const auto param = constant_param ? *constant_param : parametrization_at(nominal.position_at(t));
        const LmiInstance lmi = build_precision_lmi(state, prior, dt, param.info_basis, param.precision_basis,
                                                    param.identity_params, acc);
        const MatrixResult res = minimize_trace_sdp(lmi, acc, opts.tol);
        sol.ka_min = res.ka_min;
        sol.status.iterations += res.status.iterations;
        sol.status.kkt_residual = std::max(sol.status.kkt_residual, res.status.kkt_residual);
        if (!res.status.ok()) {
            sol.status.status = res.status.status;
            sol.status.certificate = (mode == ScheduleMode::per_step ? "step " + std::to_string(step) + ": " : "")
                                     + res.status.certificate + "; threshold ka_min = sqrt(lambda_max(Q)/m) = "
                                     + detail::fmt(res.ka_min) + " m";
            sol.failed_step = step;
            if (res.status.status == Status::max_iterations) {
                sol.times.push_back(t);
                sol.precision.push_back(res.precision);
                sol.implied_cov.push_back(detail::invert_if_definite(res.precision));
            }
            break;
        }
        sol.times.push_back(t);
        sol.precision.push_back(res.precision);
        sol.implied_cov.push_back(detail::invert_if_definite(res.precision));
        if (mode == ScheduleMode::per_step) {
            Mat info = Mat::Zero(d, d);
            for (std::size_t i = 0; i < res.params.size(); ++i)
                info += res.params[i] * param.info_basis[i];
            state = recurse(state, assemble_dblocks(prior, linalg::clamp_psd(info), dt));
            sol.info_trace.push_back(state);
        }
        t += dt;
        ++step;
    }
    sol.status.wall_time = detail::seconds_since(start);
    return sol;
}

} // namespace spi
