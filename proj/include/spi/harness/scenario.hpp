#pragma once

// One simulated trial: initial state, commanded input, ground truth,
// measurements at the scheduled times and the MAP estimate.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "spi/harness/config.hpp"
#include "spi/map_estimator.hpp"
#include "spi/motion_prior.hpp"
#include "spi/rng.hpp"
#include "spi/sensor_models.hpp"

namespace spi::harness {

/// Independent random streams of one trial.
enum class Stream : std::uint64_t { initial_state = 1, truth = 2, measurements = 3, estimator_prior = 4 };

inline std::uint64_t trial_seed(std::uint64_t base, std::size_t ka_index, std::size_t trial, Stream s,
                                std::uint64_t variant = 0)
{
    return derive_seed(base, ka_index, trial, (static_cast<std::uint64_t>(s) << 8) | variant);
}

struct Scenario
{
    Vec x0;
    Vec v0;
    PiecewiseConstantInput input;
    /// Noise-free commanded path on the ground-truth grid.
    Trajectory nominal;
};

inline std::vector<double> uniform_grid(double step, double duration)
{
    std::vector<double> t;
    const auto n = static_cast<std::size_t>(std::floor(duration / step + 1e-9));
    t.reserve(n + 2);
    for (std::size_t k = 0; k <= n; ++k)
        t.push_back(static_cast<double>(k) * step);
    if (duration - t.back() > 1e-9 * step)
        t.push_back(duration);
    return t;
}

/// Velocity input that starts at v0 and flips a component whenever the
/// noise-free path would leave [-h, h] along that axis. Keeps the robot
/// inside the anchor square for the whole run.
inline PiecewiseConstantInput bouncing_input(const Vec& x0, const Vec& v0, double h, double step, double duration)
{
    std::vector<double> breaks{0.0};
    std::vector<Vec> values{v0};
    Vec x = x0;
    Vec u = v0;
    const auto grid = uniform_grid(step, duration);
    for (std::size_t k = 0; k + 1 < grid.size(); ++k) {
        bool flipped = false;
        for (Eigen::Index i = 0; i < x.size(); ++i)
            if ((x[i] >= h && u[i] > 0.0) || (x[i] <= -h && u[i] < 0.0)) {
                u[i] = -u[i];
                flipped = true;
            }
        if (flipped) {
            if (breaks.back() == grid[k])
                values.back() = u;
            else {
                breaks.push_back(grid[k]);
                values.push_back(u);
            }
        }
        x += u * (grid[k + 1] - grid[k]);
    }
    return PiecewiseConstantInput(std::move(breaks), std::move(values));
}

inline Scenario make_scenario(const ExperimentConfig& cfg, std::uint64_t seed)
{
    const int d = cfg.dimension;
    Xoshiro256 rng(seed);
    Scenario s;
    s.x0.resize(d);
    s.v0.resize(d);
    for (int i = 0; i < d; ++i)
        s.x0[i] = rng.uniform(-cfg.motion.position_range, cfg.motion.position_range);
    for (int i = 0; i < d; ++i)
        s.v0[i] = rng.uniform(-cfg.motion.velocity_range, cfg.motion.velocity_range);
    s.input = bouncing_input(s.x0, s.v0, cfg.motion.arena_half_width, cfg.motion.gt_step, cfg.motion.duration);
    const auto grid = uniform_grid(cfg.motion.gt_step, cfg.motion.duration);
    Vec x = s.x0;
    s.nominal.samples.reserve(grid.size());
    s.nominal.samples.push_back({grid[0], x, s.input.at(grid[0])});
    for (std::size_t k = 1; k < grid.size(); ++k) {
        x += s.input.integrate(grid[k - 1], grid[k]);
        s.nominal.samples.push_back({grid[k], x, s.input.at(grid[k])});
    }
    s.nominal.seed = seed;
    return s;
}

/// t_k = t0 + k / rate for all t_k <= t_end.
inline std::vector<double> constant_rate_times(double rate_hz, double t0, double t_end)
{
    if (!(rate_hz > 0.0))
        throw InvalidArgument("measurement rate must be positive");
    std::vector<double> t;
    const double dt = 1.0 / rate_hz;
    const auto n = static_cast<std::size_t>(std::floor((t_end - t0) / dt + 1e-9));
    t.reserve(n + 1);
    for (std::size_t k = 0; k <= n; ++k)
        t.push_back(t0 + static_cast<double>(k) * dt);
    return t;
}

/// Query times of a per-step schedule with every interval stretched by
/// `stretch`, stopping at t_end.
inline std::vector<double> schedule_times(const std::vector<RateSample>& rates, double stretch, double t_end)
{
    std::vector<double> t;
    if (rates.empty())
        return t;
    double now = rates.front().time;
    for (const auto& r : rates) {
        if (now > t_end + 1e-12)
            break;
        t.push_back(now);
        now += stretch / r.rate_hz;
    }
    return t;
}

/// Ground truth sampled on the union of the truth grid and the query times.
inline Trajectory simulate_truth(const ExperimentConfig& cfg, const MotionPrior& prior, const Scenario& sc,
                                 const std::vector<double>& query_times, std::uint64_t seed)
{
    std::vector<double> grid = uniform_grid(cfg.motion.gt_step, cfg.motion.duration);
    grid.insert(grid.end(), query_times.begin(), query_times.end());
    std::sort(grid.begin(), grid.end());
    std::vector<double> merged;
    merged.reserve(grid.size());
    for (double t : grid)
        if (merged.empty() || t - merged.back() > 1e-9)
            merged.push_back(t);
    return sample_trajectory(prior, sc.x0, sc.input, merged, seed);
}

inline std::vector<MeasurementRecord> simulate_measurements(const Sensor& sensor, const Trajectory& truth,
                                                            const std::vector<double>& times, std::uint64_t seed,
                                                            NoiseMode mode = NoiseMode::sampled)
{
    GaussianStream noise(seed);
    std::vector<MeasurementRecord> out;
    for (double t : times) {
        auto recs = simulate_measurement(sensor, truth.position_at(t), t, noise, mode);
        out.insert(out.end(), std::make_move_iterator(recs.begin()), std::make_move_iterator(recs.end()));
    }
    return out;
}

/// MAP estimate with an initial-state prior N(x0 + e, ka^2 I), e ~ N(0, ka^2 I):
/// the estimator is told the start is known to the target accuracy, matching
/// the bound's J_0 = ka^-2 I.
inline EstimationResult estimate_trajectory(const ExperimentConfig& cfg, const MotionPrior& prior,
                                            const Sensor& sensor, const std::vector<MeasurementRecord>& meas,
                                            const PiecewiseConstantInput& input, const Vec& x0_true, double ka,
                                            std::uint64_t prior_seed)
{
    BuildOptions bo;
    bo.t_start = 0.0;
    if (cfg.estimator.initial_prior) {
        GaussianStream g(prior_seed);
        StatePrior p;
        p.mean = x0_true + ka * g.standard(cfg.dimension);
        p.info = Mat::Identity(cfg.dimension, cfg.dimension) / (ka * ka);
        bo.initial_prior = p;
    }
    const auto problem = build_problem(prior, sensor, meas, &input, bo);
    GaussNewtonOptions go;
    go.max_iter = cfg.estimator.max_iter;
    return solve_gauss_newton(problem, go);
}

} // namespace spi::harness
