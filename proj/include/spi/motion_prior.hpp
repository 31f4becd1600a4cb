#pragma once

// White-noise-on-velocity motion prior: x' = u + w, w ~ GP(0, Q delta(t - t')).
// Between two times the mean moves by the integrated input and the process
// covariance grows linearly with the interval.

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "spi/core.hpp"
#include "spi/rng.hpp"

namespace spi {

class MotionPrior
{
public:
    explicit MotionPrior(Mat psd) : psd_(std::move(psd))
    {
        if (psd_.rows() < 1 || psd_.rows() != psd_.cols())
            throw InvalidArgument("motion prior: power spectral density must be a non-empty square matrix");
        if (!linalg::is_symmetric(psd_, 1e-12))
            throw InvalidArgument("motion prior: power spectral density must be symmetric");
        if (!(linalg::min_eigenvalue(psd_) > 0.0))
            throw InvalidArgument("motion prior: power spectral density must be positive definite");
        psd_ = linalg::symmetrize(psd_);
        psd_inv_ = linalg::spd_inverse(psd_, 0.0);
    }

    static MotionPrior isotropic(int dim, double q) { return MotionPrior(q * Mat::Identity(dim, dim)); }

    /// Zero process noise. Only meant for tests of the deterministic parts;
    /// anything that needs the process information raises.
    static MotionPrior noiseless(int dim)
    {
        if (dim < 1)
            throw InvalidArgument("motion prior: dimension must be >= 1");
        MotionPrior p;
        p.psd_ = Mat::Zero(dim, dim);
        p.noiseless_ = true;
        return p;
    }

    int dim() const { return static_cast<int>(psd_.rows()); }
    const Mat& psd() const { return psd_; }
    bool is_noiseless() const { return noiseless_; }

    Mat process_cov(double dt) const
    {
        check_dt(dt);
        return psd_ * dt;
    }

    /// (Q dt)^-1.
    Mat process_info(double dt) const
    {
        check_dt(dt);
        if (noiseless_)
            throw NumericalSingularity("motion prior: process covariance is singular in noiseless mode");
        return psd_inv_ / dt;
    }

    const Mat& psd_inverse() const
    {
        if (noiseless_)
            throw NumericalSingularity("motion prior: process covariance is singular in noiseless mode");
        return psd_inv_;
    }

private:
    MotionPrior() = default;

    static void check_dt(double dt)
    {
        if (!(dt > 0.0))
            throw InvalidArgument("motion prior: time step must be positive");
    }

    Mat psd_;
    Mat psd_inv_;
    bool noiseless_ = false;
};

struct StateSample
{
    double time = 0.0;
    Vec position;
    Vec velocity_input;
};

struct Trajectory
{
    std::vector<StateSample> samples;
    std::uint64_t seed = 0;

    /// Throws unless there are >= 2 samples with strictly increasing times.
    void validate() const
    {
        if (samples.size() < 2)
            throw InvalidArgument("trajectory: at least two samples are required");
        for (std::size_t i = 1; i < samples.size(); ++i)
            if (!(samples[i].time > samples[i - 1].time))
                throw InvalidArgument("trajectory: sample times must be strictly increasing");
    }

    double start_time() const { return samples.front().time; }
    double end_time() const { return samples.back().time; }
    int dim() const { return samples.empty() ? 0 : static_cast<int>(samples.front().position.size()); }

    /// Linear interpolation of the position; times outside the support are
    /// clamped to the nearest endpoint.
    Vec position_at(double t) const
    {
        if (samples.empty())
            throw InvalidArgument("trajectory: empty");
        if (t <= samples.front().time)
            return samples.front().position;
        if (t >= samples.back().time)
            return samples.back().position;
        auto it = std::upper_bound(samples.begin(), samples.end(), t,
                                   [](double v, const StateSample& s) { return v < s.time; });
        const StateSample& b = *it;
        const StateSample& a = *(it - 1);
        const double w = (t - a.time) / (b.time - a.time);
        return (1.0 - w) * a.position + w * b.position;
    }
};

/// Velocity input held constant on [breaks[i], breaks[i+1]). Before the first
/// break the first value applies; after the last break the last value does.
class PiecewiseConstantInput
{
public:
    PiecewiseConstantInput() = default;

    PiecewiseConstantInput(std::vector<double> breaks, std::vector<Vec> values)
        : breaks_(std::move(breaks)), values_(std::move(values))
    {
        if (breaks_.empty() || breaks_.size() != values_.size())
            throw InvalidArgument("input: breaks and values must be non-empty and of equal length");
        for (std::size_t i = 1; i < breaks_.size(); ++i)
            if (!(breaks_[i] > breaks_[i - 1]))
                throw InvalidArgument("input: break times must be strictly increasing");
        for (const auto& v : values_)
            if (v.size() != values_.front().size())
                throw InvalidArgument("input: all values must share one dimension");
    }

    static PiecewiseConstantInput constant(const Vec& u) { return PiecewiseConstantInput({0.0}, {u}); }

    static PiecewiseConstantInput zero(int dim) { return constant(Vec::Zero(dim)); }

    bool empty() const { return values_.empty(); }
    int dim() const { return empty() ? 0 : static_cast<int>(values_.front().size()); }
    const std::vector<double>& breaks() const { return breaks_; }
    const std::vector<Vec>& values() const { return values_; }

    Vec at(double t) const { return values_[segment(t)]; }

    /// Integral of u over [t0, t1].
    Vec integrate(double t0, double t1) const
    {
        if (t1 < t0)
            return -integrate(t1, t0);
        Vec acc = Vec::Zero(dim());
        double t = t0;
        std::size_t i = segment(t0);
        while (t < t1) {
            const double seg_end = (i + 1 < breaks_.size()) ? std::min(t1, breaks_[i + 1]) : t1;
            acc += values_[i] * (seg_end - t);
            t = seg_end;
            ++i;
            if (i >= breaks_.size())
                i = breaks_.size() - 1;
        }
        return acc;
    }

private:
    std::size_t segment(double t) const
    {
        if (empty())
            throw InvalidArgument("input: empty input function");
        auto it = std::upper_bound(breaks_.begin(), breaks_.end(), t);
        if (it == breaks_.begin())
            return 0;
        return static_cast<std::size_t>(it - breaks_.begin()) - 1;
    }

    std::vector<double> breaks_;
    std::vector<Vec> values_;
};

struct ProcessModel
{
    Mat jacobian;
    Mat cov;
};

inline Vec propagate_mean(const MotionPrior& prior, const Vec& x, const Vec& u, double dt)
{
    if (!(dt > 0.0))
        throw InvalidArgument("propagate_mean: time step must be positive");
    if (x.size() != prior.dim() || u.size() != prior.dim())
        throw InvalidArgument("propagate_mean: dimension mismatch");
    return x + u * dt;
}

inline ProcessModel process_jacobian_and_cov(const MotionPrior& prior, double dt)
{
    return {Mat::Identity(prior.dim(), prior.dim()), prior.process_cov(dt)};
}

/// Draws x_{k+1} = x_k + int(u) + w_k with w_k ~ N(0, Q dt_k) on the given
/// grid. Deterministic in `seed`.
inline Trajectory sample_trajectory(const MotionPrior& prior, const Vec& x0,
                                    const PiecewiseConstantInput& input,
                                    std::span<const double> t_grid, std::uint64_t seed)
{
    const int d = prior.dim();
    if (x0.size() != d || input.dim() != d)
        throw InvalidArgument("sample_trajectory: dimension mismatch");
    if (t_grid.size() < 2)
        throw InvalidArgument("sample_trajectory: time grid needs at least two points");
    for (std::size_t i = 1; i < t_grid.size(); ++i)
        if (!(t_grid[i] > t_grid[i - 1]))
            throw InvalidArgument("sample_trajectory: time grid must be strictly increasing");

    const Mat chol = prior.is_noiseless() ? Mat::Zero(d, d) : Mat(prior.psd().llt().matrixL());
    GaussianStream noise(seed);

    Trajectory traj;
    traj.seed = seed;
    traj.samples.reserve(t_grid.size());
    Vec x = x0;
    for (std::size_t k = 0; k < t_grid.size(); ++k) {
        traj.samples.push_back({t_grid[k], x, input.at(t_grid[k])});
        if (k + 1 == t_grid.size())
            break;
        const double dt = t_grid[k + 1] - t_grid[k];
        const Vec z = noise.standard(d);
        x = x + input.integrate(t_grid[k], t_grid[k + 1]);
        if (!prior.is_noiseless())
            x += std::sqrt(dt) * chol * z;
    }
    return traj;
}

} // namespace spi
