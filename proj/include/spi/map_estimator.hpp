#pragma once

// Batch MAP trajectory estimation over position states at the measurement
// times. The WNOV prior links only consecutive states, so the normal
// equations are block tridiagonal and each Gauss-Newton step costs O(N d^3).

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "spi/core.hpp"
#include "spi/motion_prior.hpp"
#include "spi/sensor_models.hpp"

namespace spi {

/// x_{i+1} - x_i - displacement, weighted by info = (Q dt)^-1.
struct PriorFactor
{
    std::size_t from = 0;
    Vec displacement;
    Mat info;
};

struct PositionFactor
{
    std::size_t state = 0;
    Vec value;
    Mat info;
};

struct RangeFactor
{
    std::size_t state = 0;
    std::size_t anchor = 0;
    double value = 0.0;
    double info = 0.0;
};

/// Gaussian prior on one state (e.g. a known initial position).
struct StatePrior
{
    std::size_t state = 0;
    Vec mean;
    Mat info;
};

struct FactorGraphProblem
{
    int dim = 0;
    std::vector<double> times;
    std::vector<Vec> initial_guess;
    /// Velocity input in effect at each state time.
    std::vector<Vec> inputs;
    std::vector<PriorFactor> prior_factors;
    std::vector<PositionFactor> position_factors;
    std::vector<RangeFactor> range_factors;
    std::vector<Vec> anchors;
    std::optional<StatePrior> state_prior;

    std::size_t num_states() const { return times.size(); }

    std::size_t num_measurement_factors() const { return position_factors.size() + range_factors.size(); }

    void validate() const
    {
        const std::size_t n = num_states();
        if (n == 0)
            throw InvalidArgument("factor graph: no states");
        if (initial_guess.size() != n)
            throw InvalidArgument("factor graph: initial guess size mismatch");
        for (std::size_t i = 1; i < n; ++i)
            if (!(times[i] > times[i - 1]))
                throw InvalidArgument("factor graph: state times must be strictly increasing");
        for (const auto& f : prior_factors)
            if (f.from + 1 >= n)
                throw InvalidArgument("factor graph: prior factor references a missing state");
        for (const auto& f : position_factors)
            if (f.state >= n)
                throw InvalidArgument("factor graph: position factor references a missing state");
        for (const auto& f : range_factors)
            if (f.state >= n || f.anchor >= anchors.size())
                throw InvalidArgument("factor graph: range factor references a missing state or anchor");
        if (state_prior && state_prior->state >= n)
            throw InvalidArgument("factor graph: state prior references a missing state");
    }

    /// 1/2 sum of weighted squared residuals.
    double cost(const std::vector<Vec>& x) const
    {
        double c = 0.0;
        for (const auto& f : prior_factors) {
            const Vec r = x[f.from + 1] - x[f.from] - f.displacement;
            c += r.dot(f.info * r);
        }
        for (const auto& f : position_factors) {
            const Vec r = x[f.state] - f.value;
            c += r.dot(f.info * r);
        }
        for (const auto& f : range_factors) {
            const double r = (anchors[f.anchor] - x[f.state]).norm() - f.value;
            c += f.info * r * r;
        }
        if (state_prior) {
            const Vec r = x[state_prior->state] - state_prior->mean;
            c += r.dot(state_prior->info * r);
        }
        return 0.5 * c;
    }

    /// cost(x + step) - cost(x), summed factor by factor as
    /// (r' - r)^T W (r' + r) / 2 so that it stays accurate when the change is
    /// far below the resolution of the total cost.
    double cost_change(const std::vector<Vec>& x, const std::vector<Vec>& step) const
    {
        double c = 0.0;
        for (const auto& f : prior_factors) {
            const Vec r = x[f.from + 1] - x[f.from] - f.displacement;
            const Vec dr = step[f.from + 1] - step[f.from];
            c += dr.dot(f.info * (2.0 * r + dr));
        }
        for (const auto& f : position_factors) {
            const Vec r = x[f.state] - f.value;
            const Vec& dr = step[f.state];
            c += dr.dot(f.info * (2.0 * r + dr));
        }
        for (const auto& f : range_factors) {
            const Vec diff = anchors[f.anchor] - x[f.state];
            const Vec moved = diff - step[f.state];
            const double d0 = diff.norm(), d1 = moved.norm();
            // d1 - d0 without cancellation.
            const double dd = (d1 + d0 > 0.0) ? step[f.state].dot(step[f.state] - 2.0 * diff) / (d1 + d0) : 0.0;
            c += f.info * dd * (d0 + d1 - 2.0 * f.value);
        }
        if (state_prior) {
            const Vec r = x[state_prior->state] - state_prior->mean;
            const Vec& dr = step[state_prior->state];
            c += dr.dot(state_prior->info * (2.0 * r + dr));
        }
        return 0.5 * c;
    }
};

enum class GuessMode { from_measurements, zero };

struct BuildOptions
{
    GuessMode init = GuessMode::from_measurements;
    /// Extra states at the trajectory endpoints.
    std::optional<double> t_start;
    std::optional<double> t_end;
    /// Prior on the first state.
    std::optional<StatePrior> initial_prior;
    /// Measurement times closer than this share one state (s).
    double time_merge_tol = 1e-9;
};

namespace detail {

/// Linearized multilateration from ranges at one epoch; needs >= d+1
/// anchors in general position.
inline std::optional<Vec> trilaterate(std::span<const Vec> anchors, std::span<const double> ranges)
{
    const std::size_t n = anchors.size();
    if (n == 0)
        return std::nullopt;
    const Eigen::Index d = anchors.front().size();
    if (n < static_cast<std::size_t>(d) + 1)
        return std::nullopt;
    Mat a(static_cast<Eigen::Index>(n - 1), d);
    Vec b(static_cast<Eigen::Index>(n - 1));
    for (std::size_t i = 1; i < n; ++i) {
        const auto row = static_cast<Eigen::Index>(i - 1);
        a.row(row) = 2.0 * (anchors[i] - anchors[0]).transpose();
        b[row] = anchors[i].squaredNorm() - anchors[0].squaredNorm() - ranges[i] * ranges[i]
                 + ranges[0] * ranges[0];
    }
    Eigen::ColPivHouseholderQR<Mat> qr(a);
    if (qr.rank() < d)
        return std::nullopt;
    return Vec(qr.solve(b));
}

/// Fills states without a guess by linear interpolation in time between
/// neighbours that have one, holding the nearest value at the ends.
inline void fill_guesses(const std::vector<double>& times, std::vector<std::optional<Vec>>& guesses, int d)
{
    std::vector<std::size_t> known;
    for (std::size_t i = 0; i < guesses.size(); ++i)
        if (guesses[i])
            known.push_back(i);
    if (known.empty()) {
        for (auto& g : guesses)
            g = Vec::Zero(d);
        return;
    }
    for (std::size_t i = 0; i < guesses.size(); ++i) {
        if (guesses[i])
            continue;
        auto it = std::upper_bound(known.begin(), known.end(), i);
        if (it == known.begin()) {
            guesses[i] = *guesses[known.front()];
        } else if (it == known.end()) {
            guesses[i] = *guesses[known.back()];
        } else {
            const std::size_t hi = *it, lo = *(it - 1);
            const double w = (times[i] - times[lo]) / (times[hi] - times[lo]);
            guesses[i] = (1.0 - w) * *guesses[lo] + w * *guesses[hi];
        }
    }
}

} // namespace detail

/// States sit at the distinct measurement times (plus optional endpoints);
/// consecutive states are joined by WNOV prior factors. A missing input
/// function means u = 0.
inline FactorGraphProblem build_problem(const MotionPrior& prior, const Sensor& sensor,
                                        std::span<const MeasurementRecord> measurements,
                                        const PiecewiseConstantInput* inputs, const BuildOptions& opts = {})
{
    const int d = prior.dim();
    if (sensor_dim(sensor) != d)
        throw InvalidArgument("build_problem: sensor and motion prior dimensions differ");
    if (inputs && !inputs->empty() && inputs->dim() != d)
        throw InvalidArgument("build_problem: input dimension mismatch");
    for (std::size_t i = 1; i < measurements.size(); ++i)
        if (measurements[i].time < measurements[i - 1].time)
            throw InvalidArgument("build_problem: measurements must be sorted by time");
    if (measurements.empty() && !opts.initial_prior)
        throw UnderConstrained("build_problem: no measurements and no initial-state prior");

    const auto* position = std::get_if<PositionSensor>(&sensor);
    const auto* range = std::get_if<RangeSensor>(&sensor);

    FactorGraphProblem p;
    p.dim = d;
    std::vector<double> times;
    for (const auto& m : measurements)
        times.push_back(m.time);
    if (opts.t_start)
        times.push_back(*opts.t_start);
    if (opts.t_end)
        times.push_back(*opts.t_end);
    std::sort(times.begin(), times.end());
    for (double t : times)
        if (p.times.empty() || t - p.times.back() > opts.time_merge_tol)
            p.times.push_back(t);
    const std::size_t n = p.times.size();
    auto state_of = [&](double t) {
        auto it = std::lower_bound(p.times.begin(), p.times.end(), t - opts.time_merge_tol);
        return static_cast<std::size_t>(it - p.times.begin());
    };

    for (std::size_t i = 0; i + 1 < n; ++i) {
        const double dt = p.times[i + 1] - p.times[i];
        Vec disp = (inputs && !inputs->empty()) ? inputs->integrate(p.times[i], p.times[i + 1]) : Vec::Zero(d);
        p.prior_factors.push_back({i, std::move(disp), prior.process_info(dt)});
    }
    for (std::size_t i = 0; i < n; ++i)
        p.inputs.push_back((inputs && !inputs->empty()) ? inputs->at(p.times[i]) : Vec::Zero(d));

    Mat position_info;
    if (position)
        position_info = linalg::spd_inverse(position->cov, 0.0);
    if (range)
        p.anchors = range->anchors;

    std::vector<Vec> sums(n, Vec::Zero(d));
    std::vector<int> counts(n, 0);
    std::vector<std::vector<std::pair<std::size_t, double>>> epoch_ranges(n);
    for (const auto& m : measurements) {
        const std::size_t s = state_of(m.time);
        if (m.kind == MeasurementKind::position) {
            if (!position || m.anchor_index || m.value.size() != d)
                throw InvalidArgument("build_problem: position record does not match the sensor");
            p.position_factors.push_back({s, m.value, position_info});
            sums[s] += m.value;
            ++counts[s];
        } else {
            if (!range || !m.anchor_index || *m.anchor_index >= range->anchors.size() || m.value.size() != 1)
                throw InvalidArgument("build_problem: range record does not match the sensor");
            p.range_factors.push_back({s, *m.anchor_index, m.value[0], 1.0 / range->variance});
            epoch_ranges[s].push_back({*m.anchor_index, m.value[0]});
        }
    }
    if (opts.initial_prior) {
        p.state_prior = *opts.initial_prior;
        p.state_prior->state = 0;
        if (p.state_prior->mean.size() != d || p.state_prior->info.rows() != d)
            throw InvalidArgument("build_problem: initial prior dimension mismatch");
    }

    std::vector<std::optional<Vec>> guesses(n);
    if (opts.init == GuessMode::from_measurements) {
        for (std::size_t i = 0; i < n; ++i) {
            if (counts[i] > 0) {
                guesses[i] = sums[i] / counts[i];
            } else if (!epoch_ranges[i].empty()) {
                std::vector<Vec> a;
                std::vector<double> r;
                for (const auto& [idx, val] : epoch_ranges[i]) {
                    a.push_back(range->anchors[idx]);
                    r.push_back(val);
                }
                guesses[i] = detail::trilaterate(a, r);
            }
        }
        if (p.state_prior && !guesses[0])
            guesses[0] = p.state_prior->mean;
        detail::fill_guesses(p.times, guesses, d);
    } else {
        for (auto& g : guesses)
            g = Vec::Zero(d);
    }
    for (auto& g : guesses)
        p.initial_guess.push_back(std::move(*g));
    p.validate();
    return p;
}

struct GaussNewtonOptions
{
    int max_iter = 50;
    double grad_tol = 1e-8;
    double step_tol = 1e-10;
    double lambda0 = 1e-4;
    double lambda_factor = 10.0;
    int max_retries = 10;
};

struct EstimationResult
{
    Trajectory estimate;
    int iterations = 0;
    double final_cost = 0.0;
    double gradient_norm = 0.0;
    bool converged = false;
};

/// Solves the symmetric positive-definite block-tridiagonal system with
/// diagonal blocks `diag`, super-diagonal blocks `upper` (upper[i] couples
/// i and i+1) and right-hand side `rhs`, by forward elimination and back
/// substitution.
inline std::vector<Vec> solve_block_tridiagonal(const std::vector<Mat>& diag, const std::vector<Mat>& upper,
                                                const std::vector<Vec>& rhs)
{
    const std::size_t n = diag.size();
    if (rhs.size() != n || (n > 0 && upper.size() + 1 != n))
        throw InvalidArgument("block tridiagonal: size mismatch");
    std::vector<Eigen::LLT<Mat>> pivots(n);
    std::vector<Vec> y(n);
    std::vector<Mat> gain(n); // C_i^-1 U_i
    for (std::size_t i = 0; i < n; ++i) {
        Mat c = diag[i];
        y[i] = rhs[i];
        if (i > 0) {
            c.noalias() -= upper[i - 1].transpose() * gain[i - 1];
            y[i].noalias() -= upper[i - 1].transpose() * pivots[i - 1].solve(y[i - 1]);
        }
        pivots[i].compute(c);
        if (pivots[i].info() != Eigen::Success)
            throw NumericalSingularity("block tridiagonal: pivot block " + std::to_string(i) + " is not positive definite");
        if (i + 1 < n)
            gain[i] = pivots[i].solve(upper[i]);
    }
    std::vector<Vec> x(n);
    for (std::size_t k = n; k-- > 0;) {
        x[k] = pivots[k].solve(y[k]);
        if (k + 1 < n)
            x[k].noalias() -= gain[k] * x[k + 1];
    }
    return x;
}

namespace detail {

struct NormalEquations
{
    std::vector<Mat> diag;
    std::vector<Mat> upper;
    std::vector<Vec> grad;
};

inline NormalEquations linearize(const FactorGraphProblem& p, const std::vector<Vec>& x)
{
    const int d = p.dim;
    const std::size_t n = p.num_states();
    NormalEquations ne;
    ne.diag.assign(n, Mat::Zero(d, d));
    ne.upper.assign(n > 0 ? n - 1 : 0, Mat::Zero(d, d));
    ne.grad.assign(n, Vec::Zero(d));
    for (const auto& f : p.prior_factors) {
        const std::size_t i = f.from;
        const Vec wr = f.info * (x[i + 1] - x[i] - f.displacement);
        ne.diag[i] += f.info;
        ne.diag[i + 1] += f.info;
        ne.upper[i] -= f.info;
        ne.grad[i] -= wr;
        ne.grad[i + 1] += wr;
    }
    for (const auto& f : p.position_factors) {
        ne.diag[f.state] += f.info;
        ne.grad[f.state] += f.info * (x[f.state] - f.value);
    }
    for (const auto& f : p.range_factors) {
        const Vec diff = p.anchors[f.anchor] - x[f.state];
        const double dist = diff.norm();
        if (!(dist > kCoincidenceDistance))
            throw SingularGeometry("gauss-newton: iterate coincides with anchor " + std::to_string(f.anchor), f.anchor);
        const Vec h = -diff / dist;
        ne.diag[f.state] += f.info * (h * h.transpose());
        ne.grad[f.state] += f.info * (dist - f.value) * h;
    }
    if (p.state_prior) {
        const auto& sp = *p.state_prior;
        ne.diag[sp.state] += sp.info;
        ne.grad[sp.state] += sp.info * (x[sp.state] - sp.mean);
    }
    return ne;
}

inline double max_abs(const std::vector<Vec>& v)
{
    double m = 0.0;
    for (const auto& e : v)
        if (e.size() > 0)
            m = std::max(m, e.cwiseAbs().maxCoeff());
    return m;
}

} // namespace detail

/// Gauss-Newton with Levenberg-Marquardt damping that only engages when a
/// full step increases the cost.
inline EstimationResult solve_gauss_newton(const FactorGraphProblem& problem, const GaussNewtonOptions& opts = {})
{
    problem.validate();
    if (problem.num_measurement_factors() == 0 && !problem.state_prior)
        throw UnderConstrained("gauss-newton: problem has no measurement or state-prior factors");
    const std::size_t n = problem.num_states();

    std::vector<Vec> x = problem.initial_guess;
    double cost = problem.cost(x);
    EstimationResult res;
    detail::NormalEquations ne = detail::linearize(problem, x);
    res.gradient_norm = detail::max_abs(ne.grad);

    for (int iter = 0; iter < opts.max_iter; ++iter) {
        if (res.gradient_norm < opts.grad_tol) {
            res.converged = true;
            break;
        }
        std::vector<Vec> neg_grad(n);
        for (std::size_t i = 0; i < n; ++i)
            neg_grad[i] = -ne.grad[i];

        double lambda = 0.0;
        bool accepted = false;
        std::vector<Vec> step;
        std::vector<Vec> candidate(n);
        double candidate_cost = cost;
        for (int retry = 0; retry <= opts.max_retries; ++retry) {
            std::vector<Mat> damped = ne.diag;
            if (lambda > 0.0)
                for (auto& b : damped)
                    b.diagonal() *= (1.0 + lambda);
            step = solve_block_tridiagonal(damped, ne.upper, neg_grad);
            for (std::size_t i = 0; i < n; ++i)
                candidate[i] = x[i] + step[i];
            const double change = problem.cost_change(x, step);
            candidate_cost = cost + change;
            if (change <= 0.0) {
                accepted = true;
                break;
            }
            lambda = (lambda == 0.0) ? opts.lambda0 : lambda * opts.lambda_factor;
        }
        res.iterations = iter + 1;
        if (!accepted)
            break;
        x = candidate;
        cost = candidate_cost;
        ne = detail::linearize(problem, x);
        res.gradient_norm = detail::max_abs(ne.grad);
        if (res.gradient_norm < opts.grad_tol) {
            res.converged = true;
            break;
        }
        if (detail::max_abs(step) <= opts.step_tol * (detail::max_abs(x) + opts.step_tol))
            break;
    }

    res.final_cost = problem.cost(x);
    res.estimate.samples.reserve(n);
    for (std::size_t i = 0; i < n; ++i)
        res.estimate.samples.push_back({problem.times[i], x[i], problem.inputs[i]});
    return res;
}

/// sqrt(mean |x_est(t) - x_gt(t)|^2) over the estimate times, with the truth
/// interpolated linearly.
inline double rmse(const Trajectory& estimate, const Trajectory& truth)
{
    if (estimate.samples.empty() || truth.samples.empty())
        throw InvalidArgument("rmse: empty trajectory");
    constexpr double tol = 1e-9;
    const double lo = truth.samples.front().time - tol;
    const double hi = truth.samples.back().time + tol;
    double sum = 0.0;
    std::size_t covered = 0;
    for (const auto& s : estimate.samples)
        if (s.time >= lo && s.time <= hi)
            ++covered;
    if (covered == 0)
        throw InvalidArgument("rmse: estimate and truth have disjoint time supports");
    if (covered != estimate.samples.size())
        throw InvalidArgument("rmse: estimate times extend beyond the truth trajectory");
    for (const auto& s : estimate.samples) {
        const Vec truth_pos = truth.position_at(s.time);
        if (truth_pos.size() != s.position.size())
            throw InvalidArgument("rmse: dimension mismatch");
        sum += (s.position - truth_pos).squaredNorm();
    }
    return std::sqrt(sum / static_cast<double>(estimate.samples.size()));
}

} // namespace spi
