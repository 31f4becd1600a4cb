#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "oracles.hpp"
#include "spi/map_estimator.hpp"
#include "spi/pcrb.hpp"

using namespace spi;

namespace {

Vec v2(double a, double b) { return (Vec(2) << a, b).finished(); }

std::vector<Vec> square(double h)
{
    return {v2(h, h), v2(-h, h), v2(-h, -h), v2(h, -h), v2(h, 0), v2(0, h), v2(-h, 0), v2(0, -h)};
}

std::vector<double> grid(double dt, int n)
{
    std::vector<double> t;
    for (int k = 0; k < n; ++k)
        t.push_back(dt * k);
    return t;
}

std::vector<MeasurementRecord> measure(const Sensor& s, const Trajectory& truth, const std::vector<double>& times,
                                       std::uint64_t seed, NoiseMode mode = NoiseMode::sampled)
{
    GaussianStream g(seed);
    std::vector<MeasurementRecord> out;
    for (double t : times)
        for (auto& r : simulate_measurement(s, truth.position_at(t), t, g, mode))
            out.push_back(std::move(r));
    return out;
}

std::vector<Vec> positions(const Trajectory& t)
{
    std::vector<Vec> out;
    for (const auto& s : t.samples)
        out.push_back(s.position);
    return out;
}

double max_diff(const std::vector<Vec>& a, const std::vector<Vec>& b)
{
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        m = std::max(m, (a[i] - b[i]).cwiseAbs().maxCoeff());
    return m;
}

/// Gradient of the cost written directly from the factor definitions.
std::vector<Vec> gradient(const FactorGraphProblem& p, const std::vector<Vec>& x)
{
    std::vector<Vec> g(x.size(), Vec::Zero(p.dim));
    for (const auto& f : p.prior_factors) {
        const Vec wr = f.info * (x[f.from + 1] - x[f.from] - f.displacement);
        g[f.from] -= wr;
        g[f.from + 1] += wr;
    }
    for (const auto& f : p.position_factors)
        g[f.state] += f.info * (x[f.state] - f.value);
    for (const auto& f : p.range_factors) {
        const Vec diff = x[f.state] - p.anchors[f.anchor];
        g[f.state] += f.info * (diff.norm() - f.value) * diff / diff.norm();
    }
    if (p.state_prior)
        g[p.state_prior->state] += p.state_prior->info * (x[p.state_prior->state] - p.state_prior->mean);
    return g;
}

} // namespace

TEST(BuildProblem, CountsFactors)
{
    const auto prior = MotionPrior::isotropic(2, 0.001);
    const Sensor s = PositionSensor::isotropic(2, 0.01);
    std::vector<MeasurementRecord> m;
    for (double t : {0.0, 0.5, 1.0})
        m.push_back({t, MeasurementKind::position, v2(t, 0), std::nullopt});
    const auto p = build_problem(prior, s, m, nullptr);
    EXPECT_EQ(p.num_states(), 3u);
    EXPECT_EQ(p.position_factors.size(), 3u);
    EXPECT_EQ(p.prior_factors.size(), 2u);
    for (const auto& f : p.prior_factors)
        EXPECT_TRUE(f.displacement.isZero());
    EXPECT_TRUE(p.prior_factors[0].info.isApprox(Mat::Identity(2, 2) / 0.0005));
}

TEST(BuildProblem, EightAnchorsOneEpoch)
{
    const auto prior = MotionPrior::isotropic(2, 0.001);
    const Sensor s = RangeSensor(0.0064, square(6.0));
    Trajectory truth;
    truth.samples = {{0.0, v2(1, 2), v2(0, 0)}, {1.0, v2(1, 2), v2(0, 0)}};
    const auto m = measure(s, truth, {0.5}, 1, NoiseMode::noiseless);
    const auto p = build_problem(prior, s, m, nullptr);
    EXPECT_EQ(p.num_states(), 1u);
    EXPECT_EQ(p.range_factors.size(), 8u);
    for (const auto& f : p.range_factors)
        EXPECT_EQ(f.state, 0u);
    EXPECT_LT((p.initial_guess[0] - v2(1, 2)).norm(), 1e-9);
}

TEST(BuildProblem, InputsEnterDisplacement)
{
    const auto prior = MotionPrior::isotropic(2, 0.001);
    const Sensor s = PositionSensor::isotropic(2, 0.01);
    const PiecewiseConstantInput u({0.0, 1.0}, {v2(1, 0), v2(0, 2)});
    std::vector<MeasurementRecord> m{{0.0, MeasurementKind::position, v2(0, 0), std::nullopt},
                                     {2.0, MeasurementKind::position, v2(1, 2), std::nullopt}};
    const auto p = build_problem(prior, s, m, &u);
    ASSERT_EQ(p.prior_factors.size(), 1u);
    EXPECT_TRUE(p.prior_factors[0].displacement.isApprox(v2(1, 2)));
}

TEST(BuildProblem, Errors)
{
    const auto prior = MotionPrior::isotropic(2, 0.001);
    const Sensor s = PositionSensor::isotropic(2, 0.01);
    EXPECT_THROW(build_problem(prior, s, {}, nullptr), UnderConstrained);
    std::vector<MeasurementRecord> unsorted{{1.0, MeasurementKind::position, v2(0, 0), std::nullopt},
                                            {0.0, MeasurementKind::position, v2(0, 0), std::nullopt}};
    EXPECT_THROW(build_problem(prior, s, unsorted, nullptr), InvalidArgument);
    std::vector<MeasurementRecord> wrong{{0.0, MeasurementKind::range, Vec::Constant(1, 1.0), 0}};
    EXPECT_THROW(build_problem(prior, s, wrong, nullptr), InvalidArgument);
}

TEST(BuildProblem, TrilaterationAndInterpolationInit)
{
    const auto prior = MotionPrior::isotropic(2, 0.001);
    const Sensor s = RangeSensor(0.0064, square(6.0));
    Trajectory truth;
    truth.samples = {{0.0, v2(-1, 0), v2(0, 0)}, {2.0, v2(1, 0), v2(0, 0)}};
    auto m = measure(s, truth, {0.0, 2.0}, 1, NoiseMode::noiseless);
    BuildOptions bo;
    bo.t_start = 0.0;
    bo.t_end = 3.0;
    // A lone range at t = 1 cannot be trilaterated: interpolated between its neighbours.
    m.insert(m.begin() + 8, MeasurementRecord{1.0, MeasurementKind::range, Vec::Constant(1, 7.0), 0});
    const auto p = build_problem(prior, s, m, nullptr, bo);
    ASSERT_EQ(p.num_states(), 4u);
    EXPECT_LT((p.initial_guess[0] - v2(-1, 0)).norm(), 1e-9);
    EXPECT_LT((p.initial_guess[1] - v2(0, 0)).norm(), 1e-9);
    EXPECT_LT((p.initial_guess[2] - v2(1, 0)).norm(), 1e-9);
    EXPECT_LT((p.initial_guess[3] - v2(1, 0)).norm(), 1e-9);
}

TEST(BlockTridiagonal, MatchesDenseSolve)
{
    std::mt19937_64 gen(3);
    const int d = 2, n = 6;
    Mat dense = oracle::random_spd(d * n, gen, 1.0, 5.0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            if (std::abs(i - j) > 1)
                dense.block(i * d, j * d, d, d).setZero();
    dense += 10.0 * Mat::Identity(d * n, d * n);
    std::vector<Mat> diag, upper;
    std::vector<Vec> rhs;
    Vec b = Vec::Random(d * n);
    for (int i = 0; i < n; ++i) {
        diag.push_back(dense.block(i * d, i * d, d, d));
        if (i + 1 < n)
            upper.push_back(dense.block(i * d, (i + 1) * d, d, d));
        rhs.push_back(b.segment(i * d, d));
    }
    const Vec x = dense.ldlt().solve(b);
    const auto xs = solve_block_tridiagonal(diag, upper, rhs);
    for (int i = 0; i < n; ++i)
        EXPECT_LT((xs[static_cast<std::size_t>(i)] - x.segment(i * d, d)).norm(), 1e-10);
}

TEST(GaussNewton, LinearProblemOneIterationAndDenseAgreement)
{
    std::mt19937_64 gen(17);
    for (int trial = 0; trial < 10; ++trial) {
        const Mat q = oracle::random_spd(2, gen, 1e-3, 1e-2);
        const MotionPrior prior(q);
        const Mat r = oracle::random_spd(2, gen, 1e-3, 1e-2);
        const Sensor s = PositionSensor(r);
        const PiecewiseConstantInput u({0.0, 1.0}, {v2(0.3, 0.1), v2(-0.2, 0.4)});
        const auto times = grid(0.2, 12);
        const auto truth = sample_trajectory(prior, v2(0.5, -0.5), u, times, 100 + trial);
        const auto meas = measure(s, truth, times, 200 + trial);
        BuildOptions bo;
        StatePrior sp{0, v2(0.5, -0.5), 50.0 * Mat::Identity(2, 2)};
        bo.initial_prior = sp;
        const auto problem = build_problem(prior, s, meas, &u, bo);
        const auto res = solve_gauss_newton(problem);
        EXPECT_EQ(res.iterations, 1);
        EXPECT_TRUE(res.converged);
        EXPECT_LT(res.gradient_norm, 1e-8);

        oracle::LinearProblem lp;
        lp.psd = q;
        lp.times = times;
        for (std::size_t i = 0; i + 1 < times.size(); ++i)
            lp.disp.push_back(u.integrate(times[i], times[i + 1]));
        for (std::size_t k = 0; k < meas.size(); ++k) {
            lp.meas_state.push_back(k);
            lp.meas.push_back(meas[k].value);
            lp.meas_info.push_back(r.inverse());
        }
        lp.prior_mean = sp.mean;
        lp.prior_info = sp.info;
        EXPECT_LT(max_diff(positions(res.estimate), oracle::dense_map(lp)), 1e-8);
    }
}

TEST(GaussNewton, GradientBelowToleranceAtReportedOptimum)
{
    const auto prior = MotionPrior::isotropic(2, 0.001);
    const Sensor s = RangeSensor(0.0064, square(6.0));
    const auto times = grid(0.1, 200);
    const auto truth = sample_trajectory(prior, v2(0, 0), PiecewiseConstantInput::constant(v2(0.2, 0.1)), times, 4);
    const auto meas = measure(s, truth, times, 5);
    const auto u = PiecewiseConstantInput::constant(v2(0.2, 0.1));
    const auto problem = build_problem(prior, s, meas, &u);
    const auto res = solve_gauss_newton(problem);
    ASSERT_TRUE(res.converged);
    const auto g = gradient(problem, positions(res.estimate));
    double norm = 0.0;
    for (const auto& v : g)
        norm = std::max(norm, v.cwiseAbs().maxCoeff());
    EXPECT_LT(norm, 1e-8);
    EXPECT_LE(res.final_cost, problem.cost(problem.initial_guess));
    EXPECT_NEAR(res.final_cost, problem.cost(positions(res.estimate)), 1e-12 * res.final_cost);
}

TEST(GaussNewton, ZeroNoiseRecoversTruth)
{
    const auto prior = MotionPrior::isotropic(2, 0.001);
    const auto u = PiecewiseConstantInput({0.0, 2.0}, {v2(0.5, 0.0), v2(0.0, -0.5)});
    const auto times = grid(0.25, 17);
    const auto truth = sample_trajectory(MotionPrior::noiseless(2), v2(-1, 1), u, times, 0);
    for (const Sensor& s : {Sensor(PositionSensor::isotropic(2, 0.01)), Sensor(RangeSensor(0.0064, square(6.0)))}) {
        const auto meas = measure(s, truth, times, 0, NoiseMode::noiseless);
        const auto res = solve_gauss_newton(build_problem(prior, s, meas, &u));
        EXPECT_TRUE(res.converged);
        EXPECT_LT(max_diff(positions(res.estimate), positions(truth)), 1e-8);
    }
}

TEST(GaussNewton, RangeInitPerturbationConvergesToSameMinimizer)
{
    const auto prior = MotionPrior::isotropic(2, 0.001);
    const Sensor s = RangeSensor(0.0064, square(6.0));
    const auto u = PiecewiseConstantInput::constant(v2(-0.3, 0.2));
    const auto times = grid(0.05, 100);
    const auto truth = sample_trajectory(prior, v2(1, -1), u, times, 8);
    const auto meas = measure(s, truth, times, 9);
    auto problem = build_problem(prior, s, meas, &u);

    problem.initial_guess = positions(truth);
    const auto from_truth = solve_gauss_newton(problem);
    std::mt19937_64 gen(10);
    std::uniform_real_distribution<double> off(-0.5, 0.5);
    for (auto& g : problem.initial_guess)
        g += v2(off(gen), off(gen));
    const auto perturbed = solve_gauss_newton(problem);
    ASSERT_TRUE(from_truth.converged);
    ASSERT_TRUE(perturbed.converged);
    EXPECT_LT(max_diff(positions(from_truth.estimate), positions(perturbed.estimate)), 1e-6);
}

TEST(GaussNewton, NoFactorsIsUnderConstrained)
{
    FactorGraphProblem p;
    p.dim = 2;
    p.times = {0.0};
    p.initial_guess = {v2(0, 0)};
    EXPECT_THROW(solve_gauss_newton(p), UnderConstrained);
}

TEST(GaussNewton, FinalStateErrorRespectsBound)
{
    // Linear-Gaussian case: the MAP estimate of a state one step past the
    // last measurement has error covariance equal to the predictive bound,
    // so the empirical MSE must not fall below it.
    const double q = 0.001, r = 0.0064, ka = 0.05;
    const auto prior = MotionPrior::isotropic(2, q);
    const Sensor s = PositionSensor::isotropic(2, r);
    const double dt = 1.0 / oracle::rate(q, r, ka);
    const int steps = 15, trials = 400;
    const auto times = grid(dt, steps);
    const double t_end = dt * steps;
    const Mat j0 = Mat::Identity(2, 2) / (ka * ka);

    InfoState bound = initialize(KnownPrior{j0});
    for (int k = 0; k < steps; ++k)
        bound = recurse(bound, assemble_dblocks(prior, Mat::Identity(2, 2) / r, dt));
    const double lambda = bound.bound_max_eigenvalue();
    EXPECT_LE(lambda, ka * ka * (1.0 + 1e-6));

    std::vector<double> sq;
    GaussianStream g(77);
    const auto u = PiecewiseConstantInput::constant(v2(0.1, 0.0));
    std::vector<double> truth_grid = times;
    truth_grid.push_back(t_end);
    for (int trial = 0; trial < trials; ++trial) {
        const Vec x0 = v2(0, 0) + ka * g.standard(2);
        const auto truth = sample_trajectory(prior, x0, u, truth_grid, 1000 + trial);
        const auto meas = measure(s, truth, times, 5000 + trial);
        BuildOptions bo;
        bo.t_end = t_end;
        bo.initial_prior = StatePrior{0, v2(0, 0), j0};
        const auto res = solve_gauss_newton(build_problem(prior, s, meas, &u, bo));
        const Vec err = res.estimate.samples.back().position - truth.samples.back().position;
        sq.push_back(err[0] * err[0]);
        sq.push_back(err[1] * err[1]);
    }
    const auto [mse, var] = oracle::moments(sq);
    const double se = std::sqrt(var / static_cast<double>(sq.size()));
    EXPECT_GT(mse, lambda - 3.0 * se);
    EXPECT_LT(mse, lambda + 3.0 * se);
}

TEST(Rmse, Examples)
{
    Trajectory a;
    a.samples = {{0.0, v2(0, 0), v2(0, 0)}, {1.0, v2(1, 1), v2(0, 0)}, {2.0, v2(2, 0), v2(0, 0)}};
    EXPECT_EQ(rmse(a, a), 0.0);
    Trajectory b = a;
    for (auto& s : b.samples)
        s.position += v2(0.03, 0.04);
    EXPECT_NEAR(rmse(b, a), 0.05, 1e-15);

    Trajectory p, t;
    p.samples = {{1.0, v2(0.1, 0), v2(0, 0)}};
    t.samples = {{1.0, v2(0, 0), v2(0, 0)}};
    EXPECT_NEAR(rmse(p, t), 0.1, 1e-15);
}

TEST(Rmse, InterpolatesTruth)
{
    Trajectory truth, est;
    truth.samples = {{0.0, v2(0, 0), v2(0, 0)}, {2.0, v2(2, 0), v2(0, 0)}};
    est.samples = {{1.0, v2(1, 0.3), v2(0, 0)}};
    EXPECT_NEAR(rmse(est, truth), 0.3, 1e-15);
}

TEST(Rmse, DisjointSupportsRaise)
{
    Trajectory truth, est;
    truth.samples = {{0.0, v2(0, 0), v2(0, 0)}, {1.0, v2(1, 0), v2(0, 0)}};
    est.samples = {{5.0, v2(0, 0), v2(0, 0)}};
    EXPECT_THROW(rmse(est, truth), InvalidArgument);
}
