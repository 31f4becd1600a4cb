#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "oracles.hpp"
#include "spi/conic.hpp"

using namespace spi;

namespace {

LmiInstance scalar_rate_lmi(double j, double q, double r_inv, double ka)
{
    const MotionPrior prior(Mat::Constant(1, 1, q));
    InfoState s;
    s.info = Mat::Constant(1, 1, j);
    return build_rate_lmi(s, prior, Mat::Constant(1, 1, r_inv), AccuracySpec(ka));
}

LmiInstance position_precision_lmi(int d, double q, double rate, double ka)
{
    const auto prior = MotionPrior::isotropic(d, q);
    const InfoState s = initialize(KnownState{d, ka});
    const auto basis = symmetric_basis(d);
    std::vector<double> ident(basis.size(), 0.0);
    for (int i = 0; i < d; ++i)
        ident[static_cast<std::size_t>(i)] = 1.0;
    return build_precision_lmi(s, prior, 1.0 / rate, basis, basis, ident, AccuracySpec(ka));
}

} // namespace

TEST(AccuracySpec, RejectsNonPositive)
{
    EXPECT_THROW(AccuracySpec(0.0), InvalidArgument);
    EXPECT_THROW(AccuracySpec(-0.1), InvalidArgument);
    EXPECT_THROW(AccuracySpec(std::nan("")), InvalidArgument);
    EXPECT_DOUBLE_EQ(AccuracySpec(0.1).info_bound(), 1.0 / 0.01);
}

TEST(BuildLmi, ScalarRateEntries)
{
    const double j = 7.0, q = 0.002, r_inv = 30.0, ka = 0.2;
    const auto lmi = scalar_rate_lmi(j, q, r_inv, ka);
    for (double m : {0.5, 3.0, 40.0}) {
        const Mat s = lmi.evaluate(m);
        EXPECT_NEAR(s(0, 0), j + m / q + r_inv, 1e-9);
        EXPECT_NEAR(s(0, 1), -m / q, 1e-9);
        EXPECT_NEAR(s(1, 0), -m / q, 1e-9);
        EXPECT_NEAR(s(1, 1), m / q - 1.0 / (ka * ka), 1e-9);
    }
}

TEST(BuildLmi, HugeAccuracyMakesEveryRateFeasible)
{
    const auto prior = MotionPrior::isotropic(2, 0.001);
    InfoState s;
    s.info = Mat::Zero(2, 2);
    const auto lmi = build_rate_lmi(s, prior, Mat::Zero(2, 2), AccuracySpec(1e6));
    for (double m : {1e-3, 0.1, 1.0, 100.0})
        EXPECT_GE(linalg::min_eigenvalue(lmi.evaluate(m)), -1e-9);
}

TEST(BuildLmi, PrecisionIsAffine)
{
    const auto lmi = position_precision_lmi(2, 0.001, 20.0, 0.05);
    std::mt19937_64 gen(9);
    std::normal_distribution<double> n;
    for (int i = 0; i < 20; ++i) {
        std::vector<double> a(3), b(3), sum(3), zero(3, 0.0);
        for (int k = 0; k < 3; ++k) {
            a[k] = n(gen);
            b[k] = n(gen);
            sum[k] = a[k] + b[k];
        }
        const Mat lhs = lmi.evaluate(sum) - lmi.evaluate(b);
        const Mat rhs = lmi.evaluate(a) - lmi.evaluate(zero);
        EXPECT_LT((lhs - rhs).norm(), 1e-9 * lhs.norm() + 1e-12);
        EXPECT_TRUE(lmi.evaluate(a).isApprox(lmi.evaluate(a).transpose()));
    }
}

TEST(IsFeasible, Basics)
{
    EXPECT_TRUE(is_feasible(Mat::Identity(3, 3), 1e-9));
    Mat m = Mat::Identity(2, 2);
    m(1, 1) = -1.0;
    EXPECT_FALSE(is_feasible(m, 1e-9));
    Mat asym = Mat::Identity(2, 2);
    asym(0, 1) = 1e-3;
    EXPECT_THROW(is_feasible(asym, 1e-9), InvalidArgument);
}

TEST(MinimizeScalar, MatchesClosedForm)
{
    const double q = 0.001, s2 = 0.0064, ka = 0.05;
    const auto lmi = scalar_rate_lmi(1.0 / (ka * ka), q, 1.0 / s2, ka);
    const auto res = minimize_scalar(lmi, {});
    ASSERT_TRUE(res.status.ok());
    EXPECT_NEAR(res.value, oracle::rate(q, s2, ka), 1e-5 * oracle::rate(q, s2, ka));
    EXPECT_NEAR(res.value, 1.424, 1e-3);
    EXPECT_TRUE(res.status.note.empty());
}

TEST(MinimizeScalar, TightAtOptimum)
{
    const SolverTolerances tol;
    for (double ka : {0.01, 0.03, 0.05, 0.1}) {
        const auto lmi = scalar_rate_lmi(1.0 / (ka * ka), 0.001, 1.0 / 0.0064, ka);
        const auto res = minimize_scalar(lmi, {}, tol);
        const double eig = linalg::min_eigenvalue(lmi.evaluate(res.value));
        EXPECT_GE(eig, -tol.feas_tol);
        // One bisection width above the boundary at most.
        EXPECT_FALSE(is_feasible(lmi.evaluate(res.value * (1.0 - 2.0 * tol.rel_tol)), tol.feas_tol));
    }
}

TEST(MinimizeScalar, LooseAccuracyReturnsLowerBracket)
{
    const auto lmi = scalar_rate_lmi(1e-6, 0.001, 1.0 / 0.0064, 1e3);
    const auto res = minimize_scalar(lmi, {});
    ASSERT_TRUE(res.status.ok());
    EXPECT_EQ(res.value, Bracket{}.lo);
    EXPECT_EQ(res.status.note, "lower bracket feasible");
}

TEST(MinimizeScalar, MonotoneInAccuracy)
{
    auto solve = [](double ka) {
        return minimize_scalar(scalar_rate_lmi(1.0 / (ka * ka), 0.001, 1.0 / 0.0064, ka), {}).value;
    };
    EXPECT_GT(solve(0.02), solve(0.05));
}

TEST(MinimizeScalar, CapReportsInfeasible)
{
    const double ka = 0.001;
    const auto lmi = scalar_rate_lmi(1.0 / (ka * ka), 0.001, 1.0 / 0.0064, ka);
    const auto res = minimize_scalar(lmi, {});
    EXPECT_EQ(res.status.status, Status::infeasible);
    EXPECT_NE(res.status.certificate.find("m_cap"), std::string::npos);
}

TEST(MinimizeScalar, InvalidBracket)
{
    const auto lmi = scalar_rate_lmi(1.0, 0.001, 1.0, 0.1);
    EXPECT_THROW(minimize_scalar(lmi, {0.0, 1.0}), InvalidArgument);
    EXPECT_THROW(minimize_scalar(lmi, {2.0, 1.0}), InvalidArgument);
}

TEST(MinimizeScalar, FeasibleSetIsAnInterval)
{
    std::mt19937_64 gen(12);
    for (int i = 0; i < 30; ++i) {
        const int d = 1 + i % 3;
        const MotionPrior prior(oracle::random_spd(d, gen, 1e-4, 1e-2));
        InfoState s;
        s.info = oracle::random_spd(d, gen, 10.0, 1000.0);
        const auto lmi = build_rate_lmi(s, prior, oracle::random_psd(d, d, gen, 100.0), AccuracySpec(0.05));
        bool seen_feasible = false;
        for (double m = 1e-3; m < 1e5; m *= 1.2) {
            const bool f = is_feasible(lmi.evaluate(m), 1e-9);
            if (seen_feasible) {
                EXPECT_TRUE(f) << "feasible set is not an interval at m = " << m;
            }
            seen_feasible = seen_feasible || f;
        }
    }
}

TEST(MinimizeTraceSdp, IsotropicPositionClosedForm)
{
    const double q = 0.001, m = 20.0, ka = 0.05;
    const auto lmi = position_precision_lmi(2, q, m, ka);
    const auto res = minimize_trace_sdp(lmi, AccuracySpec(ka));
    ASSERT_TRUE(res.status.ok()) << res.status.certificate;
    const double x = 1.0 / oracle::max_variance(m, q, ka);
    EXPECT_NEAR(x, 8.163, 1e-3);
    EXPECT_LT((res.precision - x * Mat::Identity(2, 2)).norm(), 1e-5 * x);
    EXPECT_LT(res.status.kkt_residual, 1e-7);
    EXPECT_GE(linalg::min_eigenvalue(lmi.evaluate(res.params)), -1e-9);
    EXPECT_LT(linalg::min_eigenvalue(lmi.evaluate(res.params)), 1e-6);
    EXPECT_EQ(res.precision, res.precision.transpose());
    EXPECT_GE(linalg::min_eigenvalue(res.precision), -1e-9);
}

TEST(MinimizeTraceSdp, ClosedFormAcrossGrid)
{
    for (int d : {1, 2, 3})
        for (double m : {10.0, 40.0})
            for (double ka : {0.02, 0.06, 0.1}) {
                const double q = 0.001;
                if (ka <= oracle::ka_min(q, m))
                    continue;
                const auto res = minimize_trace_sdp(position_precision_lmi(d, q, m, ka), AccuracySpec(ka));
                ASSERT_TRUE(res.status.ok());
                const double x = 1.0 / oracle::max_variance(m, q, ka);
                EXPECT_LT((res.precision - x * Mat::Identity(d, d)).norm(), 1e-5 * x * std::sqrt(d));
            }
}

TEST(MinimizeTraceSdp, InfeasibleBelowThreshold)
{
    const double q = 0.001, m = 20.0;
    for (double ka : {0.005, 0.007}) {
        const auto res = minimize_trace_sdp(position_precision_lmi(2, q, m, ka), AccuracySpec(ka));
        EXPECT_EQ(res.status.status, Status::infeasible);
        EXPECT_NE(res.status.certificate.find("D22"), std::string::npos);
        EXPECT_NEAR(res.ka_min, oracle::ka_min(q, m), 1e-9);
    }
    EXPECT_TRUE(minimize_trace_sdp(position_precision_lmi(2, q, m, 0.0075), AccuracySpec(0.0075)).status.ok());
}

TEST(MinimizeTraceSdp, LooseAccuracyGivesZeroPrecision)
{
    const auto res = minimize_trace_sdp(position_precision_lmi(2, 0.001, 20.0, 1e3), AccuracySpec(1e3));
    ASSERT_TRUE(res.status.ok());
    EXPECT_TRUE(res.precision.isZero());
}

TEST(MinimizeTraceSdp, AnisotropicInstanceIsCertified)
{
    std::mt19937_64 gen(21);
    for (int i = 0; i < 10; ++i) {
        const MotionPrior prior(oracle::random_spd(2, gen, 5e-4, 2e-3));
        InfoState s;
        s.info = oracle::random_spd(2, gen, 200.0, 600.0);
        const auto basis = symmetric_basis(2);
        const AccuracySpec acc(0.05);
        const auto lmi = build_precision_lmi(s, prior, 0.05, basis, basis, {1.0, 1.0, 0.0}, acc);
        const auto res = minimize_trace_sdp(lmi, acc);
        ASSERT_TRUE(res.status.ok()) << res.status.certificate;
        EXPECT_LT(res.status.kkt_residual, 1e-7);
        EXPECT_GE(linalg::min_eigenvalue(lmi.evaluate(res.params)), -1e-9);
        // Any feasible isotropic point has at least the optimal trace.
        double lo = 0.0, hi = 1e6;
        for (int k = 0; k < 200; ++k) {
            const double mid = 0.5 * (lo + hi);
            (is_feasible(lmi.evaluate(std::vector<double>{mid, mid, 0.0}), 0.0) ? hi : lo) = mid;
        }
        EXPECT_LE(res.precision.trace(), 2.0 * hi * (1.0 + 1e-9));
    }
}
