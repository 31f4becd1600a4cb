#pragma once

// Accuracy LMI and the two small solvers behind the parameter searches.
//
// Requiring lambda_max(J_{k+1}^-1) <= ka^2 is J_{k+1} >= ka^-2 I, which by the
// Schur complement is
//
//   S(theta) = [ J_k + D11(theta)   D12            ]  >= 0.
//              [ D21                D22 - ka^-2 I  ]
//
// Both parametrizations used here make S affine in the unknown:
//   rate m:           Q_k^-1 = m Q^-1, so S(m) = S0 + m S1 with S1 >= 0;
//   precision X=R^-1: X enters only the (1,1) block through E[H^T X H].

#include <chrono>
#include <cmath>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "spi/core.hpp"
#include "spi/motion_prior.hpp"
#include "spi/pcrb.hpp"

namespace spi {

struct AccuracySpec
{
    double ka = 0.0;

    explicit AccuracySpec(double accuracy) : ka(accuracy)
    {
        if (!(ka > 0.0) || !std::isfinite(ka))
            throw InvalidArgument("accuracy must be positive");
    }

    /// ka^-2, the information every predicted state must reach.
    double info_bound() const { return 1.0 / (ka * ka); }
};

enum class ParameterKind { scalar_rate, precision_matrix };

enum class Status { optimal, infeasible, max_iterations };

inline const char* to_string(Status s)
{
    switch (s) {
    case Status::optimal:
        return "optimal";
    case Status::infeasible:
        return "infeasible";
    case Status::max_iterations:
        return "max-iterations";
    }
    return "unknown";
}

struct SolveStatus
{
    Status status = Status::optimal;
    std::string certificate;
    std::string note;
    int iterations = 0;
    double wall_time = 0.0;
    double kkt_residual = 0.0;

    bool ok() const { return status == Status::optimal; }
};

struct SolverTolerances
{
    double feas_tol = 1e-9;  // absolute, on the minimum eigenvalue
    double rel_tol = 1e-6;   // bisection width relative to the answer
    double m_cap = 1e6;      // Hz, upper limit of bracket expansion
    int max_iter = 500;      // Newton steps of the barrier method
    double gap_rel = 1e-9;   // barrier duality gap relative to the objective
};

/// S(theta) = base + sum_i theta_i * coeffs[i].
struct LmiInstance
{
    ParameterKind kind = ParameterKind::scalar_rate;
    int dim = 0;
    Mat base;
    std::vector<Mat> coeffs;
    /// Precision-matrix kind only: X(theta) = sum_i theta_i * precision_basis[i].
    std::vector<Mat> precision_basis;
    /// Parameters for which X(theta) = I.
    std::vector<double> identity_params;

    std::size_t num_params() const { return coeffs.size(); }

    Mat evaluate(std::span<const double> theta) const
    {
        if (theta.size() != coeffs.size())
            throw InvalidArgument("lmi: parameter count mismatch");
        Mat s = base;
        for (std::size_t i = 0; i < coeffs.size(); ++i)
            s += theta[i] * coeffs[i];
        return s;
    }

    Mat evaluate(double m) const
    {
        const double theta[1] = {m};
        return evaluate(std::span<const double>(theta, 1));
    }

    Mat precision(std::span<const double> theta) const
    {
        if (theta.size() != precision_basis.size() || precision_basis.empty())
            throw InvalidArgument("lmi: not a precision-matrix instance");
        Mat x = Mat::Zero(precision_basis.front().rows(), precision_basis.front().cols());
        for (std::size_t i = 0; i < theta.size(); ++i)
            x += theta[i] * precision_basis[i];
        return x;
    }

    std::vector<double> objective() const
    {
        std::vector<double> c(precision_basis.size());
        for (std::size_t i = 0; i < c.size(); ++i)
            c[i] = precision_basis[i].trace();
        return c;
    }
};

/// Minimal-rate LMI: S(m) with Q_k = Q / m and the sensor information fixed.
inline LmiInstance build_rate_lmi(const InfoState& state, const MotionPrior& prior, const Mat& sensor_info,
                                  const AccuracySpec& acc)
{
    const int d = prior.dim();
    if (state.info.rows() != d || sensor_info.rows() != d || sensor_info.cols() != d)
        throw InvalidArgument("build_rate_lmi: dimension mismatch");
    const Mat qinv = prior.psd_inverse();
    LmiInstance lmi;
    lmi.kind = ParameterKind::scalar_rate;
    lmi.dim = d;
    lmi.base = Mat::Zero(2 * d, 2 * d);
    lmi.base.topLeftCorner(d, d) = state.info + sensor_info;
    lmi.base.bottomRightCorner(d, d) = -acc.info_bound() * Mat::Identity(d, d);
    Mat slope(2 * d, 2 * d);
    slope << qinv, -qinv, -qinv, qinv;
    lmi.coeffs = {slope};
    return lmi;
}

/// Minimal-trace precision LMI at a fixed step dt. `info_basis[i]` is the
/// sensor information produced by `precision_basis[i]`, i.e. E[H^T E_i H].
inline LmiInstance build_precision_lmi(const InfoState& state, const MotionPrior& prior, double dt,
                                       std::vector<Mat> info_basis, std::vector<Mat> precision_basis,
                                       std::vector<double> identity_params, const AccuracySpec& acc)
{
    const int d = prior.dim();
    if (state.info.rows() != d)
        throw InvalidArgument("build_precision_lmi: dimension mismatch");
    if (info_basis.empty() || info_basis.size() != precision_basis.size()
        || identity_params.size() != info_basis.size())
        throw InvalidArgument("build_precision_lmi: basis sizes must match and be non-empty");
    const DBlocks blocks = assemble_dblocks(prior, Mat::Zero(d, d), dt);
    LmiInstance lmi;
    lmi.kind = ParameterKind::precision_matrix;
    lmi.dim = d;
    lmi.base.resize(2 * d, 2 * d);
    lmi.base << state.info + blocks.d11, blocks.d12, blocks.d21,
        blocks.d22 - acc.info_bound() * Mat::Identity(d, d);
    for (const Mat& g : info_basis) {
        if (g.rows() != d || g.cols() != d)
            throw InvalidArgument("build_precision_lmi: information basis dimension mismatch");
        Mat c = Mat::Zero(2 * d, 2 * d);
        c.topLeftCorner(d, d) = g;
        lmi.coeffs.push_back(std::move(c));
    }
    lmi.precision_basis = std::move(precision_basis);
    lmi.identity_params = std::move(identity_params);
    return lmi;
}

/// Basis of symmetric d x d matrices (diagonal units then off-diagonal pairs).
inline std::vector<Mat> symmetric_basis(int d)
{
    std::vector<Mat> basis;
    for (int i = 0; i < d; ++i) {
        Mat e = Mat::Zero(d, d);
        e(i, i) = 1.0;
        basis.push_back(e);
    }
    for (int i = 0; i < d; ++i)
        for (int j = i + 1; j < d; ++j) {
            Mat e = Mat::Zero(d, d);
            e(i, j) = e(j, i) = 1.0;
            basis.push_back(e);
        }
    return basis;
}

inline bool is_feasible(const Mat& s, double feas_tol)
{
    if (s.rows() != s.cols())
        throw InvalidArgument("is_feasible: matrix must be square");
    if (!linalg::is_symmetric(s, 1e-9))
        throw InvalidArgument("is_feasible: matrix is not symmetric");
    return linalg::min_eigenvalue(s) >= -feas_tol;
}

struct Bracket
{
    double lo = 1e-6;
    double hi = 1.0;
};

struct ScalarResult
{
    double value = 0.0;
    SolveStatus status;
};

namespace detail {

using Clock = std::chrono::steady_clock;

inline double seconds_since(Clock::time_point start)
{
    return std::chrono::duration<double>(Clock::now() - start).count();
}

inline std::string fmt(double v)
{
    std::ostringstream os;
    os.precision(6);
    os << v;
    return os.str();
}

} // namespace detail

/// Smallest m in the bracket with S(m) >= 0. S1 >= 0 makes the feasible set
/// an interval [m*, inf), so bisection is exact up to rel_tol.
inline ScalarResult minimize_scalar(const LmiInstance& lmi, Bracket bracket, const SolverTolerances& tol = {})
{
    const auto start = detail::Clock::now();
    if (lmi.kind != ParameterKind::scalar_rate || lmi.num_params() != 1)
        throw InvalidArgument("minimize_scalar: instance is not a scalar-rate LMI");
    if (!(bracket.lo > 0.0) || !(bracket.hi > bracket.lo) || !std::isfinite(bracket.hi))
        throw InvalidArgument("minimize_scalar: invalid bracket (need 0 < lo < hi)");

    ScalarResult out;
    auto feasible = [&](double m) {
        ++out.status.iterations;
        return is_feasible(lmi.evaluate(m), tol.feas_tol);
    };

    double lo = bracket.lo;
    double hi = bracket.hi;
    if (feasible(lo)) {
        out.value = lo;
        out.status.note = "lower bracket feasible";
        out.status.wall_time = detail::seconds_since(start);
        return out;
    }
    while (!feasible(hi)) {
        if (hi >= tol.m_cap) {
            out.value = tol.m_cap;
            out.status.status = Status::infeasible;
            out.status.certificate = "upper bracket m_cap infeasible (m_cap = " + detail::fmt(tol.m_cap) + " Hz)";
            out.status.wall_time = detail::seconds_since(start);
            return out;
        }
        lo = hi;
        hi = std::min(2.0 * hi, tol.m_cap);
    }
    while (hi - lo > tol.rel_tol * hi) {
        const double mid = (hi > 4.0 * lo) ? std::sqrt(lo * hi) : 0.5 * (lo + hi);
        if (feasible(mid))
            hi = mid;
        else
            lo = mid;
    }
    out.value = hi;
    out.status.wall_time = detail::seconds_since(start);
    return out;
}

struct MatrixResult
{
    Mat precision;
    std::vector<double> params;
    SolveStatus status;
    /// Smallest accuracy the process noise alone permits at this step:
    /// sqrt(lambda_max(Q_k)). Infeasible whenever ka <= ka_min.
    double ka_min = 0.0;
};

namespace detail {

struct BarrierEval
{
    bool interior = false;
    double value = 0.0;
    Eigen::VectorXd grad;
    Mat hess;
};

inline bool strictly_pd(const Mat& m, Eigen::LLT<Mat>& llt)
{
    llt.compute(m);
    return llt.info() == Eigen::Success && llt.matrixLLT().diagonal().minCoeff() > 0.0;
}

/// t c^T theta - log det S(theta) - log det X(theta) with derivatives.
inline BarrierEval barrier(const LmiInstance& lmi, const std::vector<double>& c, const std::vector<double>& theta,
                           double t, bool derivatives)
{
    BarrierEval ev;
    const Mat s = linalg::symmetrize(lmi.evaluate(theta));
    const Mat x = linalg::symmetrize(lmi.precision(theta));
    Eigen::LLT<Mat> ls, lx;
    if (!strictly_pd(s, ls) || !strictly_pd(x, lx))
        return ev;
    ev.interior = true;
    const double logdet_s = 2.0 * ls.matrixLLT().diagonal().array().log().sum();
    const double logdet_x = 2.0 * lx.matrixLLT().diagonal().array().log().sum();
    double lin = 0.0;
    for (std::size_t i = 0; i < c.size(); ++i)
        lin += c[i] * theta[i];
    ev.value = t * lin - logdet_s - logdet_x;
    if (!derivatives)
        return ev;

    const std::size_t n = theta.size();
    std::vector<Mat> ss(n), xx(n);
    for (std::size_t i = 0; i < n; ++i) {
        ss[i] = ls.solve(lmi.coeffs[i]);
        xx[i] = lx.solve(lmi.precision_basis[i]);
    }
    ev.grad.resize(static_cast<Eigen::Index>(n));
    ev.hess.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i) {
        ev.grad[i] = t * c[i] - ss[i].trace() - xx[i].trace();
        for (std::size_t j = 0; j <= i; ++j) {
            const double h = (ss[i] * ss[j]).trace() + (xx[i] * xx[j]).trace();
            ev.hess(i, j) = ev.hess(j, i) = h;
        }
    }
    return ev;
}

inline std::vector<double> scaled(const std::vector<double>& v, double a)
{
    std::vector<double> out(v);
    for (double& x : out)
        x *= a;
    return out;
}

} // namespace detail

/// min tr(X) s.t. S(X) >= 0, X >= 0 for a precision-matrix LMI.
///
/// Infeasibility is certified analytically first: the accuracy block
/// D22 - ka^-2 I must be positive definite, and no direction left unobserved
/// by the sensor may carry an information deficit after eliminating the
/// accuracy block. Otherwise a log-barrier path-following method runs from a
/// scaled identity precision, followed by a scaling of the iterate onto the
/// constraint boundary.
inline MatrixResult minimize_trace_sdp(const LmiInstance& lmi, const AccuracySpec& acc,
                                       const SolverTolerances& tol = {})
{
    const auto start = detail::Clock::now();
    if (lmi.kind != ParameterKind::precision_matrix || lmi.num_params() == 0)
        throw InvalidArgument("minimize_trace_sdp: instance is not a precision-matrix LMI");
    const int d = lmi.dim;
    const std::size_t n = lmi.num_params();
    MatrixResult out;
    auto finish = [&](MatrixResult& r) -> MatrixResult& {
        r.status.wall_time = detail::seconds_since(start);
        return r;
    };

    const Mat acc_block = lmi.base.bottomRightCorner(d, d);
    const Mat d22 = acc_block + acc.info_bound() * Mat::Identity(d, d);
    out.ka_min = 1.0 / std::sqrt(linalg::min_eigenvalue(d22));

    const double acc_min = linalg::min_eigenvalue(acc_block);
    if (!(acc_min > 1e-12 * linalg::scale_of(d22))) {
        out.status.status = Status::infeasible;
        out.status.certificate = "accuracy block D22 - ka^-2 I is not positive definite (min eigenvalue "
                                 + detail::fmt(acc_min) + "): ka = " + detail::fmt(acc.ka)
                                 + " m is not above the process-noise floor ka_min = " + detail::fmt(out.ka_min) + " m";
        out.precision = Mat::Zero(lmi.precision_basis.front().rows(), lmi.precision_basis.front().cols());
        out.params.assign(n, 0.0);
        return finish(out);
    }

    // Information deficit along directions the sensor cannot observe.
    {
        Mat reach = Mat::Zero(d, d);
        for (std::size_t i = 0; i < n; ++i)
            reach += lmi.identity_params[i] * lmi.coeffs[i].topLeftCorner(d, d);
        Eigen::SelfAdjointEigenSolver<Mat> es(linalg::symmetrize(reach));
        const double top = std::max(es.eigenvalues().cwiseAbs().maxCoeff(), 1e-300);
        std::vector<Eigen::Index> null_dirs;
        for (Eigen::Index i = 0; i < d; ++i)
            if (es.eigenvalues()[i] <= 1e-10 * top)
                null_dirs.push_back(i);
        if (!null_dirs.empty()) {
            const Mat a0 = lmi.base.topLeftCorner(d, d);
            const Mat b0 = lmi.base.topRightCorner(d, d);
            const Mat schur = a0 - b0 * linalg::spd_inverse(acc_block, 0.0) * b0.transpose();
            Mat basis(d, static_cast<Eigen::Index>(null_dirs.size()));
            for (std::size_t k = 0; k < null_dirs.size(); ++k)
                basis.col(static_cast<Eigen::Index>(k)) = es.eigenvectors().col(null_dirs[k]);
            const double deficit = linalg::min_eigenvalue(basis.transpose() * schur * basis);
            if (deficit < -1e-10 * linalg::scale_of(schur)) {
                out.status.status = Status::infeasible;
                out.status.certificate = "information deficit " + detail::fmt(deficit)
                                         + " along a direction the sensor cannot observe"
                                           " (too few or collinear anchors)";
                out.precision = Mat::Zero(lmi.precision_basis.front().rows(), lmi.precision_basis.front().cols());
                out.params.assign(n, 0.0);
                return finish(out);
            }
        }
    }

    // With S(0) >= 0 the zero precision is feasible and minimizes tr(X).
    if (linalg::min_eigenvalue(lmi.base) >= 0.0) {
        out.params.assign(n, 0.0);
        out.precision = Mat::Zero(lmi.precision_basis.front().rows(), lmi.precision_basis.front().cols());
        out.status.note = "zero precision feasible";
        return finish(out);
    }

    const std::vector<double> c = lmi.objective();
    auto objective = [&](const std::vector<double>& th) {
        double v = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            v += c[i] * th[i];
        return v;
    };

    // Phase 1: grow a scaled identity precision until S is strictly feasible.
    std::vector<double> theta;
    {
        double alpha = 1e-12;
        bool found = false;
        for (int k = 0; k < 400 && !found; ++k, alpha *= 2.0) {
            Eigen::LLT<Mat> llt;
            if (detail::strictly_pd(linalg::symmetrize(lmi.evaluate(detail::scaled(lmi.identity_params, alpha))),
                                    llt)) {
                theta = detail::scaled(lmi.identity_params, 2.0 * alpha);
                found = true;
            }
        }
        if (!found) {
            out.status.status = Status::infeasible;
            out.status.certificate = "no strictly feasible point found within iteration budget"
                                     " (weak certificate: phase-1 search failed)";
            out.precision = Mat::Zero(lmi.precision_basis.front().rows(), lmi.precision_basis.front().cols());
            out.params.assign(n, 0.0);
            return finish(out);
        }
    }

    // Phase 2: barrier path following.
    const double nu = static_cast<double>(lmi.base.rows() + lmi.precision_basis.front().rows());
    double t = nu / std::max(objective(theta), 1e-300);
    const double mu = 8.0;
    int newton_steps = 0;
    bool budget_hit = false;
    detail::BarrierEval last;
    for (;;) {
        // Centering.
        int centering_steps = 0;
        double previous_decrement = std::numeric_limits<double>::infinity();
        for (;;) {
            if (newton_steps >= tol.max_iter) {
                budget_hit = true;
                break;
            }
            last = detail::barrier(lmi, c, theta, t, true);
            Eigen::LDLT<Mat> ldlt(last.hess);
            const Eigen::VectorXd step = -ldlt.solve(last.grad);
            const double decrement = -last.grad.dot(step);
            ++newton_steps;
            // The Newton decrement is affine invariant, so an absolute
            // threshold is meaningful at any scale of t.
            // Stop when converged, or when the decrement no longer contracts
            // (floating-point noise floor near the cone boundary).
            const bool stalled = previous_decrement < 0.25 && decrement > 0.5 * previous_decrement;
            if (!(decrement > 1e-9) || stalled || ++centering_steps > 50)
                break;
            previous_decrement = decrement;
            // Inside the quadratic region a full step stays interior and the
            // barrier value is too large to resolve the decrease, so skip
            // the Armijo test there.
            const bool quadratic = decrement < 0.25;
            double s = 1.0;
            bool moved = false;
            for (int ls = 0; ls < 60; ++ls, s *= 0.5) {
                std::vector<double> trial(theta);
                for (std::size_t i = 0; i < n; ++i)
                    trial[i] += s * step[static_cast<Eigen::Index>(i)];
                const auto ev = detail::barrier(lmi, c, trial, t, false);
                if (ev.interior && (quadratic || ev.value <= last.value - 0.01 * s * decrement)) {
                    theta = std::move(trial);
                    moved = true;
                    break;
                }
            }
            if (!moved)
                break;
        }
        if (budget_hit)
            break;
        if (nu / t <= tol.gap_rel * std::max(std::abs(objective(theta)), 1e-6))
            break;
        t *= mu;
    }

    // Optimality certificate at the last centered point: with Newton
    // decrement lambda^2, tr(X) - tr(X*) <= (nu + sqrt(nu) lambda) / t.
    // Reported relative to the objective.
    {
        const auto ev = detail::barrier(lmi, c, theta, t, true);
        double bound = 1.0;
        if (ev.interior) {
            const double dec = std::max(0.0, ev.grad.dot(Eigen::LDLT<Mat>(ev.hess).solve(ev.grad)));
            bound = (nu + std::sqrt(nu * dec)) / t;
        }
        out.status.kkt_residual = bound / std::max(1.0, std::abs(objective(theta)));
    }

    // Scale the iterate along the ray toward X = 0 until S touches the cone
    // boundary; the objective only decreases and feasibility is kept.
    {
        auto ok = [&](double a) { return linalg::min_eigenvalue(lmi.evaluate(detail::scaled(theta, a))) >= 0.0; };
        double lo = 0.0, hi = 1.0;
        if (ok(0.0)) {
            hi = 0.0;
        } else if (ok(1.0)) {
            for (int k = 0; k < 200 && hi - lo > 1e-16; ++k) {
                const double mid = 0.5 * (lo + hi);
                (ok(mid) ? hi : lo) = mid;
            }
        }
        theta = detail::scaled(theta, hi);
    }

    out.params = theta;
    out.precision = linalg::symmetrize(lmi.precision(theta));
    out.status.iterations = newton_steps;
    if (budget_hit) {
        out.status.status = Status::max_iterations;
        out.status.note = "Newton step budget exhausted; best iterate returned";
    }
    if (linalg::min_eigenvalue(lmi.evaluate(theta)) < -tol.feas_tol)
        out.status.note += (out.status.note.empty() ? "" : "; ") + std::string("final iterate violates feasibility tolerance");
    return finish(out);
}

} // namespace spi
