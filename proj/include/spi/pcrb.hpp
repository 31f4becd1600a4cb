#pragma once

// Recursive predictive posterior Cramer-Rao bound.
//
//   J_{k+1} = D22 - D21 (D11 + J_k)^-1 D12
//
// with, for the WNOV prior (F = I, Q_k = Q dt):
//   D11 = Q_k^-1 + E[H^T R^-1 H],  D12 = -Q_k^-1,  D21 = D12^T,  D22 = Q_k^-1.
//
// J_k is the information of the one-step-ahead predictor; its inverse bounds
// the prediction error correlation from below.

#include <limits>
#include <span>
#include <variant>
#include <vector>

#include "spi/core.hpp"
#include "spi/motion_prior.hpp"

namespace spi {

struct InfoState
{
    Mat info;
    std::size_t step = 0;
    double time = 0.0;

    /// lambda_max(J^-1): the largest error variance allowed by the bound.
    double bound_max_eigenvalue() const
    {
        const double lo = linalg::min_eigenvalue(info);
        if (!(lo > 0.0))
            return std::numeric_limits<double>::infinity();
        return 1.0 / lo;
    }
};

struct DBlocks
{
    Mat d11;
    Mat d12;
    Mat d21;
    Mat d22;
    double dt = 0.0;
};

inline DBlocks assemble_dblocks(const MotionPrior& prior, const Mat& sensor_info, double dt)
{
    const int d = prior.dim();
    if (sensor_info.rows() != d || sensor_info.cols() != d)
        throw InvalidArgument("assemble_dblocks: sensor information dimension mismatch");
    if (linalg::min_eigenvalue(sensor_info) < -1e-10 * linalg::scale_of(sensor_info))
        throw InvalidArgument("assemble_dblocks: sensor information must be positive semidefinite");
    const Mat qinv = prior.process_info(dt);
    DBlocks b;
    b.d11 = qinv + linalg::symmetrize(sensor_info);
    b.d12 = -qinv;
    b.d21 = b.d12.transpose();
    b.d22 = qinv;
    b.dt = dt;
    return b;
}

inline InfoState recurse(const InfoState& state, const DBlocks& blocks)
{
    const Mat inner = blocks.d11 + state.info;
    Mat inner_inv;
    try {
        inner_inv = linalg::spd_inverse(inner, 1e-12);
    } catch (const NumericalSingularity& e) {
        throw NumericalSingularity(std::string("recurse: D11 + J is singular: ") + e.what());
    }
    InfoState next;
    next.info = linalg::clamp_psd(blocks.d22 - blocks.d21 * inner_inv * blocks.d12);
    next.step = state.step + 1;
    next.time = state.time + blocks.dt;
    return next;
}

struct KnownPrior
{
    Mat info;
};

/// Initial state known to within the accuracy target: J_0 = ka^-2 I.
struct KnownState
{
    int dim = 0;
    double ka = 0.0;
};

using InitMode = std::variant<KnownPrior, KnownState>;

inline InfoState initialize(const InitMode& mode, double t0 = 0.0)
{
    InfoState s;
    s.time = t0;
    if (const auto* p = std::get_if<KnownPrior>(&mode)) {
        if (p->info.rows() < 1 || p->info.rows() != p->info.cols() || !linalg::is_symmetric(p->info, 1e-10))
            throw InvalidArgument("initialize: prior information must be square and symmetric");
        if (linalg::min_eigenvalue(p->info) < -1e-10 * linalg::scale_of(p->info))
            throw InvalidArgument("initialize: prior information must be positive semidefinite");
        s.info = linalg::symmetrize(p->info);
        return s;
    }
    const auto& k = std::get<KnownState>(mode);
    if (k.dim < 1)
        throw InvalidArgument("initialize: dimension must be >= 1");
    if (!(k.ka > 0.0))
        throw InvalidArgument("initialize: accuracy must be positive");
    s.info = Mat::Identity(k.dim, k.dim) / (k.ka * k.ka);
    return s;
}

/// Direct evaluation of the predictive bound for a whole sequence: builds
/// the block-tridiagonal joint information of (x_0 .. x_n) with measurement
/// information on x_0 .. x_{n-1}, and Schur-eliminates every state but x_n.
/// Independent of `recurse`; used to check it.
inline Mat batch_fim_oracle(const MotionPrior& prior, std::span<const Mat> sensor_infos,
                            std::span<const double> dts, const Mat& j0)
{
    const std::size_t n = sensor_infos.size();
    if (n < 1 || n != dts.size())
        throw InvalidArgument("batch_fim_oracle: sequences must be non-empty and of equal length");
    const int d = prior.dim();
    if (j0.rows() != d || j0.cols() != d)
        throw InvalidArgument("batch_fim_oracle: prior information dimension mismatch");

    const Eigen::Index total = static_cast<Eigen::Index>((n + 1) * d);
    Mat joint = Mat::Zero(total, total);
    joint.topLeftCorner(d, d) += j0;
    for (std::size_t i = 0; i < n; ++i) {
        const Eigen::Index a = static_cast<Eigen::Index>(i * d);
        const Eigen::Index b = a + d;
        const Mat qinv = prior.process_info(dts[i]);
        joint.block(a, a, d, d) += sensor_infos[i] + qinv;
        joint.block(b, b, d, d) += qinv;
        joint.block(a, b, d, d) -= qinv;
        joint.block(b, a, d, d) -= qinv;
    }
    const Eigen::Index past = total - d;
    const Mat a_blk = joint.topLeftCorner(past, past);
    const Mat b_blk = joint.topRightCorner(past, d);
    const Mat c_blk = joint.bottomRightCorner(d, d);
    Eigen::LDLT<Mat> ldlt(a_blk);
    if (ldlt.info() != Eigen::Success || !(ldlt.vectorD().minCoeff() > 0.0))
        throw NumericalSingularity("batch_fim_oracle: singular elimination pivot");
    return linalg::symmetrize(c_blk - b_blk.transpose() * ldlt.solve(b_blk));
}

} // namespace spi
