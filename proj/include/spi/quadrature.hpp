#pragma once

#include <vector>

#include "spi/core.hpp"

namespace spi {

/// Gauss-Hermite rule for expectations under the standard normal
/// (probabilists' weight exp(-z^2/2)/sqrt(2 pi)); weights sum to one.
/// Nodes are the eigenvalues of the symmetric Jacobi matrix of He_n
/// (Golub-Welsch).
struct GaussHermiteRule
{
    std::vector<double> nodes;
    std::vector<double> weights;

    explicit GaussHermiteRule(int order)
    {
        if (order < 1)
            throw InvalidArgument("quadrature: order must be >= 1");
        Mat jacobi = Mat::Zero(order, order);
        for (int i = 1; i < order; ++i) {
            jacobi(i, i - 1) = std::sqrt(static_cast<double>(i));
            jacobi(i - 1, i) = jacobi(i, i - 1);
        }
        Eigen::SelfAdjointEigenSolver<Mat> es(jacobi);
        nodes.resize(order);
        weights.resize(order);
        for (int i = 0; i < order; ++i) {
            nodes[i] = es.eigenvalues()[i];
            const double v0 = es.eigenvectors()(0, i);
            weights[i] = v0 * v0;
        }
        // Symmetrize to remove eigen-solver round-off.
        for (int i = 0; i < order / 2; ++i) {
            const int j = order - 1 - i;
            const double n = 0.5 * (nodes[j] - nodes[i]);
            const double w = 0.5 * (weights[i] + weights[j]);
            nodes[i] = -n;
            nodes[j] = n;
            weights[i] = weights[j] = w;
        }
        if (order % 2 == 1)
            nodes[order / 2] = 0.0;
    }
};

struct QuadraturePoint
{
    Vec point;
    double weight = 0.0;
};

/// Tensor-product grid for E[f(x)], x ~ N(mean, cov). A zero covariance
/// collapses every node onto the mean.
inline std::vector<QuadraturePoint> gaussian_grid(const Vec& mean, const Mat& cov, int order)
{
    const int d = static_cast<int>(mean.size());
    if (cov.rows() != d || cov.cols() != d)
        throw InvalidArgument("quadrature: covariance dimension mismatch");
    const GaussHermiteRule rule(order);
    const Mat root = linalg::psd_sqrt(cov);

    std::size_t count = 1;
    for (int i = 0; i < d; ++i)
        count *= static_cast<std::size_t>(order);

    std::vector<QuadraturePoint> grid;
    grid.reserve(count);
    std::vector<int> idx(d, 0);
    Vec z(d);
    for (std::size_t n = 0; n < count; ++n) {
        double w = 1.0;
        for (int i = 0; i < d; ++i) {
            z[i] = rule.nodes[idx[i]];
            w *= rule.weights[idx[i]];
        }
        grid.push_back({mean + root * z, w});
        for (int i = 0; i < d; ++i) {
            if (++idx[i] < order)
                break;
            idx[i] = 0;
        }
    }
    return grid;
}

} // namespace spi
