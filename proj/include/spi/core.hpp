#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>

namespace spi {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using RowVec = Eigen::RowVectorXd;

/// Base class of every error raised by the library.
class Error : public std::runtime_error
{
public:
    using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error
{
public:
    using Error::Error;
};

/// A state coincides with an anchor (or a quadrature point does).
class SingularGeometry : public Error
{
public:
    SingularGeometry(const std::string& what, std::optional<std::size_t> anchor)
        : Error(what), anchor_index_(anchor)
    {
    }

    std::optional<std::size_t> anchor_index() const { return anchor_index_; }

private:
    std::optional<std::size_t> anchor_index_;
};

class NumericalSingularity : public Error
{
public:
    using Error::Error;
};

class UnderConstrained : public Error
{
public:
    using Error::Error;
};

namespace linalg {

inline double scale_of(const Mat& m)
{
    return std::max(1.0, m.cwiseAbs().maxCoeff());
}

inline bool is_symmetric(const Mat& m, double rel_tol)
{
    if (m.rows() != m.cols())
        return false;
    if (m.size() == 0)
        return true;
    return (m - m.transpose()).cwiseAbs().maxCoeff() <= rel_tol * scale_of(m);
}

inline Mat symmetrize(const Mat& m)
{
    return 0.5 * (m + m.transpose());
}

inline Eigen::VectorXd eigenvalues(const Mat& m)
{
    Eigen::SelfAdjointEigenSolver<Mat> es(m, Eigen::EigenvaluesOnly);
    return es.eigenvalues();
}

inline double min_eigenvalue(const Mat& m)
{
    return eigenvalues(symmetrize(m)).minCoeff();
}

inline double max_eigenvalue(const Mat& m)
{
    return eigenvalues(symmetrize(m)).maxCoeff();
}

inline bool is_positive_definite(const Mat& m)
{
    if (m.rows() != m.cols() || m.size() == 0)
        return false;
    Eigen::LLT<Mat> llt(symmetrize(m));
    return llt.info() == Eigen::Success && min_eigenvalue(m) > 0.0;
}

/// Inverse of a symmetric positive-definite matrix. Cholesky first; if that
/// fails the eigendecomposition is used so that near-singular inputs are
/// reported with their smallest eigenvalue.
inline Mat spd_inverse(const Mat& m, double min_eig = 1e-12)
{
    const Mat s = symmetrize(m);
    Eigen::LLT<Mat> llt(s);
    if (llt.info() == Eigen::Success) {
        const double diag_min = llt.matrixLLT().diagonal().minCoeff();
        if (diag_min * diag_min > min_eig)
            return symmetrize(llt.solve(Mat::Identity(s.rows(), s.cols())));
    }
    Eigen::SelfAdjointEigenSolver<Mat> es(s);
    const double lo = es.eigenvalues().minCoeff();
    if (!(lo > min_eig))
        throw NumericalSingularity("matrix is singular or indefinite (min eigenvalue "
                                   + std::to_string(lo) + ")");
    const Mat& v = es.eigenvectors();
    return symmetrize(v * es.eigenvalues().cwiseInverse().asDiagonal() * v.transpose());
}

/// Symmetrizes and clamps small negative eigenvalues to zero. Eigenvalues
/// below -neg_tol (relative to the largest magnitude) are treated as a bug
/// upstream and raise.
inline Mat clamp_psd(const Mat& m, double neg_tol = 1e-10)
{
    const Mat s = symmetrize(m);
    Eigen::SelfAdjointEigenSolver<Mat> es(s);
    const auto& ev = es.eigenvalues();
    const double scale = std::max(1.0, ev.cwiseAbs().maxCoeff());
    if (ev.minCoeff() >= 0.0)
        return s;
    if (ev.minCoeff() < -neg_tol * scale)
        throw NumericalSingularity("matrix lost positive semidefiniteness (min eigenvalue "
                                   + std::to_string(ev.minCoeff()) + ")");
    const Mat& v = es.eigenvectors();
    return symmetrize(v * ev.cwiseMax(0.0).asDiagonal() * v.transpose());
}

/// Symmetric square root L with L L^T = m for a PSD m (zero allowed).
inline Mat psd_sqrt(const Mat& m)
{
    Eigen::SelfAdjointEigenSolver<Mat> es(symmetrize(m));
    const Eigen::VectorXd root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return es.eigenvectors() * root.asDiagonal();
}

} // namespace linalg
} // namespace spi
