#pragma once

#include <cmath>
#include <string>

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include "lolafl/errors.hpp"

namespace lolafl {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

inline constexpr double kInverseResidualTol = 1e-6;

/// Returns (M + Mᵀ)/2.
inline Matrix symmetrize(const Matrix& m) {
    return 0.5 * (m + m.transpose());
}

/// Z Zᵀ computed as a symmetric rank update; exactly symmetric on output.
inline Matrix gram(const Eigen::Ref<const Matrix>& z) {
    Matrix r = Matrix::Zero(z.rows(), z.rows());
    if (z.cols() > 0) {
        r.selfadjointView<Eigen::Lower>().rankUpdate(z);
        r.triangularView<Eigen::StrictlyUpper>() = r.transpose();
    }
    return r;
}

/// Inverse of a symmetric positive-definite matrix through its Cholesky
/// factor. Throws NumericalFailure when the factorization breaks down or the
/// reconstruction residual ‖A·A⁻¹ − I‖_F exceeds kInverseResidualTol.
inline Matrix spd_inverse(const Matrix& a, const char* what = "matrix") {
    if (a.rows() != a.cols()) {
        throw ShapeMismatch(std::string("spd_inverse: ") + what + " is not square");
    }
    const Index n = a.rows();
    Eigen::LLT<Matrix> llt(a);
    if (llt.info() != Eigen::Success) {
        throw NumericalFailure(std::string("Cholesky factorization failed for ") + what);
    }
    Matrix inv = llt.solve(Matrix::Identity(n, n));
    inv = symmetrize(inv);
    const double residual = (a * inv - Matrix::Identity(n, n)).norm();
    if (!std::isfinite(residual) || residual > kInverseResidualTol) {
        throw NumericalFailure(std::string("inverse residual ") + std::to_string(residual) +
                               " too large for " + what);
    }
    return inv;
}

/// log det of an SPD matrix via Cholesky.
inline double spd_logdet(const Matrix& a) {
    Eigen::LLT<Matrix> llt(a);
    if (llt.info() != Eigen::Success) {
        throw NumericalFailure("Cholesky factorization failed in log-determinant");
    }
    return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
}

inline double relative_frobenius(const Matrix& actual, const Matrix& expected) {
    const double denom = expected.norm();
    const double diff = (actual - expected).norm();
    return denom > 0.0 ? diff / denom : diff;
}

} // namespace lolafl
