#pragma once

// Shared helpers for the unit suites: finite-difference Jacobian oracles and
// seeded random matrices. These stay independent of the library's own VJP
// path so they can serve as its reference.

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <vector>

#include "csdi/rng.hpp"
#include "csdi/tensor.hpp"

namespace csdi_test {

// Central-difference Jacobian of a vector map given only by evaluation.
inline Eigen::MatrixXd fd_jacobian(const std::function<std::vector<double>(const std::vector<double>&)>& f,
                                   std::vector<double> x, double step) {
    std::vector<double> base = f(x);
    Eigen::MatrixXd J(static_cast<Eigen::Index>(base.size()), static_cast<Eigen::Index>(x.size()));
    for (std::size_t j = 0; j < x.size(); ++j) {
        const double orig = x[j];
        x[j] = orig + step;
        std::vector<double> fp = f(x);
        x[j] = orig - step;
        std::vector<double> fm = f(x);
        x[j] = orig;
        for (std::size_t i = 0; i < base.size(); ++i)
            J(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
                (fp[i] - fm[i]) / (2.0 * step);
    }
    return J;
}

inline Eigen::MatrixXd random_matrix(std::size_t rows, std::size_t cols, csdi::Rng& rng) {
    Eigen::MatrixXd M(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (Eigen::Index i = 0; i < M.rows(); ++i)
        for (Eigen::Index j = 0; j < M.cols(); ++j) M(i, j) = rng.normal();
    return M;
}

inline csdi::Tensor random_tensor(std::size_t rows, std::size_t cols, csdi::Rng& rng,
                                  double scale = 1.0) {
    csdi::Tensor t(rows, cols);
    for (double& x : t.v) x = scale * rng.normal();
    return t;
}

// Matrix-scale relative error: max entry deviation over the reference's
// largest magnitude.
inline double rel_error_matrix(const Eigen::MatrixXd& got, const Eigen::MatrixXd& want) {
    double scale = want.cwiseAbs().maxCoeff();
    return (got - want).cwiseAbs().maxCoeff() / (scale + 1e-12);
}

}  // namespace csdi_test
