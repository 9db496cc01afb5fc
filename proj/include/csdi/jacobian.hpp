#pragma once

// Exact Jacobian extraction and subspace analysis: principal angles between
// the content- and style-induced tangent subspaces, numerical ranks, the
// style-leakage robustness bound, and the backward-pass/memory audit of the
// exact-vs-probe estimator paths.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "csdi/losses.hpp"
#include "csdi/model.hpp"
#include "csdi/tape.hpp"

namespace csdi {

inline constexpr double kRankTol = 1e-8;  // sigma > tol * sigma_max counts toward rank
inline constexpr double kHalfPi = 1.5707963267948966;

struct JacobianPair {
    Eigen::MatrixXd Jc;  // d x d_C
    Eigen::MatrixXd Js;  // d x d_S
};

struct AngleReport {
    std::vector<double> principal_angles;  // ascending, in [0, pi/2]
    double smallest_angle = 0.0;
    double sigma_min_style = 0.0;  // smallest singular value of Js
    std::size_t rank_c = 0;
    std::size_t rank_s = 0;
    double xi_implied = 0.0;  // pi/2 - smallest angle, clamped to [0, pi/2]
    bool theorem_applicable = false;  // rank_s == d_S
};

// Full Jacobian block of `out` w.r.t. `in` at a single-sample point,
// assembled from dim(out) numeric VJP calls with basis cotangents.
inline Eigen::MatrixXd exact_jacobian(ad::Tape& tape, ad::Var out, ad::Var in,
                                      ad::CostCounters* counters = nullptr) {
    const Tensor& y = tape.value(out);
    const Tensor& x = tape.value(in);
    if (y.rows() != 1 || x.rows() != 1)
        throw ShapeError("exact_jacobian: expects single-row point, got " + y.shape_str());
    const std::size_t dim_out = y.cols(), dim_in = x.cols();
    Eigen::MatrixXd J(static_cast<Eigen::Index>(dim_out), static_cast<Eigen::Index>(dim_in));
    if (counters) counters->note_jacobian_matrix(dim_out * dim_in);
    std::vector<ad::Var> wrt{in};
    for (std::size_t i = 0; i < dim_out; ++i) {
        Tensor e(1, dim_out);
        e.v[i] = 1.0;
        Tensor row = tape.vjp(out, e, wrt, counters)[0];
        if (!row.all_finite())
            throw NumericError("exact_jacobian: non-finite row at output coordinate " +
                               std::to_string(i));
        for (std::size_t j = 0; j < dim_in; ++j)
            J(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = row.v[j];
    }
    return J;
}

// Both generator blocks at one latent point; one backward pass per output
// coordinate yields a row of [Jc | Js] simultaneously.
inline JacobianPair generator_jacobians(const ModelBundle& m, const Tensor& c_hat,
                                        const Tensor& s_hat, ad::CostCounters* counters = nullptr) {
    ad::Tape tape;
    BoundMlp g = bind(tape, m.gen, false);
    ad::Var c = tape.leaf(c_hat, true);
    ad::Var s = tape.leaf(s_hat, true);
    ad::Var x = g.forward(tape, tape.concat_cols(c, s));
    const std::size_t d = tape.value(x).cols();
    JacobianPair pair;
    pair.Jc.resize(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(c_hat.cols()));
    pair.Js.resize(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(s_hat.cols()));
    if (counters) counters->note_jacobian_matrix(d * (c_hat.cols() + s_hat.cols()));
    std::vector<ad::Var> wrt{c, s};
    for (std::size_t i = 0; i < d; ++i) {
        Tensor e(1, d);
        e.v[i] = 1.0;
        auto rows = tape.vjp(x, e, wrt, counters);
        for (std::size_t j = 0; j < c_hat.cols(); ++j)
            pair.Jc(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[0].v[j];
        for (std::size_t j = 0; j < s_hat.cols(); ++j)
            pair.Js(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[1].v[j];
    }
    return pair;
}

namespace detail {

// Orthonormal basis of the column space at numerical rank.
inline Eigen::MatrixXd orth_basis(const Eigen::MatrixXd& A, double rank_tol, std::size_t* rank_out) {
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(A, Eigen::ComputeThinU);
    const auto& sv = svd.singularValues();
    if (sv.size() == 0 || sv(0) <= 0.0) throw NumericError("orth_basis: degenerate subspace");
    std::size_t rank = 0;
    for (Eigen::Index i = 0; i < sv.size(); ++i)
        if (sv(i) > rank_tol * sv(0)) ++rank;
    if (rank_out) *rank_out = rank;
    return svd.matrixU().leftCols(static_cast<Eigen::Index>(rank));
}

}  // namespace detail

inline AngleReport principal_angles(const Eigen::MatrixXd& Jc, const Eigen::MatrixXd& Js,
                                    double rank_tol = kRankTol) {
    if (Jc.norm() == 0.0 || Js.norm() == 0.0)
        throw NumericError("principal_angles: degenerate subspace (zero block)");
    AngleReport rep;
    Eigen::MatrixXd Qc = detail::orth_basis(Jc, rank_tol, &rep.rank_c);
    Eigen::MatrixXd Qs = detail::orth_basis(Js, rank_tol, &rep.rank_s);
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(Qc.transpose() * Qs);
    const auto& sv = svd.singularValues();
    for (Eigen::Index i = 0; i < sv.size(); ++i) {
        double c = std::min(1.0, std::max(0.0, sv(i)));
        rep.principal_angles.push_back(std::acos(c));
    }
    std::sort(rep.principal_angles.begin(), rep.principal_angles.end());
    rep.smallest_angle = rep.principal_angles.front();
    {
        Eigen::JacobiSVD<Eigen::MatrixXd> ssvd(Js);
        rep.sigma_min_style = ssvd.singularValues().tail(1)(0);
    }
    rep.xi_implied = std::min(kHalfPi, std::max(0.0, kHalfPi - rep.smallest_angle));
    rep.theorem_applicable = rep.rank_s == static_cast<std::size_t>(Js.cols());
    return rep;
}

struct BoundCheck {
    double lhs = 0.0;   // ||J_c s_hat||_2
    double rhs = 0.0;   // sin(xi) ||J_c g||_2 / sigma_min(J_s_hat g_hat)
    bool holds = false;
};

struct BoundCheckInput {
    Eigen::MatrixXd Jc_true;             // J_c g, d x d_C
    Eigen::MatrixXd Js_learned_full;     // J_{s_hat} g_hat at the matched point, d x d_S
    Eigen::MatrixXd Jc_of_learned_style; // J_c delta, d_S x d_C
};

inline BoundCheck robustness_bound_check(const BoundCheckInput& in, double xi,
                                         double tol = 1e-9) {
    Eigen::JacobiSVD<Eigen::MatrixXd> svd_style(in.Js_learned_full);
    const auto& sv = svd_style.singularValues();
    const double sigma_min = sv.tail(1)(0);
    if (sigma_min <= kRankTol * sv(0))
        throw NumericError("style Jacobian rank-deficient, Theorem 2 inapplicable");
    BoundCheck out;
    out.lhs = in.Jc_of_learned_style.norm() == 0.0
                  ? 0.0
                  : Eigen::JacobiSVD<Eigen::MatrixXd>(in.Jc_of_learned_style).singularValues()(0);
    const double jc_norm =
        Eigen::JacobiSVD<Eigen::MatrixXd>(in.Jc_true).singularValues()(0);
    out.rhs = std::sin(xi) * jc_norm / sigma_min;
    out.holds = out.lhs <= out.rhs + tol;
    return out;
}

// ||P_A - P_B||_2 for equal-dimension full-column-rank blocks: the sine of
// the largest principal angle. Computed from the projection residual
// (I - P_A) Q_B, which stays accurate near zero distance where the
// cosine-based route loses half the digits.
inline double subspace_distance(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B,
                                double rank_tol = kRankTol) {
    std::size_t rank_a = 0, rank_b = 0;
    Eigen::MatrixXd Qa = detail::orth_basis(A, rank_tol, &rank_a);
    Eigen::MatrixXd Qb = detail::orth_basis(B, rank_tol, &rank_b);
    if (rank_a != static_cast<std::size_t>(A.cols()) || rank_b != static_cast<std::size_t>(B.cols()))
        throw NumericError("subspace_distance: rank-deficient input");
    if (rank_a != rank_b) return 1.0;
    Eigen::MatrixXd residual = Qb - Qa * (Qa.transpose() * Qb);
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(residual);
    return std::min(1.0, svd.singularValues()(0));
}

enum class AuditMode { exact, probe };

struct CostAudit {
    std::uint64_t backward_passes = 0;   // per sample
    std::size_t peak_jacobian_floats = 0;  // per sample
    std::size_t jacobian_matrix_floats = 0;
    double orth_value = 0.0;
};

// Runs the two estimator code paths on a single sample with instrumentation
// and reports measured counts. The probe path must show exactly K passes and
// d + d_S*d_C Jacobian-related floats, never an explicit Jacobian buffer.
inline CostAudit cost_audit(const ModelBundle& m, AuditMode mode, std::size_t K, double eps,
                            Rng& rng) {
    const DimensionPlan& plan = m.plan;
    LatentBatch seeds = sample_latents(plan, 1, rng, 0);
    ad::CostCounters counters;
    CostAudit audit;
    if (mode == AuditMode::exact) {
        ad::Tape tape;
        BoundBundle bound = bind_generator_side(tape, m, false);
        GenForward f = generate_on_tape(tape, bound, seeds, 0);
        // Re-point the VJPs at the encoder outputs: one pass per output coord.
        Tensor c_hat = tape.value(f.c_hat), s_hat = tape.value(f.s_hat);
        JacobianPair pair = generator_jacobians(m, c_hat, s_hat, &counters);
        audit.orth_value = orth_loss_exact(pair.Jc, pair.Js, eps);
    } else {
        ad::Tape tape;
        BoundBundle bound = bind_generator_side(tape, m, true);
        GenForward f = generate_on_tape(tape, bound, seeds, 0);
        ad::Var loss = orth_loss_probe(tape, f, K, ProbeKind::gaussian, eps, rng, &counters);
        audit.orth_value = tape.value(loss).v[0];
    }
    audit.backward_passes = counters.backward_passes;
    audit.peak_jacobian_floats = counters.peak_jacobian_floats();
    audit.jacobian_matrix_floats = counters.jacobian_matrix_floats;
    return audit;
}

}  // namespace csdi
