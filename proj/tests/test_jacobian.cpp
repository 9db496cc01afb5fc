#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>

#include "csdi/jacobian.hpp"
#include "test_util.hpp"

using namespace csdi;

namespace {

Eigen::MatrixXd orthonormal_cols(std::size_t rows, std::size_t cols, csdi::Rng& rng) {
    Eigen::MatrixXd G = csdi_test::random_matrix(rows, cols, rng);
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(G);
    return qr.householderQ() * Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(rows),
                                                         static_cast<Eigen::Index>(cols));
}

}  // namespace

TEST(ExactJacobian, LinearMapReturnsMatrix) {
    Rng rng(1);
    Tensor A = csdi_test::random_tensor(4, 3, rng);
    ad::Tape tape;
    ad::Var x = tape.leaf(Tensor::zeros(1, 3), true);
    ad::Var Av = tape.leaf(A);
    ad::Var y = tape.matmul(x, Av, ad::Op::matmul_nt);
    Eigen::MatrixXd J = exact_jacobian(tape, y, x);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 3; ++j)
            EXPECT_DOUBLE_EQ(J(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)),
                             A.at(i, j));
}

TEST(ExactJacobian, IdentityMap) {
    ad::Tape tape;
    ad::Var x = tape.leaf(Tensor::row({0.3, -0.7}), true);
    ad::Var y = tape.add_const(x, 0.0);
    Eigen::MatrixXd J = exact_jacobian(tape, y, x);
    EXPECT_TRUE(J.isApprox(Eigen::MatrixXd::Identity(2, 2)));
}

TEST(ExactJacobian, SeededMlpMatchesFiniteDifferences) {
    Rng rng(2);
    Mlp net = Mlp::init({3, 6, 10, 2, Head::tanh_scaled, 2.0, 0.2}, rng);
    Tensor x0 = csdi_test::random_tensor(1, 3, rng);

    ad::Tape tape;
    ad::Var x = tape.leaf(x0, true);
    auto bound = bind(tape, net, false);
    ad::Var y = bound.forward(tape, x);
    Eigen::MatrixXd J = exact_jacobian(tape, y, x);

    auto f = [&](const std::vector<double>& in) {
        return mlp_eval(net, Tensor::from_rows(1, 3, in)).v;
    };
    Eigen::MatrixXd J_fd = csdi_test::fd_jacobian(f, x0.v, 1e-5);
    EXPECT_LT(csdi_test::rel_error_matrix(J, J_fd), 1e-5);
}

TEST(ExactJacobian, CountsOnePassPerOutputCoordinate) {
    Rng rng(3);
    Mlp net = Mlp::init({3, 7, 8, 1, Head::linear, 1.0, 0.2}, rng);
    ad::Tape tape;
    ad::Var x = tape.leaf(csdi_test::random_tensor(1, 3, rng), true);
    auto bound = bind(tape, net, false);
    ad::Var y = bound.forward(tape, x);
    ad::CostCounters counters;
    exact_jacobian(tape, y, x, &counters);
    EXPECT_EQ(counters.backward_passes, 7u);
    EXPECT_EQ(counters.jacobian_matrix_floats, 21u);
}

TEST(PrincipalAngles, OrthogonalBasisVectors) {
    Eigen::MatrixXd Jc = Eigen::MatrixXd::Zero(3, 1), Js = Eigen::MatrixXd::Zero(3, 1);
    Jc(0, 0) = 1.0;
    Js(1, 0) = 1.0;
    AngleReport rep = principal_angles(Jc, Js);
    EXPECT_NEAR(rep.smallest_angle, kHalfPi, 1e-14);
    EXPECT_NEAR(rep.xi_implied, 0.0, 1e-14);
}

TEST(PrincipalAngles, FortyFiveDegrees) {
    Eigen::MatrixXd Jc = Eigen::MatrixXd::Zero(2, 1), Js = Eigen::MatrixXd::Zero(2, 1);
    Jc(0, 0) = 1.0;
    Js(0, 0) = 1.0 / std::sqrt(2.0);
    Js(1, 0) = 1.0 / std::sqrt(2.0);
    AngleReport rep = principal_angles(Jc, Js);
    EXPECT_NEAR(rep.smallest_angle, kHalfPi / 2.0, 1e-12);
}

TEST(PrincipalAngles, ZeroBlockRejected) {
    Eigen::MatrixXd Jc = Eigen::MatrixXd::Zero(3, 2);
    Eigen::MatrixXd Js = Eigen::MatrixXd::Ones(3, 1);
    EXPECT_THROW(principal_angles(Jc, Js), NumericError);
}

TEST(PrincipalAngles, SymmetricInArguments) {
    Rng rng(4);
    Eigen::MatrixXd A = csdi_test::random_matrix(8, 3, rng);
    Eigen::MatrixXd B = csdi_test::random_matrix(8, 2, rng);
    AngleReport ab = principal_angles(A, B);
    AngleReport ba = principal_angles(B, A);
    ASSERT_EQ(ab.principal_angles.size(), ba.principal_angles.size());
    for (std::size_t i = 0; i < ab.principal_angles.size(); ++i)
        EXPECT_NEAR(ab.principal_angles[i], ba.principal_angles[i], 1e-12);
}

TEST(PrincipalAngles, RotationInvariance) {
    Rng rng(5);
    Eigen::MatrixXd A = csdi_test::random_matrix(8, 3, rng);
    Eigen::MatrixXd B = csdi_test::random_matrix(8, 2, rng);
    Eigen::MatrixXd R = orthonormal_cols(8, 8, rng);
    AngleReport base = principal_angles(A, B);
    AngleReport rot = principal_angles(R * A, R * B);
    for (std::size_t i = 0; i < base.principal_angles.size(); ++i)
        EXPECT_NEAR(base.principal_angles[i], rot.principal_angles[i], 1e-10);
}

TEST(PrincipalAngles, ColumnScalingInvariance) {
    Rng rng(6);
    Eigen::MatrixXd A = csdi_test::random_matrix(8, 3, rng);
    Eigen::MatrixXd B = csdi_test::random_matrix(8, 2, rng);
    Eigen::VectorXd da(3), db(2);
    for (int i = 0; i < 3; ++i) da(i) = std::exp(rng.normal());
    for (int i = 0; i < 2; ++i) db(i) = std::exp(rng.normal());
    AngleReport base = principal_angles(A, B);
    AngleReport scaled = principal_angles(A * da.asDiagonal(), B * db.asDiagonal());
    for (std::size_t i = 0; i < base.principal_angles.size(); ++i)
        EXPECT_NEAR(base.principal_angles[i], scaled.principal_angles[i], 1e-10);
}

// Smallest principal angle is pi/2 at a point iff the exact loss with eps=0
// vanishes there.
TEST(PrincipalAngles, OrthogonalityIffLossZero) {
    Rng rng(7);
    Eigen::MatrixXd Q = orthonormal_cols(10, 5, rng);
    Eigen::MatrixXd Qc = Q.leftCols(3), Qs = Q.rightCols(2);
    AngleReport rep = principal_angles(Qc, Qs);
    double loss = orth_loss_exact(Qc, Qs, 0.0);
    EXPECT_NEAR(rep.smallest_angle, kHalfPi, 1e-10);
    EXPECT_LE(loss, 1e-20);

    // Tilt one style column toward content: angle drops and loss lifts.
    Eigen::MatrixXd Qs_tilt = Qs;
    Qs_tilt.col(0) = std::cos(0.25) * Qs.col(0) + std::sin(0.25) * Qc.col(0);
    AngleReport tilted = principal_angles(Qc, Qs_tilt);
    double loss_t = orth_loss_exact(Qc, Qs_tilt, 0.0);
    EXPECT_LT(tilted.smallest_angle, kHalfPi - 1e-3);
    EXPECT_GT(loss_t, 1e-10);
}

// Chain rule: for g_hat(gamma(c), delta(c, s)) built explicitly on the tape,
// the exact Jacobian of the composition equals the block product.
TEST(ExactJacobian, ChainRuleConsistency) {
    Rng rng(8);
    const std::size_t d_C = 2, d_S = 2, d = 6;
    Mlp gamma_net = Mlp::init({d_C, d_C, 6, 1, Head::linear, 1.0, 0.2}, rng);
    Mlp delta_net = Mlp::init({d_C + d_S, d_S, 6, 1, Head::linear, 1.0, 0.2}, rng);
    Mlp g_net = Mlp::init({d_C + d_S, d, 8, 1, Head::tanh_scaled, 1.5, 0.2}, rng);
    Tensor c0 = csdi_test::random_tensor(1, d_C, rng);
    Tensor s0 = csdi_test::random_tensor(1, d_S, rng);

    // Composition on one tape, Jacobian w.r.t. c.
    ad::Tape tape;
    ad::Var c = tape.leaf(c0, true);
    ad::Var s = tape.leaf(s0, true);
    auto gb = bind(tape, gamma_net, false);
    auto db = bind(tape, delta_net, false);
    auto hb = bind(tape, g_net, false);
    ad::Var gc = gb.forward(tape, c);
    ad::Var dcs = db.forward(tape, tape.concat_cols(c, s));
    ad::Var x = hb.forward(tape, tape.concat_cols(gc, dcs));
    Eigen::MatrixXd J_comp = exact_jacobian(tape, x, c);

    // Block Jacobians at the same point.
    Eigen::MatrixXd J_gamma = exact_jacobian(tape, gc, c);
    Eigen::MatrixXd J_delta_c = exact_jacobian(tape, dcs, c);
    Eigen::MatrixXd J_g_c, J_g_s;
    {
        ad::Tape t2;
        ad::Var u = t2.leaf(tape.value(gc), true);
        ad::Var w = t2.leaf(tape.value(dcs), true);
        auto hb2 = bind(t2, g_net, false);
        ad::Var x2 = hb2.forward(t2, t2.concat_cols(u, w));
        J_g_c = exact_jacobian(t2, x2, u);
        J_g_s = exact_jacobian(t2, x2, w);
    }
    Eigen::MatrixXd J_chain = J_g_c * J_gamma + J_g_s * J_delta_c;
    EXPECT_LT((J_comp - J_chain).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(BoundCheck, ExactlyOrthogonalConstructionAtXiZero) {
    Rng rng(9);
    Eigen::MatrixXd Q = orthonormal_cols(8, 4, rng);
    Eigen::MatrixXd Uc = Q.leftCols(2), Us = Q.rightCols(2);
    BoundCheckInput in;
    in.Jc_true = Uc;
    in.Js_learned_full = Us;
    in.Jc_of_learned_style = Eigen::MatrixXd::Zero(2, 2);  // sin(0) * M^T
    BoundCheck out = robustness_bound_check(in, 0.0);
    EXPECT_EQ(out.lhs, 0.0);
    EXPECT_NEAR(out.rhs, 0.0, 1e-15);
    EXPECT_TRUE(out.holds);
}

// Explicit linear world with tilt 0.2: the learned-style contamination
// J_c delta = sin(xi) M^T meets the bound with near equality.
TEST(BoundCheck, ExplicitLinearWorldHolds) {
    Rng rng(10);
    const double xi = 0.2;
    Eigen::MatrixXd Q = orthonormal_cols(10, 6, rng);
    Eigen::MatrixXd Uc = Q.leftCols(3), Us = Q.middleCols(3, 2);
    Eigen::MatrixXd M = orthonormal_cols(3, 2, rng);  // style tilt directions in content range
    Eigen::MatrixXd W = Uc * M;
    Eigen::MatrixXd Us_tilt = std::cos(xi) * Us + std::sin(xi) * W;

    // Learned model: style frame = tilted true frame, delta = Us_tilt^T x.
    BoundCheckInput in;
    in.Jc_true = Uc;
    in.Js_learned_full = Us_tilt;
    in.Jc_of_learned_style = Us_tilt.transpose() * Uc;  // = sin(xi) M^T up to round-off
    BoundCheck out = robustness_bound_check(in, xi);
    EXPECT_TRUE(out.holds);
    EXPECT_NEAR(out.lhs, std::sin(xi), 1e-12);
    EXPECT_NEAR(out.rhs, std::sin(xi), 1e-10);
}

TEST(BoundCheck, RankDeficientStyleRejected) {
    Eigen::MatrixXd Uc = Eigen::MatrixXd::Identity(4, 2);
    Eigen::MatrixXd Us = Eigen::MatrixXd::Zero(4, 2);
    Us.col(0) = Eigen::VectorXd::Unit(4, 2);
    Us.col(1) = Us.col(0);  // rank 1
    BoundCheckInput in;
    in.Jc_true = Uc;
    in.Js_learned_full = Us;
    in.Jc_of_learned_style = Eigen::MatrixXd::Zero(2, 2);
    EXPECT_THROW(robustness_bound_check(in, 0.1), NumericError);
}

TEST(SubspaceDistance, IdenticalAndOrthogonal) {
    Rng rng(11);
    Eigen::MatrixXd Q = orthonormal_cols(8, 4, rng);
    Eigen::MatrixXd A = Q.leftCols(2), B = Q.rightCols(2);
    EXPECT_NEAR(subspace_distance(A, A), 0.0, 1e-12);
    EXPECT_NEAR(subspace_distance(A, B), 1.0, 1e-12);
}

TEST(SubspaceDistance, RankDeficientRejected) {
    Eigen::MatrixXd A = Eigen::MatrixXd::Zero(4, 2);
    A.col(0) = Eigen::VectorXd::Unit(4, 0);
    A.col(1) = A.col(0);
    Eigen::MatrixXd B = Eigen::MatrixXd::Identity(4, 2);
    EXPECT_THROW(subspace_distance(A, B), NumericError);
}

TEST(CostAudit, ProbeAndExactCountsFollowTheFormulas) {
    ModelShape shape;
    shape.enc_width = 8;
    shape.enc_hidden = 1;
    shape.gen_width = 12;
    shape.gen_hidden = 1;
    shape.disc_width = 8;
    shape.disc_hidden = 1;

    struct Case {
        std::size_t d, d_C, d_S, K;
    };
    for (const Case& c : {Case{16, 3, 2, 4}, Case{24, 4, 3, 8}, Case{12, 2, 2, 6}}) {
        DimensionPlan plan;
        plan.d = c.d;
        plan.d_C = c.d_C;
        plan.d_S = c.d_S;
        plan.d_C1 = 1;
        plan.d_C2 = c.d_C - 1;
        plan.d_S1 = c.d_S - 1;
        plan.N = 1;
        Rng rng(12);
        ModelBundle m = ModelBundle::init(plan, shape, rng);

        Rng audit_rng(13);
        CostAudit exact = cost_audit(m, AuditMode::exact, c.K, 1e-8, audit_rng);
        EXPECT_EQ(exact.backward_passes, c.d);
        EXPECT_EQ(exact.peak_jacobian_floats, c.d * (c.d_C + c.d_S));

        Rng audit_rng2(13);
        CostAudit probe = cost_audit(m, AuditMode::probe, c.K, 1e-8, audit_rng2);
        EXPECT_EQ(probe.backward_passes, c.K);
        EXPECT_EQ(probe.peak_jacobian_floats, c.d + c.d_S * c.d_C);
        EXPECT_EQ(probe.jacobian_matrix_floats, 0u);  // no d x d_C buffer, structurally
    }
}
