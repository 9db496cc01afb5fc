#include <gtest/gtest.h>

#include <filesystem>

#include "csdi/world.hpp"
#include "test_util.hpp"

using namespace csdi;

namespace {

DimensionPlan world_plan() {
    DimensionPlan p;
    p.d = 12;
    p.d_C = 2;
    p.d_S = 2;
    p.d_C1 = 1;
    p.d_C2 = 1;
    p.d_S1 = 1;
    p.N = 2;
    return p;
}

}  // namespace

TEST(ForgeWorld, UntiltedWorldIsOrthogonalEverywhere) {
    WorldSpec w = forge_world(world_plan(), 0.0, NonlinearityConfig{}, 11);
    Rng rng(1);
    WorldSample batch = sample_world(w, 10, 0, rng);
    for (std::size_t i = 0; i < 10; ++i) {
        Tensor c(1, 2), s(1, 2);
        for (std::size_t j = 0; j < 2; ++j) {
            c.v[j] = batch.c_true.at(i, j);
            s.v[j] = batch.s_true.at(i, j);
        }
        JacobianPair pair = world_jacobians(w, c, s);
        AngleReport rep = principal_angles(pair.Jc, pair.Js);
        EXPECT_NEAR(rep.smallest_angle, kHalfPi, 1e-8);
    }
}

TEST(ForgeWorld, TiltedWorldReportsRequestedAngle) {
    const double xi = 0.3;
    WorldSpec w = forge_world(world_plan(), xi, NonlinearityConfig{}, 12);
    Rng rng(2);
    WorldSample batch = sample_world(w, 10, 1, rng);
    for (std::size_t i = 0; i < 10; ++i) {
        Tensor c(1, 2), s(1, 2);
        for (std::size_t j = 0; j < 2; ++j) {
            c.v[j] = batch.c_true.at(i, j);
            s.v[j] = batch.s_true.at(i, j);
        }
        JacobianPair pair = world_jacobians(w, c, s);
        AngleReport rep = principal_angles(pair.Jc, pair.Js);
        EXPECT_NEAR(rep.smallest_angle, kHalfPi - xi, 1e-8);
        EXPECT_NEAR(rep.xi_implied, xi, 1e-8);
    }
}

TEST(ForgeWorld, IdentityComponentsGiveConstantFrameJacobian) {
    NonlinearityConfig nl;
    nl.identity = true;
    WorldSpec w = forge_world(world_plan(), 0.2, nl, 13);
    ad::Tape tape;
    Rng rng(3);
    ad::Var c = tape.leaf(csdi_test::random_tensor(1, 2, rng), true);
    ad::Var s = tape.leaf(csdi_test::random_tensor(1, 2, rng), true);
    ad::Var x = world_forward_on_tape(tape, w, c, s);
    Eigen::MatrixXd Jc = exact_jacobian(tape, x, c);
    Eigen::MatrixXd Js = exact_jacobian(tape, x, s);
    EXPECT_LT((Jc - w.Qc).cwiseAbs().maxCoeff(), 1e-14);
    EXPECT_LT((Js - w.Qs).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(ForgeWorld, RejectsBadTilt) {
    EXPECT_THROW(forge_world(world_plan(), kHalfPi, NonlinearityConfig{}, 1), ConfigError);
    DimensionPlan p = world_plan();
    p.d_C = 1;  // d_S > d_C cannot be tilted
    p.d_C1 = 0;
    p.d_C2 = 1;
    EXPECT_THROW(forge_world(p, 0.1, NonlinearityConfig{}, 1), ConfigError);
}

// Analytic Jacobians against the tape route: the dual-route check for the
// world construction.
TEST(ForgeWorld, AnalyticJacobianMatchesTapeJacobian) {
    WorldSpec w = forge_world(world_plan(), 0.25, NonlinearityConfig{}, 14);
    Rng rng(4);
    Tensor c = csdi_test::random_tensor(1, 2, rng);
    Tensor s = csdi_test::random_tensor(1, 2, rng);
    JacobianPair analytic = world_jacobians(w, c, s);

    ad::Tape tape;
    ad::Var cv = tape.leaf(c, true);
    ad::Var sv = tape.leaf(s, true);
    ad::Var x = world_forward_on_tape(tape, w, cv, sv);
    Eigen::MatrixXd Jc = exact_jacobian(tape, x, cv);
    Eigen::MatrixXd Js = exact_jacobian(tape, x, sv);
    EXPECT_LT((Jc - analytic.Jc).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((Js - analytic.Js).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(SampleWorld, DeterministicAndConsistent) {
    WorldSpec w = forge_world(world_plan(), 0.1, NonlinearityConfig{}, 15);
    Rng r1(5), r2(5);
    WorldSample a = sample_world(w, 16, 0, r1);
    WorldSample b = sample_world(w, 16, 0, r2);
    EXPECT_EQ(a.x.v, b.x.v);
    EXPECT_EQ(a.c_true.v, b.c_true.v);

    // x equals the construction recomputed independently.
    Tensor again = world_forward(w, a.c_true, a.s_true);
    EXPECT_EQ(a.x.v, again.v);
}

TEST(SampleWorld, StyleLawsDifferAcrossDomains) {
    WorldSpec w = forge_world(world_plan(), 0.0, NonlinearityConfig{}, 16);
    Rng rng(6);
    const std::size_t n = 10000;
    WorldSample d0 = sample_world(w, n, 0, rng);
    WorldSample d1 = sample_world(w, n, 1, rng);
    Eigen::VectorXd m0 = Eigen::VectorXd::Zero(2), m1 = Eigen::VectorXd::Zero(2);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < 2; ++j) {
            m0(static_cast<Eigen::Index>(j)) += d0.s_true.at(i, j);
            m1(static_cast<Eigen::Index>(j)) += d1.s_true.at(i, j);
        }
    m0 /= static_cast<double>(n);
    m1 /= static_cast<double>(n);
    EXPECT_GE((m0 - m1).norm(), 0.5);
}

// No two distinct latent pairs map to nearly the same observation.
TEST(SampleWorld, InjectivityOnSampledLatents) {
    WorldSpec w = forge_world(world_plan(), 0.2, NonlinearityConfig{}, 17);
    Rng rng(7);
    const std::size_t n = 200;  // 200 choose 2 ~ 2e4 pairs
    WorldSample batch = sample_world(w, n, 0, rng);
    std::size_t checked = 0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            double dz = 0.0, dx = 0.0;
            for (std::size_t k = 0; k < 2; ++k) {
                double dc = batch.c_true.at(i, k) - batch.c_true.at(j, k);
                double ds = batch.s_true.at(i, k) - batch.s_true.at(j, k);
                dz += dc * dc + ds * ds;
            }
            for (std::size_t k = 0; k < 12; ++k) {
                double d2 = batch.x.at(i, k) - batch.x.at(j, k);
                dx += d2 * d2;
            }
            if (std::sqrt(dz) > 1e-6) {
                ++checked;
                EXPECT_GT(std::sqrt(dx), 1e-9);
            }
        }
    }
    EXPECT_GT(checked, 10000u);
}

// Shared-block correlation between c and s vanishes when d_C1 = 0.
TEST(SampleWorld, DependenceVanishesWithoutSharedBlock) {
    DimensionPlan dependent = world_plan();
    DimensionPlan indep = world_plan();
    indep.d_C1 = 0;
    indep.d_C2 = 2;
    indep.d_S1 = 2;

    auto max_cross_corr = [](const WorldSample& sample, std::size_t n) {
        double best = 0.0;
        for (std::size_t a = 0; a < sample.c_true.cols(); ++a)
            for (std::size_t b = 0; b < sample.s_true.cols(); ++b) {
                double ma = 0, mb = 0, va = 0, vb = 0, cross = 0;
                for (std::size_t i = 0; i < n; ++i) {
                    ma += sample.c_true.at(i, a);
                    mb += sample.s_true.at(i, b);
                }
                ma /= static_cast<double>(n);
                mb /= static_cast<double>(n);
                for (std::size_t i = 0; i < n; ++i) {
                    double da = sample.c_true.at(i, a) - ma;
                    double db = sample.s_true.at(i, b) - mb;
                    va += da * da;
                    vb += db * db;
                    cross += da * db;
                }
                best = std::max(best, std::fabs(cross / std::sqrt(va * vb + 1e-300)));
            }
        return best;
    };

    const std::size_t n = 20000;
    WorldSpec wd = forge_world(dependent, 0.0, NonlinearityConfig{}, 18);
    WorldSpec wi = forge_world(indep, 0.0, NonlinearityConfig{}, 18);
    Rng r1(8), r2(8);
    double corr_dep = max_cross_corr(sample_world(wd, n, 0, r1), n);
    double corr_ind = max_cross_corr(sample_world(wi, n, 0, r2), n);
    EXPECT_GT(corr_dep, 0.5);   // shared block forces correlation ~ 1 on that coordinate
    EXPECT_LT(corr_ind, 0.05);  // chance level at n = 20000
}

TEST(WorldIo, RoundTripPreservesBehavior) {
    namespace fs = std::filesystem;
    WorldSpec w = forge_world(world_plan(), 0.3, NonlinearityConfig{}, 19);
    fs::path dir = fs::temp_directory_path() / "csdi_world_test";
    fs::create_directories(dir);
    std::string path = (dir / "w.json").string();
    save_world(path, w);
    WorldSpec loaded = load_world(path);
    EXPECT_EQ(loaded.xi, w.xi);
    Rng r1(9), r2(9);
    WorldSample a = sample_world(w, 8, 1, r1);
    WorldSample b = sample_world(loaded, 8, 1, r2);
    EXPECT_EQ(a.x.v, b.x.v);
    fs::remove_all(dir);
}
