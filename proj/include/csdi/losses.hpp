#pragma once

// The three-part training objective: per-domain adversarial loss, encoder
// invertibility loss, and the differential-independence regularizer
//
//     L_orth = sum_n E[ ||Js^T Jc||_F^2 / (||Jc||_F^2 ||Js||_F^2 + eps) ]
//
// in an exact dense form and a stochastic probe form. The probe form draws K
// vectors v with E[v v^T] = I per sample and contracts the generator Jacobian
// blocks with them through VJPs only, never materializing a d x d_C or
// d x d_S matrix. Both VJPs of a sample share the same probe, which is what
// couples Js^T v with Jc^T v in the numerator.

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "csdi/model.hpp"
#include "csdi/rng.hpp"
#include "csdi/tape.hpp"

namespace csdi {

enum class ProbeKind { gaussian, rademacher, basis_enumeration };

inline const char* probe_kind_name(ProbeKind k) {
    switch (k) {
        case ProbeKind::gaussian: return "gaussian";
        case ProbeKind::rademacher: return "rademacher";
        case ProbeKind::basis_enumeration: return "basis-enumeration";
    }
    return "?";
}

inline ProbeKind parse_probe_kind(const std::string& s) {
    if (s == "gaussian") return ProbeKind::gaussian;
    if (s == "rademacher") return ProbeKind::rademacher;
    if (s == "basis-enumeration") return ProbeKind::basis_enumeration;
    throw ConfigError("unknown probe kind: " + s);
}

struct LossWeights {
    double lambda_inv = 0.001;
    double lambda_orth = 1.0;
    double eps = 1e-8;
    std::size_t probes_K = 8;
    ProbeKind probe_kind = ProbeKind::gaussian;

    void validate() const {
        if (lambda_inv < 0.0 || lambda_orth < 0.0)
            throw ConfigError("LossWeights: lambdas must be non-negative");
        if (eps <= 0.0) throw ConfigError("LossWeights: eps must be positive");
        if (probes_K < 1) throw ConfigError("LossWeights: probes_K must be >= 1");
    }
};

struct LossReport {
    std::vector<double> gan_per_domain;  // Eq-style minimax value per domain
    double gan_total = 0.0;
    double inv = 0.0;
    double orth = 0.0;
    bool has_orth_exact = false;
    double orth_exact = 0.0;
    double grad_norm_generator = 0.0;
    double grad_norm_disc = 0.0;
    bool clamped = false;  // discriminator outputs hit the (0,1) guard

    bool all_finite() const {
        for (double g : gan_per_domain)
            if (!std::isfinite(g)) return false;
        return std::isfinite(gan_total) && std::isfinite(inv) && std::isfinite(orth);
    }
};

inline constexpr double kDiscClampLo = 1e-7;
inline constexpr double kDiscClampHi = 1.0 - 1e-7;

// Value of the minimax objective E[log d(x)] + E[log(1 - d(x_hat))] for one
// domain from discriminator outputs. Outputs at exactly 0 or 1 are clamped
// into [1e-7, 1-1e-7] and flagged.
inline double gan_loss(const std::vector<double>& disc_real, const std::vector<double>& disc_fake,
                       bool* clamped_flag = nullptr) {
    if (disc_real.empty() || disc_fake.empty()) throw ConfigError("gan_loss: empty batch");
    bool clamped = false;
    auto mean_log = [&](const std::vector<double>& xs, bool one_minus) {
        double s = 0.0;
        for (double x : xs) {
            double p = one_minus ? 1.0 - x : x;
            if (p < kDiscClampLo || p > kDiscClampHi) {
                p = std::min(std::max(p, kDiscClampLo), kDiscClampHi);
                clamped = true;
            }
            s += std::log(p);
        }
        return s / static_cast<double>(xs.size());
    };
    double value = mean_log(disc_real, false) + mean_log(disc_fake, true);
    if (clamped_flag) *clamped_flag = clamped;
    return value;
}

// Exact regularizer on explicit Jacobian blocks.
inline double orth_loss_exact(const Eigen::MatrixXd& Jc, const Eigen::MatrixXd& Js, double eps) {
    if (Jc.rows() != Js.rows())
        throw ShapeError("orth_loss_exact: row mismatch " + std::to_string(Jc.rows()) + " vs " +
                         std::to_string(Js.rows()));
    const double cross = (Js.transpose() * Jc).squaredNorm();
    const double den = Jc.squaredNorm() * Js.squaredNorm() + eps;
    return cross / den;
}

// Probe-based estimate on explicit Jacobian blocks (analysis path; the
// trainable tape path below uses the same contraction through VJPs).
inline double orth_loss_probe_matrices(const Eigen::MatrixXd& Jc, const Eigen::MatrixXd& Js,
                                       std::size_t K, ProbeKind kind, double eps, Rng& rng,
                                       ad::CostCounters* counters = nullptr) {
    if (K < 1) throw ConfigError("orth_loss_probe: K must be >= 1");
    const std::size_t d = static_cast<std::size_t>(Jc.rows());
    if (kind == ProbeKind::basis_enumeration) K = d;
    Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(Js.cols(), Jc.cols());
    double den_c = 0.0, den_s = 0.0;
    Eigen::VectorXd v(d);
    if (counters) {
        counters->note_probe_vector(d);
        counters->note_accumulator(static_cast<std::size_t>(Js.cols() * Jc.cols()));
    }
    const double sqrt_d = std::sqrt(static_cast<double>(d));
    for (std::size_t k = 0; k < K; ++k) {
        switch (kind) {
            case ProbeKind::gaussian:
                for (std::size_t i = 0; i < d; ++i) v[static_cast<Eigen::Index>(i)] = rng.normal();
                break;
            case ProbeKind::rademacher:
                for (std::size_t i = 0; i < d; ++i)
                    v[static_cast<Eigen::Index>(i)] = rng.rademacher();
                break;
            case ProbeKind::basis_enumeration:
                v.setZero();
                v[static_cast<Eigen::Index>(k)] = sqrt_d;
                break;
        }
        Eigen::VectorXd a = Jc.transpose() * v;  // Jc^T v
        Eigen::VectorXd b = Js.transpose() * v;  // Js^T v
        if (counters) counters->backward_passes += 1;
        acc.noalias() += b * a.transpose();
        den_c += a.squaredNorm();
        den_s += b.squaredNorm();
    }
    const double Kd = static_cast<double>(K);
    const double num = (acc / Kd).squaredNorm();
    return num / ((den_c / Kd) * (den_s / Kd) + eps);
}

// Per-row outer product (B x p) x (B x q) -> B x (p*q), built from split /
// broadcast / mul so the traced graph stays within the primitive set.
inline ad::Var row_outer(ad::Tape& tape, ad::Var a, ad::Var b) {
    const std::size_t p = tape.value(a).cols();
    const std::size_t q = tape.value(b).cols();
    ad::Var out{};
    for (std::size_t i = 0; i < p; ++i) {
        ad::Var ai = tape.split_cols(a, i, i + 1);
        ad::Var block = tape.mul(tape.broadcast_col(ai, q), b);
        out = (i == 0) ? block : tape.concat_cols(out, block);
    }
    return out;
}

// Differentiable probe estimator for a generator forward already on the tape.
// Returns the batch-mean of per-sample ratio estimates (B x 1 reduced to a
// scalar var). Exactly K traced VJP pairs per sample; each probe is shared by
// the content and style contractions of its sample.
inline ad::Var orth_loss_probe(ad::Tape& tape, const GenForward& f, std::size_t K, ProbeKind kind,
                               double eps, Rng& rng, ad::CostCounters* counters = nullptr) {
    if (K < 1) throw ConfigError("orth_loss_probe: K must be >= 1");
    const Tensor& x = tape.value(f.x_hat);
    const std::size_t B = x.rows();
    const std::size_t d = x.cols();
    const std::size_t d_C = tape.value(f.c_hat).cols();
    const std::size_t d_S = tape.value(f.s_hat).cols();
    if (kind == ProbeKind::basis_enumeration) K = d;
    if (counters) {
        counters->note_probe_vector(d);
        counters->note_accumulator(d_S * d_C);
    }
    const double sqrt_d = std::sqrt(static_cast<double>(d));
    std::array<ad::Var, 2> wrt{f.c_hat, f.s_hat};
    ad::Var acc{}, den_c{}, den_s{};
    for (std::size_t k = 0; k < K; ++k) {
        Tensor probe(B, d);
        switch (kind) {
            case ProbeKind::gaussian:
                for (double& t : probe.v) t = rng.normal();
                break;
            case ProbeKind::rademacher:
                for (double& t : probe.v) t = rng.rademacher();
                break;
            case ProbeKind::basis_enumeration:
                for (std::size_t r = 0; r < B; ++r) probe.at(r, k) = sqrt_d;
                break;
        }
        ad::Var v = tape.leaf(std::move(probe), false);
        std::vector<ad::Var> pulled = tape.vjp_nodes(f.x_hat, v, wrt, counters);
        ad::Var a = pulled[0];  // B x d_C rows of Jc^T v
        ad::Var b = pulled[1];  // B x d_S rows of Js^T v
        ad::Var outer = row_outer(tape, b, a);
        ad::Var na = tape.squared_norm_rows(a);
        ad::Var nb = tape.squared_norm_rows(b);
        acc = k == 0 ? outer : tape.add(acc, outer);
        den_c = k == 0 ? na : tape.add(den_c, na);
        den_s = k == 0 ? nb : tape.add(den_s, nb);
    }
    const double invK = 1.0 / static_cast<double>(K);
    ad::Var num = tape.squared_norm_rows(tape.scale(acc, invK));      // B x 1
    ad::Var den = tape.add_const(
        tape.mul(tape.scale(den_c, invK), tape.scale(den_s, invK)), eps);  // B x 1
    ad::Var ratio = tape.div(num, den);
    return tape.mean_all(ratio);
}

// Invertibility loss terms, batch means of per-row squared norms. The
// encoder outputs already on the tape are reused; only the decoders add work.
inline ad::Var inv_loss_content(ad::Tape& tape, const BoundBundle& bound, const GenForward& f) {
    ad::Var rec_c = bound.t_C.forward(tape, f.c_hat);
    return tape.mean_all(tape.squared_norm_rows(tape.sub(rec_c, f.rc)));
}

inline ad::Var inv_loss_style(ad::Tape& tape, const BoundBundle& bound, const GenForward& f,
                              int domain) {
    ad::Var rec_s = bound.t_S[static_cast<std::size_t>(domain)].forward(tape, f.s_hat);
    return tape.mean_all(tape.squared_norm_rows(tape.sub(rec_s, f.rs)));
}

}  // namespace csdi
