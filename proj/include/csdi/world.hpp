#pragma once

// Ground-truth generative worlds with a controllable CSDI angle. The
// observation map is
//
//     x = Qc f_c(c) + Qs(xi) f_s(s),
//
// with orthonormal frames Qc (d x d_C) and Qs (d x d_S), the style frame
// tilted into the content range by xi:  u_i' = cos(xi) u_i + sin(xi) w_i with
// distinct orthonormal w_i = Qc m_i. The component maps f_c, f_s are
// invertible affine transforms followed by the strictly monotone nonlinearity
// psi(t) = t + alpha tanh(t), so the smallest principal angle between the
// content- and style-induced tangent ranges is pi/2 - xi at every point.
//
// Latents are coupled through a shared block exactly like the model's
// sampler; per-domain style laws differ in mean and scale so domains are
// distinguishable.

#include <Eigen/Dense>
#include <fstream>
#include <json.hpp>
#include <string>
#include <vector>

#include "csdi/checkpoint.hpp"
#include "csdi/jacobian.hpp"
#include "csdi/model.hpp"
#include "csdi/rng.hpp"
#include "csdi/tape.hpp"

namespace csdi {

struct NonlinearityConfig {
    double alpha = 0.3;       // psi(t) = t + alpha tanh(t); invertible for alpha > -1
    double affine_min = 0.5;  // singular value range of the mixing affines
    double affine_max = 0.9;
    bool identity = false;  // f_c = f_s = id (linear world)
};

struct StyleLaw {
    double mean_shift = 1.5;  // domain n style mean: mean_shift * n per coordinate
    double odd_scale = 0.7;   // std dev for odd domains; even domains use 1.0
};

struct WorldSpec {
    DimensionPlan plan;
    double xi = 0.0;
    Eigen::MatrixXd Qc;   // d x d_C, orthonormal
    Eigen::MatrixXd Qs;   // d x d_S, orthonormal, tilted by xi
    Eigen::MatrixXd M;    // d_C x d_S tilt directions (W = Qc_untilted * M); empty if xi == 0
    Eigen::MatrixXd Lc, Ls;  // invertible affines of f_c, f_s
    Eigen::VectorXd mc, ms;
    NonlinearityConfig nonlinearity;
    StyleLaw style_law;
    std::uint64_t seed = 0;
};

struct WorldSample {
    Tensor x;       // B x d
    Tensor c_true;  // B x d_C
    Tensor s_true;  // B x d_S
};

namespace detail {

inline Eigen::MatrixXd orthonormal_frame(std::size_t rows, std::size_t cols, Rng& rng) {
    Eigen::MatrixXd G(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (Eigen::Index i = 0; i < G.rows(); ++i)
        for (Eigen::Index j = 0; j < G.cols(); ++j) G(i, j) = rng.normal();
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(G);
    return qr.householderQ() *
           Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

inline Eigen::MatrixXd conditioned_affine(std::size_t n, double smin, double smax, Rng& rng) {
    Eigen::MatrixXd U = orthonormal_frame(n, n, rng);
    Eigen::MatrixXd V = orthonormal_frame(n, n, rng);
    Eigen::VectorXd s(static_cast<Eigen::Index>(n));
    for (Eigen::Index i = 0; i < s.size(); ++i) s(i) = rng.uniform(smin, smax);
    return U * s.asDiagonal() * V.transpose();
}

}  // namespace detail

inline WorldSpec forge_world(const DimensionPlan& plan, double xi,
                             const NonlinearityConfig& nl, std::uint64_t seed,
                             const StyleLaw& law = StyleLaw{}) {
    plan.validate();
    if (xi < 0.0 || xi >= kHalfPi) throw ConfigError("forge_world: xi must lie in [0, pi/2)");
    if (xi > 0.0 && plan.d_S > plan.d_C)
        throw ConfigError("forge_world: tilted construction needs d_S <= d_C");
    WorldSpec w;
    w.plan = plan;
    w.xi = xi;
    w.nonlinearity = nl;
    w.style_law = law;
    w.seed = seed;
    Rng rng(derive_seed(seed, 0x7f0a));

    Eigen::MatrixXd Q = detail::orthonormal_frame(plan.d, plan.d_C + plan.d_S, rng);
    w.Qc = Q.leftCols(static_cast<Eigen::Index>(plan.d_C));
    Eigen::MatrixXd Qs0 = Q.rightCols(static_cast<Eigen::Index>(plan.d_S));
    if (xi > 0.0) {
        w.M = detail::orthonormal_frame(plan.d_C, plan.d_S, rng);
        Eigen::MatrixXd W = w.Qc * w.M;
        w.Qs = std::cos(xi) * Qs0 + std::sin(xi) * W;
    } else {
        w.Qs = Qs0;
    }

    if (nl.identity) {
        w.Lc = Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(plan.d_C),
                                         static_cast<Eigen::Index>(plan.d_C));
        w.Ls = Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(plan.d_S),
                                         static_cast<Eigen::Index>(plan.d_S));
        w.mc = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(plan.d_C));
        w.ms = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(plan.d_S));
    } else {
        w.Lc = detail::conditioned_affine(plan.d_C, nl.affine_min, nl.affine_max, rng);
        w.Ls = detail::conditioned_affine(plan.d_S, nl.affine_min, nl.affine_max, rng);
        w.mc = Eigen::VectorXd(static_cast<Eigen::Index>(plan.d_C));
        w.ms = Eigen::VectorXd(static_cast<Eigen::Index>(plan.d_S));
        for (Eigen::Index i = 0; i < w.mc.size(); ++i) w.mc(i) = 0.2 * rng.normal();
        for (Eigen::Index i = 0; i < w.ms.size(); ++i) w.ms(i) = 0.2 * rng.normal();
    }
    return w;
}

namespace detail {

inline double psi(double t, double alpha) { return t + alpha * std::tanh(t); }
inline double psi_deriv(double t, double alpha) {
    double th = std::tanh(t);
    return 1.0 + alpha * (1.0 - th * th);
}

}  // namespace detail

// Forward map for one latent pair (row vectors).
inline void world_forward_row(const WorldSpec& w, const double* c, const double* s, double* x_out) {
    const double alpha = w.nonlinearity.identity ? 0.0 : w.nonlinearity.alpha;
    const std::size_t dC = w.plan.d_C, dS = w.plan.d_S, d = w.plan.d;
    Eigen::VectorXd cv(static_cast<Eigen::Index>(dC)), sv(static_cast<Eigen::Index>(dS));
    for (std::size_t j = 0; j < dC; ++j) cv(static_cast<Eigen::Index>(j)) = c[j];
    for (std::size_t j = 0; j < dS; ++j) sv(static_cast<Eigen::Index>(j)) = s[j];
    Eigen::VectorXd uc = w.Lc * cv + w.mc;
    Eigen::VectorXd us = w.Ls * sv + w.ms;
    for (Eigen::Index j = 0; j < uc.size(); ++j) uc(j) = detail::psi(uc(j), alpha);
    for (Eigen::Index j = 0; j < us.size(); ++j) us(j) = detail::psi(us(j), alpha);
    Eigen::VectorXd x = w.Qc * uc + w.Qs * us;
    for (std::size_t j = 0; j < d; ++j) x_out[j] = x(static_cast<Eigen::Index>(j));
}

inline Tensor world_forward(const WorldSpec& w, const Tensor& c, const Tensor& s) {
    if (c.rows() != s.rows() || c.cols() != w.plan.d_C || s.cols() != w.plan.d_S)
        throw ShapeError("world_forward: latents " + c.shape_str() + " / " + s.shape_str());
    Tensor x(c.rows(), w.plan.d);
    for (std::size_t r = 0; r < c.rows(); ++r)
        world_forward_row(w, &c.v[r * c.cols()], &s.v[r * s.cols()], &x.v[r * x.cols()]);
    return x;
}

// Closed-form Jacobian blocks of the world map at a point.
inline JacobianPair world_jacobians(const WorldSpec& w, const Tensor& c_row, const Tensor& s_row) {
    const double alpha = w.nonlinearity.identity ? 0.0 : w.nonlinearity.alpha;
    Eigen::VectorXd cv(static_cast<Eigen::Index>(w.plan.d_C)), sv(static_cast<Eigen::Index>(w.plan.d_S));
    for (std::size_t j = 0; j < w.plan.d_C; ++j) cv(static_cast<Eigen::Index>(j)) = c_row.v[j];
    for (std::size_t j = 0; j < w.plan.d_S; ++j) sv(static_cast<Eigen::Index>(j)) = s_row.v[j];
    Eigen::VectorXd ac = w.Lc * cv + w.mc;
    Eigen::VectorXd as = w.Ls * sv + w.ms;
    Eigen::VectorXd dc(ac.size()), ds(as.size());
    for (Eigen::Index j = 0; j < ac.size(); ++j) dc(j) = detail::psi_deriv(ac(j), alpha);
    for (Eigen::Index j = 0; j < as.size(); ++j) ds(j) = detail::psi_deriv(as(j), alpha);
    JacobianPair pair;
    pair.Jc = w.Qc * dc.asDiagonal() * w.Lc;
    pair.Js = w.Qs * ds.asDiagonal() * w.Ls;
    return pair;
}

// The same map built from tape primitives, for dual-route Jacobian checks.
inline ad::Var world_forward_on_tape(ad::Tape& tape, const WorldSpec& w, ad::Var c, ad::Var s) {
    const double alpha = w.nonlinearity.identity ? 0.0 : w.nonlinearity.alpha;
    auto to_tensor = [](const Eigen::MatrixXd& m) {
        Tensor t(static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols()));
        for (Eigen::Index i = 0; i < m.rows(); ++i)
            for (Eigen::Index j = 0; j < m.cols(); ++j)
                t.at(static_cast<std::size_t>(i), static_cast<std::size_t>(j)) = m(i, j);
        return t;
    };
    auto row_tensor = [](const Eigen::VectorXd& v) {
        Tensor t(1, static_cast<std::size_t>(v.size()));
        for (Eigen::Index i = 0; i < v.size(); ++i) t.v[static_cast<std::size_t>(i)] = v(i);
        return t;
    };
    ad::Var Lc = tape.leaf(to_tensor(w.Lc));
    ad::Var Ls = tape.leaf(to_tensor(w.Ls));
    ad::Var mc = tape.leaf(row_tensor(w.mc));
    ad::Var ms = tape.leaf(row_tensor(w.ms));
    ad::Var ac = tape.add_rowvec(tape.matmul(c, Lc, ad::Op::matmul_nt), mc);
    ad::Var as = tape.add_rowvec(tape.matmul(s, Ls, ad::Op::matmul_nt), ms);
    ad::Var uc = tape.add(ac, tape.scale(tape.tanh(ac), alpha));
    ad::Var us = tape.add(as, tape.scale(tape.tanh(as), alpha));
    ad::Var xc = tape.matmul(uc, tape.leaf(to_tensor(w.Qc)), ad::Op::matmul_nt);
    ad::Var xs = tape.matmul(us, tape.leaf(to_tensor(w.Qs)), ad::Op::matmul_nt);
    return tape.add(xc, xs);
}

// Draw latents from the world's law: content blocks standard normal, the
// shared block copied into the style vector, and the domain part of the style
// drawn from the domain's shifted/scaled law.
inline WorldSample sample_world(const WorldSpec& w, std::size_t batch, int domain, Rng& rng) {
    const DimensionPlan& p = w.plan;
    if (domain < 0 || domain >= static_cast<int>(p.N))
        throw ConfigError("sample_world: domain " + std::to_string(domain));
    WorldSample out;
    out.c_true = Tensor(batch, p.d_C);
    out.s_true = Tensor(batch, p.d_S);
    const double mean = w.style_law.mean_shift * static_cast<double>(domain);
    const double sd = (domain % 2 == 1) ? w.style_law.odd_scale : 1.0;
    for (std::size_t i = 0; i < batch; ++i) {
        for (std::size_t j = 0; j < p.d_C1; ++j) {
            double shared = rng.normal();
            out.c_true.at(i, j) = shared;
            out.s_true.at(i, j) = shared;
        }
        for (std::size_t j = 0; j < p.d_C2; ++j) out.c_true.at(i, p.d_C1 + j) = rng.normal();
        for (std::size_t j = 0; j < p.d_S1; ++j)
            out.s_true.at(i, p.d_C1 + j) = mean + sd * rng.normal();
    }
    out.x = world_forward(w, out.c_true, out.s_true);
    return out;
}

// ---- serialization ---------------------------------------------------------

inline nlohmann::json matrix_to_json(const Eigen::MatrixXd& m) {
    std::vector<double> data(static_cast<std::size_t>(m.size()));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j)
            data[static_cast<std::size_t>(i * m.cols() + j)] = m(i, j);
    return {{"rows", m.rows()}, {"cols", m.cols()}, {"hex", doubles_to_hex(data)}};
}

inline Eigen::MatrixXd matrix_from_json(const nlohmann::json& j) {
    const auto rows = j.at("rows").get<Eigen::Index>();
    const auto cols = j.at("cols").get<Eigen::Index>();
    std::vector<double> data = hex_to_doubles(j.at("hex").get<std::string>());
    if (static_cast<Eigen::Index>(data.size()) != rows * cols)
        throw IoError("matrix payload size mismatch");
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j2 = 0; j2 < cols; ++j2)
            m(i, j2) = data[static_cast<std::size_t>(i * cols + j2)];
    return m;
}

inline void save_world(const std::string& path, const WorldSpec& w) {
    nlohmann::json j;
    j["plan"] = plan_to_json(w.plan);
    j["xi"] = w.xi;
    j["seed"] = w.seed;
    j["Qc"] = matrix_to_json(w.Qc);
    j["Qs"] = matrix_to_json(w.Qs);
    j["M"] = matrix_to_json(w.M);
    j["Lc"] = matrix_to_json(w.Lc);
    j["Ls"] = matrix_to_json(w.Ls);
    j["mc"] = matrix_to_json(w.mc);
    j["ms"] = matrix_to_json(w.ms);
    j["nonlinearity"] = {{"alpha", w.nonlinearity.alpha},
                         {"affine_min", w.nonlinearity.affine_min},
                         {"affine_max", w.nonlinearity.affine_max},
                         {"identity", w.nonlinearity.identity}};
    j["style_law"] = {{"mean_shift", w.style_law.mean_shift}, {"odd_scale", w.style_law.odd_scale}};
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write world: " + path);
    out << j.dump(1) << '\n';
}

inline WorldSpec load_world(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read world: " + path);
    nlohmann::json j = nlohmann::json::parse(in);
    WorldSpec w;
    w.plan = plan_from_json(j.at("plan"));
    w.xi = j.at("xi").get<double>();
    w.seed = j.at("seed").get<std::uint64_t>();
    w.Qc = matrix_from_json(j.at("Qc"));
    w.Qs = matrix_from_json(j.at("Qs"));
    w.M = matrix_from_json(j.at("M"));
    w.Lc = matrix_from_json(j.at("Lc"));
    w.Ls = matrix_from_json(j.at("Ls"));
    w.mc = matrix_from_json(j.at("mc"));
    w.ms = matrix_from_json(j.at("ms"));
    const auto& nl = j.at("nonlinearity");
    w.nonlinearity.alpha = nl.at("alpha").get<double>();
    w.nonlinearity.affine_min = nl.at("affine_min").get<double>();
    w.nonlinearity.affine_max = nl.at("affine_max").get<double>();
    w.nonlinearity.identity = nl.at("identity").get<bool>();
    const auto& law = j.at("style_law");
    w.style_law.mean_shift = law.at("mean_shift").get<double>();
    w.style_law.odd_scale = law.at("odd_scale").get<double>();
    return w;
}

}  // namespace csdi
