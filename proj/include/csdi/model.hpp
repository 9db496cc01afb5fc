#pragma once

// The CSDI-GAN parameterization: dependent latent sampling through a shared
// content block, the encoder/generator/discriminator stack, and latent
// recovery by generator inversion.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "csdi/net.hpp"
#include "csdi/rng.hpp"
#include "csdi/tape.hpp"
#include "csdi/tensor.hpp"

namespace csdi {

struct DimensionPlan {
    std::size_t d = 0;     // observation dimension
    std::size_t d_C = 0;   // content dimension
    std::size_t d_S = 0;   // style dimension
    std::size_t d_C1 = 0;  // shared content block (may be 0: independent latents)
    std::size_t d_C2 = 0;
    std::size_t d_S1 = 0;
    std::size_t N = 0;  // number of domains

    void validate() const {
        if (d == 0 || d_C == 0 || d_S == 0 || d_C2 == 0 || d_S1 == 0 || N == 0)
            throw ConfigError("DimensionPlan: extents must be positive (d_C1 may be 0)");
        if (d_C != d_C1 + d_C2)
            throw ConfigError("DimensionPlan: d_C != d_C1 + d_C2");
        if (d_S != d_C1 + d_S1)
            throw ConfigError("DimensionPlan: d_S != d_C1 + d_S1");
        if (d < d_C + d_S)
            throw ConfigError("DimensionPlan: requires d >= d_C + d_S");
    }
};

// A batch of latent seeds with the shared-block structure:
//   r_C = (r_C1, r_C2),  r_S^(n) = (r_C1, r_S1),
// so the first d_C1 entries of r_C and r_S coincide per sample.
struct LatentBatch {
    Tensor rc;                 // B x d_C
    Tensor rs;                 // B x d_S
    std::vector<int> domains;  // per-sample domain index in [0, N)

    std::size_t size() const { return rc.rows(); }
};

inline LatentBatch sample_latents(const DimensionPlan& plan, std::size_t batch, Rng& rng,
                                  std::optional<int> fixed_domain = std::nullopt) {
    plan.validate();
    LatentBatch out;
    out.rc = Tensor(batch, plan.d_C);
    out.rs = Tensor(batch, plan.d_S);
    out.domains.resize(batch);
    for (std::size_t i = 0; i < batch; ++i) {
        for (std::size_t j = 0; j < plan.d_C1; ++j) {
            double shared = rng.normal();
            out.rc.at(i, j) = shared;
            out.rs.at(i, j) = shared;
        }
        for (std::size_t j = 0; j < plan.d_C2; ++j) out.rc.at(i, plan.d_C1 + j) = rng.normal();
        for (std::size_t j = 0; j < plan.d_S1; ++j) out.rs.at(i, plan.d_C1 + j) = rng.normal();
        out.domains[i] = fixed_domain ? *fixed_domain
                                      : static_cast<int>(rng.below(plan.N));
        if (out.domains[i] < 0 || out.domains[i] >= static_cast<int>(plan.N))
            throw ConfigError("sample_latents: domain index out of range");
    }
    return out;
}

struct ModelShape {
    std::size_t enc_width = 64;
    std::size_t enc_hidden = 2;  // 3-layer nets
    std::size_t gen_width = 128;
    std::size_t gen_hidden = 3;
    std::size_t disc_width = 128;
    std::size_t disc_hidden = 2;
    double gen_output_scale = 4.0;
};

struct ModelBundle {
    DimensionPlan plan;
    ModelShape shape;
    Mlp e_C;                 // d_C -> d_C
    std::vector<Mlp> e_S;    // per domain, d_S -> d_S
    Mlp t_C;                 // mirror of e_C
    std::vector<Mlp> t_S;    // mirrors of e_S
    Mlp gen;                 // (d_C + d_S) -> d, scaled tanh head
    std::vector<Mlp> disc;   // per domain, d -> 1, sigmoid head

    static ModelBundle init(const DimensionPlan& plan, const ModelShape& shape, Rng& rng) {
        plan.validate();
        ModelBundle m;
        m.plan = plan;
        m.shape = shape;
        MlpSpec enc{plan.d_C, plan.d_C, shape.enc_width, shape.enc_hidden, Head::linear, 1.0, 0.2};
        m.e_C = Mlp::init(enc, rng);
        m.t_C = Mlp::init(enc, rng);
        MlpSpec encS{plan.d_S, plan.d_S, shape.enc_width, shape.enc_hidden, Head::linear, 1.0, 0.2};
        for (std::size_t n = 0; n < plan.N; ++n) {
            m.e_S.push_back(Mlp::init(encS, rng));
            m.t_S.push_back(Mlp::init(encS, rng));
        }
        MlpSpec g{plan.d_C + plan.d_S, plan.d,      shape.gen_width, shape.gen_hidden,
                  Head::tanh_scaled,   shape.gen_output_scale, 0.2};
        m.gen = Mlp::init(g, rng);
        MlpSpec dsc{plan.d, 1, shape.disc_width, shape.disc_hidden, Head::sigmoid, 1.0, 0.2};
        for (std::size_t n = 0; n < plan.N; ++n) m.disc.push_back(Mlp::init(dsc, rng));
        return m;
    }

    // Canonical parameter registry; ordering defines checkpoint layout and
    // optimizer slot alignment.
    struct NamedParam {
        std::string name;
        Tensor* tensor;
    };

    std::vector<NamedParam> params() {
        std::vector<NamedParam> out;
        auto push_net = [&](const std::string& prefix, Mlp& net) {
            for (std::size_t l = 0; l < net.W.size(); ++l) {
                out.push_back({prefix + ".W" + std::to_string(l), &net.W[l]});
                out.push_back({prefix + ".b" + std::to_string(l), &net.b[l]});
            }
        };
        push_net("e_C", e_C);
        for (std::size_t n = 0; n < e_S.size(); ++n) push_net("e_S" + std::to_string(n), e_S[n]);
        push_net("t_C", t_C);
        for (std::size_t n = 0; n < t_S.size(); ++n) push_net("t_S" + std::to_string(n), t_S[n]);
        push_net("gen", gen);
        for (std::size_t n = 0; n < disc.size(); ++n) push_net("disc" + std::to_string(n), disc[n]);
        return out;
    }

    // Index ranges of the two optimizer groups within params():
    // generator-side (encoders, decoders, generator) and discriminators.
    std::size_t generator_group_end() {
        std::size_t count = 0;
        auto count_net = [&](const Mlp& net) { count += 2 * net.W.size(); };
        count_net(e_C);
        for (const auto& n : e_S) count_net(n);
        count_net(t_C);
        for (const auto& n : t_S) count_net(n);
        count_net(gen);
        return count;
    }
};

// Generator-side graph handles for one domain's batch.
struct GenForward {
    ad::Var rc, rs;      // latent leaves
    ad::Var c_hat, s_hat;  // encoder outputs
    ad::Var x_hat;       // generator output, B x d
};

// Parameter bindings for one tape pass over the generator side.
struct BoundBundle {
    const ModelBundle* model = nullptr;
    BoundMlp e_C, t_C, gen;
    std::vector<BoundMlp> e_S, t_S, disc;
};

inline BoundBundle bind_generator_side(ad::Tape& tape, const ModelBundle& m, bool needs_grad) {
    BoundBundle b;
    b.model = &m;
    b.e_C = bind(tape, m.e_C, needs_grad);
    b.t_C = bind(tape, m.t_C, needs_grad);
    b.gen = bind(tape, m.gen, needs_grad);
    for (const auto& net : m.e_S) b.e_S.push_back(bind(tape, net, needs_grad));
    for (const auto& net : m.t_S) b.t_S.push_back(bind(tape, net, needs_grad));
    return b;
}

inline void bind_discriminators(ad::Tape& tape, const ModelBundle& m, BoundBundle& b,
                                bool needs_grad) {
    b.disc.clear();
    for (const auto& net : m.disc) b.disc.push_back(bind(tape, net, needs_grad));
}

// x_hat^(n) = g(e_C(r_C), e_S^(n)(r_S^(n))) for a single-domain batch.
inline GenForward generate_on_tape(ad::Tape& tape, const BoundBundle& bound,
                                   const LatentBatch& seeds, int domain) {
    const ModelBundle& m = *bound.model;
    if (domain < 0 || domain >= static_cast<int>(m.plan.N))
        throw ConfigError("generate: domain index " + std::to_string(domain));
    for (int dset : seeds.domains)
        if (dset != domain) throw ConfigError("generate: mixed-domain batch");
    GenForward f;
    f.rc = tape.leaf(seeds.rc, false);
    f.rs = tape.leaf(seeds.rs, false);
    f.c_hat = bound.e_C.forward(tape, f.rc);
    f.s_hat = bound.e_S[static_cast<std::size_t>(domain)].forward(tape, f.rs);
    f.x_hat = bound.gen.forward(tape, tape.concat_cols(f.c_hat, f.s_hat));
    return f;
}

// Pure-value generation; deterministic function of (parameters, seeds).
inline Tensor generate(const ModelBundle& m, const LatentBatch& seeds, int domain) {
    ad::Tape tape;
    BoundBundle bound = bind_generator_side(tape, m, false);
    GenForward f = generate_on_tape(tape, bound, seeds, domain);
    return tape.value(f.x_hat);
}

// Generator output from explicit latent values (inversion, translation).
inline Tensor generate_from_latents(const ModelBundle& m, const Tensor& c_hat,
                                    const Tensor& s_hat) {
    ad::Tape tape;
    BoundMlp g = bind(tape, m.gen, false);
    ad::Var c = tape.leaf(c_hat, false), s = tape.leaf(s_hat, false);
    return tape.value(g.forward(tape, tape.concat_cols(c, s)));
}

struct InversionConfig {
    std::size_t steps = 500;
    // Cosine-decayed learning rate; a constant small step stalls in narrow
    // valleys well above the 1e-3 divergence target within 500 steps.
    double lr_start = 5e-2;
    double lr_end = 1e-3;
    double beta1 = 0.5;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::size_t restarts = 5;
    double init_scale = 1.0;
};

struct InversionResult {
    Tensor c_hat;             // B x d_C
    Tensor s_hat;             // B x d_S
    std::vector<double> divergence;  // per-row squared error at the best iterate
};

namespace detail {

struct AdamBuffers {
    Tensor m, v;
    std::size_t t = 0;
    explicit AdamBuffers(std::size_t rows, std::size_t cols)
        : m(Tensor::zeros(rows, cols)), v(Tensor::zeros(rows, cols)) {}
};

inline void adam_update(Tensor& x, const Tensor& g, AdamBuffers& buf, double lr, double beta1,
                        double beta2, double eps) {
    buf.t += 1;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(buf.t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(buf.t));
    for (std::size_t i = 0; i < x.v.size(); ++i) {
        buf.m.v[i] = beta1 * buf.m.v[i] + (1.0 - beta1) * g.v[i];
        buf.v.v[i] = beta2 * buf.v.v[i] + (1.0 - beta2) * g.v[i] * g.v[i];
        const double mhat = buf.m.v[i] / bc1;
        const double vhat = buf.v.v[i] / bc2;
        x.v[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
}

}  // namespace detail

// Latent recovery: gradient descent on (c~, s~) minimizing the squared-error
// divergence ||g(c~, s~) - x||^2 per row. Rows are independent; the best
// iterate per row is kept. steps == 0 returns the init unchanged.
inline InversionResult invert_sample(const ModelBundle& m, const Tensor& x_target, int domain,
                                     const Tensor& c_init, const Tensor& s_init,
                                     const InversionConfig& cfg) {
    (void)domain;  // the generator is shared across domains; kept for interface parity
    const std::size_t B = x_target.rows();
    if (c_init.rows() != B || s_init.rows() != B)
        throw ShapeError("invert_sample: init batch does not match target batch");

    Tensor c = c_init, s = s_init;
    InversionResult best;
    best.c_hat = c_init;
    best.s_hat = s_init;
    best.divergence.assign(B, std::numeric_limits<double>::infinity());

    auto divergence_rows = [&](const Tensor& xr) {
        std::vector<double> div(B, 0.0);
        for (std::size_t r = 0; r < B; ++r)
            for (std::size_t col = 0; col < x_target.cols(); ++col) {
                double dlt = xr.at(r, col) - x_target.at(r, col);
                div[r] += dlt * dlt;
            }
        return div;
    };

    auto consider = [&](const Tensor& cc, const Tensor& ss) {
        Tensor xr = generate_from_latents(m, cc, ss);
        std::vector<double> div = divergence_rows(xr);
        for (std::size_t r = 0; r < B; ++r) {
            if (!std::isfinite(div[r]))
                throw NumericError("invert_sample: non-finite divergence at row " +
                                   std::to_string(r));
            if (div[r] < best.divergence[r]) {
                best.divergence[r] = div[r];
                for (std::size_t j = 0; j < cc.cols(); ++j) best.c_hat.at(r, j) = cc.at(r, j);
                for (std::size_t j = 0; j < ss.cols(); ++j) best.s_hat.at(r, j) = ss.at(r, j);
            }
        }
    };

    consider(c, s);
    if (cfg.steps == 0) {
        InversionResult out;
        out.c_hat = c_init;
        out.s_hat = s_init;
        out.divergence = divergence_rows(generate_from_latents(m, c_init, s_init));
        return out;
    }

    detail::AdamBuffers mc(B, c.cols()), ms(B, s.cols());
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        const double frac = static_cast<double>(step) / static_cast<double>(cfg.steps);
        const double lr =
            cfg.lr_end + (cfg.lr_start - cfg.lr_end) * 0.5 * (1.0 + std::cos(3.14159265358979 * frac));
        ad::Tape tape;
        BoundMlp g = bind(tape, m.gen, false);
        ad::Var cv = tape.leaf(c, true);
        ad::Var sv = tape.leaf(s, true);
        ad::Var xr = g.forward(tape, tape.concat_cols(cv, sv));
        ad::Var diff = tape.sub(xr, tape.leaf(x_target, false));
        ad::Var loss = tape.sum_all(tape.mul(diff, diff));
        if (!std::isfinite(tape.value(loss).v[0])) {
            std::string trace = "step=" + std::to_string(step) +
                                " loss=" + std::to_string(tape.value(loss).v[0]);
            throw NumericError("invert_sample: divergence non-finite (" + trace + ")");
        }
        tape.backward(loss);
        detail::adam_update(c, tape.grad(cv), mc, lr, cfg.beta1, cfg.beta2, cfg.eps);
        detail::adam_update(s, tape.grad(sv), ms, lr, cfg.beta1, cfg.beta2, cfg.eps);
        consider(c, s);
    }
    return best;
}

// Multi-restart wrapper; keeps the best iterate per row across restarts.
inline InversionResult invert_with_restarts(const ModelBundle& m, const Tensor& x_target,
                                            int domain, const InversionConfig& cfg, Rng& rng) {
    const std::size_t B = x_target.rows();
    InversionResult best;
    best.c_hat = Tensor(B, m.plan.d_C);
    best.s_hat = Tensor(B, m.plan.d_S);
    best.divergence.assign(B, std::numeric_limits<double>::infinity());
    const std::size_t restarts = std::max<std::size_t>(1, cfg.restarts);
    for (std::size_t rrun = 0; rrun < restarts; ++rrun) {
        Tensor c0(B, m.plan.d_C), s0(B, m.plan.d_S);
        for (double& x : c0.v) x = cfg.init_scale * rng.normal();
        for (double& x : s0.v) x = cfg.init_scale * rng.normal();
        InversionResult r = invert_sample(m, x_target, domain, c0, s0, cfg);
        for (std::size_t row = 0; row < B; ++row) {
            if (r.divergence[row] < best.divergence[row]) {
                best.divergence[row] = r.divergence[row];
                for (std::size_t j = 0; j < m.plan.d_C; ++j)
                    best.c_hat.at(row, j) = r.c_hat.at(row, j);
                for (std::size_t j = 0; j < m.plan.d_S; ++j)
                    best.s_hat.at(row, j) = r.s_hat.at(row, j);
            }
        }
    }
    return best;
}

// Translation: content from the source inversion, style from the reference
// inversion in the target domain.
inline Tensor translate(const ModelBundle& m, const Tensor& x_source, int source_domain,
                        const Tensor& x_style_ref, int target_domain, const InversionConfig& cfg,
                        Rng& rng) {
    InversionResult src = invert_with_restarts(m, x_source, source_domain, cfg, rng);
    InversionResult ref = invert_with_restarts(m, x_style_ref, target_domain, cfg, rng);
    return generate_from_latents(m, src.c_hat, ref.s_hat);
}

}  // namespace csdi
