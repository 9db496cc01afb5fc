#pragma once

// Deterministic alternating adversarial training: disc_steps_per_gen
// discriminator ascent steps on the minimax objective, then one
// generator/encoder step on the non-saturating adversarial term plus the
// invertibility and probe-orthogonality regularizers. All randomness derives
// from config.seed through fixed stream splits, so (config, seed) determines
// the metric log and final parameters bit-exactly.

#include <fstream>
#include <iomanip>
#include <json.hpp>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "csdi/checkpoint.hpp"
#include "csdi/jacobian.hpp"
#include "csdi/losses.hpp"
#include "csdi/mmd.hpp"
#include "csdi/model.hpp"
#include "csdi/optim.hpp"
#include "csdi/world.hpp"

namespace csdi {

struct ExperimentConfig {
    DimensionPlan plan;
    LossWeights weights;
    AdamConfig adam;
    ModelShape model;
    std::size_t batch = 32;
    std::size_t iters = 20000;
    std::size_t disc_steps_per_gen = 1;
    std::uint64_t seed = 0;
    std::size_t audit_every = 5000;
    bool oracle_mode = false;
    std::size_t oracle_rows = 4;  // per-step subsample for the exact co-evaluation

    void validate() const {
        plan.validate();
        weights.validate();
        adam.validate();
        if (batch < 2) throw ConfigError("config: batch must be >= 2");
        if (disc_steps_per_gen < 1) throw ConfigError("config: disc_steps_per_gen must be >= 1");
    }
};

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<const char*> known,
                                const std::string& where) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const char* k : known)
            if (it.key() == k) ok = true;
        if (!ok) throw ConfigError("unknown key '" + it.key() + "' in " + where);
    }
}

}  // namespace detail

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
    nlohmann::json j;
    j["plan"] = plan_to_json(c.plan);
    j["weights"] = {{"lambda_inv", c.weights.lambda_inv},
                    {"lambda_orth", c.weights.lambda_orth},
                    {"eps", c.weights.eps},
                    {"probes_K", c.weights.probes_K},
                    {"probe_kind", probe_kind_name(c.weights.probe_kind)}};
    j["adam"] = {{"lr", c.adam.lr},
                 {"beta1", c.adam.beta1},
                 {"beta2", c.adam.beta2},
                 {"eps_opt", c.adam.eps_opt}};
    j["model"] = shape_to_json(c.model);
    j["batch"] = c.batch;
    j["iters"] = c.iters;
    j["disc_steps_per_gen"] = c.disc_steps_per_gen;
    j["seed"] = c.seed;
    j["audit_every"] = c.audit_every;
    j["oracle_mode"] = c.oracle_mode;
    j["oracle_rows"] = c.oracle_rows;
    return j;
}

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
    detail::reject_unknown_keys(j,
                                {"plan", "weights", "adam", "model", "batch", "iters",
                                 "disc_steps_per_gen", "seed", "audit_every", "oracle_mode",
                                 "oracle_rows"},
                                "config");
    ExperimentConfig c;
    c.plan = plan_from_json(j.at("plan"));
    detail::reject_unknown_keys(j.at("plan"), {"d", "d_C", "d_S", "d_C1", "d_C2", "d_S1", "N"},
                                "config.plan");
    if (j.contains("weights")) {
        const auto& w = j.at("weights");
        detail::reject_unknown_keys(w, {"lambda_inv", "lambda_orth", "eps", "probes_K", "probe_kind"},
                                    "config.weights");
        if (w.contains("lambda_inv")) c.weights.lambda_inv = w.at("lambda_inv").get<double>();
        if (w.contains("lambda_orth")) c.weights.lambda_orth = w.at("lambda_orth").get<double>();
        if (w.contains("eps")) c.weights.eps = w.at("eps").get<double>();
        if (w.contains("probes_K")) c.weights.probes_K = w.at("probes_K").get<std::size_t>();
        if (w.contains("probe_kind"))
            c.weights.probe_kind = parse_probe_kind(w.at("probe_kind").get<std::string>());
    }
    if (j.contains("adam")) {
        const auto& a = j.at("adam");
        detail::reject_unknown_keys(a, {"lr", "beta1", "beta2", "eps_opt"}, "config.adam");
        if (a.contains("lr")) c.adam.lr = a.at("lr").get<double>();
        if (a.contains("beta1")) c.adam.beta1 = a.at("beta1").get<double>();
        if (a.contains("beta2")) c.adam.beta2 = a.at("beta2").get<double>();
        if (a.contains("eps_opt")) c.adam.eps_opt = a.at("eps_opt").get<double>();
    }
    if (j.contains("model")) {
        const auto& m = j.at("model");
        detail::reject_unknown_keys(m,
                                    {"enc_width", "enc_hidden", "gen_width", "gen_hidden",
                                     "disc_width", "disc_hidden", "gen_output_scale"},
                                    "config.model");
        if (m.contains("enc_width")) c.model.enc_width = m.at("enc_width").get<std::size_t>();
        if (m.contains("enc_hidden")) c.model.enc_hidden = m.at("enc_hidden").get<std::size_t>();
        if (m.contains("gen_width")) c.model.gen_width = m.at("gen_width").get<std::size_t>();
        if (m.contains("gen_hidden")) c.model.gen_hidden = m.at("gen_hidden").get<std::size_t>();
        if (m.contains("disc_width")) c.model.disc_width = m.at("disc_width").get<std::size_t>();
        if (m.contains("disc_hidden")) c.model.disc_hidden = m.at("disc_hidden").get<std::size_t>();
        if (m.contains("gen_output_scale"))
            c.model.gen_output_scale = m.at("gen_output_scale").get<double>();
    }
    if (j.contains("batch")) c.batch = j.at("batch").get<std::size_t>();
    if (j.contains("iters")) c.iters = j.at("iters").get<std::size_t>();
    if (j.contains("disc_steps_per_gen"))
        c.disc_steps_per_gen = j.at("disc_steps_per_gen").get<std::size_t>();
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("audit_every")) c.audit_every = j.at("audit_every").get<std::size_t>();
    if (j.contains("oracle_mode")) c.oracle_mode = j.at("oracle_mode").get<bool>();
    if (j.contains("oracle_rows")) c.oracle_rows = j.at("oracle_rows").get<std::size_t>();
    c.validate();
    return c;
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read config: " + path);
    return config_from_json(nlohmann::json::parse(in));
}

inline std::string config_hash(const ExperimentConfig& c) {
    return to_hex_u64(fnv1a64(config_to_json(c).dump()));
}

// ---- data sources -----------------------------------------------------------

struct DataSource {
    virtual ~DataSource() = default;
    virtual Tensor batch(int domain, std::size_t n, Rng& rng) = 0;
};

struct WorldSource final : DataSource {
    const WorldSpec* world;
    explicit WorldSource(const WorldSpec& w) : world(&w) {}
    Tensor batch(int domain, std::size_t n, Rng& rng) override {
        return sample_world(*world, n, domain, rng).x;
    }
};

// In-memory rows per domain (e.g. flattened image datasets); batches draw
// rows with replacement.
struct MemorySource final : DataSource {
    std::vector<Tensor> per_domain;  // each rows x d
    Tensor batch(int domain, std::size_t n, Rng& rng) override {
        const Tensor& pool = per_domain.at(static_cast<std::size_t>(domain));
        Tensor out(n, pool.cols());
        for (std::size_t i = 0; i < n; ++i) {
            std::size_t r = static_cast<std::size_t>(rng.below(pool.rows()));
            for (std::size_t j = 0; j < pool.cols(); ++j) out.at(i, j) = pool.at(r, j);
        }
        return out;
    }
};

// ---- metrics ----------------------------------------------------------------

struct MetricRow {
    std::size_t iter = 0;
    double gan_total = 0.0;
    std::vector<double> gan_per_domain;
    double inv = 0.0;
    double orth = 0.0;
    std::optional<double> orth_exact;
    double grad_norm_gen = 0.0;
    double grad_norm_disc = 0.0;
};

inline std::string metrics_header(std::size_t domains) {
    std::string h = "iter,gan_total";
    for (std::size_t n = 0; n < domains; ++n) h += ",gan_d" + std::to_string(n);
    h += ",inv,orth,orth_exact,grad_norm_gen,grad_norm_disc";
    return h;
}

inline std::string metrics_row_csv(const MetricRow& r) {
    std::ostringstream os;
    os << std::setprecision(17);
    os << r.iter << ',' << r.gan_total;
    for (double g : r.gan_per_domain) os << ',' << g;
    os << ',' << r.inv << ',' << r.orth << ',';
    if (r.orth_exact) os << *r.orth_exact;
    os << ',' << r.grad_norm_gen << ',' << r.grad_norm_disc;
    return os.str();
}

enum class TrainStatus { completed, diverged };

struct TrainResult {
    ModelBundle bundle;
    std::vector<MetricRow> log;
    TrainStatus status = TrainStatus::completed;
    std::uint64_t skipped_steps = 0;
    std::string final_checkpoint_path;  // empty when no out_dir given
};

namespace detail {

struct ParamGroups {
    std::vector<Tensor*> gen_params;
    std::vector<Tensor*> disc_params;
};

inline ParamGroups split_groups(ModelBundle& m) {
    ParamGroups g;
    auto reg = m.params();
    const std::size_t cut = m.generator_group_end();
    for (std::size_t i = 0; i < reg.size(); ++i)
        (i < cut ? g.gen_params : g.disc_params).push_back(reg[i].tensor);
    return g;
}

inline double grad_norm(ad::Tape& tape, const std::vector<ad::Var>& vars) {
    double acc = 0.0;
    for (ad::Var v : vars)
        if (tape.has_grad(v)) acc += squared_norm(tape.grad(v));
    return std::sqrt(acc);
}

// Order must match ModelBundle::params(): W0, b0, W1, b1, ...
inline void collect_bound_vars(const BoundMlp& b, std::vector<ad::Var>& out) {
    for (std::size_t l = 0; l < b.Wv.size(); ++l) {
        out.push_back(b.Wv[l]);
        out.push_back(b.bv[l]);
    }
}

}  // namespace detail

// One full training run. Checkpoints are written under out_dir (when given)
// every audit_every iterations and at exit, including the divergence halt.
inline TrainResult train(const ExperimentConfig& cfg, DataSource& source, ModelBundle bundle,
                         const std::string& out_dir = "", const std::string& metrics_path = "") {
    cfg.validate();
    const DimensionPlan& plan = cfg.plan;
    const std::size_t B = cfg.batch;
    const std::size_t N = plan.N;

    Rng data_rng(derive_seed(cfg.seed, 1));
    Rng model_rng(derive_seed(cfg.seed, 2));
    Rng probe_rng(derive_seed(cfg.seed, 3));

    detail::ParamGroups groups = detail::split_groups(bundle);
    AdamState opt_gen = AdamState::like(groups.gen_params);
    AdamState opt_disc = AdamState::like(groups.disc_params);

    std::ofstream metrics_out;
    if (!metrics_path.empty()) {
        metrics_out.open(metrics_path);
        if (!metrics_out) throw IoError("cannot write metrics: " + metrics_path);
        metrics_out << metrics_header(N) << '\n';
    }

    TrainResult result;
    result.log.reserve(cfg.iters);

    auto save_ckpt = [&](std::uint64_t iter, const char* tag) {
        if (out_dir.empty()) return std::string();
        Checkpoint ckpt;
        ckpt.model = bundle;
        ckpt.opt_generator = opt_gen;
        ckpt.opt_disc = opt_disc;
        ckpt.rng_state = model_rng.save_state();
        ckpt.iteration = iter;
        std::string path = out_dir + "/checkpoint_" + std::string(tag) + ".json";
        save_checkpoint(path, ckpt);
        return path;
    };

    TrainStatus status = TrainStatus::completed;
    for (std::size_t iter = 0; iter < cfg.iters; ++iter) {
        // Fresh real batches for this iteration.
        std::vector<Tensor> real(N);
        for (std::size_t n = 0; n < N; ++n)
            real[n] = source.batch(static_cast<int>(n), B, data_rng);

        // -- discriminator ascent ---------------------------------------
        std::vector<double> gan_value(N, 0.0);
        double disc_grad_norm = 0.0;
        for (std::size_t sub = 0; sub < cfg.disc_steps_per_gen; ++sub) {
            ad::Tape tape;
            BoundBundle bound;
            bound.model = &bundle;
            bind_discriminators(tape, bundle, bound, /*needs_grad=*/true);
            ad::Var loss_d{};
            for (std::size_t n = 0; n < N; ++n) {
                LatentBatch seeds = sample_latents(plan, B, model_rng, static_cast<int>(n));
                Tensor fake = generate(bundle, seeds, static_cast<int>(n));
                ad::Var dreal = tape.clamp(
                    bound.disc[n].forward(tape, tape.leaf(real[n], false)), kDiscClampLo,
                    kDiscClampHi);
                ad::Var dfake = tape.clamp(bound.disc[n].forward(tape, tape.leaf(fake, false)),
                                           kDiscClampLo, kDiscClampHi);
                ad::Var eq12 = tape.add(
                    tape.mean_all(tape.log(dreal)),
                    tape.mean_all(tape.log(tape.add_const(tape.scale(dfake, -1.0), 1.0))));
                gan_value[n] = tape.value(eq12).v[0];
                ad::Var neg = tape.scale(eq12, -1.0);
                loss_d = (n == 0) ? neg : tape.add(loss_d, neg);
            }
            tape.backward(loss_d);
            std::vector<ad::Var> disc_vars;
            for (const auto& d : bound.disc) detail::collect_bound_vars(d, disc_vars);
            disc_grad_norm = detail::grad_norm(tape, disc_vars);
            std::vector<const Tensor*> grads;
            for (ad::Var v : disc_vars) grads.push_back(tape.has_grad(v) ? &tape.grad(v) : nullptr);
            adam_step(groups.disc_params, grads, opt_disc, cfg.adam);
        }

        // -- generator / encoder step -------------------------------------
        MetricRow row;
        row.iter = iter;
        row.gan_per_domain = gan_value;
        for (double g : gan_value) row.gan_total += g;
        {
            ad::Tape tape;
            BoundBundle bound = bind_generator_side(tape, bundle, /*needs_grad=*/true);
            bind_discriminators(tape, bundle, bound, /*needs_grad=*/false);
            ad::Var total{};
            ad::Var inv_content{};
            ad::Var orth_sum{};
            std::vector<GenForward> forwards;
            for (std::size_t n = 0; n < N; ++n) {
                LatentBatch seeds = sample_latents(plan, B, model_rng, static_cast<int>(n));
                GenForward f = generate_on_tape(tape, bound, seeds, static_cast<int>(n));
                forwards.push_back(f);
                ad::Var dfake = tape.clamp(bound.disc[n].forward(tape, f.x_hat), kDiscClampLo,
                                           kDiscClampHi);
                // Non-saturating adversarial term: minimize -E[log d(x_hat)].
                ad::Var adv = tape.scale(tape.mean_all(tape.log(dfake)), -1.0);
                total = (n == 0) ? adv : tape.add(total, adv);

                ad::Var ic = inv_loss_content(tape, bound, f);
                inv_content = (n == 0) ? ic : tape.add(inv_content, ic);
                ad::Var is = inv_loss_style(tape, bound, f, static_cast<int>(n));
                if (cfg.weights.lambda_inv > 0.0)
                    total = tape.add(total, tape.scale(is, cfg.weights.lambda_inv));
                row.inv += tape.value(is).v[0];

                if (cfg.weights.lambda_orth > 0.0 || cfg.oracle_mode) {
                    ad::Var orth = orth_loss_probe(tape, f, cfg.weights.probes_K,
                                                   cfg.weights.probe_kind, cfg.weights.eps,
                                                   probe_rng);
                    orth_sum = (n == 0) ? orth : tape.add(orth_sum, orth);
                    if (cfg.weights.lambda_orth > 0.0)
                        total = tape.add(total, tape.scale(orth, cfg.weights.lambda_orth));
                }
            }
            inv_content = tape.scale(inv_content, 1.0 / static_cast<double>(N));
            if (cfg.weights.lambda_inv > 0.0)
                total = tape.add(total, tape.scale(inv_content, cfg.weights.lambda_inv));
            row.inv += tape.value(inv_content).v[0];
            if (orth_sum.valid()) row.orth = tape.value(orth_sum).v[0];

            const double total_value = tape.value(total).v[0];
            if (!std::isfinite(total_value) || std::fabs(total_value) > 1e6) {
                status = TrainStatus::diverged;
                log_line(LogLevel::error,
                         "training halted: loss " + std::to_string(total_value) + " at iteration " +
                             std::to_string(iter));
                result.final_checkpoint_path = save_ckpt(iter, "halt");
                break;
            }

            // Oracle co-evaluation on this step's latent points, before the
            // update so both estimators see the same parameters.
            if (cfg.oracle_mode) {
                double acc = 0.0;
                for (std::size_t n = 0; n < N; ++n) {
                    const Tensor& c_hat = tape.value(forwards[n].c_hat);
                    const Tensor& s_hat = tape.value(forwards[n].s_hat);
                    const std::size_t rows = std::min<std::size_t>(cfg.oracle_rows, c_hat.rows());
                    double domain_acc = 0.0;
                    for (std::size_t r = 0; r < rows; ++r) {
                        Tensor c(1, c_hat.cols()), s(1, s_hat.cols());
                        for (std::size_t j = 0; j < c_hat.cols(); ++j) c.v[j] = c_hat.at(r, j);
                        for (std::size_t j = 0; j < s_hat.cols(); ++j) s.v[j] = s_hat.at(r, j);
                        JacobianPair pair = generator_jacobians(bundle, c, s);
                        domain_acc += orth_loss_exact(pair.Jc, pair.Js, cfg.weights.eps);
                    }
                    acc += domain_acc / static_cast<double>(rows);
                }
                row.orth_exact = acc;
            }

            tape.backward(total);
            std::vector<ad::Var> gen_vars;
            detail::collect_bound_vars(bound.e_C, gen_vars);
            for (const auto& e : bound.e_S) detail::collect_bound_vars(e, gen_vars);
            detail::collect_bound_vars(bound.t_C, gen_vars);
            for (const auto& t : bound.t_S) detail::collect_bound_vars(t, gen_vars);
            detail::collect_bound_vars(bound.gen, gen_vars);
            row.grad_norm_gen = detail::grad_norm(tape, gen_vars);
            std::vector<const Tensor*> grads;
            for (ad::Var v : gen_vars) grads.push_back(tape.has_grad(v) ? &tape.grad(v) : nullptr);
            adam_step(groups.gen_params, grads, opt_gen, cfg.adam);
        }
        row.grad_norm_disc = disc_grad_norm;
        result.log.push_back(row);
        if (metrics_out.is_open()) metrics_out << metrics_row_csv(row) << '\n';

        if (cfg.audit_every > 0 && (iter + 1) % cfg.audit_every == 0)
            save_ckpt(iter + 1, std::to_string(iter + 1).c_str());
    }

    if (status == TrainStatus::completed) result.final_checkpoint_path = save_ckpt(cfg.iters, "final");
    result.bundle = std::move(bundle);
    result.status = status;
    result.skipped_steps = opt_gen.skipped + opt_disc.skipped;
    return result;
}

}  // namespace csdi
