#pragma once

// Identifiability evaluation: held-out linear R^2 between learned and true
// latents (with an optional kernel-ridge variant), disentanglement reports
// driven by generator inversion against a world oracle, parameter sweeps, and
// the probe-estimator error study.

#include <Eigen/Dense>
#include <algorithm>
#include <atomic>
#include <fstream>
#include <functional>
#include <json.hpp>
#include <numeric>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "csdi/jacobian.hpp"
#include "csdi/losses.hpp"
#include "csdi/mmd.hpp"
#include "csdi/model.hpp"
#include "csdi/train.hpp"
#include "csdi/world.hpp"

namespace csdi {

struct R2Report {
    double r2_content = 0.0;
    std::vector<double> r2_style_per_domain;
    double r2_style_mean = 0.0;
    double ridge = 1e-6;
    bool reliable = true;  // false when too many inversions failed
    double inversion_failure_rate = 0.0;
    std::string config_hash;
};

// Held-out R^2 of an ordinary least squares fit (intercept + small ridge on
// the slopes) predicting targets from predictors: fit on a 70% split, score
// 1 - SSE/SST pooled over target dimensions on the remaining 30%.
inline double fit_linear_r2(const Tensor& predictors, const Tensor& targets, double ridge,
                            std::uint64_t split_seed) {
    const std::size_t n = predictors.rows(), p = predictors.cols(), q = targets.cols();
    if (targets.rows() != n) throw ShapeError("fit_linear_r2: row mismatch");
    if (n < 10 * p) throw ConfigError("fit_linear_r2: needs >= 10x more samples than predictors");

    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(derive_seed(split_seed, 0x5917));
    for (std::size_t i = n; i > 1; --i)
        std::swap(idx[i - 1], idx[static_cast<std::size_t>(rng.below(i))]);
    const std::size_t n_train = (n * 7) / 10;
    const std::size_t n_test = n - n_train;

    auto rows_to_eigen = [&](std::size_t from, std::size_t to, const Tensor& t) {
        Eigen::MatrixXd M(static_cast<Eigen::Index>(to - from), static_cast<Eigen::Index>(t.cols()));
        for (std::size_t i = from; i < to; ++i)
            for (std::size_t j = 0; j < t.cols(); ++j)
                M(static_cast<Eigen::Index>(i - from), static_cast<Eigen::Index>(j)) =
                    t.at(idx[i], j);
        return M;
    };
    Eigen::MatrixXd Xtr = rows_to_eigen(0, n_train, predictors);
    Eigen::MatrixXd Ytr = rows_to_eigen(0, n_train, targets);
    Eigen::MatrixXd Xte = rows_to_eigen(n_train, n, predictors);
    Eigen::MatrixXd Yte = rows_to_eigen(n_train, n, targets);

    // Centered ridge solution; intercept recovered from the means.
    Eigen::RowVectorXd x_mean = Xtr.colwise().mean();
    Eigen::RowVectorXd y_mean = Ytr.colwise().mean();
    Eigen::MatrixXd Xc = Xtr.rowwise() - x_mean;
    Eigen::MatrixXd Yc = Ytr.rowwise() - y_mean;
    Eigen::MatrixXd gram = Xc.transpose() * Xc;
    gram.diagonal().array() += ridge;
    Eigen::MatrixXd beta = gram.ldlt().solve(Xc.transpose() * Yc);

    Eigen::MatrixXd pred = (Xte.rowwise() - x_mean) * beta;
    pred.rowwise() += y_mean;
    double sse = (pred - Yte).squaredNorm();
    Eigen::RowVectorXd yte_mean = Yte.colwise().mean();
    double sst = (Yte.rowwise() - yte_mean).squaredNorm();
    if (sst <= 0.0) throw NumericError("fit_linear_r2: degenerate target");
    (void)q;
    (void)n_test;
    return 1.0 - sse / sst;
}

// Kernel-ridge R^2 (RBF, median-heuristic bandwidth): the nonlinear-map
// variant for cases where a linear readout understates identification.
inline double fit_kernel_r2(const Tensor& predictors, const Tensor& targets, double ridge,
                            std::uint64_t split_seed) {
    const std::size_t n = predictors.rows();
    if (targets.rows() != n) throw ShapeError("fit_kernel_r2: row mismatch");
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(derive_seed(split_seed, 0x5917));
    for (std::size_t i = n; i > 1; --i)
        std::swap(idx[i - 1], idx[static_cast<std::size_t>(rng.below(i))]);
    const std::size_t n_train = (n * 7) / 10;

    Tensor Xtr(n_train, predictors.cols()), Xte(n - n_train, predictors.cols());
    Eigen::MatrixXd Ytr(static_cast<Eigen::Index>(n_train), static_cast<Eigen::Index>(targets.cols()));
    Eigen::MatrixXd Yte(static_cast<Eigen::Index>(n - n_train),
                        static_cast<Eigen::Index>(targets.cols()));
    for (std::size_t i = 0; i < n; ++i) {
        const Tensor& src = predictors;
        if (i < n_train) {
            for (std::size_t j = 0; j < src.cols(); ++j) Xtr.at(i, j) = src.at(idx[i], j);
            for (std::size_t j = 0; j < targets.cols(); ++j)
                Ytr(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
                    targets.at(idx[i], j);
        } else {
            for (std::size_t j = 0; j < src.cols(); ++j) Xte.at(i - n_train, j) = src.at(idx[i], j);
            for (std::size_t j = 0; j < targets.cols(); ++j)
                Yte(static_cast<Eigen::Index>(i - n_train), static_cast<Eigen::Index>(j)) =
                    targets.at(idx[i], j);
        }
    }
    const double gamma = 1.0 / median_sqdist(Xtr, Xtr);
    auto kernel_matrix = [&](const Tensor& A, const Tensor& B) {
        Eigen::MatrixXd K(static_cast<Eigen::Index>(A.rows()), static_cast<Eigen::Index>(B.rows()));
        for (std::size_t i = 0; i < A.rows(); ++i)
            for (std::size_t j = 0; j < B.rows(); ++j)
                K(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
                    std::exp(-gamma * detail::sqdist_rows(A, i, B, j));
        return K;
    };
    Eigen::MatrixXd Ktr = kernel_matrix(Xtr, Xtr);
    Ktr.diagonal().array() += ridge;
    Eigen::MatrixXd alpha = Ktr.ldlt().solve(Ytr);
    Eigen::MatrixXd pred = kernel_matrix(Xte, Xtr) * alpha;
    double sse = (pred - Yte).squaredNorm();
    Eigen::RowVectorXd yte_mean = Yte.colwise().mean();
    double sst = (Yte.rowwise() - yte_mean).squaredNorm();
    if (sst <= 0.0) throw NumericError("fit_kernel_r2: degenerate target");
    return 1.0 - sse / sst;
}

struct DisentanglementConfig {
    std::size_t n_samples = 600;  // per domain
    InversionConfig inversion;
    double failure_divergence = 1e-2;  // per-row divergence above this counts as failed
    double ridge = 1e-6;
    std::uint64_t eval_seed = 1234;
};

// Content and style R^2 of a bundle against the world oracle. Latents are
// extracted by inverting world observations through the generator; rows whose
// divergence stays above the failure threshold mark the report unreliable
// when they exceed 20%.
inline R2Report disentanglement_report(const ModelBundle& bundle, const WorldSpec& world,
                                       const DisentanglementConfig& cfg) {
    const std::size_t N = world.plan.N;
    R2Report rep;
    rep.ridge = cfg.ridge;
    std::size_t failures = 0, total_rows = 0;

    std::vector<Tensor> c_hat_pool, c_true_pool;
    for (std::size_t n = 0; n < N; ++n) {
        Rng data_rng(derive_seed(cfg.eval_seed, 0x90 + n));
        WorldSample sample = sample_world(world, cfg.n_samples, static_cast<int>(n), data_rng);
        Rng inv_rng(derive_seed(cfg.eval_seed, 0xA0 + n));
        InversionResult inv = invert_with_restarts(bundle, sample.x, static_cast<int>(n),
                                                   cfg.inversion, inv_rng);
        for (double dv : inv.divergence) {
            total_rows += 1;
            if (dv > cfg.failure_divergence * static_cast<double>(world.plan.d)) failures += 1;
        }
        double style_r2 = fit_linear_r2(inv.s_hat, sample.s_true, cfg.ridge,
                                        derive_seed(cfg.eval_seed, 0xB0 + n));
        rep.r2_style_per_domain.push_back(style_r2);
        c_hat_pool.push_back(inv.c_hat);
        c_true_pool.push_back(sample.c_true);
    }
    // Content is shared: pool across domains for one regression.
    std::size_t rows = 0;
    for (const Tensor& t : c_hat_pool) rows += t.rows();
    Tensor c_hat(rows, world.plan.d_C), c_true(rows, world.plan.d_C);
    std::size_t at = 0;
    for (std::size_t b = 0; b < c_hat_pool.size(); ++b) {
        for (std::size_t i = 0; i < c_hat_pool[b].rows(); ++i, ++at)
            for (std::size_t j = 0; j < world.plan.d_C; ++j) {
                c_hat.at(at, j) = c_hat_pool[b].at(i, j);
                c_true.at(at, j) = c_true_pool[b].at(i, j);
            }
    }
    rep.r2_content = fit_linear_r2(c_hat, c_true, cfg.ridge, derive_seed(cfg.eval_seed, 0xC0));
    for (double r : rep.r2_style_per_domain) rep.r2_style_mean += r;
    rep.r2_style_mean /= static_cast<double>(N);
    rep.inversion_failure_rate = static_cast<double>(failures) / static_cast<double>(total_rows);
    rep.reliable = rep.inversion_failure_rate <= 0.2;
    return rep;
}

// ---- sweeps -------------------------------------------------------------

struct SweepRunMetrics {
    double value = 0.0;  // swept parameter value
    std::size_t repeat = 0;
    bool completed = false;  // divergent runs stay missing
    double mmd_mean = 0.0;
    double r2_content = 0.0;
    double r2_style = 0.0;
    double orth_exact_mean = 0.0;
    std::string config_hash;
};

struct SweepResult {
    std::string swept_param;
    std::vector<double> values;
    std::vector<SweepRunMetrics> runs;
};

inline ExperimentConfig apply_swept_param(ExperimentConfig cfg, const std::string& name,
                                          double value) {
    if (name == "lambda_inv")
        cfg.weights.lambda_inv = value;
    else if (name == "lambda_orth")
        cfg.weights.lambda_orth = value;
    else if (name == "probes_K")
        cfg.weights.probes_K = static_cast<std::size_t>(value);
    else if (name == "eps")
        cfg.weights.eps = value;
    else
        throw ConfigError("sweep: unsupported parameter " + name);
    return cfg;
}

struct SweepOptions {
    std::size_t jobs = 1;
    std::size_t mmd_samples = 2000;
    DisentanglementConfig eval;
    std::size_t orth_points = 16;  // latent points for the exact-loss average
};

// Mean exact orthogonality loss over latent points drawn from the model prior.
inline double mean_orth_exact(const ModelBundle& bundle, std::size_t points, double eps,
                              std::uint64_t seed) {
    Rng rng(derive_seed(seed, 0xD0));
    double acc = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < points; ++i) {
        int domain = static_cast<int>(rng.below(bundle.plan.N));
        LatentBatch seeds = sample_latents(bundle.plan, 1, rng, domain);
        Tensor c_hat = mlp_eval(bundle.e_C, seeds.rc);
        Tensor s_hat = mlp_eval(bundle.e_S[static_cast<std::size_t>(domain)], seeds.rs);
        JacobianPair pair = generator_jacobians(bundle, c_hat, s_hat);
        acc += orth_loss_exact(pair.Jc, pair.Js, eps);
        count += 1;
    }
    return acc / static_cast<double>(count);
}

// Per-domain MMD between held-out world samples and fresh generator samples.
inline double mean_domain_mmd(const ModelBundle& bundle, const WorldSpec& world, std::size_t n,
                              std::uint64_t seed) {
    double acc = 0.0;
    for (std::size_t dom = 0; dom < world.plan.N; ++dom) {
        Rng world_rng(derive_seed(seed, 0xE0 + dom));
        Rng model_rng(derive_seed(seed, 0xF0 + dom));
        Tensor real = sample_world(world, n, static_cast<int>(dom), world_rng).x;
        LatentBatch seeds = sample_latents(bundle.plan, n, model_rng, static_cast<int>(dom));
        Tensor fake = generate(bundle, seeds, static_cast<int>(dom));
        acc += mmd(real, fake);
    }
    return acc / static_cast<double>(world.plan.N);
}

// One train + evaluate unit of a sweep. Out-of-range losses leave the run
// marked incomplete instead of fabricating metrics.
inline SweepRunMetrics sweep_run(const ExperimentConfig& cfg, const WorldSpec& world, double value,
                                 std::size_t repeat, const SweepOptions& opts) {
    SweepRunMetrics m;
    m.value = value;
    m.repeat = repeat;
    m.config_hash = config_hash(cfg);
    WorldSource source(world);
    Rng init(derive_seed(cfg.seed, 0));
    ModelBundle bundle = ModelBundle::init(cfg.plan, cfg.model, init);
    TrainResult res = train(cfg, source, std::move(bundle));
    if (res.status != TrainStatus::completed) return m;
    m.completed = true;
    m.mmd_mean = mean_domain_mmd(res.bundle, world, opts.mmd_samples, cfg.seed + 17);
    DisentanglementConfig ecfg = opts.eval;
    ecfg.eval_seed = derive_seed(cfg.seed, 0x1234);
    R2Report rep = disentanglement_report(res.bundle, world, ecfg);
    m.r2_content = rep.r2_content;
    m.r2_style = rep.r2_style_mean;
    m.orth_exact_mean = mean_orth_exact(res.bundle, opts.orth_points, cfg.weights.eps, cfg.seed);
    return m;
}

// Sweep over one parameter: trains one model per (value, repeat) with seeds
// base_seed + repeat, optionally across threads (runs are independent and
// each is internally single-threaded and deterministic).
inline SweepResult sweep(const ExperimentConfig& base, const WorldSpec& world,
                         const std::string& param_name, const std::vector<double>& values,
                         std::size_t repeats, const SweepOptions& opts) {
    SweepResult result;
    result.swept_param = param_name;
    result.values = values;
    struct Job {
        ExperimentConfig cfg;
        double value;
        std::size_t repeat;
    };
    std::vector<Job> jobs;
    for (double v : values)
        for (std::size_t r = 0; r < repeats; ++r) {
            ExperimentConfig cfg = apply_swept_param(base, param_name, v);
            cfg.seed = base.seed + r;
            jobs.push_back({cfg, v, r});
        }
    result.runs.resize(jobs.size());
    const std::size_t workers = std::max<std::size_t>(1, std::min(opts.jobs, jobs.size()));
    std::vector<std::thread> pool;
    std::atomic<std::size_t> next{0};
    auto work = [&] {
        for (;;) {
            std::size_t i = next.fetch_add(1);
            if (i >= jobs.size()) return;
            result.runs[i] = sweep_run(jobs[i].cfg, world, jobs[i].value, jobs[i].repeat, opts);
        }
    };
    if (workers == 1) {
        work();
    } else {
        for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
        for (auto& t : pool) t.join();
    }
    return result;
}

inline double median(std::vector<double> xs) {
    if (xs.empty()) throw NumericError("median: empty");
    std::sort(xs.begin(), xs.end());
    return xs.size() % 2 ? xs[xs.size() / 2]
                         : 0.5 * (xs[xs.size() / 2 - 1] + xs[xs.size() / 2]);
}

// ---- estimator error study ------------------------------------------------

struct EstimatorErrorRow {
    std::size_t K = 0;
    ProbeKind kind = ProbeKind::gaussian;
    double median_rel_error = 0.0;
    double p90_rel_error = 0.0;
};

// Relative error of the probe estimator against the exact loss over a corpus
// of Jacobian pairs, for each (K, kind).
inline std::vector<EstimatorErrorRow> estimator_error_study(
    const std::vector<JacobianPair>& corpus, const std::vector<std::size_t>& K_list,
    const std::vector<ProbeKind>& kinds, std::size_t trials, double eps, std::uint64_t seed) {
    std::vector<EstimatorErrorRow> rows;
    for (ProbeKind kind : kinds) {
        for (std::size_t K : K_list) {
            std::vector<double> errors;
            for (std::size_t p = 0; p < corpus.size(); ++p) {
                const JacobianPair& pair = corpus[p];
                double exact = orth_loss_exact(pair.Jc, pair.Js, eps);
                for (std::size_t t = 0; t < trials; ++t) {
                    Rng rng(derive_seed(seed, p * 1000 + t, K));
                    double est = orth_loss_probe_matrices(pair.Jc, pair.Js, K, kind, eps, rng);
                    errors.push_back(std::fabs(est - exact) / (std::fabs(exact) + 1e-300));
                }
            }
            std::sort(errors.begin(), errors.end());
            EstimatorErrorRow row;
            row.K = K;
            row.kind = kind;
            row.median_rel_error = median(errors);
            row.p90_rel_error = errors[static_cast<std::size_t>(0.9 * (errors.size() - 1))];
            rows.push_back(row);
        }
    }
    return rows;
}

// Seeded corpus of random Jacobian pairs for studies and acceptance checks.
inline std::vector<JacobianPair> random_pair_corpus(std::size_t count, std::size_t d,
                                                    std::size_t d_C, std::size_t d_S,
                                                    std::uint64_t seed) {
    std::vector<JacobianPair> corpus;
    corpus.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        Rng rng(derive_seed(seed, i));
        JacobianPair pair;
        pair.Jc.resize(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d_C));
        pair.Js.resize(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d_S));
        for (Eigen::Index r = 0; r < pair.Jc.rows(); ++r)
            for (Eigen::Index c = 0; c < pair.Jc.cols(); ++c) pair.Jc(r, c) = rng.normal();
        for (Eigen::Index r = 0; r < pair.Js.rows(); ++r)
            for (Eigen::Index c = 0; c < pair.Js.cols(); ++c) pair.Js(r, c) = rng.normal();
        corpus.push_back(std::move(pair));
    }
    return corpus;
}

// Finite-difference Jacobian of the learned style map delta(c, s) =
// style-part of inverting g(c, s), w.r.t. the true content. Each perturbed
// inversion is warm-started from the base solution, so the optimization error
// largely cancels in the central difference.
inline Eigen::MatrixXd learned_style_content_jacobian(const ModelBundle& bundle,
                                                      const WorldSpec& world, const Tensor& c,
                                                      const Tensor& s, int domain,
                                                      const InversionResult& base, double step,
                                                      std::size_t polish_steps) {
    InversionConfig polish;
    polish.steps = polish_steps;
    polish.lr_start = 5e-3;
    polish.lr_end = 1e-4;
    polish.restarts = 1;
    Eigen::MatrixXd J(static_cast<Eigen::Index>(world.plan.d_S),
                      static_cast<Eigen::Index>(world.plan.d_C));
    for (std::size_t j = 0; j < world.plan.d_C; ++j) {
        Tensor cp = c, cm = c;
        cp.v[j] += step;
        cm.v[j] -= step;
        Tensor xp = world_forward(world, cp, s);
        Tensor xm = world_forward(world, cm, s);
        InversionResult rp = invert_sample(bundle, xp, domain, base.c_hat, base.s_hat, polish);
        InversionResult rm = invert_sample(bundle, xm, domain, base.c_hat, base.s_hat, polish);
        for (std::size_t i = 0; i < world.plan.d_S; ++i)
            J(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
                (rp.s_hat.v[i] - rm.s_hat.v[i]) / (2.0 * step);
    }
    return J;
}

// ---- jacobian report ---------------------------------------------------------

// Pointwise audit document: angles and losses of the world's own Jacobians at
// sampled latent points; when a bundle is supplied, the learned-model side
// (probe loss at matched points, Theorem-2 bound factors) is filled in too.
inline nlohmann::json jacobian_report(const WorldSpec& world, const ModelBundle* bundle,
                                      std::size_t points, std::size_t probes_K, double eps,
                                      std::uint64_t seed) {
    nlohmann::json out = nlohmann::json::array();
    Rng rng(derive_seed(seed, 0xAB));
    InversionConfig inv_cfg;
    for (std::size_t i = 0; i < points; ++i) {
        int domain = static_cast<int>(rng.below(world.plan.N));
        WorldSample sample = sample_world(world, 1, domain, rng);
        Tensor c = sample.c_true, s = sample.s_true;
        JacobianPair true_pair = world_jacobians(world, c, s);
        AngleReport rep = principal_angles(true_pair.Jc, true_pair.Js);
        nlohmann::json row;
        row["point_id"] = i;
        row["domain"] = domain;
        row["angles"] = rep.principal_angles;
        row["xi_implied"] = rep.xi_implied;
        row["sigma_min"] = rep.sigma_min_style;
        row["ranks"] = {rep.rank_c, rep.rank_s};
        row["orth_loss_exact"] = orth_loss_exact(true_pair.Jc, true_pair.Js, eps);
        {
            Rng prng(derive_seed(seed, 0xCD, i));
            row["orth_loss_probe"] = orth_loss_probe_matrices(true_pair.Jc, true_pair.Js, probes_K,
                                                              ProbeKind::gaussian, eps, prng);
        }
        if (bundle) {
            // Matched point through inversion; optimization error is reported,
            // not hidden.
            Rng inv_rng(derive_seed(seed, 0xEF, i));
            InversionResult inv = invert_with_restarts(*bundle, sample.x, domain, inv_cfg, inv_rng);
            JacobianPair learned = generator_jacobians(*bundle, inv.c_hat, inv.s_hat);
            row["inversion_divergence"] = inv.divergence[0];
            row["learned_orth_loss_exact"] = orth_loss_exact(learned.Jc, learned.Js, eps);
            Eigen::MatrixXd Jc_delta =
                learned_style_content_jacobian(*bundle, world, c, s, domain, inv, 1e-3, 120);
            BoundCheckInput bin;
            bin.Jc_true = true_pair.Jc;
            bin.Js_learned_full = learned.Js;
            bin.Jc_of_learned_style = Jc_delta;
            try {
                BoundCheck check = robustness_bound_check(bin, world.xi);
                row["bound_lhs"] = check.lhs;
                row["bound_rhs"] = check.rhs;
                row["bound_holds"] = check.holds;
            } catch (const NumericError& e) {
                row["bound_error"] = e.what();
            }
        }
        out.push_back(row);
    }
    return out;
}

}  // namespace csdi
