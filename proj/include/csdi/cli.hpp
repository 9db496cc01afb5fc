#pragma once

// Command-line entry point: world/dataset construction, training, Jacobian
// audits, evaluation, sweeps, estimator studies, inversion and translation.
// Every command derives its randomness from --seed, honors config-file <
// flag precedence, and leaves a run manifest sufficient to reproduce the run.

#include <CLI11.hpp>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <string>
#include <vector>

#include "csdi/colorize.hpp"
#include "csdi/eval.hpp"
#include "csdi/train.hpp"
#include "csdi/world.hpp"

namespace csdi::cli {

namespace fs = std::filesystem;

inline std::string timestamp_utc() {
    auto now = std::chrono::system_clock::now();
    std::time_t t = std::chrono::system_clock::to_time_t(now);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    return buf;
}

// Written before the command does real work and finalized on every exit path.
class RunManifest {
public:
    RunManifest(fs::path path, const std::vector<std::string>& argv, std::uint64_t seed)
        : path_(std::move(path)) {
        doc_["command_line"] = argv;
        doc_["seed"] = seed;
        doc_["start_time"] = timestamp_utc();
        doc_["code_version"] = std::string(kVersion);
        doc_["determinism_mode"] = "bit-exact-single-thread";
        doc_["status"] = "running";
        write();
    }

    void set(const std::string& key, const nlohmann::json& value) {
        doc_[key] = value;
        write();
    }

    void add_output(const std::string& p) {
        outputs_.push_back(p);
        doc_["output_paths"] = outputs_;
        write();
    }

    void finalize(bool ok, const std::string& error = "") {
        doc_["status"] = ok ? "ok" : "failed";
        if (!error.empty()) doc_["error"] = error;
        doc_["end_time"] = timestamp_utc();
        write();
    }

private:
    void write() {
        fs::create_directories(path_.parent_path().empty() ? "." : path_.parent_path());
        std::ofstream out(path_);
        if (out) out << doc_.dump(1) << '\n';
    }
    fs::path path_;
    nlohmann::json doc_;
    std::vector<std::string> outputs_;
};

inline Tensor tensor_from_rows_json(const nlohmann::json& rows) {
    if (!rows.is_array() || rows.empty()) throw ConfigError("expected a non-empty array of rows");
    std::size_t cols = rows.front().size();
    Tensor t(rows.size(), cols);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto& row = rows[i];
        if (row.size() != cols) throw ConfigError("ragged rows in input tensor");
        for (std::size_t j = 0; j < cols; ++j) t.at(i, j) = row[j].get<double>();
    }
    return t;
}

inline nlohmann::json tensor_rows_to_json(const Tensor& t) {
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t i = 0; i < t.rows(); ++i) {
        nlohmann::json row = nlohmann::json::array();
        for (std::size_t j = 0; j < t.cols(); ++j) row.push_back(t.at(i, j));
        rows.push_back(row);
    }
    return rows;
}

inline ModelBundle load_bundle(const std::string& checkpoint_path) {
    Rng shape_rng(0);
    Checkpoint ckpt = load_checkpoint(checkpoint_path, shape_rng);
    return std::move(ckpt.model);
}

// Loads a colorized dataset directory (manifest.csv + PNGs) into flat
// per-domain row matrices; pixel rows are scaled into [-1, 1] for the
// tanh-headed generator.
inline std::vector<Tensor> load_dataset_rows(const std::string& dir, std::size_t domains,
                                             std::size_t d) {
    std::ifstream manifest(fs::path(dir) / "manifest.csv");
    if (!manifest) throw IoError("cannot read dataset manifest in " + dir);
    std::string line;
    std::getline(manifest, line);  // header
    std::vector<std::vector<double>> rows_per_domain(domains);
    while (std::getline(manifest, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::string filename, label_s, domain_s, color_s;
        std::getline(ss, filename, ',');
        std::getline(ss, label_s, ',');
        std::getline(ss, domain_s, ',');
        std::getline(ss, color_s, ',');
        std::size_t domain = static_cast<std::size_t>(std::stoi(domain_s)) - 1;
        if (domain >= domains) throw IoError("dataset manifest domain out of range: " + domain_s);
        FILE* fp = std::fopen((fs::path(dir) / filename).string().c_str(), "rb");
        if (!fp) throw IoError("missing dataset image: " + filename);
        png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
        png_infop info = png_create_info_struct(png);
        if (!png || !info || setjmp(png_jmpbuf(png))) {
            if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
            std::fclose(fp);
            throw IoError("libpng read failure: " + filename);
        }
        png_init_io(png, fp);
        png_read_info(png, info);
        png_set_expand(png);
        png_set_strip_16(png);
        png_set_strip_alpha(png);
        png_read_update_info(png, info);
        const std::size_t h = png_get_image_height(png, info);
        const std::size_t w = png_get_image_width(png, info);
        const std::size_t channels = png_get_channels(png, info);
        std::vector<unsigned char> row(w * channels);
        for (std::size_t y = 0; y < h; ++y) {
            png_read_row(png, row.data(), nullptr);
            for (unsigned char px : row)
                rows_per_domain[domain].push_back(2.0 * (px / 255.0) - 1.0);
        }
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
    }
    std::vector<Tensor> out;
    for (std::size_t n = 0; n < domains; ++n) {
        if (rows_per_domain[n].empty()) throw IoError("dataset has no rows for a domain");
        if (rows_per_domain[n].size() % d != 0)
            throw IoError("dataset row size does not match config dimension d");
        const std::size_t rows = rows_per_domain[n].size() / d;
        out.push_back(Tensor::from_rows(rows, d, std::move(rows_per_domain[n])));
    }
    return out;
}

struct CommonFlags {
    std::string config_path;
    std::uint64_t seed = 0;
    bool seed_given = false;
};

inline int dispatch(std::vector<std::string> args) {
    CLI::App app{"content-style workbench", "csdi"};
    app.require_subcommand(1);

    // ---- make-world -----------------------------------------------------
    auto* make_world = app.add_subcommand("make-world", "forge a ground-truth world");
    std::string mw_config, mw_out = "world.json";
    double mw_xi = 0.0;
    std::uint64_t mw_seed = 0;
    make_world->add_option("--config", mw_config, "plan / nonlinearity / style-law JSON");
    make_world->add_option("--xi", mw_xi, "CSDI tilt angle in [0, pi/2)");
    make_world->add_option("--seed", mw_seed, "construction seed");
    make_world->add_option("--out", mw_out, "output world JSON path")->required();

    // ---- colorize-dataset -------------------------------------------------
    auto* colorize_cmd = app.add_subcommand("colorize-dataset", "build the two-domain color set");
    std::string cd_images, cd_labels, cd_png_dir, cd_out, cd_config;
    std::uint64_t cd_seed = 0;
    std::size_t cd_limit = 0;
    colorize_cmd->add_option("--images", cd_images, "IDX image file");
    colorize_cmd->add_option("--labels", cd_labels, "IDX label file");
    colorize_cmd->add_option("--png-dir", cd_png_dir, "directory of <label>_<n>.png files");
    colorize_cmd->add_option("--out", cd_out, "output directory")->required();
    colorize_cmd->add_option("--seed", cd_seed, "sampling seed");
    colorize_cmd->add_option("--config", cd_config, "colorize config JSON");
    colorize_cmd->add_option("--limit", cd_limit, "cap the number of source images");

    // ---- train ------------------------------------------------------------
    auto* train_cmd = app.add_subcommand("train", "train a bundle on a world or dataset");
    std::string tr_config, tr_world, tr_dataset, tr_out = "run";
    std::uint64_t tr_seed = 0;
    bool tr_seed_given = false, tr_oracle = false;
    std::size_t tr_iters = 0, tr_probes = 0;
    std::string tr_probe_kind;
    train_cmd->add_option("--config", tr_config, "experiment config JSON")->required();
    train_cmd->add_option("--world", tr_world, "world JSON (synthetic data source)");
    train_cmd->add_option("--dataset", tr_dataset, "dataset directory with manifest.csv");
    train_cmd->add_option("--out", tr_out, "output directory");
    train_cmd->add_option("--seed", tr_seed, "seed override")->each([&](const std::string&) {
        tr_seed_given = true;
    });
    train_cmd->add_option("--iters", tr_iters, "iteration override");
    train_cmd->add_option("--probes", tr_probes, "probe count override");
    train_cmd->add_option("--probe-kind", tr_probe_kind, "gaussian | rademacher | basis-enumeration");
    train_cmd->add_flag("--oracle", tr_oracle, "co-evaluate the exact regularizer each step");

    // ---- jacobian-report ----------------------------------------------------
    auto* report_cmd = app.add_subcommand("jacobian-report", "pointwise angle / loss audit");
    std::string jr_world, jr_checkpoint, jr_out = "jacobian_report.json";
    std::size_t jr_points = 32, jr_probes = 8;
    std::uint64_t jr_seed = 0;
    report_cmd->add_option("--world", jr_world, "world JSON")->required();
    report_cmd->add_option("--checkpoint", jr_checkpoint, "optional trained checkpoint");
    report_cmd->add_option("--out", jr_out, "output JSON path");
    report_cmd->add_option("--points", jr_points, "audited latent points");
    report_cmd->add_option("--probes", jr_probes, "probe count for the stochastic loss");
    report_cmd->add_option("--seed", jr_seed, "audit seed");

    // ---- eval ---------------------------------------------------------------
    auto* eval_cmd = app.add_subcommand("eval", "disentanglement R^2 and MMD report");
    std::string ev_checkpoint, ev_world, ev_out = "eval.json";
    std::size_t ev_samples = 600, ev_mmd = 2000;
    std::uint64_t ev_seed = 0;
    eval_cmd->add_option("--checkpoint", ev_checkpoint, "trained checkpoint")->required();
    eval_cmd->add_option("--world", ev_world, "world JSON")->required();
    eval_cmd->add_option("--out", ev_out, "output JSON path");
    eval_cmd->add_option("--samples", ev_samples, "held-out samples per domain");
    eval_cmd->add_option("--mmd-samples", ev_mmd, "held-out samples for the MMD");
    eval_cmd->add_option("--seed", ev_seed, "evaluation seed");

    // ---- sweep ---------------------------------------------------------------
    auto* sweep_cmd = app.add_subcommand("sweep", "train per swept value, aggregate metrics");
    std::string sw_config, sw_world, sw_param, sw_out = "sweep";
    std::vector<double> sw_values;
    std::size_t sw_repeats = 1, sw_jobs = 1;
    sweep_cmd->add_option("--config", sw_config, "experiment config JSON")->required();
    sweep_cmd->add_option("--world", sw_world, "world JSON")->required();
    sweep_cmd->add_option("--param", sw_param, "lambda_inv | lambda_orth | probes_K | eps")
        ->required();
    sweep_cmd->add_option("--values", sw_values, "swept values")->required();
    sweep_cmd->add_option("--repeats", sw_repeats, "seeds per value");
    sweep_cmd->add_option("--jobs", sw_jobs, "parallel runs");
    sweep_cmd->add_option("--out", sw_out, "output directory");

    // ---- estimator-study --------------------------------------------------
    auto* study_cmd = app.add_subcommand("estimator-study", "probe-error table vs exact oracle");
    std::string st_out = "estimator_study.csv";
    std::size_t st_d = 64, st_dc = 8, st_ds = 4, st_pairs = 50, st_trials = 3;
    std::vector<std::size_t> st_K{2, 8, 32, 128, 1024};
    std::uint64_t st_seed = 0;
    std::vector<std::string> st_kinds{"gaussian", "basis-enumeration"};
    study_cmd->add_option("--out", st_out, "output CSV path");
    study_cmd->add_option("--d", st_d, "output dimension");
    study_cmd->add_option("--dc", st_dc, "content dimension");
    study_cmd->add_option("--ds", st_ds, "style dimension");
    study_cmd->add_option("--pairs", st_pairs, "corpus size");
    study_cmd->add_option("--trials", st_trials, "trials per pair");
    study_cmd->add_option("--K", st_K, "probe counts");
    study_cmd->add_option("--probe-kind", st_kinds, "probe kinds");
    study_cmd->add_option("--seed", st_seed, "corpus / probe seed");

    // ---- invert ----------------------------------------------------------------
    auto* invert_cmd = app.add_subcommand("invert", "recover latents of observations");
    std::string in_checkpoint, in_input, in_out = "inversion.json";
    std::size_t in_steps = 500, in_restarts = 5;
    std::uint64_t in_seed = 0;
    invert_cmd->add_option("--checkpoint", in_checkpoint, "trained checkpoint")->required();
    invert_cmd->add_option("--input", in_input, "JSON {\"x\": [[..],..], \"domain\": n}")
        ->required();
    invert_cmd->add_option("--out", in_out, "output JSON path");
    invert_cmd->add_option("--steps", in_steps, "descent steps per restart");
    invert_cmd->add_option("--restarts", in_restarts, "random restarts");
    invert_cmd->add_option("--seed", in_seed, "restart seed");

    // ---- translate -----------------------------------------------------------
    auto* translate_cmd = app.add_subcommand("translate", "content from source, style from ref");
    std::string tl_checkpoint, tl_source, tl_ref, tl_out = "translation.json";
    int tl_source_domain = 0, tl_target_domain = 0;
    std::size_t tl_steps = 500;
    std::uint64_t tl_seed = 0;
    translate_cmd->add_option("--checkpoint", tl_checkpoint, "trained checkpoint")->required();
    translate_cmd->add_option("--source", tl_source, "source observations JSON")->required();
    translate_cmd->add_option("--style-ref", tl_ref, "style reference observations JSON")
        ->required();
    translate_cmd->add_option("--source-domain", tl_source_domain, "source domain index");
    translate_cmd->add_option("--target-domain", tl_target_domain, "target domain index");
    translate_cmd->add_option("--out", tl_out, "output JSON path");
    translate_cmd->add_option("--steps", tl_steps, "descent steps per restart");
    translate_cmd->add_option("--seed", tl_seed, "restart seed");

    // CLI11 wants argv-style reversed input.
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {  // --help
            std::cout << app.help();
            return 0;
        }
        std::cerr << e.what() << "\n\n" << app.help();
        return 1;
    }

    auto original_args = args;
    original_args.insert(original_args.begin(), "csdi");

    try {
        if (*make_world) {
            RunManifest manifest(fs::path(mw_out).string() + ".run_manifest.json", original_args,
                                 mw_seed);
            try {
                DimensionPlan plan;
                NonlinearityConfig nl;
                StyleLaw law;
                if (!mw_config.empty()) {
                    std::ifstream in(mw_config);
                    if (!in) throw IoError("cannot read config: " + mw_config);
                    nlohmann::json j = nlohmann::json::parse(in);
                    detail::reject_unknown_keys(j, {"plan", "nonlinearity", "style_law"},
                                                "make-world config");
                    plan = plan_from_json(j.at("plan"));
                    if (j.contains("nonlinearity")) {
                        const auto& n = j.at("nonlinearity");
                        detail::reject_unknown_keys(
                            n, {"alpha", "affine_min", "affine_max", "identity"}, "nonlinearity");
                        if (n.contains("alpha")) nl.alpha = n.at("alpha").get<double>();
                        if (n.contains("affine_min")) nl.affine_min = n.at("affine_min").get<double>();
                        if (n.contains("affine_max")) nl.affine_max = n.at("affine_max").get<double>();
                        if (n.contains("identity")) nl.identity = n.at("identity").get<bool>();
                    }
                    if (j.contains("style_law")) {
                        const auto& s = j.at("style_law");
                        detail::reject_unknown_keys(s, {"mean_shift", "odd_scale"}, "style_law");
                        if (s.contains("mean_shift")) law.mean_shift = s.at("mean_shift").get<double>();
                        if (s.contains("odd_scale")) law.odd_scale = s.at("odd_scale").get<double>();
                    }
                } else {
                    throw ConfigError("make-world requires --config with a plan");
                }
                WorldSpec w = forge_world(plan, mw_xi, nl, mw_seed, law);
                save_world(mw_out, w);
                manifest.add_output(mw_out);
                manifest.set("xi", mw_xi);
                manifest.finalize(true);
            } catch (...) {
                manifest.finalize(false, "exception during make-world");
                throw;
            }
            return 0;
        }

        if (*colorize_cmd) {
            fs::create_directories(cd_out);
            RunManifest manifest(fs::path(cd_out) / "run_manifest.json", original_args, cd_seed);
            try {
                ColorizeConfig ccfg;
                ccfg.seed = cd_seed;
                if (!cd_config.empty()) {
                    std::ifstream in(cd_config);
                    if (!in) throw IoError("cannot read config: " + cd_config);
                    nlohmann::json j = nlohmann::json::parse(in);
                    detail::reject_unknown_keys(
                        j, {"p_digit", "p_bg", "bg_mask_threshold", "out_size"}, "colorize config");
                    if (j.contains("p_digit")) ccfg.p_digit = j.at("p_digit").get<double>();
                    if (j.contains("p_bg")) ccfg.p_bg = j.at("p_bg").get<double>();
                    if (j.contains("bg_mask_threshold"))
                        ccfg.bg_mask_threshold = j.at("bg_mask_threshold").get<double>();
                    if (j.contains("out_size")) ccfg.out_size = j.at("out_size").get<std::size_t>();
                }
                std::vector<LabeledImage> source;
                if (!cd_images.empty()) {
                    source = load_idx(cd_images, cd_labels, cd_limit);
                } else if (!cd_png_dir.empty()) {
                    // Filenames <label>_<anything>.png
                    std::vector<fs::path> files;
                    for (const auto& entry : fs::directory_iterator(cd_png_dir))
                        if (entry.path().extension() == ".png") files.push_back(entry.path());
                    std::sort(files.begin(), files.end());
                    for (const auto& f : files) {
                        LabeledImage img = read_png_gray(f.string());
                        const std::string name = f.filename().string();
                        if (name.empty() || !std::isdigit(static_cast<unsigned char>(name[0])))
                            throw IoError("png filename must start with the digit label: " + name);
                        img.label = name[0] - '0';
                        source.push_back(std::move(img));
                        if (cd_limit > 0 && source.size() >= cd_limit) break;
                    }
                } else {
                    throw ConfigError("colorize-dataset needs --images/--labels or --png-dir");
                }
                TwoDomainResult res = build_two_domain_set(source, ccfg, cd_out);
                manifest.set("images_per_domain", res.count_per_domain);
                manifest.add_output(cd_out);
                manifest.finalize(true);
            } catch (...) {
                manifest.finalize(false, "exception during colorize-dataset");
                throw;
            }
            return 0;
        }

        if (*train_cmd) {
            fs::create_directories(tr_out);
            ExperimentConfig cfg = load_config(tr_config);
            if (tr_seed_given) cfg.seed = tr_seed;
            if (tr_iters > 0) cfg.iters = tr_iters;
            if (tr_probes > 0) cfg.weights.probes_K = tr_probes;
            if (!tr_probe_kind.empty()) cfg.weights.probe_kind = parse_probe_kind(tr_probe_kind);
            if (tr_oracle) cfg.oracle_mode = true;
            RunManifest manifest(fs::path(tr_out) / "run_manifest.json", original_args, cfg.seed);
            manifest.set("config", config_to_json(cfg));
            manifest.set("config_hash", config_hash(cfg));
            try {
                std::unique_ptr<DataSource> source;
                WorldSpec world;
                if (!tr_world.empty()) {
                    world = load_world(tr_world);
                    if (!(world.plan.d == cfg.plan.d && world.plan.N == cfg.plan.N))
                        throw ConfigError("train: world plan does not match config plan");
                    source = std::make_unique<WorldSource>(world);
                } else if (!tr_dataset.empty()) {
                    auto mem = std::make_unique<MemorySource>();
                    mem->per_domain = load_dataset_rows(tr_dataset, cfg.plan.N, cfg.plan.d);
                    source = std::move(mem);
                } else {
                    throw ConfigError("train needs --world or --dataset");
                }
                Rng init(derive_seed(cfg.seed, 0));
                ModelBundle bundle = ModelBundle::init(cfg.plan, cfg.model, init);
                std::string metrics = (fs::path(tr_out) / "metrics.csv").string();
                TrainResult res = train(cfg, *source, std::move(bundle), tr_out, metrics);
                manifest.add_output(metrics);
                if (!res.final_checkpoint_path.empty())
                    manifest.add_output(res.final_checkpoint_path);
                manifest.set("train_status",
                             res.status == TrainStatus::completed ? "completed" : "diverged");
                manifest.set("skipped_steps", res.skipped_steps);
                manifest.finalize(true);
                return res.status == TrainStatus::completed ? 0 : 2;
            } catch (...) {
                manifest.finalize(false, "exception during train");
                throw;
            }
        }

        if (*report_cmd) {
            RunManifest manifest(jr_out + ".run_manifest.json", original_args, jr_seed);
            try {
                WorldSpec world = load_world(jr_world);
                std::unique_ptr<ModelBundle> bundle;
                if (!jr_checkpoint.empty())
                    bundle = std::make_unique<ModelBundle>(load_bundle(jr_checkpoint));
                nlohmann::json doc =
                    jacobian_report(world, bundle.get(), jr_points, jr_probes, 1e-8, jr_seed);
                std::ofstream out(jr_out);
                if (!out) throw IoError("cannot write " + jr_out);
                out << doc.dump(1) << '\n';
                manifest.add_output(jr_out);
                manifest.finalize(true);
            } catch (...) {
                manifest.finalize(false, "exception during jacobian-report");
                throw;
            }
            return 0;
        }

        if (*eval_cmd) {
            RunManifest manifest(ev_out + ".run_manifest.json", original_args, ev_seed);
            try {
                WorldSpec world = load_world(ev_world);
                ModelBundle bundle = load_bundle(ev_checkpoint);
                DisentanglementConfig dcfg;
                dcfg.n_samples = ev_samples;
                dcfg.eval_seed = derive_seed(ev_seed, 0x77);
                R2Report rep = disentanglement_report(bundle, world, dcfg);
                double m = mean_domain_mmd(bundle, world, ev_mmd, derive_seed(ev_seed, 0x78));
                nlohmann::json j;
                j["r2_content"] = rep.r2_content;
                j["r2_style_per_domain"] = rep.r2_style_per_domain;
                j["r2_style_mean"] = rep.r2_style_mean;
                j["reliable"] = rep.reliable;
                j["inversion_failure_rate"] = rep.inversion_failure_rate;
                j["mmd_mean"] = m;
                std::ofstream out(ev_out);
                if (!out) throw IoError("cannot write " + ev_out);
                out << j.dump(1) << '\n';
                manifest.add_output(ev_out);
                manifest.finalize(true);
            } catch (...) {
                manifest.finalize(false, "exception during eval");
                throw;
            }
            return 0;
        }

        if (*sweep_cmd) {
            fs::create_directories(sw_out);
            ExperimentConfig cfg = load_config(sw_config);
            RunManifest manifest(fs::path(sw_out) / "run_manifest.json", original_args, cfg.seed);
            manifest.set("config_hash", config_hash(cfg));
            try {
                WorldSpec world = load_world(sw_world);
                SweepOptions opts;
                opts.jobs = sw_jobs;
                SweepResult res = sweep(cfg, world, sw_param, sw_values, sw_repeats, opts);
                std::ofstream csv(fs::path(sw_out) / "sweep.csv");
                csv << "param,value,repeat,completed,mmd_mean,r2_content,r2_style,orth_exact_mean,"
                       "config_hash\n";
                for (const auto& r : res.runs)
                    csv << res.swept_param << ',' << r.value << ',' << r.repeat << ','
                        << (r.completed ? 1 : 0) << ',' << r.mmd_mean << ',' << r.r2_content << ','
                        << r.r2_style << ',' << r.orth_exact_mean << ',' << r.config_hash << '\n';
                manifest.add_output((fs::path(sw_out) / "sweep.csv").string());
                manifest.finalize(true);
            } catch (...) {
                manifest.finalize(false, "exception during sweep");
                throw;
            }
            return 0;
        }

        if (*study_cmd) {
            RunManifest manifest(st_out + ".run_manifest.json", original_args, st_seed);
            try {
                auto corpus = random_pair_corpus(st_pairs, st_d, st_dc, st_ds, st_seed);
                std::vector<ProbeKind> kinds;
                for (const auto& k : st_kinds) kinds.push_back(parse_probe_kind(k));
                auto rows = estimator_error_study(corpus, st_K, kinds, st_trials, 1e-8,
                                                  derive_seed(st_seed, 0x99));
                std::ofstream csv(st_out);
                if (!csv) throw IoError("cannot write " + st_out);
                csv << "kind,K,median_rel_error,p90_rel_error\n";
                for (const auto& r : rows)
                    csv << probe_kind_name(r.kind) << ',' << r.K << ',' << r.median_rel_error << ','
                        << r.p90_rel_error << '\n';
                manifest.add_output(st_out);
                manifest.finalize(true);
            } catch (...) {
                manifest.finalize(false, "exception during estimator-study");
                throw;
            }
            return 0;
        }

        if (*invert_cmd) {
            RunManifest manifest(in_out + ".run_manifest.json", original_args, in_seed);
            try {
                ModelBundle bundle = load_bundle(in_checkpoint);
                std::ifstream in(in_input);
                if (!in) throw IoError("cannot read " + in_input);
                nlohmann::json j = nlohmann::json::parse(in);
                Tensor x = tensor_from_rows_json(j.at("x"));
                int domain = j.at("domain").get<int>();
                InversionConfig icfg;
                icfg.steps = in_steps;
                icfg.restarts = in_restarts;
                Rng rng(derive_seed(in_seed, 0x21));
                InversionResult res = invert_with_restarts(bundle, x, domain, icfg, rng);
                nlohmann::json out_doc;
                out_doc["c_hat"] = tensor_rows_to_json(res.c_hat);
                out_doc["s_hat"] = tensor_rows_to_json(res.s_hat);
                out_doc["divergence"] = res.divergence;
                std::ofstream out(in_out);
                if (!out) throw IoError("cannot write " + in_out);
                out << out_doc.dump(1) << '\n';
                manifest.add_output(in_out);
                manifest.finalize(true);
            } catch (...) {
                manifest.finalize(false, "exception during invert");
                throw;
            }
            return 0;
        }

        if (*translate_cmd) {
            RunManifest manifest(tl_out + ".run_manifest.json", original_args, tl_seed);
            try {
                ModelBundle bundle = load_bundle(tl_checkpoint);
                auto load_rows = [](const std::string& path) {
                    std::ifstream in(path);
                    if (!in) throw IoError("cannot read " + path);
                    nlohmann::json j = nlohmann::json::parse(in);
                    return tensor_from_rows_json(j.at("x"));
                };
                Tensor src = load_rows(tl_source);
                Tensor ref = load_rows(tl_ref);
                InversionConfig icfg;
                icfg.steps = tl_steps;
                Rng rng(derive_seed(tl_seed, 0x22));
                Tensor out_x =
                    translate(bundle, src, tl_source_domain, ref, tl_target_domain, icfg, rng);
                nlohmann::json out_doc;
                out_doc["x"] = tensor_rows_to_json(out_x);
                out_doc["target_domain"] = tl_target_domain;
                std::ofstream out(tl_out);
                if (!out) throw IoError("cannot write " + tl_out);
                out << out_doc.dump(1) << '\n';
                manifest.add_output(tl_out);
                manifest.finalize(true);
            } catch (...) {
                manifest.finalize(false, "exception during translate");
                throw;
            }
            return 0;
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 1;
}

}  // namespace csdi::cli
