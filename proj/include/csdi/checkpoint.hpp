#pragma once

// Versioned JSON checkpoints: dimension plan, every parameter tensor by name
// with exact (hex-encoded) values, optimizer state, RNG state, iteration
// counter. save -> load -> save is byte-identical.

#include <fstream>
#include <json.hpp>
#include <string>
#include <vector>

#include "csdi/model.hpp"
#include "csdi/optim.hpp"
#include "csdi/rng.hpp"

namespace csdi {

inline constexpr int kCheckpointVersion = 1;

inline nlohmann::json plan_to_json(const DimensionPlan& p) {
    return {{"d", p.d},     {"d_C", p.d_C},   {"d_S", p.d_S}, {"d_C1", p.d_C1},
            {"d_C2", p.d_C2}, {"d_S1", p.d_S1}, {"N", p.N}};
}

inline DimensionPlan plan_from_json(const nlohmann::json& j) {
    DimensionPlan p;
    p.d = j.at("d").get<std::size_t>();
    p.d_C = j.at("d_C").get<std::size_t>();
    p.d_S = j.at("d_S").get<std::size_t>();
    p.d_C1 = j.at("d_C1").get<std::size_t>();
    p.d_C2 = j.at("d_C2").get<std::size_t>();
    p.d_S1 = j.at("d_S1").get<std::size_t>();
    p.N = j.at("N").get<std::size_t>();
    p.validate();
    return p;
}

inline nlohmann::json shape_to_json(const ModelShape& s) {
    return {{"enc_width", s.enc_width},   {"enc_hidden", s.enc_hidden},
            {"gen_width", s.gen_width},   {"gen_hidden", s.gen_hidden},
            {"disc_width", s.disc_width}, {"disc_hidden", s.disc_hidden},
            {"gen_output_scale", s.gen_output_scale}};
}

inline ModelShape shape_from_json(const nlohmann::json& j) {
    ModelShape s;
    s.enc_width = j.at("enc_width").get<std::size_t>();
    s.enc_hidden = j.at("enc_hidden").get<std::size_t>();
    s.gen_width = j.at("gen_width").get<std::size_t>();
    s.gen_hidden = j.at("gen_hidden").get<std::size_t>();
    s.disc_width = j.at("disc_width").get<std::size_t>();
    s.disc_hidden = j.at("disc_hidden").get<std::size_t>();
    s.gen_output_scale = j.at("gen_output_scale").get<double>();
    return s;
}

inline nlohmann::json tensor_to_json(const Tensor& t) {
    return {{"shape", t.shape}, {"hex", doubles_to_hex(t.v)}};
}

inline Tensor tensor_from_json(const nlohmann::json& j) {
    Tensor t;
    t.shape = j.at("shape").get<std::vector<std::size_t>>();
    t.v = hex_to_doubles(j.at("hex").get<std::string>());
    std::size_t expect = 1;
    for (std::size_t e : t.shape) expect *= e;
    if (expect != t.v.size()) throw IoError("tensor payload does not match shape");
    return t;
}

struct Checkpoint {
    ModelBundle model;
    AdamState opt_generator;
    AdamState opt_disc;
    std::string rng_state;
    std::uint64_t iteration = 0;
};

inline nlohmann::json adam_state_to_json(const AdamState& st) {
    nlohmann::json slots = nlohmann::json::array();
    for (const auto& s : st.slots)
        slots.push_back({{"m", tensor_to_json(s.m)}, {"v", tensor_to_json(s.v)}});
    return {{"slots", slots}, {"step", st.step}, {"skipped", st.skipped}};
}

inline AdamState adam_state_from_json(const nlohmann::json& j) {
    AdamState st;
    for (const auto& s : j.at("slots")) {
        AdamSlot slot;
        slot.m = tensor_from_json(s.at("m"));
        slot.v = tensor_from_json(s.at("v"));
        st.slots.push_back(std::move(slot));
    }
    st.step = j.at("step").get<std::uint64_t>();
    st.skipped = j.at("skipped").get<std::uint64_t>();
    return st;
}

inline void save_checkpoint(const std::string& path, Checkpoint& ckpt) {
    nlohmann::json j;
    j["version"] = kCheckpointVersion;
    j["plan"] = plan_to_json(ckpt.model.plan);
    j["shape"] = shape_to_json(ckpt.model.shape);
    j["iteration"] = ckpt.iteration;
    j["rng_state"] = ckpt.rng_state;
    nlohmann::json params = nlohmann::json::array();
    for (const auto& p : ckpt.model.params())
        params.push_back({{"name", p.name}, {"tensor", tensor_to_json(*p.tensor)}});
    j["params"] = params;
    j["opt_generator"] = adam_state_to_json(ckpt.opt_generator);
    j["opt_disc"] = adam_state_to_json(ckpt.opt_disc);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint: " + path);
    out << j.dump(1) << '\n';
}

inline Checkpoint load_checkpoint(const std::string& path, Rng& init_rng_for_shape) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read checkpoint: " + path);
    nlohmann::json j = nlohmann::json::parse(in);
    if (j.at("version").get<int>() != kCheckpointVersion)
        throw IoError("checkpoint version mismatch");
    Checkpoint ckpt;
    DimensionPlan plan = plan_from_json(j.at("plan"));
    ModelShape shape = shape_from_json(j.at("shape"));
    ckpt.model = ModelBundle::init(plan, shape, init_rng_for_shape);
    auto registry = ckpt.model.params();
    const auto& params = j.at("params");
    if (params.size() != registry.size()) throw IoError("checkpoint parameter count mismatch");
    for (std::size_t i = 0; i < registry.size(); ++i) {
        const auto& entry = params[i];
        if (entry.at("name").get<std::string>() != registry[i].name)
            throw IoError("checkpoint parameter order mismatch at " + registry[i].name);
        Tensor t = tensor_from_json(entry.at("tensor"));
        if (!(t.shape == registry[i].tensor->shape))
            throw IoError("checkpoint parameter shape mismatch at " + registry[i].name);
        *registry[i].tensor = std::move(t);
    }
    ckpt.opt_generator = adam_state_from_json(j.at("opt_generator"));
    ckpt.opt_disc = adam_state_from_json(j.at("opt_disc"));
    ckpt.rng_state = j.at("rng_state").get<std::string>();
    ckpt.iteration = j.at("iteration").get<std::uint64_t>();
    return ckpt;
}

}  // namespace csdi
