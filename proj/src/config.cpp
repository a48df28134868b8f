#include "slap/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "slap/error.hpp"
#include "slap/rng.hpp"

namespace slap {

using json = nlohmann::ordered_json;

namespace {

std::string default_pattern(std::size_t n_layers) {
    static const char cycle[3] = {'l', 'l', 'g'};
    std::string p;
    for (std::size_t i = 0; i < n_layers; ++i) p.push_back(cycle[i % 3]);
    return p;
}

void require_keys(const json& j, const std::set<std::string>& allowed, const char* where) {
    if (!j.is_object()) throw Error::config(std::string(where) + ": expected a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (!allowed.count(it.key())) {
            throw Error::config(std::string(where) + ": unknown key '" + it.key() + "'");
        }
    }
}

template <typename T>
void get_to(const json& j, const char* key, T& out) {
    if (auto it = j.find(key); it != j.end()) it->get_to(out);
}

} // namespace

ModelConfig ModelConfig::desk() { return ModelConfig{}; }

ModelConfig ModelConfig::paper_scale() {
    ModelConfig m;
    m.audio = {12, 12, 768, 3072, 12, default_pattern(12)};
    m.text = {22, 12, 768, 3072, 256};
    m.decoder = {8, 8, 512, 2048, 256};
    m.proto = {4096, 256, 2048, 0.1, 0.04, 0.9};
    m.embed_dim = 512;
    return m;
}

void validate(const ModelConfig& m) {
    auto tower = [](const char* name, std::size_t layers, std::size_t heads, std::size_t hidden) {
        if (layers == 0 || heads == 0 || hidden == 0) {
            throw Error::config(std::string(name) + ": zero-sized dimension");
        }
        if (hidden % heads != 0) {
            throw Error::config(std::string(name) + ": hidden not divisible by n_heads");
        }
        if ((hidden / heads) % 4 != 0) {
            throw Error::config(std::string(name) + ": head_dim must be divisible by 4");
        }
    };
    tower("audio", m.audio.n_layers, m.audio.n_heads, m.audio.hidden);
    tower("text", m.text.n_layers, m.text.n_heads, m.text.hidden);
    tower("decoder", m.decoder.n_layers, m.decoder.n_heads, m.decoder.hidden);
    if (m.audio.pattern.size() != m.audio.n_layers) {
        throw Error::config("audio: pattern length != n_layers");
    }
    for (char c : m.audio.pattern) {
        if (c != 'l' && c != 'g') throw Error::config("audio: pattern chars must be 'l' or 'g'");
    }
    if (m.audio.pattern.find('l') != std::string::npos && m.audio.window_half == 0) {
        throw Error::config("audio: local blocks need window_half >= 1");
    }
    if (m.embed_dim == 0 || m.proto.k < 2 || m.proto.p_dim == 0 || m.proto.mlp_hidden == 0) {
        throw Error::config("embed_dim/proto dimensions must be positive (k >= 2)");
    }
    if (m.proto.t_student <= 0 || m.proto.t_teacher <= 0) {
        throw Error::config("proto temperatures must be positive");
    }
    if (m.proto.center_momentum < 0 || m.proto.center_momentum >= 1) {
        throw Error::config("proto center_momentum must be in [0, 1)");
    }
    if (m.text.max_len < 2 || m.decoder.max_len < 2) {
        throw Error::config("max_len must admit BOS+EOS");
    }
}

namespace {

void parse_audio(const json& j, AudioEncoderConfig& a) {
    require_keys(j, {"n_layers", "n_heads", "hidden", "ffn", "window_half", "pattern"}, "model.audio");
    get_to(j, "n_layers", a.n_layers);
    get_to(j, "n_heads", a.n_heads);
    get_to(j, "hidden", a.hidden);
    get_to(j, "ffn", a.ffn);
    get_to(j, "window_half", a.window_half);
    if (j.contains("pattern")) {
        j.at("pattern").get_to(a.pattern);
    } else {
        a.pattern = default_pattern(a.n_layers);
    }
}

void parse_text(const json& j, TextEncoderConfig& t) {
    require_keys(j, {"n_layers", "n_heads", "hidden", "ffn", "max_len"}, "model.text");
    get_to(j, "n_layers", t.n_layers);
    get_to(j, "n_heads", t.n_heads);
    get_to(j, "hidden", t.hidden);
    get_to(j, "ffn", t.ffn);
    get_to(j, "max_len", t.max_len);
}

void parse_decoder(const json& j, DecoderConfig& d) {
    require_keys(j, {"n_layers", "n_heads", "hidden", "ffn", "max_len"}, "model.decoder");
    get_to(j, "n_layers", d.n_layers);
    get_to(j, "n_heads", d.n_heads);
    get_to(j, "hidden", d.hidden);
    get_to(j, "ffn", d.ffn);
    get_to(j, "max_len", d.max_len);
}

void parse_proto(const json& j, ProtoConfig& p) {
    require_keys(j, {"k", "p_dim", "mlp_hidden", "t_student", "t_teacher", "center_momentum"},
                 "model.proto");
    get_to(j, "k", p.k);
    get_to(j, "p_dim", p.p_dim);
    get_to(j, "mlp_hidden", p.mlp_hidden);
    get_to(j, "t_student", p.t_student);
    get_to(j, "t_teacher", p.t_teacher);
    get_to(j, "center_momentum", p.center_momentum);
}

ModelConfig parse_model(const json& j) {
    require_keys(j, {"preset", "audio", "text", "decoder", "proto", "embed_dim"}, "model");
    ModelConfig m;
    if (j.contains("preset")) {
        const auto preset = j.at("preset").get<std::string>();
        if (preset == "desk") {
            m = ModelConfig::desk();
        } else if (preset == "paper") {
            m = ModelConfig::paper_scale();
        } else {
            throw Error::config("model.preset: expected 'desk' or 'paper'");
        }
    }
    if (j.contains("audio")) parse_audio(j.at("audio"), m.audio);
    if (j.contains("text")) parse_text(j.at("text"), m.text);
    if (j.contains("decoder")) parse_decoder(j.at("decoder"), m.decoder);
    if (j.contains("proto")) parse_proto(j.at("proto"), m.proto);
    get_to(j, "embed_dim", m.embed_dim);
    validate(m);
    return m;
}

TrainConfig parse_train(const json& j) {
    require_keys(j,
                 {"batch_size", "steps", "warmup_steps", "lr_peak", "lr_schedule", "mask_ratio",
                  "alpha", "beta", "gamma", "tau_init", "beta1", "beta2", "weight_decay",
                  "grad_clip", "ema_start", "ema_end", "seed", "checkpoint_every",
                  "share_student_pass", "spec_augment"},
                 "train");
    TrainConfig t;
    get_to(j, "batch_size", t.batch_size);
    get_to(j, "steps", t.steps);
    get_to(j, "warmup_steps", t.warmup_steps);
    get_to(j, "lr_peak", t.lr_peak);
    get_to(j, "lr_schedule", t.lr_schedule);
    get_to(j, "mask_ratio", t.mask_ratio);
    get_to(j, "alpha", t.alpha);
    get_to(j, "beta", t.beta);
    get_to(j, "gamma", t.gamma);
    get_to(j, "tau_init", t.tau_init);
    get_to(j, "beta1", t.beta1);
    get_to(j, "beta2", t.beta2);
    get_to(j, "weight_decay", t.weight_decay);
    get_to(j, "grad_clip", t.grad_clip);
    get_to(j, "ema_start", t.ema_start);
    get_to(j, "ema_end", t.ema_end);
    get_to(j, "seed", t.seed);
    get_to(j, "checkpoint_every", t.checkpoint_every);
    get_to(j, "share_student_pass", t.share_student_pass);
    get_to(j, "spec_augment", t.spec_augment);
    if (t.batch_size == 0) throw Error::config("train.batch_size must be positive");
    if (t.lr_schedule != "constant" && t.lr_schedule != "cosine") {
        throw Error::config("train.lr_schedule: expected 'constant' or 'cosine'");
    }
    if (t.mask_ratio < 0 || t.mask_ratio > 1) throw Error::config("train.mask_ratio in [0,1]");
    if (t.alpha < 0 || t.beta < 0 || t.gamma < 0) throw Error::config("loss weights must be >= 0");
    if (t.tau_init < 0.005 || t.tau_init > 1.0) throw Error::config("train.tau_init in [0.005, 1.0]");
    if (!(t.ema_start >= 0 && t.ema_start <= t.ema_end && t.ema_end <= 1.0)) {
        throw Error::config("ema momentum: need 0 <= start <= end <= 1");
    }
    return t;
}

} // namespace

RunConfig parse_config_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const std::exception& e) {
        throw Error::config(std::string("config parse: ") + e.what());
    }
    require_keys(j, {"model", "train"}, "config");
    RunConfig rc;
    if (j.contains("model")) rc.model = parse_model(j.at("model"));
    if (j.contains("train")) rc.train = parse_train(j.at("train"));
    validate(rc.model);
    return rc;
}

RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error::io("cannot open config file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config_json(ss.str());
}

std::string model_config_json(const ModelConfig& m) {
    json j;
    j["audio"] = {{"n_layers", m.audio.n_layers}, {"n_heads", m.audio.n_heads},
                  {"hidden", m.audio.hidden},     {"ffn", m.audio.ffn},
                  {"window_half", m.audio.window_half}, {"pattern", m.audio.pattern}};
    j["text"] = {{"n_layers", m.text.n_layers}, {"n_heads", m.text.n_heads},
                 {"hidden", m.text.hidden},     {"ffn", m.text.ffn},
                 {"max_len", m.text.max_len}};
    j["decoder"] = {{"n_layers", m.decoder.n_layers}, {"n_heads", m.decoder.n_heads},
                    {"hidden", m.decoder.hidden},     {"ffn", m.decoder.ffn},
                    {"max_len", m.decoder.max_len}};
    j["proto"] = {{"k", m.proto.k},           {"p_dim", m.proto.p_dim},
                  {"mlp_hidden", m.proto.mlp_hidden}, {"t_student", m.proto.t_student},
                  {"t_teacher", m.proto.t_teacher},   {"center_momentum", m.proto.center_momentum}};
    j["embed_dim"] = m.embed_dim;
    return j.dump();
}

ModelConfig model_config_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const std::exception& e) {
        throw Error::config(std::string("embedded model config parse: ") + e.what());
    }
    ModelConfig m;
    parse_audio(j.at("audio"), m.audio);
    parse_text(j.at("text"), m.text);
    parse_decoder(j.at("decoder"), m.decoder);
    parse_proto(j.at("proto"), m.proto);
    j.at("embed_dim").get_to(m.embed_dim);
    validate(m);
    return m;
}

std::uint64_t config_digest(const ModelConfig& m) {
    const std::string s = model_config_json(m);
    std::uint64_t h = 1469598103934665603ull; // FNV-1a
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

} // namespace slap
