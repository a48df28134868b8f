#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

namespace slap {

struct AudioEncoderConfig {
    std::size_t n_layers = 6;
    std::size_t n_heads = 4;
    std::size_t hidden = 64;
    std::size_t ffn = 256;
    std::size_t window_half = 12; // half-width in packed token order
    std::string pattern = "llgllg"; // per layer: 'l' sliding window, 'g' global
    static constexpr std::size_t patch_dim = 256;
};

struct TextEncoderConfig {
    std::size_t n_layers = 2;
    std::size_t n_heads = 4;
    std::size_t hidden = 64;
    std::size_t ffn = 256;
    std::size_t max_len = 128;
    static constexpr std::size_t vocab = 259; // 256 bytes + PAD 256, BOS 257, EOS 258
};

struct DecoderConfig {
    std::size_t n_layers = 2;
    std::size_t n_heads = 2;
    std::size_t hidden = 64;
    std::size_t ffn = 256;
    std::size_t max_len = 128;
    static constexpr std::size_t vocab = 259;
};

struct ProtoConfig {
    std::size_t k = 64;        // prototype count
    std::size_t p_dim = 64;    // prototype space dim
    std::size_t mlp_hidden = 256;
    double t_student = 0.1;
    double t_teacher = 0.04;
    double center_momentum = 0.9;
};

struct ModelConfig {
    AudioEncoderConfig audio;
    TextEncoderConfig text;
    DecoderConfig decoder;
    ProtoConfig proto;
    std::size_t embed_dim = 64; // shared audio/text embedding dim D

    static ModelConfig desk();
    static ModelConfig paper_scale();
};

struct TrainConfig {
    std::size_t batch_size = 32;
    std::size_t steps = 1000;
    std::size_t warmup_steps = 100;
    double lr_peak = 1e-4;
    std::string lr_schedule = "constant"; // post-warmup: "constant" | "cosine"
    double mask_ratio = 0.5;
    double alpha = 1.0;
    double beta = 1.0;
    double gamma = 0.5;
    double tau_init = 0.07;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double weight_decay = 0.01;
    double grad_clip = 1.0;
    double ema_start = 0.994;
    double ema_end = 1.0;
    std::uint64_t seed = 1;
    std::size_t checkpoint_every = 500;
    bool share_student_pass = false; // reuse the masked forward for CLAP/captioning
    bool spec_augment = false;
};

struct RunConfig {
    ModelConfig model;
    TrainConfig train;
};

// throws Error::config on inconsistent dimensions/pattern
void validate(const ModelConfig& m);

RunConfig load_config(const std::string& path);
RunConfig parse_config_json(const std::string& text);

// canonical serialization of the architecture; digest guards checkpoints
std::string model_config_json(const ModelConfig& m);
ModelConfig model_config_from_json(const std::string& text);
std::uint64_t config_digest(const ModelConfig& m);

} // namespace slap
