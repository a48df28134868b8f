#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "slap/config.hpp"
#include "slap/dsp.hpp"
#include "slap/manifest.hpp"
#include "slap/model.hpp"
#include "slap/tensor.hpp"

namespace slap::train {

struct AdamState {
    nn::TensorData<float> m;
    nn::TensorData<float> v;
};

struct TrainState {
    ModelConfig mcfg;
    model::ModelWeights<float> student;
    model::TeacherWeights<float> teacher;
    std::unordered_map<std::string, AdamState> opt;
    nn::TensorData<float> center; // 1×K prototype-logit center
    std::uint64_t step = 0;
};

TrainState init_state(const ModelConfig& mcfg, std::uint64_t seed);

// lr_peak·min(1, step/warmup); post-warmup constant or cosine to zero at cfg.steps
double lr_at(std::uint64_t step, const TrainConfig& cfg);

struct StepMetrics {
    std::uint64_t step = 0;
    double l_clap = 0.0;
    double l_ssl = 0.0;
    double l_cap = 0.0;
    double total = 0.0;
    double lr = 0.0;
    double m = 0.0;
    double grad_norm = 0.0; // pre-clip global norm
    double tau = 0.0;
    bool ssl_empty = false; // zero masked tokens this step

    std::string to_json_line() const;
};

struct Batch {
    std::vector<dsp::PatchSeq> audio;
    std::vector<std::string> captions; // raw text; towers tokenize per their max_len
};

StepMetrics train_step(TrainState& state, const TrainConfig& cfg, const Batch& batch);

struct FitResult {
    std::string final_checkpoint;
    std::vector<StepMetrics> metrics;
    std::vector<std::string> notes; // e.g. zero-weight components running gradient-free
};

// Epoch loop with seeded shuffling, periodic checkpoints, metric log lines in
// out_dir/metrics.jsonl. Resumable: pass a checkpoint path to continue.
FitResult fit(const RunConfig& cfg, const io::Manifest& manifest, const std::string& out_dir,
              const std::string& resume_from = "");

} // namespace slap::train
