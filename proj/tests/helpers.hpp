#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "slap/config.hpp"
#include "slap/dsp.hpp"
#include "slap/rng.hpp"
#include "slap/tensor.hpp"

namespace testutil {

template <typename T>
slap::nn::TensorData<T> randn(slap::Rng& rng, std::size_t r, std::size_t c, double sd = 1.0) {
    slap::nn::TensorData<T> t(r, c);
    for (auto& x : t.v) x = static_cast<T>(rng.normal() * sd);
    return t;
}

inline slap::dsp::PatchSeq random_seq(slap::Rng& rng, std::size_t n_time) {
    slap::dsp::PatchSeq s;
    s.n_time = n_time;
    s.n_freq = slap::dsp::kNumMels / slap::dsp::kPatch;
    s.patches.resize(n_time * s.n_freq * 256);
    for (auto& x : s.patches) x = static_cast<float>(rng.normal());
    for (std::size_t t = 0; t < n_time; ++t) {
        for (std::size_t f = 0; f < s.n_freq; ++f) {
            s.coords.emplace_back(static_cast<int>(t), static_cast<int>(f));
        }
    }
    return s;
}

// 2-layer miniature of the full architecture, cheap enough for FD oracles
inline slap::ModelConfig tiny_model() {
    slap::ModelConfig cfg;
    cfg.audio = {2, 2, 8, 16, 2, "lg"};
    cfg.text = {1, 2, 8, 16, 32};
    cfg.decoder = {1, 2, 8, 16, 32};
    cfg.proto = {4, 8, 16, 0.1, 0.04, 0.9};
    cfg.embed_dim = 8;
    return cfg;
}

class TempDir {
public:
    explicit TempDir(const std::string& stem) {
        path_ = std::filesystem::temp_directory_path() / ("slap-test-" + stem);
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() { std::filesystem::remove_all(path_); }
    std::string str() const { return path_.string(); }
    std::string file(const std::string& name) const { return (path_ / name).string(); }

private:
    std::filesystem::path path_;
};

} // namespace testutil
