#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

#include "slap/manifest.hpp"

namespace slap::synth {

struct SynthParams {
    std::size_t pairs = 16;
    std::uint64_t seed = 1;
    std::size_t min_tones = 1;
    std::size_t max_tones = 4;
    double tone_s_min = 1.0; // per-tone duration range; clips land in [1, 8] s
    double tone_s_max = 2.0;
    double amplitude = 0.3;
};

// Writes <out_dir>/pair-NNNN.wav plus manifest.jsonl. Each clip is a sequence
// of pure tones (low/mid/high/very high); the caption names the sequence, so
// audio↔text correspondence is bijective. Deterministic per seed.
io::Manifest generate(const SynthParams& p, const std::string& out_dir);

} // namespace slap::synth
