#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "slap/rng.hpp"

namespace slap::dsp {

constexpr int kSampleRate = 16000;
constexpr int kWinSamples = 400; // 25 ms
constexpr int kHopSamples = 160; // 10 ms
constexpr int kNumMels = 64;
constexpr int kPatch = 16;
constexpr double kLogFloor = 1e-10;

struct Waveform {
    std::vector<float> samples; // mono, [-1, 1]
    int sample_rate = kSampleRate;
};

// Row-major T x 64 log-mel energies.
struct MelSpec {
    std::size_t n_frames = 0;
    std::size_t n_mels = kNumMels;
    std::vector<float> values;

    float& at(std::size_t t, std::size_t f) { return values[t * n_mels + f]; }
    float at(std::size_t t, std::size_t f) const { return values[t * n_mels + f]; }
};

// Non-overlapping 16x16 patches in time->frequency order; patch p sits at
// (t_idx, f_idx) with p == t_idx * n_freq + f_idx. Each patch stores its 256
// values frame-major (16 frames x 16 bins).
struct PatchSeq {
    std::size_t n_time = 0;
    std::size_t n_freq = 0;
    std::vector<float> patches;                  // (n_time*n_freq) x 256, row-major
    std::vector<std::pair<int, int>> coords;     // per patch (t_idx, f_idx)

    std::size_t size() const { return coords.size(); }
    const float* patch(std::size_t p) const { return patches.data() + p * kPatch * kPatch; }
};

struct SpecAugmentParams {
    int n_freq_masks = 2;
    int max_freq_width = 8; // bins, width drawn uniformly from [0, max]
    int n_time_masks = 2;
    int max_time_width = 32; // frames
};

struct AppliedMask {
    bool is_freq = false;
    std::size_t start = 0;
    std::size_t width = 0; // after clipping to bounds
};

// 16-bit PCM RIFF/WAVE reader; mono or stereo (averaged), any input rate,
// linear-interpolation resample to 16 kHz.
Waveform load_wav(const std::string& path);

// Mono 16-bit PCM writer at the waveform's sample rate.
void write_wav(const std::string& path, const Waveform& w);

std::vector<float> resample_linear(const std::vector<float>& in, int rate_in, int rate_out);

// Hann-windowed frames, 512-point FFT, 64 triangular HTK-mel filters,
// natural log with a 1e-10 floor. No center padding: T = 1 + (N-400)/160.
MelSpec mel_spectrogram(const Waveform& w);

std::size_t mel_frame_count(std::size_t n_samples);

// Up to `n_*_masks` frequency/time stripes forced to the log floor. Masks are
// clipped at the spectrogram edge; `applied` (optional) reports the stripes
// actually drawn so callers can replay them.
MelSpec spec_augment(const MelSpec& m, Rng& rng, const SpecAugmentParams& params = {},
                     std::vector<AppliedMask>* applied = nullptr);

// Trailing frames that do not fill a 16-frame patch are dropped.
PatchSeq patchify(const MelSpec& m);

// Inverse of patchify over the kept frames (n_time*16 of them).
MelSpec unpatchify(const PatchSeq& p);

} // namespace slap::dsp
