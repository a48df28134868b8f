#include "slap/synth.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <set>
#include <vector>

#include "slap/dsp.hpp"
#include "slap/error.hpp"
#include "slap/rng.hpp"

namespace slap::synth {

namespace {

constexpr double kPitches[4] = {220.0, 440.0, 880.0, 1760.0};
const char* kNames[4] = {"low", "mid", "high", "very high"};

std::string caption_for(const std::vector<int>& tones) {
    std::string s;
    for (std::size_t i = 0; i < tones.size(); ++i) {
        s += i == 0 ? "a " : " then a ";
        s += kNames[tones[i]];
        s += " tone";
    }
    return s;
}

void append_tone(std::vector<float>& samples, double freq, double dur_s, double amp) {
    const auto n = static_cast<std::size_t>(std::llround(dur_s * dsp::kSampleRate));
    const auto fade = static_cast<std::size_t>(dsp::kSampleRate / 100); // 10 ms
    const double w = 2.0 * std::numbers::pi * freq / dsp::kSampleRate;
    for (std::size_t i = 0; i < n; ++i) {
        double env = 1.0;
        if (i < fade) env = static_cast<double>(i) / static_cast<double>(fade);
        if (n - 1 - i < fade) env = std::min(env, static_cast<double>(n - 1 - i) / static_cast<double>(fade));
        samples.push_back(static_cast<float>(amp * env * std::sin(w * static_cast<double>(i))));
    }
}

} // namespace

io::Manifest generate(const SynthParams& p, const std::string& out_dir) {
    if (p.pairs == 0) throw Error::config("synth: pairs must be positive");
    if (p.min_tones < 1 || p.max_tones < p.min_tones) throw Error::config("synth: bad tone count range");
    if (!(p.tone_s_min > 0.0) || p.tone_s_max < p.tone_s_min) {
        throw Error::config("synth: bad tone duration range");
    }
    double capacity = 0.0;
    for (std::size_t l = p.min_tones; l <= p.max_tones; ++l) capacity += std::pow(4.0, static_cast<double>(l));
    if (static_cast<double>(p.pairs) > capacity) {
        throw Error::config("synth: only " + std::to_string(static_cast<long long>(capacity)) +
                            " distinct tone sequences available");
    }

    std::filesystem::create_directories(out_dir);
    io::Manifest m;
    m.base_dir = out_dir;
    std::set<std::vector<int>> used;
    for (std::size_t i = 0; i < p.pairs; ++i) {
        std::vector<int> tones;
        std::uint64_t attempt = 0;
        Rng rng(0);
        for (;; ++attempt) {
            if (attempt > 100000) throw Error::data("synth: rejection sampling stalled");
            rng = derive_rng(p.seed, "synth", i, attempt);
            const auto n = static_cast<std::size_t>(
                rng.uniform_int(static_cast<std::int64_t>(p.min_tones), static_cast<std::int64_t>(p.max_tones)));
            tones.assign(n, 0);
            for (auto& t : tones) t = static_cast<int>(rng.uniform_int(0, 3));
            if (used.insert(tones).second) break;
        }

        std::vector<float> samples;
        for (int t : tones) {
            append_tone(samples, kPitches[t], rng.uniform(p.tone_s_min, p.tone_s_max), p.amplitude);
        }

        char name[32];
        std::snprintf(name, sizeof(name), "pair-%04zu", i);
        dsp::Waveform w;
        w.samples = std::move(samples);
        w.sample_rate = dsp::kSampleRate;
        dsp::write_wav((std::filesystem::path(out_dir) / (std::string(name) + ".wav")).string(), w);

        io::ManifestRecord rec;
        rec.id = name;
        rec.audio_path = std::string(name) + ".wav";
        rec.caption = caption_for(tones);
        rec.duration_s = static_cast<double>(w.samples.size()) / dsp::kSampleRate;
        m.records.push_back(std::move(rec));
    }
    io::write_manifest(m, (std::filesystem::path(out_dir) / "manifest.jsonl").string());
    return m;
}

} // namespace slap::synth
