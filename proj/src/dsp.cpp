#include "slap/dsp.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "slap/error.hpp"

namespace slap::dsp {

namespace {

constexpr int kFftSize = 512; // 400-sample window zero-padded
constexpr int kFftBins = kFftSize / 2 + 1;

std::uint32_t read_u32(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::uint16_t read_u16(const unsigned char* p) {
    return static_cast<std::uint16_t>(p[0]) | (static_cast<std::uint16_t>(p[1]) << 8);
}

// In-place iterative radix-2 FFT, n a power of two.
void fft_inplace(std::vector<std::complex<double>>& a) {
    const std::size_t n = a.size();
    for (std::size_t i = 1, j = 0; i < n; ++i) {
        std::size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    for (std::size_t len = 2; len <= n; len <<= 1) {
        const double ang = -2.0 * M_PI / static_cast<double>(len);
        const std::complex<double> wlen(std::cos(ang), std::sin(ang));
        for (std::size_t i = 0; i < n; i += len) {
            std::complex<double> w(1.0, 0.0);
            for (std::size_t j = 0; j < len / 2; ++j) {
                const std::complex<double> u = a[i + j];
                const std::complex<double> v = a[i + j + len / 2] * w;
                a[i + j] = u + v;
                a[i + j + len / 2] = u - v;
                w *= wlen;
            }
        }
    }
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

// 64 triangular filters on the HTK mel scale over [0, 8000] Hz, peak 1.
std::vector<double> build_mel_filterbank() {
    std::vector<double> fb(static_cast<std::size_t>(kNumMels) * kFftBins, 0.0);
    const double mel_lo = hz_to_mel(0.0);
    const double mel_hi = hz_to_mel(kSampleRate / 2.0);
    std::vector<double> edges(kNumMels + 2);
    for (int i = 0; i < kNumMels + 2; ++i) {
        edges[i] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * i / (kNumMels + 1));
    }
    for (int m = 0; m < kNumMels; ++m) {
        const double f0 = edges[m], f1 = edges[m + 1], f2 = edges[m + 2];
        for (int k = 0; k < kFftBins; ++k) {
            const double fk = static_cast<double>(k) * kSampleRate / kFftSize;
            double w = 0.0;
            if (fk >= f0 && fk <= f1 && f1 > f0) {
                w = (fk - f0) / (f1 - f0);
            } else if (fk > f1 && fk <= f2 && f2 > f1) {
                w = (f2 - fk) / (f2 - f1);
            }
            fb[static_cast<std::size_t>(m) * kFftBins + k] = w;
        }
    }
    return fb;
}

const std::vector<double>& mel_filterbank() {
    static const std::vector<double> fb = build_mel_filterbank();
    return fb;
}

const std::vector<double>& hann_window() {
    static const std::vector<double> win = [] {
        std::vector<double> w(kWinSamples);
        for (int i = 0; i < kWinSamples; ++i) {
            w[i] = 0.5 - 0.5 * std::cos(2.0 * M_PI * i / kWinSamples);
        }
        return w;
    }();
    return win;
}

} // namespace

Waveform load_wav(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error::io("cannot open wav file: " + path);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
        std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
        throw Error::data("malformed wav header: " + path);
    }

    int channels = 0;
    int sample_rate = 0;
    int bits = 0;
    bool have_fmt = false;
    const unsigned char* pcm = nullptr;
    std::size_t pcm_bytes = 0;

    std::size_t off = 12;
    while (off + 8 <= bytes.size()) {
        const char* id = reinterpret_cast<const char*>(bytes.data() + off);
        const std::uint32_t sz = read_u32(bytes.data() + off + 4);
        const std::size_t body = off + 8;
        if (body + sz > bytes.size()) throw Error::data("truncated wav chunk: " + path);
        if (std::memcmp(id, "fmt ", 4) == 0) {
            if (sz < 16) throw Error::data("malformed fmt chunk: " + path);
            const std::uint16_t format = read_u16(bytes.data() + body);
            channels = read_u16(bytes.data() + body + 2);
            sample_rate = static_cast<int>(read_u32(bytes.data() + body + 4));
            bits = read_u16(bytes.data() + body + 14);
            if (format != 1) throw Error::data("unsupported wav codec (PCM only): " + path);
            if (bits != 16) throw Error::data("unsupported sample width (16-bit only): " + path);
            if (channels < 1 || channels > 2) throw Error::data("unsupported channel count: " + path);
            have_fmt = true;
        } else if (std::memcmp(id, "data", 4) == 0) {
            pcm = bytes.data() + body;
            pcm_bytes = sz;
        }
        off = body + sz + (sz & 1); // chunks are word-aligned
    }
    if (!have_fmt || pcm == nullptr) throw Error::data("wav missing fmt/data chunk: " + path);
    if (sample_rate <= 0) throw Error::data("wav has zero sample rate: " + path);

    const std::size_t frames = pcm_bytes / (2 * channels);
    std::vector<float> mono(frames);
    for (std::size_t i = 0; i < frames; ++i) {
        double acc = 0.0;
        for (int c = 0; c < channels; ++c) {
            std::int16_t s;
            std::memcpy(&s, pcm + (i * channels + c) * 2, 2);
            acc += static_cast<double>(s) / 32768.0;
        }
        mono[i] = static_cast<float>(acc / channels);
    }

    Waveform w;
    w.sample_rate = kSampleRate;
    w.samples = (sample_rate == kSampleRate) ? std::move(mono)
                                             : resample_linear(mono, sample_rate, kSampleRate);
    return w;
}

void write_wav(const std::string& path, const Waveform& w) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error::io("cannot write wav file: " + path);
    const std::uint32_t n = static_cast<std::uint32_t>(w.samples.size());
    const std::uint32_t data_bytes = n * 2;
    const std::uint32_t sr = static_cast<std::uint32_t>(w.sample_rate);
    const std::uint32_t byte_rate = sr * 2;

    auto put_u32 = [&](std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); };
    auto put_u16 = [&](std::uint16_t v) { out.write(reinterpret_cast<const char*>(&v), 2); };

    out.write("RIFF", 4);
    put_u32(36 + data_bytes);
    out.write("WAVE", 4);
    out.write("fmt ", 4);
    put_u32(16);
    put_u16(1); // PCM
    put_u16(1); // mono
    put_u32(sr);
    put_u32(byte_rate);
    put_u16(2);  // block align
    put_u16(16); // bits
    out.write("data", 4);
    put_u32(data_bytes);
    for (std::uint32_t i = 0; i < n; ++i) {
        const double clamped = std::clamp(static_cast<double>(w.samples[i]), -1.0, 1.0);
        const std::int16_t s = static_cast<std::int16_t>(std::lrint(clamped * 32767.0));
        out.write(reinterpret_cast<const char*>(&s), 2);
    }
    if (!out) throw Error::io("short write: " + path);
}

std::vector<float> resample_linear(const std::vector<float>& in, int rate_in, int rate_out) {
    if (rate_in == rate_out || in.empty()) return in;
    const std::size_t n_out =
        static_cast<std::size_t>((in.size() - 1) * static_cast<std::uint64_t>(rate_out) / rate_in) + 1;
    std::vector<float> out(n_out);
    const double step = static_cast<double>(rate_in) / rate_out;
    for (std::size_t i = 0; i < n_out; ++i) {
        const double pos = i * step;
        const std::size_t i0 = std::min(static_cast<std::size_t>(pos), in.size() - 1);
        const std::size_t i1 = std::min(i0 + 1, in.size() - 1);
        const double frac = pos - static_cast<double>(i0);
        out[i] = static_cast<float>((1.0 - frac) * in[i0] + frac * in[i1]);
    }
    return out;
}

std::size_t mel_frame_count(std::size_t n_samples) {
    if (n_samples < static_cast<std::size_t>(kWinSamples)) return 0;
    return 1 + (n_samples - kWinSamples) / kHopSamples;
}

MelSpec mel_spectrogram(const Waveform& w) {
    if (w.sample_rate != kSampleRate) throw Error::data("mel_spectrogram expects 16 kHz input");
    if (w.samples.size() < static_cast<std::size_t>(kWinSamples)) {
        throw Error::data("waveform shorter than one 400-sample window");
    }
    const std::size_t n_frames = mel_frame_count(w.samples.size());
    const auto& win = hann_window();
    const auto& fb = mel_filterbank();

    MelSpec m;
    m.n_frames = n_frames;
    m.values.resize(n_frames * kNumMels);

    std::vector<std::complex<double>> buf(kFftSize);
    std::vector<double> power(kFftBins);
    for (std::size_t t = 0; t < n_frames; ++t) {
        const float* frame = w.samples.data() + t * kHopSamples;
        for (int i = 0; i < kFftSize; ++i) {
            buf[i] = (i < kWinSamples) ? std::complex<double>(frame[i] * win[i], 0.0)
                                       : std::complex<double>(0.0, 0.0);
        }
        fft_inplace(buf);
        for (int k = 0; k < kFftBins; ++k) power[k] = std::norm(buf[k]);
        for (int mel = 0; mel < kNumMels; ++mel) {
            const double* row = fb.data() + static_cast<std::size_t>(mel) * kFftBins;
            double acc = 0.0;
            for (int k = 0; k < kFftBins; ++k) acc += row[k] * power[k];
            m.at(t, mel) = static_cast<float>(std::log(std::max(acc, kLogFloor)));
        }
    }
    return m;
}

MelSpec spec_augment(const MelSpec& m, Rng& rng, const SpecAugmentParams& params,
                     std::vector<AppliedMask>* applied) {
    MelSpec out = m;
    const float floor = static_cast<float>(std::log(kLogFloor));
    if (applied) applied->clear();

    auto apply = [&](bool is_freq, std::size_t limit, int max_width) {
        if (limit == 0) return;
        const std::size_t width = static_cast<std::size_t>(rng.uniform_int(0, std::max(0, max_width)));
        const std::size_t start = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(limit) - 1));
        const std::size_t end = std::min(start + width, limit);
        if (applied) applied->push_back({is_freq, start, end - start});
        if (is_freq) {
            for (std::size_t t = 0; t < out.n_frames; ++t)
                for (std::size_t f = start; f < end; ++f) out.at(t, f) = floor;
        } else {
            for (std::size_t t = start; t < end; ++t)
                for (std::size_t f = 0; f < out.n_mels; ++f) out.at(t, f) = floor;
        }
    };

    for (int i = 0; i < params.n_freq_masks; ++i) apply(true, out.n_mels, params.max_freq_width);
    for (int i = 0; i < params.n_time_masks; ++i) apply(false, out.n_frames, params.max_time_width);
    return out;
}

PatchSeq patchify(const MelSpec& m) {
    if (m.n_mels != static_cast<std::size_t>(kNumMels)) {
        throw Error::data("patchify expects 64 mel bins");
    }
    if (m.n_frames < static_cast<std::size_t>(kPatch)) {
        throw Error::data("clip shorter than one 16-frame patch");
    }
    PatchSeq p;
    p.n_time = m.n_frames / kPatch;
    p.n_freq = m.n_mels / kPatch;
    p.patches.resize(p.n_time * p.n_freq * kPatch * kPatch);
    p.coords.resize(p.n_time * p.n_freq);

    std::size_t idx = 0;
    for (std::size_t t = 0; t < p.n_time; ++t) {
        for (std::size_t f = 0; f < p.n_freq; ++f, ++idx) {
            p.coords[idx] = {static_cast<int>(t), static_cast<int>(f)};
            float* dst = p.patches.data() + idx * kPatch * kPatch;
            for (int fr = 0; fr < kPatch; ++fr) {
                for (int b = 0; b < kPatch; ++b) {
                    dst[fr * kPatch + b] = m.at(t * kPatch + fr, f * kPatch + b);
                }
            }
        }
    }
    return p;
}

MelSpec unpatchify(const PatchSeq& p) {
    MelSpec m;
    m.n_frames = p.n_time * kPatch;
    m.n_mels = p.n_freq * kPatch;
    m.values.resize(m.n_frames * m.n_mels);
    for (std::size_t idx = 0; idx < p.size(); ++idx) {
        const auto [t, f] = p.coords[idx];
        const float* src = p.patches.data() + idx * kPatch * kPatch;
        for (int fr = 0; fr < kPatch; ++fr) {
            for (int b = 0; b < kPatch; ++b) {
                m.at(static_cast<std::size_t>(t) * kPatch + fr,
                     static_cast<std::size_t>(f) * kPatch + b) = src[fr * kPatch + b];
            }
        }
    }
    return m;
}

} // namespace slap::dsp
