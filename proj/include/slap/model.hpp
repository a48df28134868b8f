#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "slap/config.hpp"
#include "slap/ops.hpp"
#include "slap/packing.hpp"
#include "slap/rng.hpp"
#include "slap/tensor.hpp"

namespace slap::model {

inline constexpr int kPad = 256;
inline constexpr int kBos = 257;
inline constexpr int kEos = 258;

// BOS + raw bytes + EOS, truncated to max_len with EOS kept
inline std::vector<int> tokenize(const std::string& text, std::size_t max_len) {
    std::vector<int> ids;
    ids.reserve(std::min(text.size() + 2, max_len));
    ids.push_back(kBos);
    for (unsigned char c : text) {
        if (ids.size() + 1 >= max_len) break;
        ids.push_back(static_cast<int>(c));
    }
    ids.push_back(kEos);
    return ids;
}

inline std::string detokenize(const std::vector<int>& ids) {
    std::string s;
    for (int id : ids) {
        if (id == kEos) break;
        if (id >= 0 && id < 256) s.push_back(static_cast<char>(id));
    }
    return s;
}

// ---------------------------------------------------------------------------
// weights

template <typename T>
struct BlockWeights {
    nn::Var<T> attn_gain, wq, wk, wv, wo;
    nn::Var<T> ffn_gain, w_gate, w_up, w_down;
};

template <typename T>
struct TowerWeights {
    std::vector<BlockWeights<T>> blocks;
    nn::Var<T> final_gain;
};

template <typename T>
struct AudioEncoderWeights {
    nn::Var<T> stem_w;     // 256×H
    nn::Var<T> stem_gain;  // 1×H
    nn::Var<T> mask_token; // 1×H, substituted for masked patch embeddings
    TowerWeights<T> tower;
};

template <typename T>
struct TextEncoderWeights {
    nn::Var<T> table; // 259×H
    TowerWeights<T> tower;
};

template <typename T>
struct MapHeadWeights {
    nn::Var<T> query; // 1×H learned query, attends without any W_q
    nn::Var<T> wk, wv; // H×H
    nn::Var<T> wout;   // H×D
};

template <typename T>
struct ProtoHeadWeights {
    nn::Var<T> w1;         // H×mlp_hidden
    nn::Var<T> w2;         // mlp_hidden×p_dim
    nn::Var<T> prototypes; // K×p_dim, rows L2-normalized after each optimizer step
};

template <typename T>
struct DecoderBlockWeights {
    nn::Var<T> self_gain, self_wq, self_wk, self_wv, self_wo;
    nn::Var<T> cross_gain, cross_wq, cross_wk, cross_wv, cross_wo;
    nn::Var<T> ffn_gain, w_gate, w_up, w_down;
};

template <typename T>
struct DecoderWeights {
    nn::Var<T> table; // 259×H
    std::vector<DecoderBlockWeights<T>> blocks;
    nn::Var<T> final_gain;
    nn::Var<T> out_w; // H×259
};

template <typename T>
struct ModelWeights {
    AudioEncoderWeights<T> audio;
    TextEncoderWeights<T> text;
    MapHeadWeights<T> map_audio, map_text;
    ProtoHeadWeights<T> proto;
    DecoderWeights<T> decoder;
    nn::Var<T> log_tau; // 1×1
};

// EMA target: audio tower + prototype head only
template <typename T>
struct TeacherWeights {
    AudioEncoderWeights<T> audio;
    ProtoHeadWeights<T> proto;
};

template <typename T>
struct NamedParam {
    std::string name;
    nn::Var<T> var;
};

namespace detail {

template <typename T>
void collect_block(std::vector<NamedParam<T>>& out, const std::string& p, BlockWeights<T>& b) {
    out.push_back({p + "attn.gain", b.attn_gain});
    out.push_back({p + "attn.wq", b.wq});
    out.push_back({p + "attn.wk", b.wk});
    out.push_back({p + "attn.wv", b.wv});
    out.push_back({p + "attn.wo", b.wo});
    out.push_back({p + "ffn.gain", b.ffn_gain});
    out.push_back({p + "ffn.w_gate", b.w_gate});
    out.push_back({p + "ffn.w_up", b.w_up});
    out.push_back({p + "ffn.w_down", b.w_down});
}

template <typename T>
void collect_tower(std::vector<NamedParam<T>>& out, const std::string& prefix, TowerWeights<T>& t) {
    for (std::size_t i = 0; i < t.blocks.size(); ++i) {
        collect_block(out, prefix + ".blocks." + std::to_string(i) + ".", t.blocks[i]);
    }
    out.push_back({prefix + ".final.gain", t.final_gain});
}

template <typename T>
void collect_audio(std::vector<NamedParam<T>>& out, AudioEncoderWeights<T>& a) {
    out.push_back({"audio.stem.w", a.stem_w});
    out.push_back({"audio.stem.gain", a.stem_gain});
    out.push_back({"audio.mask_token", a.mask_token});
    collect_tower(out, "audio", a.tower);
}

template <typename T>
void collect_proto(std::vector<NamedParam<T>>& out, ProtoHeadWeights<T>& p) {
    out.push_back({"proto.mlp.w1", p.w1});
    out.push_back({"proto.mlp.w2", p.w2});
    out.push_back({"proto.prototypes", p.prototypes});
}

template <typename T>
void collect_map(std::vector<NamedParam<T>>& out, const std::string& prefix, MapHeadWeights<T>& m) {
    out.push_back({prefix + ".query", m.query});
    out.push_back({prefix + ".wk", m.wk});
    out.push_back({prefix + ".wv", m.wv});
    out.push_back({prefix + ".wout", m.wout});
}

} // namespace detail

template <typename T>
std::vector<NamedParam<T>> named_params(ModelWeights<T>& m) {
    std::vector<NamedParam<T>> out;
    detail::collect_audio(out, m.audio);
    out.push_back({"text.table", m.text.table});
    detail::collect_tower(out, "text", m.text.tower);
    detail::collect_map(out, "map_audio", m.map_audio);
    detail::collect_map(out, "map_text", m.map_text);
    detail::collect_proto(out, m.proto);
    out.push_back({"decoder.table", m.decoder.table});
    for (std::size_t i = 0; i < m.decoder.blocks.size(); ++i) {
        auto& b = m.decoder.blocks[i];
        const std::string p = "decoder.blocks." + std::to_string(i) + ".";
        out.push_back({p + "self.gain", b.self_gain});
        out.push_back({p + "self.wq", b.self_wq});
        out.push_back({p + "self.wk", b.self_wk});
        out.push_back({p + "self.wv", b.self_wv});
        out.push_back({p + "self.wo", b.self_wo});
        out.push_back({p + "cross.gain", b.cross_gain});
        out.push_back({p + "cross.wq", b.cross_wq});
        out.push_back({p + "cross.wk", b.cross_wk});
        out.push_back({p + "cross.wv", b.cross_wv});
        out.push_back({p + "cross.wo", b.cross_wo});
        out.push_back({p + "ffn.gain", b.ffn_gain});
        out.push_back({p + "ffn.w_gate", b.w_gate});
        out.push_back({p + "ffn.w_up", b.w_up});
        out.push_back({p + "ffn.w_down", b.w_down});
    }
    out.push_back({"decoder.final.gain", m.decoder.final_gain});
    out.push_back({"decoder.out_w", m.decoder.out_w});
    out.push_back({"log_tau", m.log_tau});
    return out;
}

template <typename T>
std::vector<NamedParam<T>> named_params(TeacherWeights<T>& t) {
    std::vector<NamedParam<T>> out;
    detail::collect_audio(out, t.audio);
    detail::collect_proto(out, t.proto);
    return out;
}

// decoupled weight decay skips norm gains and the temperature
inline bool decays(const std::string& name) {
    return !(name.size() >= 5 && name.compare(name.size() - 5, 5, ".gain") == 0) &&
           name != "log_tau";
}

// ---------------------------------------------------------------------------
// init

namespace detail {

template <typename T>
nn::Var<T> randn(Rng& rng, std::size_t r, std::size_t c, double sd) {
    nn::TensorData<T> t(r, c);
    for (auto& x : t.v) x = static_cast<T>(rng.normal() * sd);
    return nn::Var<T>(std::move(t));
}

template <typename T>
nn::Var<T> ones(std::size_t n) {
    return nn::Var<T>(nn::TensorData<T>(1, n, T(1)));
}

template <typename T>
nn::Var<T> linear_init(Rng& rng, std::size_t in, std::size_t out) {
    return randn<T>(rng, in, out, 1.0 / std::sqrt(static_cast<double>(in)));
}

template <typename T>
BlockWeights<T> init_block(Rng& rng, std::size_t h, std::size_t ffn) {
    BlockWeights<T> b;
    b.attn_gain = ones<T>(h);
    b.wq = linear_init<T>(rng, h, h);
    b.wk = linear_init<T>(rng, h, h);
    b.wv = linear_init<T>(rng, h, h);
    b.wo = linear_init<T>(rng, h, h);
    b.ffn_gain = ones<T>(h);
    b.w_gate = linear_init<T>(rng, h, ffn);
    b.w_up = linear_init<T>(rng, h, ffn);
    b.w_down = linear_init<T>(rng, ffn, h);
    return b;
}

template <typename T>
TowerWeights<T> init_tower(Rng& rng, std::size_t layers, std::size_t h, std::size_t ffn) {
    TowerWeights<T> t;
    t.blocks.reserve(layers);
    for (std::size_t i = 0; i < layers; ++i) t.blocks.push_back(init_block<T>(rng, h, ffn));
    t.final_gain = ones<T>(h);
    return t;
}

template <typename T>
MapHeadWeights<T> init_map(Rng& rng, std::size_t h, std::size_t d) {
    MapHeadWeights<T> m;
    m.query = randn<T>(rng, 1, h, 0.02);
    m.wk = linear_init<T>(rng, h, h);
    m.wv = linear_init<T>(rng, h, h);
    m.wout = linear_init<T>(rng, h, d);
    return m;
}

template <typename T>
nn::Var<T> clone(const nn::Var<T>& v) {
    return nn::Var<T>(v.val());
}

template <typename T>
BlockWeights<T> clone(const BlockWeights<T>& b) {
    return {clone(b.attn_gain), clone(b.wq), clone(b.wk), clone(b.wv), clone(b.wo),
            clone(b.ffn_gain), clone(b.w_gate), clone(b.w_up), clone(b.w_down)};
}

} // namespace detail

template <typename T>
ModelWeights<T> init_model(const ModelConfig& cfg, std::uint64_t seed) {
    validate(cfg);
    Rng rng = derive_rng(seed, "init");
    ModelWeights<T> m;
    const std::size_t ha = cfg.audio.hidden, ht = cfg.text.hidden, hd = cfg.decoder.hidden;

    m.audio.stem_w = detail::linear_init<T>(rng, AudioEncoderConfig::patch_dim, ha);
    m.audio.stem_gain = detail::ones<T>(ha);
    m.audio.mask_token = detail::randn<T>(rng, 1, ha, 0.02);
    m.audio.tower = detail::init_tower<T>(rng, cfg.audio.n_layers, ha, cfg.audio.ffn);

    m.text.table = detail::randn<T>(rng, TextEncoderConfig::vocab, ht, 0.02);
    m.text.tower = detail::init_tower<T>(rng, cfg.text.n_layers, ht, cfg.text.ffn);

    m.map_audio = detail::init_map<T>(rng, ha, cfg.embed_dim);
    m.map_text = detail::init_map<T>(rng, ht, cfg.embed_dim);

    m.proto.w1 = detail::linear_init<T>(rng, ha, cfg.proto.mlp_hidden);
    m.proto.w2 = detail::linear_init<T>(rng, cfg.proto.mlp_hidden, cfg.proto.p_dim);
    m.proto.prototypes = detail::randn<T>(rng, cfg.proto.k, cfg.proto.p_dim, 1.0);
    {
        auto P = nn::emap(m.proto.prototypes.val());
        for (Eigen::Index r = 0; r < P.rows(); ++r) P.row(r) /= std::max(P.row(r).norm(), T(1e-12));
    }

    m.decoder.table = detail::randn<T>(rng, DecoderConfig::vocab, hd, 0.02);
    m.decoder.blocks.reserve(cfg.decoder.n_layers);
    for (std::size_t i = 0; i < cfg.decoder.n_layers; ++i) {
        DecoderBlockWeights<T> b;
        b.self_gain = detail::ones<T>(hd);
        b.self_wq = detail::linear_init<T>(rng, hd, hd);
        b.self_wk = detail::linear_init<T>(rng, hd, hd);
        b.self_wv = detail::linear_init<T>(rng, hd, hd);
        b.self_wo = detail::linear_init<T>(rng, hd, hd);
        b.cross_gain = detail::ones<T>(hd);
        b.cross_wq = detail::linear_init<T>(rng, hd, hd);
        b.cross_wk = detail::linear_init<T>(rng, ha, hd);
        b.cross_wv = detail::linear_init<T>(rng, ha, hd);
        b.cross_wo = detail::linear_init<T>(rng, hd, hd);
        b.ffn_gain = detail::ones<T>(hd);
        b.w_gate = detail::linear_init<T>(rng, hd, cfg.decoder.ffn);
        b.w_up = detail::linear_init<T>(rng, hd, cfg.decoder.ffn);
        b.w_down = detail::linear_init<T>(rng, cfg.decoder.ffn, hd);
        m.decoder.blocks.push_back(std::move(b));
    }
    m.decoder.final_gain = detail::ones<T>(hd);
    m.decoder.out_w = detail::linear_init<T>(rng, hd, DecoderConfig::vocab);

    m.log_tau = nn::Var<T>(nn::TensorData<T>(1, 1, static_cast<T>(std::log(0.07))));
    return m;
}

// exact copy of the EMA-covered student weights
template <typename T>
TeacherWeights<T> init_teacher(const ModelWeights<T>& m) {
    TeacherWeights<T> t;
    t.audio.stem_w = detail::clone(m.audio.stem_w);
    t.audio.stem_gain = detail::clone(m.audio.stem_gain);
    t.audio.mask_token = detail::clone(m.audio.mask_token);
    for (const auto& b : m.audio.tower.blocks) t.audio.tower.blocks.push_back(detail::clone(b));
    t.audio.tower.final_gain = detail::clone(m.audio.tower.final_gain);
    t.proto.w1 = detail::clone(m.proto.w1);
    t.proto.w2 = detail::clone(m.proto.w2);
    t.proto.prototypes = detail::clone(m.proto.prototypes);
    return t;
}

// ---------------------------------------------------------------------------
// forward passes

template <typename T>
struct EncoderOut {
    nn::Var<T> features; // L×H
    std::vector<std::size_t> boundaries;
    std::vector<std::pair<int, int>> coords;
};

namespace detail {

template <typename T>
nn::Var<T> run_block(nn::Tape<T>* tape, const BlockWeights<T>& b, nn::Var<T> x,
                     const std::vector<std::pair<int, int>>& coords,
                     const std::vector<std::size_t>& bounds, std::size_t n_heads,
                     std::optional<std::size_t> window, bool causal) {
    auto h = nn::rmsnorm(tape, x, b.attn_gain);
    auto q = nn::rope2d(tape, nn::matmul(tape, h, b.wq), coords, n_heads);
    auto k = nn::rope2d(tape, nn::matmul(tape, h, b.wk), coords, n_heads);
    auto v = nn::matmul(tape, h, b.wv);
    auto a = nn::packed_attention(tape, q, k, v, bounds, n_heads, window, causal);
    x = nn::add(tape, x, nn::matmul(tape, a, b.wo));
    auto h2 = nn::rmsnorm(tape, x, b.ffn_gain);
    auto f = nn::matmul(
        tape,
        nn::hadamard(tape, nn::silu(tape, nn::matmul(tape, h2, b.w_gate)), nn::matmul(tape, h2, b.w_up)),
        b.w_down);
    return nn::add(tape, x, f);
}

template <typename T>
nn::Var<T> to_var(const std::vector<float>& data, std::size_t rows, std::size_t cols) {
    nn::TensorData<T> t(rows, cols);
    for (std::size_t i = 0; i < data.size(); ++i) t.v[i] = static_cast<T>(data[i]);
    return nn::Var<T>(std::move(t));
}

} // namespace detail

// Packed patches through stem, optional masking, and the alternating tower.
template <typename T>
EncoderOut<T> audio_forward(nn::Tape<T>* tape, const AudioEncoderWeights<T>& w,
                            const AudioEncoderConfig& cfg, const packing::PackedBatch& batch,
                            const packing::MaskPlan* mask = nullptr) {
    batch.validate();
    if (batch.cols != AudioEncoderConfig::patch_dim) {
        throw Error::config("audio_forward: expected 256-wide patch rows");
    }
    auto x_in = detail::to_var<T>(batch.tokens, batch.rows, batch.cols);
    auto x = nn::rmsnorm(tape, nn::matmul(tape, x_in, w.stem_w), w.stem_gain);
    if (mask && mask->total() > 0) {
        x = nn::replace_rows(tape, x, mask->flat(), w.mask_token);
    }
    for (std::size_t i = 0; i < cfg.n_layers; ++i) {
        const auto window = cfg.pattern[i] == 'l' ? std::optional<std::size_t>(cfg.window_half)
                                                  : std::nullopt;
        x = detail::run_block(tape, w.tower.blocks[i], x, batch.coords, batch.boundaries,
                              cfg.n_heads, window, false);
    }
    x = nn::rmsnorm(tape, x, w.tower.final_gain);
    return {x, batch.boundaries, batch.coords};
}

// Token id batches through the text tower. PAD ids are dropped before packing,
// so padded and unpadded encodings of the same text agree exactly.
template <typename T>
EncoderOut<T> text_forward(nn::Tape<T>* tape, const TextEncoderWeights<T>& w,
                           const TextEncoderConfig& cfg, const std::vector<std::vector<int>>& batch) {
    if (batch.empty()) throw Error::data("text_forward: empty batch");
    std::vector<int> flat;
    std::vector<std::size_t> bounds{0};
    std::vector<std::pair<int, int>> coords;
    for (const auto& ids : batch) {
        int pos = 0;
        for (int id : ids) {
            if (id < 0 || id >= static_cast<int>(TextEncoderConfig::vocab)) {
                throw Error::data("text_forward: token id out of range");
            }
            if (id == kPad) continue;
            flat.push_back(id);
            coords.emplace_back(pos++, 0);
        }
        if (flat.size() == bounds.back()) throw Error::data("text_forward: sample has no tokens");
        bounds.push_back(flat.size());
    }
    auto x = nn::embedding_rows(tape, w.table, flat);
    for (const auto& blk : w.tower.blocks) {
        x = detail::run_block(tape, blk, x, coords, bounds, cfg.n_heads, std::nullopt, false);
    }
    x = nn::rmsnorm(tape, x, w.tower.final_gain);
    return {x, bounds, coords};
}

// Teacher-forcing decoder pass: returns packed next-token logits and targets.
// Caption i cross-attends to audio segment i of `audio`.
template <typename T>
struct DecoderOut {
    nn::Var<T> logits; // Lq×vocab
    std::vector<std::size_t> targets;
    std::vector<std::size_t> bounds;
};

template <typename T>
DecoderOut<T> decoder_forward(nn::Tape<T>* tape, const DecoderWeights<T>& w, const DecoderConfig& cfg,
                              const std::vector<std::vector<int>>& captions,
                              const EncoderOut<T>& audio) {
    if (captions.size() + 1 != audio.boundaries.size()) {
        throw Error::data("decoder_forward: caption/audio pairing mismatch");
    }
    std::vector<int> inputs;
    std::vector<std::size_t> targets;
    std::vector<std::size_t> bounds{0};
    std::vector<std::pair<int, int>> coords;
    for (const auto& cap : captions) {
        if (cap.size() < 2) throw Error::data("decoder_forward: caption shorter than BOS+EOS");
        for (std::size_t i = 0; i + 1 < cap.size(); ++i) {
            inputs.push_back(cap[i]);
            targets.push_back(static_cast<std::size_t>(cap[i + 1]));
            coords.emplace_back(static_cast<int>(i), 0);
        }
        bounds.push_back(inputs.size());
    }

    auto x = nn::embedding_rows(tape, w.table, inputs);
    for (const auto& b : w.blocks) {
        auto h = nn::rmsnorm(tape, x, b.self_gain);
        auto q = nn::rope2d(tape, nn::matmul(tape, h, b.self_wq), coords, cfg.n_heads);
        auto k = nn::rope2d(tape, nn::matmul(tape, h, b.self_wk), coords, cfg.n_heads);
        auto v = nn::matmul(tape, h, b.self_wv);
        auto a = nn::packed_attention(tape, q, k, v, bounds, cfg.n_heads, std::nullopt, true);
        x = nn::add(tape, x, nn::matmul(tape, a, b.self_wo));

        auto hc = nn::rmsnorm(tape, x, b.cross_gain);
        auto qc = nn::matmul(tape, hc, b.cross_wq);
        auto kc = nn::matmul(tape, audio.features, b.cross_wk);
        auto vc = nn::matmul(tape, audio.features, b.cross_wv);
        auto c = nn::cross_attention(tape, qc, kc, vc, bounds, audio.boundaries, cfg.n_heads);
        x = nn::add(tape, x, nn::matmul(tape, c, b.cross_wo));

        auto h2 = nn::rmsnorm(tape, x, b.ffn_gain);
        auto f = nn::matmul(
            tape,
            nn::hadamard(tape, nn::silu(tape, nn::matmul(tape, h2, b.w_gate)),
                         nn::matmul(tape, h2, b.w_up)),
            b.w_down);
        x = nn::add(tape, x, f);
    }
    x = nn::rmsnorm(tape, x, w.final_gain);
    auto logits = nn::matmul(tape, x, w.out_w);
    return {logits, std::move(targets), std::move(bounds)};
}

// Greedy decode for one sample of an encoded batch: argmax until EOS/max_len.
template <typename T>
std::vector<int> greedy_decode(const DecoderWeights<T>& w, const DecoderConfig& cfg,
                               const EncoderOut<T>& audio, std::size_t sample) {
    if (sample + 1 >= audio.boundaries.size()) throw Error::data("greedy_decode: sample out of range");
    const std::size_t b0 = audio.boundaries[sample], b1 = audio.boundaries[sample + 1];
    const std::size_t H = audio.features.cols();
    nn::TensorData<T> seg(b1 - b0, H);
    std::copy_n(audio.features.val().row(b0), (b1 - b0) * H, seg.data());
    EncoderOut<T> one{nn::Var<T>(std::move(seg)), {0, b1 - b0}, {}};

    std::vector<int> ids{kBos};
    while (ids.size() < cfg.max_len) {
        // run the prefix as a 1-sample "caption" whose targets are ignored
        std::vector<int> probe = ids;
        probe.push_back(kEos);
        auto out = decoder_forward<T>(nullptr, w, cfg, {probe}, one);
        const std::size_t last = out.logits.rows() - 1;
        const T* row = out.logits.val().row(last);
        int best = 0;
        for (std::size_t j = 1; j < DecoderConfig::vocab; ++j) {
            if (row[j] > row[best]) best = static_cast<int>(j);
        }
        ids.push_back(best);
        if (best == kEos) break;
    }
    return ids;
}

} // namespace slap::model
