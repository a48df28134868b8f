#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "slap/losses.hpp"
#include "slap/model.hpp"
#include "slap/packing.hpp"
#include "slap/rng.hpp"
#include "slap/tensor.hpp"

namespace slap::nn {

// Central finite differences against the tape gradient. `build` constructs the
// scalar loss from the given parameter leaves; it runs many times, so keep the
// graph small. Returns max over parameter entries of
// |g_fd − g_an| / max(1e-8, |g_fd| + |g_an|).
struct GradCheckDetail {
    std::size_t param = 0; // index into the params vector
    std::size_t index = 0; // flat entry within that parameter
    double g_fd = 0.0;
    double g_an = 0.0;
};

template <typename F>
double grad_check(F&& build, const std::vector<Var<double>>& params, double eps = 1e-4,
                  GradCheckDetail* detail = nullptr) {
    for (auto p : params) p.zero_grad();
    Tape<double> tape;
    auto loss = build(&tape);
    tape.backward(loss);
    if (!loss.val().finite()) throw Error::numeric("grad_check: non-finite loss");

    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (auto p : params) analytic.push_back(p.grad().v);

    double worst = 0.0;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto v = params[pi];
        for (std::size_t i = 0; i < v.val().size(); ++i) {
            const double orig = v.val().v[i];
            v.val().v[i] = orig + eps;
            const double fp = build(nullptr).scalar();
            v.val().v[i] = orig - eps;
            const double fm = build(nullptr).scalar();
            v.val().v[i] = orig;
            if (!std::isfinite(fp) || !std::isfinite(fm)) {
                throw Error::numeric("grad_check: non-finite perturbed loss");
            }
            const double g_fd = (fp - fm) / (2.0 * eps);
            const double g_an = analytic[pi][i];
            const double rel = std::abs(g_fd - g_an) / std::max(1e-8, std::abs(g_fd) + std::abs(g_an));
            if (rel > worst) {
                worst = rel;
                if (detail) *detail = {pi, i, g_fd, g_an};
            }
        }
    }
    return worst;
}

struct GradCheckReport {
    double clap = 0.0;
    double ssl = 0.0;
    double cap = 0.0;
    double total = 0.0;

    double max() const { return std::max(std::max(clap, ssl), std::max(cap, total)); }
};

namespace gc_detail {

inline TensorData<double> random_tensor(Rng& rng, std::size_t r, std::size_t c, double sd = 1.0) {
    TensorData<double> t(r, c);
    for (auto& x : t.v) x = rng.normal() * sd;
    return t;
}

inline ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.audio = {2, 2, 8, 16, 2, "lg"};
    cfg.text = {1, 2, 8, 16, 32};
    cfg.decoder = {1, 2, 8, 16, 32};
    cfg.proto = {4, 8, 16, 0.1, 0.04, 0.9};
    cfg.embed_dim = 8;
    return cfg;
}

inline packing::PackedBatch tiny_batch(Rng& rng, const std::vector<std::size_t>& n_times) {
    std::vector<dsp::PatchSeq> seqs;
    for (std::size_t nt : n_times) {
        dsp::PatchSeq s;
        s.n_time = nt;
        s.n_freq = dsp::kNumMels / dsp::kPatch;
        s.patches.resize(nt * s.n_freq * dsp::kPatch * dsp::kPatch);
        for (auto& x : s.patches) x = static_cast<float>(rng.normal());
        for (std::size_t t = 0; t < nt; ++t) {
            for (std::size_t f = 0; f < s.n_freq; ++f) {
                s.coords.emplace_back(static_cast<int>(t), static_cast<int>(f));
            }
        }
        seqs.push_back(std::move(s));
    }
    return packing::pack(seqs);
}

} // namespace gc_detail

// The standard verification suite: each loss in isolation, then the full
// 2-layer model end to end through the weighted total.
inline GradCheckReport run_grad_checks(std::uint64_t seed = 7, double eps = 1e-4) {
    using D = double;
    GradCheckReport rep;
    const ModelConfig cfg = gc_detail::tiny_config();

    { // clap: raw embeddings + temperature
        Rng rng = derive_rng(seed, "gc-clap");
        Var<D> a(gc_detail::random_tensor(rng, 3, cfg.embed_dim));
        Var<D> t(gc_detail::random_tensor(rng, 3, cfg.embed_dim));
        Var<D> log_tau(TensorData<D>(1, 1, std::log(0.07)));
        rep.clap = grad_check(
            [&](Tape<D>* tape) {
                auto ea = l2norm_rows(tape, a);
                auto et = l2norm_rows(tape, t);
                return heads::clap_loss(tape, ea, et, log_tau);
            },
            {a, t, log_tau}, eps);
    }

    { // ssl: feature rows through the prototype head against fixed teacher scores
        Rng rng = derive_rng(seed, "gc-ssl");
        model::ModelWeights<D> w = model::init_model<D>(cfg, seed + 1);
        Var<D> rows(gc_detail::random_tensor(rng, 5, cfg.audio.hidden));
        TensorData<D> qt = gc_detail::random_tensor(rng, 5, cfg.proto.k);
        softmax_rows_value(qt);
        rep.ssl = grad_check(
            [&](Tape<D>* tape) {
                auto raw = heads::proto_logits(tape, w.proto, rows);
                return heads::ssl_loss(tape, raw, qt, D(cfg.proto.t_student));
            },
            {rows, w.proto.w1, w.proto.w2, w.proto.prototypes}, eps);
    }

    { // caption: tiny decoder over a fixed audio segment
        Rng rng = derive_rng(seed, "gc-cap");
        model::ModelWeights<D> w = model::init_model<D>(cfg, seed + 2);
        model::EncoderOut<D> audio{Var<D>(gc_detail::random_tensor(rng, 7, cfg.audio.hidden)),
                                   {0, 3, 7},
                                   {}};
        const std::vector<std::vector<int>> caps = {model::tokenize("ab", cfg.decoder.max_len),
                                                    model::tokenize("xyz", cfg.decoder.max_len)};
        std::vector<Var<D>> params{audio.features};
        for (auto& p : model::named_params(w)) {
            if (p.name.rfind("decoder.", 0) == 0) params.push_back(p.var);
        }
        rep.cap = grad_check(
            [&](Tape<D>* tape) {
                auto out = model::decoder_forward(tape, w.decoder, cfg.decoder, caps, audio);
                return cross_entropy_targets(tape, out.logits, out.targets);
            },
            params, eps);
    }

    { // full model through total_loss: dual student passes, frozen teacher
        Rng rng = derive_rng(seed, "gc-total");
        model::ModelWeights<D> w = model::init_model<D>(cfg, seed + 3);
        model::TeacherWeights<D> teacher = model::init_teacher(w);
        // decorrelate the teacher so stop-gradient actually matters
        for (auto& p : model::named_params(teacher)) {
            for (auto& x : p.var.val().v) x += 0.01 * rng.normal();
        }
        packing::PackedBatch batch = gc_detail::tiny_batch(rng, {2, 3});
        Rng mask_rng = derive_rng(seed, "gc-mask");
        packing::MaskPlan plan = packing::plan_mask(batch, 0.5, mask_rng);
        const std::vector<std::vector<int>> caps = {model::tokenize("ab", cfg.decoder.max_len),
                                                    model::tokenize("cd", cfg.decoder.max_len)};
        TensorData<D> center(1, cfg.proto.k);

        // teacher scores are a constant of the student graph
        auto t_enc = model::audio_forward<D>(nullptr, teacher.audio, cfg.audio, batch, nullptr);
        auto t_rows = gather_rows<D>(nullptr, t_enc.features, plan.flat());
        TensorData<D> qt = heads::prototype_scores(teacher.proto, t_rows.val(),
                                                   D(cfg.proto.t_teacher), &center);

        std::vector<Var<D>> params;
        for (auto& p : model::named_params(w)) params.push_back(p.var);
        // the end-to-end graph stacks softmaxes, so embedding entries carry
        // third derivatives near 1e6; a finer step keeps FD truncation (∝eps²)
        // below the 1e-4 bar while staying far above the f64 noise floor
        const double eps_e2e = std::min(eps, 1e-5);
        rep.total = grad_check(
            [&](Tape<D>* tape) {
                auto enc_u = model::audio_forward(tape, w.audio, cfg.audio, batch, nullptr);
                auto enc_m = model::audio_forward(tape, w.audio, cfg.audio, batch, &plan);
                auto txt = model::text_forward(tape, w.text, cfg.text, caps);
                auto ea = heads::map_pool(tape, w.map_audio, enc_u.features, enc_u.boundaries,
                                          cfg.audio.n_heads);
                auto et = heads::map_pool(tape, w.map_text, txt.features, txt.boundaries,
                                          cfg.text.n_heads);
                auto l_clap = heads::clap_loss(tape, ea, et, w.log_tau);
                auto s_rows = gather_rows(tape, enc_m.features, plan.flat());
                auto raw = heads::proto_logits(tape, w.proto, s_rows);
                auto l_ssl = heads::ssl_loss(tape, raw, qt, D(cfg.proto.t_student));
                auto dec = model::decoder_forward(tape, w.decoder, cfg.decoder, caps, enc_u);
                auto l_cap = cross_entropy_targets(tape, dec.logits, dec.targets);
                return heads::total_loss(tape, l_clap, l_ssl, l_cap, D(1.0), D(1.0), D(0.5));
            },
            params, eps_e2e);
    }
    return rep;
}

} // namespace slap::nn
