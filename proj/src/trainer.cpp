#include "slap/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <numeric>

#include <json.hpp>

#include "slap/checkpoint.hpp"
#include "slap/ema.hpp"
#include "slap/error.hpp"
#include "slap/losses.hpp"
#include "slap/packing.hpp"
#include "slap/rng.hpp"

namespace slap::train {

TrainState init_state(const ModelConfig& mcfg, std::uint64_t seed) {
    validate(mcfg);
    TrainState s;
    s.mcfg = mcfg;
    s.student = model::init_model<float>(mcfg, seed);
    s.teacher = model::init_teacher(s.student);
    s.center = nn::TensorData<float>(1, mcfg.proto.k);
    s.step = 0;
    return s;
}

double lr_at(std::uint64_t step, const TrainConfig& cfg) {
    double lr = cfg.lr_peak;
    if (cfg.warmup_steps > 0 && step < cfg.warmup_steps) {
        return lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
    }
    if (cfg.lr_schedule == "cosine" && cfg.steps > cfg.warmup_steps) {
        const double p = static_cast<double>(step - cfg.warmup_steps) /
                         static_cast<double>(cfg.steps - cfg.warmup_steps);
        lr *= 0.5 * (1.0 + std::cos(std::numbers::pi * std::min(1.0, p)));
    }
    return lr;
}

std::string StepMetrics::to_json_line() const {
    nlohmann::ordered_json j;
    j["step"] = step;
    j["l_clap"] = l_clap;
    j["l_ssl"] = l_ssl;
    j["l_cap"] = l_cap;
    j["total"] = total;
    j["lr"] = lr;
    j["m"] = m;
    j["grad_norm"] = grad_norm;
    j["tau"] = tau;
    return j.dump();
}

namespace {

void renorm_prototype_rows(nn::TensorData<float>& p) {
    for (std::size_t r = 0; r < p.rows; ++r) {
        float* row = p.row(r);
        double sq = 0.0;
        for (std::size_t c = 0; c < p.cols; ++c) sq += static_cast<double>(row[c]) * row[c];
        const float inv = 1.0f / static_cast<float>(std::sqrt(std::max(sq, 1e-24)));
        for (std::size_t c = 0; c < p.cols; ++c) row[c] *= inv;
    }
}

} // namespace

StepMetrics train_step(TrainState& state, const TrainConfig& cfg, const Batch& batch) {
    if (batch.audio.empty() || batch.audio.size() != batch.captions.size()) {
        throw Error::data("train_step: batch needs matched audio/caption pairs");
    }
    const ModelConfig& mc = state.mcfg;
    packing::PackedBatch packed = packing::pack(batch.audio);

    Rng mask_rng = derive_rng(cfg.seed, "mask", state.step);
    packing::MaskPlan plan = packing::plan_mask(packed, cfg.mask_ratio, mask_rng);
    const bool ssl_empty = plan.total() == 0;

    std::vector<std::vector<int>> text_tokens, dec_tokens;
    text_tokens.reserve(batch.captions.size());
    dec_tokens.reserve(batch.captions.size());
    for (const auto& c : batch.captions) {
        text_tokens.push_back(model::tokenize(c, mc.text.max_len));
        dec_tokens.push_back(model::tokenize(c, mc.decoder.max_len));
    }

    // Components with zero weight run off-tape: their values are reported but
    // no gradient machinery ever sees them.
    nn::Tape<float> tape;
    nn::Tape<float>* t_clap = cfg.alpha > 0.0 ? &tape : nullptr;
    nn::Tape<float>* t_ssl = cfg.beta > 0.0 ? &tape : nullptr;
    nn::Tape<float>* t_cap = cfg.gamma > 0.0 ? &tape : nullptr;

    model::EncoderOut<float> enc_masked, enc_clean;
    if (cfg.share_student_pass) {
        nn::Tape<float>* t = (cfg.alpha > 0.0 || cfg.beta > 0.0 || cfg.gamma > 0.0) ? &tape : nullptr;
        enc_masked = model::audio_forward(t, state.student.audio, mc.audio, packed, &plan);
        enc_clean = enc_masked;
    } else {
        nn::Tape<float>* t_u = (cfg.alpha > 0.0 || cfg.gamma > 0.0) ? &tape : nullptr;
        enc_masked = model::audio_forward(t_ssl, state.student.audio, mc.audio, packed, &plan);
        enc_clean = model::audio_forward(t_u, state.student.audio, mc.audio, packed, nullptr);
    }

    auto txt = model::text_forward(t_clap, state.student.text, mc.text, text_tokens);
    auto emb_a = heads::map_pool(t_clap, state.student.map_audio, enc_clean.features,
                                 enc_clean.boundaries, mc.audio.n_heads);
    auto emb_t = heads::map_pool(t_clap, state.student.map_text, txt.features, txt.boundaries,
                                 mc.text.n_heads);
    auto l_clap = heads::clap_loss(t_clap, emb_a, emb_t, state.student.log_tau);

    nn::Var<float> l_ssl(nn::TensorData<float>(1, 1));
    nn::TensorData<float> teacher_raw_mean;
    if (!ssl_empty) {
        auto enc_teacher = model::audio_forward<float>(nullptr, state.teacher.audio, mc.audio,
                                                       packed, nullptr);
        auto teacher_rows = nn::gather_rows<float>(nullptr, enc_teacher.features, plan.flat());
        auto teacher_raw = heads::proto_logits<float>(nullptr, state.teacher.proto, teacher_rows);

        nn::TensorData<float> q_t = teacher_raw.val();
        const float tt = static_cast<float>(mc.proto.t_teacher);
        for (std::size_t r = 0; r < q_t.rows; ++r) {
            for (std::size_t c = 0; c < q_t.cols; ++c) {
                q_t.at(r, c) = (q_t.at(r, c) - state.center.v[c]) / tt;
            }
        }
        nn::softmax_rows_value(q_t);

        auto student_rows = nn::gather_rows(t_ssl, enc_masked.features, plan.flat());
        auto student_raw = heads::proto_logits(t_ssl, state.student.proto, student_rows);
        l_ssl = heads::ssl_loss(t_ssl, student_raw, q_t, static_cast<float>(mc.proto.t_student));

        teacher_raw_mean = nn::TensorData<float>(1, q_t.cols);
        const auto& raw = teacher_raw.val();
        for (std::size_t r = 0; r < raw.rows; ++r) {
            for (std::size_t c = 0; c < raw.cols; ++c) teacher_raw_mean.v[c] += raw.at(r, c);
        }
        for (std::size_t c = 0; c < raw.cols; ++c) {
            teacher_raw_mean.v[c] /= static_cast<float>(raw.rows);
        }
    }

    auto dec = model::decoder_forward(t_cap, state.student.decoder, mc.decoder, dec_tokens, enc_clean);
    auto l_cap = nn::cross_entropy_targets(t_cap, dec.logits, dec.targets);

    auto total = heads::total_loss(&tape, l_clap, l_ssl, l_cap, static_cast<float>(cfg.alpha),
                                   static_cast<float>(cfg.beta), static_cast<float>(cfg.gamma));

    auto params = model::named_params(state.student);
    for (auto& p : params) p.var.zero_grad();
    tape.backward(total);

    double grad_sq = 0.0;
    for (auto& p : params) {
        if (!p.var.has_grad()) continue;
        for (float g : p.var.grad().v) grad_sq += static_cast<double>(g) * g;
    }
    const double grad_norm = std::sqrt(grad_sq);
    if (!std::isfinite(grad_norm)) throw Error::numeric("train_step: non-finite gradient norm");
    const double clip_scale =
        (cfg.grad_clip > 0.0 && grad_norm > cfg.grad_clip) ? cfg.grad_clip / grad_norm : 1.0;
    if (clip_scale != 1.0) {
        for (auto& p : params) {
            if (!p.var.has_grad()) continue;
            for (float& g : p.var.grad().v) g = static_cast<float>(g * clip_scale);
        }
    }

    const double lr = lr_at(state.step, cfg);
    const auto t = static_cast<double>(state.step + 1);
    const double bc1 = 1.0 - std::pow(cfg.beta1, t);
    const double bc2 = 1.0 - std::pow(cfg.beta2, t);
    for (auto& p : params) {
        AdamState& a = state.opt[p.name];
        auto& w = p.var.val();
        if (a.m.v.empty()) {
            a.m = nn::TensorData<float>(w.rows, w.cols);
            a.v = nn::TensorData<float>(w.rows, w.cols);
        }
        auto& g = p.var.grad();
        const bool decay = model::decays(p.name);
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double gi = g.v[i];
            const double mi = cfg.beta1 * a.m.v[i] + (1.0 - cfg.beta1) * gi;
            const double vi = cfg.beta2 * a.v.v[i] + (1.0 - cfg.beta2) * gi * gi;
            a.m.v[i] = static_cast<float>(mi);
            a.v.v[i] = static_cast<float>(vi);
            double upd = (mi / bc1) / (std::sqrt(vi / bc2) + 1e-8);
            if (decay) upd += cfg.weight_decay * w.v[i];
            w.v[i] -= static_cast<float>(lr * upd);
        }
    }

    float& ltau = state.student.log_tau.val().v[0];
    ltau = std::clamp(ltau, std::log(0.005f), 0.0f);
    renorm_prototype_rows(state.student.proto.prototypes.val());

    const double momentum =
        ema::momentum_at(state.step, {cfg.ema_start, cfg.ema_end, cfg.steps});
    ema::ema_update(state.teacher, state.student, momentum);
    renorm_prototype_rows(state.teacher.proto.prototypes.val());

    if (!ssl_empty) {
        const float cm = static_cast<float>(mc.proto.center_momentum);
        for (std::size_t c = 0; c < state.center.cols; ++c) {
            state.center.v[c] = cm * state.center.v[c] + (1.0f - cm) * teacher_raw_mean.v[c];
        }
    }

    StepMetrics out;
    out.step = state.step;
    out.l_clap = l_clap.scalar();
    out.l_ssl = l_ssl.scalar();
    out.l_cap = l_cap.scalar();
    out.total = total.scalar();
    out.lr = lr;
    out.m = momentum;
    out.grad_norm = grad_norm;
    out.tau = std::exp(static_cast<double>(ltau));
    out.ssl_empty = ssl_empty;
    state.step += 1;
    return out;
}

namespace {

std::string checkpoint_name(std::uint64_t step) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "ckpt-%06llu.slap", static_cast<unsigned long long>(step));
    return buf;
}

} // namespace

FitResult fit(const RunConfig& cfg, const io::Manifest& manifest, const std::string& out_dir,
              const std::string& resume_from) {
    if (manifest.empty()) throw Error::data("fit: empty manifest");
    validate(cfg.model);
    std::filesystem::create_directories(out_dir);

    TrainState state;
    if (resume_from.empty()) {
        state = init_state(cfg.model, cfg.train.seed);
        state.student.log_tau.val().v[0] = static_cast<float>(std::log(cfg.train.tau_init));
    } else {
        state = io::load_checkpoint(resume_from, &cfg.model);
    }

    const std::size_t n = manifest.size();
    std::vector<dsp::MelSpec> mels(n);
    std::vector<std::size_t> tokens(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto& rec = manifest.records[i];
        dsp::Waveform w = dsp::load_wav(io::resolve_audio(manifest, rec));
        if (w.sample_rate != dsp::kSampleRate) {
            w.samples = dsp::resample_linear(w.samples, w.sample_rate, dsp::kSampleRate);
            w.sample_rate = dsp::kSampleRate;
        }
        mels[i] = dsp::mel_spectrogram(w);
        tokens[i] = (mels[i].n_frames / dsp::kPatch) * (dsp::kNumMels / dsp::kPatch);
        if (tokens[i] == 0) {
            throw Error::data("fit: clip too short to form one patch: " + rec.id);
        }
    }

    const std::size_t b = cfg.train.batch_size;
    const std::size_t steps_per_epoch = (n + b - 1) / b;
    std::ofstream metrics_out(out_dir + "/metrics.jsonl",
                              resume_from.empty() ? std::ios::trunc : std::ios::app);
    if (!metrics_out) throw Error::io("fit: cannot write metrics log in " + out_dir);

    FitResult result;
    const std::pair<const char*, double> comps[] = {
        {"l_clap", cfg.train.alpha}, {"l_ssl", cfg.train.beta}, {"l_cap", cfg.train.gamma}};
    for (const auto& [name, weight] : comps) {
        if (weight == 0.0) {
            result.notes.push_back(std::string(name) +
                                   " weight is 0: component runs gradient-free, value still logged");
        }
    }

    std::vector<std::size_t> order(n);
    std::uint64_t order_epoch = ~0ULL;
    while (state.step < cfg.train.steps) {
        const std::uint64_t epoch = state.step / steps_per_epoch;
        if (epoch != order_epoch) {
            std::iota(order.begin(), order.end(), std::size_t{0});
            Rng shuffle_rng = derive_rng(cfg.train.seed, "shuffle", epoch);
            for (std::size_t i = n; i > 1; --i) {
                const auto j = static_cast<std::size_t>(shuffle_rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
                std::swap(order[i - 1], order[j]);
            }
            // length-sort inside windows of 4 batches: similar-size clips pack together
            for (std::size_t w0 = 0; w0 < n; w0 += 4 * b) {
                const std::size_t w1 = std::min(n, w0 + 4 * b);
                std::stable_sort(order.begin() + static_cast<std::ptrdiff_t>(w0),
                                 order.begin() + static_cast<std::ptrdiff_t>(w1),
                                 [&](std::size_t x, std::size_t y) { return tokens[x] > tokens[y]; });
            }
            order_epoch = epoch;
        }

        const std::size_t k = state.step % steps_per_epoch;
        const std::size_t lo = k * b;
        const std::size_t hi = std::min(n, lo + b);
        Batch batch;
        for (std::size_t i = lo; i < hi; ++i) {
            const std::size_t idx = order[i];
            if (cfg.train.spec_augment) {
                Rng aug_rng = derive_rng(cfg.train.seed, "augment", state.step, idx);
                batch.audio.push_back(dsp::patchify(dsp::spec_augment(mels[idx], aug_rng)));
            } else {
                batch.audio.push_back(dsp::patchify(mels[idx]));
            }
            batch.captions.push_back(manifest.records[idx].caption);
        }

        StepMetrics met = train_step(state, cfg.train, batch);
        metrics_out << met.to_json_line() << "\n";
        metrics_out.flush();
        result.metrics.push_back(met);

        if (cfg.train.checkpoint_every > 0 && state.step % cfg.train.checkpoint_every == 0 &&
            state.step < cfg.train.steps) {
            io::save_checkpoint(state, out_dir + "/" + checkpoint_name(state.step));
        }
    }

    result.final_checkpoint = out_dir + "/final.slap";
    io::save_checkpoint(state, result.final_checkpoint);
    return result;
}

} // namespace slap::train
