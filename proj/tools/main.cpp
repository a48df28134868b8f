#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "slap/checkpoint.hpp"
#include "slap/config.hpp"
#include "slap/dsp.hpp"
#include "slap/error.hpp"
#include "slap/eval.hpp"
#include "slap/gradcheck.hpp"
#include "slap/manifest.hpp"
#include "slap/model.hpp"
#include "slap/packing.hpp"
#include "slap/synth.hpp"
#include "slap/trainer.hpp"

namespace {

using namespace slap;

int exit_code_for(const Error& e) {
    return e.kind() == Error::Kind::numeric ? 3 : 2;
}

dsp::PatchSeq features_for(const std::string& path) {
    dsp::Waveform w = dsp::load_wav(path);
    if (w.sample_rate != dsp::kSampleRate) {
        w.samples = dsp::resample_linear(w.samples, w.sample_rate, dsp::kSampleRate);
        w.sample_rate = dsp::kSampleRate;
    }
    dsp::PatchSeq p = dsp::patchify(dsp::mel_spectrogram(w));
    if (p.size() == 0) throw Error::data("clip too short to form one patch: " + path);
    return p;
}

// audio/text pairs share an index; any record with the same caption counts as
// a relevant match, so duplicated captions do not poison recall
std::vector<std::vector<std::size_t>> relevant_by_caption(const io::Manifest& m,
                                                          const std::vector<std::size_t>& kept) {
    std::map<std::string, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < kept.size(); ++i) {
        groups[m.records[kept[i]].caption].push_back(i);
    }
    std::vector<std::vector<std::size_t>> rel(kept.size());
    for (std::size_t i = 0; i < kept.size(); ++i) {
        rel[i] = groups[m.records[kept[i]].caption];
    }
    return rel;
}

nn::TensorData<float> rows_for(const std::vector<eval::EmbeddingRecord>& recs, std::uint8_t modality) {
    std::vector<const eval::EmbeddingRecord*> sel;
    for (const auto& r : recs) {
        if (r.modality == modality) sel.push_back(&r);
    }
    if (sel.empty()) throw Error::data("no embeddings of requested modality");
    nn::TensorData<float> out(sel.size(), sel.front()->vec.size());
    for (std::size_t i = 0; i < sel.size(); ++i) {
        std::copy(sel[i]->vec.begin(), sel[i]->vec.end(), out.row(i));
    }
    return out;
}

int cmd_synth(const synth::SynthParams& p, const std::string& out_dir) {
    auto m = synth::generate(p, out_dir);
    std::printf("wrote %zu pairs under %s (manifest.jsonl)\n", m.size(), out_dir.c_str());
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& manifest_path,
              const std::string& out_dir, const std::string& resume,
              const std::map<std::string, double>& overrides) {
    RunConfig cfg = config_path.empty() ? RunConfig{} : load_config(config_path);
    for (const auto& [key, value] : overrides) {
        if (key == "seed") cfg.train.seed = static_cast<std::uint64_t>(value);
        else if (key == "steps") cfg.train.steps = static_cast<std::size_t>(value);
        else if (key == "batch-size") cfg.train.batch_size = static_cast<std::size_t>(value);
        else if (key == "lr") cfg.train.lr_peak = value;
        else if (key == "alpha") cfg.train.alpha = value;
        else if (key == "beta") cfg.train.beta = value;
        else if (key == "gamma") cfg.train.gamma = value;
    }
    auto manifest = io::read_manifest(manifest_path);
    auto result = train::fit(cfg, manifest, out_dir, resume);
    for (const auto& note : result.notes) std::printf("%s\n", note.c_str());
    if (!result.metrics.empty()) {
        std::printf("%s\n", result.metrics.back().to_json_line().c_str());
    }
    std::printf("final checkpoint: %s\n", result.final_checkpoint.c_str());
    return 0;
}

eval::EmbedResult embed_all(train::TrainState& state, const io::Manifest& manifest) {
    return eval::embed_manifest(state.mcfg, state.student, manifest);
}

int cmd_eval_retrieval(const std::string& manifest_path, const std::string& ckpt,
                       const std::vector<std::size_t>& ks) {
    auto manifest = io::read_manifest(manifest_path);
    auto state = io::load_checkpoint(ckpt);
    auto emb = embed_all(state, manifest);
    auto A = rows_for(emb.records, 0);
    auto T = rows_for(emb.records, 1);
    auto rel = relevant_by_caption(manifest, emb.kept);
    auto S = eval::similarity(A, T);
    nn::TensorData<float> St(S.cols, S.rows);
    for (std::size_t i = 0; i < S.rows; ++i)
        for (std::size_t j = 0; j < S.cols; ++j) St.at(j, i) = S.at(i, j);
    for (std::size_t k : ks) {
        bool clamped = false;
        const double a2t = eval::recall_at_k(S, rel, k, &clamped);
        const double t2a = eval::recall_at_k(St, rel, k, &clamped);
        if (clamped) std::fprintf(stderr, "warning: k=%zu exceeds candidate count, clamped\n", k);
        std::printf("R@%zu audio->text %.4f  text->audio %.4f\n", k, a2t, t2a);
    }
    for (const auto& p : emb.missing) std::fprintf(stderr, "missing audio: %s\n", p.c_str());
    return emb.missing.empty() ? 0 : 2;
}

int cmd_eval_zeroshot(const std::string& manifest_path, const std::string& ckpt,
                      const std::string& classes_path, const std::string& tmpl) {
    auto manifest = io::read_manifest(manifest_path);
    auto state = io::load_checkpoint(ckpt);

    std::vector<std::string> classes;
    if (classes_path.empty()) {
        // default class set: the distinct captions, in first-appearance order
        std::map<std::string, bool> seen;
        for (const auto& r : manifest.records) {
            if (!seen.count(r.caption)) {
                seen[r.caption] = true;
                classes.push_back(r.caption);
            }
        }
    } else {
        std::FILE* f = std::fopen(classes_path.c_str(), "rb");
        if (!f) throw Error::io("cannot open class list: " + classes_path);
        char line[4096];
        while (std::fgets(line, sizeof(line), f)) {
            std::string s(line);
            while (!s.empty() && (s.back() == '\n' || s.back() == '\r')) s.pop_back();
            if (!s.empty()) classes.push_back(s);
        }
        std::fclose(f);
    }

    auto emb = embed_all(state, manifest);
    auto A = rows_for(emb.records, 0);
    auto C = eval::encode_classes(state.mcfg, state.student, classes, tmpl);

    std::vector<std::string> rendered;
    for (const auto& c : classes) rendered.push_back(eval::render_class_text(tmpl, c));
    std::vector<std::size_t> labels;
    for (std::size_t i : emb.kept) {
        const auto& cap = manifest.records[i].caption;
        auto it = std::find(rendered.begin(), rendered.end(), cap);
        if (it == rendered.end()) throw Error::data("caption not in class list: " + cap);
        labels.push_back(static_cast<std::size_t>(it - rendered.begin()));
    }
    auto res = eval::zero_shot(A, C, labels);
    for (std::size_t i = 0; i < res.predicted.size(); ++i) {
        std::printf("%s\t%s\n", manifest.records[emb.kept[i]].id.c_str(),
                    classes[res.predicted[i]].c_str());
    }
    std::printf("top-1 accuracy %.4f over %zu clips, %zu classes\n", res.accuracy,
                res.predicted.size(), classes.size());
    for (const auto& p : emb.missing) std::fprintf(stderr, "missing audio: %s\n", p.c_str());
    return emb.missing.empty() ? 0 : 2;
}

int cmd_embed(const std::string& manifest_path, const std::string& ckpt, const std::string& out) {
    auto manifest = io::read_manifest(manifest_path);
    auto state = io::load_checkpoint(ckpt);
    auto emb = embed_all(state, manifest);
    eval::write_slpe(out, emb.records);
    std::printf("wrote %zu records (%zu audio + text pairs) to %s\n", emb.records.size(),
                emb.kept.size(), out.c_str());
    for (const auto& p : emb.missing) std::fprintf(stderr, "missing audio: %s\n", p.c_str());
    return emb.missing.empty() ? 0 : 2;
}

int cmd_caption(const std::string& manifest_path, const std::string& ckpt, const std::string& only_id) {
    auto manifest = io::read_manifest(manifest_path);
    auto state = io::load_checkpoint(ckpt);
    bool found = false;
    for (const auto& rec : manifest.records) {
        if (!only_id.empty() && rec.id != only_id) continue;
        found = true;
        auto feat = features_for(io::resolve_audio(manifest, rec));
        auto packed = packing::pack({feat});
        auto enc = model::audio_forward<float>(nullptr, state.student.audio, state.mcfg.audio, packed);
        auto ids = model::greedy_decode(state.student.decoder, state.mcfg.decoder, enc, 0);
        std::printf("%s\t%s\n", rec.id.c_str(), model::detokenize(ids).c_str());
    }
    if (!only_id.empty() && !found) throw Error::data("id not in manifest: " + only_id);
    return 0;
}

int cmd_grad_check(std::uint64_t seed) {
    auto rep = nn::run_grad_checks(seed);
    std::printf("clap   %.3e\nssl    %.3e\ncaption %.3e\ntotal  %.3e\n", rep.clap, rep.ssl, rep.cap,
                rep.total);
    if (rep.max() > 1e-4) {
        std::fprintf(stderr, "gradient check failed: max relative error %.3e > 1e-4\n", rep.max());
        return 3;
    }
    return 0;
}

int cmd_pack_bench(std::size_t batches, std::size_t batch_size, std::uint64_t seed) {
    auto mcfg = ModelConfig::desk();
    auto weights = model::init_model<float>(mcfg, seed);
    Rng rng = derive_rng(seed, "pack-bench");

    auto mel_like = [&](std::size_t n_time) {
        dsp::PatchSeq p;
        p.n_time = n_time;
        p.n_freq = dsp::kNumMels / dsp::kPatch;
        p.patches.resize(n_time * p.n_freq * 256);
        for (auto& v : p.patches) v = static_cast<float>(rng.normal());
        for (std::size_t t = 0; t < n_time; ++t)
            for (std::size_t f = 0; f < p.n_freq; ++f)
                p.coords.emplace_back(static_cast<int>(t), static_cast<int>(f));
        return p;
    };

    double packed_s = 0.0, padded_s = 0.0;
    std::size_t real_tokens = 0, padded_tokens = 0;
    for (std::size_t b = 0; b < batches; ++b) {
        std::vector<dsp::PatchSeq> seqs;
        std::size_t max_time = 0;
        for (std::size_t i = 0; i < batch_size; ++i) {
            // durations 1-30 s -> 6-187 time patches
            const auto nt = static_cast<std::size_t>(rng.uniform_int(6, 187));
            max_time = std::max(max_time, nt);
            seqs.push_back(mel_like(nt));
        }
        std::vector<dsp::PatchSeq> padded;
        for (const auto& s : seqs) {
            dsp::PatchSeq p = s;
            for (std::size_t t = p.n_time; t < max_time; ++t) {
                for (std::size_t f = 0; f < p.n_freq; ++f) {
                    p.coords.emplace_back(static_cast<int>(t), static_cast<int>(f));
                }
            }
            p.n_time = max_time;
            p.patches.resize(max_time * p.n_freq * 256, 0.0f);
            padded.push_back(std::move(p));
        }
        for (const auto& s : seqs) real_tokens += s.size();
        for (const auto& s : padded) padded_tokens += s.size();

        auto run = [&](const std::vector<dsp::PatchSeq>& v) {
            auto packed = packing::pack(v);
            const auto t0 = std::chrono::steady_clock::now();
            auto enc = model::audio_forward<float>(nullptr, weights.audio, mcfg.audio, packed);
            const auto t1 = std::chrono::steady_clock::now();
            (void)enc;
            return std::chrono::duration<double>(t1 - t0).count();
        };
        packed_s += run(seqs);
        padded_s += run(padded);
    }
    std::printf("packed: %zu tokens in %.3f s (%.0f tok/s)\n", real_tokens, packed_s,
                static_cast<double>(real_tokens) / packed_s);
    std::printf("padded: %zu tokens in %.3f s (%.0f tok/s), %.1f%% waste\n", padded_tokens, padded_s,
                static_cast<double>(padded_tokens) / padded_s,
                100.0 * (1.0 - static_cast<double>(real_tokens) / static_cast<double>(padded_tokens)));
    std::printf("speedup from packing: %.2fx\n", padded_s / packed_s);
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    // accepted for compatibility: numerics are single-threaded and seeded already
    if (std::getenv("SLAP_DETERMINISTIC") != nullptr) {
        // nothing to switch off; every code path is already deterministic
    }

    CLI::App app{"sequence-packed contrastive language-audio pretraining"};
    app.require_subcommand(1);

    auto* sc_synth = app.add_subcommand("synth-data", "generate a synthetic tone corpus");
    synth::SynthParams sp;
    std::string out_dir;
    sc_synth->add_option("--pairs", sp.pairs, "number of audio/caption pairs");
    sc_synth->add_option("--seed", sp.seed, "generator seed");
    sc_synth->add_option("--min-tones", sp.min_tones, "minimum tones per clip");
    sc_synth->add_option("--max-tones", sp.max_tones, "maximum tones per clip");
    sc_synth->add_option("--tone-min", sp.tone_s_min, "minimum tone duration (s)");
    sc_synth->add_option("--tone-max", sp.tone_s_max, "maximum tone duration (s)");
    sc_synth->add_option("--out", out_dir, "output directory")->required();

    auto* sc_train = app.add_subcommand("train", "train from a manifest");
    std::string config_path, manifest_path, resume, ckpt_path, slpe_path, classes_path, tmpl, only_id;
    std::map<std::string, double> overrides;
    sc_train->add_option("--config", config_path, "JSON config file");
    sc_train->add_option("--manifest", manifest_path, "training manifest")->required();
    sc_train->add_option("--out", out_dir, "run directory")->required();
    sc_train->add_option("--resume", resume, "checkpoint to resume from");
    for (const char* k : {"seed", "steps", "batch-size", "lr", "alpha", "beta", "gamma"}) {
        sc_train->add_option_function<double>(
            std::string("--") + k, [&overrides, k](double v) { overrides[k] = v; },
            "override config value");
    }

    auto* sc_retr = app.add_subcommand("eval-retrieval", "recall@k on a manifest");
    std::vector<std::size_t> ks{1, 5, 10};
    sc_retr->add_option("--manifest", manifest_path, "eval manifest")->required();
    sc_retr->add_option("--checkpoint", ckpt_path, "model checkpoint")->required();
    sc_retr->add_option("--k", ks, "recall cutoffs");

    auto* sc_zero = app.add_subcommand("eval-zeroshot", "zero-shot classification");
    sc_zero->add_option("--manifest", manifest_path, "eval manifest")->required();
    sc_zero->add_option("--checkpoint", ckpt_path, "model checkpoint")->required();
    sc_zero->add_option("--classes", classes_path, "class list file, one name per line");
    sc_zero->add_option("--template", tmpl, "class prompt template, {} marks the label");

    auto* sc_embed = app.add_subcommand("embed", "export embeddings");
    sc_embed->add_option("--manifest", manifest_path, "manifest")->required();
    sc_embed->add_option("--checkpoint", ckpt_path, "model checkpoint")->required();
    sc_embed->add_option("--out", slpe_path, "output .slpe file")->required();

    auto* sc_cap = app.add_subcommand("caption", "greedy caption decoding");
    sc_cap->add_option("--manifest", manifest_path, "manifest")->required();
    sc_cap->add_option("--checkpoint", ckpt_path, "model checkpoint")->required();
    sc_cap->add_option("--id", only_id, "decode a single record");

    auto* sc_grad = app.add_subcommand("grad-check", "finite-difference gradient check");
    std::uint64_t seed = 7;
    sc_grad->add_option("--seed", seed, "check seed");

    auto* sc_bench = app.add_subcommand("pack-bench", "packed vs padded throughput");
    std::size_t batches = 10, batch_size = 8;
    sc_bench->add_option("--batches", batches, "batches to run");
    sc_bench->add_option("--batch-size", batch_size, "clips per batch");
    sc_bench->add_option("--seed", seed, "data seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        if (sc_synth->parsed()) return cmd_synth(sp, out_dir);
        if (sc_train->parsed()) return cmd_train(config_path, manifest_path, out_dir, resume, overrides);
        if (sc_retr->parsed()) return cmd_eval_retrieval(manifest_path, ckpt_path, ks);
        if (sc_zero->parsed()) return cmd_eval_zeroshot(manifest_path, ckpt_path, classes_path, tmpl);
        if (sc_embed->parsed()) return cmd_embed(manifest_path, ckpt_path, slpe_path);
        if (sc_cap->parsed()) return cmd_caption(manifest_path, ckpt_path, only_id);
        if (sc_grad->parsed()) return cmd_grad_check(seed);
        if (sc_bench->parsed()) return cmd_pack_bench(batches, batch_size, seed);
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return exit_code_for(e);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 0;
}
