#include "slap/eval.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <set>

#include "slap/dsp.hpp"
#include "slap/error.hpp"
#include "slap/losses.hpp"
#include "slap/packing.hpp"

namespace slap::eval {

namespace {

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

void append_rows(std::vector<EmbeddingRecord>& out, const nn::TensorData<float>& rows,
                 const io::Manifest& manifest, const std::vector<std::size_t>& idx,
                 std::uint8_t modality) {
    for (std::size_t r = 0; r < rows.rows; ++r) {
        EmbeddingRecord rec;
        rec.id = manifest.records[idx[r]].id;
        rec.modality = modality;
        rec.vec.assign(rows.row(r), rows.row(r) + rows.cols);
        out.push_back(std::move(rec));
    }
}

} // namespace

EmbedResult embed_manifest(const ModelConfig& mcfg, model::ModelWeights<float>& weights,
                           const io::Manifest& manifest, std::size_t batch_size) {
    if (manifest.empty()) throw Error::data("embed: empty manifest");
    if (batch_size == 0) throw Error::config("embed: batch_size must be positive");

    EmbedResult out;
    std::vector<dsp::PatchSeq> feats;
    for (std::size_t i = 0; i < manifest.size(); ++i) {
        const std::string path = io::resolve_audio(manifest, manifest.records[i]);
        try {
            feats.push_back(features_for(path));
            out.kept.push_back(i);
        } catch (const Error&) {
            out.missing.push_back(path);
        }
    }
    if (out.kept.empty()) throw Error::data("embed: no loadable audio in manifest");

    std::vector<EmbeddingRecord> audio_recs, text_recs;
    for (std::size_t lo = 0; lo < out.kept.size(); lo += batch_size) {
        const std::size_t hi = std::min(out.kept.size(), lo + batch_size);
        std::vector<dsp::PatchSeq> chunk(feats.begin() + static_cast<std::ptrdiff_t>(lo),
                                         feats.begin() + static_cast<std::ptrdiff_t>(hi));
        std::vector<std::size_t> idx(out.kept.begin() + static_cast<std::ptrdiff_t>(lo),
                                     out.kept.begin() + static_cast<std::ptrdiff_t>(hi));

        auto packed = packing::pack(chunk);
        auto enc = model::audio_forward<float>(nullptr, weights.audio, mcfg.audio, packed);
        auto ea = heads::map_pool<float>(nullptr, weights.map_audio, enc.features, enc.boundaries,
                                         mcfg.audio.n_heads);
        append_rows(audio_recs, ea.val(), manifest, idx, 0);

        std::vector<std::vector<int>> toks;
        for (std::size_t i : idx) {
            toks.push_back(model::tokenize(manifest.records[i].caption, mcfg.text.max_len));
        }
        auto txt = model::text_forward<float>(nullptr, weights.text, mcfg.text, toks);
        auto et = heads::map_pool<float>(nullptr, weights.map_text, txt.features, txt.boundaries,
                                         mcfg.text.n_heads);
        append_rows(text_recs, et.val(), manifest, idx, 1);
    }

    out.records = std::move(audio_recs);
    out.records.insert(out.records.end(), std::make_move_iterator(text_recs.begin()),
                       std::make_move_iterator(text_recs.end()));
    return out;
}

namespace {

template <typename T>
void put(std::string& buf, T v) {
    char tmp[sizeof(T)];
    std::memcpy(tmp, &v, sizeof(T));
    buf.append(tmp, sizeof(T));
}

template <typename T>
T take(const std::string& buf, std::size_t& off) {
    if (off + sizeof(T) > buf.size()) throw Error::data("embedding file truncated");
    T v;
    std::memcpy(&v, buf.data() + off, sizeof(T));
    off += sizeof(T);
    return v;
}

} // namespace

void write_slpe(const std::string& path, const std::vector<EmbeddingRecord>& records) {
    if (records.empty()) throw Error::data("write_slpe: no records");
    const std::size_t d = records.front().vec.size();
    for (const auto& r : records) {
        if (r.vec.size() != d) throw Error::data("write_slpe: inconsistent dimensions");
    }
    std::string buf;
    buf.append("SLPE", 4);
    put<std::uint32_t>(buf, 1);
    put<std::uint32_t>(buf, static_cast<std::uint32_t>(records.size()));
    put<std::uint32_t>(buf, static_cast<std::uint32_t>(d));
    for (const auto& r : records) {
        put<std::uint32_t>(buf, static_cast<std::uint32_t>(r.id.size()));
        buf.append(r.id);
        buf.push_back(static_cast<char>(r.modality));
        buf.append(reinterpret_cast<const char*>(r.vec.data()), d * sizeof(float));
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error::io("cannot write embeddings: " + path);
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw Error::io("embedding write failed: " + path);
}

std::vector<EmbeddingRecord> read_slpe(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error::io("cannot open embeddings: " + path);
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    std::size_t off = 0;
    if (buf.size() < 4 || buf.compare(0, 4, "SLPE") != 0) {
        throw Error::data("embedding file: bad magic");
    }
    off = 4;
    const auto version = take<std::uint32_t>(buf, off);
    if (version != 1) {
        throw Error::data("embedding file: unsupported version " + std::to_string(version));
    }
    const auto count = take<std::uint32_t>(buf, off);
    const auto d = take<std::uint32_t>(buf, off);
    std::vector<EmbeddingRecord> records;
    records.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        EmbeddingRecord r;
        const auto id_len = take<std::uint32_t>(buf, off);
        if (off + id_len > buf.size()) throw Error::data("embedding file truncated");
        r.id.assign(buf, off, id_len);
        off += id_len;
        r.modality = static_cast<std::uint8_t>(take<char>(buf, off));
        if (r.modality > 1) throw Error::data("embedding file: bad modality byte");
        r.vec.resize(d);
        if (off + d * sizeof(float) > buf.size()) throw Error::data("embedding file truncated");
        std::memcpy(r.vec.data(), buf.data() + off, d * sizeof(float));
        off += d * sizeof(float);
        records.push_back(std::move(r));
    }
    if (off != buf.size()) throw Error::data("embedding file: trailing bytes");
    return records;
}

nn::TensorData<float> similarity(const nn::TensorData<float>& a, const nn::TensorData<float>& b) {
    if (a.cols != b.cols) throw Error::data("similarity: dimension mismatch");
    nn::TensorData<float> s(a.rows, b.rows);
    nn::emap(s) = nn::emap(a) * nn::emap(b).transpose();
    return s;
}

double recall_at_k(const nn::TensorData<float>& S,
                   const std::vector<std::vector<std::size_t>>& relevant, std::size_t k,
                   bool* clamped) {
    if (S.rows == 0 || S.cols == 0) throw Error::data("recall_at_k: empty similarity matrix");
    if (relevant.size() != S.rows) throw Error::data("recall_at_k: one relevant set per query");
    if (clamped) *clamped = k > S.cols;
    k = std::max<std::size_t>(1, std::min(k, S.cols));

    std::size_t hits = 0;
    for (std::size_t q = 0; q < S.rows; ++q) {
        if (relevant[q].empty()) throw Error::data("recall_at_k: query without relevant items");
        bool hit = false;
        for (std::size_t r : relevant[q]) {
            if (r >= S.cols) throw Error::data("recall_at_k: relevant index out of range");
            // rank = how many candidates outrank r under (score desc, index asc)
            std::size_t rank = 0;
            const float sr = S.at(q, r);
            for (std::size_t j = 0; j < S.cols && rank < k; ++j) {
                if (S.at(q, j) > sr || (S.at(q, j) == sr && j < r)) ++rank;
            }
            if (rank < k) {
                hit = true;
                break;
            }
        }
        hits += hit ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(S.rows);
}

ZeroShotResult zero_shot(const nn::TensorData<float>& audio_emb,
                         const nn::TensorData<float>& class_emb,
                         const std::vector<std::size_t>& labels) {
    if (class_emb.rows < 2) throw Error::data("zero_shot: need at least 2 classes");
    if (audio_emb.cols != class_emb.cols) throw Error::data("zero_shot: dimension mismatch");
    if (labels.size() != audio_emb.rows) throw Error::data("zero_shot: one label per clip");

    auto S = similarity(audio_emb, class_emb);
    ZeroShotResult out;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < S.rows; ++i) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < S.cols; ++c) {
            if (S.at(i, c) > S.at(i, best)) best = c;
        }
        out.predicted.push_back(best);
        if (labels[i] >= class_emb.rows) throw Error::data("zero_shot: label out of range");
        if (best == labels[i]) ++correct;
    }
    out.accuracy = static_cast<double>(correct) / static_cast<double>(S.rows);
    return out;
}

std::string render_class_text(const std::string& tmpl, const std::string& label) {
    if (tmpl.empty()) return label;
    const auto pos = tmpl.find("{}");
    return pos == std::string::npos ? tmpl + " " + label
                                    : tmpl.substr(0, pos) + label + tmpl.substr(pos + 2);
}

nn::TensorData<float> encode_classes(const ModelConfig& mcfg, model::ModelWeights<float>& weights,
                                     const std::vector<std::string>& classes,
                                     const std::string& tmpl) {
    if (classes.size() < 2) throw Error::data("encode_classes: need at least 2 classes");
    std::set<std::string> seen;
    std::vector<std::vector<int>> toks;
    for (const auto& c : classes) {
        if (!seen.insert(c).second) throw Error::data("encode_classes: duplicate class '" + c + "'");
        toks.push_back(model::tokenize(render_class_text(tmpl, c), mcfg.text.max_len));
    }
    auto txt = model::text_forward<float>(nullptr, weights.text, mcfg.text, toks);
    auto et = heads::map_pool<float>(nullptr, weights.map_text, txt.features, txt.boundaries,
                                     mcfg.text.n_heads);
    return et.val();
}

} // namespace slap::eval
