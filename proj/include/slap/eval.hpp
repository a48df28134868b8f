#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "slap/config.hpp"
#include "slap/manifest.hpp"
#include "slap/model.hpp"
#include "slap/tensor.hpp"

namespace slap::eval {

struct EmbeddingRecord {
    std::string id;
    std::uint8_t modality = 0; // 0 audio, 1 text
    std::vector<float> vec;
};

struct EmbedResult {
    std::vector<EmbeddingRecord> records; // all audio rows, then all text rows, manifest order
    std::vector<std::string> missing;     // audio paths that failed to load (run continues)
    std::vector<std::size_t> kept;        // manifest indices that were embedded
};

EmbedResult embed_manifest(const ModelConfig& mcfg, model::ModelWeights<float>& weights,
                           const io::Manifest& manifest, std::size_t batch_size = 16);

// "SLPE" container: magic, version u32, count u32, D u32, then per record
// a length-prefixed id, modality byte, and D little-endian f32 values.
void write_slpe(const std::string& path, const std::vector<EmbeddingRecord>& records);
std::vector<EmbeddingRecord> read_slpe(const std::string& path);

// A·Bᵀ over row-normalized embeddings; entries are cosines
nn::TensorData<float> similarity(const nn::TensorData<float>& a, const nn::TensorData<float>& b);

// Fraction of queries (rows of S) with any relevant candidate in the top k.
// Ties rank the lower column index first. k larger than the candidate count
// clamps (sets *clamped so callers can warn).
double recall_at_k(const nn::TensorData<float>& S,
                   const std::vector<std::vector<std::size_t>>& relevant, std::size_t k,
                   bool* clamped = nullptr);

struct ZeroShotResult {
    std::vector<std::size_t> predicted;
    double accuracy = 0.0;
};

// Argmax cosine against class embeddings; ties pick the lower class index.
ZeroShotResult zero_shot(const nn::TensorData<float>& audio_emb,
                         const nn::TensorData<float>& class_emb,
                         const std::vector<std::size_t>& labels);

// Class texts through the text tower. `tmpl` may hold "{}" to wrap the label
// ("the sound of {}"); empty means the raw label. Duplicate names rejected.
nn::TensorData<float> encode_classes(const ModelConfig& mcfg, model::ModelWeights<float>& weights,
                                     const std::vector<std::string>& classes,
                                     const std::string& tmpl = "");

// The prompt a label becomes under `tmpl`; ground truth matches captions
// against this rendered form.
std::string render_class_text(const std::string& tmpl, const std::string& label);

} // namespace slap::eval
