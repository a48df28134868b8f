#pragma once

#include <cstddef>
#include <utility>
#include <vector>

#include "slap/dsp.hpp"
#include "slap/rng.hpp"

namespace slap::packing {

// All samples of a batch concatenated into one token stream. No padding
// tokens exist anywhere; per-sample extents live in `boundaries`
// (cumulative lengths: [0, n_1, n_1+n_2, ..., L_total]).
struct PackedBatch {
    std::size_t rows = 0; // L_total
    std::size_t cols = 0; // 256 raw, H after projection
    std::vector<float> tokens; // row-major rows x cols
    std::vector<std::size_t> boundaries;
    std::vector<std::pair<int, int>> coords; // per token (t_idx, f_idx)

    std::size_t sample_count() const { return boundaries.empty() ? 0 : boundaries.size() - 1; }
    float* row(std::size_t r) { return tokens.data() + r * cols; }
    const float* row(std::size_t r) const { return tokens.data() + r * cols; }
    void validate() const; // boundary/coord invariants
};

struct MaskPlan {
    double ratio = 0.0;
    std::vector<std::vector<std::size_t>> masked; // per sample, global token indices, ascending

    std::vector<std::size_t> flat() const;
    std::size_t total() const;
};

PackedBatch pack(const std::vector<dsp::PatchSeq>& seqs);

std::vector<dsp::PatchSeq> unpack(const PackedBatch& p);

// Per-sample uniform sampling without replacement; round(ratio * n_i) tokens,
// at least one when ratio > 0.
MaskPlan plan_mask(const PackedBatch& p, double ratio, Rng& rng);

// Replace planned rows with `mask_row` (length == p.cols). Coords and
// boundaries are untouched: the mask swaps content, not position.
PackedBatch apply_mask(const PackedBatch& p, const MaskPlan& plan, const std::vector<float>& mask_row);

} // namespace slap::packing
