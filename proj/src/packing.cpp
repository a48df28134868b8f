#include "slap/packing.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "slap/error.hpp"

namespace slap::packing {

void PackedBatch::validate() const {
    if (boundaries.size() < 2 || boundaries.front() != 0 || boundaries.back() != rows) {
        throw Error::data("packed batch boundaries do not span the token stream");
    }
    for (std::size_t i = 1; i < boundaries.size(); ++i) {
        if (boundaries[i] <= boundaries[i - 1]) {
            throw Error::data("packed batch boundaries must be strictly increasing");
        }
    }
    if (tokens.size() != rows * cols || coords.size() != rows) {
        throw Error::data("packed batch storage inconsistent with row count");
    }
}

PackedBatch pack(const std::vector<dsp::PatchSeq>& seqs) {
    if (seqs.empty()) throw Error::data("pack: empty batch");
    PackedBatch p;
    p.cols = dsp::kPatch * dsp::kPatch;
    p.boundaries.push_back(0);
    std::size_t total = 0;
    for (const auto& s : seqs) {
        if (s.size() == 0) throw Error::data("pack: empty patch sequence");
        total += s.size();
        p.boundaries.push_back(total);
    }
    p.rows = total;
    p.tokens.resize(total * p.cols);
    p.coords.resize(total);

    std::size_t at = 0;
    for (const auto& s : seqs) {
        std::memcpy(p.tokens.data() + at * p.cols, s.patches.data(), s.patches.size() * sizeof(float));
        std::copy(s.coords.begin(), s.coords.end(), p.coords.begin() + static_cast<std::ptrdiff_t>(at));
        at += s.size();
    }
    return p;
}

std::vector<dsp::PatchSeq> unpack(const PackedBatch& p) {
    p.validate();
    std::vector<dsp::PatchSeq> out;
    out.reserve(p.sample_count());
    for (std::size_t i = 0; i + 1 < p.boundaries.size(); ++i) {
        const std::size_t b0 = p.boundaries[i];
        const std::size_t b1 = p.boundaries[i + 1];
        dsp::PatchSeq s;
        s.coords.assign(p.coords.begin() + static_cast<std::ptrdiff_t>(b0),
                        p.coords.begin() + static_cast<std::ptrdiff_t>(b1));
        s.patches.assign(p.tokens.begin() + static_cast<std::ptrdiff_t>(b0 * p.cols),
                         p.tokens.begin() + static_cast<std::ptrdiff_t>(b1 * p.cols));
        int max_t = 0, max_f = 0;
        for (const auto& [t, f] : s.coords) {
            max_t = std::max(max_t, t);
            max_f = std::max(max_f, f);
        }
        s.n_time = static_cast<std::size_t>(max_t) + 1;
        s.n_freq = static_cast<std::size_t>(max_f) + 1;
        out.push_back(std::move(s));
    }
    return out;
}

MaskPlan plan_mask(const PackedBatch& p, double ratio, Rng& rng) {
    if (ratio < 0.0 || ratio > 1.0) throw Error::data("mask ratio must be in [0, 1]");
    p.validate();
    MaskPlan plan;
    plan.ratio = ratio;
    plan.masked.resize(p.sample_count());
    for (std::size_t i = 0; i + 1 < p.boundaries.size(); ++i) {
        const std::size_t b0 = p.boundaries[i];
        const std::size_t n = p.boundaries[i + 1] - b0;
        std::size_t count = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n)));
        if (ratio > 0.0 && n >= 1 && count == 0) count = 1;
        count = std::min(count, n);
        if (count == 0) continue;

        // partial Fisher-Yates over segment offsets
        std::vector<std::size_t> pool(n);
        for (std::size_t j = 0; j < n; ++j) pool[j] = j;
        for (std::size_t j = 0; j < count; ++j) {
            const std::size_t pick =
                j + static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(n - j) - 1));
            std::swap(pool[j], pool[pick]);
        }
        auto& idx = plan.masked[i];
        idx.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(count));
        for (auto& v : idx) v += b0;
        std::sort(idx.begin(), idx.end());
    }
    return plan;
}

std::vector<std::size_t> MaskPlan::flat() const {
    std::vector<std::size_t> all;
    for (const auto& m : masked) all.insert(all.end(), m.begin(), m.end());
    return all;
}

std::size_t MaskPlan::total() const {
    std::size_t n = 0;
    for (const auto& m : masked) n += m.size();
    return n;
}

PackedBatch apply_mask(const PackedBatch& p, const MaskPlan& plan, const std::vector<float>& mask_row) {
    p.validate();
    if (mask_row.size() != p.cols) throw Error::data("mask embedding width mismatch");
    if (plan.masked.size() != p.sample_count()) throw Error::data("mask plan sample count mismatch");
    PackedBatch out = p;
    for (std::size_t i = 0; i < plan.masked.size(); ++i) {
        for (std::size_t g : plan.masked[i]) {
            if (g < p.boundaries[i] || g >= p.boundaries[i + 1]) {
                throw Error::data("mask index outside its sample segment");
            }
            std::memcpy(out.row(g), mask_row.data(), p.cols * sizeof(float));
        }
    }
    return out;
}

} // namespace slap::packing
