#pragma once

#include <cassert>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "slap/model.hpp"
#include "slap/ops.hpp"
#include "slap/tensor.hpp"

namespace slap::heads {

// MAP pooling: the learned query cross-attends over each segment, heads
// concatenated, projected to D, L2-normalized. One row per sample.
template <typename T>
nn::Var<T> map_pool(nn::Tape<T>* tape, const model::MapHeadWeights<T>& w, const nn::Var<T>& feat,
                    const std::vector<std::size_t>& bounds, std::size_t n_heads) {
    auto k = nn::matmul(tape, feat, w.wk);
    auto v = nn::matmul(tape, feat, w.wv);
    auto pooled = nn::query_attend(tape, w.query, k, v, bounds, n_heads);
    return nn::l2norm_rows(tape, nn::matmul(tape, pooled, w.wout));
}

// Symmetric in-batch NLL over audio/text similarities, temperature exp(log_tau).
template <typename T>
nn::Var<T> clap_loss(nn::Tape<T>* tape, const nn::Var<T>& ea, const nn::Var<T>& et,
                     const nn::Var<T>& log_tau) {
    if (ea.rows() != et.rows() || ea.cols() != et.cols()) {
        throw Error::config("clap_loss: embedding shape mismatch");
    }
#ifndef NDEBUG
    for (std::size_t r = 0; r < ea.rows(); ++r) {
        assert(std::abs(nn::emap(ea.val()).row(static_cast<Eigen::Index>(r)).norm() - T(1)) < T(1e-3));
        assert(std::abs(nn::emap(et.val()).row(static_cast<Eigen::Index>(r)).norm() - T(1)) < T(1e-3));
    }
#endif
    auto inv_tau = nn::exp_scalar(tape, nn::scale_const(tape, log_tau, T(-1)));
    auto sim_a = nn::scale_by(tape, nn::matmul_nt(tape, ea, et), inv_tau);
    auto sim_t = nn::scale_by(tape, nn::matmul_nt(tape, et, ea), inv_tau);
    std::vector<std::size_t> diag(ea.rows());
    std::iota(diag.begin(), diag.end(), std::size_t{0});
    auto ce_a = nn::cross_entropy_targets(tape, sim_a, diag);
    auto ce_t = nn::cross_entropy_targets(tape, sim_t, diag);
    return nn::weighted_sum(tape, {ce_a, ce_t}, {T(0.5), T(0.5)});
}

// Raw prototype logits: z·prototypesᵀ with z = L2norm(mlp(rows)).
template <typename T>
nn::Var<T> proto_logits(nn::Tape<T>* tape, const model::ProtoHeadWeights<T>& w, const nn::Var<T>& rows) {
    auto h = nn::silu(tape, nn::matmul(tape, rows, w.w1));
    auto z = nn::l2norm_rows(tape, nn::matmul(tape, h, w.w2));
    return nn::matmul_nt(tape, z, w.prototypes);
}

// Row-stochastic prototype scores; the teacher path passes its center.
template <typename T>
nn::TensorData<T> prototype_scores(const model::ProtoHeadWeights<T>& w, const nn::TensorData<T>& rows,
                                   T temp, const nn::TensorData<T>* center = nullptr) {
    if (temp <= T(0)) throw Error::config("prototype_scores: temp must be positive");
    nn::Var<T> r(rows);
    auto logits = proto_logits<T>(nullptr, w, r);
    nn::TensorData<T> q = logits.val();
    for (std::size_t i = 0; i < q.rows; ++i) {
        T* row = q.row(i);
        for (std::size_t j = 0; j < q.cols; ++j) {
            const T c = center ? center->v[j] : T(0);
            row[j] = (row[j] - c) / temp;
        }
    }
    nn::softmax_rows_value(q);
    return q;
}

// Mean over masked tokens of −Σ_j Q_t log Q_s, with Q_s = softmax(raw/t_student).
template <typename T>
nn::Var<T> ssl_loss(nn::Tape<T>* tape, const nn::Var<T>& student_raw,
                    const nn::TensorData<T>& teacher_probs, T t_student) {
    auto scaled = nn::scale_const(tape, student_raw, T(1) / t_student);
    return nn::soft_cross_entropy(tape, scaled, teacher_probs);
}

// Value-level CE between row-stochastic matrices (goldens, diagnostics).
template <typename T>
T soft_ce_value(const nn::TensorData<T>& q_t, const nn::TensorData<T>& q_s) {
    if (q_t.rows != q_s.rows || q_t.cols != q_s.cols) {
        throw Error::config("soft_ce_value: shape mismatch");
    }
    T acc = T(0);
    for (std::size_t i = 0; i < q_t.rows; ++i) {
        for (std::size_t j = 0; j < q_t.cols; ++j) {
            acc -= q_t.at(i, j) * std::log(q_s.at(i, j));
        }
    }
    return acc / static_cast<T>(q_t.rows);
}

// α·l_clap + β·l_ssl + γ·l_cap; non-finite components are named.
template <typename T>
nn::Var<T> total_loss(nn::Tape<T>* tape, const nn::Var<T>& l_clap, const nn::Var<T>& l_ssl,
                      const nn::Var<T>& l_cap, T alpha, T beta, T gamma) {
    const char* names[] = {"l_clap", "l_ssl", "l_cap"};
    const nn::Var<T>* parts[] = {&l_clap, &l_ssl, &l_cap};
    for (int i = 0; i < 3; ++i) {
        if (!std::isfinite(parts[i]->scalar())) {
            throw Error::numeric(std::string("total_loss: non-finite component ") + names[i]);
        }
    }
    return nn::weighted_sum(tape, {l_clap, l_ssl, l_cap}, {alpha, beta, gamma});
}

} // namespace slap::heads
