#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <memory>
#include <optional>
#include <utility>
#include <vector>

#include "slap/error.hpp"
#include "slap/tensor.hpp"

namespace slap::nn {

template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapM = Eigen::Map<EMat<T>>;
template <typename T>
using CMapM = Eigen::Map<const EMat<T>>;
template <typename T>
using SMap = Eigen::Map<EMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using CSMap = Eigen::Map<const EMat<T>, 0, Eigen::OuterStride<>>;

template <typename T>
MapM<T> emap(TensorData<T>& t) {
    return MapM<T>(t.data(), static_cast<Eigen::Index>(t.rows), static_cast<Eigen::Index>(t.cols));
}
template <typename T>
CMapM<T> emap(const TensorData<T>& t) {
    return CMapM<T>(t.data(), static_cast<Eigen::Index>(t.rows), static_cast<Eigen::Index>(t.cols));
}

// Rows [r0,r1), columns [c0,c0+w) of a row-major buffer, as a strided view.
// Used for per-head slices of packed activations.
template <typename T>
SMap<T> block_view(TensorData<T>& t, std::size_t r0, std::size_t r1, std::size_t c0, std::size_t w) {
    return SMap<T>(t.data() + r0 * t.cols + c0, static_cast<Eigen::Index>(r1 - r0),
                   static_cast<Eigen::Index>(w), Eigen::OuterStride<>(static_cast<Eigen::Index>(t.cols)));
}
template <typename T>
CSMap<T> block_view(const TensorData<T>& t, std::size_t r0, std::size_t r1, std::size_t c0, std::size_t w) {
    return CSMap<T>(t.data() + r0 * t.cols + c0, static_cast<Eigen::Index>(r1 - r0),
                    static_cast<Eigen::Index>(w), Eigen::OuterStride<>(static_cast<Eigen::Index>(t.cols)));
}

// ---------------------------------------------------------------------------
// elementwise and linear ops

template <typename T>
Var<T> matmul(Tape<T>* tape, const Var<T>& a, const Var<T>& b) {
    if (a.cols() != b.rows()) throw Error::config("matmul: shape mismatch");
    Var<T> y(a.rows(), b.cols());
    emap(y.val()).noalias() = emap(a.val()) * emap(b.val());
    check_finite(y.val(), "matmul");
    if (tape) {
        auto an = a.node(), bn = b.node(), yn = y.node();
        tape->record([an, bn, yn] {
            if (yn->grad.v.empty()) return;
            an->ensure_grad();
            bn->ensure_grad();
            emap(an->grad).noalias() += emap(yn->grad) * emap(bn->val).transpose();
            emap(bn->grad).noalias() += emap(an->val).transpose() * emap(yn->grad);
        });
    }
    return y;
}

// y = a·bᵀ
template <typename T>
Var<T> matmul_nt(Tape<T>* tape, const Var<T>& a, const Var<T>& b) {
    if (a.cols() != b.cols()) throw Error::config("matmul_nt: shape mismatch");
    Var<T> y(a.rows(), b.rows());
    emap(y.val()).noalias() = emap(a.val()) * emap(b.val()).transpose();
    check_finite(y.val(), "matmul_nt");
    if (tape) {
        auto an = a.node(), bn = b.node(), yn = y.node();
        tape->record([an, bn, yn] {
            if (yn->grad.v.empty()) return;
            an->ensure_grad();
            bn->ensure_grad();
            emap(an->grad).noalias() += emap(yn->grad) * emap(bn->val);
            emap(bn->grad).noalias() += emap(yn->grad).transpose() * emap(an->val);
        });
    }
    return y;
}

template <typename T>
Var<T> add(Tape<T>* tape, const Var<T>& a, const Var<T>& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) throw Error::config("add: shape mismatch");
    Var<T> y(a.rows(), a.cols());
    emap(y.val()) = emap(a.val()) + emap(b.val());
    check_finite(y.val(), "add");
    if (tape) {
        auto an = a.node(), bn = b.node(), yn = y.node();
        tape->record([an, bn, yn] {
            if (yn->grad.v.empty()) return;
            an->ensure_grad();
            bn->ensure_grad();
            emap(an->grad) += emap(yn->grad);
            emap(bn->grad) += emap(yn->grad);
        });
    }
    return y;
}

template <typename T>
Var<T> hadamard(Tape<T>* tape, const Var<T>& a, const Var<T>& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) throw Error::config("hadamard: shape mismatch");
    Var<T> y(a.rows(), a.cols());
    emap(y.val()) = emap(a.val()).cwiseProduct(emap(b.val()));
    check_finite(y.val(), "hadamard");
    if (tape) {
        auto an = a.node(), bn = b.node(), yn = y.node();
        tape->record([an, bn, yn] {
            if (yn->grad.v.empty()) return;
            an->ensure_grad();
            bn->ensure_grad();
            emap(an->grad) += emap(yn->grad).cwiseProduct(emap(bn->val));
            emap(bn->grad) += emap(yn->grad).cwiseProduct(emap(an->val));
        });
    }
    return y;
}

template <typename T>
Var<T> scale_const(Tape<T>* tape, const Var<T>& x, T c) {
    Var<T> y(x.rows(), x.cols());
    emap(y.val()) = emap(x.val()) * c;
    check_finite(y.val(), "scale_const");
    if (tape) {
        auto xn = x.node();
        auto yn = y.node();
        tape->record([xn, yn, c] {
            if (yn->grad.v.empty()) return;
            xn->ensure_grad();
            emap(xn->grad) += emap(yn->grad) * c;
        });
    }
    return y;
}

// y = s·x with scalar s (1×1)
template <typename T>
Var<T> scale_by(Tape<T>* tape, const Var<T>& x, const Var<T>& s) {
    if (s.val().size() != 1) throw Error::config("scale_by: scalar expected");
    Var<T> y(x.rows(), x.cols());
    emap(y.val()) = emap(x.val()) * s.scalar();
    check_finite(y.val(), "scale_by");
    if (tape) {
        auto xn = x.node(), sn = s.node(), yn = y.node();
        tape->record([xn, sn, yn] {
            if (yn->grad.v.empty()) return;
            xn->ensure_grad();
            sn->ensure_grad();
            emap(xn->grad) += emap(yn->grad) * sn->val.v[0];
            sn->grad.v[0] += (emap(yn->grad).cwiseProduct(emap(xn->val))).sum();
        });
    }
    return y;
}

template <typename T>
Var<T> exp_scalar(Tape<T>* tape, const Var<T>& x) {
    if (x.val().size() != 1) throw Error::config("exp_scalar: scalar expected");
    Var<T> y(1, 1);
    y.val().v[0] = std::exp(x.scalar());
    check_finite(y.val(), "exp_scalar");
    if (tape) {
        auto xn = x.node(), yn = y.node();
        tape->record([xn, yn] {
            if (yn->grad.v.empty()) return;
            xn->ensure_grad();
            xn->grad.v[0] += yn->grad.v[0] * yn->val.v[0];
        });
    }
    return y;
}

template <typename T>
Var<T> silu(Tape<T>* tape, const Var<T>& x) {
    Var<T> y(x.rows(), x.cols());
    auto sig = std::make_shared<std::vector<T>>(x.val().size());
    for (std::size_t i = 0; i < x.val().size(); ++i) {
        const T xi = x.val().v[i];
        const T s = T(1) / (T(1) + std::exp(-xi));
        (*sig)[i] = s;
        y.val().v[i] = xi * s;
    }
    check_finite(y.val(), "silu");
    if (tape) {
        auto xn = x.node(), yn = y.node();
        tape->record([xn, yn, sig] {
            if (yn->grad.v.empty()) return;
            xn->ensure_grad();
            for (std::size_t i = 0; i < xn->val.size(); ++i) {
                const T s = (*sig)[i];
                xn->grad.v[i] += yn->grad.v[i] * s * (T(1) + xn->val.v[i] * (T(1) - s));
            }
        });
    }
    return y;
}

// y_j = g_j · x_j / sqrt(mean_j(x_j²) + eps), per row; g is 1×H
template <typename T>
Var<T> rmsnorm(Tape<T>* tape, const Var<T>& x, const Var<T>& g, T eps = T(1e-6)) {
    const std::size_t H = x.cols();
    if (g.rows() != 1 || g.cols() != H) throw Error::config("rmsnorm: gain shape mismatch");
    Var<T> y(x.rows(), H);
    auto inv = std::make_shared<std::vector<T>>(x.rows());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        const T* xr = x.val().row(r);
        T ms = T(0);
        for (std::size_t j = 0; j < H; ++j) ms += xr[j] * xr[j];
        ms /= static_cast<T>(H);
        const T iv = T(1) / std::sqrt(ms + eps);
        (*inv)[r] = iv;
        T* yr = y.val().row(r);
        const T* gv = g.val().data();
        for (std::size_t j = 0; j < H; ++j) yr[j] = gv[j] * xr[j] * iv;
    }
    check_finite(y.val(), "rmsnorm");
    if (tape) {
        auto xn = x.node(), gn = g.node(), yn = y.node();
        tape->record([xn, gn, yn, inv, H] {
            if (yn->grad.v.empty()) return;
            xn->ensure_grad();
            gn->ensure_grad();
            for (std::size_t r = 0; r < xn->val.rows; ++r) {
                const T* xr = xn->val.row(r);
                const T* dy = yn->grad.row(r);
                const T* gv = gn->val.data();
                T* dx = xn->grad.row(r);
                T* dg = gn->grad.data();
                const T iv = (*inv)[r];
                T s = T(0);
                for (std::size_t j = 0; j < H; ++j) s += dy[j] * gv[j] * xr[j];
                const T c = s * iv * iv * iv / static_cast<T>(H);
                for (std::size_t j = 0; j < H; ++j) {
                    dx[j] += dy[j] * gv[j] * iv - xr[j] * c;
                    dg[j] += dy[j] * xr[j] * iv;
                }
            }
        });
    }
    return y;
}

template <typename T>
Var<T> l2norm_rows(Tape<T>* tape, const Var<T>& x, T eps = T(1e-12)) {
    Var<T> y(x.rows(), x.cols());
    auto inv = std::make_shared<std::vector<T>>(x.rows());
    {
        auto X = emap(x.val());
        auto Y = emap(y.val());
        for (Eigen::Index r = 0; r < X.rows(); ++r) {
            const T n = std::max(X.row(r).norm(), eps);
            (*inv)[static_cast<std::size_t>(r)] = T(1) / n;
            Y.row(r) = X.row(r) / n;
        }
    }
    check_finite(y.val(), "l2norm_rows");
    if (tape) {
        auto xn = x.node(), yn = y.node();
        tape->record([xn, yn, inv] {
            if (yn->grad.v.empty()) return;
            xn->ensure_grad();
            auto Y = emap(yn->val);
            auto dY = emap(yn->grad);
            auto dX = emap(xn->grad);
            for (Eigen::Index r = 0; r < Y.rows(); ++r) {
                const T dot = Y.row(r).dot(dY.row(r));
                dX.row(r) += (dY.row(r) - Y.row(r) * dot) * (*inv)[static_cast<std::size_t>(r)];
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// rotary embedding

namespace detail {

// cs/sn hold, per row, d/4 time angles then d/4 frequency angles.
template <typename T>
void rope_apply(const TensorData<T>& in, TensorData<T>& out, const std::vector<T>& cs,
                const std::vector<T>& sn, std::size_t n_heads, std::size_t d, bool inverse) {
    const std::size_t half = d / 2;
    for (std::size_t r = 0; r < in.rows; ++r) {
        const T* xi = in.row(r);
        T* yo = out.row(r);
        for (std::size_t h = 0; h < n_heads; ++h) {
            const std::size_t o = h * d;
            // k < d/4: time pair at channels (2k, 2k+1); k >= d/4: freq pair,
            // landing at half+2(k-d/4) which is again 2k since half == d/2
            for (std::size_t k = 0; k < half; ++k) {
                const std::size_t ch = o + 2 * k;
                const T c = cs[r * half + k];
                const T s = inverse ? -sn[r * half + k] : sn[r * half + k];
                const T a = xi[ch], b = xi[ch + 1];
                yo[ch] = a * c - b * s;
                yo[ch + 1] = a * s + b * c;
            }
        }
    }
}

} // namespace detail

// 2D axial RoPE. Per head of dim d (d % 4 == 0): channels [0, d/2) carry the
// time rotation, channels [d/2, d) the frequency rotation; within each half,
// pair k = channels (2k, 2k+1) rotates by angle coord·θ_k, θ_k = base^(−2k/(d/2)).
// 1D use (text, decoder) passes coords with f = 0.
template <typename T>
Var<T> rope2d(Tape<T>* tape, const Var<T>& x, const std::vector<std::pair<int, int>>& coords,
              std::size_t n_heads, T base = T(10000)) {
    const std::size_t L = x.rows(), H = x.cols();
    if (coords.size() != L) throw Error::config("rope2d: coord count mismatch");
    if (H % n_heads != 0) throw Error::config("rope2d: H not divisible by n_heads");
    const std::size_t d = H / n_heads;
    if (d % 4 != 0) throw Error::config("rope2d: head_dim must be divisible by 4");
    const std::size_t half = d / 2, q4 = d / 4;

    std::vector<T> theta(q4);
    for (std::size_t k = 0; k < q4; ++k) {
        theta[k] = std::pow(base, -T(2) * static_cast<T>(k) / static_cast<T>(half));
    }
    auto cs = std::make_shared<std::vector<T>>(L * half);
    auto sn = std::make_shared<std::vector<T>>(L * half);
    for (std::size_t r = 0; r < L; ++r) {
        for (std::size_t k = 0; k < q4; ++k) {
            const T at = theta[k] * static_cast<T>(coords[r].first);
            const T af = theta[k] * static_cast<T>(coords[r].second);
            (*cs)[r * half + k] = std::cos(at);
            (*sn)[r * half + k] = std::sin(at);
            (*cs)[r * half + q4 + k] = std::cos(af);
            (*sn)[r * half + q4 + k] = std::sin(af);
        }
    }

    Var<T> y(L, H);
    detail::rope_apply(x.val(), y.val(), *cs, *sn, n_heads, d, false);
    check_finite(y.val(), "rope2d");
    if (tape) {
        auto xn = x.node(), yn = y.node();
        tape->record([xn, yn, cs, sn, n_heads, d] {
            if (yn->grad.v.empty()) return;
            xn->ensure_grad();
            // gradient of a rotation is the inverse rotation
            TensorData<T> tmp(yn->grad.rows, yn->grad.cols);
            detail::rope_apply(yn->grad, tmp, *cs, *sn, n_heads, d, true);
            emap(xn->grad) += emap(tmp);
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// attention

namespace detail {

// masked, max-subtracted softmax of one score matrix, in place
template <typename T>
void softmax_rows_inplace(EMat<T>& s) {
    for (Eigen::Index i = 0; i < s.rows(); ++i) {
        T mx = -std::numeric_limits<T>::infinity();
        for (Eigen::Index j = 0; j < s.cols(); ++j) mx = std::max(mx, s(i, j));
        T sum = T(0);
        for (Eigen::Index j = 0; j < s.cols(); ++j) {
            const T e = std::isinf(s(i, j)) ? T(0) : std::exp(s(i, j) - mx);
            s(i, j) = e;
            sum += e;
        }
        s.row(i) /= sum;
    }
}

} // namespace detail

// Per-segment multi-head attention over a packed stream. Token i attends to
// token j iff both sit in the same segment and (no window or |i−j| ≤ W_half)
// and (not causal or j ≤ i), offsets in packed order. q/k/v are L×H with
// rotation already applied. `debug_probs`, when set, receives the softmax
// rows per (segment, head) in segment-major order.
template <typename T>
Var<T> packed_attention(Tape<T>* tape, const Var<T>& q, const Var<T>& k, const Var<T>& v,
                        const std::vector<std::size_t>& boundaries, std::size_t n_heads,
                        std::optional<std::size_t> window_half = std::nullopt, bool causal = false,
                        std::vector<TensorData<T>>* debug_probs = nullptr) {
    const std::size_t L = q.rows(), H = q.cols();
    if (k.rows() != L || v.rows() != L || k.cols() != H || v.cols() != H) {
        throw Error::config("packed_attention: q/k/v shape mismatch");
    }
    if (H % n_heads != 0) throw Error::config("packed_attention: H not divisible by n_heads");
    if (boundaries.empty() || boundaries.back() != L) {
        throw Error::config("packed_attention: boundaries do not cover the stream");
    }
    const std::size_t d = H / n_heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(d));
    const std::size_t nseg = boundaries.size() - 1;
    const T ninf = -std::numeric_limits<T>::infinity();

    Var<T> y(L, H);
    auto probs = std::make_shared<std::vector<EMat<T>>>();
    probs->reserve(nseg * n_heads);

    for (std::size_t s = 0; s < nseg; ++s) {
        const std::size_t b0 = boundaries[s], b1 = boundaries[s + 1];
        const auto n = static_cast<Eigen::Index>(b1 - b0);
        for (std::size_t h = 0; h < n_heads; ++h) {
            auto Q = block_view(q.val(), b0, b1, h * d, d);
            auto K = block_view(k.val(), b0, b1, h * d, d);
            auto V = block_view(v.val(), b0, b1, h * d, d);
            EMat<T> S = (Q * K.transpose()) * scale;
            if (window_half || causal) {
                for (Eigen::Index i = 0; i < n; ++i) {
                    for (Eigen::Index j = 0; j < n; ++j) {
                        const bool in_window =
                            !window_half ||
                            static_cast<std::size_t>(std::abs(static_cast<long long>(i - j))) <= *window_half;
                        if (!in_window || (causal && j > i)) S(i, j) = ninf;
                    }
                }
            }
            detail::softmax_rows_inplace(S);
            block_view(y.val(), b0, b1, h * d, d).noalias() = S * V;
            probs->push_back(std::move(S));
        }
    }
    check_finite(y.val(), "packed_attention");

    if (debug_probs) {
        debug_probs->clear();
        for (const auto& P : *probs) {
            TensorData<T> t(static_cast<std::size_t>(P.rows()), static_cast<std::size_t>(P.cols()));
            emap(t) = P;
            debug_probs->push_back(std::move(t));
        }
    }

    if (tape) {
        auto qn = q.node(), kn = k.node(), vn = v.node(), yn = y.node();
        auto bnd = std::make_shared<std::vector<std::size_t>>(boundaries);
        tape->record([qn, kn, vn, yn, bnd, probs, n_heads, d, scale] {
            if (yn->grad.v.empty()) return;
            qn->ensure_grad();
            kn->ensure_grad();
            vn->ensure_grad();
            const std::size_t nseg = bnd->size() - 1;
            for (std::size_t s = 0; s < nseg; ++s) {
                const std::size_t b0 = (*bnd)[s], b1 = (*bnd)[s + 1];
                for (std::size_t h = 0; h < n_heads; ++h) {
                    const EMat<T>& P = (*probs)[s * n_heads + h];
                    auto Q = block_view(qn->val, b0, b1, h * d, d);
                    auto K = block_view(kn->val, b0, b1, h * d, d);
                    auto V = block_view(vn->val, b0, b1, h * d, d);
                    auto dO = block_view(yn->grad, b0, b1, h * d, d);
                    block_view(vn->grad, b0, b1, h * d, d).noalias() += P.transpose() * dO;
                    EMat<T> dP = dO * V.transpose();
                    // softmax backward; masked entries have P == 0, so dS == 0 there
                    EMat<T> dS = P.cwiseProduct(dP);
                    const auto rowsum = dS.rowwise().sum().eval();
                    dS = P.cwiseProduct(dP.colwise() - rowsum);
                    block_view(qn->grad, b0, b1, h * d, d).noalias() += (dS * K) * scale;
                    block_view(kn->grad, b0, b1, h * d, d).noalias() += (dS.transpose() * Q) * scale;
                }
            }
        });
    }
    return y;
}

// Scaled masked attention logits per (segment, head), disallowed entries −inf.
// Value-only; used by tests and debug tooling.
template <typename T>
std::vector<TensorData<T>> attention_logits(const Var<T>& q, const Var<T>& k,
                                            const std::vector<std::size_t>& boundaries, std::size_t n_heads,
                                            std::optional<std::size_t> window_half = std::nullopt,
                                            bool causal = false) {
    const std::size_t H = q.cols();
    const std::size_t d = H / n_heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(d));
    const T ninf = -std::numeric_limits<T>::infinity();
    std::vector<TensorData<T>> out;
    for (std::size_t s = 0; s + 1 < boundaries.size(); ++s) {
        const std::size_t b0 = boundaries[s], b1 = boundaries[s + 1];
        const auto n = static_cast<Eigen::Index>(b1 - b0);
        for (std::size_t h = 0; h < n_heads; ++h) {
            auto Q = block_view(q.val(), b0, b1, h * d, d);
            auto K = block_view(k.val(), b0, b1, h * d, d);
            TensorData<T> S(static_cast<std::size_t>(n), static_cast<std::size_t>(n));
            emap(S) = (Q * K.transpose()) * scale;
            for (Eigen::Index i = 0; i < n; ++i) {
                for (Eigen::Index j = 0; j < n; ++j) {
                    const bool in_window =
                        !window_half ||
                        static_cast<std::size_t>(std::abs(static_cast<long long>(i - j))) <= *window_half;
                    if (!in_window || (causal && j > i)) S.at(static_cast<std::size_t>(i), static_cast<std::size_t>(j)) = ninf;
                }
            }
            out.push_back(std::move(S));
        }
    }
    return out;
}

// Cross-attention between two packed streams with paired segments: query
// segment i attends (fully) over key/value segment i. No position rotation.
template <typename T>
Var<T> cross_attention(Tape<T>* tape, const Var<T>& q, const Var<T>& k, const Var<T>& v,
                       const std::vector<std::size_t>& q_bounds, const std::vector<std::size_t>& kv_bounds,
                       std::size_t n_heads) {
    const std::size_t H = q.cols();
    if (k.cols() != H || v.cols() != H || k.rows() != v.rows()) {
        throw Error::config("cross_attention: k/v shape mismatch");
    }
    if (q_bounds.size() != kv_bounds.size()) throw Error::config("cross_attention: segment counts differ");
    if (H % n_heads != 0) throw Error::config("cross_attention: H not divisible by n_heads");
    const std::size_t d = H / n_heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(d));
    const std::size_t nseg = q_bounds.size() - 1;

    Var<T> y(q.rows(), H);
    auto probs = std::make_shared<std::vector<EMat<T>>>();
    probs->reserve(nseg * n_heads);
    for (std::size_t s = 0; s < nseg; ++s) {
        const std::size_t q0 = q_bounds[s], q1 = q_bounds[s + 1];
        const std::size_t k0 = kv_bounds[s], k1 = kv_bounds[s + 1];
        for (std::size_t h = 0; h < n_heads; ++h) {
            auto Q = block_view(q.val(), q0, q1, h * d, d);
            auto K = block_view(k.val(), k0, k1, h * d, d);
            auto V = block_view(v.val(), k0, k1, h * d, d);
            EMat<T> S = (Q * K.transpose()) * scale;
            detail::softmax_rows_inplace(S);
            block_view(y.val(), q0, q1, h * d, d).noalias() = S * V;
            probs->push_back(std::move(S));
        }
    }
    check_finite(y.val(), "cross_attention");

    if (tape) {
        auto qn = q.node(), kn = k.node(), vn = v.node(), yn = y.node();
        auto qb = std::make_shared<std::vector<std::size_t>>(q_bounds);
        auto kb = std::make_shared<std::vector<std::size_t>>(kv_bounds);
        tape->record([qn, kn, vn, yn, qb, kb, probs, n_heads, d, scale] {
            if (yn->grad.v.empty()) return;
            qn->ensure_grad();
            kn->ensure_grad();
            vn->ensure_grad();
            const std::size_t nseg = qb->size() - 1;
            for (std::size_t s = 0; s < nseg; ++s) {
                const std::size_t q0 = (*qb)[s], q1 = (*qb)[s + 1];
                const std::size_t k0 = (*kb)[s], k1 = (*kb)[s + 1];
                for (std::size_t h = 0; h < n_heads; ++h) {
                    const EMat<T>& P = (*probs)[s * n_heads + h];
                    auto Q = block_view(qn->val, q0, q1, h * d, d);
                    auto K = block_view(kn->val, k0, k1, h * d, d);
                    auto V = block_view(vn->val, k0, k1, h * d, d);
                    auto dO = block_view(yn->grad, q0, q1, h * d, d);
                    block_view(vn->grad, k0, k1, h * d, d).noalias() += P.transpose() * dO;
                    EMat<T> dP = dO * V.transpose();
                    EMat<T> dS = P.cwiseProduct(dP);
                    const auto rowsum = dS.rowwise().sum().eval();
                    dS = P.cwiseProduct(dP.colwise() - rowsum);
                    block_view(qn->grad, q0, q1, h * d, d).noalias() += (dS * K) * scale;
                    block_view(kn->grad, k0, k1, h * d, d).noalias() += (dS.transpose() * Q) * scale;
                }
            }
        });
    }
    return y;
}

// One learned query (1×H) attends over each segment of k/v; output B×H, one
// row per segment, heads concatenated. The MAP pooling core.
template <typename T>
Var<T> query_attend(Tape<T>* tape, const Var<T>& query, const Var<T>& k, const Var<T>& v,
                    const std::vector<std::size_t>& boundaries, std::size_t n_heads) {
    const std::size_t H = k.cols();
    if (query.rows() != 1 || query.cols() != H) throw Error::config("query_attend: query must be 1×H");
    if (v.rows() != k.rows() || v.cols() != H) throw Error::config("query_attend: k/v shape mismatch");
    if (H % n_heads != 0) throw Error::config("query_attend: H not divisible by n_heads");
    if (boundaries.size() < 2) throw Error::data("query_attend: empty segment list");
    const std::size_t d = H / n_heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(d));
    const std::size_t nseg = boundaries.size() - 1;

    Var<T> y(nseg, H);
    auto probs = std::make_shared<std::vector<Eigen::Matrix<T, 1, Eigen::Dynamic>>>();
    probs->reserve(nseg * n_heads);
    for (std::size_t s = 0; s < nseg; ++s) {
        const std::size_t b0 = boundaries[s], b1 = boundaries[s + 1];
        if (b1 <= b0) throw Error::data("query_attend: empty segment");
        for (std::size_t h = 0; h < n_heads; ++h) {
            auto Qh = block_view(query.val(), 0, 1, h * d, d);
            auto K = block_view(k.val(), b0, b1, h * d, d);
            auto V = block_view(v.val(), b0, b1, h * d, d);
            Eigen::Matrix<T, 1, Eigen::Dynamic> sc = (Qh * K.transpose()) * scale;
            const T mx = sc.maxCoeff();
            sc = (sc.array() - mx).exp().matrix();
            sc /= sc.sum();
            block_view(y.val(), s, s + 1, h * d, d).noalias() = sc * V;
            probs->push_back(std::move(sc));
        }
    }
    check_finite(y.val(), "query_attend");

    if (tape) {
        auto qn = query.node(), kn = k.node(), vn = v.node(), yn = y.node();
        auto bnd = std::make_shared<std::vector<std::size_t>>(boundaries);
        tape->record([qn, kn, vn, yn, bnd, probs, n_heads, d, scale] {
            if (yn->grad.v.empty()) return;
            qn->ensure_grad();
            kn->ensure_grad();
            vn->ensure_grad();
            const std::size_t nseg = bnd->size() - 1;
            for (std::size_t s = 0; s < nseg; ++s) {
                const std::size_t b0 = (*bnd)[s], b1 = (*bnd)[s + 1];
                for (std::size_t h = 0; h < n_heads; ++h) {
                    const auto& P = (*probs)[s * n_heads + h];
                    auto Qh = block_view(qn->val, 0, 1, h * d, d);
                    auto K = block_view(kn->val, b0, b1, h * d, d);
                    auto V = block_view(vn->val, b0, b1, h * d, d);
                    auto dO = block_view(yn->grad, s, s + 1, h * d, d);
                    block_view(vn->grad, b0, b1, h * d, d).noalias() += P.transpose() * dO;
                    Eigen::Matrix<T, 1, Eigen::Dynamic> dP = dO * V.transpose();
                    const T rowsum = dP.cwiseProduct(P).sum();
                    Eigen::Matrix<T, 1, Eigen::Dynamic> dS =
                        P.cwiseProduct((dP.array() - rowsum).matrix());
                    block_view(qn->grad, 0, 1, h * d, d).noalias() += (dS * K) * scale;
                    block_view(kn->grad, b0, b1, h * d, d).noalias() += (dS.transpose() * Qh) * scale;
                }
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// gather / scatter

template <typename T>
Var<T> embedding_rows(Tape<T>* tape, const Var<T>& table, const std::vector<int>& ids) {
    Var<T> y(ids.size(), table.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= table.rows()) {
            throw Error::data("embedding_rows: id out of range");
        }
        std::copy_n(table.val().row(static_cast<std::size_t>(ids[i])), table.cols(), y.val().row(i));
    }
    check_finite(y.val(), "embedding_rows");
    if (tape) {
        auto tn = table.node(), yn = y.node();
        auto idx = std::make_shared<std::vector<int>>(ids);
        tape->record([tn, yn, idx] {
            if (yn->grad.v.empty()) return;
            tn->ensure_grad();
            for (std::size_t i = 0; i < idx->size(); ++i) {
                const T* dy = yn->grad.row(i);
                T* dt = tn->grad.row(static_cast<std::size_t>((*idx)[i]));
                for (std::size_t j = 0; j < tn->val.cols; ++j) dt[j] += dy[j];
            }
        });
    }
    return y;
}

template <typename T>
Var<T> gather_rows(Tape<T>* tape, const Var<T>& x, const std::vector<std::size_t>& idx) {
    Var<T> y(idx.size(), x.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= x.rows()) throw Error::data("gather_rows: index out of range");
        std::copy_n(x.val().row(idx[i]), x.cols(), y.val().row(i));
    }
    check_finite(y.val(), "gather_rows");
    if (tape) {
        auto xn = x.node(), yn = y.node();
        auto ix = std::make_shared<std::vector<std::size_t>>(idx);
        tape->record([xn, yn, ix] {
            if (yn->grad.v.empty()) return;
            xn->ensure_grad();
            for (std::size_t i = 0; i < ix->size(); ++i) {
                const T* dy = yn->grad.row(i);
                T* dx = xn->grad.row((*ix)[i]);
                for (std::size_t j = 0; j < xn->val.cols; ++j) dx[j] += dy[j];
            }
        });
    }
    return y;
}

// Copy of x with the given rows replaced by a broadcast 1×H row (the learned
// mask embedding). Replaced rows pass no gradient back to x.
template <typename T>
Var<T> replace_rows(Tape<T>* tape, const Var<T>& x, const std::vector<std::size_t>& idx, const Var<T>& row) {
    if (row.rows() != 1 || row.cols() != x.cols()) throw Error::config("replace_rows: row shape mismatch");
    Var<T> y(x.rows(), x.cols());
    y.val() = x.val();
    for (std::size_t r : idx) {
        if (r >= x.rows()) throw Error::data("replace_rows: index out of range");
        std::copy_n(row.val().data(), x.cols(), y.val().row(r));
    }
    check_finite(y.val(), "replace_rows");
    if (tape) {
        auto xn = x.node(), rn = row.node(), yn = y.node();
        auto ix = std::make_shared<std::vector<std::size_t>>(idx);
        tape->record([xn, rn, yn, ix] {
            if (yn->grad.v.empty()) return;
            xn->ensure_grad();
            rn->ensure_grad();
            emap(xn->grad) += emap(yn->grad);
            for (std::size_t r : *ix) {
                const T* dy = yn->grad.row(r);
                T* dx = xn->grad.row(r);
                T* dr = rn->grad.data();
                for (std::size_t j = 0; j < xn->val.cols; ++j) {
                    dx[j] -= dy[j];
                    dr[j] += dy[j];
                }
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// losses

// mean over rows of −log softmax(logits_i)[target_i]
template <typename T>
Var<T> cross_entropy_targets(Tape<T>* tape, const Var<T>& logits, const std::vector<std::size_t>& targets) {
    const std::size_t n = logits.rows(), C = logits.cols();
    if (targets.size() != n) throw Error::config("cross_entropy_targets: target count mismatch");
    auto P = std::make_shared<TensorData<T>>(n, C);
    T loss = T(0);
    for (std::size_t i = 0; i < n; ++i) {
        if (targets[i] >= C) throw Error::data("cross_entropy_targets: target out of range");
        const T* l = logits.val().row(i);
        T mx = l[0];
        for (std::size_t j = 1; j < C; ++j) mx = std::max(mx, l[j]);
        T sum = T(0);
        T* p = P->row(i);
        for (std::size_t j = 0; j < C; ++j) {
            p[j] = std::exp(l[j] - mx);
            sum += p[j];
        }
        for (std::size_t j = 0; j < C; ++j) p[j] /= sum;
        loss += std::log(sum) + mx - l[targets[i]];
    }
    loss /= static_cast<T>(n);
    Var<T> y(1, 1);
    y.val().v[0] = loss;
    check_finite(y.val(), "cross_entropy_targets");
    if (tape) {
        auto ln = logits.node(), yn = y.node();
        auto tg = std::make_shared<std::vector<std::size_t>>(targets);
        tape->record([ln, yn, P, tg, n, C] {
            if (yn->grad.v.empty()) return;
            ln->ensure_grad();
            const T g = yn->grad.v[0] / static_cast<T>(n);
            for (std::size_t i = 0; i < n; ++i) {
                const T* p = P->row(i);
                T* dl = ln->grad.row(i);
                for (std::size_t j = 0; j < C; ++j) dl[j] += g * p[j];
                dl[(*tg)[i]] -= g;
            }
        });
    }
    return y;
}

// mean over rows of −Σ_j t_ij log softmax(logits_i)_j, targets row-stochastic, constant
template <typename T>
Var<T> soft_cross_entropy(Tape<T>* tape, const Var<T>& logits, const TensorData<T>& targets) {
    const std::size_t n = logits.rows(), C = logits.cols();
    if (targets.rows != n || targets.cols != C) throw Error::config("soft_cross_entropy: shape mismatch");
    auto P = std::make_shared<TensorData<T>>(n, C);
    T loss = T(0);
    for (std::size_t i = 0; i < n; ++i) {
        const T* l = logits.val().row(i);
        const T* t = targets.row(i);
        T mx = l[0];
        for (std::size_t j = 1; j < C; ++j) mx = std::max(mx, l[j]);
        T sum = T(0);
        T* p = P->row(i);
        for (std::size_t j = 0; j < C; ++j) {
            p[j] = std::exp(l[j] - mx);
            sum += p[j];
        }
        const T lse = std::log(sum) + mx;
        for (std::size_t j = 0; j < C; ++j) {
            p[j] /= sum;
            loss += t[j] * (lse - l[j]);
        }
    }
    loss /= static_cast<T>(n);
    Var<T> y(1, 1);
    y.val().v[0] = loss;
    check_finite(y.val(), "soft_cross_entropy");
    if (tape) {
        auto ln = logits.node(), yn = y.node();
        auto tg = std::make_shared<TensorData<T>>(targets);
        tape->record([ln, yn, P, tg, n, C] {
            if (yn->grad.v.empty()) return;
            ln->ensure_grad();
            const T g = yn->grad.v[0] / static_cast<T>(n);
            for (std::size_t i = 0; i < n; ++i) {
                const T* p = P->row(i);
                const T* t = tg->row(i);
                T* dl = ln->grad.row(i);
                for (std::size_t j = 0; j < C; ++j) dl[j] += g * (p[j] - t[j]);
            }
        });
    }
    return y;
}

// y = Σ_i w_i · x_i over scalar vars
template <typename T>
Var<T> weighted_sum(Tape<T>* tape, const std::vector<Var<T>>& xs, const std::vector<T>& ws) {
    if (xs.size() != ws.size()) throw Error::config("weighted_sum: weight count mismatch");
    Var<T> y(1, 1);
    T acc = T(0);
    for (std::size_t i = 0; i < xs.size(); ++i) {
        if (xs[i].val().size() != 1) throw Error::config("weighted_sum: scalar expected");
        acc += ws[i] * xs[i].scalar();
    }
    y.val().v[0] = acc;
    check_finite(y.val(), "weighted_sum");
    if (tape) {
        std::vector<std::shared_ptr<VarNode<T>>> nodes;
        nodes.reserve(xs.size());
        for (const auto& x : xs) nodes.push_back(x.node());
        auto yn = y.node();
        auto w = std::make_shared<std::vector<T>>(ws);
        tape->record([nodes, yn, w] {
            if (yn->grad.v.empty()) return;
            for (std::size_t i = 0; i < nodes.size(); ++i) {
                nodes[i]->ensure_grad();
                nodes[i]->grad.v[0] += (*w)[i] * yn->grad.v[0];
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// value-only helpers

template <typename T>
void softmax_rows_value(TensorData<T>& t) {
    for (std::size_t i = 0; i < t.rows; ++i) {
        T* r = t.row(i);
        T mx = r[0];
        for (std::size_t j = 1; j < t.cols; ++j) mx = std::max(mx, r[j]);
        T sum = T(0);
        for (std::size_t j = 0; j < t.cols; ++j) {
            r[j] = std::exp(r[j] - mx);
            sum += r[j];
        }
        for (std::size_t j = 0; j < t.cols; ++j) r[j] /= sum;
    }
}

} // namespace slap::nn
