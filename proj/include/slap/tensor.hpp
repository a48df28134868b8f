#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "slap/error.hpp"

namespace slap::nn {

// Row-major 2D buffer. Vectors are 1×N or N×1, scalars 1×1.
template <typename T>
struct TensorData {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<T> v;

    TensorData() = default;
    TensorData(std::size_t r, std::size_t c, T fill = T(0)) : rows(r), cols(c), v(r * c, fill) {}

    std::size_t size() const { return v.size(); }
    T* data() { return v.data(); }
    const T* data() const { return v.data(); }
    T& at(std::size_t r, std::size_t c) { return v[r * cols + c]; }
    T at(std::size_t r, std::size_t c) const { return v[r * cols + c]; }
    T* row(std::size_t r) { return v.data() + r * cols; }
    const T* row(std::size_t r) const { return v.data() + r * cols; }
    void fill(T x) { std::fill(v.begin(), v.end(), x); }

    bool finite() const {
        for (T x : v)
            if (!std::isfinite(x)) return false;
        return true;
    }
};

// Debug switch: when on, every op validates its output for NaN/Inf.
inline bool& finite_checks() {
    static bool on = false;
    return on;
}

template <typename T>
void check_finite(const TensorData<T>& t, const char* where) {
    if (finite_checks() && !t.finite()) {
        throw Error::numeric(std::string(where) + ": non-finite value");
    }
}

template <typename T>
struct VarNode {
    TensorData<T> val;
    TensorData<T> grad; // allocated on first touch

    void ensure_grad() {
        if (grad.v.empty()) grad = TensorData<T>(val.rows, val.cols);
    }
};

// Shared handle onto a graph node. Copies alias the same storage.
template <typename T>
class Var {
public:
    Var() = default;
    explicit Var(TensorData<T> v) : node_(std::make_shared<VarNode<T>>()) { node_->val = std::move(v); }
    Var(std::size_t r, std::size_t c) : Var(TensorData<T>(r, c)) {}

    bool defined() const { return node_ != nullptr; }
    TensorData<T>& val() { return node_->val; }
    const TensorData<T>& val() const { return node_->val; }
    TensorData<T>& grad() {
        node_->ensure_grad();
        return node_->grad;
    }
    bool has_grad() const { return node_ && !node_->grad.v.empty(); }
    void zero_grad() {
        if (node_ && !node_->grad.v.empty()) node_->grad.fill(T(0));
    }
    std::shared_ptr<VarNode<T>> node() const { return node_; }
    std::size_t rows() const { return node_->val.rows; }
    std::size_t cols() const { return node_->val.cols; }
    T scalar() const { return node_->val.v.at(0); }

private:
    std::shared_ptr<VarNode<T>> node_;
};

// Reverse-mode tape. Ops append closures during the forward pass; backward
// replays them newest-first. Closures skip themselves when their output grad
// was never allocated, so subgraphs that do not reach the loss cost nothing.
// Pass a null tape to run value-only (teacher, eval, finite differences).
template <typename T>
class Tape {
public:
    void record(std::function<void()> fn) { ops_.push_back(std::move(fn)); }

    void backward(Var<T>& loss) {
        if (loss.val().size() != 1) throw Error::numeric("backward expects a scalar loss");
        loss.grad().v[0] = T(1);
        for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
    }

    std::size_t size() const { return ops_.size(); }
    void clear() { ops_.clear(); }

private:
    std::vector<std::function<void()>> ops_;
};

} // namespace slap::nn
