#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <unordered_map>

#include "slap/error.hpp"
#include "slap/model.hpp"

namespace slap::ema {

struct MomentumSchedule {
    double m_start = 0.994;
    double m_end = 1.0;
    std::size_t total_steps = 0;
};

// m = m_end − (m_end − m_start)·(1 + cos(π·s/S))/2, clamped to m_end past S
inline double momentum_at(std::size_t s, const MomentumSchedule& sched) {
    if (sched.total_steps == 0 || s >= sched.total_steps) return sched.m_end;
    const double x = std::numbers::pi * static_cast<double>(s) / static_cast<double>(sched.total_steps);
    return sched.m_end - (sched.m_end - sched.m_start) * (1.0 + std::cos(x)) / 2.0;
}

// θ_t ← m·θ_t + (1−m)·θ_s for every teacher parameter, paired by name.
template <typename T>
void ema_update(model::TeacherWeights<T>& teacher, model::ModelWeights<T>& student, double m) {
    std::unordered_map<std::string, nn::Var<T>> by_name;
    for (auto& p : model::named_params(student)) by_name.emplace(p.name, p.var);
    for (auto& p : model::named_params(teacher)) {
        auto it = by_name.find(p.name);
        if (it == by_name.end()) throw Error::config("ema_update: no student param named " + p.name);
        auto& tv = p.var.val();
        const auto& sv = it->second.val();
        if (tv.rows != sv.rows || tv.cols != sv.cols) {
            throw Error::config("ema_update: shape mismatch at " + p.name);
        }
        const T mm = static_cast<T>(m);
        for (std::size_t i = 0; i < tv.size(); ++i) {
            tv.v[i] = mm * tv.v[i] + (T(1) - mm) * sv.v[i];
        }
    }
}

} // namespace slap::ema
