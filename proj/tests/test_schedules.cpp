#include <doctest.h>

#include <cmath>
#include <numbers>

#include "slap/ema.hpp"
#include "slap/model.hpp"
#include "slap/trainer.hpp"

#include "helpers.hpp"

using namespace slap;

TEST_CASE("momentum schedule endpoints and closed-form midpoint") {
    ema::MomentumSchedule sched{0.994, 1.0, 10000};
    CHECK(ema::momentum_at(0, sched) == 0.994);
    CHECK(ema::momentum_at(10000, sched) == 1.0);
    CHECK(ema::momentum_at(20000, sched) == 1.0);
    CHECK(std::abs(ema::momentum_at(5000, sched) - 0.997) <= 1e-12);

    // quarter point against the closed form
    const double s = 2500.0, S = 10000.0;
    const double expect = 1.0 - (1.0 - 0.994) * (1.0 + std::cos(std::numbers::pi * s / S)) / 2.0;
    CHECK(ema::momentum_at(2500, sched) == doctest::Approx(expect).epsilon(1e-15));

    // monotone nondecreasing over the run
    double prev = 0.0;
    for (std::size_t t = 0; t <= 10000; t += 250) {
        const double m = ema::momentum_at(t, sched);
        CHECK(m >= prev);
        prev = m;
    }

    ema::MomentumSchedule degenerate{0.994, 1.0, 0};
    CHECK(ema::momentum_at(0, degenerate) == 1.0);
}

TEST_CASE("lr schedule: linear warmup then constant or cosine") {
    TrainConfig cfg;
    cfg.lr_peak = 1e-4;
    cfg.warmup_steps = 2000;
    cfg.steps = 10000;
    cfg.lr_schedule = "constant";

    CHECK(train::lr_at(0, cfg) == 0.0);
    CHECK(train::lr_at(1000, cfg) == doctest::Approx(5e-5).epsilon(1e-12));
    CHECK(train::lr_at(2000, cfg) == 1e-4);
    CHECK(train::lr_at(500, cfg) == doctest::Approx(1e-4 * 500.0 / 2000.0).epsilon(1e-12));
    CHECK(train::lr_at(9999, cfg) == 1e-4);

    cfg.lr_schedule = "cosine";
    CHECK(train::lr_at(2000, cfg) == 1e-4);
    // halfway through the decay span
    const double mid = 1e-4 * 0.5 * (1.0 + std::cos(std::numbers::pi * 0.5));
    CHECK(train::lr_at(6000, cfg) == doctest::Approx(mid).epsilon(1e-12));
    CHECK(train::lr_at(10000, cfg) <= 1e-18);
    CHECK(train::lr_at(123456, cfg) <= 1e-18);

    cfg.warmup_steps = 0;
    cfg.lr_schedule = "constant";
    CHECK(train::lr_at(0, cfg) == 1e-4);
}

TEST_CASE("ema update blends teacher toward student by name") {
    auto cfg = testutil::tiny_model();
    auto student = model::init_model<float>(cfg, 5);
    auto teacher = model::init_teacher(student);

    // m=1 freezes the teacher
    auto before = model::named_params(teacher);
    std::vector<std::vector<float>> snap;
    for (auto& p : before) snap.push_back(p.var.val().v);
    // nudge the student so a blend would be visible
    for (auto& p : model::named_params(student)) {
        for (auto& x : p.var.val().v) x += 0.25f;
    }
    ema::ema_update(teacher, student, 1.0);
    auto after1 = model::named_params(teacher);
    for (std::size_t i = 0; i < after1.size(); ++i) CHECK(after1[i].var.val().v == snap[i]);

    // m=0 copies the student
    ema::ema_update(teacher, student, 0.0);
    auto sp = model::named_params(student);
    for (auto& p : model::named_params(teacher)) {
        bool found = false;
        for (auto& s : sp) {
            if (s.name == p.name) {
                CHECK(p.var.val().v == s.var.val().v);
                found = true;
            }
        }
        CHECK(found);
    }

    // convex blend at m=0.5
    auto teacher2 = model::init_teacher(student);
    std::vector<std::vector<float>> t0;
    for (auto& p : model::named_params(teacher2)) t0.push_back(p.var.val().v);
    for (auto& p : model::named_params(student)) {
        for (auto& x : p.var.val().v) x += 1.0f;
    }
    ema::ema_update(teacher2, student, 0.5);
    std::size_t i = 0;
    for (auto& p : model::named_params(teacher2)) {
        bool found = false;
        for (auto& s : sp) {
            if (s.name != p.name) continue;
            found = true;
            for (std::size_t j = 0; j < p.var.val().size(); ++j) {
                const float expect = 0.5f * t0[i][j] + 0.5f * s.var.val().v[j];
                CHECK(p.var.val().v[j] == doctest::Approx(expect).epsilon(1e-6));
            }
        }
        CHECK(found);
        ++i;
    }
}

TEST_CASE("weight decay skips gains and the temperature") {
    CHECK_FALSE(model::decays("audio.stem.gain"));
    CHECK_FALSE(model::decays("decoder.blocks.0.ffn.gain"));
    CHECK_FALSE(model::decays("log_tau"));
    CHECK(model::decays("proto.prototypes"));
    CHECK(model::decays("map_text.wout"));
    CHECK(model::decays("text.table"));
    CHECK(model::decays("gain")); // only the ".gain" suffix is exempt
}
