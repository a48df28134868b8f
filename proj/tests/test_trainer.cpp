#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "slap/checkpoint.hpp"
#include "slap/synth.hpp"
#include "slap/trainer.hpp"

#include "helpers.hpp"

using namespace slap;

namespace {

train::Batch tiny_batch(std::uint64_t seed) {
    Rng rng = derive_rng(seed, "trainer-test");
    train::Batch b;
    b.audio = {testutil::random_seq(rng, 3), testutil::random_seq(rng, 2)};
    b.captions = {"a low tone then a high tone", "a mid tone"};
    return b;
}

TrainConfig tiny_train() {
    TrainConfig cfg;
    cfg.batch_size = 2;
    cfg.steps = 8;
    cfg.warmup_steps = 2;
    cfg.checkpoint_every = 0;
    cfg.seed = 5;
    return cfg;
}

bool grad_free(nn::Var<float>& v) {
    if (!v.has_grad()) return true;
    for (float g : v.grad().v) {
        if (g != 0.0f) return false;
    }
    return true;
}

std::vector<std::vector<float>> weights_of(train::TrainState& s) {
    std::vector<std::vector<float>> out;
    for (auto& p : model::named_params(s.student)) out.push_back(p.var.val().v);
    for (auto& p : model::named_params(s.teacher)) out.push_back(p.var.val().v);
    out.push_back(s.center.v);
    return out;
}

std::size_t count_lines(const std::string& path) {
    std::ifstream in(path);
    REQUIRE(in.good());
    std::size_t n = 0;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty()) ++n;
    }
    return n;
}

} // namespace

TEST_CASE("train_step is bitwise deterministic") {
    auto mcfg = testutil::tiny_model();
    auto cfg = tiny_train();
    auto s1 = train::init_state(mcfg, 7);
    auto s2 = train::init_state(mcfg, 7);
    auto batch = tiny_batch(1);

    auto m1 = train::train_step(s1, cfg, batch);
    auto m2 = train::train_step(s2, cfg, batch);
    CHECK(m1.to_json_line() == m2.to_json_line());
    CHECK(weights_of(s1) == weights_of(s2));

    // a second step stays in lockstep too
    auto n1 = train::train_step(s1, cfg, batch);
    auto n2 = train::train_step(s2, cfg, batch);
    CHECK(n1.to_json_line() == n2.to_json_line());
    CHECK(weights_of(s1) == weights_of(s2));
    CHECK(n1.step == 1);
    CHECK(n1.m > m1.m); // momentum climbs along the cosine
}

TEST_CASE("train_step validates its batch") {
    auto s = train::init_state(testutil::tiny_model(), 7);
    auto cfg = tiny_train();
    train::Batch empty;
    CHECK_THROWS_AS(train::train_step(s, cfg, empty), Error);
    auto b = tiny_batch(2);
    b.captions.pop_back();
    CHECK_THROWS_AS(train::train_step(s, cfg, b), Error);
}

TEST_CASE("mask_ratio 0 takes the empty-ssl path") {
    auto s = train::init_state(testutil::tiny_model(), 9);
    auto cfg = tiny_train();
    cfg.mask_ratio = 0.0;
    auto center_before = s.center.v;
    auto m = train::train_step(s, cfg, tiny_batch(3));
    CHECK(m.ssl_empty);
    CHECK(m.l_ssl == 0.0);
    CHECK(m.l_clap > 0.0);
    CHECK(m.l_cap > 0.0);
    CHECK(s.center.v == center_before); // center EMA skipped

    // the ssl term contributes nothing to the tape either
    auto& params = s.student.proto;
    CHECK(grad_free(params.w1));
    CHECK(grad_free(params.w2));
    CHECK(grad_free(params.prototypes));
}

TEST_CASE("zero-weight components run gradient-free but still report values") {
    auto mcfg = testutil::tiny_model();
    auto batch = tiny_batch(4);

    auto cfg = tiny_train();
    cfg.beta = 0.0;
    auto s = train::init_state(mcfg, 11);
    auto m = train::train_step(s, cfg, batch);
    CHECK(m.l_ssl > 0.0); // value still evaluated and logged
    CHECK(grad_free(s.student.proto.w1));
    CHECK(grad_free(s.student.proto.w2));
    CHECK(grad_free(s.student.proto.prototypes));
    CHECK(grad_free(s.student.audio.mask_token));
    CHECK_FALSE(grad_free(s.student.decoder.out_w));

    cfg = tiny_train();
    cfg.gamma = 0.0;
    auto s2 = train::init_state(mcfg, 11);
    auto m2 = train::train_step(s2, cfg, batch);
    CHECK(m2.l_cap > 0.0);
    CHECK(grad_free(s2.student.decoder.out_w));
    CHECK(grad_free(s2.student.decoder.table));
    for (auto& blk : s2.student.decoder.blocks) {
        CHECK(grad_free(blk.cross_wq));
        CHECK(grad_free(blk.self_wq));
    }
    CHECK_FALSE(grad_free(s2.student.proto.w1));

    cfg = tiny_train();
    cfg.beta = 0.0;
    cfg.gamma = 0.0;
    auto s3 = train::init_state(mcfg, 11);
    auto m3 = train::train_step(s3, cfg, batch);
    CHECK(m3.l_ssl > 0.0);
    CHECK(m3.l_cap > 0.0);
    CHECK(m3.total == doctest::Approx(m3.l_clap).epsilon(1e-6));
    CHECK(grad_free(s3.student.proto.w1));
    CHECK(grad_free(s3.student.decoder.out_w));
    CHECK_FALSE(grad_free(s3.student.log_tau));

    // alpha=0 silences the temperature and both map heads
    cfg = tiny_train();
    cfg.alpha = 0.0;
    auto s4 = train::init_state(mcfg, 11);
    train::train_step(s4, cfg, batch);
    CHECK(grad_free(s4.student.log_tau));
    CHECK(grad_free(s4.student.map_audio.query));
    CHECK(grad_free(s4.student.map_text.query));
}

TEST_CASE("gradient clipping rescales the buffers in place") {
    auto mcfg = testutil::tiny_model();
    auto cfg = tiny_train();
    cfg.grad_clip = 1e-3; // force clipping
    auto s = train::init_state(mcfg, 13);
    auto m = train::train_step(s, cfg, tiny_batch(5));
    CHECK(m.grad_norm > cfg.grad_clip); // metric reports the pre-clip norm

    double post_sq = 0.0;
    for (auto& p : model::named_params(s.student)) {
        if (!p.var.has_grad()) continue;
        for (float g : p.var.grad().v) post_sq += static_cast<double>(g) * g;
    }
    CHECK(std::sqrt(post_sq) <= cfg.grad_clip + 1e-6);
}

TEST_CASE("temperature stays clamped") {
    auto mcfg = testutil::tiny_model();
    auto cfg = tiny_train();
    cfg.tau_init = 0.07;
    auto s = train::init_state(mcfg, 15);
    s.student.log_tau.val().v[0] = 5.0f; // way above the ceiling
    auto m = train::train_step(s, cfg, tiny_batch(6));
    CHECK(m.tau <= 1.0 + 1e-7);
    s.student.log_tau.val().v[0] = -10.0f;
    auto m2 = train::train_step(s, cfg, tiny_batch(6));
    CHECK(m2.tau >= 0.005 - 1e-7);
}

TEST_CASE("fit runs epochs, logs metrics, and writes checkpoints") {
    testutil::TempDir data("fit-data"), out("fit-out");
    synth::SynthParams sp;
    sp.pairs = 3;
    sp.seed = 21;
    sp.max_tones = 2;
    auto manifest = synth::generate(sp, data.str());

    RunConfig cfg;
    cfg.model = testutil::tiny_model();
    cfg.train = tiny_train();
    cfg.train.steps = 5;
    cfg.train.batch_size = 2; // 3 clips -> ceil(3/2) = 2 steps per epoch
    cfg.train.checkpoint_every = 2;

    auto result = train::fit(cfg, manifest, out.str());
    CHECK(result.metrics.size() == 5);
    for (std::size_t i = 0; i < 5; ++i) CHECK(result.metrics[i].step == i);
    CHECK(count_lines(out.file("metrics.jsonl")) == 5);
    CHECK(std::filesystem::exists(out.file("ckpt-000002.slap")));
    CHECK(std::filesystem::exists(out.file("ckpt-000004.slap")));
    CHECK(std::filesystem::exists(out.file("final.slap")));
    CHECK(result.notes.empty());

    auto final_state = io::load_checkpoint(out.file("final.slap"), &cfg.model);
    CHECK(final_state.step == 5);

    // zero-weight note surfaces in the result
    testutil::TempDir out2("fit-out2");
    auto cfg2 = cfg;
    cfg2.train.beta = 0.0;
    cfg2.train.steps = 1;
    auto r2 = train::fit(cfg2, manifest, out2.str());
    REQUIRE(r2.notes.size() == 1);
    CHECK(r2.notes[0].find("l_ssl") != std::string::npos);
    CHECK(r2.notes[0].find("gradient-free") != std::string::npos);

    io::Manifest none;
    CHECK_THROWS_AS(train::fit(cfg, none, out.str()), Error);
}

TEST_CASE("resumed training matches uninterrupted training bitwise") {
    testutil::TempDir data("resume-data"), full("resume-full"), part("resume-part");
    synth::SynthParams sp;
    sp.pairs = 4;
    sp.seed = 22;
    sp.max_tones = 2;
    auto manifest = synth::generate(sp, data.str());

    RunConfig cfg;
    cfg.model = testutil::tiny_model();
    cfg.train = tiny_train();
    cfg.train.steps = 4;
    cfg.train.batch_size = 2;
    cfg.train.checkpoint_every = 2;

    auto uninterrupted = train::fit(cfg, manifest, full.str());

    // resume the same schedule from the mid-run checkpoint at step 2
    auto resumed = train::fit(cfg, manifest, part.str(), full.file("ckpt-000002.slap"));

    auto slurp = [](const std::string& p) {
        std::ifstream in(p, std::ios::binary);
        REQUIRE(in.good());
        return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    };
    CHECK(slurp(uninterrupted.final_checkpoint) == slurp(resumed.final_checkpoint));

    // logged metrics for the overlapping steps agree
    REQUIRE(uninterrupted.metrics.size() == 4);
    REQUIRE(resumed.metrics.size() == 2);
    CHECK(uninterrupted.metrics[2].to_json_line() == resumed.metrics[0].to_json_line());
    CHECK(uninterrupted.metrics[3].to_json_line() == resumed.metrics[1].to_json_line());
}

TEST_CASE("fit with zero steps checkpoints the initial state") {
    testutil::TempDir data("zero-data"), out("zero-out");
    synth::SynthParams sp;
    sp.pairs = 2;
    sp.seed = 23;
    auto manifest = synth::generate(sp, data.str());

    RunConfig cfg;
    cfg.model = testutil::tiny_model();
    cfg.train = tiny_train();
    cfg.train.steps = 0;
    cfg.train.tau_init = 0.05;

    auto result = train::fit(cfg, manifest, out.str());
    CHECK(result.metrics.empty());
    auto loaded = io::load_checkpoint(result.final_checkpoint, &cfg.model);
    CHECK(loaded.step == 0);
    CHECK(loaded.student.log_tau.scalar() == doctest::Approx(std::log(0.05f)).epsilon(1e-7));

    auto fresh = train::init_state(cfg.model, cfg.train.seed);
    auto lp = model::named_params(loaded.student);
    auto fp = model::named_params(fresh.student);
    REQUIRE(lp.size() == fp.size());
    for (std::size_t i = 0; i < lp.size(); ++i) {
        if (lp[i].name == "log_tau") continue;
        CHECK(lp[i].var.val().v == fp[i].var.val().v);
    }
}
