#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "slap/losses.hpp"
#include "slap/model.hpp"
#include "slap/rng.hpp"

#include "helpers.hpp"

using namespace slap;

namespace {

nn::Var<float> unit_rows(Rng& rng, std::size_t n, std::size_t d) {
    nn::Var<float> x(testutil::randn<float>(rng, n, d));
    return nn::l2norm_rows<float>(nullptr, x);
}

nn::Var<float> scalar_var(float v) { return nn::Var<float>(nn::TensorData<float>(1, 1, v)); }

// independent double-precision CLAP NLL over float embeddings
double clap_oracle(const nn::TensorData<float>& ea, const nn::TensorData<float>& et, double tau) {
    const std::size_t B = ea.rows, D = ea.cols;
    auto nll = [&](const nn::TensorData<float>& q, const nn::TensorData<float>& k) {
        double acc = 0.0;
        for (std::size_t i = 0; i < B; ++i) {
            std::vector<double> logits(B);
            for (std::size_t j = 0; j < B; ++j) {
                double dot = 0.0;
                for (std::size_t c = 0; c < D; ++c) dot += static_cast<double>(q.at(i, c)) * k.at(j, c);
                logits[j] = dot / tau;
            }
            const double mx = *std::max_element(logits.begin(), logits.end());
            double z = 0.0;
            for (double l : logits) z += std::exp(l - mx);
            acc += std::log(z) + mx - logits[i];
        }
        return acc / static_cast<double>(B);
    };
    return 0.5 * (nll(ea, et) + nll(et, ea));
}

model::ProtoHeadWeights<float> random_proto_head(Rng& rng, std::size_t h, std::size_t mlp,
                                                 std::size_t p_dim, std::size_t k) {
    model::ProtoHeadWeights<float> w;
    w.w1 = nn::Var<float>(testutil::randn<float>(rng, h, mlp, 0.5));
    w.w2 = nn::Var<float>(testutil::randn<float>(rng, mlp, p_dim, 0.5));
    nn::Var<float> protos(testutil::randn<float>(rng, k, p_dim));
    w.prototypes = nn::l2norm_rows<float>(nullptr, protos);
    return w;
}

} // namespace

TEST_CASE("clap loss is zero for a single matched pair") {
    nn::TensorData<float> e(1, 4);
    e.at(0, 0) = 1.0f;
    nn::Var<float> ea(e), et(e);
    for (float lt : {std::log(0.07f), 0.0f, std::log(0.5f)}) {
        auto loss = heads::clap_loss<float>(nullptr, ea, et, scalar_var(lt));
        CHECK(std::abs(loss.scalar()) <= 1e-7);
    }
}

TEST_CASE("clap loss on two orthogonal matched pairs at tau=1") {
    nn::TensorData<float> e(2, 4);
    e.at(0, 0) = 1.0f;
    e.at(1, 1) = 1.0f;
    nn::Var<float> ea(e), et(e);
    auto loss = heads::clap_loss<float>(nullptr, ea, et, scalar_var(0.0f));
    CHECK(std::abs(loss.scalar() - std::log(1.0 + std::exp(-1.0))) <= 1e-6);
    CHECK(std::abs(loss.scalar() - 0.313262) <= 1e-5);
}

TEST_CASE("clap loss on random embeddings approaches ln B and matches a double oracle") {
    Rng rng = derive_rng(7, "losses");
    const std::size_t B = 64, D = 64;
    auto ea = unit_rows(rng, B, D);
    auto et = unit_rows(rng, B, D);
    auto loss = heads::clap_loss<float>(nullptr, ea, et, scalar_var(0.0f));
    CHECK(std::abs(loss.scalar() - clap_oracle(ea.val(), et.val(), 1.0)) <= 1e-4);
    CHECK(std::abs(loss.scalar() - std::log(64.0)) <= 0.15);
}

TEST_CASE("clap loss properties on random batches") {
    Rng rng = derive_rng(8, "losses");
    auto ea = unit_rows(rng, 6, 8);
    auto et = unit_rows(rng, 6, 8);
    auto lt = scalar_var(std::log(0.07f));

    auto base = heads::clap_loss<float>(nullptr, ea, et, lt);
    CHECK(base.scalar() >= 0.0f);

    // symmetric in the two towers
    auto swapped = heads::clap_loss<float>(nullptr, et, ea, lt);
    CHECK(std::abs(base.scalar() - swapped.scalar()) <= 1e-7);

    // invariant under a joint permutation of the pairs
    std::vector<std::size_t> perm{3, 0, 5, 1, 4, 2};
    auto pa = nn::gather_rows<float>(nullptr, ea, perm);
    auto pt = nn::gather_rows<float>(nullptr, et, perm);
    auto permuted = heads::clap_loss<float>(nullptr, pa, pt, lt);
    CHECK(std::abs(base.scalar() - permuted.scalar()) <= 1e-5);

    // gradient reaches both towers and the temperature
    nn::Tape<float> tape;
    auto ga = unit_rows(rng, 4, 8);
    auto gt = unit_rows(rng, 4, 8);
    auto loss = heads::clap_loss<float>(&tape, ga, gt, lt);
    tape.backward(loss);
    auto nonzero = [](const nn::TensorData<float>& g) {
        for (float x : g.v) {
            if (x != 0.0f) return true;
        }
        return false;
    };
    CHECK(nonzero(ga.grad()));
    CHECK(nonzero(gt.grad()));
    CHECK(nonzero(lt.grad()));
}

TEST_CASE("clap loss rejects mismatched shapes") {
    Rng rng = derive_rng(9, "losses");
    auto ea = unit_rows(rng, 3, 8);
    auto et = unit_rows(rng, 4, 8);
    CHECK_THROWS_AS(heads::clap_loss<float>(nullptr, ea, et, scalar_var(0.0f)), Error);
}

TEST_CASE("prototype scores: equal logits give equal probabilities") {
    Rng rng = derive_rng(10, "losses");
    auto w = random_proto_head(rng, 8, 16, 8, 2);
    // both prototypes identical -> symmetric logits for any input
    std::memcpy(w.prototypes.val().row(1), w.prototypes.val().row(0), 8 * sizeof(float));
    auto rows = testutil::randn<float>(rng, 5, 8);
    auto q = heads::prototype_scores<float>(w, rows, 0.1f);
    for (std::size_t i = 0; i < q.rows; ++i) {
        CHECK(q.at(i, 0) == doctest::Approx(0.5).epsilon(1e-6));
        CHECK(q.at(i, 1) == doctest::Approx(0.5).epsilon(1e-6));
    }
}

TEST_CASE("prototype scores: centering by the logit row yields a uniform row") {
    Rng rng = derive_rng(11, "losses");
    const std::size_t K = 4;
    auto w = random_proto_head(rng, 8, 16, 8, K);
    auto rows = testutil::randn<float>(rng, 1, 8);
    auto raw = heads::proto_logits<float>(nullptr, w, nn::Var<float>(rows)).val();
    nn::TensorData<float> center(1, K);
    for (std::size_t j = 0; j < K; ++j) center.v[j] = raw.at(0, j);
    auto q = heads::prototype_scores<float>(w, rows, 0.04f, &center);
    for (std::size_t j = 0; j < K; ++j) CHECK(q.at(0, j) == doctest::Approx(0.25).epsilon(1e-6));
}

TEST_CASE("prototype scores sharpen to one-hot as temp shrinks") {
    Rng rng = derive_rng(12, "losses");
    auto w = random_proto_head(rng, 8, 16, 8, 6);
    auto rows = testutil::randn<float>(rng, 3, 8);
    auto sharp = heads::prototype_scores<float>(w, rows, 1e-3f);
    auto soft = heads::prototype_scores<float>(w, rows, 1.0f);
    for (std::size_t i = 0; i < sharp.rows; ++i) {
        double sum = 0.0;
        std::size_t arg_sharp = 0, arg_soft = 0;
        for (std::size_t j = 0; j < sharp.cols; ++j) {
            sum += sharp.at(i, j);
            if (sharp.at(i, j) > sharp.at(i, arg_sharp)) arg_sharp = j;
            if (soft.at(i, j) > soft.at(i, arg_soft)) arg_soft = j;
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-5));
        CHECK(arg_sharp == arg_soft);
        CHECK(sharp.at(i, arg_sharp) >= 0.999f);
    }
    CHECK_THROWS_AS(heads::prototype_scores<float>(w, rows, 0.0f), Error);
}

TEST_CASE("ssl loss golden values") {
    // uniform student == uniform teacher over K=4
    nn::Var<float> raw(nn::TensorData<float>(3, 4)); // zeros -> uniform softmax at any temp
    nn::TensorData<float> qt(3, 4, 0.25f);
    auto l = heads::ssl_loss<float>(nullptr, raw, qt, 0.1f);
    CHECK(l.scalar() == doctest::Approx(std::log(4.0)).epsilon(1e-6));
    CHECK(std::abs(l.scalar() - 1.386294f) <= 1e-6);

    // hand CE: Q_t=[0.5,0.5], Q_s=[0.9,0.1] with t_student=1
    nn::TensorData<float> raw2(1, 2);
    raw2.at(0, 0) = std::log(0.9f);
    raw2.at(0, 1) = std::log(0.1f);
    nn::TensorData<float> qt2(1, 2, 0.5f);
    auto l2 = heads::ssl_loss<float>(nullptr, nn::Var<float>(raw2), qt2, 1.0f);
    CHECK(std::abs(l2.scalar() - 1.203973) <= 1e-5);
    nn::TensorData<float> qs2(1, 2);
    qs2.at(0, 0) = 0.9f;
    qs2.at(0, 1) = 0.1f;
    CHECK(std::abs(heads::soft_ce_value<float>(qt2, qs2) - 1.203973f) <= 1e-5);

    // near-one-hot agreement is near zero
    nn::TensorData<float> raw3(1, 2);
    raw3.at(0, 0) = 30.0f;
    nn::TensorData<float> qt3(1, 2);
    qt3.at(0, 0) = 1.0f;
    auto l3 = heads::ssl_loss<float>(nullptr, nn::Var<float>(raw3), qt3, 1.0f);
    CHECK(std::abs(l3.scalar()) <= 1e-6);
}

TEST_CASE("ssl loss is minimized when student matches teacher") {
    Rng rng = derive_rng(13, "losses");
    const std::size_t n = 4, K = 5;
    // random teacher distribution rows
    nn::TensorData<float> qt(n, K);
    for (std::size_t i = 0; i < n; ++i) {
        double z = 0.0;
        for (std::size_t j = 0; j < K; ++j) {
            qt.at(i, j) = std::exp(static_cast<float>(rng.normal()));
            z += qt.at(i, j);
        }
        for (std::size_t j = 0; j < K; ++j) qt.at(i, j) = static_cast<float>(qt.at(i, j) / z);
    }
    // student raw = log teacher, t_student=1 -> Q_s == Q_t, loss == mean row entropy
    nn::TensorData<float> raw(n, K);
    double entropy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < K; ++j) {
            raw.at(i, j) = std::log(qt.at(i, j));
            entropy -= static_cast<double>(qt.at(i, j)) * std::log(static_cast<double>(qt.at(i, j)));
        }
    }
    entropy /= n;
    auto at_min = heads::ssl_loss<float>(nullptr, nn::Var<float>(raw), qt, 1.0f);
    CHECK(at_min.scalar() == doctest::Approx(entropy).epsilon(1e-5));

    Rng prng = derive_rng(14, "losses");
    for (int trial = 0; trial < 8; ++trial) {
        nn::TensorData<float> bumped = raw;
        for (auto& x : bumped.v) x += static_cast<float>(prng.normal() * 0.3);
        auto l = heads::ssl_loss<float>(nullptr, nn::Var<float>(bumped), qt, 1.0f);
        CHECK(l.scalar() >= at_min.scalar() - 1e-6f);
    }
}

TEST_CASE("caption NLL goldens via cross-entropy") {
    // uniform logits over the byte vocabulary
    nn::Var<float> logits(nn::TensorData<float>(4, 259));
    std::vector<std::size_t> targets{0, 42, 258, 7};
    auto l = nn::cross_entropy_targets<float>(nullptr, logits, targets);
    CHECK(l.scalar() == doctest::Approx(std::log(259.0)).epsilon(1e-6));
    CHECK(std::abs(l.scalar() - 5.556828) <= 1e-5);

    // one-hot-correct logit with a huge margin
    nn::TensorData<float> hot(1, 259);
    hot.at(0, 42) = 50.0f;
    auto l2 = nn::cross_entropy_targets<float>(nullptr, nn::Var<float>(hot), {42});
    CHECK(std::abs(l2.scalar()) <= 1e-6);

    // 3-class toy, 2 targets, hand-computed mean NLL
    nn::TensorData<float> toy(2, 3);
    toy.at(0, 0) = 1.0f; toy.at(0, 1) = 2.0f; toy.at(0, 2) = 3.0f;
    toy.at(1, 0) = 0.5f; toy.at(1, 1) = 0.0f; toy.at(1, 2) = -0.5f;
    auto l3 = nn::cross_entropy_targets<float>(nullptr, nn::Var<float>(toy), {2, 0});
    const double z0 = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
    const double z1 = std::exp(0.5) + std::exp(0.0) + std::exp(-0.5);
    const double hand = 0.5 * ((std::log(z0) - 3.0) + (std::log(z1) - 0.5));
    CHECK(l3.scalar() == doctest::Approx(hand).epsilon(1e-6));
}

TEST_CASE("total loss combines weighted components") {
    auto one = scalar_var(1.0f);
    auto total = heads::total_loss<float>(nullptr, one, one, one, 1.0f, 1.0f, 0.5f);
    CHECK(total.scalar() == doctest::Approx(2.5).epsilon(1e-7));

    auto z = scalar_var(0.0f);
    CHECK(heads::total_loss<float>(nullptr, z, z, z, 1.0f, 1.0f, 0.5f).scalar() == 0.0f);

    auto clap = scalar_var(0.7f);
    auto abl = heads::total_loss<float>(nullptr, clap, one, one, 1.0f, 0.0f, 0.0f);
    CHECK(abl.scalar() == doctest::Approx(0.7).epsilon(1e-7));

    nn::TensorData<float> bad(1, 1, std::numeric_limits<float>::quiet_NaN());
    try {
        heads::total_loss<float>(nullptr, one, nn::Var<float>(bad), one, 1.0f, 1.0f, 0.5f);
        FAIL("expected numeric error");
    } catch (const Error& e) {
        CHECK(e.kind() == Error::Kind::numeric);
        CHECK(std::string(e.what()).find("l_ssl") != std::string::npos);
    }
}
