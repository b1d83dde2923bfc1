// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <set>

#include "cobo/seqvae.hpp"

using cobo::LatentZ;
using cobo::Rng;
using cobo::SequenceX;
using cobo::VaeParams;
namespace ad = cobo::ad;

namespace {

VaeParams zero_vae(std::size_t T, std::size_t V, std::size_t h, std::size_t n) {
    Rng rng(1);
    VaeParams p = cobo::init_vae(T, V, h, n, rng);
    for (ad::Tensor* t : {&p.enc_w1, &p.enc_b1, &p.enc_w2, &p.enc_b2,
                          &p.dec_w1, &p.dec_b1, &p.dec_w2, &p.dec_b2})
        t->fill(0.0);
    return p;
}

SequenceX seq_of(std::initializer_list<std::size_t> toks) { return SequenceX(toks); }

}  // namespace

TEST_SUITE("seqvae") {

TEST_CASE("encode: zero-weight network maps everything to the origin") {
    VaeParams p = zero_vae(4, 3, 8, 2);
    auto [mean, logvar] = cobo::encode(p, seq_of({0, 1, 2, 0}));
    for (double m : mean) CHECK(m == 0.0);
    for (double lv : logvar) CHECK(lv == 0.0);
}

TEST_CASE("encode: deterministic for fixed params and input") {
    Rng rng(42);
    VaeParams p = cobo::init_vae(5, 4, 16, 3, rng);
    SequenceX x = seq_of({1, 2, 3, 0, 2});
    auto a = cobo::encode(p, x);
    auto b = cobo::encode(p, x);
    CHECK(a.first == b.first);
    CHECK(a.second == b.second);
}

TEST_CASE("encode: distinct inputs give distinct means under random params") {
    SequenceX x1 = seq_of({0, 1, 2, 3});
    SequenceX x2 = seq_of({3, 2, 1, 0});
    int collisions = 0;
    for (int s = 0; s < 100; ++s) {
        Rng rng(static_cast<std::uint64_t>(s) + 1);
        VaeParams p = cobo::init_vae(4, 4, 8, 2, rng);
        if (cobo::encode_mean(p, x1) == cobo::encode_mean(p, x2)) ++collisions;
    }
    CHECK(collisions == 0);
}

TEST_CASE("encode: logvar respects the clamp") {
    Rng rng(5);
    VaeParams p = cobo::init_vae(4, 3, 8, 2, rng);
    for (auto& v : p.enc_w2.data()) v *= 1e4;  // force pre-clamp values out of range
    auto [mean, logvar] = cobo::encode(p, seq_of({0, 1, 2, 0}));
    (void)mean;
    for (double lv : logvar) {
        CHECK(lv <= cobo::kLogvarClamp);
        CHECK(lv >= -cobo::kLogvarClamp);
    }
}

TEST_CASE("reparameterize: vanishing variance collapses to the mean") {
    Rng rng(3);
    LatentZ mean = {0.3, -1.2, 2.0};
    std::vector<double> logvar(3, -40.0);
    LatentZ z = cobo::reparameterize(mean, logvar, rng);
    for (std::size_t i = 0; i < 3; ++i) CHECK(z[i] == doctest::Approx(mean[i]).epsilon(1e-7));
}

TEST_CASE("reparameterize: zero mean unit logvar reproduces the drawn noise") {
    Rng r1(77), r2(77);
    LatentZ mean(4, 0.0);
    std::vector<double> logvar(4, 0.0);
    LatentZ z = cobo::reparameterize(mean, logvar, r1);
    for (std::size_t i = 0; i < 4; ++i) CHECK(z[i] == r2.normal());
}

TEST_CASE("reparameterize: empirical std over 1e5 draws is 1 within 0.02") {
    Rng rng(123);
    LatentZ mean(1, 0.0);
    std::vector<double> logvar(1, 0.0);
    double sum = 0.0, sumsq = 0.0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) {
        const double z = cobo::reparameterize(mean, logvar, rng)[0];
        sum += z;
        sumsq += z * z;
    }
    const double var = sumsq / n - (sum / n) * (sum / n);
    CHECK(std::sqrt(var) == doctest::Approx(1.0).epsilon(0.02));
}

TEST_CASE("reparameterize: same seed is bit-for-bit reproducible") {
    LatentZ mean = {0.5, -0.5};
    std::vector<double> logvar = {0.3, -0.7};
    Rng r1(9), r2(9);
    CHECK(cobo::reparameterize(mean, logvar, r1) == cobo::reparameterize(mean, logvar, r2));
}

TEST_CASE("decode_logits: zero decoder yields uniform logits, softmax rows normalize") {
    VaeParams p = zero_vae(3, 4, 8, 2);
    auto logits = cobo::decode_logits(p, {0.5, -0.5});
    for (double v : logits) CHECK(v == 0.0);

    Rng rng(8);
    VaeParams q = cobo::init_vae(3, 4, 8, 2, rng);
    auto l2 = cobo::decode_logits(q, {0.5, -0.5});
    for (std::size_t pos = 0; pos < 3; ++pos) {
        double s = 0.0;
        for (std::size_t v = 0; v < 4; ++v) s += std::exp(l2[pos * 4 + v]);
        double total = 0.0;
        for (std::size_t v = 0; v < 4; ++v) total += std::exp(l2[pos * 4 + v]) / s;
        CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("decode_map: uniform logits tie-break to the lowest token index") {
    VaeParams p = zero_vae(5, 3, 8, 2);
    SequenceX out = cobo::decode_map(p, {0.0, 0.0});
    for (std::size_t t : out) CHECK(t == 0);  // pad sits at index 0 in task vocabs
}

TEST_CASE("decode_map: picks unique maxima") {
    VaeParams p = zero_vae(2, 3, 4, 2);
    // bias-only decoder: position 0 favors token 2, position 1 favors token 1
    p.dec_b2[0 * 3 + 2] = 5.0;
    p.dec_b2[1 * 3 + 1] = 5.0;
    SequenceX out = cobo::decode_map(p, {0.0, 0.0});
    CHECK(out == seq_of({2, 1}));
}

TEST_CASE("loss_recon: near-certain decoder scores near zero") {
    VaeParams p = zero_vae(3, 4, 8, 2);
    SequenceX x = seq_of({1, 3, 0});
    for (std::size_t pos = 0; pos < 3; ++pos) p.dec_b2[pos * 4 + x[pos]] = 200.0;
    CHECK(cobo::loss_recon(p, x, {0.0, 0.0}) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("loss_recon: uniform logits over four tokens cost ln 4 per position") {
    VaeParams p = zero_vae(3, 4, 8, 2);
    CHECK(cobo::loss_recon(p, seq_of({0, 1, 2}), {0.0, 0.0}) ==
          doctest::Approx(std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("loss_kl: closed form and positivity") {
    CHECK(cobo::loss_kl({0.0}, {0.0}) == 0.0);
    CHECK(cobo::loss_kl({1.0}, {0.0}) == doctest::Approx(0.5));
    Rng rng(31);
    for (int i = 0; i < 1000; ++i) {
        LatentZ mean = {rng.uniform(-3.0, 3.0), rng.uniform(-3.0, 3.0)};
        std::vector<double> logvar = {rng.uniform(-4.0, 4.0), rng.uniform(-4.0, 4.0)};
        CHECK(cobo::loss_kl(mean, logvar) >= 0.0);
        if (std::abs(mean[0]) > 1e-3) CHECK(cobo::loss_kl(mean, logvar) > 0.0);
    }
}

TEST_CASE("graph path agrees with the evaluation path") {
    Rng rng(55);
    const std::size_t T = 4, V = 5, h = 12, n = 3;
    VaeParams p = cobo::init_vae(T, V, h, n, rng);
    std::vector<SequenceX> xs = {seq_of({0, 1, 2, 3}), seq_of({4, 3, 2, 1}),
                                 seq_of({1, 1, 1, 1})};

    ad::Graph g;
    auto vn = cobo::add_vae_params(g, p, "");
    ad::NodeId x = g.constant(cobo::one_hot(xs, T, V));
    auto [mean, logvar] = cobo::encode_nodes(g, x, vn, n);
    ad::NodeId logits = cobo::decode_logits_nodes(g, mean, vn);
    ad::NodeId recon = cobo::recon_nll_nodes(g, logits, xs, T, V);
    ad::NodeId kl = cobo::kl_nodes(g, mean, logvar);
    g.forward();

    for (std::size_t i = 0; i < xs.size(); ++i) {
        auto [em, elv] = cobo::encode(p, xs[i]);
        for (std::size_t d = 0; d < n; ++d) {
            CHECK(g.value(mean)[i * n + d] == doctest::Approx(em[d]).epsilon(1e-12));
            CHECK(g.value(logvar)[i * n + d] == doctest::Approx(elv[d]).epsilon(1e-12));
        }
        CHECK(g.value(recon)[i] == doctest::Approx(cobo::loss_recon(p, xs[i], em)).epsilon(1e-12));
        CHECK(g.value(kl)[i] == doctest::Approx(cobo::loss_kl(em, elv)).epsilon(1e-12));
    }
}

TEST_CASE("grad_check: ELBO graph gradients match finite differences") {
    Rng rng(66);
    const std::size_t T = 3, V = 4, h = 6, n = 2;
    VaeParams p = cobo::init_vae(T, V, h, n, rng);
    std::vector<SequenceX> xs = {seq_of({0, 1, 2}), seq_of({3, 2, 1})};

    ad::Graph g;
    auto vn = cobo::add_vae_params(g, p, "");
    ad::NodeId x = g.constant(cobo::one_hot(xs, T, V));
    auto [mean, logvar] = cobo::encode_nodes(g, x, vn, n);
    ad::Tensor eps({xs.size(), n});
    for (auto& v : eps.data()) v = rng.normal();
    ad::NodeId z = g.add(mean, g.mul(g.exp(g.mul_scalar(logvar, 0.5)), g.constant(eps)));
    ad::NodeId logits = cobo::decode_logits_nodes(g, z, vn);
    ad::NodeId loss = g.add(g.reduce_mean(cobo::recon_nll_nodes(g, logits, xs, T, V)),
                            g.mul_scalar(g.reduce_mean(cobo::kl_nodes(g, mean, logvar)), 0.1));
    auto report = g.grad_check(loss, vn.all);
    CHECK(report.max_rel_err <= 1e-4);
}

TEST_CASE("pretraining reduces the loss over five seeds") {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        Rng rng(seed);
        VaeParams p = cobo::init_vae(6, 2, 24, 3, rng);
        std::vector<SequenceX> corpus;
        std::set<SequenceX> seen;
        while (corpus.size() < 32) {
            SequenceX s(6);
            for (auto& t : s) t = rng.index(2);
            if (seen.insert(s).second) corpus.push_back(s);
        }
        auto [initial, final_loss] = cobo::pretrain_vae(p, corpus, 60, 0.01, 0.1, rng);
        CHECK(final_loss < initial);
    }
}

TEST_CASE("round-trip: trained VAE reconstructs most of a 64-sequence corpus") {
    Rng rng(2024);
    const std::size_t T = 8, V = 2, h = 48, n = 6;
    VaeParams p = cobo::init_vae(T, V, h, n, rng);
    std::vector<SequenceX> corpus;
    std::set<SequenceX> seen;
    while (corpus.size() < 64) {
        SequenceX s(T);
        for (auto& t : s) t = rng.index(2);
        if (seen.insert(s).second) corpus.push_back(s);
    }
    cobo::pretrain_vae(p, corpus, 1500, 0.01, 0.1, rng);
    std::size_t recovered = 0;
    for (const auto& x : corpus)
        if (cobo::decode_map(p, cobo::encode_mean(p, x)) == x) ++recovered;
    CHECK(recovered >= 58);  // >= 90% of 64
}

TEST_CASE("checkpoint round-trips bit-exactly") {
    Rng rng(91);
    VaeParams p = cobo::init_vae(5, 3, 10, 4, rng);
    const std::string path = "vae_roundtrip_test.bin";
    cobo::save_vae(p, path);
    VaeParams q = cobo::load_vae(path);
    std::remove(path.c_str());
    CHECK(q.T == p.T);
    CHECK(q.V == p.V);
    CHECK(q.h == p.h);
    CHECK(q.n == p.n);
    const ad::Tensor* a[] = {&p.enc_w1, &p.enc_b1, &p.enc_w2, &p.enc_b2,
                             &p.dec_w1, &p.dec_b1, &p.dec_w2, &p.dec_b2};
    const ad::Tensor* b[] = {&q.enc_w1, &q.enc_b1, &q.enc_w2, &q.enc_b2,
                             &q.dec_w1, &q.dec_b1, &q.dec_w2, &q.dec_b2};
    for (int i = 0; i < 8; ++i) {
        REQUIRE(a[i]->numel() == b[i]->numel());
        for (std::size_t k = 0; k < a[i]->numel(); ++k) CHECK((*a[i])[k] == (*b[i])[k]);
    }
    CHECK_THROWS_AS(cobo::load_vae("does_not_exist.bin"), std::runtime_error);
}

}  // TEST_SUITE
