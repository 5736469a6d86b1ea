#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "cadtrans/adm.hpp"
#include "cadtrans/backbone.hpp"
#include "cadtrans/network.hpp"
#include "cadtrans/ops.hpp"
#include "cadtrans/tape.hpp"
#include "support/testutil.hpp"

using namespace cadtrans;
namespace op = cadtrans::ops;
using testutil::random_tensor;

namespace {

BackboneConfig toy_config() {
    BackboneConfig cfg;
    cfg.num_classes = 4;
    return cfg;
}

// closed-form hand count of the backbone + classifier parameters
std::int64_t backbone_formula(const BackboneConfig& c) {
    const std::int64_t D = c.embed_dim, T = c.tokens(), H = c.mlp_hidden,
                       F = c.feature_dim, C = c.num_classes, ps = c.patch_side;
    const std::int64_t patch = D * ps * ps + D;
    const std::int64_t pos_cls = T * D + D;
    const std::int64_t per_layer = 2 * D + 4 * (D * D + D) + 2 * D + (D * H + H) + (H * D + D);
    const std::int64_t tail = 2 * D + (D * F + F) + (F * C + C);
    return patch + pos_cls + c.layers * per_layer + tail;
}

// closed-form hand count of the assistant module
std::int64_t adm_formula(const AdmConfig& c) {
    std::int64_t n = 0;
    std::int64_t ci = c.in_channels;
    for (int i = 0; i < 3; ++i) {
        const std::int64_t co = c.channels[static_cast<std::size_t>(i)];
        const std::int64_t k = c.kernels[static_cast<std::size_t>(i)];
        n += co * ci * k * k + co;  // conv
        n += 2 * co;                // bn affine
        ci = co;
    }
    if (c.channels[2] != c.feature_dim)
        n += static_cast<std::int64_t>(c.channels[2]) * c.feature_dim + c.feature_dim;
    n += static_cast<std::int64_t>(c.feature_dim) * c.head_hidden + c.head_hidden;
    n += static_cast<std::int64_t>(c.head_hidden) * c.num_classes + c.num_classes;
    return n;
}

}  // namespace

TEST_CASE("ema_aggregate: degenerate lambda, fixed point, hand-unrolled recursion") {
    auto t = [](double v) { return Tensor::from_f64({1}, {v}); };

    // lambda = 1 keeps only the last layer
    auto last_only = ema_aggregate({t(1), t(2), t(3)}, 1, 1.0);
    CHECK(last_only.at(0) == doctest::Approx(3.0));

    // identical layers are a fixed point for any lambda
    auto fixed = ema_aggregate({t(7), t(7), t(7)}, 1, 0.37);
    CHECK(fixed.at(0) == doctest::Approx(7.0));

    // L=3, l_start=1, lambda=0.99: 0.99*3 + 0.01*(0.99*2 + 0.01*1)
    auto r = ema_aggregate({t(1), t(2), t(3)}, 1, 0.99);
    CHECK(r.at(0) == doctest::Approx(2.9899).epsilon(1e-12));

    CHECK_THROWS_AS(ema_aggregate({t(1)}, 2, 0.99), ConfigError);
}

TEST_CASE("ema_aggregate is permutation-sensitive on unequal layers") {
    Rng rng(3);
    std::vector<Tensor> feats = {random_tensor({4}, rng), random_tensor({4}, rng),
                                 random_tensor({4}, rng)};
    std::vector<Tensor> rev = {feats[2], feats[1], feats[0]};
    auto a = ema_aggregate(feats, 1, 0.99);
    auto b = ema_aggregate(rev, 1, 0.99);
    bool any_diff = false;
    for (int i = 0; i < 4; ++i) any_diff |= a.at(i) != b.at(i);
    CHECK(any_diff);
}

TEST_CASE("ema swap switch exchanges the weighting") {
    auto t = [](double v) { return Tensor::from_f64({1}, {v}); };
    auto swapped = ema_aggregate({t(1), t(2), t(3)}, 1, 0.99, true);
    // with weights swapped the current layer gets 0.01
    CHECK(swapped.at(0) == doctest::Approx(0.01 * 3 + 0.99 * (0.01 * 2 + 0.99 * 1)));
}

TEST_CASE("mhsa: single token gives unit attention weight and SA output = V") {
    BackboneConfig cfg;
    cfg.embed_dim = 2;
    cfg.heads = 1;
    cfg.layers = 1;
    cfg.mlp_hidden = 3;
    cfg.feature_dim = 2;
    cfg.num_classes = 2;
    cfg.attn_agg_start = 1;
    Backbone bb(cfg);
    ModelState ms;
    Rng rng(0);
    bb.init_params(ms, rng, DType::F64);
    // identity projections, zero biases
    for (const char* w : {"wq", "wk", "wv", "wo"}) {
        auto& p = ms.param_entry("backbone.layer0.attn." + std::string(w));
        p.value = Tensor::from_f64({2, 2}, {1, 0, 0, 1}).set_requires_grad(true);
    }
    auto tokens = Tensor::from_f64({1, 1, 2}, {0.3, -1.2});
    auto r = bb.mhsa_layer(ms, 0, tokens);
    CHECK(r.attn_weights.shape() == Shape{1, 1, 1});
    CHECK(r.attn_weights.at(0) == doctest::Approx(1.0));
    // with W_o = I the SA output equals V = layer-normed tokens
    auto v = op::layer_norm(tokens, ms.param("backbone.layer0.ln1.g"),
                            ms.param("backbone.layer0.ln1.b"));
    for (int i = 0; i < 2; ++i) CHECK(r.attn_feat.at(i) == doctest::Approx(v.at(i)));
}

TEST_CASE("mhsa: 2-token 1-head D=2 case matches a direct 64-bit oracle") {
    BackboneConfig cfg;
    cfg.embed_dim = 2;
    cfg.heads = 1;
    cfg.layers = 1;
    cfg.mlp_hidden = 3;
    cfg.feature_dim = 2;
    cfg.num_classes = 2;
    cfg.attn_agg_start = 1;
    Backbone bb(cfg);
    ModelState ms;
    Rng rng(5);
    bb.init_params(ms, rng, DType::F64);

    auto tokens = random_tensor({1, 2, 2}, rng);
    auto r = bb.mhsa_layer(ms, 0, tokens);

    // direct recomputation with plain double loops
    auto P = [&](const std::string& n) { return ms.param(n); };
    const std::string pre = "backbone.layer0.";
    double x[2][2] = {{tokens.at(0), tokens.at(1)}, {tokens.at(2), tokens.at(3)}};
    double u[2][2];
    for (int t = 0; t < 2; ++t) {
        const double mean = (x[t][0] + x[t][1]) / 2.0;
        double var = 0;
        for (int d = 0; d < 2; ++d) var += (x[t][d] - mean) * (x[t][d] - mean);
        var /= 2.0;
        const double istd = 1.0 / std::sqrt(var + 1e-5);
        for (int d = 0; d < 2; ++d)
            u[t][d] = P(pre + "ln1.g").at(d) * (x[t][d] - mean) * istd +
                      P(pre + "ln1.b").at(d);
    }
    auto lin = [&](const double in[2][2], const std::string& w, const std::string& b,
                   double out[2][2]) {
        for (int t = 0; t < 2; ++t)
            for (int d = 0; d < 2; ++d)
                out[t][d] = in[t][0] * P(w).at(0 * 2 + d) + in[t][1] * P(w).at(1 * 2 + d) +
                            P(b).at(d);
    };
    double q[2][2], k[2][2], v[2][2];
    lin(u, pre + "attn.wq", pre + "attn.bq", q);
    lin(u, pre + "attn.wk", pre + "attn.bk", k);
    lin(u, pre + "attn.wv", pre + "attn.bv", v);
    const double scale = 1.0 / std::sqrt(2.0);
    double ctx[2][2];
    for (int t = 0; t < 2; ++t) {
        double s0 = (q[t][0] * k[0][0] + q[t][1] * k[0][1]) * scale;
        double s1 = (q[t][0] * k[1][0] + q[t][1] * k[1][1]) * scale;
        const double mx = std::max(s0, s1);
        const double e0 = std::exp(s0 - mx), e1 = std::exp(s1 - mx);
        const double w0 = e0 / (e0 + e1), w1 = e1 / (e0 + e1);
        for (int d = 0; d < 2; ++d) ctx[t][d] = w0 * v[0][d] + w1 * v[1][d];
    }
    double attn_feat[2][2];
    lin(ctx, pre + "attn.wo", pre + "attn.bo", attn_feat);

    for (int t = 0; t < 2; ++t)
        for (int d = 0; d < 2; ++d)
            CHECK(std::fabs(r.attn_feat.at(t * 2 + d) - attn_feat[t][d]) < 1e-8);

    double y[2][2];
    for (int t = 0; t < 2; ++t)
        for (int d = 0; d < 2; ++d) y[t][d] = x[t][d] + attn_feat[t][d];
    double z[2][2];
    for (int t = 0; t < 2; ++t) {
        const double mean = (y[t][0] + y[t][1]) / 2.0;
        double var = 0;
        for (int d = 0; d < 2; ++d) var += (y[t][d] - mean) * (y[t][d] - mean);
        var /= 2.0;
        const double istd = 1.0 / std::sqrt(var + 1e-5);
        for (int d = 0; d < 2; ++d)
            z[t][d] = P(pre + "ln2.g").at(d) * (y[t][d] - mean) * istd +
                      P(pre + "ln2.b").at(d);
    }
    double expect[2][2];
    for (int t = 0; t < 2; ++t) {
        double hmid[3];
        for (int hh = 0; hh < 3; ++hh) {
            double a = z[t][0] * P(pre + "mlp.w1").at(0 * 3 + hh) +
                       z[t][1] * P(pre + "mlp.w1").at(1 * 3 + hh) +
                       P(pre + "mlp.b1").at(hh);
            hmid[hh] = a > 0 ? a : 0;
        }
        for (int d = 0; d < 2; ++d) {
            double a = P(pre + "mlp.b2").at(d);
            for (int hh = 0; hh < 3; ++hh) a += hmid[hh] * P(pre + "mlp.w2").at(hh * 2 + d);
            expect[t][d] = y[t][d] + a;
        }
    }
    for (int t = 0; t < 2; ++t)
        for (int d = 0; d < 2; ++d)
            CHECK(std::fabs(r.tokens.at(t * 2 + d) - expect[t][d]) < 1e-8);
}

TEST_CASE("forward: shape contract, row-stochastic attention, determinism") {
    auto cfg = toy_config();
    Network net = Network::make_toy(cfg);
    ModelState ms = net.init_state(1, DType::F32);

    Rng rng(9);
    auto one_image = random_tensor({1, 1, 16, 16}, rng, DType::F32, 0.5);
    std::vector<float> twice;
    for (int r = 0; r < 2; ++r)
        for (std::int64_t i = 0; i < one_image.numel(); ++i)
            twice.push_back(static_cast<float>(one_image.at(i)));
    auto batch = Tensor::from_f32({2, 1, 16, 16}, twice);

    auto out = net.forward(ms, batch, RunMode::Eval);
    CHECK(out.f_t.shape() == Shape{2, cfg.feature_dim});
    CHECK(out.z_t.shape() == Shape{2, cfg.num_classes});
    CHECK(out.global_attn.shape() == Shape{2, cfg.tokens(), cfg.embed_dim});
    CHECK(out.f_hat_a.shape() == Shape{2, cfg.feature_dim});
    CHECK(out.z_hat_a.shape() == Shape{2, cfg.num_classes});
    REQUIRE(out.layer_feats.size() == static_cast<std::size_t>(cfg.layers));

    // every attention weight matrix is row-stochastic
    for (const auto& w : out.attn_weights) {
        auto sums = op::sum_axis(w, 2);
        for (std::int64_t i = 0; i < sums.numel(); ++i)
            CHECK(std::fabs(sums.at(i) - 1.0) < 1e-6);
    }

    // identical inputs in one eval batch produce identical outputs
    for (std::int64_t j = 0; j < cfg.feature_dim; ++j)
        CHECK(out.f_t.at(j) == out.f_t.at(cfg.feature_dim + j));
    for (std::int64_t j = 0; j < cfg.num_classes; ++j)
        CHECK(out.z_t.at(j) == out.z_t.at(cfg.num_classes + j));
}

TEST_CASE("parameter counts match the closed-form hand formulas") {
    auto cfg = toy_config();
    Backbone bb(cfg);
    CHECK(bb.param_count() == backbone_formula(cfg));

    Network net = Network::make_toy(cfg);
    ModelState ms = net.init_state(0, DType::F32);
    const auto backbone_actual =
        ms.param_count("backbone.") + ms.param_count("classifier.");
    CHECK(backbone_actual == backbone_formula(cfg));
    CHECK(ms.param_count("adm.") == adm_formula(net.adm().config()));
}

TEST_CASE("assistant overhead stays within 10% of the backbone at both scales") {
    auto cfg = toy_config();
    Network net = Network::make_toy(cfg);
    const double toy_ratio = static_cast<double>(net.adm().param_count()) /
                             static_cast<double>(net.backbone().param_count());
    CHECK(toy_ratio <= 0.10);

    BackboneConfig paper;
    paper.image_side = 224;
    paper.patch_side = 16;
    paper.embed_dim = 768;
    paper.heads = 12;
    paper.layers = 12;
    paper.mlp_hidden = 3072;
    paper.feature_dim = 256;
    paper.num_classes = 31;
    paper.attn_agg_start = 5;  // layers above 4 of 12
    Backbone paper_bb(paper);
    Adm paper_adm(AdmConfig::paper_scale(31));
    const double paper_ratio = static_cast<double>(paper_adm.param_count()) /
                               static_cast<double>(paper_bb.param_count());
    CHECK(paper_ratio <= 0.10);
}

TEST_CASE("gradients flow from z_t back to the patch embedding") {
    Network net = Network::make_toy(toy_config());
    ModelState ms = net.init_state(3, DType::F32);
    Rng rng(4);
    auto batch = random_tensor({4, 1, 16, 16}, rng, DType::F32, 0.5);
    Tape tape;
    {
        TapeScope scope(tape);
        auto out = net.forward(ms, batch, RunMode::TrainTarget);
        auto loss = op::mean_all(op::mul(out.z_t, out.z_t));
        tape.backward(loss);
    }
    auto g = ms.param("backbone.patch_embed.w").grad();
    REQUIRE(g.defined());
    double norm = 0;
    for (std::int64_t i = 0; i < g.numel(); ++i) norm += g.at(i) * g.at(i);
    CHECK(norm > 0.0);
}

TEST_CASE("reshape_attention: layout, toy and paper-scale shapes") {
    Rng rng(8);
    auto attn = random_tensor({2, 17, 32}, rng, DType::F32);
    auto map = reshape_attention(attn);
    CHECK(map.shape() == Shape{2, 32, 4, 4});
    // token (r, c) of the map equals input token index 1 + r*4 + c
    for (std::int64_t b = 0; b < 2; ++b)
        for (std::int64_t d = 0; d < 32; ++d)
            for (std::int64_t r = 0; r < 4; ++r)
                for (std::int64_t c = 0; c < 4; ++c)
                    CHECK(map.at(((b * 32 + d) * 4 + r) * 4 + c) ==
                          attn.at((b * 17 + (1 + r * 4 + c)) * 32 + d));

    auto big = Tensor::zeros({1, 197, 768}, DType::F32);
    CHECK(reshape_attention(big).shape() == Shape{1, 768, 14, 14});

    auto bad = Tensor::zeros({1, 6, 8}, DType::F32);  // N = 5 not a square
    CHECK_THROWS_AS(reshape_attention(bad), ConfigError);
}

TEST_CASE("adm conv plans walk the documented spatial sizes") {
    auto paper = AdmConfig::paper_scale(12);
    auto sides = paper.spatial_plan();
    CHECK(sides[0] == 14);
    CHECK(sides[1] == 6);
    CHECK(sides[2] == 4);
    CHECK(sides[3] == 2);

    auto toy = AdmConfig::toy(32, 4, 32, 4);
    auto tsides = toy.spatial_plan();
    CHECK(tsides[0] == 4);
    CHECK(tsides[1] == 4);
    CHECK(tsides[2] == 4);
    CHECK(tsides[3] == 2);
}

TEST_CASE("adm: constant-zero map in eval mode with zero biases gives zero features") {
    Network net = Network::make_toy(toy_config());
    ModelState ms = net.init_state(11, DType::F32);
    auto zero_map = Tensor::zeros({3, 32, 4, 4}, DType::F32);
    auto out = net.adm().forward_eval(ms, zero_map);
    for (std::int64_t i = 0; i < out.f_hat_a.numel(); ++i)
        CHECK(std::fabs(out.f_hat_a.at(i)) < 1e-7);
}

TEST_CASE("distill loss: identical heads, Euclidean norm, direct oracle") {
    auto f_eq = Tensor::from_f64({2, 3}, {1, 2, 3, 4, 5, 6});
    auto z_eq = Tensor::from_f64({2, 2}, {0.3, -0.7, 1.1, 0.2});
    CHECK(distill_loss(f_eq, f_eq, z_eq, z_eq).at(0) == doctest::Approx(0.0).epsilon(1e-12));

    // feature gap (3, 4) with equal logits -> Euclidean norm 5
    auto fa = Tensor::from_f64({1, 2}, {3, 4});
    auto fs = Tensor::from_f64({1, 2}, {0, 0});
    auto z1 = Tensor::from_f64({1, 2}, {0.4, -0.9});
    CHECK(distill_loss(fa, fs, z1, z1).at(0) == doctest::Approx(5.0).epsilon(1e-9));

    Rng rng(21);
    auto f1 = random_tensor({5, 4}, rng);
    auto f2 = random_tensor({5, 4}, rng);
    auto za = random_tensor({5, 3}, rng);
    auto zs = random_tensor({5, 3}, rng);
    const double got = distill_loss(f1, f2, za, zs).at(0);

    double expect = 0.0;
    for (int i = 0; i < 5; ++i) {
        double norm = 0;
        for (int f = 0; f < 4; ++f) {
            const double d = f1.at(i * 4 + f) - f2.at(i * 4 + f);
            norm += d * d;
        }
        expect += std::sqrt(norm);
        double e1[3], e2[3], s1 = 0, s2 = 0;
        for (int c = 0; c < 3; ++c) {
            e1[c] = std::exp(za.at(i * 3 + c));
            e2[c] = std::exp(zs.at(i * 3 + c));
            s1 += e1[c];
            s2 += e2[c];
        }
        for (int c = 0; c < 3; ++c) {
            const double p = e1[c] / s1;
            expect += p * std::log(p / (e2[c] / s2));
        }
    }
    expect /= 5.0;
    CHECK(std::fabs(got - expect) < 1e-8);
}

TEST_CASE("distill loss: misaligned batches throw") {
    auto fa = Tensor::from_f64({1, 2}, {3, 4});
    auto fs = Tensor::from_f64({2, 2}, {0, 0, 0, 0});
    auto z = Tensor::from_f64({1, 2}, {0, 0});
    CHECK_THROWS_AS(distill_loss(fa, fs, z, z), ShapeError);
    auto fb = Tensor::from_f64({2, 2}, {0, 0, 0, 0});
    CHECK_THROWS_AS(distill_loss(fb, fs, z, z), ShapeError);
}

TEST_CASE("distill loss: nonnegative, zero only at identical heads") {
    Rng rng(33);
    for (int trial = 0; trial < 20; ++trial) {
        auto fa = random_tensor({3, 4}, rng);
        auto fs = random_tensor({3, 4}, rng);
        auto za = random_tensor({3, 5}, rng);
        auto zs = random_tensor({3, 5}, rng);
        CHECK(distill_loss(fa, fs, za, zs).at(0) >= 0.0);
    }
}

TEST_CASE("distill loss: gradient reaches the student but not the teacher") {
    Rng rng(13);
    auto fa = random_tensor({4, 3}, rng);
    auto fs = random_tensor({4, 3}, rng);
    auto za = random_tensor({4, 5}, rng);
    auto zs = random_tensor({4, 5}, rng);

    Tape tape;
    {
        TapeScope scope(tape);
        tape.watch(fa);
        tape.watch(fs);
        tape.watch(za);
        tape.watch(zs);
        auto loss = distill_loss(fa, fs, za, zs);
        tape.backward(loss);
    }
    REQUIRE(fa.has_grad());
    REQUIRE(za.has_grad());
    // stop-gradient contract: the teacher gradient is exactly zero (absent)
    CHECK_FALSE(fs.has_grad());
    CHECK_FALSE(zs.has_grad());

    auto fwd = [&] { return distill_loss(fa, fs, za, zs); };
    CHECK(testutil::fd_max_rel_err(fwd, {fa, za}, 40) < 1e-4);
}

TEST_CASE("distill loss: squared-variant switch") {
    auto fa = Tensor::from_f64({1, 2}, {3, 4});
    auto fs = Tensor::from_f64({1, 2}, {0, 0});
    auto z = Tensor::from_f64({1, 3}, {0.5, -0.5, 0.0});
    CHECK(distill_loss(fa, fs, z, z, true).at(0) == doctest::Approx(25.0));
}

TEST_CASE("distill loss through the assistant module passes finite differences") {
    BackboneConfig cfg = toy_config();
    Network net = Network::make_toy(cfg);
    ModelState ms = net.init_state(17, DType::F64);
    Rng rng(18);
    auto map = random_tensor({3, 32, 4, 4}, rng, DType::F64, 0.5);
    auto f_s = random_tensor({3, cfg.feature_dim}, rng);
    auto z_s = random_tensor({3, cfg.num_classes}, rng);

    std::vector<Tensor> leaves = {ms.param("adm.conv1.w"), ms.param("adm.bn2.g"),
                                  ms.param("adm.proj.w"), ms.param("adm.head.w2")};
    auto fwd = [&]() {
        auto out = net.adm().forward_eval(ms, map);
        return distill_loss(out.f_hat_a, f_s, out.z_hat_a, z_s);
    };
    CHECK(testutil::fd_max_rel_err(fwd, leaves, 60) < 1e-4);
}
