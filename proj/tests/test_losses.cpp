#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "cadtrans/losses.hpp"
#include "cadtrans/ops.hpp"
#include "cadtrans/tape.hpp"
#include "support/testutil.hpp"

using namespace cadtrans;
namespace op = cadtrans::ops;
using testutil::random_tensor;

TEST_CASE("im_loss: confident limit, uniform cancellation, direct oracle") {
    // one-hot-confident logits, all the same class: both terms vanish
    auto confident = Tensor::from_f64({3, 2}, {30, 0, 30, 0, 30, 0});
    CHECK(std::fabs(im_loss(confident).at(0)) < 1e-6);

    // uniform softmax for every sample: entropy log C cancels diversity -log C
    auto uniform = Tensor::zeros({5, 4}, DType::F64);
    CHECK(std::fabs(im_loss(uniform).at(0)) < 1e-12);

    // random batch vs 64-bit direct-summation oracle
    Rng rng(3);
    auto z = random_tensor({6, 5}, rng, DType::F64, 2.0);
    const double got = im_loss(z).at(0);
    double ent = 0.0;
    std::vector<double> mean_p(5, 0.0);
    for (int i = 0; i < 6; ++i) {
        double denom = 0;
        for (int c = 0; c < 5; ++c) denom += std::exp(z.at(i * 5 + c));
        for (int c = 0; c < 5; ++c) {
            const double p = std::exp(z.at(i * 5 + c)) / denom;
            ent -= p * std::log(std::max(p, 1e-12));
            mean_p[static_cast<std::size_t>(c)] += p / 6.0;
        }
    }
    double div = 0.0;
    for (int c = 0; c < 5; ++c)
        div += mean_p[static_cast<std::size_t>(c)] *
               std::log(std::max(mean_p[static_cast<std::size_t>(c)], 1e-12));
    CHECK(std::fabs(got - (ent / 6.0 + div)) < 1e-8);
}

TEST_CASE("im_loss entropy term lies in [0, log C]") {
    Rng rng(4);
    for (int trial = 0; trial < 10; ++trial) {
        auto z = random_tensor({8, 6}, rng, DType::F64, 3.0);
        auto probs = op::softmax(z, 1);
        for (int i = 0; i < 8; ++i) {
            double h = 0;
            for (int c = 0; c < 6; ++c) {
                const double p = probs.at(i * 6 + c);
                h -= p * std::log(std::max(p, 1e-12));
            }
            CHECK(h >= -1e-12);
            CHECK(h <= std::log(6.0) + 1e-9);
        }
    }
}

TEST_CASE("cst_loss: perfect heads, uniform analytic value, oracle, label range") {
    auto z_good = Tensor::from_f64({2, 3}, {40, 0, 0, 0, 40, 0});
    CHECK(std::fabs(cst_loss(z_good, z_good, {0, 1}).at(0)) < 1e-6);

    auto z_uni = Tensor::zeros({3, 4}, DType::F64);
    CHECK(cst_loss(z_uni, z_uni, {1, 2, 0}).at(0) ==
          doctest::Approx(2.0 * std::log(4.0)).epsilon(1e-12));

    Rng rng(5);
    auto zt = random_tensor({4, 3}, rng);
    auto za = random_tensor({4, 3}, rng);
    std::vector<std::int64_t> y{2, 0, 1, 1};
    const double got = cst_loss(zt, za, y).at(0);
    double expect = 0;
    for (int i = 0; i < 4; ++i) {
        for (const Tensor* z : {&zt, &za}) {
            double denom = 0;
            for (int c = 0; c < 3; ++c) denom += std::exp(z->at(i * 3 + c));
            expect -= std::log(std::exp(z->at(i * 3 + y[static_cast<std::size_t>(i)])) / denom);
        }
    }
    expect /= 4.0;
    CHECK(std::fabs(got - expect) < 1e-8);

    CHECK_THROWS_AS(cst_loss(zt, za, {0, 1, 2, 3}), InputError);
    CHECK_THROWS_AS(cst_loss(zt, za, {0, 1, -1, 2}), InputError);
}

TEST_CASE("cmk_mmd: identical sets vanish") {
    Rng rng(6);
    auto x = random_tensor({7, 4}, rng);
    std::vector<std::int64_t> labels{0, 1, 0, 2, 1, 0, 2};
    KernelSpec spec;
    auto r = cmk_mmd(x, labels, x.clone(), labels, spec);
    CHECK_FALSE(r.skipped);
    CHECK(std::fabs(r.value.at(0)) < 1e-9);
}

TEST_CASE("cmk_mmd: single-pair closed form 2 - 2 exp(-|x-y|^2 / (2 sigma^2))") {
    // |x - y|^2 = 2 sigma^2 gives 2 - 2/e
    const double sigma = 0.7;
    auto x = Tensor::from_f64({1, 2}, {sigma * std::sqrt(2.0), 0.0});
    auto y = Tensor::from_f64({1, 2}, {0.0, 0.0});
    KernelSpec spec;
    spec.multipliers = {1.0};
    spec.weights = {1.0};
    spec.fixed_bandwidth = sigma;
    auto r = cmk_mmd(x, {0}, y, {0}, spec);
    CHECK_FALSE(r.skipped);
    CHECK(std::fabs(r.value.at(0) - (2.0 - 2.0 * std::exp(-1.0))) < 1e-10);
}

TEST_CASE("cmk_mmd: no shared class or empty side skips with zero") {
    Rng rng(7);
    auto x = random_tensor({3, 4}, rng);
    auto y = random_tensor({2, 4}, rng);
    auto r = cmk_mmd(x, {0, 0, 1}, y, {2, 3}, KernelSpec{});
    CHECK(r.skipped);
    CHECK(r.value.at(0) == 0.0);

    auto empty = Tensor::zeros({0, 4}, DType::F64);
    auto r2 = cmk_mmd(empty, {}, y, {2, 3}, KernelSpec{});
    CHECK(r2.skipped);
}

TEST_CASE("cmk_mmd: nonnegative over 200 random instances") {
    Rng rng(8);
    for (int trial = 0; trial < 200; ++trial) {
        const auto n = static_cast<std::int64_t>(2 + rng.below(6));
        const auto m = static_cast<std::int64_t>(2 + rng.below(6));
        auto x = random_tensor({n, 3}, rng);
        auto y = random_tensor({m, 3}, rng);
        std::vector<std::int64_t> xl(static_cast<std::size_t>(n)),
            yl(static_cast<std::size_t>(m));
        for (auto& v : xl) v = static_cast<std::int64_t>(rng.below(3));
        for (auto& v : yl) v = static_cast<std::int64_t>(rng.below(3));
        auto r = cmk_mmd(x, xl, y, yl, KernelSpec{});
        if (!r.skipped) CHECK(r.value.at(0) >= -1e-9);
    }
}

TEST_CASE("cmk_mmd: bit-exact under permutation and side swap") {
    Rng rng(9);
    auto x = random_tensor({6, 4}, rng);
    auto y = random_tensor({5, 4}, rng);
    std::vector<std::int64_t> xl{0, 1, 0, 1, 2, 0};
    std::vector<std::int64_t> yl{1, 0, 2, 0, 1};
    KernelSpec spec;
    const double base = cmk_mmd(x, xl, y, yl, spec).value.at(0);

    // permute samples within the easy side
    std::vector<std::int64_t> perm{3, 0, 5, 1, 4, 2};
    auto xp = Tensor::zeros({6, 4}, DType::F64);
    std::vector<std::int64_t> xlp(6);
    for (std::int64_t i = 0; i < 6; ++i) {
        xlp[static_cast<std::size_t>(i)] = xl[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
        for (std::int64_t f = 0; f < 4; ++f)
            xp.set(i * 4 + f, x.at(perm[static_cast<std::size_t>(i)] * 4 + f));
    }
    CHECK(cmk_mmd(xp, xlp, y, yl, spec).value.at(0) == base);

    // swapping the two sides is exact as well
    CHECK(cmk_mmd(y, yl, x, xl, spec).value.at(0) == base);
}

TEST_CASE("cmk_mmd: pooled escape hatch ignores labels") {
    Rng rng(10);
    auto x = random_tensor({4, 3}, rng);
    auto y = random_tensor({4, 3}, rng);
    KernelSpec spec;
    spec.pooled = true;
    auto a = cmk_mmd(x, {0, 0, 0, 0}, y, {1, 1, 1, 1}, spec);
    auto b = cmk_mmd(x, {0, 1, 2, 3}, y, {0, 1, 2, 3}, spec);
    CHECK_FALSE(a.skipped);
    CHECK(a.value.at(0) == b.value.at(0));
}

TEST_CASE("losses pass finite-difference gradient checks") {
    Rng rng(11);
    SUBCASE("im_loss") {
        auto z = random_tensor({6, 4}, rng);
        auto fwd = [&] { return im_loss(z); };
        CHECK(testutil::fd_max_rel_err(fwd, {z}, 40) < 1e-4);
    }
    SUBCASE("cst_loss") {
        auto zt = random_tensor({5, 4}, rng);
        auto za = random_tensor({5, 4}, rng);
        std::vector<std::int64_t> y{0, 3, 1, 2, 2};
        auto fwd = [&] { return cst_loss(zt, za, y); };
        CHECK(testutil::fd_max_rel_err(fwd, {zt, za}, 40) < 1e-4);
    }
    SUBCASE("cmk_mmd with the data-driven bandwidth in the graph") {
        auto x = random_tensor({5, 3}, rng);
        auto y = random_tensor({6, 3}, rng);
        std::vector<std::int64_t> xl{0, 1, 0, 1, 0};
        std::vector<std::int64_t> yl{0, 0, 1, 1, 0, 1};
        KernelSpec spec;
        auto fwd = [&] { return cmk_mmd(x, xl, y, yl, spec).value; };
        CHECK(testutil::fd_max_rel_err(fwd, {x, y}, 60) < 1e-4);
    }
    SUBCASE("total loss") {
        auto z = random_tensor({5, 3}, rng);
        auto za = random_tensor({5, 3}, rng);
        auto fe = random_tensor({3, 4}, rng);
        auto fh = random_tensor({4, 4}, rng);
        std::vector<std::int64_t> y{0, 1, 2, 0, 1};
        LossWeights w;
        auto fwd = [&] {
            auto im = im_loss(z);
            auto cst = cst_loss(z, za, y);
            auto cmk = cmk_mmd(fe, {0, 1, 0}, fh, {0, 0, 1, 1}, KernelSpec{}).value;
            return total_loss(im, cst, cmk, w);
        };
        CHECK(testutil::fd_max_rel_err(fwd, {z, za, fe, fh}, 80) < 1e-4);
    }
}

TEST_CASE("total_loss: arithmetic, ablation reduction, gradient superposition") {
    auto one = Tensor::scalar(1.0, DType::F64);
    auto two = Tensor::scalar(2.0, DType::F64);
    auto three = Tensor::scalar(3.0, DType::F64);
    LossWeights w;  // alpha 0.3, beta 0.1
    CHECK(total_loss(one, two, three, w).at(0) == doctest::Approx(1.9).epsilon(1e-12));

    // alpha = beta = 0 reduces to the information-maximization baseline
    Rng rng(12);
    auto z = random_tensor({4, 3}, rng);
    LossWeights zero{0.0, 0.0};
    auto im = im_loss(z);
    auto cst = cst_loss(z, z, {0, 1, 2, 0});
    auto cmk = Tensor::scalar(0.4, DType::F64);
    CHECK(total_loss(im, cst, cmk, zero).at(0) == doctest::Approx(im.at(0)).epsilon(1e-12));

    // gradient of the total equals the weighted sum of per-loss gradients
    auto za = random_tensor({4, 3}, rng);
    std::vector<std::int64_t> y{0, 2, 1, 0};
    auto grad_of = [&](auto make_loss) {
        Tape tape;
        TapeScope scope(tape);
        tape.watch(z);
        auto loss = make_loss();
        tape.backward(loss);
        auto g = z.grad().to_vector();
        z.clear_grad();
        return g;
    };
    auto g_total = grad_of([&] {
        return total_loss(im_loss(z), cst_loss(z, za, y), Tensor::scalar(0.0, DType::F64),
                          w);
    });
    auto g_im = grad_of([&] { return im_loss(z); });
    auto g_cst = grad_of([&] { return cst_loss(z, za, y); });
    for (std::size_t i = 0; i < g_total.size(); ++i)
        CHECK(std::fabs(g_total[i] - (g_im[i] + w.alpha * g_cst[i])) < 1e-7);
}
