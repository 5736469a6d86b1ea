#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "cadtrans/consistency.hpp"
#include "cadtrans/pseudolabel.hpp"
#include "support/testutil.hpp"

using namespace cadtrans;
using testutil::random_tensor;

namespace {

double cosine(const Tensor& a, std::int64_t ra, const Tensor& b, std::int64_t rb) {
    const std::int64_t F = a.dim(1);
    double dot = 0, na = 0, nb = 0;
    for (std::int64_t f = 0; f < F; ++f) {
        const double x = a.at(ra * F + f);
        const double y = b.at(rb * F + f);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    return dot / std::max(std::sqrt(na) * std::sqrt(nb), 1e-12);
}

Tensor normalize_all(const Tensor& x) {
    auto out = x.clone();
    const std::int64_t n = x.dim(0), F = x.dim(1);
    for (std::int64_t i = 0; i < n; ++i) {
        double norm = 0;
        for (std::int64_t f = 0; f < F; ++f) norm += x.at(i * F + f) * x.at(i * F + f);
        norm = std::max(std::sqrt(norm), 1e-12);
        for (std::int64_t f = 0; f < F; ++f) out.set(i * F + f, x.at(i * F + f) / norm);
    }
    return out;
}

}  // namespace

TEST_CASE("init_centroids: uniform weights, confident logits, single point") {
    // all-equal logits -> every centroid is the unweighted mean
    auto feats = Tensor::from_f64({3, 2}, {1, 0, 0, 1, 2, 2});
    auto logits = Tensor::zeros({3, 2}, DType::F64);
    auto c = init_centroids(feats, logits);
    for (int k = 0; k < 2; ++k) {
        CHECK(c.at(k * 2 + 0) == doctest::Approx(1.0));
        CHECK(c.at(k * 2 + 1) == doctest::Approx(1.0));
    }

    // two samples with near one-hot logits pin the per-class centroids
    auto f2 = Tensor::from_f64({2, 2}, {1, 0, 0, 1});
    auto z2 = Tensor::from_f64({2, 2}, {10, 0, 0, 10});
    auto c2 = init_centroids(f2, z2);
    // 64-bit direct-summation oracle
    const double p00 = std::exp(10.0) / (std::exp(10.0) + 1.0);  // sample 0 class 0
    const double p10 = 1.0 / (std::exp(10.0) + 1.0);             // sample 1 class 0
    const double expect_c0x = (p00 * 1 + p10 * 0) / (p00 + p10);
    CHECK(std::fabs(c2.at(0) - expect_c0x) < 1e-12);
    CHECK(std::fabs(c2.at(0) - 1.0) < 1e-3);
    CHECK(std::fabs(c2.at(3) - 1.0) < 1e-3);

    // a single sample owns every centroid
    auto f1 = Tensor::from_f64({1, 3}, {3, -1, 2});
    auto z1 = Tensor::from_f64({1, 4}, {0.5, 1.5, -2, 0});
    auto c1 = init_centroids(f1, z1);
    for (int k = 0; k < 4; ++k)
        for (int f = 0; f < 3; ++f)
            CHECK(c1.at(k * 3 + f) == doctest::Approx(f1.at(f)));

    CHECK_THROWS_AS(init_centroids(Tensor::zeros({0, 3}, DType::F64),
                                   Tensor::zeros({0, 2}, DType::F64)),
                    InputError);
}

TEST_CASE("assign_labels: exact match, tie-break, exhaustive oracle") {
    auto cents = Tensor::from_f64({2, 2}, {1, 0, 0, 1});
    CHECK(assign_labels(Tensor::from_f64({1, 2}, {1, 0}), cents)[0] == 0);
    // equidistant from both centroids -> smallest class index
    CHECK(assign_labels(Tensor::from_f64({1, 2}, {1, 1}), cents)[0] == 0);

    Rng rng(41);
    auto feats = random_tensor({50, 6}, rng);
    auto cs = random_tensor({4, 6}, rng);
    auto got = assign_labels(feats, cs);
    for (std::int64_t i = 0; i < 50; ++i) {
        double best = 2.0;
        std::int64_t arg = 0;
        for (std::int64_t k = 0; k < 4; ++k) {
            const double d = 1.0 - cosine(feats, i, cs, k);
            if (d < best) {
                best = d;
                arg = k;
            }
        }
        CHECK(got[static_cast<std::size_t>(i)] == arg);
    }
}

TEST_CASE("assign_labels is invariant to positive feature scaling") {
    Rng rng(42);
    auto feats = random_tensor({30, 5}, rng);
    auto cents = random_tensor({3, 5}, rng);
    auto scaled = feats.clone();
    for (std::int64_t i = 0; i < scaled.numel(); ++i) scaled.set(i, scaled.at(i) * 37.5);
    CHECK(assign_labels(feats, cents) == assign_labels(scaled, cents));
}

TEST_CASE("refine: class means, empty class keeps previous centroid") {
    auto feats = Tensor::from_f64({3, 2}, {0, 0, 2, 2, 4, 0});
    std::vector<std::int64_t> labels{0, 0, 0};
    auto prev = Tensor::from_f64({2, 2}, {9, 9, 7, 7});
    auto c = refine_centroids(feats, labels, prev);
    CHECK(c.at(0) == doctest::Approx(2.0));
    CHECK(c.at(1) == doctest::Approx(2.0 / 3.0));
    CHECK(c.at(2) == doctest::Approx(7.0));  // class 1 empty, unchanged
    CHECK(c.at(3) == doctest::Approx(7.0));
}

TEST_CASE("evaluate: degenerate rounds, no-memory blending, blob recovery") {
    Rng rng(5);
    auto feats = random_tensor({12, 4}, rng);
    auto logits = random_tensor({12, 3}, rng);

    CentroidEvalConfig cfg;
    cfg.refine_rounds = 0;
    auto pl0 = evaluate_pseudo_labels(feats, logits, cfg, "classifier");
    auto direct = assign_labels(feats, init_centroids(feats, logits));
    CHECK(pl0.labels == direct);
    CHECK(pl0.space_tag == "classifier");

    // momentum 0 keeps only freshly recomputed centroids each round
    cfg.refine_rounds = 1;
    cfg.momentum = 0.0;
    auto pl1 = evaluate_pseudo_labels(feats, logits, cfg, "classifier");
    auto c = init_centroids(feats, logits);
    auto l = assign_labels(feats, c);
    c = refine_centroids(feats, l, c);
    l = assign_labels(feats, c);
    CHECK(pl1.labels == l);

    // separable two-class blobs: labels equal ground truth after 2 rounds
    const int per = 20;
    auto blob = Tensor::zeros({2 * per, 2}, DType::F64);
    auto blogits = Tensor::zeros({2 * per, 2}, DType::F64);
    std::vector<std::int64_t> truth;
    Rng drng(7);
    for (int i = 0; i < 2 * per; ++i) {
        const int cls = i < per ? 0 : 1;
        truth.push_back(cls);
        blob.set(i * 2 + 0, (cls == 0 ? 3.0 : -3.0) + drng.gaussian() * 0.3);
        blob.set(i * 2 + 1, (cls == 0 ? 3.0 : -3.0) + drng.gaussian() * 0.3);
        // weak noisy logits, slightly informative
        blogits.set(i * 2 + cls, 0.8 + drng.gaussian() * 0.2);
        blogits.set(i * 2 + (1 - cls), drng.gaussian() * 0.2);
    }
    CentroidEvalConfig bcfg;
    bcfg.refine_rounds = 2;
    auto pl = evaluate_pseudo_labels(blob, blogits, bcfg, "classifier");
    CHECK(pl.labels == truth);
}

TEST_CASE("evaluate is deterministic") {
    Rng rng(6);
    auto feats = random_tensor({25, 4}, rng);
    auto logits = random_tensor({25, 3}, rng);
    CentroidEvalConfig cfg;
    auto a = evaluate_pseudo_labels(feats, logits, cfg, "x");
    auto b = evaluate_pseudo_labels(feats, logits, cfg, "x");
    CHECK(a.labels == b.labels);
}

TEST_CASE("refine followed by assign never increases the cosine objective") {
    // spherical k-means descent on normalized features, no empty classes
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(100 + seed);
        auto feats = normalize_all(random_tensor({40, 5}, rng));
        auto cents = random_tensor({3, 5}, rng);
        auto labels = assign_labels(feats, cents);
        bool all_present = true;
        for (std::int64_t k = 0; k < 3; ++k)
            all_present &= std::count(labels.begin(), labels.end(), k) > 0;
        if (!all_present) continue;

        auto objective = [&](const Tensor& cs, const std::vector<std::int64_t>& ls) {
            double s = 0;
            for (std::int64_t i = 0; i < 40; ++i)
                s += 1.0 - cosine(feats, i, cs, ls[static_cast<std::size_t>(i)]);
            return s;
        };
        const double before = objective(cents, labels);
        auto refined = refine_centroids(feats, labels, cents);
        auto relabeled = assign_labels(feats, refined);
        const double after = objective(refined, relabeled);
        CHECK(after <= before + 1e-9);
    }
}

TEST_CASE("partition: definition, full agreement, exhaustive cover") {
    auto feats = Tensor::from_f64({3, 2}, {1, 0, 0, 2, 3, 3});
    PseudoLabels c{{0, 1, 2}, "classifier"};
    PseudoLabels g{{0, 2, 2}, "assistant"};
    auto bank = partition(c, g, feats, 1);
    CHECK(bank.easy_indices == std::vector<std::int64_t>{0, 2});
    CHECK(bank.easy_labels == std::vector<std::int64_t>{0, 2});
    CHECK(bank.hard_indices == std::vector<std::int64_t>{1});
    CHECK_FALSE(bank.degraded);
    CHECK(bank.built_at_epoch == 1);

    // unit rows within 1e-6
    for (std::int64_t i = 0; i < bank.easy_count(); ++i) {
        double norm = 0;
        for (int f = 0; f < 2; ++f)
            norm += bank.easy_feats.at(i * 2 + f) * bank.easy_feats.at(i * 2 + f);
        CHECK(std::fabs(std::sqrt(norm) - 1.0) < 1e-6);
    }

    PseudoLabels same{{0, 1, 2}, "assistant"};
    auto bank2 = partition(c, same, feats);
    CHECK(bank2.hard_count() == 0);
    CHECK(bank2.easy_count() == 3);

    Rng rng(50);
    auto bf = random_tensor({200, 4}, rng);
    PseudoLabels lc, lg;
    lc.labels.resize(200);
    lg.labels.resize(200);
    for (auto& v : lc.labels) v = static_cast<std::int64_t>(rng.below(4));
    for (auto& v : lg.labels) v = static_cast<std::int64_t>(rng.below(4));
    auto big = partition(lc, lg, bf);
    CHECK(big.easy_count() + big.hard_count() == 200);
    std::vector<bool> seen(200, false);
    for (auto i : big.easy_indices) {
        CHECK_FALSE(seen[static_cast<std::size_t>(i)]);
        seen[static_cast<std::size_t>(i)] = true;
    }
    for (auto i : big.hard_indices) {
        CHECK_FALSE(seen[static_cast<std::size_t>(i)]);
        seen[static_cast<std::size_t>(i)] = true;
    }
    CHECK(std::all_of(seen.begin(), seen.end(), [](bool b) { return b; }));
}

TEST_CASE("partition flags a degraded epoch when nothing agrees") {
    auto feats = Tensor::from_f64({2, 2}, {1, 0, 0, 1});
    PseudoLabels c{{0, 1}, "classifier"};
    PseudoLabels g{{1, 0}, "assistant"};
    auto bank = partition(c, g, feats);
    CHECK(bank.degraded);
    CHECK(bank.easy_count() == 0);
    CHECK(bank.hard_count() == 2);
    auto rm = rating_matrix(bank);
    CHECK(rm.scores.numel() == 0);
}

TEST_CASE("rating matrix: orthonormal rows, cosine oracle, duplicated row") {
    MemoryBank bank;
    bank.hard_feats = Tensor::from_f64({1, 2}, {1, 0});
    bank.hard_indices = {0};
    bank.easy_feats = Tensor::from_f64({2, 2}, {1, 0, 0, 1});
    bank.easy_labels = {0, 1};
    bank.easy_indices = {1, 2};
    auto rm = rating_matrix(bank);
    CHECK(rm.scores.shape() == Shape{1, 2});
    CHECK(rm.scores.at(0) == doctest::Approx(1.0));
    CHECK(rm.scores.at(1) == doctest::Approx(0.0));

    // entries equal pairwise cosine of the raw features
    Rng rng(60);
    auto feats = random_tensor({40, 5}, rng);
    PseudoLabels lc, lg;
    lc.labels.resize(40);
    lg.labels.resize(40);
    for (std::size_t i = 0; i < 40; ++i) {
        lc.labels[i] = static_cast<std::int64_t>(rng.below(3));
        lg.labels[i] = static_cast<std::int64_t>(rng.below(3));
    }
    auto bank2 = partition(lc, lg, feats);
    REQUIRE(bank2.hard_count() > 0);
    REQUIRE(bank2.easy_count() > 0);
    auto rm2 = rating_matrix(bank2);
    for (std::int64_t i = 0; i < bank2.hard_count(); ++i)
        for (std::int64_t j = 0; j < bank2.easy_count(); ++j) {
            const double expect =
                cosine(feats, bank2.hard_indices[static_cast<std::size_t>(i)], feats,
                       bank2.easy_indices[static_cast<std::size_t>(j)]);
            CHECK(std::fabs(rm2.scores.at(i * bank2.easy_count() + j) - expect) < 1e-9);
            CHECK(rm2.scores.at(i * bank2.easy_count() + j) <= 1.0 + 1e-9);
            CHECK(rm2.scores.at(i * bank2.easy_count() + j) >= -1.0 - 1e-9);
        }

    // duplicating an easy row duplicates its column
    MemoryBank dup = bank;
    dup.easy_feats = Tensor::from_f64({3, 2}, {1, 0, 0, 1, 1, 0});
    dup.easy_labels = {0, 1, 0};
    dup.easy_indices = {1, 2, 3};
    auto rm3 = rating_matrix(dup);
    CHECK(rm3.scores.at(0) == rm3.scores.at(2));
}

TEST_CASE("reassess_hard: degenerate k, unanimous vote, exhaustive oracle") {
    // k = 1 is nearest-neighbor label transfer
    auto s1 = Tensor::from_f64({2, 3}, {0.2, 0.9, 0.1, 0.8, 0.3, 0.5});
    std::vector<std::int64_t> labels{2, 0, 1};
    auto r1 = reassess_hard(s1, labels, 1);
    CHECK(r1 == std::vector<std::int64_t>{0, 2});

    // unanimous top-2
    auto s2 = Tensor::from_f64({1, 3}, {0.9, 0.8, 0.1});
    auto r2 = reassess_hard(s2, {2, 2, 0}, 2);
    CHECK(r2 == std::vector<std::int64_t>{2});

    // exhaustive sort-and-vote oracle on a random 50x30 instance
    Rng rng(70);
    auto s = random_tensor({50, 30}, rng);
    std::vector<std::int64_t> el(30);
    for (auto& v : el) v = static_cast<std::int64_t>(rng.below(5));
    const int k = 7;
    auto got = reassess_hard(s, el, k);
    for (std::int64_t i = 0; i < 50; ++i) {
        std::vector<std::pair<double, std::int64_t>> cand;
        for (std::int64_t j = 0; j < 30; ++j)
            cand.emplace_back(s.at(i * 30 + j), el[static_cast<std::size_t>(j)]);
        std::sort(cand.begin(), cand.end(), [](const auto& a, const auto& b) {
            if (a.first != b.first) return a.first > b.first;
            return a.second < b.second;
        });
        std::vector<int> votes(5, 0);
        std::vector<double> sim(5, 0.0);
        for (int t = 0; t < k; ++t) {
            votes[static_cast<std::size_t>(cand[static_cast<std::size_t>(t)].second)]++;
            sim[static_cast<std::size_t>(cand[static_cast<std::size_t>(t)].second)] +=
                cand[static_cast<std::size_t>(t)].first;
        }
        std::int64_t best = 0;
        for (std::int64_t c2 = 1; c2 < 5; ++c2)
            if (votes[static_cast<std::size_t>(c2)] > votes[static_cast<std::size_t>(best)] ||
                (votes[static_cast<std::size_t>(c2)] == votes[static_cast<std::size_t>(best)] &&
                 sim[static_cast<std::size_t>(c2)] > sim[static_cast<std::size_t>(best)]))
                best = c2;
        CHECK(got[static_cast<std::size_t>(i)] == best);
    }
}

TEST_CASE("reassess_hard output is invariant under easy-bank permutation") {
    Rng rng(71);
    auto s = random_tensor({20, 12}, rng);
    std::vector<std::int64_t> el(12);
    for (auto& v : el) v = static_cast<std::int64_t>(rng.below(4));
    auto base = reassess_hard(s, el, 5);

    std::vector<std::int64_t> perm(12);
    std::iota(perm.begin(), perm.end(), 0);
    Rng shuf(72);
    shuf.shuffle(perm);
    auto sp = Tensor::zeros({20, 12}, DType::F64);
    std::vector<std::int64_t> elp(12);
    for (std::int64_t j = 0; j < 12; ++j) {
        elp[static_cast<std::size_t>(j)] = el[static_cast<std::size_t>(perm[static_cast<std::size_t>(j)])];
        for (std::int64_t i = 0; i < 20; ++i)
            sp.set(i * 12 + j, s.at(i * 12 + perm[static_cast<std::size_t>(j)]));
    }
    CHECK(reassess_hard(sp, elp, 5) == base);
}

TEST_CASE("reassess_hard clamps oversized k") {
    auto s = Tensor::from_f64({1, 3}, {0.5, 0.4, 0.3});
    auto r = reassess_hard(s, {1, 1, 0}, 99);  // clamped to m-1 = 2
    CHECK(r == std::vector<std::int64_t>{1});
    CHECK_THROWS_AS(reassess_hard(s, {1, 1, 0}, 0), ConfigError);
}

TEST_CASE("final_labels: empty hard bank, interleaved bookkeeping") {
    auto feats = Tensor::from_f64({4, 2}, {1, 0, 0, 1, 1, 1, 2, 0});
    PseudoLabels c{{0, 1, 0, 1}, "classifier"};
    PseudoLabels g{{0, 1, 0, 1}, "assistant"};
    auto bank = partition(c, g, feats);
    auto fl = final_labels(bank, {});
    CHECK(fl == c.labels);

    PseudoLabels g2{{0, 2, 0, 2}, "assistant"};
    auto bank2 = partition(c, g2, feats);  // easy {0, 2}, hard {1, 3}
    auto fl2 = final_labels(bank2, {3, 2});
    CHECK(fl2 == std::vector<std::int64_t>{0, 3, 0, 2});
    // easy indices keep consistent labels
    for (std::size_t j = 0; j < bank2.easy_indices.size(); ++j)
        CHECK(fl2[static_cast<std::size_t>(bank2.easy_indices[j])] == bank2.easy_labels[j]);
}
