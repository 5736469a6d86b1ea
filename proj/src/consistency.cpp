#include "cadtrans/consistency.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>

#include "cadtrans/ops.hpp"

namespace cadtrans {

namespace {

Tensor normalize_rows(const Tensor& feats, const std::vector<std::int64_t>& rows) {
    const std::int64_t F = feats.dim(1);
    Tensor out = Tensor::zeros({static_cast<std::int64_t>(rows.size()), F}, feats.dtype());
    for (std::size_t r = 0; r < rows.size(); ++r) {
        double norm = 0.0;
        for (std::int64_t f = 0; f < F; ++f) {
            const double v = feats.at(rows[r] * F + f);
            norm += v * v;
        }
        norm = std::max(std::sqrt(norm), 1e-12);
        for (std::int64_t f = 0; f < F; ++f)
            out.set(static_cast<std::int64_t>(r) * F + f, feats.at(rows[r] * F + f) / norm);
    }
    return out;
}

}  // namespace

MemoryBank partition(const PseudoLabels& labels_c, const PseudoLabels& labels_g,
                     const Tensor& feats, int epoch) {
    const std::int64_t n = feats.dim(0);
    if (static_cast<std::int64_t>(labels_c.labels.size()) != n ||
        static_cast<std::int64_t>(labels_g.labels.size()) != n)
        throw ShapeError("partition: label lengths " +
                         std::to_string(labels_c.labels.size()) + "/" +
                         std::to_string(labels_g.labels.size()) + " vs " +
                         std::to_string(n) + " features");

    MemoryBank bank;
    bank.built_at_epoch = epoch;
    std::vector<std::int64_t> easy_rows, hard_rows;
    for (std::int64_t i = 0; i < n; ++i) {
        if (labels_c.labels[static_cast<std::size_t>(i)] ==
            labels_g.labels[static_cast<std::size_t>(i)]) {
            easy_rows.push_back(i);
            bank.easy_labels.push_back(labels_c.labels[static_cast<std::size_t>(i)]);
        } else {
            hard_rows.push_back(i);
        }
    }
    bank.easy_indices = easy_rows;
    bank.hard_indices = hard_rows;
    bank.easy_feats = normalize_rows(feats, easy_rows);
    bank.hard_feats = normalize_rows(feats, hard_rows);
    if (easy_rows.empty()) {
        bank.degraded = true;
        std::cerr << "[consistency] warning: no consistent samples, degraded epoch "
                  << epoch << "\n";
    }
    return bank;
}

RatingMatrix rating_matrix(const MemoryBank& bank) {
    RatingMatrix rm;
    if (bank.hard_count() == 0 || bank.easy_count() == 0) {
        rm.scores = Tensor::zeros({bank.hard_count(), bank.easy_count()},
                                  bank.easy_feats.defined() ? bank.easy_feats.dtype()
                                                            : DType::F32);
        return rm;
    }
    rm.scores = ops::matmul(bank.hard_feats, ops::transpose2d(bank.easy_feats));
    return rm;
}

std::vector<std::int64_t> reassess_hard(const Tensor& scores,
                                        const std::vector<std::int64_t>& easy_labels,
                                        int k) {
    const std::int64_t nh = scores.dim(0);
    const std::int64_t m = scores.dim(1);
    if (static_cast<std::int64_t>(easy_labels.size()) != m)
        throw ShapeError("reassess_hard: " + std::to_string(easy_labels.size()) +
                         " labels for " + std::to_string(m) + " columns");
    if (m == 0) return {};
    if (k < 1) throw ConfigError("reassess_hard: k must be >= 1");
    // the neighbor count must stay below the easy count; a single easy sample
    // still contributes itself
    const int k_max = static_cast<int>(std::max<std::int64_t>(m - 1, 1));
    if (k > k_max) {
        std::cerr << "[consistency] warning: k=" << k << " clamped to " << k_max
                  << " (easy count " << m << ")\n";
        k = k_max;
    }

    std::int64_t num_classes = 0;
    for (auto l : easy_labels) num_classes = std::max(num_classes, l + 1);

    std::vector<std::int64_t> out(static_cast<std::size_t>(nh), 0);
    std::vector<std::pair<double, std::int64_t>> cand(static_cast<std::size_t>(m));
    for (std::int64_t i = 0; i < nh; ++i) {
        for (std::int64_t j = 0; j < m; ++j)
            cand[static_cast<std::size_t>(j)] = {scores.at(i * m + j),
                                                 easy_labels[static_cast<std::size_t>(j)]};
        // similarity descending, label ascending: the selected label multiset
        // is invariant under any permutation of the easy bank
        std::sort(cand.begin(), cand.end(), [](const auto& a, const auto& b) {
            if (a.first != b.first) return a.first > b.first;
            return a.second < b.second;
        });
        std::vector<std::int64_t> votes(static_cast<std::size_t>(num_classes), 0);
        std::vector<double> simsum(static_cast<std::size_t>(num_classes), 0.0);
        for (int t = 0; t < k; ++t) {
            const auto& c = cand[static_cast<std::size_t>(t)];
            votes[static_cast<std::size_t>(c.second)] += 1;
            simsum[static_cast<std::size_t>(c.second)] += c.first;
        }
        std::int64_t best = 0;
        for (std::int64_t c = 1; c < num_classes; ++c) {
            const auto cb = static_cast<std::size_t>(best);
            const auto cc = static_cast<std::size_t>(c);
            if (votes[cc] > votes[cb] ||
                (votes[cc] == votes[cb] && simsum[cc] > simsum[cb]))
                best = c;
        }
        out[static_cast<std::size_t>(i)] = best;
    }
    return out;
}

std::vector<std::int64_t> final_labels(const MemoryBank& bank,
                                       const std::vector<std::int64_t>& reassessed) {
    if (static_cast<std::int64_t>(reassessed.size()) != bank.hard_count())
        throw ShapeError("final_labels: " + std::to_string(reassessed.size()) +
                         " reassessed labels for " + std::to_string(bank.hard_count()) +
                         " hard samples");
    const std::int64_t n = bank.total();
    std::vector<std::int64_t> out(static_cast<std::size_t>(n), -1);
    for (std::size_t j = 0; j < bank.easy_indices.size(); ++j)
        out[static_cast<std::size_t>(bank.easy_indices[j])] = bank.easy_labels[j];
    for (std::size_t j = 0; j < bank.hard_indices.size(); ++j)
        out[static_cast<std::size_t>(bank.hard_indices[j])] = reassessed[j];
    for (auto v : out)
        if (v < 0) throw Error("final_labels: coverage gap, bank indices do not partition");
    return out;
}

}  // namespace cadtrans
