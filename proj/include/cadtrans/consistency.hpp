#pragma once

#include <cstdint>
#include <vector>

#include "cadtrans/pseudolabel.hpp"
#include "cadtrans/tensor.hpp"

namespace cadtrans {

// Epoch-frozen store of row-normalized target features split into easy
// (consistent dual-space pseudo-label) and hard (inconsistent) samples.
// Easy and hard index sets are disjoint and cover all target indices.
struct MemoryBank {
    Tensor easy_feats;                       // [m, F], unit rows
    std::vector<std::int64_t> easy_labels;   // consistent labels, length m
    std::vector<std::int64_t> easy_indices;  // original sample indices
    Tensor hard_feats;                       // [n', F], unit rows
    std::vector<std::int64_t> hard_indices;
    int built_at_epoch = -1;
    bool degraded = false;  // no easy samples this epoch

    std::int64_t easy_count() const { return static_cast<std::int64_t>(easy_indices.size()); }
    std::int64_t hard_count() const { return static_cast<std::int64_t>(hard_indices.size()); }
    std::int64_t total() const { return easy_count() + hard_count(); }
};

// Hard x easy cosine similarity scores on unit rows; entries lie in [-1, 1].
struct RatingMatrix {
    Tensor scores;  // [n', m]
};

// Index i is easy iff labels_c[i] == labels_g[i]; the easy bank keeps that
// label. Everything else lands in the hard bank. Features are row-normalized.
MemoryBank partition(const PseudoLabels& labels_c, const PseudoLabels& labels_g,
                     const Tensor& feats, int epoch = -1);

RatingMatrix rating_matrix(const MemoryBank& bank);

// kNN label transfer: for each hard row take the k highest-similarity easy
// columns and vote; vote ties break by largest summed similarity, then
// smallest class index. k is clamped below the easy count.
std::vector<std::int64_t> reassess_hard(const Tensor& scores,
                                        const std::vector<std::int64_t>& easy_labels,
                                        int k);

// Final pseudo-labels ordered by original sample index: easy indices keep the
// consistent labels, hard indices take the reassessed ones.
std::vector<std::int64_t> final_labels(const MemoryBank& bank,
                                       const std::vector<std::int64_t>& reassessed);

}  // namespace cadtrans
