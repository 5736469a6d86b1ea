#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cadtrans/tensor.hpp"

namespace cadtrans {

struct PseudoLabels {
    std::vector<std::int64_t> labels;  // length n, values in [0, C)
    std::string space_tag;             // "classifier" or "assistant"
};

struct CentroidEvalConfig {
    double momentum = 0.9;  // EMA coefficient blending previous centroids
    int refine_rounds = 2;
    bool euclidean = false;  // assignment by Euclidean distance instead of cosine
};

// Per-class centroid matrix with its refinement state.
struct CentroidSet {
    Tensor centroids;  // [C, F]
    double momentum = 0.9;
    int refine_rounds = 0;
    bool zero_row_flag = false;  // some centroid degenerated to the zero vector
};

// Soft centroids: c_k = sum_i softmax(z_i)_k * f_i / sum_i softmax(z_i)_k,
// denominator guarded at 1e-12.
Tensor init_centroids(const Tensor& feats, const Tensor& logits);

// Nearest-centroid assignment by cosine distance 1 - cos(f, c) (or Euclidean
// when requested); ties resolve to the smallest class index.
std::vector<std::int64_t> assign_labels(const Tensor& feats, const Tensor& centroids,
                                        bool euclidean = false);

// Hard-assignment refinement: class mean of member features; a class with no
// members keeps its previous centroid row.
Tensor refine_centroids(const Tensor& feats, const std::vector<std::int64_t>& labels,
                        const Tensor& previous);

// Full dynamic evaluation: init, assign, then refine_rounds iterations of
// {refine, EMA blend, assign}.
PseudoLabels evaluate_pseudo_labels(const Tensor& feats, const Tensor& logits,
                                    const CentroidEvalConfig& cfg, std::string space_tag,
                                    CentroidSet* centroids_out = nullptr);

}  // namespace cadtrans
