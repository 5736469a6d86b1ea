#pragma once

#include <cstdint>
#include <vector>

#include "cadtrans/tensor.hpp"

namespace cadtrans {

// Multi-kernel family for the conditional MMD: Gaussian kernels at several
// bandwidth multiples of a data-driven base bandwidth (square root of the
// median pairwise squared distance of the pooled class subset).
struct KernelSpec {
    std::vector<double> multipliers{0.25, 0.5, 1.0, 2.0, 4.0};
    std::vector<double> weights;  // gamma_u; empty selects uniform 1/v
    // > 0 pins the base bandwidth sigma, bypassing the median rule.
    double fixed_bandwidth = 0.0;
    // Escape hatch: single MMD over the pooled banks, ignoring labels.
    bool pooled = false;

    void validate() const;
    std::vector<double> resolved_weights() const;
};

struct LossWeights {
    double alpha = 0.3;
    double beta = 0.1;
};

// Information maximization: mean per-sample softmax entropy plus
// sum_k zbar_k log zbar_k over the batch-mean softmax zbar (logs guarded at
// 1e-12). Confident and diverse predictions drive it down.
Tensor im_loss(const Tensor& z_batch);

// Mean softmax cross-entropy against integer labels.
Tensor ce_loss(const Tensor& logits, const std::vector<std::int64_t>& labels);

// Consistency cross-entropy (1/B) * sum_i [CE(z_hat_a_i, y_i) + CE(z_t_i, y_i)].
Tensor cst_loss(const Tensor& z_t, const Tensor& z_hat_a,
                const std::vector<std::int64_t>& labels);

struct CmkResult {
    Tensor value;
    bool skipped = false;  // no shared class or an empty side
};

// Conditional multi-kernel MMD^2 (biased V-statistic) between easy and hard
// features, computed per shared class and averaged. Kernel-matrix totals use
// sorted summation, so the value is bit-identical under sample permutation
// and under swapping the two sides.
CmkResult cmk_mmd(const Tensor& easy_feats, const std::vector<std::int64_t>& easy_labels,
                  const Tensor& hard_feats, const std::vector<std::int64_t>& hard_labels,
                  const KernelSpec& spec);

// L_im + alpha * L_cst + beta * L_cmk.
Tensor total_loss(const Tensor& im, const Tensor& cst, const Tensor& cmk,
                  const LossWeights& w);

}  // namespace cadtrans
