#include "cadtrans/losses.hpp"

#include <algorithm>
#include <set>

#include "cadtrans/ops.hpp"

namespace cadtrans {

namespace op = ops;

namespace {
constexpr double kLogFloor = 1e-12;
constexpr double kBandwidthFloor = 1e-12;
}  // namespace

void KernelSpec::validate() const {
    if (multipliers.empty()) throw ConfigError("kernel spec needs at least one multiplier");
    for (double m : multipliers)
        if (m <= 0.0) throw ConfigError("kernel multipliers must be positive");
    if (!weights.empty()) {
        if (weights.size() != multipliers.size())
            throw ConfigError("kernel weights must match multipliers");
        for (double w : weights)
            if (w < 0.0) throw ConfigError("kernel weights must be nonnegative");
    }
    if (fixed_bandwidth < 0.0) throw ConfigError("fixed_bandwidth must be >= 0");
}

std::vector<double> KernelSpec::resolved_weights() const {
    if (!weights.empty()) return weights;
    return std::vector<double>(multipliers.size(), 1.0 / static_cast<double>(multipliers.size()));
}

Tensor im_loss(const Tensor& z_batch) {
    if (z_batch.rank() != 2 || z_batch.dim(0) < 1)
        throw ShapeError("im_loss: need logits [B, C] with B >= 1, got " +
                         shape_str(z_batch.shape()));
    auto probs = op::softmax(z_batch, 1);
    auto log_probs = op::log(probs, kLogFloor);
    auto entropy_rows = op::mul_scalar(op::sum_axis(op::mul(probs, log_probs), 1), -1.0);
    auto entropy_term = op::mean_all(entropy_rows);

    auto mean_probs = op::mean_axis(probs, 0);  // [C]
    auto diversity_term =
        op::sum_all(op::mul(mean_probs, op::log(mean_probs, kLogFloor)));

    return op::add(entropy_term, diversity_term);
}

Tensor ce_loss(const Tensor& logits, const std::vector<std::int64_t>& labels) {
    const std::int64_t B = logits.dim(0);
    const std::int64_t C = logits.dim(1);
    if (static_cast<std::int64_t>(labels.size()) != B)
        throw ShapeError("ce_loss: " + std::to_string(labels.size()) + " labels for batch " +
                         std::to_string(B));
    std::vector<std::int64_t> flat(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= C)
            throw InputError("ce_loss: label " + std::to_string(labels[i]) +
                             " out of range [0, " + std::to_string(C) + ")");
        flat[i] = static_cast<std::int64_t>(i) * C + labels[i];
    }
    return op::mul_scalar(op::mean_all(op::take_flat(op::log_softmax(logits, 1), flat)),
                          -1.0);
}

Tensor cst_loss(const Tensor& z_t, const Tensor& z_hat_a,
                const std::vector<std::int64_t>& labels) {
    check_same_shape(z_t, z_hat_a, "cst_loss");
    const std::int64_t B = z_t.dim(0);
    const std::int64_t C = z_t.dim(1);
    if (static_cast<std::int64_t>(labels.size()) != B)
        throw ShapeError("cst_loss: " + std::to_string(labels.size()) + " labels for batch " +
                         std::to_string(B));
    std::vector<std::int64_t> flat(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= C)
            throw InputError("cst_loss: label " + std::to_string(labels[i]) +
                             " out of range [0, " + std::to_string(C) + ")");
        flat[i] = static_cast<std::int64_t>(i) * C + labels[i];
    }
    auto picked_a = op::take_flat(op::log_softmax(z_hat_a, 1), flat);
    auto picked_t = op::take_flat(op::log_softmax(z_t, 1), flat);
    return op::mul_scalar(op::mean_all(op::add(picked_a, picked_t)), -1.0);
}

namespace {

// Multi-kernel sum over a squared-distance block: sum of
// sum_u gamma_u exp(-d2 / (2 sigma_u^2)) with sigma_u = mult_u * sigma_base.
// sigma2_base enters as a scalar tensor so the data-driven bandwidth stays
// inside the gradient graph.
Tensor kernel_block_total(const Tensor& d2, const Tensor& sigma2_base,
                          const KernelSpec& spec, const std::vector<double>& gammas) {
    Tensor acc;
    for (std::size_t u = 0; u < spec.multipliers.size(); ++u) {
        const double mult = spec.multipliers[u];
        auto denom = op::mul_scalar(sigma2_base, 2.0 * mult * mult);
        auto k = op::exp(op::mul_scalar(op::div_scalar_tensor(d2, denom), -1.0));
        auto weighted = op::mul_scalar(k, gammas[u]);
        acc = acc.defined() ? op::add(acc, weighted) : weighted;
    }
    return op::sum_all_sorted(acc);
}

// MMD^2 between row sets X[n, F] and Y[m, F] (biased V-statistic).
Tensor mmd2_pair(const Tensor& x, const Tensor& y, const KernelSpec& spec) {
    const std::int64_t n = x.dim(0);
    const std::int64_t m = y.dim(0);
    auto pool = op::concat({x, y}, 0);
    auto dists = op::pairwise_sqdist(pool, pool);

    Tensor sigma2_base;
    if (spec.fixed_bandwidth > 0.0) {
        sigma2_base = Tensor::scalar(spec.fixed_bandwidth * spec.fixed_bandwidth, x.dtype());
    } else {
        const std::int64_t p = n + m;
        std::vector<std::int64_t> uptri;
        uptri.reserve(static_cast<std::size_t>(p * (p - 1) / 2));
        for (std::int64_t i = 0; i < p; ++i)
            for (std::int64_t j = i + 1; j < p; ++j) uptri.push_back(i * p + j);
        if (uptri.empty()) {
            sigma2_base = Tensor::scalar(kBandwidthFloor, x.dtype());
        } else {
            auto med = op::median_all(op::take_flat(dists, uptri));
            sigma2_base = op::clamp_min(med, kBandwidthFloor);
        }
    }

    auto gammas = spec.resolved_weights();
    auto dxx = op::slice(op::slice(dists, 0, 0, n), 1, 0, n);
    auto dyy = op::slice(op::slice(dists, 0, n, m), 1, n, m);
    auto dxy = op::slice(op::slice(dists, 0, 0, n), 1, n, m);

    auto sxx = kernel_block_total(dxx, sigma2_base, spec, gammas);
    auto syy = kernel_block_total(dyy, sigma2_base, spec, gammas);
    auto sxy = kernel_block_total(dxy, sigma2_base, spec, gammas);

    const double ninv = 1.0 / static_cast<double>(n);
    const double minv = 1.0 / static_cast<double>(m);
    return op::add(op::add(op::mul_scalar(sxx, ninv * ninv), op::mul_scalar(syy, minv * minv)),
                   op::mul_scalar(sxy, -2.0 * ninv * minv));
}

std::vector<std::int64_t> rows_with_label(const std::vector<std::int64_t>& labels,
                                          std::int64_t c) {
    std::vector<std::int64_t> rows;
    for (std::size_t i = 0; i < labels.size(); ++i)
        if (labels[i] == c) rows.push_back(static_cast<std::int64_t>(i));
    return rows;
}

}  // namespace

CmkResult cmk_mmd(const Tensor& easy_feats, const std::vector<std::int64_t>& easy_labels,
                  const Tensor& hard_feats, const std::vector<std::int64_t>& hard_labels,
                  const KernelSpec& spec) {
    spec.validate();
    CmkResult res;
    const DType dt = easy_feats.defined() ? easy_feats.dtype() : DType::F32;
    if (!easy_feats.defined() || !hard_feats.defined() || easy_feats.dim(0) == 0 ||
        hard_feats.dim(0) == 0) {
        res.value = Tensor::scalar(0.0, dt);
        res.skipped = true;
        return res;
    }
    if (static_cast<std::int64_t>(easy_labels.size()) != easy_feats.dim(0) ||
        static_cast<std::int64_t>(hard_labels.size()) != hard_feats.dim(0))
        throw ShapeError("cmk_mmd: label counts do not match feature rows");

    if (spec.pooled) {
        res.value = mmd2_pair(easy_feats, hard_feats, spec);
        return res;
    }

    std::set<std::int64_t> shared;
    for (auto c : easy_labels)
        if (std::find(hard_labels.begin(), hard_labels.end(), c) != hard_labels.end())
            shared.insert(c);
    if (shared.empty()) {
        res.value = Tensor::scalar(0.0, dt);
        res.skipped = true;
        return res;
    }

    Tensor acc;
    for (auto c : shared) {
        auto x = op::take_rows(easy_feats, rows_with_label(easy_labels, c));
        auto y = op::take_rows(hard_feats, rows_with_label(hard_labels, c));
        auto term = mmd2_pair(x, y, spec);
        acc = acc.defined() ? op::add(acc, term) : term;
    }
    res.value = op::mul_scalar(acc, 1.0 / static_cast<double>(shared.size()));
    return res;
}

Tensor total_loss(const Tensor& im, const Tensor& cst, const Tensor& cmk,
                  const LossWeights& w) {
    if (w.alpha < 0.0 || w.beta < 0.0)
        throw ConfigError("loss weights must be nonnegative");
    return op::add(im, op::add(op::mul_scalar(cst, w.alpha), op::mul_scalar(cmk, w.beta)));
}

}  // namespace cadtrans
