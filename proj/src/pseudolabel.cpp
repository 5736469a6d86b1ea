#include "cadtrans/pseudolabel.hpp"

#include <cmath>
#include <iostream>

#include "cadtrans/ops.hpp"

namespace cadtrans {

namespace {
constexpr double kEps = 1e-12;
}

Tensor init_centroids(const Tensor& feats, const Tensor& logits) {
    if (feats.rank() != 2 || logits.rank() != 2 || feats.dim(0) != logits.dim(0))
        throw ShapeError("init_centroids: need feats[n, F] and logits[n, C], got " +
                         shape_str(feats.shape()) + " vs " + shape_str(logits.shape()));
    const std::int64_t n = feats.dim(0);
    if (n == 0) throw InputError("init_centroids: empty input");
    const std::int64_t F = feats.dim(1);
    const std::int64_t C = logits.dim(1);

    Tensor probs = ops::softmax(logits, 1);
    Tensor centroids = Tensor::zeros({C, F}, DType::F64);
    for (std::int64_t k = 0; k < C; ++k) {
        double wsum = 0.0;
        std::vector<double> acc(static_cast<std::size_t>(F), 0.0);
        for (std::int64_t i = 0; i < n; ++i) {
            const double w = probs.at(i * C + k);
            wsum += w;
            for (std::int64_t f = 0; f < F; ++f)
                acc[static_cast<std::size_t>(f)] += w * feats.at(i * F + f);
        }
        const double denom = wsum > kEps ? wsum : kEps;
        for (std::int64_t f = 0; f < F; ++f)
            centroids.set(k * F + f, acc[static_cast<std::size_t>(f)] / denom);
    }
    return centroids.astype(feats.dtype());
}

std::vector<std::int64_t> assign_labels(const Tensor& feats, const Tensor& centroids,
                                        bool euclidean) {
    if (feats.rank() != 2 || centroids.rank() != 2 || feats.dim(1) != centroids.dim(1))
        throw ShapeError("assign_labels: need feats[n, F] and centroids[C, F], got " +
                         shape_str(feats.shape()) + " vs " + shape_str(centroids.shape()));
    const std::int64_t n = feats.dim(0);
    const std::int64_t F = feats.dim(1);
    const std::int64_t C = centroids.dim(0);

    std::vector<double> cnorm(static_cast<std::size_t>(C), 0.0);
    for (std::int64_t k = 0; k < C; ++k) {
        double s = 0.0;
        for (std::int64_t f = 0; f < F; ++f) {
            const double v = centroids.at(k * F + f);
            s += v * v;
        }
        cnorm[static_cast<std::size_t>(k)] = std::max(std::sqrt(s), kEps);
    }

    std::vector<std::int64_t> labels(static_cast<std::size_t>(n), 0);
    for (std::int64_t i = 0; i < n; ++i) {
        double fnorm = 0.0;
        for (std::int64_t f = 0; f < F; ++f) {
            const double v = feats.at(i * F + f);
            fnorm += v * v;
        }
        fnorm = std::max(std::sqrt(fnorm), kEps);
        double best = 0.0;
        std::int64_t arg = 0;
        for (std::int64_t k = 0; k < C; ++k) {
            double d;
            if (euclidean) {
                d = 0.0;
                for (std::int64_t f = 0; f < F; ++f) {
                    const double diff = feats.at(i * F + f) - centroids.at(k * F + f);
                    d += diff * diff;
                }
            } else {
                double dot = 0.0;
                for (std::int64_t f = 0; f < F; ++f)
                    dot += feats.at(i * F + f) * centroids.at(k * F + f);
                d = 1.0 - dot / (fnorm * cnorm[static_cast<std::size_t>(k)]);
            }
            if (k == 0 || d < best) {
                best = d;
                arg = k;
            }
        }
        labels[static_cast<std::size_t>(i)] = arg;
    }
    return labels;
}

Tensor refine_centroids(const Tensor& feats, const std::vector<std::int64_t>& labels,
                        const Tensor& previous) {
    const std::int64_t n = feats.dim(0);
    const std::int64_t F = feats.dim(1);
    const std::int64_t C = previous.dim(0);
    if (static_cast<std::int64_t>(labels.size()) != n)
        throw ShapeError("refine_centroids: " + std::to_string(labels.size()) +
                         " labels for " + std::to_string(n) + " features");
    Tensor out = previous.clone();
    for (std::int64_t k = 0; k < C; ++k) {
        std::vector<double> acc(static_cast<std::size_t>(F), 0.0);
        std::int64_t count = 0;
        for (std::int64_t i = 0; i < n; ++i) {
            if (labels[static_cast<std::size_t>(i)] != k) continue;
            ++count;
            for (std::int64_t f = 0; f < F; ++f)
                acc[static_cast<std::size_t>(f)] += feats.at(i * F + f);
        }
        if (count == 0) continue;  // empty class keeps the previous centroid
        for (std::int64_t f = 0; f < F; ++f)
            out.set(k * F + f, acc[static_cast<std::size_t>(f)] / static_cast<double>(count));
    }
    return out;
}

PseudoLabels evaluate_pseudo_labels(const Tensor& feats, const Tensor& logits,
                                    const CentroidEvalConfig& cfg, std::string space_tag,
                                    CentroidSet* centroids_out) {
    if (cfg.refine_rounds < 0) throw ConfigError("refine_rounds must be >= 0");
    Tensor centroids = init_centroids(feats, logits);

    bool zero_row = false;
    const std::int64_t C = centroids.dim(0);
    const std::int64_t F = centroids.dim(1);
    for (std::int64_t k = 0; k < C && !zero_row; ++k) {
        double s = 0.0;
        for (std::int64_t f = 0; f < F; ++f) s += std::fabs(centroids.at(k * F + f));
        zero_row = s < kEps;
    }
    if (zero_row)
        std::cerr << "[pseudolabel] warning: degenerate zero centroid in " << space_tag
                  << " space\n";

    auto labels = assign_labels(feats, centroids, cfg.euclidean);
    for (int round = 0; round < cfg.refine_rounds; ++round) {
        Tensor refined = refine_centroids(feats, labels, centroids);
        // EMA blend: momentum keeps the previous exploration step
        Tensor blended = Tensor::zeros(centroids.shape(), centroids.dtype());
        for (std::int64_t i = 0; i < centroids.numel(); ++i)
            blended.set(i, cfg.momentum * centroids.at(i) +
                               (1.0 - cfg.momentum) * refined.at(i));
        centroids = blended;
        labels = assign_labels(feats, centroids, cfg.euclidean);
    }

    if (centroids_out) {
        centroids_out->centroids = centroids;
        centroids_out->momentum = cfg.momentum;
        centroids_out->refine_rounds = cfg.refine_rounds;
        centroids_out->zero_row_flag = zero_row;
    }
    PseudoLabels out;
    out.labels = std::move(labels);
    out.space_tag = std::move(space_tag);
    return out;
}

}  // namespace cadtrans
