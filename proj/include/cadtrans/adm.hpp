#pragma once

#include <array>
#include <string>
#include <utility>
#include <vector>

#include "cadtrans/model.hpp"
#include "cadtrans/rng.hpp"
#include "cadtrans/tensor.hpp"

namespace cadtrans {

// Assistant Domain Module: a three-block conv stack over the reshaped global
// attention map followed by a two-layer head. Blocks 1 and 2 are
// conv -> batchnorm -> relu; block 3 is conv -> batchnorm -> global average
// pool. The pooled vector is projected to feature_dim when the widths differ.
struct AdmConfig {
    int in_channels = 32;  // D of the attention map
    int map_side = 4;      // sqrt(N)
    std::array<int, 3> channels{8, 8, 8};
    std::array<int, 3> kernels{3, 3, 3};
    std::array<int, 3> strides{1, 1, 2};
    std::array<int, 3> pads{1, 1, 1};
    int feature_dim = 32;  // F of the assistant feature
    int head_hidden = 16;
    int num_classes = 4;

    // Small stack sized so the assistant stays within the parameter-overhead
    // budget of the toy backbone.
    static AdmConfig toy(int attn_dim, int map_side, int feature_dim, int num_classes);
    // The 768 -> 512 -> 256 -> 256 plan (strides 2, 1, 1, no padding) that maps
    // a 14x14 map down to 2x2 before pooling.
    static AdmConfig paper_scale(int num_classes);

    void validate() const;
    std::array<int, 4> spatial_plan() const;  // side length after each conv
    bool needs_projection() const { return channels[2] != feature_dim; }
};

// Drops the CLS token (index 0) and lays the remaining N tokens out row-major
// as a D-channel sqrt(N) x sqrt(N) map: [B, N+1, D] -> [B, D, s, s].
Tensor reshape_attention(const Tensor& global_attn);

struct AdmOutputs {
    Tensor f_hat_a;  // [B, F]
    Tensor z_hat_a;  // [B, C]
};

class Adm {
public:
    explicit Adm(AdmConfig cfg);

    const AdmConfig& config() const { return cfg_; }

    std::vector<std::pair<std::string, Shape>> param_plan() const;
    std::int64_t param_count() const;
    void init_params(ModelState& ms, Rng& rng, DType dt) const;

    // map: [B, D, s, s]. Training mode uses batch statistics and writes the
    // updated running statistics back into `ms`; eval mode is pure.
    AdmOutputs forward(ModelState& ms, const Tensor& map, bool training) const;
    AdmOutputs forward_eval(const ModelState& ms, const Tensor& map) const;

private:
    AdmConfig cfg_;
};

// Source-stage self-distillation loss: per-sample Euclidean distance between
// assistant and classifier features plus KL(softmax(z_hat_a) || softmax(z_s)),
// averaged over the batch. The teacher tensors f_s and z_s are treated as
// constants; no gradient reaches them. `squared_feature_term` switches the
// distance term to its squared variant.
Tensor distill_loss(const Tensor& f_hat_a, const Tensor& f_s, const Tensor& z_hat_a,
                    const Tensor& z_s, bool squared_feature_term = false);

}  // namespace cadtrans
