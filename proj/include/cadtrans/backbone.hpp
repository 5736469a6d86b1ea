#pragma once

#include <string>
#include <utility>
#include <vector>

#include "cadtrans/model.hpp"
#include "cadtrans/rng.hpp"
#include "cadtrans/tensor.hpp"

namespace cadtrans {

struct BackboneConfig {
    int image_side = 16;
    int patch_side = 4;
    int embed_dim = 32;   // D
    int heads = 4;
    int layers = 6;       // L
    int mlp_hidden = 128;
    int feature_dim = 32; // F
    int num_classes = 4;  // C
    // First MHSA layer entering the attention aggregation, 1-based.
    // 0 selects the default L/2 + 1.
    int attn_agg_start = 0;
    double ema_lambda = 0.99;
    // The printed aggregation weights the current layer by lambda, which makes
    // the deepest layer dominate at lambda = 0.99. This switch swaps
    // lambda <-> (1 - lambda) for experimentation; default is as printed.
    bool ema_swap = false;

    void validate() const;
    int num_patches() const;  // N
    int tokens() const;       // N + 1
    int grid_side() const;    // sqrt(N)
    int head_dim() const;
    int agg_start() const;    // resolved attn_agg_start
};

// Batch-first bundle of everything one forward pass produces. The assistant
// slots f_hat_a / z_hat_a are filled by the Adm module.
struct ForwardOutputs {
    std::vector<Tensor> layer_feats;   // L x [B, N+1, D] attention features
    std::vector<Tensor> attn_weights;  // L x [B*heads, N+1, N+1]
    Tensor global_attn;                // [B, N+1, D]
    Tensor f_t;                        // [B, F]
    Tensor z_t;                        // [B, C]
    Tensor f_hat_a;                    // [B, F]
    Tensor z_hat_a;                    // [B, C]
};

struct MhsaOut {
    Tensor tokens;        // [B, T, D] layer output (residual + MLP)
    Tensor attn_feat;     // [B, T, D] multi-head SA output, pre-MLP
    Tensor attn_weights;  // [B*heads, T, T], rows sum to 1
};

// EMA aggregation of per-layer attention features into the global attention
// map: acc starts at layer_feats[l_start]; each later layer l contributes
// acc <- lambda * feat_l + (1 - lambda) * acc. Indices are 1-based.
Tensor ema_aggregate(const std::vector<Tensor>& layer_feats, int l_start, double lambda,
                     bool swap = false);

// Patch-token attention encoder: patch embedding, learned positional and CLS
// parameters, L pre-norm MHSA layers, feature head f_t and classifier z_t.
class Backbone {
public:
    explicit Backbone(BackboneConfig cfg);

    const BackboneConfig& config() const { return cfg_; }

    // Parameter shapes in creation order; covers backbone.* and classifier.*.
    std::vector<std::pair<std::string, Shape>> param_plan() const;
    std::int64_t param_count() const;
    void init_params(ModelState& ms, Rng& rng, DType dt) const;

    MhsaOut mhsa_layer(const ModelState& ms, int layer, const Tensor& tokens) const;

    // images: [B, 1, H, W]. Fills everything except the assistant slots.
    ForwardOutputs forward(const ModelState& ms, const Tensor& images) const;

private:
    BackboneConfig cfg_;
    std::string layer_prefix(int layer) const;
};

}  // namespace cadtrans
