#include "cadtrans/backbone.hpp"

#include <cmath>

#include "cadtrans/ops.hpp"

namespace cadtrans {

namespace op = ops;

void BackboneConfig::validate() const {
    if (image_side <= 0 || patch_side <= 0 || image_side % patch_side != 0)
        throw ConfigError("image_side " + std::to_string(image_side) +
                          " must be divisible by patch_side " + std::to_string(patch_side));
    if (embed_dim <= 0 || heads <= 0 || embed_dim % heads != 0)
        throw ConfigError("embed_dim " + std::to_string(embed_dim) +
                          " must be divisible by heads " + std::to_string(heads));
    if (layers < 1) throw ConfigError("layers must be >= 1");
    const int ls = agg_start();
    if (ls < 1 || ls > layers)
        throw ConfigError("attn_agg_start " + std::to_string(ls) +
                          " outside [1, " + std::to_string(layers) + "]");
    if (feature_dim < 1 || num_classes < 2)
        throw ConfigError("feature_dim must be >= 1 and num_classes >= 2");
    if (mlp_hidden < 1) throw ConfigError("mlp_hidden must be >= 1");
    if (ema_lambda < 0.0 || ema_lambda > 1.0)
        throw ConfigError("ema_lambda must lie in [0, 1]");
}

int BackboneConfig::num_patches() const {
    const int g = image_side / patch_side;
    return g * g;
}

int BackboneConfig::tokens() const { return num_patches() + 1; }

int BackboneConfig::grid_side() const { return image_side / patch_side; }

int BackboneConfig::head_dim() const { return embed_dim / heads; }

int BackboneConfig::agg_start() const {
    return attn_agg_start > 0 ? attn_agg_start : layers / 2 + 1;
}

Tensor ema_aggregate(const std::vector<Tensor>& layer_feats, int l_start, double lambda,
                     bool swap) {
    const int L = static_cast<int>(layer_feats.size());
    if (l_start < 1 || l_start > L)
        throw ConfigError("ema_aggregate: empty aggregation window, l_start=" +
                          std::to_string(l_start) + " with " + std::to_string(L) +
                          " layers");
    const double w_cur = swap ? 1.0 - lambda : lambda;
    Tensor acc = layer_feats[static_cast<std::size_t>(l_start - 1)];
    for (int l = l_start + 1; l <= L; ++l) {
        const Tensor& cur = layer_feats[static_cast<std::size_t>(l - 1)];
        acc = op::add(op::mul_scalar(cur, w_cur), op::mul_scalar(acc, 1.0 - w_cur));
    }
    return acc;
}

Backbone::Backbone(BackboneConfig cfg) : cfg_(cfg) { cfg_.validate(); }

std::string Backbone::layer_prefix(int layer) const {
    return "backbone.layer" + std::to_string(layer) + ".";
}

std::vector<std::pair<std::string, Shape>> Backbone::param_plan() const {
    const std::int64_t D = cfg_.embed_dim;
    const std::int64_t T = cfg_.tokens();
    const std::int64_t H = cfg_.mlp_hidden;
    const std::int64_t F = cfg_.feature_dim;
    const std::int64_t C = cfg_.num_classes;
    const std::int64_t ps = cfg_.patch_side;

    std::vector<std::pair<std::string, Shape>> plan;
    plan.emplace_back("backbone.patch_embed.w", Shape{D, 1, ps, ps});
    plan.emplace_back("backbone.patch_embed.b", Shape{D});
    plan.emplace_back("backbone.pos_embed", Shape{T, D});
    plan.emplace_back("backbone.cls_token", Shape{D});
    for (int l = 0; l < cfg_.layers; ++l) {
        const std::string p = layer_prefix(l);
        plan.emplace_back(p + "ln1.g", Shape{D});
        plan.emplace_back(p + "ln1.b", Shape{D});
        for (const char* w : {"wq", "wk", "wv", "wo"})
            plan.emplace_back(p + "attn." + w, Shape{D, D});
        for (const char* b : {"bq", "bk", "bv", "bo"})
            plan.emplace_back(p + "attn." + b, Shape{D});
        plan.emplace_back(p + "ln2.g", Shape{D});
        plan.emplace_back(p + "ln2.b", Shape{D});
        plan.emplace_back(p + "mlp.w1", Shape{D, H});
        plan.emplace_back(p + "mlp.b1", Shape{H});
        plan.emplace_back(p + "mlp.w2", Shape{H, D});
        plan.emplace_back(p + "mlp.b2", Shape{D});
    }
    plan.emplace_back("backbone.final_ln.g", Shape{D});
    plan.emplace_back("backbone.final_ln.b", Shape{D});
    plan.emplace_back("backbone.feat_head.w", Shape{D, F});
    plan.emplace_back("backbone.feat_head.b", Shape{F});
    plan.emplace_back("classifier.w", Shape{F, C});
    plan.emplace_back("classifier.b", Shape{C});
    return plan;
}

std::int64_t Backbone::param_count() const {
    std::int64_t n = 0;
    for (const auto& [name, shape] : param_plan()) n += shape_numel(shape);
    return n;
}

namespace {

Tensor init_tensor(const std::string& name, const Shape& shape, Rng& rng, DType dt) {
    Tensor t = Tensor::zeros(shape, dt);
    const bool is_matrix_weight = shape.size() == 2 && name.find("pos_embed") == std::string::npos;
    const bool is_conv_weight = shape.size() == 4;
    if (is_matrix_weight || is_conv_weight) {
        double fan_in, fan_out;
        if (is_conv_weight) {
            const double rf = static_cast<double>(shape[2] * shape[3]);
            fan_in = static_cast<double>(shape[1]) * rf;
            fan_out = static_cast<double>(shape[0]) * rf;
        } else {
            fan_in = static_cast<double>(shape[0]);
            fan_out = static_cast<double>(shape[1]);
        }
        const double limit = std::sqrt(6.0 / (fan_in + fan_out));
        for (std::int64_t i = 0; i < t.numel(); ++i) t.set(i, rng.uniform(-limit, limit));
    } else if (name.find("pos_embed") != std::string::npos ||
               name.find("cls_token") != std::string::npos) {
        for (std::int64_t i = 0; i < t.numel(); ++i) t.set(i, rng.gaussian() * 0.02);
    } else if (name.find("ln") != std::string::npos && name.back() == 'g') {
        for (std::int64_t i = 0; i < t.numel(); ++i) t.set(i, 1.0);
    }
    // remaining vectors (biases, ln/bn shifts) stay zero
    return t;
}

}  // namespace

void Backbone::init_params(ModelState& ms, Rng& rng, DType dt) const {
    for (const auto& [name, shape] : param_plan())
        ms.add_param(name, init_tensor(name, shape, rng, dt));
}

MhsaOut Backbone::mhsa_layer(const ModelState& ms, int layer, const Tensor& tokens) const {
    const std::string p = layer_prefix(layer);
    const std::int64_t B = tokens.dim(0);
    const std::int64_t T = tokens.dim(1);
    const std::int64_t D = tokens.dim(2);
    if (D != cfg_.embed_dim || T < 1)
        throw ShapeError("mhsa_layer: token shape " + shape_str(tokens.shape()) +
                         " does not match embed_dim " + std::to_string(cfg_.embed_dim));
    const std::int64_t h = cfg_.heads;
    const std::int64_t dh = cfg_.head_dim();

    auto u = op::layer_norm(tokens, ms.param(p + "ln1.g"), ms.param(p + "ln1.b"));
    auto project = [&](const char* w, const char* b) {
        auto t = op::add_bias(op::matmul(u, ms.param(p + "attn." + std::string(w))),
                              ms.param(p + "attn." + std::string(b)));
        // [B, T, D] -> [B*h, T, dh]
        t = op::reshape(t, {B, T, h, dh});
        t = op::permute(t, {0, 2, 1, 3});
        return op::reshape(t, {B * h, T, dh});
    };
    auto q = project("wq", "bq");
    auto k = project("wk", "bk");
    auto v = project("wv", "bv");

    auto scores = op::mul_scalar(op::bmm_nt(q, k), 1.0 / std::sqrt(static_cast<double>(dh)));
    auto weights = op::softmax(scores, 2);
    auto ctx = op::bmm(weights, v);  // [B*h, T, dh]

    // concatenate heads back to [B, T, D], then the output projection
    auto merged = op::reshape(ctx, {B, h, T, dh});
    merged = op::permute(merged, {0, 2, 1, 3});
    merged = op::reshape(merged, {B, T, D});
    auto attn_feat =
        op::add_bias(op::matmul(merged, ms.param(p + "attn.wo")), ms.param(p + "attn.bo"));

    auto y = op::add(tokens, attn_feat);
    auto z = op::layer_norm(y, ms.param(p + "ln2.g"), ms.param(p + "ln2.b"));
    auto hmid = op::relu(
        op::add_bias(op::matmul(z, ms.param(p + "mlp.w1")), ms.param(p + "mlp.b1")));
    auto mlp_out =
        op::add_bias(op::matmul(hmid, ms.param(p + "mlp.w2")), ms.param(p + "mlp.b2"));

    MhsaOut out;
    out.tokens = op::add(y, mlp_out);
    out.attn_feat = attn_feat;
    out.attn_weights = weights;
    return out;
}

ForwardOutputs Backbone::forward(const ModelState& ms, const Tensor& images) const {
    if (images.rank() != 4 || images.dim(1) != 1 || images.dim(2) != cfg_.image_side ||
        images.dim(3) != cfg_.image_side)
        throw ShapeError("backbone: expected images [B, 1, " +
                         std::to_string(cfg_.image_side) + ", " +
                         std::to_string(cfg_.image_side) + "], got " +
                         shape_str(images.shape()));
    const std::int64_t B = images.dim(0);
    const std::int64_t D = cfg_.embed_dim;
    const std::int64_t N = cfg_.num_patches();

    // non-overlapping patch embedding as a strided convolution
    auto grid = op::conv2d(images, ms.param("backbone.patch_embed.w"),
                           ms.param("backbone.patch_embed.b"), cfg_.patch_side, 0);
    auto patches = op::permute(op::reshape(grid, {B, D, N}), {0, 2, 1});  // [B, N, D]

    auto cls = op::tile_leading(op::reshape(ms.param("backbone.cls_token"), {1, D}), B);
    auto tokens = op::concat({cls, patches}, 1);  // [B, T, D]
    tokens = op::add(tokens, op::tile_leading(ms.param("backbone.pos_embed"), B));

    ForwardOutputs out;
    out.layer_feats.reserve(static_cast<std::size_t>(cfg_.layers));
    out.attn_weights.reserve(static_cast<std::size_t>(cfg_.layers));
    for (int l = 0; l < cfg_.layers; ++l) {
        auto r = mhsa_layer(ms, l, tokens);
        tokens = r.tokens;
        out.layer_feats.push_back(r.attn_feat);
        out.attn_weights.push_back(r.attn_weights);
    }

    auto normed = op::layer_norm(tokens, ms.param("backbone.final_ln.g"),
                                 ms.param("backbone.final_ln.b"));
    auto cls_out = op::reshape(op::slice(normed, 1, 0, 1), {B, D});
    out.f_t = op::add_bias(op::matmul(cls_out, ms.param("backbone.feat_head.w")),
                           ms.param("backbone.feat_head.b"));
    out.z_t = op::add_bias(op::matmul(out.f_t, ms.param("classifier.w")),
                           ms.param("classifier.b"));
    out.global_attn =
        ema_aggregate(out.layer_feats, cfg_.agg_start(), cfg_.ema_lambda, cfg_.ema_swap);
    return out;
}

}  // namespace cadtrans
