#include "cadtrans/adm.hpp"

#include <cmath>

#include "cadtrans/ops.hpp"

namespace cadtrans {

namespace op = ops;

AdmConfig AdmConfig::toy(int attn_dim, int map_side, int feature_dim, int num_classes) {
    AdmConfig c;
    c.in_channels = attn_dim;
    c.map_side = map_side;
    c.channels = {12, 12, 12};
    c.kernels = {3, 3, 3};
    c.strides = {1, 1, 2};
    c.pads = {1, 1, 1};
    c.feature_dim = feature_dim;
    c.head_hidden = 16;
    c.num_classes = num_classes;
    c.validate();
    return c;
}

AdmConfig AdmConfig::paper_scale(int num_classes) {
    AdmConfig c;
    c.in_channels = 768;
    c.map_side = 14;
    c.channels = {512, 256, 256};
    c.kernels = {3, 3, 3};
    c.strides = {2, 1, 1};
    c.pads = {0, 0, 0};
    c.feature_dim = 256;
    c.head_hidden = 256;
    c.num_classes = num_classes;
    c.validate();
    return c;
}

std::array<int, 4> AdmConfig::spatial_plan() const {
    std::array<int, 4> sides{};
    sides[0] = map_side;
    int s = map_side;
    for (int i = 0; i < 3; ++i) {
        s = static_cast<int>(
            op::conv2d_out_extent(s, kernels[static_cast<std::size_t>(i)],
                                  strides[static_cast<std::size_t>(i)],
                                  pads[static_cast<std::size_t>(i)]));
        sides[static_cast<std::size_t>(i + 1)] = s;
    }
    return sides;
}

void AdmConfig::validate() const {
    if (in_channels < 1 || map_side < 1)
        throw ConfigError("adm: invalid input plan");
    const auto sides = spatial_plan();
    if (sides[3] < 1)
        throw ConfigError("adm: conv plan collapses below 1x1 on a " +
                          std::to_string(map_side) + "x" + std::to_string(map_side) +
                          " map");
    if (feature_dim < 1 || head_hidden < 1 || num_classes < 2)
        throw ConfigError("adm: invalid head plan");
}

Tensor reshape_attention(const Tensor& global_attn) {
    if (global_attn.rank() != 3)
        throw ShapeError("reshape_attention: need [B, N+1, D], got " +
                         shape_str(global_attn.shape()));
    const std::int64_t B = global_attn.dim(0);
    const std::int64_t N = global_attn.dim(1) - 1;
    const std::int64_t D = global_attn.dim(2);
    const auto side = static_cast<std::int64_t>(std::llround(std::sqrt(static_cast<double>(N))));
    if (side * side != N)
        throw ConfigError("reshape_attention: N = " + std::to_string(N) +
                          " is not a perfect square");
    auto body = op::slice(global_attn, 1, 1, N);        // drop CLS
    auto chan = op::permute(body, {0, 2, 1});           // [B, D, N]
    return op::reshape(chan, {B, D, side, side});
}

Adm::Adm(AdmConfig cfg) : cfg_(cfg) { cfg_.validate(); }

std::vector<std::pair<std::string, Shape>> Adm::param_plan() const {
    std::vector<std::pair<std::string, Shape>> plan;
    std::int64_t ci = cfg_.in_channels;
    for (int i = 0; i < 3; ++i) {
        const std::int64_t co = cfg_.channels[static_cast<std::size_t>(i)];
        const std::int64_t k = cfg_.kernels[static_cast<std::size_t>(i)];
        const std::string n = std::to_string(i + 1);
        plan.emplace_back("adm.conv" + n + ".w", Shape{co, ci, k, k});
        plan.emplace_back("adm.conv" + n + ".b", Shape{co});
        plan.emplace_back("adm.bn" + n + ".g", Shape{co});
        plan.emplace_back("adm.bn" + n + ".b", Shape{co});
        ci = co;
    }
    if (cfg_.needs_projection()) {
        plan.emplace_back("adm.proj.w", Shape{cfg_.channels[2], cfg_.feature_dim});
        plan.emplace_back("adm.proj.b", Shape{cfg_.feature_dim});
    }
    plan.emplace_back("adm.head.w1", Shape{cfg_.feature_dim, cfg_.head_hidden});
    plan.emplace_back("adm.head.b1", Shape{cfg_.head_hidden});
    plan.emplace_back("adm.head.w2", Shape{cfg_.head_hidden, cfg_.num_classes});
    plan.emplace_back("adm.head.b2", Shape{cfg_.num_classes});
    return plan;
}

std::int64_t Adm::param_count() const {
    std::int64_t n = 0;
    for (const auto& [name, shape] : param_plan()) n += shape_numel(shape);
    return n;
}

void Adm::init_params(ModelState& ms, Rng& rng, DType dt) const {
    for (const auto& [name, shape] : param_plan()) {
        Tensor t = Tensor::zeros(shape, dt);
        if (shape.size() == 4) {
            const double rf = static_cast<double>(shape[2] * shape[3]);
            const double limit =
                std::sqrt(6.0 / (static_cast<double>(shape[1]) * rf +
                                 static_cast<double>(shape[0]) * rf));
            for (std::int64_t i = 0; i < t.numel(); ++i) t.set(i, rng.uniform(-limit, limit));
        } else if (shape.size() == 2) {
            const double limit =
                std::sqrt(6.0 / static_cast<double>(shape[0] + shape[1]));
            for (std::int64_t i = 0; i < t.numel(); ++i) t.set(i, rng.uniform(-limit, limit));
        } else if (name.find(".bn") != std::string::npos && name.back() == 'g') {
            for (std::int64_t i = 0; i < t.numel(); ++i) t.set(i, 1.0);
        }
        ms.add_param(name, t);
    }
    for (int i = 1; i <= 3; ++i) {
        const std::int64_t co = cfg_.channels[static_cast<std::size_t>(i - 1)];
        ms.add_buffer("adm.bn" + std::to_string(i) + ".rm", Tensor::zeros({co}, dt));
        ms.add_buffer("adm.bn" + std::to_string(i) + ".rv", Tensor::full({co}, 1.0, dt));
    }
}

namespace {

Tensor conv_bn(ModelState& ms, const Tensor& x, const AdmConfig& cfg, int block,
               bool training, bool mutate_buffers) {
    const std::string n = std::to_string(block + 1);
    auto y = ops::conv2d(x, ms.param("adm.conv" + n + ".w"), ms.param("adm.conv" + n + ".b"),
                         cfg.strides[static_cast<std::size_t>(block)],
                         cfg.pads[static_cast<std::size_t>(block)]);
    auto r = ops::batch_norm2d(y, ms.param("adm.bn" + n + ".g"), ms.param("adm.bn" + n + ".b"),
                               ms.buffer("adm.bn" + n + ".rm"),
                               ms.buffer("adm.bn" + n + ".rv"), training);
    if (training && mutate_buffers) {
        ms.set_buffer("adm.bn" + n + ".rm", r.new_running_mean);
        ms.set_buffer("adm.bn" + n + ".rv", r.new_running_var);
    }
    return r.y;
}

AdmOutputs adm_forward_impl(ModelState& ms, const Tensor& map, const AdmConfig& cfg,
                            bool training) {
    if (map.rank() != 4 || map.dim(1) != cfg.in_channels || map.dim(2) != cfg.map_side ||
        map.dim(3) != cfg.map_side)
        throw ShapeError("adm: expected map [B, " + std::to_string(cfg.in_channels) +
                         ", " + std::to_string(cfg.map_side) + ", " +
                         std::to_string(cfg.map_side) + "], got " + shape_str(map.shape()));
    auto e1 = ops::relu(conv_bn(ms, map, cfg, 0, training, true));
    auto e2 = ops::relu(conv_bn(ms, e1, cfg, 1, training, true));
    auto e3 = conv_bn(ms, e2, cfg, 2, training, true);  // block 3: pool, no relu
    auto pooled = ops::global_avg_pool(e3);             // [B, c3]

    AdmOutputs out;
    out.f_hat_a = cfg.needs_projection()
                      ? ops::add_bias(ops::matmul(pooled, ms.param("adm.proj.w")),
                                      ms.param("adm.proj.b"))
                      : pooled;
    auto hid = ops::relu(ops::add_bias(ops::matmul(out.f_hat_a, ms.param("adm.head.w1")),
                                       ms.param("adm.head.b1")));
    out.z_hat_a =
        ops::add_bias(ops::matmul(hid, ms.param("adm.head.w2")), ms.param("adm.head.b2"));
    return out;
}

}  // namespace

AdmOutputs Adm::forward(ModelState& ms, const Tensor& map, bool training) const {
    return adm_forward_impl(ms, map, cfg_, training);
}

AdmOutputs Adm::forward_eval(const ModelState& ms, const Tensor& map) const {
    return adm_forward_impl(const_cast<ModelState&>(ms), map, cfg_, false);
}

Tensor distill_loss(const Tensor& f_hat_a, const Tensor& f_s, const Tensor& z_hat_a,
                    const Tensor& z_s, bool squared_feature_term) {
    check_same_shape(f_hat_a, f_s, "distill_loss");
    check_same_shape(z_hat_a, z_s, "distill_loss");
    if (f_hat_a.dim(0) != z_hat_a.dim(0))
        throw ShapeError("distill_loss: feature batch " + shape_str(f_hat_a.shape()) +
                         " does not align with logits batch " + shape_str(z_hat_a.shape()));
    auto f_teacher = f_s.detach();
    auto z_teacher = z_s.detach();

    auto diff = op::sub(f_hat_a, f_teacher);
    Tensor feat_term;
    if (squared_feature_term) {
        feat_term = op::sum_axis(op::mul(diff, diff), 1);  // [B]
    } else {
        feat_term = op::l2norm_rows(diff);  // [B]
    }

    auto p_student = op::softmax(z_hat_a, 1);
    auto ls_student = op::log_softmax(z_hat_a, 1);
    auto ls_teacher = op::log_softmax(z_teacher, 1);
    auto kl_rows = op::sum_axis(op::mul(p_student, op::sub(ls_student, ls_teacher)), 1);

    return op::mean_all(op::add(feat_term, kl_rows));
}

}  // namespace cadtrans
