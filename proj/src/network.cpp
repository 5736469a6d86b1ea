#include "cadtrans/network.hpp"

namespace cadtrans {

Network::Network(BackboneConfig backbone_cfg, AdmConfig adm_cfg)
    : backbone_(backbone_cfg), adm_(adm_cfg) {
    const auto& bc = backbone_.config();
    const auto& ac = adm_.config();
    if (ac.in_channels != bc.embed_dim || ac.map_side != bc.grid_side())
        throw ConfigError("adm plan does not match the backbone attention map (" +
                          std::to_string(bc.embed_dim) + " x " +
                          std::to_string(bc.grid_side()) + "^2)");
    if (ac.feature_dim != bc.feature_dim || ac.num_classes != bc.num_classes)
        throw ConfigError("adm head does not match the backbone feature/class widths");
}

Network Network::make_toy(const BackboneConfig& cfg) {
    cfg.validate();
    return Network(cfg, AdmConfig::toy(cfg.embed_dim, cfg.grid_side(), cfg.feature_dim,
                                       cfg.num_classes));
}

ModelState Network::init_state(std::uint64_t seed, DType dt) const {
    ModelState ms;
    Rng rng(seed);
    backbone_.init_params(ms, rng, dt);
    adm_.init_params(ms, rng, dt);
    return ms;
}

ForwardOutputs Network::forward(ModelState& ms, const Tensor& images, RunMode mode) const {
    ForwardOutputs out = backbone_.forward(ms, images);
    Tensor attn_in = mode == RunMode::TrainSource ? out.global_attn.detach()
                                                  : out.global_attn;
    auto map = reshape_attention(attn_in);
    auto adm_out = adm_.forward(ms, map, mode == RunMode::TrainSource);
    out.f_hat_a = adm_out.f_hat_a;
    out.z_hat_a = adm_out.z_hat_a;
    return out;
}

}  // namespace cadtrans
