#pragma once

#include "cadtrans/adm.hpp"
#include "cadtrans/backbone.hpp"
#include "cadtrans/model.hpp"

namespace cadtrans {

// How a forward pass is used. Source-stage training detaches the assistant
// input so distillation gradients never reach the main branch; target-stage
// training keeps the assistant path attached but runs its batch norm on the
// frozen running statistics.
enum class RunMode { TrainSource, TrainTarget, Eval };

// Backbone + assistant domain module as one unit.
class Network {
public:
    Network(BackboneConfig backbone_cfg, AdmConfig adm_cfg);

    // Derives the assistant plan from the backbone geometry.
    static Network make_toy(const BackboneConfig& cfg);

    const Backbone& backbone() const { return backbone_; }
    const Adm& adm() const { return adm_; }

    ModelState init_state(std::uint64_t seed, DType dt) const;

    ForwardOutputs forward(ModelState& ms, const Tensor& images, RunMode mode) const;

private:
    Backbone backbone_;
    Adm adm_;
};

}  // namespace cadtrans
