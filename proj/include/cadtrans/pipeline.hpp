#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "cadtrans/consistency.hpp"
#include "cadtrans/container.hpp"
#include "cadtrans/losses.hpp"
#include "cadtrans/network.hpp"
#include "cadtrans/pseudolabel.hpp"
#include "cadtrans/synthdata.hpp"

namespace cadtrans {

struct AdaptConfig {
    double lr = 1e-2;
    double momentum = 0.9;
    double weight_decay = 1e-3;
    int batch_size = 32;  // toy override of the reference 64
    int epochs_source = 30;
    int epochs_target = 20;
    double alpha = 0.3;
    double beta = 0.1;
    double lambda_c = 0.9;  // centroid EMA coefficient
    int knn_k = 5;
    int refine_rounds = 2;
    std::uint64_t seed = 0;
    DType precision = DType::F32;
    bool lr_decay = false;  // (1 + 10 p)^-0.75 schedule; off for reproducibility
    bool assign_euclidean = false;
    bool kd_squared = false;
    KernelSpec kernel;

    void validate() const;
};

struct EvalReport {
    double accuracy = 0.0;
    std::vector<double> per_class;
    double mean_ce = 0.0;
    double mean_entropy = 0.0;
    std::vector<std::int64_t> predictions;
};

// Full-dataset eval-mode features, ordered by sample index.
struct TargetSnapshot {
    Tensor f_t;     // [n, F]
    Tensor z_t;     // [n, C]
    Tensor f_hat;   // [n, F]
    Tensor z_hat;   // [n, C]
};

// Dual-space pseudo-labels, the epoch bank, and the assembled final labels.
struct LabelState {
    PseudoLabels classifier_labels;
    PseudoLabels assistant_labels;
    MemoryBank bank;
    std::vector<std::int64_t> final;  // y-tilde over all samples
    bool degraded = false;
};

struct AdaptResult {
    std::vector<MetricsRow> metrics;
    int degraded_epochs = 0;
};

// Two-stage procedure: supervised source training with assistant
// self-distillation, then source-free target adaptation with the classifier
// and assistant module frozen.
class Pipeline {
public:
    Pipeline(Network net, AdaptConfig cfg);

    const Network& network() const { return net_; }
    const AdaptConfig& config() const { return cfg_; }

    struct SourceResult {
        ModelState state;
        std::vector<double> epoch_loss;  // mean training loss per epoch
    };
    SourceResult train_source(const Dataset& source, std::ostream* progress = nullptr);

    // `truth` is used only for metrics reporting; pass nullptr to adapt fully
    // blind. Metric fields without ground truth hold -1.
    AdaptResult adapt_target(ModelState& state, const Tensor& target_images,
                             const std::vector<std::int64_t>* truth,
                             std::ostream* metrics_csv = nullptr,
                             std::ostream* progress = nullptr);

    EvalReport evaluate(ModelState& state, const Tensor& images,
                        const std::vector<std::int64_t>& labels);

    TargetSnapshot snapshot_features(ModelState& state, const Tensor& images);
    LabelState build_labels(const TargetSnapshot& snap, int epoch) const;

private:
    Network net_;
    AdaptConfig cfg_;
};

// Gradient suite shared by the gradcheck command and the acceptance tests:
// reverse-mode gradients of each loss against central finite differences on a
// 64-bit toy model.
struct GradSuiteLine {
    std::string loss_name;
    double max_rel_err;
    int checked;
};
std::vector<GradSuiteLine> run_gradient_suite(const BackboneConfig& cfg,
                                              std::uint64_t seed, int samples_per_loss);

}  // namespace cadtrans
