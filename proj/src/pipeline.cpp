#include "cadtrans/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

#include "cadtrans/adm.hpp"
#include "cadtrans/gradcheck.hpp"
#include "cadtrans/ops.hpp"
#include "cadtrans/rng.hpp"
#include "cadtrans/tape.hpp"

namespace cadtrans {

namespace op = ops;

void AdaptConfig::validate() const {
    if (lr < 0 || momentum < 0 || weight_decay < 0)
        throw ConfigError("rates must be >= 0");
    if (batch_size < 2) throw ConfigError("batch_size must be >= 2 (batch norm)");
    if (epochs_source < 0 || epochs_target < 0) throw ConfigError("epochs must be >= 0");
    if (alpha < 0 || beta < 0) throw ConfigError("alpha and beta must be >= 0");
    if (lambda_c < 0 || lambda_c > 1) throw ConfigError("lambda_c must lie in [0, 1]");
    if (knn_k < 1) throw ConfigError("knn_k must be >= 1");
    if (refine_rounds < 0) throw ConfigError("refine_rounds must be >= 0");
    kernel.validate();
}

Pipeline::Pipeline(Network net, AdaptConfig cfg) : net_(std::move(net)), cfg_(cfg) {
    cfg_.validate();
}

namespace {

std::vector<std::vector<std::int64_t>> make_batches(std::int64_t n, int batch_size,
                                                    Rng& rng) {
    std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    rng.shuffle(idx);
    std::vector<std::vector<std::int64_t>> batches;
    for (std::int64_t start = 0; start < n; start += batch_size) {
        const std::int64_t len = std::min<std::int64_t>(batch_size, n - start);
        if (len < 2) break;  // batch norm needs at least two samples
        batches.emplace_back(idx.begin() + start, idx.begin() + start + len);
    }
    return batches;
}

double decayed_lr(const AdaptConfig& cfg, std::int64_t step, std::int64_t total) {
    if (!cfg.lr_decay || total <= 0) return cfg.lr;
    const double p = static_cast<double>(step) / static_cast<double>(total);
    return cfg.lr * std::pow(1.0 + 10.0 * p, -0.75);
}

double label_accuracy(const std::vector<std::int64_t>& got,
                      const std::vector<std::int64_t>& truth) {
    if (got.empty()) return 0.0;
    std::int64_t hit = 0;
    for (std::size_t i = 0; i < got.size(); ++i)
        if (got[i] == truth[i]) ++hit;
    return static_cast<double>(hit) / static_cast<double>(got.size());
}

}  // namespace

Pipeline::SourceResult Pipeline::train_source(const Dataset& source,
                                              std::ostream* progress) {
    if (!source.images.defined() || source.images.dim(0) == 0)
        throw InputError("train_source: empty source dataset");
    if (source.labels.size() != static_cast<std::size_t>(source.images.dim(0)))
        throw InputError("train_source: source set is missing labels");

    SourceResult result;
    result.state = net_.init_state(cfg_.seed, cfg_.precision);
    ModelState& state = result.state;
    Tensor images = source.images.dtype() == cfg_.precision
                        ? source.images
                        : source.images.astype(cfg_.precision);
    const std::int64_t n = images.dim(0);

    Rng shuffle_rng(Rng::mix(cfg_.seed, 0x737263ULL));
    const std::int64_t total_steps =
        static_cast<std::int64_t>(cfg_.epochs_source) * std::max<std::int64_t>(n / cfg_.batch_size, 1);
    std::int64_t step = 0;
    Tape tape;
    for (int epoch = 1; epoch <= cfg_.epochs_source; ++epoch) {
        double loss_sum = 0.0;
        const auto batches = make_batches(n, cfg_.batch_size, shuffle_rng);
        for (const auto& batch : batches) {
            auto x = op::take_rows(images, batch);
            std::vector<std::int64_t> y(batch.size());
            for (std::size_t i = 0; i < batch.size(); ++i)
                y[i] = source.labels[static_cast<std::size_t>(batch[i])];
            double loss_value = 0.0;
            {
                TapeScope scope(tape);
                auto out = net_.forward(state, x, RunMode::TrainSource);
                auto ce = ce_loss(out.z_t, y);
                auto kd = distill_loss(out.f_hat_a, out.f_t, out.z_hat_a, out.z_t,
                                       cfg_.kd_squared);
                auto loss = op::add(ce, kd);
                loss_value = loss.at(0);
                tape.backward(loss);
            }
            tape.clear();
            sgd_step(state, decayed_lr(cfg_, step, total_steps), cfg_.momentum,
                     cfg_.weight_decay);
            loss_sum += loss_value;
            ++step;
        }
        result.epoch_loss.push_back(loss_sum / static_cast<double>(batches.size()));
        if (progress)
            (*progress) << "[source] epoch " << epoch << "/" << cfg_.epochs_source
                        << " loss " << result.epoch_loss.back() << "\n";
    }
    return result;
}

TargetSnapshot Pipeline::snapshot_features(ModelState& state, const Tensor& images) {
    const std::int64_t n = images.dim(0);
    Tensor imgs = images.dtype() == state.dtype() ? images : images.astype(state.dtype());
    std::vector<Tensor> f_t, z_t, f_hat, z_hat;
    for (std::int64_t start = 0; start < n; start += cfg_.batch_size) {
        const std::int64_t len = std::min<std::int64_t>(cfg_.batch_size, n - start);
        std::vector<std::int64_t> rows(static_cast<std::size_t>(len));
        std::iota(rows.begin(), rows.end(), start);
        auto out = net_.forward(state, op::take_rows(imgs, rows), RunMode::Eval);
        f_t.push_back(out.f_t);
        z_t.push_back(out.z_t);
        f_hat.push_back(out.f_hat_a);
        z_hat.push_back(out.z_hat_a);
    }
    TargetSnapshot snap;
    snap.f_t = op::concat(f_t, 0);
    snap.z_t = op::concat(z_t, 0);
    snap.f_hat = op::concat(f_hat, 0);
    snap.z_hat = op::concat(z_hat, 0);
    return snap;
}

LabelState Pipeline::build_labels(const TargetSnapshot& snap, int epoch) const {
    CentroidEvalConfig ccfg;
    ccfg.momentum = cfg_.lambda_c;
    ccfg.refine_rounds = cfg_.refine_rounds;
    ccfg.euclidean = cfg_.assign_euclidean;

    LabelState ls;
    ls.classifier_labels =
        evaluate_pseudo_labels(snap.f_t, snap.z_t, ccfg, "classifier");
    ls.assistant_labels =
        evaluate_pseudo_labels(snap.f_hat, snap.z_hat, ccfg, "assistant");
    ls.bank = partition(ls.classifier_labels, ls.assistant_labels, snap.f_t, epoch);
    if (ls.bank.degraded) {
        // fall back to classifier-space labels for this epoch
        ls.degraded = true;
        ls.final = ls.classifier_labels.labels;
        return ls;
    }
    if (ls.bank.hard_count() == 0) {
        ls.final = final_labels(ls.bank, {});
        return ls;
    }
    auto rm = rating_matrix(ls.bank);
    auto reassessed = reassess_hard(rm.scores, ls.bank.easy_labels, cfg_.knn_k);
    ls.final = final_labels(ls.bank, reassessed);
    return ls;
}

AdaptResult Pipeline::adapt_target(ModelState& state, const Tensor& target_images,
                                   const std::vector<std::int64_t>* truth,
                                   std::ostream* metrics_csv, std::ostream* progress) {
    if (!target_images.defined() || target_images.dim(0) == 0)
        throw InputError("adapt_target: empty target dataset");

    state.freeze_prefix("classifier.");
    state.freeze_prefix("adm.");

    Tensor images = target_images.dtype() == state.dtype()
                        ? target_images
                        : target_images.astype(state.dtype());
    const std::int64_t n = images.dim(0);

    AdaptResult result;
    if (metrics_csv) write_metrics_header(*metrics_csv);

    Rng shuffle_rng(Rng::mix(cfg_.seed, 0x7467ULL));
    const std::int64_t total_steps =
        static_cast<std::int64_t>(cfg_.epochs_target) * std::max<std::int64_t>(n / cfg_.batch_size, 1);
    std::int64_t step = 0;
    Tape tape;
    for (int epoch = 1; epoch <= cfg_.epochs_target; ++epoch) {
        // Step 1: rebuild the memory bank from full-set eval-mode features
        auto snap = snapshot_features(state, images);
        auto labels = build_labels(snap, epoch);
        if (labels.degraded) ++result.degraded_epochs;

        std::vector<bool> is_easy(static_cast<std::size_t>(n), false);
        for (auto i : labels.bank.easy_indices) is_easy[static_cast<std::size_t>(i)] = true;

        double im_sum = 0, cst_sum = 0, cmk_sum = 0, total_sum = 0;
        const auto batches = make_batches(n, cfg_.batch_size, shuffle_rng);
        for (const auto& batch : batches) {
            auto x = op::take_rows(images, batch);
            std::vector<std::int64_t> y(batch.size());
            for (std::size_t i = 0; i < batch.size(); ++i)
                y[i] = labels.final[static_cast<std::size_t>(batch[i])];

            double im_v = 0, cst_v = 0, cmk_v = 0, total_v = 0;
            {
                TapeScope scope(tape);
                auto out = net_.forward(state, x, RunMode::TrainTarget);
                auto total = im_loss(out.z_t);
                im_v = total.at(0);
                if (cfg_.alpha > 0) {
                    auto cst = cst_loss(out.z_t, out.z_hat_a, y);
                    cst_v = cst.at(0);
                    total = op::add(total, op::mul_scalar(cst, cfg_.alpha));
                }
                if (cfg_.beta > 0 && !labels.degraded) {
                    std::vector<std::int64_t> easy_pos, hard_pos;
                    std::vector<std::int64_t> easy_y, hard_y;
                    for (std::size_t i = 0; i < batch.size(); ++i) {
                        if (is_easy[static_cast<std::size_t>(batch[i])]) {
                            easy_pos.push_back(static_cast<std::int64_t>(i));
                            easy_y.push_back(y[i]);
                        } else {
                            hard_pos.push_back(static_cast<std::int64_t>(i));
                            hard_y.push_back(y[i]);
                        }
                    }
                    if (!easy_pos.empty() && !hard_pos.empty()) {
                        auto easy_f = op::take_rows(out.f_t, easy_pos);
                        auto hard_f = op::take_rows(out.f_t, hard_pos);
                        auto cmk = cmk_mmd(easy_f, easy_y, hard_f, hard_y, cfg_.kernel);
                        if (!cmk.skipped) {
                            cmk_v = cmk.value.at(0);
                            total = op::add(total, op::mul_scalar(cmk.value, cfg_.beta));
                        }
                    }
                }
                total_v = total.at(0);
                tape.backward(total);
            }
            tape.clear();
            sgd_step(state, decayed_lr(cfg_, step, total_steps), cfg_.momentum,
                     cfg_.weight_decay);
            im_sum += im_v;
            cst_sum += cst_v;
            cmk_sum += cmk_v;
            total_sum += total_v;
            ++step;
        }

        MetricsRow row;
        row.epoch = epoch;
        const auto nb = static_cast<double>(batches.size());
        row.l_im = im_sum / nb;
        row.l_cst = cst_sum / nb;
        row.l_cmk = cmk_sum / nb;
        row.l_total = total_sum / nb;
        row.easy_count = labels.bank.easy_count();
        row.hard_count = labels.bank.hard_count();
        if (truth) {
            std::vector<std::int64_t> easy_truth, easy_got;
            for (std::size_t j = 0; j < labels.bank.easy_indices.size(); ++j) {
                easy_truth.push_back(
                    (*truth)[static_cast<std::size_t>(labels.bank.easy_indices[j])]);
                easy_got.push_back(labels.bank.easy_labels[j]);
            }
            row.pl_acc_easy = label_accuracy(easy_got, easy_truth);
            row.pl_acc_all = label_accuracy(labels.classifier_labels.labels, *truth);
            row.target_acc = evaluate(state, images, *truth).accuracy;
        }
        result.metrics.push_back(row);
        if (metrics_csv) append_metrics_row(*metrics_csv, row);
        if (progress)
            (*progress) << "[adapt] epoch " << epoch << "/" << cfg_.epochs_target
                        << " easy " << row.easy_count << " hard " << row.hard_count
                        << " L_total " << row.l_total << "\n";
    }
    return result;
}

EvalReport Pipeline::evaluate(ModelState& state, const Tensor& images,
                              const std::vector<std::int64_t>& labels) {
    auto snap = snapshot_features(state, images);
    const std::int64_t n = snap.z_t.dim(0);
    const std::int64_t C = snap.z_t.dim(1);

    EvalReport rep;
    rep.predictions = op::argmax_rows(snap.z_t);
    if (!labels.empty() && static_cast<std::int64_t>(labels.size()) != n)
        throw InputError("evaluate: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(n) + " samples");

    auto probs = op::softmax(snap.z_t, 1);
    double ent = 0.0;
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t c = 0; c < C; ++c) {
            const double p = probs.at(i * C + c);
            ent -= p * std::log(std::max(p, 1e-12));
        }
    rep.mean_entropy = ent / static_cast<double>(n);

    if (!labels.empty()) {
        rep.accuracy = label_accuracy(rep.predictions, labels);
        std::vector<std::int64_t> per_hit(static_cast<std::size_t>(C), 0);
        std::vector<std::int64_t> per_total(static_cast<std::size_t>(C), 0);
        for (std::int64_t i = 0; i < n; ++i) {
            const auto y = labels[static_cast<std::size_t>(i)];
            if (y < 0 || y >= C)
                throw InputError("evaluate: label " + std::to_string(y) + " out of range");
            per_total[static_cast<std::size_t>(y)]++;
            if (rep.predictions[static_cast<std::size_t>(i)] == y)
                per_hit[static_cast<std::size_t>(y)]++;
        }
        rep.per_class.resize(static_cast<std::size_t>(C), 0.0);
        for (std::int64_t c = 0; c < C; ++c)
            rep.per_class[static_cast<std::size_t>(c)] =
                per_total[static_cast<std::size_t>(c)] > 0
                    ? static_cast<double>(per_hit[static_cast<std::size_t>(c)]) /
                          static_cast<double>(per_total[static_cast<std::size_t>(c)])
                    : 0.0;
        rep.mean_ce = ce_loss(snap.z_t, labels).at(0);
    }
    return rep;
}

std::vector<GradSuiteLine> run_gradient_suite(const BackboneConfig& cfg,
                                              std::uint64_t seed, int samples_per_loss) {
    Network net = Network::make_toy(cfg);
    ModelState state = net.init_state(seed, DType::F64);

    DomainSpec dspec;
    dspec.num_classes = cfg.num_classes;
    dspec.per_class = 2;
    dspec.image_side = cfg.image_side;
    dspec.seed = seed;
    auto data = generate(dspec);

    const std::int64_t B = std::min<std::int64_t>(8, data.target.images.dim(0));
    std::vector<std::int64_t> rows(static_cast<std::size_t>(B));
    std::iota(rows.begin(), rows.end(), 0);
    Tensor images = ops::take_rows(data.target.images, rows).astype(DType::F64);

    std::vector<Tensor> all_params, adm_params;
    for (auto& p : state.params()) {
        all_params.push_back(p.value);
        if (p.name.rfind("adm.", 0) == 0) adm_params.push_back(p.value);
    }

    // fixed batch split with every class shared between the two sides
    const int C = cfg.num_classes;
    std::vector<std::int64_t> y(static_cast<std::size_t>(B));
    for (std::int64_t i = 0; i < B; ++i) y[static_cast<std::size_t>(i)] = i % C;
    std::vector<std::int64_t> easy_pos, hard_pos, easy_y, hard_y;
    for (std::int64_t i = 0; i < B; ++i) {
        if (i < B / 2) {
            easy_pos.push_back(i);
            easy_y.push_back(y[static_cast<std::size_t>(i)]);
        } else {
            hard_pos.push_back(i);
            hard_y.push_back(y[static_cast<std::size_t>(i)]);
        }
    }
    KernelSpec kernel;
    LossWeights weights;

    auto fwd_kd = [&] {
        auto out = net.forward(state, images, RunMode::TrainSource);
        return distill_loss(out.f_hat_a, out.f_t, out.z_hat_a, out.z_t);
    };
    auto fwd_im = [&] {
        auto out = net.forward(state, images, RunMode::TrainTarget);
        return im_loss(out.z_t);
    };
    auto fwd_cst = [&] {
        auto out = net.forward(state, images, RunMode::TrainTarget);
        return cst_loss(out.z_t, out.z_hat_a, y);
    };
    auto fwd_cmk = [&] {
        auto out = net.forward(state, images, RunMode::TrainTarget);
        auto easy_f = ops::take_rows(out.f_t, easy_pos);
        auto hard_f = ops::take_rows(out.f_t, hard_pos);
        return cmk_mmd(easy_f, easy_y, hard_f, hard_y, kernel).value;
    };
    auto fwd_total = [&] {
        auto out = net.forward(state, images, RunMode::TrainTarget);
        auto easy_f = ops::take_rows(out.f_t, easy_pos);
        auto hard_f = ops::take_rows(out.f_t, hard_pos);
        auto cmk = cmk_mmd(easy_f, easy_y, hard_f, hard_y, kernel).value;
        return total_loss(im_loss(out.z_t), cst_loss(out.z_t, out.z_hat_a, y), cmk,
                          weights);
    };

    std::vector<GradSuiteLine> lines;
    Rng rng(Rng::mix(seed, 0x6772ULL));
    auto run_one = [&](const char* name, const std::function<Tensor()>& fwd,
                       const std::vector<Tensor>& leaves) {
        auto rep = check_gradients(fwd, leaves, samples_per_loss, rng);
        lines.push_back(GradSuiteLine{name, rep.max_rel_err, rep.checked});
    };
    // the distillation objective optimizes only the assistant parameters;
    // everything else is behind its stop-gradient
    run_one("L_kd", fwd_kd, adm_params);
    run_one("L_im", fwd_im, all_params);
    run_one("L_cst", fwd_cst, all_params);
    run_one("L_cmk", fwd_cmk, all_params);
    run_one("L_total", fwd_total, all_params);
    return lines;
}

}  // namespace cadtrans
