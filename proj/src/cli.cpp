#include "cadtrans/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>

#include "cadtrans/config.hpp"
#include "cadtrans/dataset_io.hpp"
#include "cadtrans/pipeline.hpp"

namespace cadtrans {

namespace {

constexpr double kGradTolerance = 1e-4;

std::string fmt(double v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

void print_usage(std::ostream& os) {
    os << "usage: cadtrans <command> [--config=FILE] [--key=value ...] [paths]\n\n"
       << "commands:\n"
       << "  gen-data         --out-source=F --out-target=F   generate the synthetic two-domain benchmark\n"
       << "  train-source     --data=F --out=F                stage 1: supervised training with self-distillation\n"
       << "  adapt            --data=F --model=F --out=F [--metrics=F]\n"
       << "                                                   stage 2: source-free target adaptation\n"
       << "  evaluate         --data=F --model=F [--dump=F]   accuracy report for a checkpoint\n"
       << "  export-features  --data=F --model=F --out=F      dump features, pseudo-labels, easy/hard flags\n"
       << "  gradcheck                                        finite-difference audit of every loss (64-bit)\n\n"
       << "config keys (key=value in a --config file or --key=value on the command line):\n";
    for (const auto& k : Config::registry()) {
        os << "  --" << k.key << "=" << k.default_value;
        for (std::size_t pad = k.key.size() + k.default_value.size(); pad < 30; ++pad)
            os << ' ';
        os << k.help << "\n";
    }
}

struct ParsedArgs {
    std::string command;
    std::map<std::string, std::string> paths;  // path-valued options
    Config config;
    bool help = false;
};

const std::map<std::string, std::vector<std::string>>& command_paths() {
    static const std::map<std::string, std::vector<std::string>> m = {
        {"gen-data", {"out-source", "out-target"}},
        {"train-source", {"data", "out"}},
        {"adapt", {"data", "model", "out", "metrics"}},
        {"evaluate", {"data", "model", "dump"}},
        {"export-features", {"data", "model", "out"}},
        {"gradcheck", {}},
    };
    return m;
}

ParsedArgs parse_args(const std::vector<std::string>& args) {
    ParsedArgs p;
    if (args.empty()) throw ConfigError("no command given (try --help)");
    std::size_t i = 0;
    if (args[0] == "--help" || args[0] == "-h") {
        p.help = true;
        return p;
    }
    p.command = args[i++];
    auto it = command_paths().find(p.command);
    if (it == command_paths().end())
        throw ConfigError("unknown command: " + p.command + " (try --help)");
    const auto& path_keys = it->second;

    // collect overrides first so --config is applied before other keys
    std::vector<std::pair<std::string, std::string>> overrides;
    for (; i < args.size(); ++i) {
        const std::string& a = args[i];
        if (a == "--help" || a == "-h") {
            p.help = true;
            return p;
        }
        if (a.rfind("--", 0) != 0)
            throw ConfigError("expected --key=value, got '" + a + "'");
        const auto eq = a.find('=');
        if (eq == std::string::npos)
            throw ConfigError("expected --key=value, got '" + a + "'");
        const std::string key = a.substr(2, eq - 2);
        const std::string value = a.substr(eq + 1);
        if (key == "config") {
            p.config.load_file(value);
        } else if (std::find(path_keys.begin(), path_keys.end(), key) != path_keys.end()) {
            p.paths[key] = value;
        } else {
            overrides.emplace_back(key, value);
        }
    }
    for (const auto& [k, v] : overrides) p.config.set(k, v);
    return p;
}

const std::string& require_path(const ParsedArgs& p, const std::string& key) {
    auto it = p.paths.find(key);
    if (it == p.paths.end())
        throw ConfigError(p.command + ": missing required --" + key + "=PATH");
    return it->second;
}

// checkpoint meta: model keys plus stage/epoch bookkeeping
struct CheckpointMeta {
    Config config;  // model keys applied over defaults
    std::string stage;
    int epoch = 0;
};

CheckpointMeta parse_checkpoint_meta(const std::string& text) {
    CheckpointMeta meta;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        const auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        const std::string key = line.substr(0, eq);
        const std::string value = line.substr(eq + 1);
        if (key == "stage")
            meta.stage = value;
        else if (key == "epoch")
            meta.epoch = std::atoi(value.c_str());
        else
            meta.config.set(key, value);
    }
    return meta;
}

Network network_from(const Config& cfg) {
    return Network(cfg.backbone_config(), cfg.adm_config());
}

int cmd_gen_data(const ParsedArgs& p, std::ostream& out) {
    const auto spec = p.config.domain_spec();
    auto data = generate(spec);
    std::string meta = p.config.model_meta();
    meta += "data_seed=" + std::to_string(spec.seed) + "\n";
    save_source_dataset(require_path(p, "out-source"), data.source, meta + "kind=source\n");
    save_target_dataset(require_path(p, "out-target"), data.target.images, data.sidecar,
                        meta + "kind=target\n");
    out << "wrote " << require_path(p, "out-source") << " (" << data.source.images.dim(0)
        << " samples), " << require_path(p, "out-target") << " ("
        << data.target.images.dim(0) << " samples)\n";
    return 0;
}

int cmd_train_source(const ParsedArgs& p, std::ostream& out, std::ostream& err) {
    auto dataset = load_labeled_dataset(require_path(p, "data"));
    Pipeline pipe(network_from(p.config), p.config.adapt_config());
    auto result = pipe.train_source(dataset, &err);
    std::string meta = p.config.model_meta();
    meta += "stage=source\nepoch=" + std::to_string(p.config.adapt_config().epochs_source) +
            "\n";
    save_checkpoint(result.state, require_path(p, "out"), meta);
    out << "trained source model, final loss " << fmt(result.epoch_loss.back())
        << ", saved " << require_path(p, "out") << "\n";
    return 0;
}

int cmd_adapt(const ParsedArgs& p, std::ostream& out, std::ostream& err) {
    std::string meta_text;
    ModelState state = load_checkpoint(require_path(p, "model"), &meta_text);
    auto meta = parse_checkpoint_meta(meta_text);

    // model geometry (and training precision) come from the checkpoint;
    // training hyperparameters come from the command line
    Config run_cfg = p.config;
    run_cfg.load_text(meta.config.model_meta());

    Pipeline pipe(network_from(run_cfg), run_cfg.adapt_config());

    const std::string& data_path = require_path(p, "data");
    // adaptation path: images only, sidecar omitted
    Tensor images = load_unlabeled_images(data_path);
    // ground truth is read separately and used only for metrics reporting
    std::vector<std::int64_t> truth;
    const bool have_truth = has_truth_labels(data_path);
    if (have_truth) truth = load_truth_labels(data_path);

    std::ostringstream metrics;
    auto result = pipe.adapt_target(state, images, have_truth ? &truth : nullptr,
                                    &metrics, &err);
    if (p.paths.count("metrics")) {
        std::ofstream mf(p.paths.at("metrics"), std::ios::trunc);
        if (!mf) throw InputError("cannot open " + p.paths.at("metrics"));
        mf << metrics.str();
    }
    std::string out_meta = run_cfg.model_meta();
    out_meta += "stage=target\nepoch=" +
                std::to_string(run_cfg.adapt_config().epochs_target) + "\n";
    save_checkpoint(state, require_path(p, "out"), out_meta);
    out << "adapted model saved to " << require_path(p, "out");
    if (!result.metrics.empty() && result.metrics.back().target_acc >= 0)
        out << ", final target accuracy " << fmt(result.metrics.back().target_acc);
    if (result.degraded_epochs > 0)
        out << ", degraded epochs " << result.degraded_epochs;
    out << "\n";
    return 0;
}

int cmd_evaluate(const ParsedArgs& p, std::ostream& out) {
    std::string meta_text;
    ModelState state = load_checkpoint(require_path(p, "model"), &meta_text);
    auto meta = parse_checkpoint_meta(meta_text);
    Config run_cfg = p.config;
    run_cfg.load_text(meta.config.model_meta());
    Pipeline pipe(network_from(run_cfg), run_cfg.adapt_config());

    const std::string& data_path = require_path(p, "data");
    Tensor images = load_unlabeled_images(data_path);
    std::vector<std::int64_t> labels = load_truth_labels(data_path);
    auto rep = pipe.evaluate(state, images, labels);

    out << "accuracy " << fmt(rep.accuracy) << "\n";
    out << "per_class";
    for (double v : rep.per_class) out << " " << fmt(v);
    out << "\n";
    out << "mean_ce " << fmt(rep.mean_ce) << "\n";
    out << "mean_entropy " << fmt(rep.mean_entropy) << "\n";

    if (p.paths.count("dump")) {
        Container dump;
        std::vector<std::int32_t> preds, truth32;
        for (auto v : rep.predictions) preds.push_back(static_cast<std::int32_t>(v));
        for (auto v : labels) truth32.push_back(static_cast<std::int32_t>(v));
        dump.add_i32("predictions", {static_cast<std::int64_t>(preds.size())}, preds);
        dump.add_i32("truth", {static_cast<std::int64_t>(truth32.size())}, truth32);
        dump.save(p.paths.at("dump"));
    }
    return 0;
}

int cmd_export_features(const ParsedArgs& p, std::ostream& out) {
    std::string meta_text;
    ModelState state = load_checkpoint(require_path(p, "model"), &meta_text);
    auto meta = parse_checkpoint_meta(meta_text);
    Config run_cfg = p.config;
    run_cfg.load_text(meta.config.model_meta());
    Pipeline pipe(network_from(run_cfg), run_cfg.adapt_config());

    Tensor images = load_unlabeled_images(require_path(p, "data"));
    auto snap = pipe.snapshot_features(state, images);
    auto labels = pipe.build_labels(snap, 0);

    Container c;
    c.add_tensor("f_t", snap.f_t);
    c.add_tensor("f_hat_a", snap.f_hat);
    std::vector<std::int32_t> pl, easy_flags;
    pl.reserve(labels.final.size());
    for (auto v : labels.final) pl.push_back(static_cast<std::int32_t>(v));
    easy_flags.assign(static_cast<std::size_t>(images.dim(0)), 0);
    for (auto i : labels.bank.easy_indices) easy_flags[static_cast<std::size_t>(i)] = 1;
    c.add_i32("pseudo_labels", {static_cast<std::int64_t>(pl.size())}, pl);
    c.add_i32("easy_flags", {static_cast<std::int64_t>(easy_flags.size())},
              std::vector<std::int32_t>(easy_flags.begin(), easy_flags.end()));
    c.add_text("meta", run_cfg.model_meta());
    c.save(require_path(p, "out"));
    out << "exported features for " << images.dim(0) << " samples to "
        << require_path(p, "out") << "\n";
    return 0;
}

int cmd_gradcheck(const ParsedArgs& p, std::ostream& out) {
    const auto cfg = p.config.backbone_config();
    const auto lines =
        run_gradient_suite(cfg, p.config.adapt_config().seed, 24);
    bool ok = true;
    for (const auto& line : lines) {
        const bool pass = line.max_rel_err < kGradTolerance;
        ok = ok && pass;
        char buf[128];
        std::snprintf(buf, sizeof(buf), "%-8s max_rel_err %.3e over %d samples  %s",
                      line.loss_name.c_str(), line.max_rel_err, line.checked,
                      pass ? "PASS" : "FAIL");
        out << buf << "\n";
    }
    out << (ok ? "gradcheck PASS" : "gradcheck FAIL") << " (tolerance 1e-4)\n";
    return ok ? 0 : 1;
}

}  // namespace

int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    try {
        ParsedArgs p = parse_args(args);
        if (p.help) {
            print_usage(out);
            return 0;
        }
        if (p.command == "gen-data") return cmd_gen_data(p, out);
        if (p.command == "train-source") return cmd_train_source(p, out, err);
        if (p.command == "adapt") return cmd_adapt(p, out, err);
        if (p.command == "evaluate") return cmd_evaluate(p, out);
        if (p.command == "export-features") return cmd_export_features(p, out);
        if (p.command == "gradcheck") return cmd_gradcheck(p, out);
        throw ConfigError("unknown command: " + p.command);
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace cadtrans
