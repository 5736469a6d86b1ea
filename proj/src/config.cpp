#include "cadtrans/config.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

namespace cadtrans {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

}  // namespace

const std::vector<Config::KeyInfo>& Config::registry() {
    static const std::vector<KeyInfo> keys = {
        // synthetic data
        {"classes", "4", "number of classes"},
        {"per_class", "100", "samples per class per domain"},
        {"image_side", "16", "square image side in pixels"},
        {"hard_fraction", "0.4", "fraction of hard target samples per class"},
        {"source_noise", "0.1", "source-domain additive noise sigma"},
        {"easy_noise", "0.1", "easy-target additive noise sigma"},
        {"easy_brightness", "0.1", "easy-target brightness shift bound"},
        {"hard_rot_min", "30", "hard-target rotation lower bound (degrees)"},
        {"hard_rot_max", "60", "hard-target rotation upper bound (degrees)"},
        {"hard_occlusion", "4", "hard-target occlusion patch side"},
        {"hard_noise", "0.3", "hard-target additive noise sigma"},
        {"data_seed", "0", "generator seed"},
        {"bar_length", "6", "template bar length in pixels"},
        {"bar_width", "1.5", "template bar thickness"},
        {"template_radius", "4.2", "class-center distance from the image center"},
        // backbone
        {"patch_side", "4", "patch side in pixels"},
        {"embed_dim", "32", "token embedding width D"},
        {"heads", "4", "attention heads"},
        {"layers", "6", "MHSA layers L"},
        {"mlp_hidden", "128", "MLP hidden width"},
        {"feature_dim", "32", "feature head width F"},
        {"attn_agg_start", "0", "first aggregated layer (1-based; 0 = L/2+1)"},
        {"ema_lambda", "0.99", "attention EMA coefficient"},
        {"ema_swap", "0", "swap EMA weighting (1 weights history by lambda)"},
        // assistant module
        {"adm_plan", "toy", "assistant conv plan: toy or paper"},
        {"adm_c1", "12", "toy plan conv1 channels"},
        {"adm_c2", "12", "toy plan conv2 channels"},
        {"adm_c3", "12", "toy plan conv3 channels"},
        {"adm_head_hidden", "16", "assistant head hidden width"},
        // training
        {"lr", "0.01", "learning rate"},
        {"momentum", "0.9", "SGD momentum"},
        {"weight_decay", "0.001", "SGD weight decay"},
        {"batch_size", "32", "mini-batch size (>= 2)"},
        {"epochs_source", "30", "source-stage epochs"},
        {"epochs_target", "20", "target-stage epochs"},
        {"alpha", "0.3", "consistency loss weight"},
        {"beta", "0.1", "CMK-MMD loss weight"},
        {"lambda_c", "0.9", "centroid EMA coefficient"},
        {"knn_k", "5", "neighbors for hard-sample reassessment"},
        {"refine_rounds", "2", "centroid refinement iterations"},
        {"seed", "0", "training seed"},
        {"precision", "f32", "training precision: f32 or f64"},
        {"lr_decay", "0", "enable (1+10p)^-0.75 learning-rate decay"},
        {"assign_euclidean", "0", "assign pseudo-labels by Euclidean distance"},
        {"kd_squared", "0", "use squared feature term in the distillation loss"},
        // kernels
        {"mmd_multipliers", "0.25,0.5,1,2,4", "bandwidth multipliers (comma separated)"},
        {"mmd_fixed_bandwidth", "0", "fixed base bandwidth (0 = median heuristic)"},
        {"mmd_pooled", "0", "pool banks into a single unconditioned MMD"},
    };
    return keys;
}

Config::Config() {
    for (const auto& k : registry()) values_[k.key] = k.default_value;
}

void Config::set(const std::string& key, const std::string& value) {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key: " + key);
    it->second = value;
}

void Config::load_text(const std::string& text) {
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) +
                              ": expected key=value, got '" + line + "'");
        set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
}

void Config::load_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw InputError("cannot open config file " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    load_text(ss.str());
}

std::string Config::get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key: " + key);
    return it->second;
}

double Config::get_double(const std::string& key) const {
    const std::string v = get(key);
    char* end = nullptr;
    const double d = std::strtod(v.c_str(), &end);
    if (end == v.c_str() || *end != '\0')
        throw ConfigError("config key " + key + ": '" + v + "' is not a number");
    return d;
}

int Config::get_int(const std::string& key) const {
    const double d = get_double(key);
    const int i = static_cast<int>(d);
    if (static_cast<double>(i) != d)
        throw ConfigError("config key " + key + ": expected an integer");
    return i;
}

std::uint64_t Config::get_u64(const std::string& key) const {
    const std::string v = get(key);
    char* end = nullptr;
    const unsigned long long u = std::strtoull(v.c_str(), &end, 10);
    if (end == v.c_str() || *end != '\0')
        throw ConfigError("config key " + key + ": '" + v + "' is not an unsigned integer");
    return static_cast<std::uint64_t>(u);
}

bool Config::get_bool(const std::string& key) const {
    const std::string v = get(key);
    if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
    if (v == "0" || v == "false" || v == "no" || v == "off") return false;
    throw ConfigError("config key " + key + ": '" + v + "' is not a boolean");
}

std::vector<double> Config::get_doubles(const std::string& key) const {
    const std::string v = get(key);
    std::vector<double> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (item.empty()) continue;
        char* end = nullptr;
        const double d = std::strtod(item.c_str(), &end);
        if (end == item.c_str() || *end != '\0')
            throw ConfigError("config key " + key + ": '" + item + "' is not a number");
        out.push_back(d);
    }
    if (out.empty()) throw ConfigError("config key " + key + ": empty list");
    return out;
}

DomainSpec Config::domain_spec() const {
    DomainSpec d;
    d.num_classes = get_int("classes");
    d.per_class = get_int("per_class");
    d.image_side = get_int("image_side");
    d.hard_fraction = get_double("hard_fraction");
    d.source_noise = get_double("source_noise");
    d.easy_noise = get_double("easy_noise");
    d.easy_brightness = get_double("easy_brightness");
    d.hard_rot_min = get_double("hard_rot_min");
    d.hard_rot_max = get_double("hard_rot_max");
    d.occlusion_side = get_int("hard_occlusion");
    d.hard_noise = get_double("hard_noise");
    d.seed = get_u64("data_seed");
    d.bar_length = get_double("bar_length");
    d.bar_width = get_double("bar_width");
    d.template_radius = get_double("template_radius");
    d.validate();
    return d;
}

BackboneConfig Config::backbone_config() const {
    BackboneConfig b;
    b.image_side = get_int("image_side");
    b.patch_side = get_int("patch_side");
    b.embed_dim = get_int("embed_dim");
    b.heads = get_int("heads");
    b.layers = get_int("layers");
    b.mlp_hidden = get_int("mlp_hidden");
    b.feature_dim = get_int("feature_dim");
    b.num_classes = get_int("classes");
    b.attn_agg_start = get_int("attn_agg_start");
    b.ema_lambda = get_double("ema_lambda");
    b.ema_swap = get_bool("ema_swap");
    b.validate();
    return b;
}

AdmConfig Config::adm_config() const {
    const std::string plan = get("adm_plan");
    const BackboneConfig b = backbone_config();
    if (plan == "paper") return AdmConfig::paper_scale(b.num_classes);
    if (plan != "toy") throw ConfigError("adm_plan must be 'toy' or 'paper', got " + plan);
    AdmConfig a = AdmConfig::toy(b.embed_dim, b.grid_side(), b.feature_dim, b.num_classes);
    a.channels = {get_int("adm_c1"), get_int("adm_c2"), get_int("adm_c3")};
    a.head_hidden = get_int("adm_head_hidden");
    a.validate();
    return a;
}

AdaptConfig Config::adapt_config() const {
    AdaptConfig a;
    a.lr = get_double("lr");
    a.momentum = get_double("momentum");
    a.weight_decay = get_double("weight_decay");
    a.batch_size = get_int("batch_size");
    a.epochs_source = get_int("epochs_source");
    a.epochs_target = get_int("epochs_target");
    a.alpha = get_double("alpha");
    a.beta = get_double("beta");
    a.lambda_c = get_double("lambda_c");
    a.knn_k = get_int("knn_k");
    a.refine_rounds = get_int("refine_rounds");
    a.seed = get_u64("seed");
    const std::string prec = get("precision");
    if (prec == "f32")
        a.precision = DType::F32;
    else if (prec == "f64")
        a.precision = DType::F64;
    else
        throw ConfigError("precision must be f32 or f64, got " + prec);
    a.lr_decay = get_bool("lr_decay");
    a.assign_euclidean = get_bool("assign_euclidean");
    a.kd_squared = get_bool("kd_squared");
    a.kernel.multipliers = get_doubles("mmd_multipliers");
    a.kernel.fixed_bandwidth = get_double("mmd_fixed_bandwidth");
    a.kernel.pooled = get_bool("mmd_pooled");
    a.validate();
    return a;
}

std::string Config::model_meta() const {
    static const char* const model_keys[] = {
        "classes",   "image_side",      "patch_side", "embed_dim", "heads",
        "layers",    "mlp_hidden",      "feature_dim", "attn_agg_start",
        "ema_lambda", "ema_swap",       "adm_plan",   "adm_c1",    "adm_c2",
        "adm_c3",    "adm_head_hidden", "precision"};
    std::string out;
    for (const char* k : model_keys) out += std::string(k) + "=" + get(k) + "\n";
    return out;
}

}  // namespace cadtrans
