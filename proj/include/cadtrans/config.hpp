#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "cadtrans/backbone.hpp"
#include "cadtrans/losses.hpp"
#include "cadtrans/pipeline.hpp"
#include "cadtrans/synthdata.hpp"

namespace cadtrans {

// Flat key=value configuration: optional file ("#" comments) plus command-line
// --key=value overrides. Unknown keys are a hard error. Every key has a
// documented default.
class Config {
public:
    Config();

    void load_file(const std::string& path);
    void set(const std::string& key, const std::string& value);  // unknown -> error
    // Parses "key=value\n" text (checkpoint meta snapshots).
    void load_text(const std::string& text);

    std::string get(const std::string& key) const;
    double get_double(const std::string& key) const;
    int get_int(const std::string& key) const;
    std::uint64_t get_u64(const std::string& key) const;
    bool get_bool(const std::string& key) const;
    std::vector<double> get_doubles(const std::string& key) const;  // comma separated

    // Typed views over the flat keys.
    DomainSpec domain_spec() const;
    BackboneConfig backbone_config() const;
    AdmConfig adm_config() const;  // honors adm_plan=toy|paper
    AdaptConfig adapt_config() const;

    // Model-shape snapshot stored in checkpoints so later commands rebuild the
    // same network.
    std::string model_meta() const;

    struct KeyInfo {
        std::string key;
        std::string default_value;
        std::string help;
    };
    static const std::vector<KeyInfo>& registry();

private:
    std::map<std::string, std::string> values_;
};

}  // namespace cadtrans
