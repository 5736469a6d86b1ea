#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "cadtrans/model.hpp"
#include "cadtrans/tensor.hpp"

namespace cadtrans {

// Bit-exact binary container: magic "CADT", format version, then named
// sections of dense numeric arrays. All multi-byte integers are little-endian;
// payloads are raw little-endian IEEE-754 (dtype 1 = f32, 2 = f64) or 32-bit
// signed integers (dtype 3).
class Container {
public:
    static constexpr std::uint32_t kVersion = 1;

    struct Section {
        std::string name;
        std::uint32_t dtype;  // 1 f32, 2 f64, 3 i32
        Shape extents;
        std::vector<float> f32;
        std::vector<double> f64;
        std::vector<std::int32_t> i32;
        std::int64_t element_count() const { return shape_numel(extents); }
    };

    void add_tensor(const std::string& name, const Tensor& t);
    void add_i32(const std::string& name, Shape extents, std::vector<std::int32_t> values);
    // Stores UTF-8 text as an i32 byte array (one byte per element).
    void add_text(const std::string& name, const std::string& text);

    bool has(const std::string& name) const;
    const Section& section(const std::string& name) const;
    std::size_t section_count() const { return sections_.size(); }
    const std::vector<Section>& sections() const { return sections_; }

    Tensor tensor(const std::string& name) const;
    std::vector<std::int32_t> i32(const std::string& name) const;
    std::string text(const std::string& name) const;

    void save(const std::string& path) const;
    std::vector<std::uint8_t> serialize() const;
    static Container load(const std::string& path);
    static Container parse(const std::vector<std::uint8_t>& bytes);

private:
    std::vector<Section> sections_;
    Section& add_section(const std::string& name, std::uint32_t dtype, Shape extents);
    const Section* find(const std::string& name) const;
};

// Checkpoint: a container with one section per parameter and buffer plus a
// "meta" text section (config snapshot, stage tag, epoch). A load reproduces
// every parameter bitwise.
void save_checkpoint(const ModelState& state, const std::string& path,
                     const std::string& meta_text);
ModelState load_checkpoint(const std::string& path, std::string* meta_out = nullptr);

// Comma-separated metrics table with the fixed header row.
struct MetricsRow {
    int epoch = 0;
    double l_im = 0, l_cst = 0, l_cmk = 0, l_total = 0;
    std::int64_t easy_count = 0, hard_count = 0;
    double pl_acc_easy = -1, pl_acc_all = -1, target_acc = -1;
};
extern const char* const kMetricsHeader;
void write_metrics_header(std::ostream& os);
void append_metrics_row(std::ostream& os, const MetricsRow& row);
std::string format_metrics_row(const MetricsRow& row);

}  // namespace cadtrans
