#pragma once

#include <cstdint>
#include <vector>

#include "cadtrans/tensor.hpp"

namespace cadtrans {

// Two-domain synthetic benchmark: oriented bar patterns at a class-specific
// angle and position. Easy target samples stay close to the source
// distribution (mild noise and brightness shift); hard samples rotate the bar
// away from its template, occlude a patch, and add heavy noise, while the
// class-specific position keeps them identifiable.
struct DomainSpec {
    int num_classes = 4;
    int per_class = 100;  // samples per class per domain
    int image_side = 16;
    double source_noise = 0.1;
    double easy_noise = 0.1;
    double easy_brightness = 0.1;
    double hard_rot_min = 30.0;  // degrees
    double hard_rot_max = 60.0;
    int occlusion_side = 4;
    double hard_noise = 0.3;
    double hard_fraction = 0.4;
    std::uint64_t seed = 0;
    // template geometry
    double bar_length = 6.0;
    double bar_width = 1.5;
    double template_radius = 4.2;  // class-center distance from the image center

    void validate() const;
    std::int64_t domain_size() const {
        return static_cast<std::int64_t>(num_classes) * per_class;
    }
};

struct Dataset {
    Tensor images;                     // [n, 1, side, side] f32, values in [0, 1]
    std::vector<std::int64_t> labels;  // empty for the unlabeled target view
};

// Hidden ground truth for the target domain; readable only by evaluation and
// metrics reporting, never by the adaptation path.
struct TargetSidecar {
    std::vector<std::int64_t> truth;
    std::vector<std::int64_t> hard_tags;  // 1 = hard subpopulation
};

struct GeneratedData {
    Dataset source;  // labels populated
    Dataset target;  // labels empty
    TargetSidecar sidecar;
};

GeneratedData generate(const DomainSpec& spec);

// Class template geometry (exposed for the distance measurements in tests).
struct BarTemplate {
    double cx, cy;     // bar center in pixels
    double angle_deg;  // bar orientation
    double length = 6.0;
    double width = 1.5;
};
BarTemplate class_template(const DomainSpec& spec, int cls);

// Renders one bar into a side x side buffer (row-major, overwrites).
void render_bar(std::vector<double>& img, int side, const BarTemplate& tpl);

}  // namespace cadtrans
