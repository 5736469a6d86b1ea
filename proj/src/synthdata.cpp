#include "cadtrans/synthdata.hpp"

#include <algorithm>
#include <cmath>

#include "cadtrans/rng.hpp"

namespace cadtrans {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kBackground = 0.08;
constexpr double kAmplitude = 0.85;

double bump(double t) {
    if (t >= 1.0) return 0.0;
    const double u = 1.0 - t * t;
    return u * u;
}

}  // namespace

void DomainSpec::validate() const {
    if (num_classes < 2 || per_class < 1 || image_side < 8)
        throw ConfigError("domain spec: need >= 2 classes, >= 1 sample, side >= 8");
    if (hard_fraction < 0.0 || hard_fraction > 1.0)
        throw ConfigError("domain spec: hard_fraction must lie in [0, 1]");
    if (occlusion_side < 1 || occlusion_side > image_side)
        throw ConfigError("domain spec: occlusion must fit the image");
    if (hard_rot_min > hard_rot_max)
        throw ConfigError("domain spec: rotation range is inverted");
}

BarTemplate class_template(const DomainSpec& spec, int cls) {
    const double center = (spec.image_side - 1) / 2.0;
    const double pos_angle = 2.0 * kPi * cls / spec.num_classes + kPi / 4.0;
    BarTemplate tpl;
    tpl.cx = center + spec.template_radius * std::cos(pos_angle);
    tpl.cy = center + spec.template_radius * std::sin(pos_angle);
    // classes share orientations pairwise, so the bar position is required to
    // tell them apart and a rotated bar never lands on another class template
    const int angle_groups = (spec.num_classes + 1) / 2;
    tpl.angle_deg = 180.0 * (cls / 2) / angle_groups;
    tpl.length = spec.bar_length;
    tpl.width = spec.bar_width;
    return tpl;
}

void render_bar(std::vector<double>& img, int side, const BarTemplate& tpl) {
    img.assign(static_cast<std::size_t>(side) * side, kBackground);
    const double rad = tpl.angle_deg * kPi / 180.0;
    const double ax = std::cos(rad);
    const double ay = std::sin(rad);
    for (int y = 0; y < side; ++y)
        for (int x = 0; x < side; ++x) {
            const double dx = x - tpl.cx;
            const double dy = y - tpl.cy;
            const double along = dx * ax + dy * ay;
            const double perp = -dx * ay + dy * ax;
            const double over = std::max(0.0, std::fabs(along) - tpl.length / 2.0);
            const double v = kAmplitude * bump(std::fabs(perp) / tpl.width) *
                             bump(over / tpl.width);
            img[static_cast<std::size_t>(y) * side + x] += v;
        }
}

namespace {

void add_noise_and_clip(std::vector<double>& img, Rng& rng, double sigma, double shift) {
    for (auto& v : img) {
        v += shift + sigma * rng.gaussian();
        v = std::clamp(v, 0.0, 1.0);
    }
}

void write_image(Tensor& images, std::int64_t row, const std::vector<double>& img) {
    float* dst = images.mutable_data<float>() +
                 row * static_cast<std::int64_t>(img.size());
    for (std::size_t i = 0; i < img.size(); ++i) dst[i] = static_cast<float>(img[i]);
}

}  // namespace

GeneratedData generate(const DomainSpec& spec) {
    spec.validate();
    const int side = spec.image_side;
    const std::int64_t n = spec.domain_size();

    GeneratedData out;
    out.source.images = Tensor::zeros({n, 1, side, side}, DType::F32);
    out.target.images = Tensor::zeros({n, 1, side, side}, DType::F32);
    out.source.labels.reserve(static_cast<std::size_t>(n));
    out.sidecar.truth.reserve(static_cast<std::size_t>(n));
    out.sidecar.hard_tags.reserve(static_cast<std::size_t>(n));

    // hard count per class: at least one easy and one hard when the fraction
    // is strictly inside (0, 1)
    std::int64_t hard_per_class =
        static_cast<std::int64_t>(std::llround(spec.hard_fraction * spec.per_class));
    if (spec.hard_fraction > 0.0 && spec.hard_fraction < 1.0) {
        hard_per_class = std::clamp<std::int64_t>(hard_per_class, 1, spec.per_class - 1);
    }

    std::vector<double> img;
    std::int64_t row = 0;
    for (int cls = 0; cls < spec.num_classes; ++cls) {
        const BarTemplate tpl = class_template(spec, cls);
        for (int i = 0; i < spec.per_class; ++i, ++row) {
            // source sample
            {
                Rng rng(Rng::mix(spec.seed, static_cast<std::uint64_t>(row)));
                render_bar(img, side, tpl);
                add_noise_and_clip(img, rng, spec.source_noise, 0.0);
                write_image(out.source.images, row, img);
                out.source.labels.push_back(cls);
            }
            // target sample
            {
                Rng rng(Rng::mix(spec.seed ^ 0x7461726765746010ULL,
                                 static_cast<std::uint64_t>(row)));
                const bool hard = i >= spec.per_class - hard_per_class;
                if (!hard) {
                    render_bar(img, side, tpl);
                    const double shift =
                        rng.uniform(-spec.easy_brightness, spec.easy_brightness);
                    add_noise_and_clip(img, rng, spec.easy_noise, shift);
                } else {
                    BarTemplate rotated = tpl;
                    const double delta = rng.uniform(spec.hard_rot_min, spec.hard_rot_max);
                    const double sign = rng.uniform01() < 0.5 ? -1.0 : 1.0;
                    rotated.angle_deg += sign * delta;
                    render_bar(img, side, rotated);
                    const int max_off = side - spec.occlusion_side;
                    const int ox = static_cast<int>(rng.below(static_cast<std::uint64_t>(max_off + 1)));
                    const int oy = static_cast<int>(rng.below(static_cast<std::uint64_t>(max_off + 1)));
                    for (int yy = 0; yy < spec.occlusion_side; ++yy)
                        for (int xx = 0; xx < spec.occlusion_side; ++xx)
                            img[static_cast<std::size_t>(oy + yy) * side + (ox + xx)] = 0.0;
                    add_noise_and_clip(img, rng, spec.hard_noise, 0.0);
                }
                write_image(out.target.images, row, img);
                out.sidecar.truth.push_back(cls);
                out.sidecar.hard_tags.push_back(hard ? 1 : 0);
            }
        }
    }
    return out;
}

}  // namespace cadtrans
