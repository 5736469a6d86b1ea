#include "cadtrans/dataset_io.hpp"

namespace cadtrans {

namespace {

std::vector<std::int32_t> to_i32(const std::vector<std::int64_t>& v) {
    std::vector<std::int32_t> out;
    out.reserve(v.size());
    for (auto x : v) out.push_back(static_cast<std::int32_t>(x));
    return out;
}

std::vector<std::int64_t> to_i64(const std::vector<std::int32_t>& v) {
    std::vector<std::int64_t> out;
    out.reserve(v.size());
    for (auto x : v) out.push_back(static_cast<std::int64_t>(x));
    return out;
}

}  // namespace

void save_source_dataset(const std::string& path, const Dataset& data,
                         const std::string& meta_text) {
    Container c;
    c.add_tensor("images", data.images);
    c.add_i32("labels", {static_cast<std::int64_t>(data.labels.size())},
              to_i32(data.labels));
    c.add_text("meta", meta_text);
    c.save(path);
}

void save_target_dataset(const std::string& path, const Tensor& images,
                         const TargetSidecar& sidecar, const std::string& meta_text) {
    Container c;
    c.add_tensor("images", images);
    c.add_i32("truth_labels", {static_cast<std::int64_t>(sidecar.truth.size())},
              to_i32(sidecar.truth));
    c.add_i32("hard_tags", {static_cast<std::int64_t>(sidecar.hard_tags.size())},
              to_i32(sidecar.hard_tags));
    c.add_text("meta", meta_text);
    c.save(path);
}

Dataset load_labeled_dataset(const std::string& path) {
    Container c = Container::load(path);
    Dataset d;
    d.images = c.tensor("images");
    d.labels = to_i64(c.i32("labels"));
    if (static_cast<std::int64_t>(d.labels.size()) != d.images.dim(0))
        throw InputError(path + ": label count does not match image count");
    return d;
}

Tensor load_unlabeled_images(const std::string& path) {
    return Container::load(path).tensor("images");
}

std::vector<std::int64_t> load_truth_labels(const std::string& path) {
    Container c = Container::load(path);
    if (c.has("truth_labels")) return to_i64(c.i32("truth_labels"));
    if (c.has("labels")) return to_i64(c.i32("labels"));
    throw InputError(path + ": no ground-truth labels present");
}

bool has_truth_labels(const std::string& path) {
    Container c = Container::load(path);
    return c.has("truth_labels") || c.has("labels");
}

std::vector<std::int64_t> load_hard_tags(const std::string& path) {
    return to_i64(Container::load(path).i32("hard_tags"));
}

}  // namespace cadtrans
