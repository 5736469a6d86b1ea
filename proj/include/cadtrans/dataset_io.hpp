#pragma once

#include <string>

#include "cadtrans/container.hpp"
#include "cadtrans/synthdata.hpp"

namespace cadtrans {

// Dataset container layout: "images" (f32 [n, 1, s, s]); "labels" (i32, source
// only); sidecar sections "truth_labels" and "hard_tags" (i32, target only);
// "meta" (text). The adaptation loader reads images only — the sidecar stays
// invisible to the adaptation path by construction.

void save_source_dataset(const std::string& path, const Dataset& data,
                         const std::string& meta_text);
void save_target_dataset(const std::string& path, const Tensor& images,
                         const TargetSidecar& sidecar, const std::string& meta_text);

// Labeled view (source training / supervised evaluation).
Dataset load_labeled_dataset(const std::string& path);

// Adaptation loader: images only, sidecar omitted.
Tensor load_unlabeled_images(const std::string& path);

// Evaluation-only readers.
std::vector<std::int64_t> load_truth_labels(const std::string& path);
bool has_truth_labels(const std::string& path);
std::vector<std::int64_t> load_hard_tags(const std::string& path);

}  // namespace cadtrans
