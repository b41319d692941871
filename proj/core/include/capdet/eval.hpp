// Copyright 2026 The capdet Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "capdet/geometry.hpp"
#include "capdet/pseudo_label.hpp"

namespace capdet::eval {

inline constexpr double kIouThreshold = 0.5;

// Intersection over union of two half-open boxes. Throws on degenerate boxes.
double iou(const Box& a, const Box& b);

struct Detection {
  std::string image_id;
  std::string category;
  Box box;
  double confidence = 0;
  friend bool operator==(const Detection&, const Detection&) = default;
};

struct GroundTruthBox {
  Box box;
  std::string category;
};

struct GroundTruthSet {
  std::map<std::string, std::vector<GroundTruthBox>> images;
  std::vector<std::string> base;
  std::vector<std::string> novel;

  std::size_t num_boxes() const;
  // Throws InvalidInput if base and novel overlap or an annotation's category
  // is in neither split (only checked when a split is configured).
  void validate() const;
};

struct PrPoint {
  double precision = 0;
  double recall = 0;
  double confidence = 0;
};

struct ApResult {
  // nullopt when the class has no ground truth.
  std::optional<double> ap;
  std::vector<PrPoint> curve;
  std::size_t num_gt = 0;
  std::size_t num_detections = 0;
  std::size_t true_positives = 0;
};

using BoxesByImage = std::map<std::string, std::vector<Box>>;

// Detections are ranked by confidence (stable for ties). A detection is a true
// positive when its best-IoU still-unmatched ground-truth box in the same image
// reaches `iou_threshold`. AP integrates the monotone precision envelope over
// recall (all points).
ApResult average_precision(std::span<const Detection> detections,
                           const BoxesByImage& ground_truth,
                           double iou_threshold = kIouThreshold);

struct ClassAp {
  std::string category;
  std::string split;  // "base", "novel" or "all"
  std::optional<double> ap;
  std::size_t num_gt = 0;
  std::size_t num_detections = 0;
};

struct EvalReport {
  std::vector<ClassAp> per_class;
  std::optional<double> novel_map;
  std::optional<double> base_map;
  std::optional<double> overall_map;
  std::size_t num_images = 0;
  std::size_t num_gt = 0;
  std::size_t num_detections = 0;
};

// Base/novel/overall means are unweighted means of per-class AP over classes
// with at least one ground-truth box.
EvalReport generalized_eval(std::span<const Detection> detections,
                            const GroundTruthSet& gt,
                            double iou_threshold = kIouThreshold);

// Single vocabulary, no split. Every detection and ground-truth category must
// belong to `vocabulary`.
EvalReport transfer_eval(std::span<const Detection> detections,
                         const GroundTruthSet& gt,
                         std::span<const std::string> vocabulary,
                         double iou_threshold = kIouThreshold);

struct LabelQuality {
  std::string category;
  std::optional<double> precision;  // nullopt when nothing was emitted
  std::optional<double> recall;     // nullopt when there is no ground truth
  std::size_t emitted = 0;
  std::size_t correct = 0;
  std::size_t gt = 0;
  std::size_t matched_gt = 0;
};

struct QualityReport {
  std::vector<LabelQuality> per_category;
  LabelQuality overall;
};

// A label is correct when a same-category ground-truth box in the same image
// has IoU >= threshold; a ground-truth box is recalled when some
// same-category label overlaps it that much.
QualityReport pseudo_label_quality(std::span<const PseudoBoxLabel> labels,
                                   const GroundTruthSet& gt,
                                   double iou_threshold = kIouThreshold);

// JSON-lines {image_id, category, box: [x_min, y_min, x_max, y_max], confidence}
std::vector<Detection> load_detections(const std::filesystem::path& path);
void save_detections(std::span<const Detection> detections,
                     const std::filesystem::path& path);

void save_report_json(const EvalReport& report, const std::filesystem::path& path);
void save_report_csv(const EvalReport& report, const std::filesystem::path& path);
// Novel / Base / Overall table.
std::string format_report(const EvalReport& report);

}  // namespace capdet::eval
