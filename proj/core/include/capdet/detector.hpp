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

// Open-vocabulary detector head. Proposal regions are average-pooled from the
// shared visual feature grid, projected into the text-embedding space, and
// classified by a softmax over dot products with fixed class embeddings plus a
// background vector. An auxiliary linear objectness scorer is trained
// alongside.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "capdet/eval.hpp"
#include "capdet/geometry.hpp"
#include "capdet/proposals.hpp"
#include "capdet/vlm.hpp"

namespace capdet::det {

using vlm::Matrix;
using vlm::Vector;

struct TextEmbeddingTable {
  std::vector<std::string> categories;
  Matrix embeddings;  // N_c x d_e, row k is category k
  Vector background;  // d_e, zero by default

  std::size_t size() const { return categories.size(); }
  Eigen::Index dim() const { return embeddings.cols(); }
  std::optional<std::size_t> index_of(std::string_view name) const;
  // Rows for `names`, in the given order. Throws on unknown names.
  TextEmbeddingTable subset(std::span<const std::string> names) const;
  void validate() const;

  friend bool operator==(const TextEmbeddingTable& a, const TextEmbeddingTable& b) {
    return a.categories == b.categories && a.embeddings == b.embeddings &&
           a.background == b.background;
  }
};

// {"categories": [...], "dim": d, "vectors": [[...], ...], "bg": [...]}
TextEmbeddingTable load_embeddings(const std::filesystem::path& path);
void save_embeddings(const TextEmbeddingTable& table,
                     const std::filesystem::path& path);

struct DetectorParams {
  Matrix projection;  // d_e x d_f
  Vector bias;        // d_e
  Vector objectness;  // d_f
  double objectness_bias = 0;

  static DetectorParams initial(Eigen::Index feature_dim, Eigen::Index embed_dim,
                                std::uint64_t seed);
  double squared_norm() const;
  friend bool operator==(const DetectorParams&, const DetectorParams&) = default;
};

struct RegionEmbedding {
  Vector r;
  Box box;
  std::string image_id;
};

// Mean of the feature rows of every grid cell whose pixel footprint
// intersects `box`. The image is `width` x `height` pixels.
Vector pool_region(const vlm::VisualFeatures& features, const Box& box,
                   int width, int height);

RegionEmbedding extract_region_embedding(const vlm::VisualFeatures& features,
                                         const Box& box, int width, int height,
                                         const DetectorParams& params,
                                         bool l2_normalize = false);

// Probabilities over [bg, c_1, ..., c_N]: softmax of r . c with max
// subtraction.
Vector match_probability(const Vector& r, const TextEmbeddingTable& table);

// A pooled region feature and its target: 0 is background, k >= 1 is
// table category k - 1.
struct TrainingSample {
  Vector pooled;
  int target = 0;
};

struct LossResult {
  double loss = 0;
  double matching_loss = 0;
  double objectness_loss = 0;
  DetectorParams gradient;
};

// Mean matching cross-entropy plus mean binary objectness cross-entropy.
LossResult detection_loss(const DetectorParams& params,
                          std::span<const TrainingSample> batch,
                          const TextEmbeddingTable& table,
                          bool l2_normalize = false);

struct TrainConfig {
  double learning_rate = 0.01;
  int batch_size = 16;
  int iterations = 2000;
  std::vector<int> milestones{1200, 1800};
  double decay_factor = 0.1;
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;
  double negative_ratio = 3.0;  // negatives per positive in a batch
  double negative_iou = 0.3;    // proposals below this max-IoU are background
  bool l2_normalize = false;

  static TrainConfig desk();
  static TrainConfig desk_finetune();
  static TrainConfig paper_scale();
  static TrainConfig paper_scale_finetune();

  double learning_rate_at(int iteration) const;
  void validate() const;
};

struct IterationTrace {
  int iteration = 0;
  double learning_rate = 0;
  double loss = 0;
  double gradient_norm = 0;
  double update_norm = 0;
  std::vector<int> targets;
};

struct TrainTrace {
  std::vector<IterationTrace> iterations;
};

struct TrainingTarget {
  Box box;
  std::string category;
};

struct TrainingImage {
  std::string image_id;
  vlm::VisualFeatures features;
  int width = 0;
  int height = 0;
  std::vector<TrainingTarget> targets;
  ProposalSet proposals;
};

struct SamplePool {
  std::vector<TrainingSample> positives;
  std::vector<TrainingSample> negatives;
};

// Positives are the targets; negatives are proposals whose best IoU with
// every target stays below `negative_iou`. Targets whose category is not in
// `table` are rejected.
SamplePool build_sample_pool(std::span<const TrainingImage> images,
                             const TextEmbeddingTable& table,
                             double negative_iou);

// SGD with weight decay and step decay. Batches mix positives and negatives
// at 1 : negative_ratio, drawn with replacement from a seeded stream.
DetectorParams train(const SamplePool& pool, const TextEmbeddingTable& table,
                     const TrainConfig& config, TrainTrace* trace = nullptr);

// train() starting from `params`, with every positive restricted to
// `base_categories`.
DetectorParams fine_tune(DetectorParams params, const SamplePool& pool,
                         const TextEmbeddingTable& table,
                         std::span<const std::string> base_categories,
                         const TrainConfig& config, TrainTrace* trace = nullptr);

struct InferenceConfig {
  double score_threshold = 0.05;
  double nms_iou = 0.5;
  bool l2_normalize = false;
};

// Class-wise greedy NMS; keeps input order among survivors.
std::vector<eval::Detection> nms(std::vector<eval::Detection> detections,
                                 double iou_threshold);

std::vector<eval::Detection> infer(const std::string& image_id,
                                   const vlm::VisualFeatures& features,
                                   int width, int height,
                                   const ProposalSet& proposals,
                                   std::span<const std::string> class_subset,
                                   const DetectorParams& params,
                                   const TextEmbeddingTable& table,
                                   const InferenceConfig& config = {});

}  // namespace capdet::det
