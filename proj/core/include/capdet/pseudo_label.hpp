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
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "capdet/geometry.hpp"
#include "capdet/pair.hpp"
#include "capdet/proposals.hpp"
#include "capdet/tensor_import.hpp"
#include "capdet/vlm.hpp"
#include "capdet/vocabulary.hpp"

namespace capdet {

// Nonnegative activation at pixel resolution, row-major.
struct PixelMap {
  int width = 0;
  int height = 0;
  std::vector<double> values;

  double at(int x, int y) const {
    return values[static_cast<std::size_t>(y) * width + x];
  }
};

// Bilinear interpolation between grid-cell centres, clamped at the borders.
PixelMap upsample_activation(const vlm::ActivationMap& map, int width,
                             int height);

// (sum of phi over the box's pixels) / sqrt(box area). Box coordinates must be
// integral and inside the map.
double score_proposal(const PixelMap& phi, const Box& box);

// O(1) box sums after O(W*H) setup.
class SummedAreaTable {
 public:
  explicit SummedAreaTable(const PixelMap& phi);
  double sum(const Box& box) const;
  double score(const Box& box) const;

 private:
  int width_ = 0;
  int height_ = 0;
  std::vector<double> table_;  // (width + 1) x (height + 1)
};

struct Selection {
  std::size_t index = 0;
  Box box;
  double score = 0;
};

// Highest-scoring proposal; ties go to the lowest index.
Selection select_box(const PixelMap& phi, const ProposalSet& proposals);

struct PseudoBoxLabel {
  std::string pair_id;
  std::string category;
  Box box;
  double score = 0;
  int span_start = 0;  // caption word indices, half-open
  int span_end = 0;

  friend bool operator==(const PseudoBoxLabel&, const PseudoBoxLabel&) = default;
};

// Canonical output order: (pair_id, span_start, span_end, category).
void sort_canonical(std::vector<PseudoBoxLabel>& labels);

// Produces per-word Grad-CAM maps for a caption. Word i of the caption is
// text token i + 1 (token 0 is [CLS]).
class AttributionModel {
 public:
  virtual ~AttributionModel() = default;
  virtual std::vector<vlm::ActivationMap> word_maps(
      const ImageCaptionPair& pair, std::span<const std::string> words,
      std::span<const int> word_indices) const = 0;
};

class ToyAttribution final : public AttributionModel {
 public:
  explicit ToyAttribution(vlm::ToyEncoder encoder)
      : encoder_(std::move(encoder)) {}

  const vlm::ToyEncoder& encoder() const { return encoder_; }

  static std::vector<std::string> model_tokens(std::span<const std::string> words);

  std::vector<vlm::ActivationMap> word_maps(
      const ImageCaptionPair& pair, std::span<const std::string> words,
      std::span<const int> word_indices) const override;

 private:
  vlm::ToyEncoder encoder_;
};

// Reads <dir>/<pair_id>.json records; the record's tokens must be the
// caption words framed by one leading and one trailing marker token.
class ImportedAttribution final : public AttributionModel {
 public:
  ImportedAttribution(std::filesystem::path dir, int gradcam_layer)
      : dir_(std::move(dir)), layer_(gradcam_layer) {}

  std::vector<vlm::ActivationMap> word_maps(
      const ImageCaptionPair& pair, std::span<const std::string> words,
      std::span<const int> word_indices) const override;

 private:
  std::filesystem::path dir_;
  int layer_;
};

struct MentionMap {
  VocabularyMatch match;
  vlm::ActivationMap map;  // mean of the span's word maps
};

// Canonicalizes and matches the caption, then builds one map per mention.
std::vector<MentionMap> mention_maps(const ImageCaptionPair& pair,
                                     const ObjectVocabulary& vocab,
                                     const AttributionModel& model);

// One label per vocabulary mention, multi-word spans averaging their word
// maps; identical (category, box) pairs are collapsed to the first mention.
std::vector<PseudoBoxLabel> generate_pseudo_labels(
    const ImageCaptionPair& pair, const ObjectVocabulary& vocab,
    const AttributionModel& model, const ProposalProvider& proposals);

}  // namespace capdet
