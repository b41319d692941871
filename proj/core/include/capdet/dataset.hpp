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

// Dataset ingestion, persistence and the synthetic shape world.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "capdet/detector.hpp"
#include "capdet/error.hpp"
#include "capdet/eval.hpp"
#include "capdet/pair.hpp"
#include "capdet/pseudo_label.hpp"
#include "capdet/vlm.hpp"
#include "capdet/vocabulary.hpp"

namespace capdet::io {

// A record that failed to load; the surrounding stream stays usable.
class RecordError : public FormatError {
 public:
  RecordError(std::string record_id, const std::string& what)
      : FormatError(what), record_id_(std::move(record_id)) {}
  const std::string& record_id() const { return record_id_; }

 private:
  std::string record_id_;
};

// ---------------------------------------------------------------------------
// Image-caption pairs: JSON-lines {pair_id, image_path, caption}. Relative
// image paths resolve against the directory holding the pairs file.

struct PairRecord {
  std::string pair_id;
  std::string image_path;
  std::string caption;
  friend bool operator==(const PairRecord&, const PairRecord&) = default;
};

std::vector<PairRecord> load_pair_records(const std::filesystem::path& path);
void save_pair_records(std::span<const PairRecord> records,
                       const std::filesystem::path& path);

// Lazy stream over a pairs file, in file order.
class PairReader {
 public:
  explicit PairReader(const std::filesystem::path& path);

  // nullopt at end of file. Throws RecordError for a malformed line or a
  // missing image; the next call continues with the following record.
  std::optional<ImageCaptionPair> next();

 private:
  std::ifstream in_;
  std::filesystem::path base_dir_;
  std::string path_;
  int lineno_ = 0;
};

// ---------------------------------------------------------------------------
// COCO-style annotations (subset): images, annotations with bbox [x, y, w, h]
// and category_id, categories. Images are keyed by their "pair_id" field when
// present, else the file_name stem, else the numeric id. Categories may carry
// an optional "split": "base" | "novel".

struct CocoImage {
  std::int64_t id = 0;
  std::string key;
  std::string file_name;
  int width = 0;
  int height = 0;
};

struct CocoDataset {
  std::vector<CocoImage> images;
  std::vector<std::string> categories;
  eval::GroundTruthSet gt;
};

CocoDataset load_coco_annotations(const std::filesystem::path& path);
void save_coco_annotations(const CocoDataset& dataset,
                           const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Pseudo labels: JSON-lines {pair_id, category, box: [x_min, y_min, x_max,
// y_max], score, token_span: [start, end]}, written in canonical order.

void save_pseudo_labels(std::vector<PseudoBoxLabel> labels,
                        const std::filesystem::path& path);
std::vector<PseudoBoxLabel> load_pseudo_labels(const std::filesystem::path& path);
void write_pseudo_labels(std::span<const PseudoBoxLabel> labels, std::ostream& out);

// COCO export of pseudo labels; categories in `categories` order.
void export_pseudo_labels_coco(std::span<const PseudoBoxLabel> labels,
                               std::span<const CocoImage> images,
                               std::span<const std::string> categories,
                               const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Synthetic shape world.

enum class Shape { kCircle, kSquare, kTriangle };
const char* to_string(Shape s);
Shape parse_shape(const std::string& s);

struct SynthCategory {
  std::string color_name;
  Shape shape = Shape::kCircle;
  Rgb color;
  std::string name() const;
};

struct SynthConfig {
  int n_train = 200;
  int n_test = 100;
  int width = 64;
  int height = 64;
  std::vector<SynthCategory> categories = default_categories();
  std::vector<std::string> novel{"magenta circle", "cyan square"};
  int min_objects = 1;
  int max_objects = 3;
  // Odd side lengths keep circle and triangle extents pixel-aligned.
  int min_size = 13;
  int max_size = 21;
  int gap = 3;
  int background_noise = 10;
  std::vector<std::string> templates{"{}", "a photo of {}", "there is {}",
                                     "{} on a gray background"};
  double position_jitter = 0;  // pixels, sub-pixel shift of the shape centre
  double scale_jitter = 0;     // relative size change
  double color_jitter = 0;     // fraction of 255 per channel
  double drop_mentions = 0;    // probability a mention is left out
  int embed_dim = 8;
  double embed_gain = 2.0;     // column norm of the hidden map's color part
  double shape_weight = 0.25;  // relative column norm of its shape part
  std::uint64_t seed = 0;

  static std::vector<SynthCategory> default_categories();
  std::vector<std::string> category_names() const;
  std::vector<std::string> base_names() const;
  void validate() const;
};

SynthConfig synth_config_from_json(const std::string& text);
std::string synth_config_to_json(const SynthConfig& config);

struct SynthObject {
  std::string category;
  Box box;  // pixel-exact bounds of the rendered mask
  Box analytic_box;
};

struct DatasetManifest {
  std::vector<PairRecord> pairs;
  std::map<std::string, std::string> split;  // pair_id -> "train" | "test"
  std::vector<std::string> categories;
  std::vector<std::string> base;
  std::vector<std::string> novel;
  eval::GroundTruthSet ground_truth;

  std::vector<std::string> ids(const std::string& which) const;
  // Ground truth of the given split with base/novel filled in.
  eval::GroundTruthSet ground_truth_for(const std::string& which) const;
};

struct SynthDataset {
  SynthConfig config;
  DatasetManifest manifest;
  std::map<std::string, Image> images;
  std::map<std::string, std::vector<SynthObject>> objects;
  ObjectVocabulary vocabulary;
  vlm::Lexicon lexicon;
  det::TextEmbeddingTable embeddings;
  // embedding(category) = hidden_map * category_attributes(category)
  vlm::Matrix hidden_map;

  ImageCaptionPair pair(const std::string& pair_id) const;
};

// Attribute vector [r, g, b, one-hot shape], color components centred to
// [-0.5, 0.5].
vlm::Vector category_attributes(const SynthCategory& category);

// Train images only contain base categories; test images draw from all.
// Throws InvalidInput if objects cannot be packed without overlap.
SynthDataset synth_dataset(const SynthConfig& config);

// Directory layout: manifest.json, vocab.jsonl, embeddings.json,
// lexicon.json, {train,test}_pairs.jsonl, {train,test}_gt.json,
// images/<pair_id>.ppm.
void write_synth_dataset(const SynthDataset& dataset,
                         const std::filesystem::path& dir);

// ---------------------------------------------------------------------------

vlm::Lexicon load_lexicon(const std::filesystem::path& path);
void save_lexicon(const vlm::Lexicon& lexicon, const std::filesystem::path& path);

// Heatmap overlay: activation below half its maximum is not drawn, the rest is
// blended with opacity value / max. Proposals are outlined in black, the
// selected box in red.
Image render_overlay(const Image& image, const vlm::ActivationMap& map,
                     const ProposalSet& proposals, const std::optional<Box>& selected);
void export_overlay(const Image& image, const vlm::ActivationMap& map,
                    const ProposalSet& proposals, const std::optional<Box>& selected,
                    const std::filesystem::path& path);

inline constexpr Rgb kHeatColor{255, 200, 0};
inline constexpr Rgb kProposalColor{0, 0, 0};
inline constexpr Rgb kSelectedColor{255, 0, 0};

}  // namespace capdet::io
