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

// End-to-end orchestration: pseudo-label generation over a pair collection,
// detector training and fine-tuning, evaluation, checkpoints and ablations.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "capdet/dataset.hpp"
#include "capdet/detector.hpp"
#include "capdet/eval.hpp"
#include "capdet/pseudo_label.hpp"
#include "capdet/vlm.hpp"

namespace capdet::pipeline {

// Progress and per-record problems; defaults to stderr.
using Logger = std::function<void(const std::string&)>;
Logger stderr_logger();

// Toy encoder settings used by every subcommand unless overridden.
vlm::ModelConfig default_model_config(std::uint64_t seed);

// "toy" or "import:DIR".
std::unique_ptr<AttributionModel> make_attribution(const std::string& source,
                                                   const vlm::ModelConfig& config,
                                                   const vlm::Lexicon& lexicon);

struct PairLoad {
  std::vector<ImageCaptionPair> pairs;
  std::vector<std::string> failures;  // one message per rejected record
};

// Reads every record of a pairs file, logging and skipping bad ones.
PairLoad load_pairs(const std::filesystem::path& path, const Logger& log);

struct LabelRun {
  std::vector<PseudoBoxLabel> labels;  // canonical order
  std::size_t pairs_ok = 0;
  std::size_t pairs_failed = 0;
  std::map<std::string, std::size_t> per_category;
};

// Output does not depend on `workers`.
LabelRun generate_labels(std::span<const ImageCaptionPair> pairs,
                         const ObjectVocabulary& vocab,
                         const AttributionModel& model,
                         const ProposalProvider& proposals, int workers,
                         const Logger& log);

std::string summarize(const LabelRun& run);

// Groups supervision boxes by image and attaches features and proposals.
// Images without a box are still included so they contribute negatives.
std::vector<det::TrainingImage> training_images(
    std::span<const ImageCaptionPair> pairs,
    const std::map<std::string, std::vector<det::TrainingTarget>>& targets,
    const vlm::ToyEncoder& encoder, const ProposalProvider& proposals,
    int workers);

std::map<std::string, std::vector<det::TrainingTarget>> targets_from_labels(
    std::span<const PseudoBoxLabel> labels);
std::map<std::string, std::vector<det::TrainingTarget>> targets_from_ground_truth(
    const eval::GroundTruthSet& gt, std::span<const std::string> categories);

std::vector<eval::Detection> detect(std::span<const ImageCaptionPair> pairs,
                                    const vlm::ToyEncoder& encoder,
                                    const ProposalProvider& proposals,
                                    std::span<const std::string> class_subset,
                                    const det::DetectorParams& params,
                                    const det::TextEmbeddingTable& table,
                                    const det::InferenceConfig& config, int workers);

// ---------------------------------------------------------------------------

struct Checkpoint {
  det::DetectorParams params;
  det::TrainConfig train;
  vlm::ModelConfig model;
  std::string stage;  // "train" or "finetune"
  int iterations = 0;
  std::uint64_t seed = 0;
  std::vector<std::string> categories;  // embedding table used in training
};

inline constexpr const char* kCheckpointSchema = "capdet.checkpoint/1";

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::string train_config_to_json(const det::TrainConfig& config);
det::TrainConfig train_config_from_json(const std::string& text);
std::string model_config_to_json(const vlm::ModelConfig& config);
vlm::ModelConfig model_config_from_json(const std::string& text);

// ---------------------------------------------------------------------------
// Full synthetic-world run: labels on train pairs, training, optional
// fine-tuning on base ground truth, generalized evaluation on test pairs.

struct ExperimentConfig {
  vlm::ModelConfig model = default_model_config(0);
  std::string proposals = "region-merge";
  det::TrainConfig train = det::TrainConfig::desk();
  det::TrainConfig finetune = det::TrainConfig::desk_finetune();
  det::InferenceConfig inference;
  bool run_finetune = false;
  int workers = 1;
};

struct ExperimentResult {
  LabelRun labels;
  eval::QualityReport label_quality;
  det::DetectorParams params;
  std::vector<eval::Detection> detections;
  eval::EvalReport report;
  std::optional<det::DetectorParams> finetuned;
  std::optional<eval::EvalReport> finetuned_report;
};

struct ExperimentData {
  std::vector<ImageCaptionPair> train;
  std::vector<ImageCaptionPair> test;
  eval::GroundTruthSet train_gt;
  eval::GroundTruthSet test_gt;
  ObjectVocabulary vocabulary;
  vlm::Lexicon lexicon;
  det::TextEmbeddingTable embeddings;
};

ExperimentData experiment_data(const io::SynthDataset& dataset);
// Reads a directory written by io::write_synth_dataset.
ExperimentData load_experiment_data(const std::filesystem::path& dir, const Logger& log);

ExperimentResult run_experiment(const ExperimentData& data,
                                const ExperimentConfig& config, const Logger& log);

// ---------------------------------------------------------------------------

enum class AblationAxis { kVocabSize, kProposalSource, kDataAmount };
AblationAxis parse_axis(const std::string& name);
const char* to_string(AblationAxis axis);
std::vector<std::string> default_settings(AblationAxis axis);

struct AblationRow {
  std::string axis;
  std::string setting;
  std::size_t vocabulary_size = 0;
  std::size_t train_pairs = 0;
  std::size_t num_labels = 0;
  std::optional<double> label_precision;
  std::optional<double> label_recall;
  std::optional<double> novel_ap;
  std::optional<double> base_ap;
  std::optional<double> overall_ap;
  std::string error;  // nonempty when the setting failed
};

// Settings: vocab_size {restricted, full}; proposal_source {grid,
// region-merge, file:PATH}; data_amount percentages such as "25%".
std::vector<AblationRow> run_ablation(const ExperimentData& data, AblationAxis axis,
                                      std::span<const std::string> settings,
                                      const ExperimentConfig& config, const Logger& log);

void write_ablation_csv(std::span<const AblationRow> rows, std::ostream& out);
std::string format_ablation(std::span<const AblationRow> rows);

}  // namespace capdet::pipeline
