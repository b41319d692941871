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

#include "capdet/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <mutex>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "capdet/error.hpp"

namespace capdet::pipeline {

using nlohmann::json;

namespace {

// Runs body(i) for i in [0, n) on up to `workers` threads. The first
// exception is rethrown after all threads join.
template <typename Body>
void parallel_for(std::size_t n, int workers, Body body) {
  const auto threads =
      static_cast<std::size_t>(std::clamp(workers, 1, 64));
  if (threads == 1 || n < 2) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::jthread> pool;
  for (std::size_t t = 0; t < std::min(threads, n); ++t)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          body(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  pool.clear();
  if (error) std::rethrow_exception(error);
}

json matrix_json(const vlm::Matrix& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

vlm::Matrix matrix_from_json(const json& j) {
  const auto rows = static_cast<Eigen::Index>(j.size());
  const auto cols = rows ? static_cast<Eigen::Index>(j.at(0).size()) : 0;
  vlm::Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    if (static_cast<Eigen::Index>(j.at(r).size()) != cols)
      throw FormatError("ragged matrix in checkpoint");
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = j.at(r).at(c).get<double>();
  }
  return m;
}

vlm::Vector vector_from_json(const json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const vlm::Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

json train_json(const det::TrainConfig& c) {
  return {{"learning_rate", c.learning_rate}, {"batch_size", c.batch_size},
          {"iterations", c.iterations},       {"milestones", c.milestones},
          {"decay_factor", c.decay_factor},   {"weight_decay", c.weight_decay},
          {"seed", c.seed},                   {"negative_ratio", c.negative_ratio},
          {"negative_iou", c.negative_iou},   {"l2_normalize", c.l2_normalize}};
}

det::TrainConfig train_from(const json& j) {
  det::TrainConfig c;
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.iterations = j.value("iterations", c.iterations);
  c.milestones = j.value("milestones", c.milestones);
  c.decay_factor = j.value("decay_factor", c.decay_factor);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.seed = j.value("seed", c.seed);
  c.negative_ratio = j.value("negative_ratio", c.negative_ratio);
  c.negative_iou = j.value("negative_iou", c.negative_iou);
  c.l2_normalize = j.value("l2_normalize", c.l2_normalize);
  c.validate();
  return c;
}

json model_json(const vlm::ModelConfig& c) {
  return {{"dim", c.dim},
          {"layers", c.layers},
          {"heads", c.heads},
          {"grid", {c.grid.rows, c.grid.cols}},
          {"gradcam_layer", c.gradcam_layer},
          {"seed", c.seed},
          {"identity_projections", c.identity_projections},
          {"projection_noise", c.projection_noise},
          {"color_scale", c.color_scale},
          {"position_scale", c.position_scale},
          {"lexicon_gain", c.lexicon_gain}};
}

vlm::ModelConfig model_from(const json& j) {
  vlm::ModelConfig c;
  c.dim = j.value("dim", c.dim);
  c.layers = j.value("layers", c.layers);
  c.heads = j.value("heads", c.heads);
  if (j.contains("grid")) {
    const auto g = j.at("grid").get<std::vector<int>>();
    if (g.size() != 2) throw InvalidInput("model grid must be [rows, cols]");
    c.grid = {g[0], g[1]};
  }
  c.gradcam_layer = j.value("gradcam_layer", c.layers);
  c.seed = j.value("seed", c.seed);
  c.identity_projections = j.value("identity_projections", c.identity_projections);
  c.projection_noise = j.value("projection_noise", c.projection_noise);
  c.color_scale = j.value("color_scale", c.color_scale);
  c.position_scale = j.value("position_scale", c.position_scale);
  c.lexicon_gain = j.value("lexicon_gain", c.lexicon_gain);
  c.validate();
  return c;
}

std::string fmt_opt(const std::optional<double>& v, int precision = 3) {
  if (!v) return "";
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << *v;
  return os.str();
}

}  // namespace

Logger stderr_logger() {
  return [](const std::string& msg) { std::cerr << msg << '\n'; };
}

vlm::ModelConfig default_model_config(std::uint64_t seed) {
  vlm::ModelConfig c;
  c.seed = seed;
  return c;
}

std::unique_ptr<AttributionModel> make_attribution(const std::string& source,
                                                   const vlm::ModelConfig& config,
                                                   const vlm::Lexicon& lexicon) {
  if (source == "toy") return std::make_unique<ToyAttribution>(vlm::ToyEncoder(config, lexicon));
  if (source.starts_with("import:")) {
    const std::filesystem::path dir = source.substr(7);
    if (!std::filesystem::is_directory(dir))
      throw InvalidInput("tensor import directory " + dir.string() + " does not exist");
    return std::make_unique<ImportedAttribution>(dir, config.gradcam_layer);
  }
  throw InvalidInput("model must be 'toy' or 'import:DIR', got '" + source + "'");
}

PairLoad load_pairs(const std::filesystem::path& path, const Logger& log) {
  PairLoad out;
  io::PairReader reader(path);
  for (;;) {
    try {
      auto pair = reader.next();
      if (!pair) break;
      out.pairs.push_back(std::move(*pair));
    } catch (const io::RecordError& e) {
      log(std::string("skipping record: ") + e.what());
      out.failures.emplace_back(e.what());
    }
  }
  return out;
}

LabelRun generate_labels(std::span<const ImageCaptionPair> pairs,
                         const ObjectVocabulary& vocab,
                         const AttributionModel& model,
                         const ProposalProvider& proposals, int workers,
                         const Logger& log) {
  std::vector<std::vector<PseudoBoxLabel>> per_pair(pairs.size());
  std::vector<std::string> errors(pairs.size());
  parallel_for(pairs.size(), workers, [&](std::size_t i) {
    try {
      per_pair[i] = generate_pseudo_labels(pairs[i], vocab, model, proposals);
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  });

  LabelRun run;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (!errors[i].empty()) {
      log("pair " + pairs[i].pair_id + " skipped: " + errors[i]);
      ++run.pairs_failed;
      continue;
    }
    ++run.pairs_ok;
    for (auto& l : per_pair[i]) {
      ++run.per_category[l.category];
      run.labels.push_back(std::move(l));
    }
  }
  sort_canonical(run.labels);
  return run;
}

std::string summarize(const LabelRun& run) {
  std::ostringstream os;
  os << run.labels.size() << " labels from " << run.pairs_ok << " pairs ("
     << run.pairs_failed << " failed)";
  for (const auto& [cat, n] : run.per_category) os << "; " << cat << ": " << n;
  return os.str();
}

std::map<std::string, std::vector<det::TrainingTarget>> targets_from_labels(
    std::span<const PseudoBoxLabel> labels) {
  std::map<std::string, std::vector<det::TrainingTarget>> out;
  for (const auto& l : labels) out[l.pair_id].push_back({l.box, l.category});
  return out;
}

std::map<std::string, std::vector<det::TrainingTarget>> targets_from_ground_truth(
    const eval::GroundTruthSet& gt, std::span<const std::string> categories) {
  std::map<std::string, std::vector<det::TrainingTarget>> out;
  for (const auto& [id, boxes] : gt.images) {
    auto& dst = out[id];
    for (const auto& g : boxes)
      if (std::find(categories.begin(), categories.end(), g.category) != categories.end())
        dst.push_back({g.box, g.category});
  }
  return out;
}

std::vector<det::TrainingImage> training_images(
    std::span<const ImageCaptionPair> pairs,
    const std::map<std::string, std::vector<det::TrainingTarget>>& targets,
    const vlm::ToyEncoder& encoder, const ProposalProvider& proposals, int workers) {
  std::vector<det::TrainingImage> out(pairs.size());
  parallel_for(pairs.size(), workers, [&](std::size_t i) {
    const auto& p = pairs[i];
    auto& img = out[i];
    img.image_id = p.pair_id;
    img.features = encoder.encode_image(p.image);
    img.width = p.image.width();
    img.height = p.image.height();
    if (auto it = targets.find(p.pair_id); it != targets.end()) img.targets = it->second;
    img.proposals = proposals.proposals(p.pair_id, p.image);
  });
  return out;
}

std::vector<eval::Detection> detect(std::span<const ImageCaptionPair> pairs,
                                    const vlm::ToyEncoder& encoder,
                                    const ProposalProvider& proposals,
                                    std::span<const std::string> class_subset,
                                    const det::DetectorParams& params,
                                    const det::TextEmbeddingTable& table,
                                    const det::InferenceConfig& config, int workers) {
  std::vector<std::vector<eval::Detection>> per_image(pairs.size());
  parallel_for(pairs.size(), workers, [&](std::size_t i) {
    const auto& p = pairs[i];
    per_image[i] = det::infer(p.pair_id, encoder.encode_image(p.image), p.image.width(),
                              p.image.height(), proposals.proposals(p.pair_id, p.image),
                              class_subset, params, table, config);
  });
  std::vector<eval::Detection> out;
  for (auto& v : per_image)
    for (auto& d : v) out.push_back(std::move(d));
  return out;
}

// ---------------------------------------------------------------------------

std::string train_config_to_json(const det::TrainConfig& config) {
  return train_json(config).dump(2);
}

det::TrainConfig train_config_from_json(const std::string& text) {
  try {
    return train_from(json::parse(text));
  } catch (const json::exception& e) {
    throw InvalidInput(std::string("train config: ") + e.what());
  }
}

std::string model_config_to_json(const vlm::ModelConfig& config) {
  return model_json(config).dump(2);
}

vlm::ModelConfig model_config_from_json(const std::string& text) {
  try {
    return model_from(json::parse(text));
  } catch (const json::exception& e) {
    throw InvalidInput(std::string("model config: ") + e.what());
  }
}

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  const auto& p = ck.params;
  const json doc{{"schema", kCheckpointSchema},
                 {"stage", ck.stage},
                 {"iterations", ck.iterations},
                 {"seed", ck.seed},
                 {"categories", ck.categories},
                 {"train_config", train_json(ck.train)},
                 {"model_config", model_json(ck.model)},
                 {"params",
                  {{"projection", matrix_json(p.projection)},
                   {"bias", std::vector<double>(p.bias.begin(), p.bias.end())},
                   {"objectness",
                    std::vector<double>(p.objectness.begin(), p.objectness.end())},
                   {"objectness_bias", p.objectness_bias}}}};
  std::ofstream out(path);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out << doc.dump() << '\n';
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  try {
    const json doc = json::parse(in);
    if (doc.value("schema", std::string{}) != kCheckpointSchema)
      throw FormatError(path.string() + ": not a capdet checkpoint");
    Checkpoint ck;
    ck.stage = doc.value("stage", std::string{"train"});
    ck.iterations = doc.at("iterations").get<int>();
    ck.seed = doc.at("seed").get<std::uint64_t>();
    ck.categories = doc.value("categories", std::vector<std::string>{});
    ck.train = train_from(doc.at("train_config"));
    ck.model = model_from(doc.at("model_config"));
    const auto& jp = doc.at("params");
    ck.params.projection = matrix_from_json(jp.at("projection"));
    ck.params.bias = vector_from_json(jp.at("bias"));
    ck.params.objectness = vector_from_json(jp.at("objectness"));
    ck.params.objectness_bias = jp.at("objectness_bias").get<double>();
    if (ck.params.bias.size() != ck.params.projection.rows() ||
        ck.params.objectness.size() != ck.params.projection.cols())
      throw FormatError(path.string() + ": inconsistent parameter shapes");
    return ck;
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  } catch (const InvalidInput& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------

ExperimentData experiment_data(const io::SynthDataset& ds) {
  ExperimentData d;
  for (const auto& id : ds.manifest.ids("train")) d.train.push_back(ds.pair(id));
  for (const auto& id : ds.manifest.ids("test")) d.test.push_back(ds.pair(id));
  d.train_gt = ds.manifest.ground_truth_for("train");
  d.test_gt = ds.manifest.ground_truth_for("test");
  d.vocabulary = ds.vocabulary;
  d.lexicon = ds.lexicon;
  d.embeddings = ds.embeddings;
  return d;
}

ExperimentData load_experiment_data(const std::filesystem::path& dir, const Logger& log) {
  ExperimentData d;
  d.train = load_pairs(dir / "train_pairs.jsonl", log).pairs;
  d.test = load_pairs(dir / "test_pairs.jsonl", log).pairs;
  d.train_gt = io::load_coco_annotations(dir / "train_gt.json").gt;
  d.test_gt = io::load_coco_annotations(dir / "test_gt.json").gt;
  d.vocabulary = load_vocabulary(dir / "vocab.jsonl");
  if (std::filesystem::exists(dir / "lexicon.json"))
    d.lexicon = io::load_lexicon(dir / "lexicon.json");
  d.embeddings = det::load_embeddings(dir / "embeddings.json");
  return d;
}

ExperimentResult run_experiment(const ExperimentData& data, const ExperimentConfig& config,
                                const Logger& log) {
  ExperimentResult res;
  const auto provider = ProposalProvider::parse(config.proposals);
  const vlm::ToyEncoder encoder(config.model, data.lexicon);
  const ToyAttribution model(encoder);

  res.labels = generate_labels(data.train, data.vocabulary, model, provider,
                               config.workers, log);
  eval::GroundTruthSet used_gt;
  used_gt.base = data.train_gt.base;
  used_gt.novel = data.train_gt.novel;
  for (const auto& p : data.train)
    if (auto it = data.train_gt.images.find(p.pair_id); it != data.train_gt.images.end())
      used_gt.images.insert(*it);
  res.label_quality = eval::pseudo_label_quality(res.labels.labels, used_gt);
  log(summarize(res.labels));

  const auto images = training_images(data.train, targets_from_labels(res.labels.labels),
                                      encoder, provider, config.workers);
  const auto pool = det::build_sample_pool(images, data.embeddings, config.train.negative_iou);
  res.params = det::train(pool, data.embeddings, config.train);

  std::vector<std::string> classes = data.test_gt.base;
  classes.insert(classes.end(), data.test_gt.novel.begin(), data.test_gt.novel.end());
  if (classes.empty()) classes = data.embeddings.categories;

  res.detections = detect(data.test, encoder, provider, classes, res.params, data.embeddings,
                          config.inference, config.workers);
  res.report = eval::generalized_eval(res.detections, data.test_gt);

  if (config.run_finetune) {
    const auto& base = data.train_gt.base;
    const auto gt_images = training_images(
        data.train, targets_from_ground_truth(data.train_gt, base), encoder, provider,
        config.workers);
    const auto gt_pool =
        det::build_sample_pool(gt_images, data.embeddings, config.finetune.negative_iou);
    res.finetuned =
        det::fine_tune(res.params, gt_pool, data.embeddings, base, config.finetune);
    const auto dets = detect(data.test, encoder, provider, classes, *res.finetuned,
                             data.embeddings, config.inference, config.workers);
    res.finetuned_report = eval::generalized_eval(dets, data.test_gt);
  }
  return res;
}

// ---------------------------------------------------------------------------

AblationAxis parse_axis(const std::string& name) {
  if (name == "vocab_size") return AblationAxis::kVocabSize;
  if (name == "proposal_source") return AblationAxis::kProposalSource;
  if (name == "data_amount") return AblationAxis::kDataAmount;
  throw InvalidInput("unknown ablation axis '" + name +
                     "' (expected vocab_size, proposal_source or data_amount)");
}

const char* to_string(AblationAxis axis) {
  switch (axis) {
    case AblationAxis::kVocabSize: return "vocab_size";
    case AblationAxis::kProposalSource: return "proposal_source";
    case AblationAxis::kDataAmount: return "data_amount";
  }
  return "unknown";
}

std::vector<std::string> default_settings(AblationAxis axis) {
  switch (axis) {
    case AblationAxis::kVocabSize: return {"restricted", "full"};
    case AblationAxis::kProposalSource: return {"grid", "region-merge"};
    case AblationAxis::kDataAmount: return {"25%", "100%"};
  }
  return {};
}

namespace {

double parse_percent(const std::string& s) {
  std::string digits = s;
  if (!digits.empty() && digits.back() == '%') digits.pop_back();
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(digits, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != digits.size() || !(v > 0) || v > 100)
    throw InvalidInput("data amount must be a percentage in (0, 100], got '" + s + "'");
  return v / 100.0;
}

void check_setting(AblationAxis axis, const std::string& s) {
  switch (axis) {
    case AblationAxis::kVocabSize:
      if (s != "restricted" && s != "full")
        throw InvalidInput("vocab_size setting must be 'restricted' or 'full', got '" + s + "'");
      break;
    case AblationAxis::kProposalSource:
      ProposalProvider::parse(s);
      break;
    case AblationAxis::kDataAmount:
      parse_percent(s);
      break;
  }
}

}  // namespace

std::vector<AblationRow> run_ablation(const ExperimentData& data, AblationAxis axis,
                                      std::span<const std::string> settings,
                                      const ExperimentConfig& config, const Logger& log) {
  for (const auto& s : settings) check_setting(axis, s);
  std::vector<AblationRow> rows;
  for (const auto& setting : settings) {
    AblationRow row;
    row.axis = to_string(axis);
    row.setting = setting;
    ExperimentData d = data;
    ExperimentConfig c = config;
    try {
      switch (axis) {
        case AblationAxis::kVocabSize:
          if (setting == "restricted") {
            // Half of the base categories stay nameable.
            std::vector<std::string> keep = d.train_gt.base;
            if (keep.empty()) keep = d.vocabulary.categories();
            keep.resize(std::max<std::size_t>(1, keep.size() / 2));
            d.vocabulary = d.vocabulary.restricted(keep);
          }
          break;
        case AblationAxis::kProposalSource:
          c.proposals = setting;
          break;
        case AblationAxis::kDataAmount: {
          const double frac = parse_percent(setting);
          const auto n = static_cast<std::size_t>(
              std::max(1.0, std::round(frac * static_cast<double>(d.train.size()))));
          d.train.resize(std::min(n, d.train.size()));
          break;
        }
      }
      row.vocabulary_size = d.vocabulary.size();
      row.train_pairs = d.train.size();
      log("ablation " + row.axis + "=" + setting + ": " + std::to_string(row.train_pairs) +
          " train pairs, vocabulary " + std::to_string(row.vocabulary_size));
      const auto res = run_experiment(d, c, log);
      row.num_labels = res.labels.labels.size();
      row.label_precision = res.label_quality.overall.precision;
      row.label_recall = res.label_quality.overall.recall;
      row.novel_ap = res.report.novel_map;
      row.base_ap = res.report.base_map;
      row.overall_ap = res.report.overall_map;
    } catch (const std::exception& e) {
      row.error = e.what();
      log("ablation " + row.axis + "=" + setting + " failed: " + row.error);
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

void write_ablation_csv(std::span<const AblationRow> rows, std::ostream& out) {
  out << "axis,setting,vocabulary_size,train_pairs,num_labels,label_precision,"
         "label_recall,novel_ap,base_ap,overall_ap,error\n";
  for (const auto& r : rows) {
    std::string err = r.error;
    std::replace(err.begin(), err.end(), '"', '\'');
    out << r.axis << ',' << r.setting << ',' << r.vocabulary_size << ',' << r.train_pairs
        << ',' << r.num_labels << ',' << fmt_opt(r.label_precision, 4) << ','
        << fmt_opt(r.label_recall, 4) << ',' << fmt_opt(r.novel_ap, 4) << ','
        << fmt_opt(r.base_ap, 4) << ',' << fmt_opt(r.overall_ap, 4) << ','
        << (err.empty() ? "" : "\"" + err + "\"") << '\n';
  }
}

std::string format_ablation(std::span<const AblationRow> rows) {
  std::ostringstream os;
  os << std::left << std::setw(16) << "Setting" << std::setw(8) << "|V|" << std::setw(8)
     << "Pairs" << std::setw(8) << "Labels" << std::setw(10) << "Novel AP" << std::setw(10)
     << "Base AP" << "Overall AP\n";
  for (const auto& r : rows) {
    os << std::setw(16) << r.setting;
    if (!r.error.empty()) {
      os << "failed: " << r.error << '\n';
      continue;
    }
    auto cell = [](const std::optional<double>& v) { return v ? fmt_opt(v) : "-"; };
    os << std::setw(8) << r.vocabulary_size << std::setw(8) << r.train_pairs << std::setw(8)
       << r.num_labels << std::setw(10) << cell(r.novel_ap) << std::setw(10)
       << cell(r.base_ap) << cell(r.overall_ap) << '\n';
  }
  return os.str();
}

}  // namespace capdet::pipeline
