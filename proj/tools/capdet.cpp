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

// capdet: pseudo-label generation, detector training and evaluation.
//
// Exit status: 0 success, 1 runtime failure, 2 usage or configuration error.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "capdet/dataset.hpp"
#include "capdet/detector.hpp"
#include "capdet/error.hpp"
#include "capdet/eval.hpp"
#include "capdet/pipeline.hpp"
#include "capdet/proposals.hpp"
#include "capdet/pseudo_label.hpp"
#include "capdet/tensor_import.hpp"
#include "capdet/vocabulary.hpp"
#include "json_config.hpp"

namespace fs = std::filesystem;
using namespace capdet;

namespace {

constexpr int kRuntimeFailure = 1;
constexpr int kUsageError = 2;

// Raised for bad combinations of otherwise well-formed flags.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void log(const std::string& msg) { std::cerr << "capdet: " << msg << '\n'; }

struct Common {
  std::uint64_t seed = 0;
  int workers = 1;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--seed", c.seed, "Seed for every random choice")->capture_default_str();
  sub->add_option("--workers", c.workers, "Worker threads")
      ->check(CLI::Range(1, 64))
      ->capture_default_str();
}

struct ModelOptions {
  std::string model = "toy";
  std::string lexicon;
  int gradcam_layer = 0;
  bool identity_projections = false;
};

void add_model(CLI::App* sub, ModelOptions& m) {
  sub->add_option("--model", m.model, "toy or import:DIR")->capture_default_str();
  sub->add_option("--lexicon", m.lexicon, "Word to RGB anchors for the toy text encoder")
      ->check(CLI::ExistingFile);
  sub->add_option("--gradcam-layer", m.gradcam_layer,
                  "1-based attention layer for Grad-CAM (default: last)");
  sub->add_flag("--identity-projections", m.identity_projections,
                "Use identity attention projections in the toy encoder");
}

vlm::ModelConfig model_config(const ModelOptions& m, std::uint64_t seed) {
  auto c = pipeline::default_model_config(seed);
  c.identity_projections = m.identity_projections;
  if (m.gradcam_layer != 0) c.gradcam_layer = m.gradcam_layer;
  c.validate();
  return c;
}

vlm::Lexicon lexicon_of(const ModelOptions& m) {
  return m.lexicon.empty() ? vlm::Lexicon{} : io::load_lexicon(m.lexicon);
}

std::vector<ImageCaptionPair> read_pairs(const std::string& path) {
  auto load = pipeline::load_pairs(path, log);
  if (load.pairs.empty() && !load.failures.empty())
    throw std::runtime_error("no readable pairs in " + path);
  return std::move(load.pairs);
}

det::TrainConfig preset_config(const std::string& preset, bool finetune) {
  if (preset == "desk")
    return finetune ? det::TrainConfig::desk_finetune() : det::TrainConfig::desk();
  if (preset == "paper-scale")
    return finetune ? det::TrainConfig::paper_scale_finetune()
                    : det::TrainConfig::paper_scale();
  throw UsageError("unknown preset '" + preset + "'");
}

struct TrainOverrides {
  std::string preset = "desk";
  std::optional<int> iterations;
  std::optional<double> learning_rate;
  std::optional<int> batch_size;
};

void add_train_overrides(CLI::App* sub, TrainOverrides& t) {
  sub->add_option("--preset", t.preset, "Training schedule")
      ->check(CLI::IsMember({"desk", "paper-scale"}))
      ->capture_default_str();
  sub->add_option("--iterations", t.iterations, "Override the preset's iteration count");
  sub->add_option("--lr", t.learning_rate, "Override the preset's learning rate");
  sub->add_option("--batch-size", t.batch_size, "Override the preset's batch size");
}

det::TrainConfig train_config(const TrainOverrides& t, bool finetune, std::uint64_t seed) {
  auto c = preset_config(t.preset, finetune);
  c.seed = seed;
  if (t.iterations) {
    // Milestones keep their relative position in the schedule.
    const double scale = c.iterations > 0 ? double(*t.iterations) / c.iterations : 0;
    for (auto& m : c.milestones) m = std::max(1, static_cast<int>(m * scale));
    c.milestones.erase(std::unique(c.milestones.begin(), c.milestones.end()),
                       c.milestones.end());
    c.iterations = *t.iterations;
  }
  if (t.learning_rate) c.learning_rate = *t.learning_rate;
  if (t.batch_size) c.batch_size = *t.batch_size;
  c.validate();
  return c;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

void ensure_parent(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  Common common;
  std::string config;
  std::string out;
  std::optional<double> drop_mentions;
  std::optional<int> n_train;
  std::optional<int> n_test;
};

int run_synth(const SynthArgs& a) {
  io::SynthConfig cfg;
  if (!a.config.empty()) {
    std::ifstream in(a.config);
    if (!in) throw UsageError("cannot read synth config " + a.config);
    std::stringstream ss;
    ss << in.rdbuf();
    cfg = io::synth_config_from_json(ss.str());
  }
  cfg.seed = a.common.seed;
  if (a.drop_mentions) cfg.drop_mentions = *a.drop_mentions;
  if (a.n_train) cfg.n_train = *a.n_train;
  if (a.n_test) cfg.n_test = *a.n_test;
  cfg.validate();
  const auto ds = io::synth_dataset(cfg);
  io::write_synth_dataset(ds, a.out);
  log("wrote " + std::to_string(ds.manifest.pairs.size()) + " pairs to " + a.out);
  return 0;
}

struct LabelArgs {
  Common common;
  ModelOptions model;
  std::string pairs;
  std::string vocab;
  std::string proposals = "region-merge";
  std::string out;
  std::string coco;
  bool to_stdout = false;
};

int run_generate_labels(const LabelArgs& a) {
  if (a.out.empty() && !a.to_stdout) throw UsageError("need --out or --stdout");
  const auto vocab = load_vocabulary(a.vocab);
  if (vocab.empty()) log("warning: vocabulary is empty, no labels will be produced");
  const auto provider = ProposalProvider::parse(a.proposals);
  const auto model =
      pipeline::make_attribution(a.model.model, model_config(a.model, a.common.seed),
                                 lexicon_of(a.model));
  const auto pairs = read_pairs(a.pairs);
  const auto run =
      pipeline::generate_labels(pairs, vocab, *model, provider, a.common.workers, log);
  log(pipeline::summarize(run));

  if (!a.out.empty()) {
    ensure_parent(a.out);
    io::save_pseudo_labels(run.labels, a.out);
  }
  if (a.to_stdout) io::write_pseudo_labels(run.labels, std::cout);
  if (!a.coco.empty()) {
    std::vector<io::CocoImage> images;
    std::int64_t id = 1;
    for (const auto& p : pairs)
      images.push_back({id++, p.pair_id, p.pair_id, p.image.width(), p.image.height()});
    const auto cats = vocab.categories();
    ensure_parent(a.coco);
    io::export_pseudo_labels_coco(run.labels, images, cats, a.coco);
  }
  if (run.pairs_ok == 0 && !pairs.empty()) {
    log("no pair was processed successfully");
    return kRuntimeFailure;
  }
  return 0;
}

struct TrainArgs {
  Common common;
  ModelOptions model;
  TrainOverrides schedule;
  std::string pairs;
  std::string labels;
  std::string embeddings;
  std::string proposals = "region-merge";
  std::string out;
};

int run_train(const TrainArgs& a) {
  const auto cfg = train_config(a.schedule, false, a.common.seed);
  const auto mcfg = model_config(a.model, a.common.seed);
  const auto table = det::load_embeddings(a.embeddings);
  const auto labels = io::load_pseudo_labels(a.labels);
  const auto pairs = read_pairs(a.pairs);
  const auto provider = ProposalProvider::parse(a.proposals);
  const vlm::ToyEncoder encoder(mcfg);

  const auto images = pipeline::training_images(
      pairs, pipeline::targets_from_labels(labels), encoder, provider, a.common.workers);
  const auto pool = det::build_sample_pool(images, table, cfg.negative_iou);
  log(std::to_string(pool.positives.size()) + " positives, " +
      std::to_string(pool.negatives.size()) + " negatives");
  det::TrainTrace trace;
  const auto params = det::train(pool, table, cfg, &trace);
  if (!trace.iterations.empty())
    log("final batch loss " + std::to_string(trace.iterations.back().loss));

  ensure_parent(a.out);
  pipeline::save_checkpoint({params, cfg, mcfg, "train", cfg.iterations, a.common.seed,
                             table.categories},
                            a.out);
  return 0;
}

struct FinetuneArgs {
  Common common;
  TrainOverrides schedule;
  std::string checkpoint;
  std::string pairs;
  std::string gt;
  std::string embeddings;
  std::string proposals = "region-merge";
  std::string out;
};

int run_finetune(const FinetuneArgs& a) {
  auto ck = pipeline::load_checkpoint(a.checkpoint);
  const auto cfg = train_config(a.schedule, true, a.common.seed);
  const auto table = det::load_embeddings(a.embeddings);
  const auto coco = io::load_coco_annotations(a.gt);
  if (coco.gt.base.empty())
    throw UsageError("ground truth " + a.gt + " marks no category as base");
  const auto pairs = read_pairs(a.pairs);
  const auto provider = ProposalProvider::parse(a.proposals);
  const vlm::ToyEncoder encoder(ck.model);

  const auto images = pipeline::training_images(
      pairs, pipeline::targets_from_ground_truth(coco.gt, coco.gt.base), encoder, provider,
      a.common.workers);
  const auto pool = det::build_sample_pool(images, table, cfg.negative_iou);
  ck.params = det::fine_tune(ck.params, pool, table, coco.gt.base, cfg);
  ck.train = cfg;
  ck.stage = "finetune";
  ck.iterations += cfg.iterations;
  ck.seed = a.common.seed;
  ensure_parent(a.out);
  pipeline::save_checkpoint(ck, a.out);
  return 0;
}

struct EvalArgs {
  Common common;
  std::string checkpoint;
  std::string detections;
  std::string pairs;
  std::string gt;
  std::string embeddings;
  std::string proposals = "region-merge";
  std::string out;
  bool transfer = false;
  double score_threshold = 0.05;
};

int run_eval(const EvalArgs& a) {
  if (a.checkpoint.empty() == a.detections.empty())
    throw UsageError("give exactly one of --checkpoint or --detections");
  const auto coco = io::load_coco_annotations(a.gt);
  std::vector<std::string> classes;
  if (a.transfer) {
    classes = coco.categories;
  } else {
    classes = coco.gt.base;
    classes.insert(classes.end(), coco.gt.novel.begin(), coco.gt.novel.end());
    if (classes.empty())
      throw UsageError("ground truth has no base/novel split; use --transfer");
  }

  std::vector<eval::Detection> dets;
  if (!a.detections.empty()) {
    dets = eval::load_detections(a.detections);
  } else {
    if (a.pairs.empty() || a.embeddings.empty())
      throw UsageError("--checkpoint needs --pairs and --embeddings");
    const auto ck = pipeline::load_checkpoint(a.checkpoint);
    const auto table = det::load_embeddings(a.embeddings);
    const auto pairs = read_pairs(a.pairs);
    const auto provider = ProposalProvider::parse(a.proposals);
    const vlm::ToyEncoder encoder(ck.model);
    det::InferenceConfig icfg;
    icfg.score_threshold = a.score_threshold;
    icfg.l2_normalize = ck.train.l2_normalize;
    dets = pipeline::detect(pairs, encoder, provider, classes, ck.params, table, icfg,
                            a.common.workers);
  }

  const auto report = a.transfer ? eval::transfer_eval(dets, coco.gt, classes)
                                 : eval::generalized_eval(dets, coco.gt);
  std::cout << eval::format_report(report);
  if (!a.out.empty()) {
    const fs::path dir = a.out;
    fs::create_directories(dir);
    eval::save_report_json(report, dir / "report.json");
    eval::save_report_csv(report, dir / "report.csv");
    if (a.detections.empty()) eval::save_detections(dets, dir / "detections.jsonl");
  }
  return 0;
}

struct AblateArgs {
  Common common;
  TrainOverrides schedule;
  std::string axis;
  std::string settings;
  std::string data;
  std::string proposals = "region-merge";
  std::string out;
};

int run_ablate(const AblateArgs& a) {
  const auto axis = pipeline::parse_axis(a.axis);
  const auto settings =
      a.settings.empty() ? pipeline::default_settings(axis) : split_list(a.settings);
  pipeline::ExperimentConfig cfg;
  cfg.model = pipeline::default_model_config(a.common.seed);
  cfg.proposals = a.proposals;
  cfg.train = train_config(a.schedule, false, a.common.seed);
  cfg.workers = a.common.workers;
  const auto data = pipeline::load_experiment_data(a.data, log);
  const auto rows = pipeline::run_ablation(data, axis, settings, cfg, log);

  std::cout << pipeline::format_ablation(rows);
  if (!a.out.empty()) {
    ensure_parent(a.out);
    std::ofstream out(a.out);
    if (!out) throw IoError("cannot write " + a.out);
    pipeline::write_ablation_csv(rows, out);
  }
  const bool all_failed = std::all_of(rows.begin(), rows.end(),
                                      [](const auto& r) { return !r.error.empty(); });
  return all_failed ? kRuntimeFailure : 0;
}

struct VisualizeArgs {
  Common common;
  ModelOptions model;
  std::string pairs;
  std::string vocab;
  std::string ids;
  std::string proposals = "region-merge";
  std::string out;
};

int run_visualize(const VisualizeArgs& a) {
  const auto vocab = load_vocabulary(a.vocab);
  const auto provider = ProposalProvider::parse(a.proposals);
  const auto model =
      pipeline::make_attribution(a.model.model, model_config(a.model, a.common.seed),
                                 lexicon_of(a.model));
  const auto pairs = read_pairs(a.pairs);
  std::vector<std::string> wanted = split_list(a.ids);
  if (wanted.empty())
    for (const auto& p : pairs) wanted.push_back(p.pair_id);

  fs::create_directories(a.out);
  std::size_t written = 0;
  for (const auto& id : wanted) {
    const auto it = std::find_if(pairs.begin(), pairs.end(),
                                 [&](const auto& p) { return p.pair_id == id; });
    if (it == pairs.end()) {
      log("warning: pair " + id + " not found");
      continue;
    }
    try {
      const auto mentions = mention_maps(*it, vocab, *model);
      const auto props = provider.proposals(it->pair_id, it->image);
      vlm::ActivationMap map;
      std::optional<Box> selected;
      if (mentions.empty()) {
        log("warning: pair " + id + " mentions no vocabulary object");
        map.grid = {1, 1};
        map.phi = vlm::Vector::Zero(1);
      } else {
        // The first mention is drawn.
        map = mentions.front().map;
        const auto pixels =
            upsample_activation(map, it->image.width(), it->image.height());
        selected = select_box(pixels, props).box;
      }
      io::export_overlay(it->image, map, props, selected, fs::path(a.out) / (id + ".ppm"));
      ++written;
    } catch (const std::exception& e) {
      log("warning: pair " + id + ": " + e.what());
    }
  }
  log("wrote " + std::to_string(written) + " overlays to " + a.out);
  return 0;
}

struct ExportArgs {
  Common common;
  ModelOptions model;
  std::string pairs;
  std::string vocab;
  std::string out;
};

int run_export_tensors(const ExportArgs& a) {
  if (a.model.model != "toy") throw UsageError("export-tensors only exports the toy model");
  const auto vocab = a.vocab.empty() ? ObjectVocabulary{} : load_vocabulary(a.vocab);
  const vlm::ToyEncoder encoder(model_config(a.model, a.common.seed), lexicon_of(a.model));
  const auto pairs = read_pairs(a.pairs);
  fs::create_directories(a.out);
  for (const auto& p : pairs) {
    auto words = tokenize(p.caption);
    for (auto& w : words) w = vocab.canonical_word(w);
    const auto text = encoder.encode_text(ToyAttribution::model_tokens(words));
    const auto visual = encoder.encode_image(p.image);
    const auto result = encoder.forward(text, visual);
    vlm::write_tensors(vlm::from_forward(p.pair_id, text, visual, result),
                       vlm::tensor_path(a.out, p.pair_id));
  }
  log("exported " + std::to_string(pairs.size()) + " tensor records to " + a.out);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Caption-grounded pseudo labels and open-vocabulary detection"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "capdet 0.1.0");
  app.fallthrough();
  app.allow_config_extras(CLI::config_extras_mode::error);
  app.config_formatter(std::make_shared<tools::JsonConfig>(&app));
  app.set_config("--config", "", "JSON file whose keys mirror the subcommand's long flags");

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Render the synthetic shape world");
  s->add_option("--seed", synth.common.seed, "Seed")->capture_default_str();
  s->add_option("--config", synth.config, "Synthetic-world JSON config")
      ->check(CLI::ExistingFile);
  s->add_option("--out", synth.out, "Output directory")->required();
  s->add_option("--drop-mentions", synth.drop_mentions,
                "Probability that a caption omits an object")
      ->check(CLI::Range(0.0, 1.0));
  s->add_option("--n-train", synth.n_train, "Training pairs");
  s->add_option("--n-test", synth.n_test, "Test pairs");

  LabelArgs labels;
  auto* g = app.add_subcommand("generate-labels", "Pseudo box labels from captions");
  add_common(g, labels.common);
  add_model(g, labels.model);
  g->add_option("--pairs", labels.pairs, "Pairs JSON-lines")->required()->check(CLI::ExistingFile);
  g->add_option("--vocab", labels.vocab, "Vocabulary JSON-lines")
      ->required()
      ->check(CLI::ExistingFile);
  g->add_option("--proposals", labels.proposals, "grid, region-merge or file:PATH")
      ->capture_default_str();
  g->add_option("--out", labels.out, "Pseudo-label JSON-lines output");
  g->add_option("--coco", labels.coco, "Also write COCO-style annotations here");
  g->add_flag("--stdout", labels.to_stdout, "Stream labels to stdout");

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Train the detector on pseudo labels");
  add_common(t, train.common);
  add_model(t, train.model);
  add_train_overrides(t, train.schedule);
  t->add_option("--pairs", train.pairs, "Pairs JSON-lines")->required()->check(CLI::ExistingFile);
  t->add_option("--labels", train.labels, "Pseudo-label JSON-lines")
      ->required()
      ->check(CLI::ExistingFile);
  t->add_option("--embeddings", train.embeddings, "Text-embedding table")
      ->required()
      ->check(CLI::ExistingFile);
  t->add_option("--proposals", train.proposals, "grid, region-merge or file:PATH")
      ->capture_default_str();
  t->add_option("--out", train.out, "Checkpoint path")->required();

  FinetuneArgs ft;
  auto* f = app.add_subcommand("finetune", "Fine-tune on base-class ground truth");
  add_common(f, ft.common);
  add_train_overrides(f, ft.schedule);
  f->add_option("--checkpoint", ft.checkpoint, "Checkpoint to start from")
      ->required()
      ->check(CLI::ExistingFile);
  f->add_option("--pairs", ft.pairs, "Pairs JSON-lines")->required()->check(CLI::ExistingFile);
  f->add_option("--gt", ft.gt, "COCO-style ground truth with base/novel split")
      ->required()
      ->check(CLI::ExistingFile);
  f->add_option("--embeddings", ft.embeddings, "Text-embedding table")
      ->required()
      ->check(CLI::ExistingFile);
  f->add_option("--proposals", ft.proposals, "grid, region-merge or file:PATH")
      ->capture_default_str();
  f->add_option("--out", ft.out, "Checkpoint path")->required();

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "AP@0.5 in the generalized or transfer setting");
  add_common(e, ev.common);
  e->add_option("--checkpoint", ev.checkpoint, "Detector checkpoint")
      ->check(CLI::ExistingFile);
  e->add_option("--detections", ev.detections, "Evaluate these detections instead")
      ->check(CLI::ExistingFile);
  e->add_option("--pairs", ev.pairs, "Pairs JSON-lines")->check(CLI::ExistingFile);
  e->add_option("--gt", ev.gt, "COCO-style ground truth")->required()->check(CLI::ExistingFile);
  e->add_option("--embeddings", ev.embeddings, "Text-embedding table")
      ->check(CLI::ExistingFile);
  e->add_option("--proposals", ev.proposals, "grid, region-merge or file:PATH")
      ->capture_default_str();
  e->add_option("--score-threshold", ev.score_threshold, "Minimum detection confidence")
      ->capture_default_str();
  e->add_flag("--transfer", ev.transfer, "Single-vocabulary transfer evaluation");
  e->add_option("--out", ev.out, "Directory for report.json, report.csv, detections");

  AblateArgs ab;
  auto* a = app.add_subcommand("ablate", "Re-run the pipeline along one ablation axis");
  add_common(a, ab.common);
  add_train_overrides(a, ab.schedule);
  a->add_option("--axis", ab.axis, "vocab_size, proposal_source or data_amount")
      ->required()
      ->check(CLI::IsMember({"vocab_size", "proposal_source", "data_amount"}));
  a->add_option("--settings", ab.settings, "Comma-separated settings (axis defaults)");
  a->add_option("--data", ab.data, "Directory written by `capdet synth`")
      ->required()
      ->check(CLI::ExistingDirectory);
  a->add_option("--proposals", ab.proposals, "Proposal source for other axes")
      ->capture_default_str();
  a->add_option("--out", ab.out, "CSV output");

  VisualizeArgs vis;
  auto* v = app.add_subcommand("visualize", "Activation-map overlays");
  add_common(v, vis.common);
  add_model(v, vis.model);
  v->add_option("--pairs", vis.pairs, "Pairs JSON-lines")->required()->check(CLI::ExistingFile);
  v->add_option("--vocab", vis.vocab, "Vocabulary JSON-lines")
      ->required()
      ->check(CLI::ExistingFile);
  v->add_option("--ids", vis.ids, "Comma-separated pair ids (default: all)");
  v->add_option("--proposals", vis.proposals, "grid, region-merge or file:PATH")
      ->capture_default_str();
  v->add_option("--out", vis.out, "Output directory")->required();

  ExportArgs ex;
  auto* x = app.add_subcommand("export-tensors", "Write toy attention tensors for import");
  add_common(x, ex.common);
  add_model(x, ex.model);
  x->add_option("--pairs", ex.pairs, "Pairs JSON-lines")->required()->check(CLI::ExistingFile);
  x->add_option("--vocab", ex.vocab, "Vocabulary used to canonicalize words")
      ->check(CLI::ExistingFile);
  x->add_option("--out", ex.out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& err) {
    return app.exit(err);
  } catch (const CLI::CallForAllHelp& err) {
    return app.exit(err);
  } catch (const CLI::CallForVersion& err) {
    return app.exit(err);
  } catch (const CLI::ParseError& err) {
    app.exit(err);
    return kUsageError;
  }

  try {
    if (*s) return run_synth(synth);
    if (*g) return run_generate_labels(labels);
    if (*t) return run_train(train);
    if (*f) return run_finetune(ft);
    if (*e) return run_eval(ev);
    if (*a) return run_ablate(ab);
    if (*v) return run_visualize(vis);
    if (*x) return run_export_tensors(ex);
  } catch (const UsageError& err) {
    log(err.what());
    return kUsageError;
  } catch (const InvalidInput& err) {
    log(err.what());
    return kUsageError;
  } catch (const std::exception& err) {
    log(err.what());
    return kRuntimeFailure;
  }
  return kUsageError;
}
