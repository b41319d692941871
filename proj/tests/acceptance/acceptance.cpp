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

// One line per acceptance criterion. Exit status is nonzero when any fails.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <capdet/dataset.hpp>
#include <capdet/detector.hpp>
#include <capdet/eval.hpp>
#include <capdet/pipeline.hpp>
#include <capdet/pseudo_label.hpp>
#include <capdet/vlm.hpp>

#include "cli_runner.hpp"
#include "oracles.hpp"

namespace {

namespace fs = std::filesystem;
namespace t = capdet::testing;
using capdet::Box;
using capdet::vlm::Matrix;

// Pinned tolerances and budgets.
constexpr double kFdStep = 1e-4;
constexpr double kGradRelTol = 1e-3;
constexpr double kFixtureTol = 1e-9;
constexpr double kSumTol = 1e-9;
constexpr double kMaxLogit = 1e4;
constexpr double kApOracleTol = 1e-12;
constexpr double kMinLabelPrecision = 0.9;
constexpr double kMinLabelRecall = 0.8;
constexpr double kMinNovelAp = 0.5;
constexpr double kMinBaseAp = 0.8;
constexpr double kLsResidualTol = 1e-6;
constexpr double kGradBudgetS = 30;
constexpr double kSelectBudgetS = 10;
constexpr double kLabelBudgetS = 120;
constexpr double kGeneralizationBudgetS = 300;

struct Outcome {
  bool pass = false;
  std::string detail;
};

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s << std::setprecision(precision) << v;
  return s.str();
}

fs::path work_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("capdet_accept_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void quiet(const std::string&) {}

// ---------------------------------------------------------------------------

Outcome gradient_fidelity() {
  Stopwatch clock;
  std::mt19937_64 rng(2026);
  std::uniform_int_distribution<int> n_text(1, 6), side(1, 4), layers(1, 3), heads(1, 2);
  double worst = 0;
  int checked = 0;
  for (int instance = 0; instance < 20; ++instance) {
    capdet::vlm::ModelConfig cfg;
    cfg.heads = heads(rng);
    cfg.dim = 4 * cfg.heads;
    cfg.layers = layers(rng);
    cfg.gradcam_layer = cfg.layers;
    cfg.grid = {side(rng), side(rng)};
    cfg.seed = 1000 + instance;
    cfg.projection_noise = 0.5;
    capdet::vlm::ToyEncoder enc(cfg);
    const auto text = t::random_text(rng, n_text(rng), cfg.dim);
    const auto vis = t::random_visual(rng, cfg.grid, cfg.dim);
    const auto fwd = enc.forward(text, vis);
    const auto tg = t::to_grid(text.values);
    const auto vg = t::to_grid(vis.values);
    for (int l = 1; l <= cfg.layers; ++l)
      for (int h = 0; h < cfg.heads; ++h) {
        const auto num = t::numeric_gradient(enc.params(), cfg, tg, vg, l, h, kFdStep);
        worst = std::max(worst, t::max_relative_error(fwd.similarity.gradients[l - 1][h], num));
        ++checked;
      }
  }
  const double secs = clock.seconds();
  return {worst < kGradRelTol && secs < kGradBudgetS,
          "20 instances, " + std::to_string(checked) + " attention maps, max rel err " +
              fmt(worst, 3) + " (< " + fmt(kGradRelTol) + "), " + fmt(secs, 3) + " s"};
}

Outcome cross_attention_fixture() {
  capdet::vlm::ModelConfig cfg;
  cfg.dim = 2;
  cfg.heads = 1;
  cfg.layers = 1;
  cfg.gradcam_layer = 1;
  cfg.grid = {1, 2};
  cfg.identity_projections = true;
  capdet::vlm::ToyEncoder enc(cfg);
  Matrix h(2, 2);
  h << 1.0, 0.0,
       0.5, 2.0;
  capdet::vlm::VisualFeatures v{Matrix(2, 2), {1, 2}};
  v.values << 1.0, 2.0,
              3.0, -1.0;
  const auto rec = enc.cross_attention_layer(h, v, 1);

  // softmax(h V^T / sqrt(2)) then A V, written out.
  const double r2 = std::sqrt(2.0);
  const double l[2][2] = {{(1 * 1 + 0 * 2) / r2, (1 * 3 + 0 * -1) / r2},
                          {(0.5 * 1 + 2 * 2) / r2, (0.5 * 3 + 2 * -1) / r2}};
  double a[2][2], hid[2][2];
  for (int i = 0; i < 2; ++i) {
    const double z = std::exp(l[i][0]) + std::exp(l[i][1]);
    a[i][0] = std::exp(l[i][0]) / z;
    a[i][1] = std::exp(l[i][1]) / z;
    hid[i][0] = a[i][0] * 1 + a[i][1] * 3;
    hid[i][1] = a[i][0] * 2 + a[i][1] * -1;
  }
  double worst = 0;
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) {
      worst = std::max(worst, std::abs(rec.attention[0](i, j) - a[i][j]));
      worst = std::max(worst, std::abs(rec.hidden(i, j) - hid[i][j]));
    }
  return {worst <= kFixtureTol, "max |diff| " + fmt(worst, 3) + " (<= " + fmt(kFixtureTol) + ")"};
}

Outcome box_selection_oracle() {
  Stopwatch clock;
  std::mt19937_64 rng(44);
  std::uniform_int_distribution<int> dim(4, 24), count(1, 30), coin(0, 1), small(0, 3);
  std::uniform_real_distribution<double> u(0, 1);
  int agree = 0;
  for (int instance = 0; instance < 100; ++instance) {
    const int w = dim(rng), h = dim(rng);
    capdet::PixelMap phi{w, h, std::vector<double>(static_cast<std::size_t>(w) * h)};
    // Small integer maps make exact score ties common.
    const bool integral = coin(rng) == 1;
    for (auto& v : phi.values) v = integral ? small(rng) : u(rng);
    std::vector<Box> boxes;
    std::uniform_int_distribution<int> xs(0, w), ys(0, h);
    const int k = count(rng);
    while (static_cast<int>(boxes.size()) < k) {
      int x0 = xs(rng), x1 = xs(rng), y0 = ys(rng), y1 = ys(rng);
      if (x0 == x1 || y0 == y1) continue;
      boxes.push_back({double(std::min(x0, x1)), double(std::min(y0, y1)),
                       double(std::max(x0, x1)), double(std::max(y0, y1))});
      if (coin(rng) == 1 && static_cast<int>(boxes.size()) < k) boxes.push_back(boxes.back());
    }
    const auto sel = capdet::select_box(phi, {boxes, capdet::ProposalSource::kLoaded});
    if (sel.index == t::brute_select(phi, boxes)) ++agree;
  }
  const double secs = clock.seconds();
  return {agree == 100 && secs < kSelectBudgetS,
          std::to_string(agree) + "/100 argmax agreements, " + fmt(secs, 3) + " s"};
}

Outcome matching_probability() {
  capdet::det::TextEmbeddingTable table;
  table.categories = {"c1", "c2"};
  table.embeddings = Matrix(2, 2);
  table.embeddings << 1, 0,
                      0, 1;
  table.background = capdet::det::Vector::Zero(2);
  capdet::det::Vector r(2);
  r << 1, 0;
  const auto p = capdet::det::match_probability(r, table);
  const double e = std::numbers::e;
  const double fixture_err = std::max({std::abs(p(1) - e / (e + 2)), std::abs(p(2) - 1 / (e + 2)),
                                       std::abs(p(0) - 1 / (e + 2))});

  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-1, 1);
  double worst_sum = 0;
  bool finite = true;
  for (int trial = 0; trial < 200; ++trial) {
    capdet::det::TextEmbeddingTable big;
    const int n = 1 + trial % 7;
    for (int k = 0; k < n; ++k) big.categories.push_back("c" + std::to_string(k));
    big.embeddings = Matrix(n, 3);
    for (Eigen::Index i = 0; i < big.embeddings.size(); ++i) big.embeddings.data()[i] = u(rng);
    big.background = capdet::det::Vector::Zero(3);
    capdet::det::Vector x(3);
    // Logit magnitude reaches kMaxLogit on the largest trials.
    const double mag = std::pow(10.0, 4.0 * (trial % 50) / 49.0) * kMaxLogit / 1e4;
    for (int i = 0; i < 3; ++i) x(i) = mag * u(rng);
    const auto q = capdet::det::match_probability(x, big);
    finite = finite && q.allFinite() && (q.array() >= 0).all();
    worst_sum = std::max(worst_sum, std::abs(q.sum() - 1));
  }
  return {fixture_err <= kFixtureTol && worst_sum <= kSumTol && finite,
          "p(c1) = " + fmt(p(1), 10) + ", fixture err " + fmt(fixture_err, 3) +
              ", max |sum - 1| " + fmt(worst_sum, 3) + " with logits up to " + fmt(kMaxLogit)};
}

Outcome average_precision_oracle() {
  const capdet::eval::BoxesByImage gt{{"a", {{0, 0, 10, 10}, {20, 20, 30, 30}}}};
  const std::vector<capdet::eval::Detection> ordered{{"a", "x", {0, 0, 10, 10}, 0.9},
                                                     {"a", "x", {40, 40, 50, 50}, 0.8},
                                                     {"a", "x", {20, 20, 30, 30}, 0.7}};
  const double fixture = *capdet::eval::average_precision(ordered, gt).ap;
  const bool fixture_ok = std::abs(fixture - 5.0 / 6.0) <= 1e-15;

  std::mt19937_64 rng(18);
  std::uniform_int_distribution<int> coord(0, 10), side(3, 9), n_det(0, 20), n_gt(1, 10), img(0, 2);
  std::uniform_real_distribution<double> conf(0, 1);
  auto rand_box = [&] {
    const double x = coord(rng), y = coord(rng);
    return Box{x, y, x + side(rng), y + side(rng)};
  };
  double worst = 0;
  for (int instance = 0; instance < 50; ++instance) {
    capdet::eval::BoxesByImage g;
    const int ng = n_gt(rng);
    for (int i = 0; i < ng; ++i) g["im" + std::to_string(img(rng))].push_back(rand_box());
    std::vector<capdet::eval::Detection> d;
    const int nd = n_det(rng);
    for (int i = 0; i < nd; ++i) d.push_back({"im" + std::to_string(img(rng)), "x", rand_box(), conf(rng)});
    const double got = *capdet::eval::average_precision(d, g).ap;
    worst = std::max(worst, std::abs(got - t::brute_ap(d, g, 0.5)));
  }
  return {fixture_ok && worst <= kApOracleTol,
          "fixture " + fmt(fixture, 17) + " vs 5/6, 50 random instances max |diff| " + fmt(worst, 3)};
}

// ---------------------------------------------------------------------------

capdet::io::SynthConfig benchmark_world() {
  capdet::io::SynthConfig cfg;  // 8 categories, 2 novel, zero jitter
  cfg.n_train = 200;
  cfg.n_test = 100;
  cfg.seed = 0;
  return cfg;
}

Outcome pseudo_label_quality() {
  Stopwatch clock;
  const auto ds = capdet::io::synth_dataset(benchmark_world());
  const auto data = capdet::pipeline::experiment_data(ds);
  capdet::ToyAttribution model(
      capdet::vlm::ToyEncoder(capdet::pipeline::default_model_config(0), data.lexicon));
  const auto run = capdet::pipeline::generate_labels(
      data.train, data.vocabulary, model, capdet::ProposalProvider::region_merge(), 1, quiet);
  const auto q = capdet::eval::pseudo_label_quality(run.labels, data.train_gt);
  const double p = q.overall.precision.value_or(0);
  const double r = q.overall.recall.value_or(0);
  const double secs = clock.seconds();
  return {ds.config.categories.size() == 8 && data.train.size() == 200 && p >= kMinLabelPrecision &&
              r >= kMinLabelRecall && secs < kLabelBudgetS,
          std::to_string(run.labels.size()) + " labels on " + std::to_string(data.train.size()) +
              " pairs, precision " + fmt(p) + " (>= " + fmt(kMinLabelPrecision) + "), recall " +
              fmt(r) + " (>= " + fmt(kMinLabelRecall) + "), " + fmt(secs, 3) + " s"};
}

Outcome open_vocabulary_generalization() {
  Stopwatch clock;
  const auto ds = capdet::io::synth_dataset(benchmark_world());

  // Least-squares recovery of the hidden map from the six base classes.
  const auto base = ds.config.base_names();
  Matrix attrs(6, static_cast<Eigen::Index>(base.size()));
  Matrix embeds(ds.embeddings.dim(), static_cast<Eigen::Index>(base.size()));
  for (std::size_t k = 0; k < base.size(); ++k) {
    for (const auto& c : ds.config.categories)
      if (c.name() == base[k]) attrs.col(k) = capdet::io::category_attributes(c);
    embeds.col(k) = ds.embeddings.embeddings.row(*ds.embeddings.index_of(base[k])).transpose();
  }
  const Matrix e_hat = attrs.transpose().colPivHouseholderQr().solve(embeds.transpose()).transpose();
  double residual = (e_hat * attrs - embeds).norm();
  for (const auto& c : ds.config.categories)
    residual = std::max(residual,
                        (e_hat * capdet::io::category_attributes(c) -
                         ds.embeddings.embeddings.row(*ds.embeddings.index_of(c.name())).transpose())
                            .norm());

  capdet::pipeline::ExperimentConfig cfg;
  cfg.run_finetune = true;
  const auto res = capdet::pipeline::run_experiment(capdet::pipeline::experiment_data(ds), cfg, quiet);
  const double novel = res.report.novel_map.value_or(0);
  const double base_ap = res.report.base_map.value_or(0);
  const double ft_base = res.finetuned_report ? res.finetuned_report->base_map.value_or(0) : -1;
  const double secs = clock.seconds();
  return {base.size() == 6 && ds.config.novel.size() == 2 && residual < kLsResidualTol &&
              novel >= kMinNovelAp && base_ap >= kMinBaseAp && ft_base >= base_ap &&
              secs < kGeneralizationBudgetS,
          "LS residual " + fmt(residual, 3) + ", novel mAP " + fmt(novel) + " (>= " +
              fmt(kMinNovelAp) + "), base mAP " + fmt(base_ap) + " (>= " + fmt(kMinBaseAp) +
              "), base after fine-tune " + fmt(ft_base) + ", overall " +
              fmt(res.report.overall_map.value_or(0)) + ", " + fmt(secs, 3) + " s"};
}

// ---------------------------------------------------------------------------

using t::run_cli;

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out(1);
  bool quoted = false;
  for (char c : line) {
    if (c == '"') quoted = !quoted;
    else if (c == ',' && !quoted) out.emplace_back();
    else out.back() += c;
  }
  return out;
}

Outcome ablation_harness() {
  const auto dir = work_dir("ablate");
  const auto world = dir / "world";
  if (run_cli(CAPDET_CLI_PATH, {"synth", "--out", world.string()}, dir / "log").exit_code != 0)
    return {false, "synth failed"};
  std::string detail;
  bool ok = true;
  for (const auto& [axis, expect] :
       std::vector<std::pair<std::string, std::vector<std::string>>>{
           {"vocab_size", {"restricted", "full"}}, {"data_amount", {"25%", "100%"}}}) {
    const auto csv = dir / (axis + ".csv");
    const auto r = run_cli(CAPDET_CLI_PATH,
                           {"ablate", "--axis", axis, "--data", world.string(), "--out", csv.string()},
                           dir / "log");
    std::ifstream in(csv);
    std::string line;
    std::getline(in, line);
    const auto header = split_csv_line(line);
    const bool columns = std::find(header.begin(), header.end(), "novel_ap") != header.end() &&
                         std::find(header.begin(), header.end(), "base_ap") != header.end() &&
                         std::find(header.begin(), header.end(), "overall_ap") != header.end();
    std::vector<std::string> settings;
    bool clean = true;
    std::string aps;
    while (std::getline(in, line)) {
      const auto f = split_csv_line(line);
      if (f.size() != header.size()) {
        clean = false;
        continue;
      }
      settings.push_back(f[1]);
      clean = clean && f.back().empty();
      aps += " " + f[1] + "=" + f[7] + "/" + f[8] + "/" + f[9];
    }
    const bool printed = r.out.find("Novel") != std::string::npos;
    const bool this_ok = r.exit_code == 0 && columns && clean && printed && settings == expect;
    ok = ok && this_ok;
    detail += (detail.empty() ? "" : "; ") + axis + ":" + aps;
  }
  fs::remove_all(dir);
  return {ok, detail + " (novel/base/overall AP)"};
}

Outcome cli_determinism() {
  const auto dir = work_dir("determinism");
  const std::string bin = CAPDET_CLI_PATH;
  std::vector<std::string> failed;
  int commands = 0;

  // Runs the full chain into `root`; the second chain uses more workers.
  auto chain = [&](const fs::path& root, const std::string& workers) {
    const auto w = root / "world";
    const auto s = [&](const std::string& p) { return (root / p).string(); };
    const auto wp = [&](const std::string& p) { return (w / p).string(); };
    const std::vector<std::pair<std::string, std::vector<std::string>>> steps{
        {"synth", {"synth", "--out", w.string(), "--n-train", "40", "--n-test", "20", "--seed", "3"}},
        {"generate-labels",
         {"generate-labels", "--pairs", wp("train_pairs.jsonl"), "--vocab", wp("vocab.jsonl"),
          "--lexicon", wp("lexicon.json"), "--out", s("labels.jsonl"), "--coco", s("labels_coco.json"),
          "--workers", workers, "--seed", "3"}},
        {"export-tensors",
         {"export-tensors", "--pairs", wp("train_pairs.jsonl"), "--vocab", wp("vocab.jsonl"),
          "--lexicon", wp("lexicon.json"), "--out", s("tensors"), "--workers", workers, "--seed", "3"}},
        {"generate-labels (imported tensors)",
         {"generate-labels", "--pairs", wp("train_pairs.jsonl"), "--vocab", wp("vocab.jsonl"),
          "--model", "import:" + s("tensors"), "--out", s("labels_imported.jsonl"), "--workers",
          workers}},
        {"train",
         {"train", "--pairs", wp("train_pairs.jsonl"), "--labels", s("labels.jsonl"), "--embeddings",
          wp("embeddings.json"), "--lexicon", wp("lexicon.json"), "--out", s("model.json"),
          "--iterations", "400", "--workers", workers, "--seed", "3"}},
        {"finetune",
         {"finetune", "--checkpoint", s("model.json"), "--pairs", wp("train_pairs.jsonl"), "--gt",
          wp("train_gt.json"), "--embeddings", wp("embeddings.json"), "--out", s("model_ft.json"),
          "--iterations", "100", "--workers", workers, "--seed", "3"}},
        {"eval",
         {"eval", "--checkpoint", s("model_ft.json"), "--pairs", wp("test_pairs.jsonl"), "--gt",
          wp("test_gt.json"), "--embeddings", wp("embeddings.json"), "--out", s("eval"), "--workers",
          workers}},
        {"ablate",
         {"ablate", "--axis", "proposal_source", "--data", w.string(), "--iterations", "300", "--out",
          s("ablation.csv"), "--workers", workers, "--seed", "3"}},
        {"visualize",
         {"visualize", "--pairs", wp("test_pairs.jsonl"), "--vocab", wp("vocab.jsonl"), "--lexicon",
          wp("lexicon.json"), "--out", s("overlays"), "--workers", workers, "--seed", "3"}},
    };
    std::vector<std::string> outputs;
    for (const auto& [name, args] : steps) {
      const auto r = run_cli(bin, args, root / "log");
      if (r.exit_code != 0) failed.push_back(name + " exited " + std::to_string(r.exit_code));
      outputs.push_back(r.out);
    }
    fs::remove_all(root / "log");
    return outputs;
  };
  // Same location both times so path-bearing records compare equal.
  const auto root = dir / "run";
  const auto out_a = chain(root, "1");
  const auto snap_a = t::snapshot(root);
  fs::remove_all(root);
  const auto out_b = chain(root, "4");
  const auto snap_b = t::snapshot(root);
  commands = static_cast<int>(out_a.size());

  std::vector<std::string> differ;
  for (const auto& [rel, bytes] : snap_a) {
    const auto it = snap_b.find(rel);
    if (it == snap_b.end() || it->second != bytes) differ.push_back(rel);
  }
  if (snap_a.size() != snap_b.size()) differ.push_back("<file set>");
  if (out_a != out_b) differ.push_back("<stdout>");
  fs::remove_all(dir);

  std::string detail = std::to_string(commands) + " commands twice (1 vs 4 workers), " +
                       std::to_string(snap_a.size()) + " files compared";
  for (const auto& f : failed) detail += "; " + f;
  for (std::size_t i = 0; i < std::min<std::size_t>(differ.size(), 5); ++i)
    detail += "; differs: " + differ[i];
  return {failed.empty() && differ.empty() && snap_a.size() > 10, detail};
}

Outcome mention_dropout() {
  const auto dir = work_dir("dropout");
  double recall[2] = {0, 0};
  const char* rates[2] = {"0.0", "0.5"};
  for (int i = 0; i < 2; ++i) {
    const auto w = dir / ("world_" + std::to_string(i));
    const auto labels = dir / ("labels_" + std::to_string(i) + ".jsonl");
    if (run_cli(CAPDET_CLI_PATH, {"synth", "--out", w.string(), "--drop-mentions", rates[i]}, dir / "log")
                .exit_code != 0 ||
        run_cli(CAPDET_CLI_PATH,
                {"generate-labels", "--pairs", (w / "train_pairs.jsonl").string(), "--vocab",
                 (w / "vocab.jsonl").string(), "--lexicon", (w / "lexicon.json").string(), "--out",
                 labels.string()},
                dir / "log")
                .exit_code != 0)
      return {false, std::string("pipeline failed at drop rate ") + rates[i]};
    const auto data = capdet::pipeline::load_experiment_data(w, quiet);
    const auto q = capdet::eval::pseudo_label_quality(capdet::io::load_pseudo_labels(labels), data.train_gt);
    recall[i] = q.overall.recall.value_or(0);
  }
  fs::remove_all(dir);
  return {recall[1] < recall[0],
          "recall " + fmt(recall[0]) + " at 0.0 vs " + fmt(recall[1]) + " at 0.5"};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient fidelity", gradient_fidelity},
      {"cross-attention 2x2 fixture", cross_attention_fixture},
      {"box selection oracle", box_selection_oracle},
      {"matching probability", matching_probability},
      {"average precision oracle", average_precision_oracle},
      {"synthetic pseudo-label quality", pseudo_label_quality},
      {"open-vocabulary generalization", open_vocabulary_generalization},
      {"ablation harness", ablation_harness},
      {"cli determinism", cli_determinism},
      {"mention dropout lowers recall", mention_dropout},
  };
  int failures = 0;
  for (const auto& [name, check] : criteria) {
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    if (!o.pass) ++failures;
    std::cout << (o.pass ? "[PASS] " : "[FAIL] ") << name << ": " << o.detail << std::endl;
  }
  std::cout << (criteria.size() - failures) << "/" << criteria.size() << " criteria passed\n";
  return failures == 0 ? 0 : 1;
}
