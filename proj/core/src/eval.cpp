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

#include "capdet/eval.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

#include "capdet/error.hpp"

namespace capdet::eval {

using nlohmann::json;

double iou(const Box& a, const Box& b) {
  if (!a.valid() || !b.valid())
    throw InvalidInput("iou of degenerate box " + to_string(a.valid() ? b : a));
  const double iw = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
  const double ih = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

std::size_t GroundTruthSet::num_boxes() const {
  std::size_t n = 0;
  for (const auto& [id, boxes] : images) n += boxes.size();
  return n;
}

void GroundTruthSet::validate() const {
  const std::set<std::string> b(base.begin(), base.end());
  for (const auto& n : novel)
    if (b.contains(n))
      throw InvalidInput("category '" + n + "' is both base and novel");
  if (base.empty() && novel.empty()) return;
  const std::set<std::string> n(novel.begin(), novel.end());
  for (const auto& [id, boxes] : images)
    for (const auto& g : boxes)
      if (!b.contains(g.category) && !n.contains(g.category))
        throw InvalidInput("annotation category '" + g.category + "' in image " +
                           id + " belongs to neither split");
}

ApResult average_precision(std::span<const Detection> detections,
                           const BoxesByImage& ground_truth,
                           double iou_threshold) {
  ApResult out;
  out.num_detections = detections.size();
  for (const auto& [id, boxes] : ground_truth) out.num_gt += boxes.size();

  std::vector<std::size_t> order(detections.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return detections[a].confidence > detections[b].confidence;
  });

  std::map<std::string, std::vector<bool>> used;
  for (const auto& [id, boxes] : ground_truth) used[id].assign(boxes.size(), false);

  std::size_t tp = 0;
  std::size_t fp = 0;
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    const auto& det = detections[order[rank]];
    bool hit = false;
    if (auto it = ground_truth.find(det.image_id); it != ground_truth.end()) {
      auto& taken = used[det.image_id];
      double best = -1;
      std::size_t best_j = 0;
      for (std::size_t j = 0; j < it->second.size(); ++j) {
        if (taken[j]) continue;
        const double o = iou(det.box, it->second[j]);
        if (o >= iou_threshold && o > best) {
          best = o;
          best_j = j;
        }
      }
      if (best >= 0) {
        taken[best_j] = true;
        hit = true;
      }
    }
    hit ? ++tp : ++fp;
    if (out.num_gt > 0)
      out.curve.push_back({static_cast<double>(tp) / static_cast<double>(tp + fp),
                           static_cast<double>(tp) / static_cast<double>(out.num_gt),
                           det.confidence});
  }
  out.true_positives = tp;
  if (out.num_gt == 0) return out;

  // Precision envelope from the right, then sum over recall increments.
  double ap = 0;
  double envelope = 0;
  std::vector<double> env(out.curve.size());
  for (std::size_t i = out.curve.size(); i-- > 0;) {
    envelope = std::max(envelope, out.curve[i].precision);
    env[i] = envelope;
  }
  double prev_recall = 0;
  for (std::size_t i = 0; i < out.curve.size(); ++i) {
    ap += (out.curve[i].recall - prev_recall) * env[i];
    prev_recall = out.curve[i].recall;
  }
  out.ap = ap;
  return out;
}

namespace {

std::optional<double> mean_of(const std::vector<ClassAp>& rows,
                              const std::string& split) {
  double sum = 0;
  std::size_t n = 0;
  for (const auto& r : rows)
    if ((split.empty() || r.split == split) && r.ap) {
      sum += *r.ap;
      ++n;
    }
  if (n == 0) return std::nullopt;
  return sum / static_cast<double>(n);
}

EvalReport evaluate_classes(std::span<const Detection> detections,
                            const GroundTruthSet& gt,
                            const std::vector<std::pair<std::string, std::string>>& classes,
                            double iou_threshold) {
  std::map<std::string, std::vector<Detection>> by_class;
  for (const auto& d : detections) by_class[d.category].push_back(d);
  std::map<std::string, BoxesByImage> gt_by_class;
  for (const auto& [id, boxes] : gt.images)
    for (const auto& g : boxes) gt_by_class[g.category][id].push_back(g.box);

  EvalReport report;
  report.num_images = gt.images.size();
  report.num_gt = gt.num_boxes();
  report.num_detections = detections.size();
  for (const auto& [category, split] : classes) {
    const auto& dets = by_class[category];
    const auto res = average_precision(dets, gt_by_class[category], iou_threshold);
    report.per_class.push_back(
        {category, split, res.ap, res.num_gt, res.num_detections});
  }
  return report;
}

}  // namespace

EvalReport generalized_eval(std::span<const Detection> detections,
                            const GroundTruthSet& gt, double iou_threshold) {
  gt.validate();
  std::vector<std::pair<std::string, std::string>> classes;
  for (const auto& c : gt.base) classes.emplace_back(c, "base");
  for (const auto& c : gt.novel) classes.emplace_back(c, "novel");
  const std::set<std::string> known(
      [&] {
        std::set<std::string> s(gt.base.begin(), gt.base.end());
        s.insert(gt.novel.begin(), gt.novel.end());
        return s;
      }());
  for (const auto& d : detections)
    if (!known.contains(d.category))
      throw InvalidInput("detection category '" + d.category +
                         "' is outside base and novel classes");

  auto report = evaluate_classes(detections, gt, classes, iou_threshold);
  report.novel_map = mean_of(report.per_class, "novel");
  report.base_map = mean_of(report.per_class, "base");
  report.overall_map = mean_of(report.per_class, "");
  return report;
}

EvalReport transfer_eval(std::span<const Detection> detections,
                         const GroundTruthSet& gt,
                         std::span<const std::string> vocabulary,
                         double iou_threshold) {
  const std::set<std::string> vocab(vocabulary.begin(), vocabulary.end());
  for (const auto& d : detections)
    if (!vocab.contains(d.category))
      throw InvalidInput("detection category '" + d.category +
                         "' is not in the evaluation vocabulary");
  for (const auto& [id, boxes] : gt.images)
    for (const auto& g : boxes)
      if (!vocab.contains(g.category))
        throw InvalidInput("ground-truth category '" + g.category +
                           "' is not in the evaluation vocabulary");
  std::vector<std::pair<std::string, std::string>> classes;
  for (const auto& c : vocabulary) classes.emplace_back(c, "all");
  auto report = evaluate_classes(detections, gt, classes, iou_threshold);
  report.overall_map = mean_of(report.per_class, "");
  return report;
}

QualityReport pseudo_label_quality(std::span<const PseudoBoxLabel> labels,
                                   const GroundTruthSet& gt,
                                   double iou_threshold) {
  std::map<std::string, LabelQuality> rows;
  auto row = [&rows](const std::string& c) -> LabelQuality& {
    auto& r = rows[c];
    r.category = c;
    return r;
  };
  for (const auto& [id, boxes] : gt.images)
    for (const auto& g : boxes) ++row(g.category).gt;

  std::map<std::string, std::vector<bool>> recalled;
  for (const auto& [id, boxes] : gt.images) recalled[id].assign(boxes.size(), false);

  for (const auto& l : labels) {
    auto& r = row(l.category);
    ++r.emitted;
    const auto it = gt.images.find(l.pair_id);
    if (it == gt.images.end()) continue;
    bool correct = false;
    for (std::size_t j = 0; j < it->second.size(); ++j) {
      const auto& g = it->second[j];
      if (g.category == l.category && iou(l.box, g.box) >= iou_threshold) {
        correct = true;
        recalled[l.pair_id][j] = true;
      }
    }
    if (correct) ++r.correct;
  }
  for (const auto& [id, boxes] : gt.images)
    for (std::size_t j = 0; j < boxes.size(); ++j)
      if (recalled[id][j]) ++row(boxes[j].category).matched_gt;

  QualityReport out;
  out.overall.category = "all";
  auto finish = [](LabelQuality& q) {
    if (q.emitted > 0)
      q.precision = static_cast<double>(q.correct) / static_cast<double>(q.emitted);
    if (q.gt > 0)
      q.recall = static_cast<double>(q.matched_gt) / static_cast<double>(q.gt);
  };
  for (auto& [c, q] : rows) {
    finish(q);
    out.overall.emitted += q.emitted;
    out.overall.correct += q.correct;
    out.overall.gt += q.gt;
    out.overall.matched_gt += q.matched_gt;
    out.per_category.push_back(q);
  }
  finish(out.overall);
  return out;
}

std::vector<Detection> load_detections(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open detections " + path.string());
  std::vector<Detection> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno);
    try {
      const json j = json::parse(line);
      const auto& b = j.at("box");
      if (!b.is_array() || b.size() != 4)
        throw FormatError(where + ": box must have 4 coordinates");
      Detection d{j.at("image_id").get<std::string>(),
                  j.at("category").get<std::string>(),
                  {b[0].get<double>(), b[1].get<double>(), b[2].get<double>(),
                   b[3].get<double>()},
                  j.at("confidence").get<double>()};
      if (!d.box.valid()) throw FormatError(where + ": degenerate box");
      out.push_back(std::move(d));
    } catch (const json::exception& e) {
      throw FormatError(where + ": " + e.what());
    }
  }
  return out;
}

void save_detections(std::span<const Detection> detections,
                     const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write detections " + path.string());
  for (const auto& d : detections)
    out << json{{"image_id", d.image_id},
                {"category", d.category},
                {"box", {d.box.x_min, d.box.y_min, d.box.x_max, d.box.y_max}},
                {"confidence", d.confidence}}
               .dump()
        << '\n';
}

namespace {

json optional_json(const std::optional<double>& v) {
  return v ? json(*v) : json(nullptr);
}

std::string optional_text(const std::optional<double>& v) {
  if (!v) return "n/a";
  std::ostringstream os;
  os << std::fixed << std::setprecision(3) << *v;
  return os.str();
}

}  // namespace

void save_report_json(const EvalReport& report, const std::filesystem::path& path) {
  json classes = json::array();
  for (const auto& c : report.per_class)
    classes.push_back({{"category", c.category},
                       {"split", c.split},
                       {"ap", optional_json(c.ap)},
                       {"num_gt", c.num_gt},
                       {"num_detections", c.num_detections}});
  const json doc{{"schema", "capdet.eval_report/1"},
                 {"iou_threshold", kIouThreshold},
                 {"novel_ap", optional_json(report.novel_map)},
                 {"base_ap", optional_json(report.base_map)},
                 {"overall_ap", optional_json(report.overall_map)},
                 {"num_images", report.num_images},
                 {"num_gt", report.num_gt},
                 {"num_detections", report.num_detections},
                 {"per_class", std::move(classes)}};
  std::ofstream out(path);
  if (!out) throw IoError("cannot write report " + path.string());
  out << doc.dump(2) << '\n';
}

void save_report_csv(const EvalReport& report, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write report " + path.string());
  out << "category,split,ap,num_gt,num_detections\n";
  out << std::setprecision(17);
  for (const auto& c : report.per_class) {
    out << c.category << ',' << c.split << ',';
    if (c.ap) out << *c.ap;
    out << ',' << c.num_gt << ',' << c.num_detections << '\n';
  }
}

std::string format_report(const EvalReport& report) {
  std::ostringstream os;
  os << std::left << std::setw(10) << "Novel AP" << std::setw(10) << "Base AP"
     << "Overall AP\n";
  os << std::setw(10) << optional_text(report.novel_map) << std::setw(10)
     << optional_text(report.base_map) << optional_text(report.overall_map) << '\n';
  return os.str();
}

}  // namespace capdet::eval
