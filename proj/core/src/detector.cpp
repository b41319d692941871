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

#include "capdet/detector.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <set>

#include <json.hpp>

#include "capdet/error.hpp"
#include "internal.hpp"

namespace capdet::det {

using nlohmann::json;

std::optional<std::size_t> TextEmbeddingTable::index_of(std::string_view name) const {
  for (std::size_t i = 0; i < categories.size(); ++i)
    if (categories[i] == name) return i;
  return std::nullopt;
}

TextEmbeddingTable TextEmbeddingTable::subset(std::span<const std::string> names) const {
  TextEmbeddingTable out;
  out.embeddings.resize(static_cast<Eigen::Index>(names.size()), dim());
  out.background = background;
  for (std::size_t i = 0; i < names.size(); ++i) {
    const auto k = index_of(names[i]);
    if (!k) throw InvalidInput("category '" + names[i] + "' has no text embedding");
    out.categories.push_back(names[i]);
    out.embeddings.row(static_cast<Eigen::Index>(i)) =
        embeddings.row(static_cast<Eigen::Index>(*k));
  }
  return out;
}

void TextEmbeddingTable::validate() const {
  if (static_cast<std::size_t>(embeddings.rows()) != categories.size())
    throw InvalidInput("embedding rows do not match category count");
  if (background.size() != embeddings.cols())
    throw InvalidInput("background vector dimension mismatch");
  if (!embeddings.allFinite() || !background.allFinite())
    throw InvalidInput("non-finite text embedding");
  const std::set<std::string> unique(categories.begin(), categories.end());
  if (unique.size() != categories.size())
    throw InvalidInput("duplicate category in embedding table");
}

TextEmbeddingTable load_embeddings(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open embeddings " + path.string());
  try {
    const json doc = json::parse(in);
    TextEmbeddingTable t;
    t.categories = doc.at("categories").get<std::vector<std::string>>();
    const auto dim = doc.at("dim").get<Eigen::Index>();
    const auto& vectors = doc.at("vectors");
    if (vectors.size() != t.categories.size())
      throw FormatError(path.string() + ": vectors/categories length mismatch");
    t.embeddings.resize(static_cast<Eigen::Index>(t.categories.size()), dim);
    for (std::size_t i = 0; i < vectors.size(); ++i) {
      const auto v = vectors[i].get<std::vector<double>>();
      if (static_cast<Eigen::Index>(v.size()) != dim)
        throw FormatError(path.string() + ": vector " + std::to_string(i) +
                          " has the wrong dimension");
      for (Eigen::Index c = 0; c < dim; ++c)
        t.embeddings(static_cast<Eigen::Index>(i), c) = v[static_cast<std::size_t>(c)];
    }
    t.background = Vector::Zero(dim);
    if (doc.contains("bg") && !doc.at("bg").is_null()) {
      const auto bg = doc.at("bg").get<std::vector<double>>();
      if (static_cast<Eigen::Index>(bg.size()) != dim)
        throw FormatError(path.string() + ": bg has the wrong dimension");
      for (Eigen::Index c = 0; c < dim; ++c) t.background(c) = bg[static_cast<std::size_t>(c)];
    }
    t.validate();
    return t;
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  } catch (const InvalidInput& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void save_embeddings(const TextEmbeddingTable& table,
                     const std::filesystem::path& path) {
  json vectors = json::array();
  for (Eigen::Index r = 0; r < table.embeddings.rows(); ++r) {
    std::vector<double> v(table.embeddings.row(r).begin(), table.embeddings.row(r).end());
    vectors.push_back(std::move(v));
  }
  const std::vector<double> bg(table.background.begin(), table.background.end());
  const json doc{{"categories", table.categories},
                 {"dim", table.dim()},
                 {"vectors", std::move(vectors)},
                 {"bg", bg}};
  std::ofstream out(path);
  if (!out) throw IoError("cannot write embeddings " + path.string());
  out << doc.dump() << '\n';
}

DetectorParams DetectorParams::initial(Eigen::Index feature_dim,
                                       Eigen::Index embed_dim, std::uint64_t seed) {
  std::mt19937_64 rng(internal::mix_seed(seed, 0x646574));
  DetectorParams p;
  p.projection = internal::gaussian(rng, embed_dim, feature_dim, 0.01);
  p.bias = Vector::Zero(embed_dim);
  p.objectness = internal::gaussian(rng, feature_dim, 1, 0.01);
  p.objectness_bias = 0;
  return p;
}

double DetectorParams::squared_norm() const {
  return projection.squaredNorm() + bias.squaredNorm() + objectness.squaredNorm() +
         objectness_bias * objectness_bias;
}

namespace {

// Footprint of grid cell (i, j); matches the pixel split used by the encoder.
struct CellSpan {
  int lo, hi;
};

CellSpan cell_span(int index, int cells, int extent) {
  const int lo = std::min(index * extent / cells, extent - 1);
  return {lo, std::max(lo + 1, (index + 1) * extent / cells)};
}

// [bg; C], optionally with L2-normalized class rows.
Matrix class_matrix(const TextEmbeddingTable& table, bool l2_normalize) {
  Matrix m(static_cast<Eigen::Index>(table.size()) + 1, table.dim());
  m.row(0) = table.background.transpose();
  m.bottomRows(static_cast<Eigen::Index>(table.size())) = table.embeddings;
  if (l2_normalize)
    for (Eigen::Index r = 1; r < m.rows(); ++r) {
      const double n = m.row(r).norm();
      if (n > 0) m.row(r) /= n;
    }
  return m;
}

Vector softmax(const Vector& z) {
  Vector p = (z.array() - z.maxCoeff()).exp();
  return p / p.sum();
}

Vector embed(const DetectorParams& params, const Vector& pooled, bool l2_normalize) {
  Vector r = params.projection * pooled + params.bias;
  if (l2_normalize) {
    const double n = r.norm();
    if (n > 0) r /= n;
  }
  return r;
}

}  // namespace

Vector pool_region(const vlm::VisualFeatures& features, const Box& box, int width,
                   int height) {
  if (!box.valid()) throw InvalidInput("zero-area box " + to_string(box));
  if (width <= 0 || height <= 0) throw InvalidInput("image size must be positive");
  const auto [gr, gc] = features.grid;
  Vector sum = Vector::Zero(features.values.cols());
  int count = 0;
  for (int i = 0; i < gr; ++i) {
    const auto ys = cell_span(i, gr, height);
    if (!(ys.hi > box.y_min && ys.lo < box.y_max)) continue;
    for (int j = 0; j < gc; ++j) {
      const auto xs = cell_span(j, gc, width);
      if (!(xs.hi > box.x_min && xs.lo < box.x_max)) continue;
      sum += features.values.row(i * gc + j).transpose();
      ++count;
    }
  }
  if (count == 0)
    throw InvalidInput("box " + to_string(box) + " intersects no feature cell");
  return sum / count;
}

RegionEmbedding extract_region_embedding(const vlm::VisualFeatures& features,
                                         const Box& box, int width, int height,
                                         const DetectorParams& params,
                                         bool l2_normalize) {
  const Vector pooled = pool_region(features, box, width, height);
  if (params.projection.cols() != pooled.size())
    throw InvalidInput("detector projection does not match feature dimension");
  return {embed(params, pooled, l2_normalize), box, {}};
}

Vector match_probability(const Vector& r, const TextEmbeddingTable& table) {
  if (r.size() != table.dim())
    throw InvalidInput("region embedding dimension does not match text embeddings");
  return softmax(class_matrix(table, false) * r);
}

LossResult detection_loss(const DetectorParams& params,
                          std::span<const TrainingSample> batch,
                          const TextEmbeddingTable& table, bool l2_normalize) {
  if (batch.empty()) throw InvalidInput("empty batch");
  const Matrix classes = class_matrix(table, l2_normalize);
  const auto n_classes = classes.rows();

  LossResult out;
  out.gradient.projection = Matrix::Zero(params.projection.rows(), params.projection.cols());
  out.gradient.bias = Vector::Zero(params.bias.size());
  out.gradient.objectness = Vector::Zero(params.objectness.size());
  out.gradient.objectness_bias = 0;

  for (const auto& s : batch) {
    if (s.target < 0 || s.target >= n_classes)
      throw InvalidInput("unknown target label " + std::to_string(s.target));
    if (s.pooled.size() != params.projection.cols())
      throw InvalidInput("pooled feature dimension mismatch");

    const Vector raw = params.projection * s.pooled + params.bias;
    Vector r = raw;
    double norm = 1;
    if (l2_normalize) {
      norm = raw.norm();
      if (norm > 0) r = raw / norm;
    }
    const Vector z = classes * r;
    const double mx = z.maxCoeff();
    const double lse = mx + std::log((z.array() - mx).exp().sum());
    out.matching_loss += lse - z(s.target);

    Vector dz = (z.array() - lse).exp();
    dz(s.target) -= 1.0;
    Vector dr = classes.transpose() * dz;
    if (l2_normalize && norm > 0) dr = (dr - r * r.dot(dr)) / norm;
    out.gradient.projection += dr * s.pooled.transpose();
    out.gradient.bias += dr;

    const double o = params.objectness.dot(s.pooled) + params.objectness_bias;
    const double y = s.target > 0 ? 1.0 : 0.0;
    // softplus(o) - y*o, written to avoid overflow
    out.objectness_loss += std::max(o, 0.0) + std::log1p(std::exp(-std::abs(o))) - y * o;
    const double d_o = 1.0 / (1.0 + std::exp(-o)) - y;
    out.gradient.objectness += d_o * s.pooled;
    out.gradient.objectness_bias += d_o;
  }

  const double inv = 1.0 / static_cast<double>(batch.size());
  out.matching_loss *= inv;
  out.objectness_loss *= inv;
  out.loss = out.matching_loss + out.objectness_loss;
  out.gradient.projection *= inv;
  out.gradient.bias *= inv;
  out.gradient.objectness *= inv;
  out.gradient.objectness_bias *= inv;
  return out;
}

TrainConfig TrainConfig::desk() { return {}; }

TrainConfig TrainConfig::desk_finetune() {
  TrainConfig c;
  c.learning_rate = 0.002;
  c.batch_size = 8;
  c.iterations = 500;
  c.milestones = {300, 450};
  return c;
}

TrainConfig TrainConfig::paper_scale() {
  TrainConfig c;
  c.learning_rate = 0.02;
  c.batch_size = 64;
  c.iterations = 150000;
  c.milestones = {60000, 120000};
  c.weight_decay = 1e-4;
  return c;
}

TrainConfig TrainConfig::paper_scale_finetune() {
  TrainConfig c = paper_scale();
  c.learning_rate = 0.0005;
  c.batch_size = 8;
  return c;
}

double TrainConfig::learning_rate_at(int iteration) const {
  double lr = learning_rate;
  for (int m : milestones)
    if (iteration >= m) lr *= decay_factor;
  return lr;
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0)) throw InvalidInput("learning rate must be positive");
  if (batch_size < 1) throw InvalidInput("batch size must be positive");
  if (iterations < 0) throw InvalidInput("iterations must be nonnegative");
  if (!(decay_factor > 0)) throw InvalidInput("decay factor must be positive");
  if (weight_decay < 0) throw InvalidInput("weight decay must be nonnegative");
  if (negative_ratio < 0) throw InvalidInput("negative ratio must be nonnegative");
  for (std::size_t i = 0; i < milestones.size(); ++i) {
    if (milestones[i] <= 0) throw InvalidInput("milestones must be positive");
    if (i > 0 && milestones[i] <= milestones[i - 1])
      throw InvalidInput("milestones must be strictly ascending");
  }
}

SamplePool build_sample_pool(std::span<const TrainingImage> images,
                             const TextEmbeddingTable& table, double negative_iou) {
  SamplePool pool;
  for (const auto& img : images) {
    for (const auto& t : img.targets) {
      const auto k = table.index_of(t.category);
      if (!k)
        throw InvalidInput("target category '" + t.category + "' has no text embedding");
      pool.positives.push_back(
          {pool_region(img.features, t.box, img.width, img.height), static_cast<int>(*k) + 1});
    }
    for (const auto& b : img.proposals.boxes) {
      double best = 0;
      for (const auto& t : img.targets) best = std::max(best, eval::iou(b, t.box));
      if (best < negative_iou)
        pool.negatives.push_back({pool_region(img.features, b, img.width, img.height), 0});
    }
  }
  return pool;
}

namespace {

DetectorParams run_sgd(DetectorParams params, const SamplePool& pool,
                       const TextEmbeddingTable& table, const TrainConfig& config,
                       TrainTrace* trace) {
  std::mt19937_64 rng(internal::mix_seed(config.seed, 0x736764));
  const int n_pos =
      pool.negatives.empty()
          ? config.batch_size
          : std::max(1, static_cast<int>(std::lround(config.batch_size /
                                                     (1.0 + config.negative_ratio))));
  const int n_neg = config.batch_size - n_pos;
  std::uniform_int_distribution<std::size_t> pick_pos(0, pool.positives.size() - 1);
  std::uniform_int_distribution<std::size_t> pick_neg(
      0, pool.negatives.empty() ? 0 : pool.negatives.size() - 1);

  std::vector<TrainingSample> batch;
  batch.reserve(static_cast<std::size_t>(config.batch_size));
  for (int it = 0; it < config.iterations; ++it) {
    batch.clear();
    for (int i = 0; i < n_pos; ++i) batch.push_back(pool.positives[pick_pos(rng)]);
    for (int i = 0; i < n_neg; ++i) batch.push_back(pool.negatives[pick_neg(rng)]);

    const auto res = detection_loss(params, batch, table, config.l2_normalize);
    DetectorParams step = res.gradient;
    step.projection += config.weight_decay * params.projection;
    step.bias += config.weight_decay * params.bias;
    step.objectness += config.weight_decay * params.objectness;
    step.objectness_bias += config.weight_decay * params.objectness_bias;

    const double lr = config.learning_rate_at(it);
    params.projection -= lr * step.projection;
    params.bias -= lr * step.bias;
    params.objectness -= lr * step.objectness;
    params.objectness_bias -= lr * step.objectness_bias;

    if (trace) {
      const double gnorm = std::sqrt(step.squared_norm());
      IterationTrace t{it, lr, res.loss, gnorm, lr * gnorm, {}};
      for (const auto& s : batch) t.targets.push_back(s.target);
      trace->iterations.push_back(std::move(t));
    }
  }
  return params;
}

}  // namespace

DetectorParams train(const SamplePool& pool, const TextEmbeddingTable& table,
                     const TrainConfig& config, TrainTrace* trace) {
  config.validate();
  table.validate();
  if (pool.positives.empty()) throw InvalidInput("no positive training samples");
  const auto feature_dim = pool.positives.front().pooled.size();
  auto params = DetectorParams::initial(feature_dim, table.dim(), config.seed);
  return run_sgd(std::move(params), pool, table, config, trace);
}

DetectorParams fine_tune(DetectorParams params, const SamplePool& pool,
                         const TextEmbeddingTable& table,
                         std::span<const std::string> base_categories,
                         const TrainConfig& config, TrainTrace* trace) {
  config.validate();
  table.validate();
  std::set<int> allowed;
  for (const auto& c : base_categories) {
    const auto k = table.index_of(c);
    if (!k) throw InvalidInput("base category '" + c + "' has no text embedding");
    allowed.insert(static_cast<int>(*k) + 1);
  }
  SamplePool restricted;
  restricted.negatives = pool.negatives;
  for (const auto& s : pool.positives)
    if (allowed.contains(s.target)) restricted.positives.push_back(s);
  if (config.iterations == 0) return params;
  if (restricted.positives.empty())
    throw InvalidInput("no base-class ground truth to fine-tune on");
  return run_sgd(std::move(params), restricted, table, config, trace);
}

std::vector<eval::Detection> nms(std::vector<eval::Detection> detections,
                                 double iou_threshold) {
  std::stable_sort(detections.begin(), detections.end(),
                   [](const eval::Detection& a, const eval::Detection& b) {
                     return a.confidence > b.confidence;
                   });
  std::vector<eval::Detection> kept;
  for (auto& d : detections) {
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const auto& k) {
      return k.category == d.category && k.image_id == d.image_id &&
             eval::iou(k.box, d.box) > iou_threshold;
    });
    if (!suppressed) kept.push_back(std::move(d));
  }
  return kept;
}

std::vector<eval::Detection> infer(const std::string& image_id,
                                   const vlm::VisualFeatures& features, int width,
                                   int height, const ProposalSet& proposals,
                                   std::span<const std::string> class_subset,
                                   const DetectorParams& params,
                                   const TextEmbeddingTable& table,
                                   const InferenceConfig& config) {
  if (class_subset.empty()) throw InvalidInput("empty inference class subset");
  const auto sub = table.subset(class_subset);
  const Matrix classes = class_matrix(sub, config.l2_normalize);

  std::vector<eval::Detection> dets;
  for (const auto& box : proposals.boxes) {
    const Vector pooled = pool_region(features, box, width, height);
    const Vector p = softmax(classes * embed(params, pooled, config.l2_normalize));
    Eigen::Index best = 0;
    for (Eigen::Index k = 1; k < p.size(); ++k)
      if (p(k) > p(best)) best = k;
    if (best == 0 || !(p(best) > config.score_threshold)) continue;
    dets.push_back({image_id, sub.categories[static_cast<std::size_t>(best - 1)], box, p(best)});
  }
  return nms(std::move(dets), config.nms_iou);
}

}  // namespace capdet::det
