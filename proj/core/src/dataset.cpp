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

#include "capdet/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <sstream>

#include <json.hpp>

#include "internal.hpp"

namespace capdet::io {

using nlohmann::json;

namespace {

json box_json(const Box& b) { return {b.x_min, b.y_min, b.x_max, b.y_max}; }

Box box_from_json(const json& j, const std::string& where) {
  if (!j.is_array() || j.size() != 4)
    throw FormatError(where + ": box must have 4 coordinates");
  Box b{j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
  if (!b.valid()) throw FormatError(where + ": degenerate box " + to_string(b));
  return b;
}

bool blank(const std::string& line) {
  return line.find_first_not_of(" \t\r") == std::string::npos;
}

json parse_line(const std::string& line, const std::string& where) {
  try {
    return json::parse(line);
  } catch (const json::exception& e) {
    throw FormatError(where + ": " + e.what());
  }
}

}  // namespace

// ---------------------------------------------------------------------------

std::vector<PairRecord> load_pair_records(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open pairs file " + path.string());
  std::vector<PairRecord> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (blank(line)) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno);
    const json j = parse_line(line, where);
    try {
      out.push_back({j.at("pair_id").get<std::string>(),
                     j.at("image_path").get<std::string>(),
                     j.at("caption").get<std::string>()});
    } catch (const json::exception& e) {
      throw FormatError(where + ": " + e.what());
    }
  }
  return out;
}

void save_pair_records(std::span<const PairRecord> records,
                       const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write pairs file " + path.string());
  for (const auto& r : records)
    out << json{{"pair_id", r.pair_id}, {"image_path", r.image_path}, {"caption", r.caption}}
               .dump()
        << '\n';
}

PairReader::PairReader(const std::filesystem::path& path)
    : in_(path), base_dir_(path.parent_path()), path_(path.string()) {
  if (!in_) throw IoError("cannot open pairs file " + path_);
}

std::optional<ImageCaptionPair> PairReader::next() {
  std::string line;
  while (std::getline(in_, line)) {
    ++lineno_;
    if (blank(line)) continue;
    const std::string where = path_ + ":" + std::to_string(lineno_);
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw RecordError("line " + std::to_string(lineno_), where + ": " + e.what());
    }
    std::string id = j.value("pair_id", std::string{});
    try {
      const auto rel = j.at("image_path").get<std::string>();
      ImageCaptionPair pair{j.at("pair_id").get<std::string>(), {},
                            j.at("caption").get<std::string>()};
      if (pair.caption.empty()) throw RecordError(id, where + ": empty caption");
      std::filesystem::path img = rel;
      if (img.is_relative()) img = base_dir_ / img;
      if (!std::filesystem::exists(img))
        throw RecordError(id, where + ": pair " + id + " image missing: " + img.string());
      pair.image = read_ppm(img);
      return pair;
    } catch (const json::exception& e) {
      throw RecordError(id, where + ": " + e.what());
    } catch (const RecordError&) {
      throw;
    } catch (const std::exception& e) {
      throw RecordError(id, where + ": pair " + id + ": " + e.what());
    }
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------

CocoDataset load_coco_annotations(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open annotations " + path.string());
  const std::string where = path.string();
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(where + ": " + e.what());
  }

  CocoDataset out;
  try {
    std::map<std::int64_t, std::string> key_of;
    for (const auto& ji : doc.at("images")) {
      CocoImage img;
      img.id = ji.at("id").get<std::int64_t>();
      img.file_name = ji.value("file_name", std::string{});
      img.width = ji.value("width", 0);
      img.height = ji.value("height", 0);
      if (ji.contains("pair_id")) {
        img.key = ji.at("pair_id").get<std::string>();
      } else if (!img.file_name.empty()) {
        img.key = std::filesystem::path(img.file_name).stem().string();
      } else {
        img.key = std::to_string(img.id);
      }
      if (!key_of.emplace(img.id, img.key).second)
        throw FormatError(where + ": duplicate image id " + std::to_string(img.id));
      out.gt.images[img.key];
      out.images.push_back(std::move(img));
    }

    std::map<std::int64_t, std::string> category_of;
    for (const auto& jc : doc.at("categories")) {
      const auto id = jc.at("id").get<std::int64_t>();
      const auto name = jc.at("name").get<std::string>();
      if (!category_of.emplace(id, name).second)
        throw FormatError(where + ": duplicate category id " + std::to_string(id));
      out.categories.push_back(name);
      const auto split = jc.value("split", std::string{});
      if (split == "base") out.gt.base.push_back(name);
      if (split == "novel") out.gt.novel.push_back(name);
    }

    for (const auto& ja : doc.at("annotations")) {
      const auto ann_id = ja.value("id", std::int64_t{-1});
      const auto cid = ja.at("category_id").get<std::int64_t>();
      const auto cit = category_of.find(cid);
      if (cit == category_of.end())
        throw FormatError(where + ": annotation " + std::to_string(ann_id) +
                          " references unknown category_id " + std::to_string(cid));
      const auto iid = ja.at("image_id").get<std::int64_t>();
      const auto iit = key_of.find(iid);
      if (iit == key_of.end())
        throw FormatError(where + ": annotation " + std::to_string(ann_id) +
                          " references unknown image_id " + std::to_string(iid));
      const auto& bb = ja.at("bbox");
      if (!bb.is_array() || bb.size() != 4)
        throw FormatError(where + ": annotation " + std::to_string(ann_id) +
                          " bbox must be [x, y, w, h]");
      const Box box = box_from_xywh(bb[0].get<double>(), bb[1].get<double>(),
                                    bb[2].get<double>(), bb[3].get<double>());
      if (!box.valid())
        throw FormatError(where + ": annotation " + std::to_string(ann_id) +
                          " has an empty bbox");
      out.gt.images[iit->second].push_back({box, cit->second});
    }
  } catch (const json::exception& e) {
    throw FormatError(where + ": " + e.what());
  }
  return out;
}

void save_coco_annotations(const CocoDataset& dataset,
                           const std::filesystem::path& path) {
  const std::set<std::string> base(dataset.gt.base.begin(), dataset.gt.base.end());
  const std::set<std::string> novel(dataset.gt.novel.begin(), dataset.gt.novel.end());
  json cats = json::array();
  std::map<std::string, int> cat_id;
  for (std::size_t i = 0; i < dataset.categories.size(); ++i) {
    const auto& name = dataset.categories[i];
    cat_id[name] = static_cast<int>(i) + 1;
    json c{{"id", i + 1}, {"name", name}};
    if (base.contains(name)) c["split"] = "base";
    if (novel.contains(name)) c["split"] = "novel";
    cats.push_back(std::move(c));
  }
  json images = json::array();
  json anns = json::array();
  std::int64_t ann_id = 1;
  for (const auto& img : dataset.images) {
    images.push_back({{"id", img.id},
                      {"file_name", img.file_name},
                      {"width", img.width},
                      {"height", img.height},
                      {"pair_id", img.key}});
    const auto it = dataset.gt.images.find(img.key);
    if (it == dataset.gt.images.end()) continue;
    for (const auto& g : it->second) {
      const auto cit = cat_id.find(g.category);
      if (cit == cat_id.end())
        throw InvalidInput("ground-truth category '" + g.category + "' not listed");
      anns.push_back({{"id", ann_id++},
                      {"image_id", img.id},
                      {"category_id", cit->second},
                      {"bbox", {g.box.x_min, g.box.y_min, g.box.width(), g.box.height()}},
                      {"area", g.box.area()},
                      {"iscrowd", 0}});
    }
  }
  std::ofstream out(path);
  if (!out) throw IoError("cannot write annotations " + path.string());
  out << json{{"images", std::move(images)},
              {"annotations", std::move(anns)},
              {"categories", std::move(cats)}}
             .dump()
      << '\n';
}

// ---------------------------------------------------------------------------

void write_pseudo_labels(std::span<const PseudoBoxLabel> labels, std::ostream& out) {
  for (const auto& l : labels)
    out << json{{"pair_id", l.pair_id},
                {"category", l.category},
                {"box", box_json(l.box)},
                {"score", l.score},
                {"token_span", {l.span_start, l.span_end}}}
               .dump()
        << '\n';
}

void save_pseudo_labels(std::vector<PseudoBoxLabel> labels,
                        const std::filesystem::path& path) {
  sort_canonical(labels);
  std::ofstream out(path);
  if (!out) throw IoError("cannot write pseudo labels " + path.string());
  write_pseudo_labels(labels, out);
  if (!out) throw IoError("failed writing pseudo labels " + path.string());
}

std::vector<PseudoBoxLabel> load_pseudo_labels(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open pseudo labels " + path.string());
  std::vector<PseudoBoxLabel> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (blank(line)) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno);
    const json j = parse_line(line, where);
    try {
      PseudoBoxLabel l;
      l.pair_id = j.at("pair_id").get<std::string>();
      l.category = j.at("category").get<std::string>();
      l.box = box_from_json(j.at("box"), where);
      l.score = j.at("score").get<double>();
      const auto& span = j.at("token_span");
      if (!span.is_array() || span.size() != 2)
        throw RecordError(l.pair_id, where + ": token_span must be [start, end]");
      l.span_start = span[0].get<int>();
      l.span_end = span[1].get<int>();
      if (l.span_start < 0 || l.span_end <= l.span_start)
        throw RecordError(l.pair_id, where + ": invalid token_span");
      out.push_back(std::move(l));
    } catch (const json::exception& e) {
      throw RecordError(j.value("pair_id", std::string{}), where + ": " + e.what());
    }
  }
  sort_canonical(out);
  return out;
}

void export_pseudo_labels_coco(std::span<const PseudoBoxLabel> labels,
                               std::span<const CocoImage> images,
                               std::span<const std::string> categories,
                               const std::filesystem::path& path) {
  CocoDataset ds;
  ds.images.assign(images.begin(), images.end());
  ds.categories.assign(categories.begin(), categories.end());
  for (const auto& img : images) ds.gt.images[img.key];
  for (const auto& l : labels) ds.gt.images[l.pair_id].push_back({l.box, l.category});
  save_coco_annotations(ds, path);
}

// ---------------------------------------------------------------------------

const char* to_string(Shape s) {
  switch (s) {
    case Shape::kCircle: return "circle";
    case Shape::kSquare: return "square";
    case Shape::kTriangle: return "triangle";
  }
  return "unknown";
}

Shape parse_shape(const std::string& s) {
  if (s == "circle") return Shape::kCircle;
  if (s == "square") return Shape::kSquare;
  if (s == "triangle") return Shape::kTriangle;
  throw InvalidInput("unknown shape '" + s + "'");
}

std::string SynthCategory::name() const {
  return color_name + " " + to_string(shape);
}

std::vector<SynthCategory> SynthConfig::default_categories() {
  // Corners of the RGB cube: six hues 60 degrees apart plus white and black.
  return {{"red", Shape::kCircle, {255, 0, 0}},
          {"green", Shape::kSquare, {0, 255, 0}},
          {"blue", Shape::kTriangle, {0, 0, 255}},
          {"yellow", Shape::kTriangle, {255, 255, 0}},
          {"white", Shape::kSquare, {255, 255, 255}},
          {"black", Shape::kCircle, {0, 0, 0}},
          {"magenta", Shape::kCircle, {255, 0, 255}},
          {"cyan", Shape::kSquare, {0, 255, 255}}};
}

std::vector<std::string> SynthConfig::category_names() const {
  std::vector<std::string> out;
  for (const auto& c : categories) out.push_back(c.name());
  return out;
}

std::vector<std::string> SynthConfig::base_names() const {
  std::vector<std::string> out;
  for (const auto& c : categories)
    if (std::find(novel.begin(), novel.end(), c.name()) == novel.end())
      out.push_back(c.name());
  return out;
}

void SynthConfig::validate() const {
  if (n_train < 0 || n_test < 0) throw InvalidInput("image counts must be nonnegative");
  if (width < 8 || height < 8) throw InvalidInput("images must be at least 8x8");
  if (categories.empty()) throw InvalidInput("synthetic world needs categories");
  std::set<std::string> names;
  std::set<std::string> colors;
  for (const auto& c : categories) {
    if (!names.insert(c.name()).second)
      throw InvalidInput("duplicate category '" + c.name() + "'");
    if (!colors.insert(c.color_name).second)
      throw InvalidInput("color '" + c.color_name + "' used by two categories");
    if (c.color == Rgb{128, 128, 128})
      throw InvalidInput("category color collides with the background");
  }
  for (const auto& n : novel)
    if (!names.contains(n)) throw InvalidInput("novel category '" + n + "' is unknown");
  if (novel.size() >= categories.size())
    throw InvalidInput("at least one category must be base");
  if (min_objects < 0 || max_objects < min_objects)
    throw InvalidInput("invalid objects-per-image range");
  if (static_cast<std::size_t>(max_objects) > base_names().size())
    throw InvalidInput("max_objects exceeds the number of base categories");
  if (min_size < 3 || max_size < min_size) throw InvalidInput("invalid object size range");
  if (gap < 0) throw InvalidInput("gap must be nonnegative");
  if (templates.empty()) throw InvalidInput("need at least one caption template");
  for (const auto& t : templates)
    if (t.find("{}") == std::string::npos)
      throw InvalidInput("caption template '" + t + "' lacks a {} slot");
  if (position_jitter < 0 || scale_jitter < 0 || scale_jitter >= 1 || color_jitter < 0)
    throw InvalidInput("jitter levels must be in range");
  if (drop_mentions < 0 || drop_mentions > 1)
    throw InvalidInput("drop_mentions must be a probability");
  if (embed_dim < 6)
    throw InvalidInput("embed_dim must be at least 6 to hold the category attributes");
  if (!(embed_gain > 0) || !(shape_weight > 0))
    throw InvalidInput("embed_gain and shape_weight must be positive");
}

SynthConfig synth_config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw InvalidInput(std::string("synth config: ") + e.what());
  }
  if (!j.is_object()) throw InvalidInput("synth config must be a JSON object");
  static const std::set<std::string> known{
      "n_train",     "n_test",          "width",          "height",       "categories",
      "novel",       "min_objects",     "max_objects",    "min_size",     "max_size",
      "gap",         "background_noise", "templates",     "position_jitter",
      "scale_jitter", "color_jitter",   "drop_mentions",  "embed_dim",    "embed_gain",
      "shape_weight", "seed"};
  for (const auto& [key, value] : j.items())
    if (!known.contains(key)) throw InvalidInput("synth config: unknown key '" + key + "'");
  SynthConfig c;
  try {
    c.n_train = j.value("n_train", c.n_train);
    c.n_test = j.value("n_test", c.n_test);
    c.width = j.value("width", c.width);
    c.height = j.value("height", c.height);
    if (j.contains("categories")) {
      c.categories.clear();
      for (const auto& jc : j.at("categories")) {
        const auto rgb = jc.at("color").get<std::vector<int>>();
        if (rgb.size() != 3) throw InvalidInput("category color must be [r, g, b]");
        for (int v : rgb)
          if (v < 0 || v > 255) throw InvalidInput("color components must be 0..255");
        c.categories.push_back({jc.at("color_name").get<std::string>(),
                                parse_shape(jc.at("shape").get<std::string>()),
                                {static_cast<std::uint8_t>(rgb[0]),
                                 static_cast<std::uint8_t>(rgb[1]),
                                 static_cast<std::uint8_t>(rgb[2])}});
      }
    }
    c.novel = j.value("novel", c.novel);
    c.min_objects = j.value("min_objects", c.min_objects);
    c.max_objects = j.value("max_objects", c.max_objects);
    c.min_size = j.value("min_size", c.min_size);
    c.max_size = j.value("max_size", c.max_size);
    c.gap = j.value("gap", c.gap);
    c.background_noise = j.value("background_noise", c.background_noise);
    c.templates = j.value("templates", c.templates);
    c.position_jitter = j.value("position_jitter", c.position_jitter);
    c.scale_jitter = j.value("scale_jitter", c.scale_jitter);
    c.color_jitter = j.value("color_jitter", c.color_jitter);
    c.drop_mentions = j.value("drop_mentions", c.drop_mentions);
    c.embed_dim = j.value("embed_dim", c.embed_dim);
    c.embed_gain = j.value("embed_gain", c.embed_gain);
    c.shape_weight = j.value("shape_weight", c.shape_weight);
    c.seed = j.value("seed", c.seed);
  } catch (const json::exception& e) {
    throw InvalidInput(std::string("synth config: ") + e.what());
  }
  c.validate();
  return c;
}

std::string synth_config_to_json(const SynthConfig& c) {
  json cats = json::array();
  for (const auto& cat : c.categories)
    cats.push_back({{"color_name", cat.color_name},
                    {"shape", to_string(cat.shape)},
                    {"color", {cat.color.r, cat.color.g, cat.color.b}}});
  const json j{{"n_train", c.n_train},
               {"n_test", c.n_test},
               {"width", c.width},
               {"height", c.height},
               {"categories", std::move(cats)},
               {"novel", c.novel},
               {"min_objects", c.min_objects},
               {"max_objects", c.max_objects},
               {"min_size", c.min_size},
               {"max_size", c.max_size},
               {"gap", c.gap},
               {"background_noise", c.background_noise},
               {"templates", c.templates},
               {"position_jitter", c.position_jitter},
               {"scale_jitter", c.scale_jitter},
               {"color_jitter", c.color_jitter},
               {"drop_mentions", c.drop_mentions},
               {"embed_dim", c.embed_dim},
               {"embed_gain", c.embed_gain},
               {"shape_weight", c.shape_weight},
               {"seed", c.seed}};
  return j.dump(2);
}

std::vector<std::string> DatasetManifest::ids(const std::string& which) const {
  std::vector<std::string> out;
  for (const auto& p : pairs)
    if (auto it = split.find(p.pair_id); it != split.end() && it->second == which)
      out.push_back(p.pair_id);
  return out;
}

eval::GroundTruthSet DatasetManifest::ground_truth_for(const std::string& which) const {
  eval::GroundTruthSet gt;
  gt.base = base;
  gt.novel = novel;
  for (const auto& id : ids(which)) {
    auto it = ground_truth.images.find(id);
    gt.images[id] = it == ground_truth.images.end() ? std::vector<eval::GroundTruthBox>{}
                                                     : it->second;
  }
  return gt;
}

ImageCaptionPair SynthDataset::pair(const std::string& pair_id) const {
  for (const auto& p : manifest.pairs)
    if (p.pair_id == pair_id) return {p.pair_id, images.at(pair_id), p.caption};
  throw InvalidInput("unknown pair " + pair_id);
}

vlm::Vector category_attributes(const SynthCategory& category) {
  vlm::Vector a = vlm::Vector::Zero(6);
  a(0) = category.color.r / 255.0 - 0.5;
  a(1) = category.color.g / 255.0 - 0.5;
  a(2) = category.color.b / 255.0 - 0.5;
  a(3 + static_cast<int>(category.shape)) = 1.0;
  return a;
}

namespace {

struct Placed {
  const SynthCategory* category;
  int x0, y0, size;
  double cx, cy;  // continuous centre
};

bool inside(const Placed& p, double px, double py) {
  const double half = p.size / 2.0;
  switch (p.category->shape) {
    case Shape::kCircle: {
      const double dx = px - p.cx, dy = py - p.cy;
      return dx * dx + dy * dy <= half * half;
    }
    case Shape::kSquare:
      return std::abs(px - p.cx) <= half && std::abs(py - p.cy) <= half &&
             px - p.cx < half && py - p.cy < half;
    case Shape::kTriangle: {
      // apex at the top centre, base along the bottom edge
      const double top = p.cy - half;
      const double t = (py - top) / p.size;
      if (t < 0 || t > 1) return false;
      return std::abs(px - p.cx) <= t * half;
    }
  }
  return false;
}

std::string join_mentions(const std::vector<std::string>& m) {
  if (m.empty()) return "a gray background";
  if (m.size() == 1) return m[0];
  std::string s;
  for (std::size_t i = 0; i + 1 < m.size(); ++i) {
    if (i > 0) s += ", ";
    s += m[i];
  }
  return s + " and " + m.back();
}

struct RenderedImage {
  Image image;
  std::string caption;
  std::vector<SynthObject> objects;
};

RenderedImage render_one(const SynthConfig& cfg, std::span<const SynthCategory* const> pool,
                         std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto uniform_int = [&rng](int lo, int hi) {
    return std::uniform_int_distribution<int>(lo, hi)(rng);
  };
  auto uniform = [&rng](double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
  };

  RenderedImage out;
  out.image = Image(cfg.width, cfg.height);
  for (int y = 0; y < cfg.height; ++y)
    for (int x = 0; x < cfg.width; ++x) {
      const int n = cfg.background_noise > 0
                        ? uniform_int(-cfg.background_noise, cfg.background_noise)
                        : 0;
      const auto v = static_cast<std::uint8_t>(std::clamp(128 + n, 0, 255));
      out.image.set(x, y, {v, v, v});
    }

  const int count = uniform_int(cfg.min_objects, cfg.max_objects);
  std::vector<const SynthCategory*> chosen(pool.begin(), pool.end());
  std::shuffle(chosen.begin(), chosen.end(), rng);
  chosen.resize(static_cast<std::size_t>(count));

  std::vector<int> sizes;
  for (std::size_t i = 0; i < chosen.size(); ++i) {
    const int base_half = uniform_int((cfg.min_size - 1) / 2, (cfg.max_size - 1) / 2);
    int size = 2 * base_half + 1;
    if (cfg.scale_jitter > 0) {
      const double scaled = size * (1.0 + uniform(-cfg.scale_jitter, cfg.scale_jitter));
      size = std::max(3, 2 * static_cast<int>(std::lround((scaled - 1) / 2)) + 1);
    }
    if (size + 2 > cfg.width || size + 2 > cfg.height)
      throw InvalidInput("object size does not fit the image");
    sizes.push_back(size);
  }

  // Rejection sampling per object; a dead end restarts the whole layout.
  std::vector<Placed> placed;
  for (int layout = 0; layout < 200 && placed.size() < chosen.size(); ++layout) {
    placed.clear();
    for (std::size_t i = 0; i < chosen.size(); ++i) {
      const int size = sizes[i];
      bool ok = false;
      for (int attempt = 0; attempt < 50 && !ok; ++attempt) {
        const int x0 = uniform_int(1, cfg.width - size - 1);
        const int y0 = uniform_int(1, cfg.height - size - 1);
        ok = std::all_of(placed.begin(), placed.end(), [&](const Placed& p) {
          return x0 + size + cfg.gap <= p.x0 || p.x0 + p.size + cfg.gap <= x0 ||
                 y0 + size + cfg.gap <= p.y0 || p.y0 + p.size + cfg.gap <= y0;
        });
        if (ok) placed.push_back({chosen[i], x0, y0, size, x0 + size / 2.0, y0 + size / 2.0});
      }
      if (!ok) break;
    }
  }
  if (placed.size() < chosen.size())
    throw InvalidInput("cannot pack " + std::to_string(count) + " objects into a " +
                       std::to_string(cfg.width) + "x" + std::to_string(cfg.height) +
                       " image");
  if (cfg.position_jitter > 0)
    for (auto& p : placed) {
      p.cx += uniform(-cfg.position_jitter, cfg.position_jitter);
      p.cy += uniform(-cfg.position_jitter, cfg.position_jitter);
    }

  std::vector<std::string> mentions;
  for (const auto& p : placed) {
    Rgb color = p.category->color;
    if (cfg.color_jitter > 0) {
      auto jitter = [&](std::uint8_t c) {
        const double v = c + uniform(-cfg.color_jitter, cfg.color_jitter) * 255.0;
        return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
      };
      color = {jitter(color.r), jitter(color.g), jitter(color.b)};
    }
    const int pad = static_cast<int>(std::ceil(cfg.position_jitter)) + 1;
    Box bounds{1e9, 1e9, -1e9, -1e9};
    for (int y = std::max(0, p.y0 - pad); y < std::min(cfg.height, p.y0 + p.size + pad); ++y)
      for (int x = std::max(0, p.x0 - pad); x < std::min(cfg.width, p.x0 + p.size + pad); ++x)
        if (inside(p, x + 0.5, y + 0.5)) {
          out.image.set(x, y, color);
          bounds.x_min = std::min(bounds.x_min, double(x));
          bounds.y_min = std::min(bounds.y_min, double(y));
          bounds.x_max = std::max(bounds.x_max, double(x + 1));
          bounds.y_max = std::max(bounds.y_max, double(y + 1));
        }
    const Box analytic{double(p.x0), double(p.y0), double(p.x0 + p.size),
                       double(p.y0 + p.size)};
    out.objects.push_back({p.category->name(), bounds, analytic});
    const bool dropped = cfg.drop_mentions > 0 && uniform(0.0, 1.0) < cfg.drop_mentions;
    if (!dropped) mentions.push_back("a " + p.category->name());
  }

  const auto& tmpl = cfg.templates[static_cast<std::size_t>(
      uniform_int(0, static_cast<int>(cfg.templates.size()) - 1))];
  const auto slot = tmpl.find("{}");
  out.caption = tmpl.substr(0, slot) + join_mentions(mentions) + tmpl.substr(slot + 2);
  return out;
}

}  // namespace

SynthDataset synth_dataset(const SynthConfig& config) {
  config.validate();
  SynthDataset ds;
  ds.config = config;

  const auto names = config.category_names();
  const auto base = config.base_names();
  ds.manifest.categories = names;
  ds.manifest.base = base;
  ds.manifest.novel = config.novel;
  ds.manifest.ground_truth.base = base;
  ds.manifest.ground_truth.novel = config.novel;

  for (const auto& c : config.categories) {
    ds.vocabulary.add({c.name(), {}});
    ds.lexicon[c.color_name] = {c.color.r / 255.0, c.color.g / 255.0, c.color.b / 255.0};
  }

  std::mt19937_64 map_rng(internal::mix_seed(config.seed, 0x656d62));
  // Orthonormal columns keep the embedding geometry well conditioned; the
  // shape columns are damped so color dominates the class embeddings.
  const vlm::Matrix raw = internal::gaussian(map_rng, config.embed_dim, 6, 1.0);
  Eigen::HouseholderQR<vlm::Matrix> qr(raw);
  ds.hidden_map = config.embed_gain *
                  (qr.householderQ() * vlm::Matrix::Identity(config.embed_dim, 6));
  ds.hidden_map.rightCols(3) *= config.shape_weight;
  ds.embeddings.categories = names;
  ds.embeddings.embeddings.resize(static_cast<Eigen::Index>(names.size()), config.embed_dim);
  for (std::size_t i = 0; i < config.categories.size(); ++i)
    ds.embeddings.embeddings.row(static_cast<Eigen::Index>(i)) =
        (ds.hidden_map * category_attributes(config.categories[i])).transpose();
  ds.embeddings.background = vlm::Vector::Zero(config.embed_dim);

  std::vector<const SynthCategory*> base_pool;
  std::vector<const SynthCategory*> all_pool;
  for (const auto& c : ds.config.categories) {
    all_pool.push_back(&c);
    if (std::find(base.begin(), base.end(), c.name()) != base.end()) base_pool.push_back(&c);
  }

  auto emit = [&](const std::string& split, int index, std::span<const SynthCategory* const> pool,
                  std::uint64_t stream) {
    char id[32];
    std::snprintf(id, sizeof id, "%s_%04d", split.c_str(), index);
    auto r = render_one(ds.config, pool,
                        internal::mix_seed(config.seed, stream * 1000003ULL + index));
    ds.manifest.pairs.push_back({id, "images/" + std::string(id) + ".ppm", r.caption});
    ds.manifest.split[id] = split;
    auto& gt = ds.manifest.ground_truth.images[id];
    for (const auto& o : r.objects) gt.push_back({o.box, o.category});
    ds.objects[id] = std::move(r.objects);
    ds.images[id] = std::move(r.image);
  };
  for (int i = 0; i < config.n_train; ++i) emit("train", i, base_pool, 1);
  for (int i = 0; i < config.n_test; ++i) emit("test", i, all_pool, 2);
  return ds;
}

void save_lexicon(const vlm::Lexicon& lexicon, const std::filesystem::path& path) {
  json j = json::object();
  for (const auto& [word, rgb] : lexicon) j[word] = rgb;
  std::ofstream out(path);
  if (!out) throw IoError("cannot write lexicon " + path.string());
  out << j.dump() << '\n';
}

vlm::Lexicon load_lexicon(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open lexicon " + path.string());
  try {
    const json j = json::parse(in);
    vlm::Lexicon lex;
    for (const auto& [word, rgb] : j.items()) lex[word] = rgb.get<std::array<double, 3>>();
    return lex;
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_synth_dataset(const SynthDataset& ds, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir / "images", ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());

  for (const auto& [id, img] : ds.images) write_ppm(img, dir / "images" / (id + ".ppm"));

  for (const std::string split : {"train", "test"}) {
    std::vector<PairRecord> records;
    CocoDataset coco;
    coco.categories = ds.manifest.categories;
    coco.gt = ds.manifest.ground_truth_for(split);
    std::int64_t next_id = 1;
    for (const auto& p : ds.manifest.pairs) {
      if (ds.manifest.split.at(p.pair_id) != split) continue;
      records.push_back(p);
      coco.images.push_back(
          {next_id++, p.pair_id, p.image_path, ds.config.width, ds.config.height});
    }
    save_pair_records(records, dir / (split + "_pairs.jsonl"));
    save_coco_annotations(coco, dir / (split + "_gt.json"));
  }

  save_vocabulary(ds.vocabulary, dir / "vocab.jsonl");
  det::save_embeddings(ds.embeddings, dir / "embeddings.json");
  save_lexicon(ds.lexicon, dir / "lexicon.json");

  json hidden = json::array();
  for (Eigen::Index r = 0; r < ds.hidden_map.rows(); ++r)
    hidden.push_back(std::vector<double>(ds.hidden_map.row(r).begin(), ds.hidden_map.row(r).end()));
  const json manifest{{"schema", "capdet.synth_manifest/1"},
                      {"config", json::parse(synth_config_to_json(ds.config))},
                      {"categories", ds.manifest.categories},
                      {"base", ds.manifest.base},
                      {"novel", ds.manifest.novel},
                      {"train", ds.manifest.ids("train")},
                      {"test", ds.manifest.ids("test")},
                      {"hidden_map", std::move(hidden)}};
  std::ofstream out(dir / "manifest.json");
  if (!out) throw IoError("cannot write manifest in " + dir.string());
  out << manifest.dump(2) << '\n';
}

// ---------------------------------------------------------------------------

namespace {

void draw_rect(Image& img, const Box& b, Rgb color) {
  const int x0 = std::clamp(static_cast<int>(std::lround(b.x_min)), 0, img.width() - 1);
  const int y0 = std::clamp(static_cast<int>(std::lround(b.y_min)), 0, img.height() - 1);
  const int x1 = std::clamp(static_cast<int>(std::lround(b.x_max)) - 1, 0, img.width() - 1);
  const int y1 = std::clamp(static_cast<int>(std::lround(b.y_max)) - 1, 0, img.height() - 1);
  for (int x = x0; x <= x1; ++x) {
    img.set(x, y0, color);
    img.set(x, y1, color);
  }
  for (int y = y0; y <= y1; ++y) {
    img.set(x0, y, color);
    img.set(x1, y, color);
  }
}

}  // namespace

Image render_overlay(const Image& image, const vlm::ActivationMap& map,
                     const ProposalSet& proposals, const std::optional<Box>& selected) {
  if (image.empty()) throw InvalidInput("cannot overlay an empty image");
  Image out = image;
  const auto pixels = upsample_activation(map, image.width(), image.height());
  const double peak = pixels.values.empty()
                          ? 0.0
                          : *std::max_element(pixels.values.begin(), pixels.values.end());
  if (peak > 0) {
    for (int y = 0; y < image.height(); ++y)
      for (int x = 0; x < image.width(); ++x) {
        const double v = pixels.at(x, y);
        if (v < peak / 2) continue;
        const double a = v / peak;
        const Rgb src = image.at(x, y);
        auto blend = [a](std::uint8_t s, std::uint8_t h) {
          return static_cast<std::uint8_t>(std::lround((1 - a) * s + a * h));
        };
        out.set(x, y, {blend(src.r, kHeatColor.r), blend(src.g, kHeatColor.g),
                       blend(src.b, kHeatColor.b)});
      }
  }
  for (const auto& b : proposals.boxes) draw_rect(out, b, kProposalColor);
  if (selected) draw_rect(out, *selected, kSelectedColor);
  return out;
}

void export_overlay(const Image& image, const vlm::ActivationMap& map,
                    const ProposalSet& proposals, const std::optional<Box>& selected,
                    const std::filesystem::path& path) {
  write_ppm(render_overlay(image, map, proposals, selected), path);
}

}  // namespace capdet::io
