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

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include <doctest.h>

#include <capdet/dataset.hpp>
#include <capdet/error.hpp>
#include <capdet/image.hpp>

namespace {

namespace fs = std::filesystem;
using capdet::Box;

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("capdet_io_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write_text(const fs::path& p, const std::string& s) { std::ofstream(p) << s; }

}  // namespace

TEST_SUITE("pairs") {
  TEST_CASE("records round trip byte for byte") {
    const auto dir = scratch("pairs");
    const std::vector<capdet::io::PairRecord> recs{
        {"p1", "images/p1.ppm", "a red circle"},
        {"p2", "images/p2.ppm", "un caf\xc3\xa9 \xe2\x98\x95 and \"quotes\""}};
    capdet::io::save_pair_records(recs, dir / "pairs.jsonl");
    CHECK(capdet::io::load_pair_records(dir / "pairs.jsonl") == recs);

    write_text(dir / "empty.jsonl", "");
    CHECK(capdet::io::load_pair_records(dir / "empty.jsonl").empty());
    capdet::io::PairReader reader(dir / "empty.jsonl");
    CHECK(!reader.next().has_value());
    fs::remove_all(dir);
  }

  TEST_CASE("reader skips past a broken record") {
    const auto dir = scratch("reader");
    fs::create_directories(dir / "img");
    capdet::write_ppm(capdet::Image(4, 3, {1, 2, 3}), dir / "img" / "a.ppm");
    write_text(dir / "pairs.jsonl",
               "{\"pair_id\": \"a\", \"image_path\": \"img/a.ppm\", \"caption\": \"x\"}\n"
               "{\"pair_id\": \"b\", \"image_path\": \"img/missing.ppm\", \"caption\": \"y\"}\n"
               "not json\n"
               "{\"pair_id\": \"c\", \"image_path\": \"img/a.ppm\", \"caption\": \"z\"}\n");
    capdet::io::PairReader reader(dir / "pairs.jsonl");
    CHECK(reader.next()->pair_id == "a");
    CHECK_THROWS_AS(reader.next(), capdet::io::RecordError);
    CHECK_THROWS_AS(reader.next(), capdet::io::RecordError);
    const auto c = reader.next();
    REQUIRE(c.has_value());
    CHECK(c->caption == "z");
    CHECK(c->image.width() == 4);
    CHECK(!reader.next().has_value());
    fs::remove_all(dir);
  }

  TEST_CASE("ppm round trip and ascii variant") {
    const auto dir = scratch("ppm");
    capdet::Image img(3, 2, {9, 8, 7});
    img.set(2, 1, {255, 0, 128});
    capdet::write_ppm(img, dir / "a.ppm");
    CHECK(capdet::read_ppm(dir / "a.ppm") == img);
    write_text(dir / "b.ppm", "P3\n# comment\n2 1\n255\n1 2 3  4 5 6\n");
    const auto b = capdet::read_ppm(dir / "b.ppm");
    CHECK(b.at(1, 0) == capdet::Rgb{4, 5, 6});
    write_text(dir / "c.ppm", "P6\n2 2\n255\nxx");
    CHECK_THROWS_AS(capdet::read_ppm(dir / "c.ppm"), capdet::FormatError);
    fs::remove_all(dir);
  }
}

TEST_SUITE("coco") {
  TEST_CASE("minimal file and bbox convention") {
    const auto dir = scratch("coco");
    write_text(dir / "a.json", R"({
      "images": [{"id": 7, "file_name": "shots/img7.jpg", "width": 100, "height": 80}],
      "annotations": [{"id": 1, "image_id": 7, "category_id": 3, "bbox": [10, 20, 30, 40]}],
      "categories": [{"id": 3, "name": "kite", "split": "novel"}]})");
    const auto ds = capdet::io::load_coco_annotations(dir / "a.json");
    REQUIRE(ds.gt.num_boxes() == 1);
    const auto& g = ds.gt.images.at("img7").front();
    CHECK(g.box == Box{10, 20, 40, 60});
    CHECK(g.category == "kite");
    CHECK(ds.gt.novel == std::vector<std::string>{"kite"});

    capdet::io::save_coco_annotations(ds, dir / "b.json");
    const auto back = capdet::io::load_coco_annotations(dir / "b.json");
    CHECK(back.categories == ds.categories);
    CHECK(back.gt.images.at("img7").front().box == g.box);
    fs::remove_all(dir);
  }

  TEST_CASE("duplicate image ids are rejected") {
    const auto dir = scratch("coco_dup");
    write_text(dir / "a.json", R"({
      "images": [{"id": 1, "file_name": "a.jpg"}, {"id": 1, "file_name": "b.jpg"}],
      "annotations": [], "categories": []})");
    CHECK_THROWS_AS(capdet::io::load_coco_annotations(dir / "a.json"), capdet::FormatError);
    fs::remove_all(dir);
  }
}

TEST_SUITE("pseudo-label files") {
  TEST_CASE("save then load is the identity") {
    const auto dir = scratch("labels");
    std::vector<capdet::PseudoBoxLabel> labels{
        {"b", "cat", {1, 2, 3, 4}, std::numbers::pi, 0, 1},
        {"a", "traffic light", {0.5, 0.25, 10, 12}, std::numeric_limits<double>::min(), 2, 4}};
    capdet::io::save_pseudo_labels(labels, dir / "l.jsonl");
    auto sorted = labels;
    capdet::sort_canonical(sorted);
    CHECK(capdet::io::load_pseudo_labels(dir / "l.jsonl") == sorted);

    capdet::io::save_pseudo_labels({}, dir / "empty.jsonl");
    CHECK(capdet::io::load_pseudo_labels(dir / "empty.jsonl").empty());
    fs::remove_all(dir);
  }
}

TEST_SUITE("synthetic world") {
  TEST_CASE("same seed, same dataset") {
    capdet::io::SynthConfig cfg;
    cfg.n_train = 12;
    cfg.n_test = 6;
    const auto a = capdet::io::synth_dataset(cfg);
    const auto b = capdet::io::synth_dataset(cfg);
    CHECK(a.manifest.pairs == b.manifest.pairs);
    CHECK(a.images == b.images);
    CHECK(a.embeddings == b.embeddings);
    cfg.seed = 1;
    CHECK(capdet::io::synth_dataset(cfg).images != a.images);
  }

  TEST_CASE("zero images") {
    capdet::io::SynthConfig cfg;
    cfg.n_train = cfg.n_test = 0;
    const auto ds = capdet::io::synth_dataset(cfg);
    CHECK(ds.manifest.pairs.empty());
    CHECK(ds.manifest.ground_truth.num_boxes() == 0);
  }

  TEST_CASE("ground truth boxes are the rendered shape bounds") {
    capdet::io::SynthConfig cfg;
    cfg.n_train = 40;
    cfg.n_test = 20;
    const auto ds = capdet::io::synth_dataset(cfg);
    std::map<std::string, capdet::Rgb> color_of;
    for (const auto& c : cfg.categories) color_of[c.name()] = c.color;
    std::set<std::string> train_cats;
    for (const auto& [id, objs] : ds.objects) {
      const auto& img = ds.images.at(id);
      for (const auto& o : objs) {
        CHECK(o.box == o.analytic_box);
        // Scan the raster for the category colour.
        int x0 = img.width(), y0 = img.height(), x1 = 0, y1 = 0;
        for (int y = 0; y < img.height(); ++y)
          for (int x = 0; x < img.width(); ++x)
            if (img.at(x, y) == color_of.at(o.category)) {
              x0 = std::min(x0, x);
              y0 = std::min(y0, y);
              x1 = std::max(x1, x + 1);
              y1 = std::max(y1, y + 1);
            }
        CHECK(o.box == Box{double(x0), double(y0), double(x1), double(y1)});
        if (ds.manifest.split.at(id) == "train") train_cats.insert(o.category);
      }
    }
    for (const auto& n : cfg.novel) CHECK(!train_cats.contains(n));
  }

  TEST_CASE("class embeddings are linearly recoverable from base classes") {
    const auto ds = capdet::io::synth_dataset(capdet::io::SynthConfig{});
    const auto& cfg = ds.config;
    const auto base = cfg.base_names();
    capdet::vlm::Matrix attrs(6, static_cast<Eigen::Index>(base.size()));
    capdet::vlm::Matrix embeds(ds.embeddings.dim(), static_cast<Eigen::Index>(base.size()));
    for (std::size_t k = 0; k < base.size(); ++k) {
      const auto it = std::find_if(cfg.categories.begin(), cfg.categories.end(),
                                   [&](const auto& c) { return c.name() == base[k]; });
      attrs.col(k) = capdet::io::category_attributes(*it);
      embeds.col(k) = ds.embeddings.embeddings.row(*ds.embeddings.index_of(base[k])).transpose();
    }
    Eigen::FullPivLU<capdet::vlm::Matrix> lu(attrs);
    CHECK(lu.rank() == 6);
    // E = Y A^+ from base classes only, then predict the held-out ones.
    const capdet::vlm::Matrix e_hat =
        attrs.transpose().colPivHouseholderQr().solve(embeds.transpose()).transpose();
    CHECK((e_hat * attrs - embeds).norm() < 1e-6);
    for (const auto& c : cfg.categories) {
      const capdet::vlm::Vector truth =
          ds.embeddings.embeddings.row(*ds.embeddings.index_of(c.name())).transpose();
      CHECK((e_hat * capdet::io::category_attributes(c) - truth).norm() < 1e-6);
    }
    CHECK((e_hat - ds.hidden_map).norm() < 1e-6);
  }

  TEST_CASE("dataset directory round trip") {
    const auto dir = scratch("synth");
    capdet::io::SynthConfig cfg;
    cfg.n_train = 5;
    cfg.n_test = 3;
    const auto ds = capdet::io::synth_dataset(cfg);
    capdet::io::write_synth_dataset(ds, dir);
    for (const char* f : {"manifest.json", "vocab.jsonl", "embeddings.json", "lexicon.json",
                          "train_pairs.jsonl", "test_pairs.jsonl", "train_gt.json", "test_gt.json"})
      CHECK(fs::exists(dir / f));
    CHECK(capdet::det::load_embeddings(dir / "embeddings.json") == ds.embeddings);
    CHECK(capdet::io::load_lexicon(dir / "lexicon.json") == ds.lexicon);
    const auto coco = capdet::io::load_coco_annotations(dir / "test_gt.json");
    CHECK(coco.gt.num_boxes() == ds.manifest.ground_truth_for("test").num_boxes());
    CHECK(capdet::io::synth_config_from_json(capdet::io::synth_config_to_json(cfg)).n_train == 5);
    fs::remove_all(dir);
  }

  TEST_CASE("invalid configurations") {
    capdet::io::SynthConfig cfg;
    cfg.novel = {"purple hexagon"};
    CHECK_THROWS_AS(capdet::io::synth_dataset(cfg), capdet::InvalidInput);
    CHECK_THROWS(capdet::io::synth_config_from_json(R"({"n_train": -1})"));
    CHECK_THROWS(capdet::io::synth_config_from_json(R"({"n_trian": 3})"));
  }
}

TEST_SUITE("overlay") {
  TEST_CASE("half-max rule and peak opacity") {
    const capdet::Image img(16, 16, {10, 20, 30});
    capdet::vlm::ActivationMap m;
    m.grid = {2, 2};
    m.phi = capdet::vlm::Vector::Zero(4);
    const capdet::ProposalSet none;

    const auto blank = capdet::io::render_overlay(img, m, none, std::nullopt);
    CHECK(blank == img);

    m.phi(3) = 2.0;
    const auto out = capdet::io::render_overlay(img, m, none, std::nullopt);
    CHECK(out.width() == 16);
    CHECK(out.height() == 16);
    CHECK(out.at(15, 15) == capdet::io::kHeatColor);
    const auto px = capdet::upsample_activation(m, 16, 16);
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x)
        if (px.at(x, y) < 1.0) CHECK(out.at(x, y) == img.at(x, y));
  }
}
