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

#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include <doctest.h>

#include <capdet/error.hpp>
#include <capdet/image.hpp>
#include <capdet/tensor_import.hpp>
#include <capdet/vlm.hpp>

#include "oracles.hpp"

namespace {

using capdet::vlm::GridShape;
using capdet::vlm::Matrix;
using capdet::vlm::ModelConfig;
using capdet::vlm::ToyEncoder;

ModelConfig small_config(int dim, int layers, int heads, GridShape grid,
                         std::uint64_t seed, bool identity = false) {
  ModelConfig cfg;
  cfg.dim = dim;
  cfg.layers = layers;
  cfg.heads = heads;
  cfg.grid = grid;
  cfg.gradcam_layer = layers;
  cfg.seed = seed;
  cfg.identity_projections = identity;
  return cfg;
}

capdet::Image checker(int w, int h) {
  capdet::Image img(w, h, {40, 40, 40});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if ((x / 8 + y / 8) % 2 == 0) img.set(x, y, {200, static_cast<std::uint8_t>(x * 4), 30});
  return img;
}

}  // namespace

TEST_CASE("encode_image is deterministic and shaped by the grid") {
  ToyEncoder enc(small_config(8, 1, 2, {4, 4}, 3));
  const auto img = checker(32, 32);
  const auto a = enc.encode_image(img);
  const auto b = enc.encode_image(img);
  CHECK(a.values.rows() == 16);
  CHECK(a.values.cols() == 8);
  CHECK(a.values == b.values);
}

TEST_CASE("uniform image differs across cells only through position terms") {
  ToyEncoder enc(small_config(8, 1, 2, {3, 3}, 5));
  const auto v = enc.encode_image(capdet::Image(30, 30, {10, 120, 250}));
  const auto& pos = enc.params().position_map;
  Matrix color_part(v.values.rows(), v.values.cols());
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      const double u = (i + 0.5) / 3;
      const double w = (j + 0.5) / 3;
      const Eigen::Vector4d p(std::sin(std::numbers::pi * u), std::cos(std::numbers::pi * u),
                              std::sin(std::numbers::pi * w), std::cos(std::numbers::pi * w));
      color_part.row(i * 3 + j) = v.values.row(i * 3 + j) - (pos * p).transpose();
    }
  for (Eigen::Index r = 1; r < color_part.rows(); ++r)
    CHECK((color_part.row(r) - color_part.row(0)).norm() < 1e-12);
}

TEST_CASE("encode_text rows follow tokens") {
  ToyEncoder enc(small_config(8, 1, 2, {2, 2}, 1));
  const std::vector<std::string> three{"[CLS]", "cat", "[SEP]"};
  CHECK(enc.encode_text(three).values.rows() == 3);

  const std::vector<std::string> rep{"cat", "cat"};
  const auto t = enc.encode_text(rep);
  CHECK(t.values.row(0) == t.values.row(1));

  const std::vector<std::string> vocab{"cat", "dog", "red", "blue", "circle", "square",
                                       "triangle", "a", "the", "[CLS]", "[SEP]"};
  const auto all = enc.encode_text(vocab);
  for (Eigen::Index i = 0; i < all.values.rows(); ++i)
    for (Eigen::Index j = i + 1; j < all.values.rows(); ++j)
      CHECK((all.values.row(i) - all.values.row(j)).norm() > 1e-6);

  CHECK_THROWS_AS(enc.encode_text(std::vector<std::string>{}), capdet::InvalidInput);
}

TEST_CASE("cross attention degenerate cases") {
  ToyEncoder enc(small_config(4, 1, 1, {1, 1}, 2));
  std::mt19937_64 rng(11);
  const auto text = capdet::testing::random_text(rng, 3, 4);

  SUBCASE("single region gets all attention") {
    const auto vis = capdet::testing::random_visual(rng, {1, 1}, 4);
    const auto rec = enc.cross_attention_layer(text.values, vis, 1);
    CHECK(rec.attention[0].rows() == 3);
    CHECK(rec.attention[0].cols() == 1);
    CHECK((rec.attention[0].array() == 1.0).all());
    const Eigen::RowVectorXd expect =
        vis.values.row(0) * enc.params().layers[0].value * enc.params().layers[0].output;
    for (int t = 0; t < 3; ++t) CHECK((rec.hidden.row(t) - expect).norm() < 1e-12);
  }

  SUBCASE("identical regions give a uniform row") {
    capdet::vlm::VisualFeatures vis{Matrix(5, 4), {1, 5}};
    for (int r = 0; r < 5; ++r) vis.values.row(r) << 0.3, -1.0, 2.0, 0.5;
    const auto rec = enc.cross_attention_layer(text.values, vis, 1);
    CHECK((rec.attention[0].array() - 0.2).abs().maxCoeff() < 1e-15);
  }

  SUBCASE("bad layer index") {
    const auto vis = capdet::testing::random_visual(rng, {1, 1}, 4);
    CHECK_THROWS_AS(enc.cross_attention_layer(text.values, vis, 2), capdet::InvalidInput);
  }
}

TEST_CASE("2x2 cross attention against a hand computation") {
  ToyEncoder enc(small_config(2, 1, 1, {1, 2}, 0, true));
  Matrix h(2, 2);
  h << 1.0, 0.0,
       0.5, 2.0;
  capdet::vlm::VisualFeatures vis{Matrix(2, 2), {1, 2}};
  vis.values << 1.0, 2.0,
                3.0, -1.0;
  const auto rec = enc.cross_attention_layer(h, vis, 1);

  // logits = h V^T / sqrt(2)
  const double r = std::sqrt(2.0);
  const double z00 = 1.0 / r, z01 = 3.0 / r;
  const double z10 = (0.5 + 4.0) / r, z11 = (1.5 - 2.0) / r;
  const double a00 = std::exp(z00) / (std::exp(z00) + std::exp(z01));
  const double a10 = std::exp(z10) / (std::exp(z10) + std::exp(z11));
  CHECK(rec.attention[0](0, 0) == doctest::Approx(a00).epsilon(1e-12));
  CHECK(rec.attention[0](0, 1) == doctest::Approx(1 - a00).epsilon(1e-12));
  CHECK(rec.attention[0](1, 0) == doctest::Approx(a10).epsilon(1e-12));
  CHECK(rec.attention[0](1, 1) == doctest::Approx(1 - a10).epsilon(1e-12));
  CHECK(std::abs(rec.hidden(0, 0) - (a00 * 1 + (1 - a00) * 3)) < 1e-12);
  CHECK(std::abs(rec.hidden(0, 1) - (a00 * 2 + (1 - a00) * -1)) < 1e-12);
  CHECK(std::abs(rec.hidden(1, 0) - (a10 * 1 + (1 - a10) * 3)) < 1e-12);
  CHECK(std::abs(rec.hidden(1, 1) - (a10 * 2 + (1 - a10) * -1)) < 1e-12);
}

TEST_CASE("analytic gradient agrees with loop-level finite differences") {
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    std::mt19937_64 rng(100 + seed);
    const int layers = 1 + static_cast<int>(seed % 3);
    const int heads = 1 + static_cast<int>(seed % 2);
    const GridShape grid{2 + static_cast<int>(seed % 2), 3};
    auto cfg = small_config(4 * heads, layers, heads, grid, seed);
    ToyEncoder enc(cfg);
    const auto text = capdet::testing::random_text(rng, 4, cfg.dim);
    const auto vis = capdet::testing::random_visual(rng, grid, cfg.dim);
    const auto fwd = enc.forward(text, vis);

    const auto tg = capdet::testing::to_grid(text.values);
    const auto vg = capdet::testing::to_grid(vis.values);
    CHECK(fwd.similarity.value ==
          doctest::Approx(capdet::testing::reference_similarity(enc.params(), cfg, tg, vg))
              .epsilon(1e-12));
    for (int l = 1; l <= layers; ++l)
      for (int hd = 0; hd < heads; ++hd) {
        const auto num = capdet::testing::numeric_gradient(enc.params(), cfg, tg, vg, l, hd, 1e-4);
        CHECK(capdet::testing::max_relative_error(fwd.similarity.gradients[l - 1][hd], num) < 1e-3);
        const Matrix lib = capdet::vlm::finite_diff_grad(enc, text, vis, l, hd, 1e-4);
        CHECK((lib - fwd.similarity.gradients[l - 1][hd]).cwiseAbs().maxCoeff() < 1e-6);
      }
  }
}

TEST_CASE("gradient properties") {
  std::mt19937_64 rng(7);
  auto cfg = small_config(4, 2, 2, {2, 2}, 9);
  ToyEncoder enc(cfg);
  const auto text = capdet::testing::random_text(rng, 3, 4);
  const auto vis = capdet::testing::random_visual(rng, {2, 2}, 4);
  const auto base = enc.forward(text, vis);

  SUBCASE("doubling the readout doubles s and every gradient") {
    auto p = enc.params();
    p.readout *= 2;
    ToyEncoder twice(cfg, p);
    const auto f = twice.forward(text, vis);
    CHECK(f.similarity.value == doctest::Approx(2 * base.similarity.value).epsilon(1e-12));
    for (int l = 0; l < 2; ++l)
      for (int h = 0; h < 2; ++h)
        CHECK((f.similarity.gradients[l][h] - 2 * base.similarity.gradients[l][h])
                  .cwiseAbs().maxCoeff() < 1e-12);
  }

  SUBCASE("permuting cells permutes attention and gradient columns") {
    const std::vector<int> perm{2, 0, 3, 1};
    auto shuffled = vis;
    for (int i = 0; i < 4; ++i) shuffled.values.row(i) = vis.values.row(perm[i]);
    const auto f = enc.forward(text, shuffled);
    for (int l = 0; l < 2; ++l)
      for (int h = 0; h < 2; ++h)
        for (int i = 0; i < 4; ++i) {
          CHECK((f.layers[l].attention[h].col(i) - base.layers[l].attention[h].col(perm[i]))
                    .cwiseAbs().maxCoeff() < 1e-12);
          CHECK((f.similarity.gradients[l][h].col(i) -
                 base.similarity.gradients[l][h].col(perm[i]))
                    .cwiseAbs().maxCoeff() < 1e-12);
        }
  }

  SUBCASE("zero readout gives zero numeric gradient") {
    auto p = enc.params();
    p.readout.setZero();
    ToyEncoder flat(cfg, p);
    const Matrix g = capdet::vlm::finite_diff_grad(flat, text, vis, 1, 0, 1e-4);
    CHECK(g.cwiseAbs().maxCoeff() == 0.0);
  }

  SUBCASE("one linear layer: central differences are exact up to rounding") {
    auto one = small_config(4, 1, 1, {2, 2}, 4, true);
    ToyEncoder lin(one);
    const auto f = lin.forward(text, vis);
    const Matrix g = capdet::vlm::finite_diff_grad(lin, text, vis, 1, 0, 1e-4);
    CHECK((g - f.similarity.gradients[0][0]).cwiseAbs().maxCoeff() < 10 * 1e-8);
  }
}

TEST_CASE("grad_cam clamps and weights by attention") {
  capdet::vlm::AttentionRecord rec;
  rec.layer = 1;
  Matrix a(2, 4);
  a << 0.1, 0.2, 0.3, 0.4,
       0.25, 0.25, 0.25, 0.25;
  rec.attention = {a};

  SUBCASE("negative gradients vanish") {
    const std::vector<Matrix> g{Matrix::Constant(2, 4, -0.5)};
    const auto m = capdet::vlm::grad_cam(rec, g, 0, {2, 2});
    CHECK(m.phi.cwiseAbs().maxCoeff() == 0.0);
  }
  SUBCASE("unit gradient returns the attention row") {
    const std::vector<Matrix> g{Matrix::Ones(2, 4)};
    const auto m = capdet::vlm::grad_cam(rec, g, 0, {2, 2});
    CHECK((m.phi - a.row(0).transpose()).norm() == 0.0);
  }
  SUBCASE("token out of range") {
    const std::vector<Matrix> g{Matrix::Ones(2, 4)};
    CHECK_THROWS_AS(capdet::vlm::grad_cam(rec, g, 2, {2, 2}), capdet::InvalidInput);
  }
}

TEST_CASE("grad_cam on a random one-layer model matches finite-difference weights") {
  std::mt19937_64 rng(31);
  auto cfg = small_config(4, 1, 2, {3, 3}, 12);
  ToyEncoder enc(cfg);
  const auto text = capdet::testing::random_text(rng, 5, 4);
  const auto vis = capdet::testing::random_visual(rng, {3, 3}, 4);
  const auto fwd = enc.forward(text, vis);
  const auto tg = capdet::testing::to_grid(text.values);
  const auto vg = capdet::testing::to_grid(vis.values);
  std::vector<capdet::testing::Grid> num;
  for (int h = 0; h < 2; ++h)
    num.push_back(capdet::testing::numeric_gradient(enc.params(), cfg, tg, vg, 1, h, 1e-4));
  for (int t = 0; t < 5; ++t) {
    const auto m = capdet::vlm::grad_cam(fwd, cfg, t);
    for (int j = 0; j < 9; ++j) {
      double expect = 0;
      for (int h = 0; h < 2; ++h)
        expect += fwd.layers[0].attention[h](t, j) * std::max(num[h][t][j], 0.0);
      expect /= 2;
      CHECK(std::abs(m.phi(j) - expect) <= 1e-3 * std::max(std::abs(expect), 1e-8));
    }
  }
}

TEST_CASE("exported tensors reproduce the in-memory Grad-CAM") {
  std::mt19937_64 rng(5);
  auto cfg = small_config(4, 2, 2, {2, 3}, 8);
  ToyEncoder enc(cfg);
  auto text = capdet::testing::random_text(rng, 4, 4);
  const auto vis = capdet::testing::random_visual(rng, {2, 3}, 4);
  const auto fwd = enc.forward(text, vis);
  const auto tensors = capdet::vlm::from_forward("p0", text, vis, fwd);

  const auto dir = std::filesystem::temp_directory_path() / "capdet_vlm_test";
  std::filesystem::create_directories(dir);
  const auto path = capdet::vlm::tensor_path(dir, "p0");
  capdet::vlm::write_tensors(tensors, path);
  const auto back = capdet::vlm::read_tensors(path);
  CHECK(back.tokens == text.tokens);
  CHECK(back.grid == cfg.grid);
  for (int t = 0; t < 4; ++t) {
    const auto a = capdet::vlm::grad_cam(fwd, cfg, t);
    const auto b = capdet::vlm::grad_cam(back, 2, t);
    CHECK((a.phi - b.phi).cwiseAbs().maxCoeff() < 1e-15);
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("model config validation") {
  ModelConfig cfg;
  cfg.heads = 3;
  CHECK_THROWS_AS(cfg.validate(), capdet::InvalidInput);
  cfg = ModelConfig{};
  cfg.gradcam_layer = 3;
  CHECK_THROWS_AS(ToyEncoder{cfg}, capdet::InvalidInput);
}
