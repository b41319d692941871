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

#include "capdet/pseudo_label.hpp"

#include <algorithm>
#include <cmath>
#include <tuple>

#include "capdet/error.hpp"

namespace capdet {

PixelMap upsample_activation(const vlm::ActivationMap& map, int width,
                             int height) {
  if (width <= 0 || height <= 0) throw InvalidInput("image size must be positive");
  const int gr = map.grid.rows;
  const int gc = map.grid.cols;
  if (map.phi.size() != gr * gc)
    throw InvalidInput("activation map size does not match its grid");

  auto axis = [](int pixel, int extent, int cells) {
    double g = (pixel + 0.5) * cells / extent - 0.5;
    g = std::clamp(g, 0.0, static_cast<double>(cells - 1));
    const int lo = static_cast<int>(std::floor(g));
    const int hi = std::min(lo + 1, cells - 1);
    return std::tuple{lo, hi, g - lo};
  };

  PixelMap out{width, height, std::vector<double>(static_cast<std::size_t>(width) * height)};
  for (int y = 0; y < height; ++y) {
    const auto [r0, r1, fy] = axis(y, height, gr);
    for (int x = 0; x < width; ++x) {
      const auto [c0, c1, fx] = axis(x, width, gc);
      const double top = (1 - fx) * map.phi(r0 * gc + c0) + fx * map.phi(r0 * gc + c1);
      const double bot = (1 - fx) * map.phi(r1 * gc + c0) + fx * map.phi(r1 * gc + c1);
      out.values[static_cast<std::size_t>(y) * width + x] =
          std::max(0.0, (1 - fy) * top + fy * bot);
    }
  }
  return out;
}

namespace {

struct PixelRect {
  int x0, y0, x1, y1;
};

PixelRect pixel_rect(const Box& box, int width, int height) {
  if (!box.valid()) throw InvalidInput("zero-area box " + to_string(box));
  const PixelRect r{static_cast<int>(std::lround(box.x_min)),
                    static_cast<int>(std::lround(box.y_min)),
                    static_cast<int>(std::lround(box.x_max)),
                    static_cast<int>(std::lround(box.y_max))};
  if (r.x0 < 0 || r.y0 < 0 || r.x1 > width || r.y1 > height)
    throw InvalidInput("box " + to_string(box) + " outside the activation map");
  if (r.x1 <= r.x0 || r.y1 <= r.y0)
    throw InvalidInput("box " + to_string(box) + " covers no pixels");
  return r;
}

}  // namespace

double score_proposal(const PixelMap& phi, const Box& box) {
  const auto r = pixel_rect(box, phi.width, phi.height);
  double sum = 0;
  for (int y = r.y0; y < r.y1; ++y)
    for (int x = r.x0; x < r.x1; ++x) sum += phi.at(x, y);
  return sum / std::sqrt(static_cast<double>(r.x1 - r.x0) * (r.y1 - r.y0));
}

SummedAreaTable::SummedAreaTable(const PixelMap& phi)
    : width_(phi.width),
      height_(phi.height),
      table_(static_cast<std::size_t>(phi.width + 1) * (phi.height + 1), 0.0) {
  const auto stride = static_cast<std::size_t>(width_ + 1);
  for (int y = 0; y < height_; ++y) {
    double row = 0;
    for (int x = 0; x < width_; ++x) {
      row += phi.at(x, y);
      table_[(y + 1) * stride + x + 1] = table_[y * stride + x + 1] + row;
    }
  }
}

double SummedAreaTable::sum(const Box& box) const {
  const auto r = pixel_rect(box, width_, height_);
  const auto stride = static_cast<std::size_t>(width_ + 1);
  return table_[r.y1 * stride + r.x1] - table_[r.y0 * stride + r.x1] -
         table_[r.y1 * stride + r.x0] + table_[r.y0 * stride + r.x0];
}

double SummedAreaTable::score(const Box& box) const {
  const auto r = pixel_rect(box, width_, height_);
  return sum(box) / std::sqrt(static_cast<double>(r.x1 - r.x0) * (r.y1 - r.y0));
}

Selection select_box(const PixelMap& phi, const ProposalSet& proposals) {
  if (proposals.empty()) throw InvalidInput("empty proposal set");
  const SummedAreaTable sat(phi);
  Selection best{0, proposals.boxes[0], sat.score(proposals.boxes[0])};
  for (std::size_t i = 1; i < proposals.size(); ++i) {
    const double s = sat.score(proposals.boxes[i]);
    if (s > best.score) best = {i, proposals.boxes[i], s};
  }
  return best;
}

void sort_canonical(std::vector<PseudoBoxLabel>& labels) {
  std::stable_sort(labels.begin(), labels.end(),
                   [](const PseudoBoxLabel& a, const PseudoBoxLabel& b) {
                     return std::tie(a.pair_id, a.span_start, a.span_end, a.category) <
                            std::tie(b.pair_id, b.span_start, b.span_end, b.category);
                   });
}

std::vector<std::string> ToyAttribution::model_tokens(
    std::span<const std::string> words) {
  std::vector<std::string> tokens;
  tokens.reserve(words.size() + 2);
  tokens.emplace_back("[CLS]");
  tokens.insert(tokens.end(), words.begin(), words.end());
  tokens.emplace_back("[SEP]");
  return tokens;
}

std::vector<vlm::ActivationMap> ToyAttribution::word_maps(
    const ImageCaptionPair& pair, std::span<const std::string> words,
    std::span<const int> word_indices) const {
  const auto tokens = model_tokens(words);
  const auto text = encoder_.encode_text(tokens);
  const auto visual = encoder_.encode_image(pair.image);
  const auto result = encoder_.forward(text, visual);
  std::vector<vlm::ActivationMap> maps;
  maps.reserve(word_indices.size());
  for (int w : word_indices) {
    auto m = vlm::grad_cam(result, encoder_.config(), w + 1);
    m.object_name = words[static_cast<std::size_t>(w)];
    maps.push_back(std::move(m));
  }
  return maps;
}

std::vector<vlm::ActivationMap> ImportedAttribution::word_maps(
    const ImageCaptionPair& pair, std::span<const std::string> words,
    std::span<const int> word_indices) const {
  const auto tensors = vlm::read_tensors(vlm::tensor_path(dir_, pair.pair_id));
  if (tensors.tokens.size() != words.size() + 2)
    throw InvalidInput("imported tokens for " + pair.pair_id +
                       " do not align with the caption");
  for (std::size_t i = 0; i < words.size(); ++i)
    if (normalize_word(tensors.tokens[i + 1]) != words[i] &&
        tensors.tokens[i + 1] != words[i])
      throw InvalidInput("imported token '" + tensors.tokens[i + 1] +
                         "' does not match caption word '" + words[i] + "'");
  std::vector<vlm::ActivationMap> maps;
  for (int w : word_indices) {
    auto m = vlm::grad_cam(tensors, layer_, w + 1);
    m.object_name = words[static_cast<std::size_t>(w)];
    maps.push_back(std::move(m));
  }
  return maps;
}

std::vector<MentionMap> mention_maps(const ImageCaptionPair& pair,
                                     const ObjectVocabulary& vocab,
                                     const AttributionModel& model) {
  std::vector<std::string> words = tokenize(pair.caption);
  for (auto& w : words) w = vocab.canonical_word(w);
  const auto matches = vocab.match(words);
  if (matches.empty()) return {};
  if (pair.image.empty()) throw InvalidInput("pair " + pair.pair_id + " has no image");

  std::vector<int> needed;
  for (const auto& m : matches)
    for (int i = m.start; i < m.end; ++i) needed.push_back(i);
  std::sort(needed.begin(), needed.end());
  needed.erase(std::unique(needed.begin(), needed.end()), needed.end());
  const auto maps = model.word_maps(pair, words, needed);

  std::vector<MentionMap> out;
  for (const auto& m : matches) {
    vlm::ActivationMap span_map;
    for (int i = m.start; i < m.end; ++i) {
      const auto pos = std::lower_bound(needed.begin(), needed.end(), i) - needed.begin();
      const auto& wm = maps[static_cast<std::size_t>(pos)];
      if (i == m.start) {
        span_map = wm;
      } else {
        span_map.phi += wm.phi;
      }
    }
    span_map.phi /= static_cast<double>(m.end - m.start);
    span_map.object_name = m.category;
    out.push_back({m, std::move(span_map)});
  }
  return out;
}

std::vector<PseudoBoxLabel> generate_pseudo_labels(
    const ImageCaptionPair& pair, const ObjectVocabulary& vocab,
    const AttributionModel& model, const ProposalProvider& provider) {
  const auto mentions = mention_maps(pair, vocab, model);
  if (mentions.empty()) return {};
  const auto proposals = provider.proposals(pair.pair_id, pair.image);
  std::vector<PseudoBoxLabel> labels;
  for (const auto& [m, map] : mentions) {
    const auto pixels = upsample_activation(map, pair.image.width(), pair.image.height());
    const auto sel = select_box(pixels, proposals);
    const bool duplicate =
        std::any_of(labels.begin(), labels.end(), [&](const PseudoBoxLabel& l) {
          return l.category == m.category && l.box == sel.box;
        });
    if (!duplicate)
      labels.push_back({pair.pair_id, m.category, sel.box, sel.score, m.start, m.end});
  }
  sort_canonical(labels);
  return labels;
}

}  // namespace capdet
