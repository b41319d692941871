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

#include "capdet/proposals.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <utility>

#include <json.hpp>

#include "capdet/error.hpp"

namespace capdet {

using nlohmann::json;

const char* to_string(ProposalSource s) {
  switch (s) {
    case ProposalSource::kLoaded: return "loaded";
    case ProposalSource::kGrid: return "grid";
    case ProposalSource::kRegionMerge: return "region-merge";
  }
  return "unknown";
}

namespace {

std::vector<int> window_starts(int extent, int size, int stride) {
  if (size >= extent) return {0};
  std::vector<int> starts;
  int pos = 0;
  for (; pos + size <= extent; pos += stride) starts.push_back(pos);
  if (starts.back() + size != extent) starts.push_back(extent - size);
  return starts;
}

void push_unique(std::vector<Box>& boxes, std::set<Box>& seen, const Box& b) {
  if (b.valid() && seen.insert(b).second) boxes.push_back(b);
}

}  // namespace

ProposalSet grid_proposals(int width, int height,
                           const GridProposalConfig& config) {
  if (width <= 0 || height <= 0) throw InvalidInput("image size must be positive");
  if (config.scales.empty() || config.ratios.empty())
    throw InvalidInput("grid proposals need at least one scale and ratio");
  if (config.stride <= 0) throw InvalidInput("stride must be positive");

  ProposalSet out{{}, ProposalSource::kGrid};
  std::set<Box> seen;
  for (double s : config.scales) {
    for (double r : config.ratios) {
      if (!(s > 0) || !(r > 0))
        throw InvalidInput("scales and ratios must be positive");
      const int w = std::max(1, static_cast<int>(std::lround(s * std::sqrt(r))));
      const int h = std::max(1, static_cast<int>(std::lround(s / std::sqrt(r))));
      const int cw = std::min(w, width);
      const int ch = std::min(h, height);
      for (int y : window_starts(height, h, config.stride))
        for (int x : window_starts(width, w, config.stride))
          push_unique(out.boxes, seen,
                      {double(x), double(y), double(x + cw), double(y + ch)});
    }
  }
  return out;
}

ProposalSet region_merge_proposals(const Image& image, int levels) {
  if (image.empty()) throw InvalidInput("cannot propose regions on an empty image");
  if (levels < 2) throw InvalidInput("quantization needs at least 2 levels");
  const int w = image.width();
  const int h = image.height();
  const auto n = static_cast<std::size_t>(w) * h;

  auto quant = [levels](std::uint8_t v) {
    return static_cast<int>(std::lround(v * (levels - 1) / 255.0));
  };
  std::vector<int> label(n);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const Rgb c = image.at(x, y);
      label[static_cast<std::size_t>(y) * w + x] =
          (quant(c.r) * levels + quant(c.g)) * levels + quant(c.b);
    }

  // Union-find over 4-neighbours with equal labels.
  std::vector<std::size_t> parent(n);
  std::iota(parent.begin(), parent.end(), std::size_t{0});
  auto find = [&parent](std::size_t i) {
    while (parent[i] != i) {
      parent[i] = parent[parent[i]];
      i = parent[i];
    }
    return i;
  };
  auto unite = [&](std::size_t a, std::size_t b) {
    a = find(a);
    b = find(b);
    if (a != b) parent[std::max(a, b)] = std::min(a, b);
  };
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const auto i = static_cast<std::size_t>(y) * w + x;
      if (x + 1 < w && label[i] == label[i + 1]) unite(i, i + 1);
      if (y + 1 < h && label[i] == label[i + w]) unite(i, i + w);
    }

  // Components in raster order of their first pixel.
  std::vector<int> comp_of(n, -1);
  std::vector<std::size_t> root_comp(n, SIZE_MAX);
  std::vector<Box> comp_box;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const auto i = static_cast<std::size_t>(y) * w + x;
      const auto r = find(i);
      if (root_comp[r] == SIZE_MAX) {
        root_comp[r] = comp_box.size();
        comp_box.push_back({double(x), double(y), double(x + 1), double(y + 1)});
      }
      const auto c = root_comp[r];
      comp_of[i] = static_cast<int>(c);
      Box& b = comp_box[c];
      b.x_min = std::min(b.x_min, double(x));
      b.y_min = std::min(b.y_min, double(y));
      b.x_max = std::max(b.x_max, double(x + 1));
      b.y_max = std::max(b.y_max, double(y + 1));
    }

  std::set<std::pair<int, int>> adjacent;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const auto i = static_cast<std::size_t>(y) * w + x;
      const int a = comp_of[i];
      if (x + 1 < w && comp_of[i + 1] != a)
        adjacent.emplace(std::min(a, comp_of[i + 1]), std::max(a, comp_of[i + 1]));
      if (y + 1 < h && comp_of[i + w] != a)
        adjacent.emplace(std::min(a, comp_of[i + w]), std::max(a, comp_of[i + w]));
    }

  ProposalSet out{{}, ProposalSource::kRegionMerge};
  std::set<Box> seen;
  for (const auto& b : comp_box) push_unique(out.boxes, seen, b);
  for (const auto& [a, b] : adjacent) {
    const Box& p = comp_box[a];
    const Box& q = comp_box[b];
    push_unique(out.boxes, seen,
                {std::min(p.x_min, q.x_min), std::min(p.y_min, q.y_min),
                 std::max(p.x_max, q.x_max), std::max(p.y_max, q.y_max)});
  }
  return out;
}

ProposalTable load_proposals(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open proposals " + path.string());
  ProposalTable table;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno);
    try {
      const json j = json::parse(line);
      ProposalSet set{{}, ProposalSource::kLoaded};
      for (const auto& b : j.at("boxes")) {
        if (!b.is_array() || b.size() != 4)
          throw FormatError(where + ": box must have 4 coordinates");
        Box box{b[0].get<double>(), b[1].get<double>(), b[2].get<double>(),
                b[3].get<double>()};
        if (!box.valid())
          throw FormatError(where + ": degenerate box " + to_string(box));
        set.boxes.push_back(box);
      }
      const auto id = j.at("image_id").get<std::string>();
      if (!table.emplace(id, std::move(set)).second)
        throw FormatError(where + ": duplicate image_id " + id);
    } catch (const json::exception& e) {
      throw FormatError(where + ": " + e.what());
    }
  }
  return table;
}

void save_proposals(const ProposalTable& table,
                    const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write proposals " + path.string());
  for (const auto& [id, set] : table) {
    json boxes = json::array();
    for (const auto& b : set.boxes)
      boxes.push_back({b.x_min, b.y_min, b.x_max, b.y_max});
    out << json{{"image_id", id}, {"boxes", std::move(boxes)}}.dump() << '\n';
  }
}

ProposalProvider ProposalProvider::grid(GridProposalConfig config) {
  ProposalProvider p;
  p.source_ = ProposalSource::kGrid;
  p.grid_ = std::move(config);
  return p;
}

ProposalProvider ProposalProvider::region_merge(int levels) {
  ProposalProvider p;
  p.source_ = ProposalSource::kRegionMerge;
  p.levels_ = levels;
  return p;
}

ProposalProvider ProposalProvider::table(ProposalTable table) {
  ProposalProvider p;
  p.source_ = ProposalSource::kLoaded;
  p.table_ = std::move(table);
  return p;
}

ProposalProvider ProposalProvider::parse(const std::string& text) {
  if (text == "grid") return grid();
  if (text == "region-merge") return region_merge();
  if (text.starts_with("file:")) return table(load_proposals(text.substr(5)));
  throw InvalidInput("unknown proposal source '" + text +
                     "' (expected grid, region-merge or file:PATH)");
}

ProposalSet ProposalProvider::proposals(const std::string& image_id,
                                        const Image& image) const {
  switch (source_) {
    case ProposalSource::kGrid:
      return grid_proposals(image.width(), image.height(), grid_);
    case ProposalSource::kRegionMerge:
      return region_merge_proposals(image, levels_);
    case ProposalSource::kLoaded:
      break;
  }
  auto it = table_.find(image_id);
  if (it == table_.end())
    throw InvalidInput("no proposals loaded for image " + image_id);
  return it->second;
}

}  // namespace capdet
