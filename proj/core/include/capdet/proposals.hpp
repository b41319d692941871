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

#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "capdet/geometry.hpp"
#include "capdet/image.hpp"

namespace capdet {

enum class ProposalSource { kLoaded, kGrid, kRegionMerge };

const char* to_string(ProposalSource s);

struct ProposalSet {
  std::vector<Box> boxes;
  ProposalSource source = ProposalSource::kLoaded;

  std::size_t size() const { return boxes.size(); }
  bool empty() const { return boxes.empty(); }
  friend bool operator==(const ProposalSet&, const ProposalSet&) = default;
};

struct GridProposalConfig {
  std::vector<double> scales{16, 24, 32};
  // width / height
  std::vector<double> ratios{1.0, 2.0, 0.5};
  int stride = 8;
};

// Sliding windows of size (round(s*sqrt(r)), round(s/sqrt(r))) for every
// scale s and ratio r. Along each axis windows start at 0, stride, 2*stride,
// ... while they fit, plus one window flush with the far edge if the stride
// does not land there. Windows larger than the image are clipped. Duplicates
// are removed, first occurrence kept.
ProposalSet grid_proposals(int width, int height,
                           const GridProposalConfig& config);

// Boxes of 4-connected regions after quantizing every channel to
// `levels` evenly spaced values, plus the union box of every pair of
// regions sharing an edge.
ProposalSet region_merge_proposals(const Image& image, int levels = 3);

using ProposalTable = std::map<std::string, ProposalSet>;

// JSON-lines: {"image_id": ..., "boxes": [[x_min, y_min, x_max, y_max], ...]}
ProposalTable load_proposals(const std::filesystem::path& path);
void save_proposals(const ProposalTable& table,
                    const std::filesystem::path& path);

// Where proposals come from for a pipeline run: "grid", "region-merge" or
// "file:PATH".
class ProposalProvider {
 public:
  static ProposalProvider grid(GridProposalConfig config = {});
  static ProposalProvider region_merge(int levels = 3);
  static ProposalProvider table(ProposalTable table);
  static ProposalProvider parse(const std::string& text);

  ProposalSource source() const { return source_; }

  // Throws InvalidInput if a loaded table has no entry for `image_id`.
  ProposalSet proposals(const std::string& image_id, const Image& image) const;

 private:
  ProposalSource source_ = ProposalSource::kGrid;
  GridProposalConfig grid_;
  int levels_ = 3;
  ProposalTable table_;
};

}  // namespace capdet
