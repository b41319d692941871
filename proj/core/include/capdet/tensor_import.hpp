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

// On-disk attention tensors exported from an external vision-language model.
//
// One JSON file per image-caption pair, named <pair_id>.json:
//
//   {
//     "schema": "capdet.attention/1",
//     "pair_id": "...",
//     "grid": [rows, cols],
//     "tokens": ["[CLS]", "a", "red", "circle", "[SEP]"],
//     "layers": [
//       {"layer": 1,
//        "heads": [{"attention": [[...N_V...], ...N_T rows],
//                   "gradient":  [[...N_V...], ...N_T rows]}, ...]},
//       ...
//     ]
//   }
//
// "gradient" is ds/dA for the same head. Layers may be a subset; the
// Grad-CAM layer must be present.

#include <filesystem>
#include <string>
#include <vector>

#include "capdet/vlm.hpp"

namespace capdet::vlm {

inline constexpr const char* kAttentionSchema = "capdet.attention/1";

struct ImportedLayer {
  int layer = 0;
  std::vector<Matrix> attention;
  std::vector<Matrix> gradients;
};

struct ImportedTensors {
  std::string pair_id;
  GridShape grid;
  std::vector<std::string> tokens;
  std::vector<ImportedLayer> layers;

  const ImportedLayer& layer(int index) const;
};

ImportedTensors from_forward(std::string pair_id, const TextFeatures& text,
                             const VisualFeatures& visual,
                             const ForwardResult& result);

void write_tensors(const ImportedTensors& tensors,
                   const std::filesystem::path& path);
ImportedTensors read_tensors(const std::filesystem::path& path);

// Path of the record for `pair_id` inside an import directory.
std::filesystem::path tensor_path(const std::filesystem::path& dir,
                                  const std::string& pair_id);

ActivationMap grad_cam(const ImportedTensors& tensors, int layer,
                       int token_index);

}  // namespace capdet::vlm
