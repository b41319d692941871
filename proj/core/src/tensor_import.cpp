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

#include "capdet/tensor_import.hpp"

#include <fstream>

#include <json.hpp>

#include "capdet/error.hpp"

namespace capdet::vlm {

using nlohmann::json;

namespace {

json matrix_to_json(const Matrix& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

Matrix matrix_from_json(const json& j, const std::string& where) {
  if (!j.is_array() || j.empty() || !j.front().is_array())
    throw FormatError(where + ": expected a nonempty 2-D array");
  const auto rows = static_cast<Eigen::Index>(j.size());
  const auto cols = static_cast<Eigen::Index>(j.front().size());
  Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const auto& row = j[static_cast<std::size_t>(r)];
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols)
      throw FormatError(where + ": ragged matrix");
    for (Eigen::Index c = 0; c < cols; ++c)
      m(r, c) = row[static_cast<std::size_t>(c)].get<double>();
  }
  return m;
}

}  // namespace

const ImportedLayer& ImportedTensors::layer(int index) const {
  for (const auto& l : layers)
    if (l.layer == index) return l;
  throw InvalidInput("imported tensors for " + pair_id + " lack layer " +
                     std::to_string(index));
}

ImportedTensors from_forward(std::string pair_id, const TextFeatures& text,
                             const VisualFeatures& visual,
                             const ForwardResult& result) {
  ImportedTensors out{std::move(pair_id), visual.grid, text.tokens, {}};
  for (std::size_t l = 0; l < result.layers.size(); ++l)
    out.layers.push_back({result.layers[l].layer, result.layers[l].attention,
                          result.similarity.gradients[l]});
  return out;
}

void write_tensors(const ImportedTensors& tensors,
                   const std::filesystem::path& path) {
  json doc;
  doc["schema"] = kAttentionSchema;
  doc["pair_id"] = tensors.pair_id;
  doc["grid"] = {tensors.grid.rows, tensors.grid.cols};
  doc["tokens"] = tensors.tokens;
  json layers = json::array();
  for (const auto& l : tensors.layers) {
    json heads = json::array();
    for (std::size_t h = 0; h < l.attention.size(); ++h)
      heads.push_back({{"attention", matrix_to_json(l.attention[h])},
                       {"gradient", matrix_to_json(l.gradients[h])}});
    layers.push_back({{"layer", l.layer}, {"heads", std::move(heads)}});
  }
  doc["layers"] = std::move(layers);

  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << doc.dump() << '\n';
}

ImportedTensors read_tensors(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  const std::string where = path.string();
  try {
    const json doc = json::parse(in);
    ImportedTensors out;
    out.pair_id = doc.at("pair_id").get<std::string>();
    const auto& grid = doc.at("grid");
    out.grid = {grid.at(0).get<int>(), grid.at(1).get<int>()};
    if (out.grid.rows < 1 || out.grid.cols < 1)
      throw FormatError(where + ": grid dimensions must be >= 1");
    out.tokens = doc.at("tokens").get<std::vector<std::string>>();
    for (const auto& jl : doc.at("layers")) {
      ImportedLayer layer;
      layer.layer = jl.at("layer").get<int>();
      for (const auto& jh : jl.at("heads")) {
        layer.attention.push_back(matrix_from_json(jh.at("attention"), where));
        layer.gradients.push_back(matrix_from_json(jh.at("gradient"), where));
        const auto& a = layer.attention.back();
        const auto& g = layer.gradients.back();
        if (a.rows() != static_cast<Eigen::Index>(out.tokens.size()) ||
            a.cols() != out.grid.cells() || g.rows() != a.rows() ||
            g.cols() != a.cols())
          throw FormatError(where + ": tensor shape disagrees with tokens/grid");
      }
      if (layer.attention.empty())
        throw FormatError(where + ": layer without heads");
      out.layers.push_back(std::move(layer));
    }
    return out;
  } catch (const json::exception& e) {
    throw FormatError(where + ": " + e.what());
  }
}

std::filesystem::path tensor_path(const std::filesystem::path& dir,
                                  const std::string& pair_id) {
  return dir / (pair_id + ".json");
}

ActivationMap grad_cam(const ImportedTensors& tensors, int layer,
                       int token_index) {
  const auto& l = tensors.layer(layer);
  AttentionRecord rec;
  rec.layer = l.layer;
  rec.attention = l.attention;
  return grad_cam(rec, l.gradients, token_index, tensors.grid);
}

}  // namespace capdet::vlm
