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

// Toy cross-attention multimodal encoder with analytic attention gradients.
//
// Text tokens attend over image grid cells through L stacked cross-attention
// layers. The image-text similarity s is a fixed linear readout of the
// token-wise product between each token's input representation and its final
// fused representation:
//
//   s = (1 / N_T) * sum_t  w . (h_t^0 (*) h_t^L)
//
// so every token's attention row influences s. Gradients ds/dA are taken with
// respect to post-softmax attention, holding everything upstream of A fixed and
// propagating through all downstream layers.

#include <array>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "capdet/image.hpp"

namespace capdet::vlm {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

struct GridShape {
  int rows = 1;
  int cols = 1;
  int cells() const { return rows * cols; }
  friend bool operator==(const GridShape&, const GridShape&) = default;
};

struct ModelConfig {
  int dim = 16;
  int layers = 2;
  int heads = 2;
  GridShape grid{16, 16};
  // 1-based layer whose attention feeds Grad-CAM.
  int gradcam_layer = 2;
  std::uint64_t seed = 0;

  // Query/key/value/output projections are exactly the identity; one head then
  // reproduces plain softmax(h V^T / sqrt(d)) V attention.
  bool identity_projections = false;
  // Learned projections are identity plus this much seeded Gaussian noise.
  double projection_noise = 0.1;
  double color_scale = 2.0;
  double position_scale = 0.1;
  // Norm multiplier of lexicon-anchored token embeddings.
  double lexicon_gain = 4.0;

  int head_dim() const { return dim / heads; }

  // Throws InvalidInput when an invariant does not hold.
  void validate() const;
};

// Words the toy text encoder grounds to an RGB anchor (components in [0, 1]).
// Their embeddings live in the same subspace as the image color features.
using Lexicon = std::map<std::string, std::array<double, 3>, std::less<>>;

struct VisualFeatures {
  Matrix values;  // N_V x d, row r is grid cell (r / cols, r % cols)
  GridShape grid;
};

struct TextFeatures {
  Matrix values;  // N_T x d
  std::vector<std::string> tokens;
};

struct LayerParams {
  Matrix query;   // d x d
  Matrix key;     // d x d
  Matrix value;   // d x d
  Matrix output;  // d x d
};

struct ModelParams {
  Matrix color_map;     // d x 3
  Matrix position_map;  // d x 4
  std::vector<LayerParams> layers;
  Vector readout;       // d
};

// Output of one cross-attention layer.
struct AttentionRecord {
  int layer = 0;                  // 1-based
  std::vector<Matrix> attention;  // per head, N_T x N_V, rows sum to 1
  std::vector<Matrix> values;     // per head, N_V x head_dim projected values
  Matrix hidden;                  // N_T x d
};

struct SimilarityScore {
  double value = 0;
  // gradients[l][h] = ds/dA for layer l + 1, head h.
  std::vector<std::vector<Matrix>> gradients;
};

struct ForwardResult {
  std::vector<AttentionRecord> layers;
  SimilarityScore similarity;
};

struct ActivationMap {
  int token_index = 0;
  GridShape grid;
  Vector phi;  // N_V entries, all >= 0
  std::string object_name;
};

class ToyEncoder {
 public:
  explicit ToyEncoder(ModelConfig config, Lexicon lexicon = {});
  ToyEncoder(ModelConfig config, ModelParams params, Lexicon lexicon = {});

  const ModelConfig& config() const { return config_; }
  const ModelParams& params() const { return params_; }
  const Lexicon& lexicon() const { return lexicon_; }

  VisualFeatures encode_image(const Image& image) const;
  TextFeatures encode_text(std::span<const std::string> tokens) const;
  Vector token_embedding(std::string_view token) const;

  AttentionRecord cross_attention_layer(const Matrix& h_prev,
                                        const VisualFeatures& visual,
                                        int layer) const;

  ForwardResult forward(const TextFeatures& text,
                        const VisualFeatures& visual) const;

  // s with the post-softmax attention of (layer, head) replaced by
  // `attention`; only the downstream computation is re-run.
  double similarity_with_attention(const TextFeatures& text,
                                   const VisualFeatures& visual, int layer,
                                   int head, const Matrix& attention) const;

 private:
  void check_features(const TextFeatures& text,
                      const VisualFeatures& visual) const;
  Matrix layer_hidden(const std::vector<Matrix>& attention,
                      const std::vector<Matrix>& values, int layer) const;
  double readout(const Matrix& h0, const Matrix& h_last) const;

  ModelConfig config_;
  ModelParams params_;
  Lexicon lexicon_;
};

// Central differences of s w.r.t. every entry of A at (layer, head).
Matrix finite_diff_grad(const ToyEncoder& encoder, const TextFeatures& text,
                        const VisualFeatures& visual, int layer, int head,
                        double eps);

// phi = mean over heads of A[t] (*) max(ds/dA[t], 0).
ActivationMap grad_cam(const AttentionRecord& record,
                       const std::vector<Matrix>& gradients, int token_index,
                       GridShape grid);

// Same, taking the configured Grad-CAM layer out of a forward pass.
ActivationMap grad_cam(const ForwardResult& result, const ModelConfig& config,
                       int token_index);

// Row-wise softmax with max subtraction.
Matrix softmax_rows(const Matrix& logits);

}  // namespace capdet::vlm
