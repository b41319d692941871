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

#include "capdet/vlm.hpp"

#include <cmath>
#include <numbers>
#include <random>

#include "capdet/error.hpp"
#include "internal.hpp"

namespace capdet::vlm {

void ModelConfig::validate() const {
  if (dim <= 0) throw InvalidInput("model dim must be positive");
  if (layers < 1) throw InvalidInput("model needs at least one layer");
  if (heads < 1 || dim % heads != 0)
    throw InvalidInput("dim must be divisible by the number of heads");
  if (grid.rows < 1 || grid.cols < 1)
    throw InvalidInput("grid dimensions must be >= 1");
  if (gradcam_layer < 1 || gradcam_layer > layers)
    throw InvalidInput("gradcam_layer must lie in [1, layers]");
}

namespace {

Matrix make_projection(std::mt19937_64& rng, const ModelConfig& cfg) {
  Matrix m = Matrix::Identity(cfg.dim, cfg.dim);
  if (!cfg.identity_projections)
    m += internal::gaussian(rng, cfg.dim, cfg.dim,
                            cfg.projection_noise / std::sqrt(cfg.dim));
  return m;
}

ModelParams make_params(const ModelConfig& cfg) {
  std::mt19937_64 rng(internal::mix_seed(cfg.seed, 0x766c6d));
  ModelParams p;

  Matrix color = internal::gaussian(rng, cfg.dim, 3, 1.0);
  if (cfg.dim >= 3) {
    Eigen::HouseholderQR<Matrix> qr(color);
    color = qr.householderQ() * Matrix::Identity(cfg.dim, 3);
  } else {
    color.colwise().normalize();
  }
  p.color_map = cfg.color_scale * color;
  p.position_map = internal::gaussian(rng, cfg.dim, 4,
                                      cfg.position_scale / std::sqrt(cfg.dim));

  p.layers.reserve(cfg.layers);
  for (int l = 0; l < cfg.layers; ++l) {
    LayerParams lp;
    lp.query = make_projection(rng, cfg);
    lp.key = make_projection(rng, cfg);
    lp.value = make_projection(rng, cfg);
    lp.output = make_projection(rng, cfg);
    p.layers.push_back(std::move(lp));
  }

  std::uniform_real_distribution<double> unit(0.5, 1.5);
  p.readout.resize(cfg.dim);
  for (int i = 0; i < cfg.dim; ++i) p.readout(i) = unit(rng);
  return p;
}

}  // namespace

Matrix softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double mx = logits.row(r).maxCoeff();
    out.row(r) = (logits.row(r).array() - mx).exp();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

ToyEncoder::ToyEncoder(ModelConfig config, Lexicon lexicon)
    : config_(std::move(config)), lexicon_(std::move(lexicon)) {
  config_.validate();
  params_ = make_params(config_);
}

ToyEncoder::ToyEncoder(ModelConfig config, ModelParams params, Lexicon lexicon)
    : config_(std::move(config)),
      params_(std::move(params)),
      lexicon_(std::move(lexicon)) {
  config_.validate();
  const auto d = config_.dim;
  if (params_.color_map.rows() != d || params_.color_map.cols() != 3 ||
      params_.position_map.rows() != d || params_.position_map.cols() != 4 ||
      params_.readout.size() != d ||
      static_cast<int>(params_.layers.size()) != config_.layers)
    throw InvalidInput("model parameters do not match config");
  for (const auto& lp : params_.layers)
    for (const Matrix* m : {&lp.query, &lp.key, &lp.value, &lp.output})
      if (m->rows() != d || m->cols() != d)
        throw InvalidInput("layer projection must be d x d");
}

VisualFeatures ToyEncoder::encode_image(const Image& image) const {
  if (image.empty()) throw InvalidInput("cannot encode an empty image");
  const auto [gr, gc] = config_.grid;
  const int w = image.width();
  const int h = image.height();
  VisualFeatures out{Matrix(gr * gc, config_.dim), config_.grid};

  for (int i = 0; i < gr; ++i) {
    const int y0 = std::min(i * h / gr, h - 1);
    const int y1 = std::max(y0 + 1, (i + 1) * h / gr);
    for (int j = 0; j < gc; ++j) {
      const int x0 = std::min(j * w / gc, w - 1);
      const int x1 = std::max(x0 + 1, (j + 1) * w / gc);
      Eigen::Vector3d color = Eigen::Vector3d::Zero();
      for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) {
          const Rgb px = image.at(x, y);
          color += Eigen::Vector3d(px.r, px.g, px.b);
        }
      color /= 255.0 * (y1 - y0) * (x1 - x0);
      color.array() -= 0.5;

      const double u = (i + 0.5) / gr;
      const double v = (j + 0.5) / gc;
      const Eigen::Vector4d pos(std::sin(std::numbers::pi * u),
                                std::cos(std::numbers::pi * u),
                                std::sin(std::numbers::pi * v),
                                std::cos(std::numbers::pi * v));
      out.values.row(i * gc + j) =
          (params_.color_map * color + params_.position_map * pos).transpose();
    }
  }
  return out;
}

Vector ToyEncoder::token_embedding(std::string_view token) const {
  std::mt19937_64 rng(internal::mix_seed(config_.seed, internal::fnv1a(token)));
  const double inv = 1.0 / std::sqrt(config_.dim);
  if (auto it = lexicon_.find(token); it != lexicon_.end()) {
    const Eigen::Vector3d anchor(it->second[0] - 0.5, it->second[1] - 0.5,
                                 it->second[2] - 0.5);
    Vector e = config_.lexicon_gain * (params_.color_map * anchor);
    e += internal::gaussian(rng, config_.dim, 1, 0.05 * inv);
    return e;
  }
  return internal::gaussian(rng, config_.dim, 1, inv);
}

TextFeatures ToyEncoder::encode_text(std::span<const std::string> tokens) const {
  if (tokens.empty()) throw InvalidInput("cannot encode an empty caption");
  TextFeatures out{Matrix(static_cast<Eigen::Index>(tokens.size()), config_.dim),
                   {tokens.begin(), tokens.end()}};
  for (std::size_t t = 0; t < tokens.size(); ++t)
    out.values.row(static_cast<Eigen::Index>(t)) =
        token_embedding(tokens[t]).transpose();
  return out;
}

Matrix ToyEncoder::layer_hidden(const std::vector<Matrix>& attention,
                                const std::vector<Matrix>& values,
                                int layer) const {
  const int dh = config_.head_dim();
  Matrix concat(attention.front().rows(), config_.dim);
  for (int h = 0; h < config_.heads; ++h)
    concat.middleCols(h * dh, dh) = attention[h] * values[h];
  return concat * params_.layers[layer - 1].output;
}

AttentionRecord ToyEncoder::cross_attention_layer(const Matrix& h_prev,
                                                  const VisualFeatures& visual,
                                                  int layer) const {
  if (layer < 1 || layer > config_.layers)
    throw InvalidInput("layer index out of range");
  if (h_prev.cols() != config_.dim || visual.values.cols() != config_.dim)
    throw InvalidInput("feature dimension does not match model dim");
  if (h_prev.rows() == 0 || visual.values.rows() == 0)
    throw InvalidInput("empty text or visual features");

  const auto& lp = params_.layers[layer - 1];
  const int dh = config_.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const Matrix q = h_prev * lp.query;
  const Matrix k = visual.values * lp.key;
  const Matrix v = visual.values * lp.value;

  AttentionRecord rec;
  rec.layer = layer;
  for (int h = 0; h < config_.heads; ++h) {
    const Matrix logits =
        (q.middleCols(h * dh, dh) * k.middleCols(h * dh, dh).transpose()) *
        scale;
    rec.attention.push_back(softmax_rows(logits));
    rec.values.push_back(v.middleCols(h * dh, dh));
  }
  rec.hidden = layer_hidden(rec.attention, rec.values, layer);
  return rec;
}

void ToyEncoder::check_features(const TextFeatures& text,
                                const VisualFeatures& visual) const {
  if (text.values.rows() == 0) throw InvalidInput("empty text features");
  if (static_cast<std::size_t>(text.values.rows()) != text.tokens.size())
    throw InvalidInput("text feature rows do not match token count");
  if (visual.values.rows() != visual.grid.cells())
    throw InvalidInput("visual feature rows do not match grid");
  if (!text.values.allFinite() || !visual.values.allFinite())
    throw InvalidInput("non-finite features");
}

double ToyEncoder::readout(const Matrix& h0, const Matrix& h_last) const {
  const Vector per_dim = (h0.array() * h_last.array()).colwise().sum();
  return params_.readout.dot(per_dim) / static_cast<double>(h0.rows());
}

ForwardResult ToyEncoder::forward(const TextFeatures& text,
                                  const VisualFeatures& visual) const {
  check_features(text, visual);
  ForwardResult out;
  out.layers.reserve(config_.layers);
  const Matrix* h = &text.values;
  for (int l = 1; l <= config_.layers; ++l) {
    out.layers.push_back(cross_attention_layer(*h, visual, l));
    h = &out.layers.back().hidden;
  }
  out.similarity.value = readout(text.values, *h);

  // Reverse pass. g holds ds/dH for the current layer's output.
  const auto n_t = static_cast<double>(text.values.rows());
  const int dh = config_.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Matrix g = (text.values.array().rowwise() *
              params_.readout.transpose().array()) / n_t;
  out.similarity.gradients.resize(config_.layers);
  for (int l = config_.layers; l >= 1; --l) {
    const auto& rec = out.layers[l - 1];
    const auto& lp = params_.layers[l - 1];
    const Matrix d_concat = g * lp.output.transpose();
    auto& grads = out.similarity.gradients[l - 1];
    grads.resize(config_.heads);
    for (int hd = 0; hd < config_.heads; ++hd)
      grads[hd] = d_concat.middleCols(hd * dh, dh) * rec.values[hd].transpose();
    if (l == 1) break;

    const Matrix k = visual.values * lp.key;
    Matrix d_query(text.values.rows(), config_.dim);
    for (int hd = 0; hd < config_.heads; ++hd) {
      const Matrix& a = rec.attention[hd];
      const Matrix& da = grads[hd];
      const Vector row_dot = (a.array() * da.array()).rowwise().sum();
      const Matrix dz =
          (a.array() * (da.colwise() - row_dot).array()).matrix();
      d_query.middleCols(hd * dh, dh) = dz * k.middleCols(hd * dh, dh) * scale;
    }
    g = d_query * lp.query.transpose();
  }
  return out;
}

double ToyEncoder::similarity_with_attention(const TextFeatures& text,
                                             const VisualFeatures& visual,
                                             int layer, int head,
                                             const Matrix& attention) const {
  check_features(text, visual);
  if (layer < 1 || layer > config_.layers || head < 0 || head >= config_.heads)
    throw InvalidInput("layer/head index out of range");
  Matrix h = text.values;
  for (int l = 1; l <= config_.layers; ++l) {
    AttentionRecord rec = cross_attention_layer(h, visual, l);
    if (l == layer) {
      if (attention.rows() != rec.attention[head].rows() ||
          attention.cols() != rec.attention[head].cols())
        throw InvalidInput("attention override has the wrong shape");
      rec.attention[head] = attention;
      rec.hidden = layer_hidden(rec.attention, rec.values, l);
    }
    h = std::move(rec.hidden);
  }
  return readout(text.values, h);
}

Matrix finite_diff_grad(const ToyEncoder& encoder, const TextFeatures& text,
                        const VisualFeatures& visual, int layer, int head,
                        double eps) {
  if (!(eps > 0)) throw InvalidInput("finite-difference step must be positive");
  const auto& cfg = encoder.config();
  if (layer < 1 || layer > cfg.layers || head < 0 || head >= cfg.heads)
    throw InvalidInput("layer/head index out of range");

  Matrix h = text.values;
  for (int l = 1; l < layer; ++l)
    h = encoder.cross_attention_layer(h, visual, l).hidden;
  const Matrix base = encoder.cross_attention_layer(h, visual, layer).attention[head];

  Matrix grad(base.rows(), base.cols());
  Matrix probe = base;
  for (Eigen::Index t = 0; t < base.rows(); ++t)
    for (Eigen::Index j = 0; j < base.cols(); ++j) {
      probe(t, j) = base(t, j) + eps;
      const double up =
          encoder.similarity_with_attention(text, visual, layer, head, probe);
      probe(t, j) = base(t, j) - eps;
      const double down =
          encoder.similarity_with_attention(text, visual, layer, head, probe);
      probe(t, j) = base(t, j);
      grad(t, j) = (up - down) / (2 * eps);
    }
  return grad;
}

ActivationMap grad_cam(const AttentionRecord& record,
                       const std::vector<Matrix>& gradients, int token_index,
                       GridShape grid) {
  if (record.attention.empty() || gradients.size() != record.attention.size())
    throw InvalidInput("gradient heads do not match attention heads");
  const auto n_t = record.attention.front().rows();
  if (token_index < 0 || token_index >= n_t)
    throw InvalidInput("token index out of range");
  if (record.attention.front().cols() != grid.cells())
    throw InvalidInput("grid does not match attention width");

  ActivationMap out;
  out.token_index = token_index;
  out.grid = grid;
  out.phi = Vector::Zero(grid.cells());
  for (std::size_t h = 0; h < gradients.size(); ++h) {
    const Matrix& a = record.attention[h];
    const Matrix& g = gradients[h];
    if (g.rows() != a.rows() || g.cols() != a.cols())
      throw InvalidInput("gradient shape does not match attention");
    out.phi += (a.row(token_index).array() *
                g.row(token_index).array().max(0.0)).matrix().transpose();
  }
  out.phi /= static_cast<double>(gradients.size());
  return out;
}

ActivationMap grad_cam(const ForwardResult& result, const ModelConfig& config,
                       int token_index) {
  const int l = config.gradcam_layer;
  if (l < 1 || l > static_cast<int>(result.layers.size()))
    throw InvalidInput("gradcam layer missing from forward result");
  return grad_cam(result.layers[l - 1], result.similarity.gradients[l - 1],
                  token_index, config.grid);
}

}  // namespace capdet::vlm
