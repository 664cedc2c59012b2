// SPDX-License-Identifier: Apache-2.0
#include "flowkit/mlp.hpp"

#include <cmath>

namespace flowkit {

std::string to_string(Activation a) {
  switch (a) {
    case Activation::linear: return "linear";
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
  }
  return "linear";
}

Activation activation_from_string(const std::string& name) {
  if (name == "linear") return Activation::linear;
  if (name == "relu") return Activation::relu;
  if (name == "tanh") return Activation::tanh;
  throw ContractViolation("unknown activation '" + name + "'");
}

namespace {

ad::Var activate(const ad::Var& x, Activation a) {
  switch (a) {
    case Activation::relu: return ad::relu(x);
    case Activation::tanh: return ad::tanh(x);
    case Activation::linear: break;
  }
  return x;
}

DenseLayer make_layer(Index in, Index out, Rng& rng, bool zero, const Matrix* mask) {
  Matrix w = zero ? Matrix::Zero(in, out) : glorot_uniform(in, out, rng);
  DenseLayer layer;
  if (mask != nullptr) {
    require(mask->rows() == in && mask->cols() == out,
            "Mlp: mask shape " + shape_string(mask->rows(), mask->cols()) +
                " does not match weight " + shape_string(in, out));
    w = w.cwiseProduct(*mask);
    layer.mask = *mask;
  }
  layer.weight = ad::Var::parameter(std::move(w));
  layer.bias = ad::Var::parameter(Matrix::Zero(1, out));
  return layer;
}

}  // namespace

ad::Var DenseLayer::apply(const ad::Var& x) const {
  const ad::Var w = mask ? ad::mask_mul(weight, *mask) : weight;
  return ad::add_row(ad::matmul(x, w), bias);
}

Matrix glorot_uniform(Index fan_in, Index fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Matrix w(fan_in, fan_out);
  for (Index i = 0; i < w.size(); ++i) w.data()[i] = rng.uniform(-limit, limit);
  return w;
}

Mlp::Mlp(Index input_width, std::vector<Index> hidden_widths, std::vector<HeadSpec> heads,
         std::uint64_t seed, HeadInit head_init, std::optional<MlpMasks> masks) {
  require(input_width >= 1, "Mlp: input width must be positive");
  require(!heads.empty(), "Mlp: at least one head required");
  if (masks) {
    require(masks->hidden.size() == hidden_widths.size() && masks->heads.size() == heads.size(),
            "Mlp: one mask per layer required");
  }
  Rng rng(seed);
  Index width = input_width;
  for (std::size_t l = 0; l < hidden_widths.size(); ++l) {
    require(hidden_widths[l] >= 1, "Mlp: hidden widths must be positive");
    hidden_.push_back(
        make_layer(width, hidden_widths[l], rng, false, masks ? &masks->hidden[l] : nullptr));
    width = hidden_widths[l];
  }
  for (std::size_t h = 0; h < heads.size(); ++h) {
    require(heads[h].width >= 1, "Mlp: head widths must be positive");
    heads_.push_back(make_layer(width, heads[h].width, rng, head_init == HeadInit::zero,
                                masks ? &masks->heads[h] : nullptr));
    head_activations_.push_back(heads[h].activation);
  }
}

Mlp::Mlp(std::vector<DenseLayer> hidden, std::vector<DenseLayer> heads,
         std::vector<Activation> head_activations)
    : hidden_(std::move(hidden)), heads_(std::move(heads)),
      head_activations_(std::move(head_activations)) {
  require(!heads_.empty() && heads_.size() == head_activations_.size(),
          "Mlp: one activation per head required");
  for (std::size_t l = 1; l < hidden_.size(); ++l) {
    require(hidden_[l].in_width() == hidden_[l - 1].out_width(), "Mlp: hidden widths do not conform");
  }
  const Index trunk = hidden_.empty() ? heads_.front().in_width() : hidden_.back().out_width();
  for (const auto& h : heads_) require(h.in_width() == trunk, "Mlp: head widths do not conform");
}

Index Mlp::input_width() const {
  return hidden_.empty() ? heads_.front().in_width() : hidden_.front().in_width();
}

std::vector<ad::Var> Mlp::forward(const ad::Var& input) const {
  require(input.cols() == input_width(), "forward_mlp: input width " + std::to_string(input.cols()) +
                                             " != " + std::to_string(input_width()));
  ad::Var h = input;
  for (const auto& layer : hidden_) h = ad::relu(layer.apply(h));
  std::vector<ad::Var> out;
  out.reserve(heads_.size());
  for (std::size_t k = 0; k < heads_.size(); ++k) {
    out.push_back(activate(heads_[k].apply(h), head_activations_[k]));
  }
  return out;
}

std::vector<Matrix> Mlp::forward(const Matrix& input) const {
  std::vector<Matrix> out;
  for (const auto& v : forward(ad::Var::constant(input))) out.push_back(v.value());
  return out;
}

std::vector<ad::Var> Mlp::parameters() const {
  std::vector<ad::Var> params;
  for (const auto* group : {&hidden_, &heads_}) {
    for (const auto& layer : *group) {
      params.push_back(layer.weight);
      params.push_back(layer.bias);
    }
  }
  return params;
}

nlohmann::json matrix_to_json(const Matrix& m) {
  return {{"rows", m.rows()},
          {"cols", m.cols()},
          {"data", std::vector<double>(m.data(), m.data() + m.size())}};
}

Matrix matrix_from_json(const nlohmann::json& j) {
  const Index rows = j.at("rows").get<Index>();
  const Index cols = j.at("cols").get<Index>();
  const auto data = j.at("data").get<std::vector<double>>();
  require(static_cast<Index>(data.size()) == rows * cols, "matrix: data length does not match shape");
  Matrix m(rows, cols);
  std::copy(data.begin(), data.end(), m.data());
  return m;
}

namespace {

nlohmann::json layer_to_json(const DenseLayer& layer) {
  nlohmann::json j{{"weight", matrix_to_json(layer.weight.value())},
                   {"bias", matrix_to_json(layer.bias.value())}};
  if (layer.mask) j["mask"] = matrix_to_json(*layer.mask);
  return j;
}

DenseLayer layer_from_json(const nlohmann::json& j) {
  DenseLayer layer;
  layer.weight = ad::Var::parameter(matrix_from_json(j.at("weight")));
  layer.bias = ad::Var::parameter(matrix_from_json(j.at("bias")));
  if (j.contains("mask")) layer.mask = matrix_from_json(j.at("mask"));
  return layer;
}

}  // namespace

nlohmann::json Mlp::to_json() const {
  nlohmann::json hidden = nlohmann::json::array();
  for (const auto& l : hidden_) hidden.push_back(layer_to_json(l));
  nlohmann::json heads = nlohmann::json::array();
  for (std::size_t k = 0; k < heads_.size(); ++k) {
    auto j = layer_to_json(heads_[k]);
    j["activation"] = to_string(head_activations_[k]);
    heads.push_back(std::move(j));
  }
  return {{"hidden", hidden}, {"heads", heads}};
}

Mlp Mlp::from_json(const nlohmann::json& j) {
  std::vector<DenseLayer> hidden;
  for (const auto& l : j.at("hidden")) hidden.push_back(layer_from_json(l));
  std::vector<DenseLayer> heads;
  std::vector<Activation> acts;
  for (const auto& h : j.at("heads")) {
    heads.push_back(layer_from_json(h));
    acts.push_back(activation_from_string(h.at("activation").get<std::string>()));
  }
  return Mlp(std::move(hidden), std::move(heads), std::move(acts));
}

}  // namespace flowkit
