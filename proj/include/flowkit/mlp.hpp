// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "flowkit/autodiff.hpp"
#include "flowkit/random.hpp"
#include "flowkit/tensor.hpp"

#include <json.hpp>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace flowkit {

enum class Activation { linear, relu, tanh };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& name);

/// y = act(x · (W ⊙ M) + b). W is [in x out], b is [1 x out]; the mask M is
/// optional and binary.
struct DenseLayer {
  ad::Var weight;
  ad::Var bias;
  std::optional<Matrix> mask;

  Index in_width() const { return weight.rows(); }
  Index out_width() const { return weight.cols(); }
  ad::Var apply(const ad::Var& x) const;
};

struct HeadSpec {
  Index width = 0;
  Activation activation = Activation::linear;
};

/// Optional MADE-style connectivity: one mask per hidden layer and one per
/// head, each shaped like the weight it multiplies.
struct MlpMasks {
  std::vector<Matrix> hidden;
  std::vector<Matrix> heads;
};

/// How output-head weights start out. `zero` makes every head emit exactly 0
/// (linear and tanh alike), which turns the owning bijector into the identity.
enum class HeadInit { glorot, zero };

/// Multilayer perceptron with rectifier hidden layers and one or more output
/// heads, each a separate dense layer with its own activation.
class Mlp {
 public:
  Mlp() = default;
  Mlp(Index input_width, std::vector<Index> hidden_widths, std::vector<HeadSpec> heads,
      std::uint64_t seed, HeadInit head_init = HeadInit::glorot, std::optional<MlpMasks> masks = {});

  /// Assembles a net from explicit layers (tests and deserialization).
  Mlp(std::vector<DenseLayer> hidden, std::vector<DenseLayer> heads,
      std::vector<Activation> head_activations);

  std::vector<ad::Var> forward(const ad::Var& input) const;
  std::vector<Matrix> forward(const Matrix& input) const;

  std::vector<ad::Var> parameters() const;

  Index input_width() const;
  const std::vector<DenseLayer>& hidden_layers() const { return hidden_; }
  const std::vector<DenseLayer>& head_layers() const { return heads_; }
  const std::vector<Activation>& head_activations() const { return head_activations_; }

  nlohmann::json to_json() const;
  static Mlp from_json(const nlohmann::json& j);

 private:
  std::vector<DenseLayer> hidden_;
  std::vector<DenseLayer> heads_;
  std::vector<Activation> head_activations_;
};

/// Uniform Glorot initialization: U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
Matrix glorot_uniform(Index fan_in, Index fan_out, Rng& rng);

/// {"rows", "cols", "data"} with row-major data; doubles are written in
/// shortest round-trip decimal form so loading is exact.
nlohmann::json matrix_to_json(const Matrix& m);
Matrix matrix_from_json(const nlohmann::json& j);

}  // namespace flowkit
