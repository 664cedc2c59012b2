// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "flowkit/mlp.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace flowkit {

/// Degree assignment and binary masks of a MADE network. Input j carries
/// degree j (1-based); an output of degree k may depend on inputs 1..k only.
/// Masks have the [in x out] layout of DenseLayer weights; an entry is 1 when
/// the source degree is <= the destination degree.
struct MadeLayout {
  std::vector<Index> input_degrees;
  std::vector<std::vector<Index>> hidden_degrees;
  std::vector<std::vector<Index>> head_degrees;
  MlpMasks masks;
};

/// General form: one degree list per output head. Hidden degrees are drawn
/// from {1..D-1} by a seeded shuffle of the cyclic sequence 1, 2, ..., D-1,
/// 1, 2, ..., so every degree occurs whenever the layer is wide enough.
MadeLayout made_layout(Index dim, std::span<const Index> hidden_widths,
                       std::vector<std::vector<Index>> head_degrees, std::uint64_t seed);

/// Masks for an affine autoregressive conditioner: `layer_widths` runs from D
/// through the hidden widths to 2(D - 1); the output splits into a scale half
/// and a shift half, each with degrees 1..D-1 in order.
MadeLayout made_masks(std::span<const Index> layer_widths, Index dim, std::uint64_t seed);

}  // namespace flowkit
