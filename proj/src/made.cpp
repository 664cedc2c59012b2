// SPDX-License-Identifier: Apache-2.0
#include "flowkit/made.hpp"

#include "flowkit/random.hpp"

#include <numeric>
#include <string>

namespace flowkit {

namespace {

Matrix connect(const std::vector<Index>& from, const std::vector<Index>& to) {
  Matrix mask(static_cast<Index>(from.size()), static_cast<Index>(to.size()));
  for (std::size_t i = 0; i < from.size(); ++i) {
    for (std::size_t o = 0; o < to.size(); ++o) {
      mask(static_cast<Index>(i), static_cast<Index>(o)) = from[i] <= to[o] ? 1.0 : 0.0;
    }
  }
  return mask;
}

}  // namespace

MadeLayout made_layout(Index dim, std::span<const Index> hidden_widths,
                       std::vector<std::vector<Index>> head_degrees, std::uint64_t seed) {
  require(dim >= 2, "made_masks: D must be >= 2, got " + std::to_string(dim));
  Rng rng(seed);
  MadeLayout layout;
  layout.input_degrees.resize(static_cast<std::size_t>(dim));
  std::iota(layout.input_degrees.begin(), layout.input_degrees.end(), Index{1});
  layout.hidden_degrees.reserve(hidden_widths.size());

  const std::vector<Index>* previous = &layout.input_degrees;
  for (Index width : hidden_widths) {
    require(width >= 1, "made_masks: hidden widths must be positive");
    std::vector<Index> degrees(static_cast<std::size_t>(width));
    for (Index u = 0; u < width; ++u) degrees[u] = 1 + u % (dim - 1);
    rng.shuffle(degrees.begin(), degrees.end());
    layout.hidden_degrees.push_back(std::move(degrees));
    layout.masks.hidden.push_back(connect(*previous, layout.hidden_degrees.back()));
    previous = &layout.hidden_degrees.back();
  }
  for (auto& degrees : head_degrees) {
    for (Index d : degrees) {
      require(d >= 0 && d < dim, "made_masks: output degrees must lie in 0..D-1");
    }
    layout.masks.heads.push_back(connect(*previous, degrees));
  }
  layout.head_degrees = std::move(head_degrees);
  return layout;
}

MadeLayout made_masks(std::span<const Index> layer_widths, Index dim, std::uint64_t seed) {
  require(dim >= 2, "made_masks: D must be >= 2, got " + std::to_string(dim));
  require(layer_widths.size() >= 2 && layer_widths.front() == dim &&
              layer_widths.back() == 2 * (dim - 1),
          "made_masks: widths must start at D and end at 2(D - 1)");
  std::vector<Index> half(static_cast<std::size_t>(dim - 1));
  std::iota(half.begin(), half.end(), Index{1});
  return made_layout(dim, layer_widths.subspan(1, layer_widths.size() - 2), {half, half}, seed);
}

}  // namespace flowkit
