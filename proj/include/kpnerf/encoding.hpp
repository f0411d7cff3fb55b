#pragma once

#include "kpnerf/graph.hpp"

#include <optional>

namespace kpnerf {

/// Frequency encoding [x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^{L-1} pi x), cos(...)].
/// With a window alpha in [0, L], band l is scaled by (1 - cos(pi * clamp(alpha - l, 0, 1))) / 2.
struct PositionalEncoder {
  int bands = 0;
  bool include_identity = true;
  std::optional<double> window = std::nullopt;

  int output_dim(int input_dim) const {
    return input_dim * ((include_identity ? 1 : 0) + 2 * bands);
  }
  double band_weight(int band) const;
};

/// Encodes every row of `x`.
Matrix encode(const Matrix& x, const PositionalEncoder& enc);
Vector encode(const Vector& x, const PositionalEncoder& enc);
/// Differentiable encoding of every row.
Var encode(Var x, const PositionalEncoder& enc);

}  // namespace kpnerf
