#pragma once

#include "kpnerf/graph.hpp"

#include <optional>
#include <vector>

namespace kpnerf {

/// World-space query points with the frame whose latent codes condition them.
struct SampleBatch {
  Matrix points;            // B x D
  Matrix directions;        // B x D, unit rows
  std::vector<int> frames;  // B entries
};

struct FieldOutput {
  Var density;    // B x 1, >= 0
  Var rgb;        // B x 3, in [0,1]
  Var canonical;  // B x D warped points
  Var weights;    // B x N key-point weights (invalid when not applicable)
  Var ambient;    // B x A hyperspace coordinates (ambient or weighted key points)
};

/// Anything the volume renderer can query.
class RadianceModel {
 public:
  virtual ~RadianceModel() = default;

  virtual int dim() const = 0;
  /// Parameter store backing the model (may be null for analytic fields).
  virtual const ParamStore* param_store() const = 0;
  virtual ParamStore* mutable_param_store() = 0;

  /// `keypoints`, when present, replaces every frame's key-point positions (N x D).
  virtual FieldOutput evaluate(Graph& g, const SampleBatch& batch,
                               const Matrix* keypoints = nullptr) const = 0;
};

}  // namespace kpnerf
