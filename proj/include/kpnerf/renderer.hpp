#pragma once

#include "kpnerf/camera.hpp"
#include "kpnerf/field.hpp"

#include <cstdint>
#include <optional>

namespace kpnerf {

struct RenderOptions {
  int samples = 64;
  /// Stratified jitter inside each bin; off means bin centers.
  bool jitter = false;
  std::uint64_t seed = 0;
  Eigen::Vector3d background{1.0, 1.0, 1.0};
};

struct RayBatch {
  Matrix origins;     // R x D
  Matrix directions;  // R x D unit rows
  std::vector<int> frames;
  /// Identifies each ray for jitter generation, so samples do not depend on batch layout.
  std::vector<std::uint64_t> keys;
  double near = 0.0;
  double far = 1.0;

  int size() const { return static_cast<int>(origins.rows()); }
};

/// Sample positions along each ray. Row r holds the sample distances of ray r.
/// Sample j represents the quadrature interval [entry_j, entry_{j+1}) whose
/// boundaries are midpoints between neighbouring samples, clipped to [near, far].
struct RaySamples {
  Matrix distances;  // R x S
  Matrix entries;    // R x S, interval start
  Matrix deltas;     // R x S, interval length; rows sum to far - near
};

RaySamples sample_rays(const RayBatch& rays, const RenderOptions& options);

struct Composite {
  Var color;    // R x 3
  Var depth;    // R x 1
  Var opacity;  // R x 1
  Matrix weights;  // R x S sample weights
};

/// Volumetric quadrature: w_j = T_j (1 - exp(-sigma_j delta_j)),
/// T_j = exp(-sum_{l<j} sigma_l delta_l), color = sum w_j c_j + (1 - opacity) bg,
/// depth = sum w_j entry_j / max(opacity, eps).
Composite composite(Var density, Var rgb, const RaySamples& samples,
                    const Eigen::Vector3d& background);

struct RenderResult {
  Composite out;
  FieldOutput field;
  RaySamples samples;
  SampleBatch batch;
};

/// Differentiable render of a ray batch on an existing graph.
RenderResult render_rays(Graph& g, const RadianceModel& model, const RayBatch& rays,
                         const RenderOptions& options, const Matrix* keypoints = nullptr);

struct RayRender {
  Eigen::Vector3d color;
  double depth = 0.0;
  double opacity = 0.0;
  Vector weights;
};

/// Throws std::invalid_argument for a degenerate direction or S < 2.
RayRender render_ray(const RadianceModel& model, const Ray& ray, double near, double far,
                     int frame, const RenderOptions& options,
                     const Matrix* keypoints = nullptr);

struct RenderOutput {
  Matrix color;    // W x 3
  Vector depth;    // W
  Vector opacity;  // W
};

RayBatch camera_rays(const Camera& cam, int frame, std::uint64_t key_base = 0);

RenderOutput render_image(const RadianceModel& model, const Camera& cam, int frame,
                          const RenderOptions& options, const Matrix* keypoints = nullptr);

/// Depth map for supervision: pixels with opacity below `min_opacity` report `far`.
Vector supervision_depth(const RenderOutput& image, double far, double min_opacity = 0.1);

struct GridSpec {
  Vec2 lo{-1.0, -1.0};
  Vec2 hi{1.0, 1.0};
  int nx = 64;
  int ny = 64;

  Vec2 cell_center(int ix, int iy) const;
};

/// Density on the cell centers of `grid`, row iy, column ix. Requires D = 2.
Matrix render_density_map(const RadianceModel& model, const GridSpec& grid, int frame,
                          const Matrix* keypoints = nullptr);

}  // namespace kpnerf
