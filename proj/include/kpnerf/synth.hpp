#pragma once

#include "kpnerf/camera.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace kpnerf::synth {

using Color = std::array<double, 3>;

enum class ShapeKind { rect, disc };

/// Axis-aligned rectangle or disc, in part-local coordinates for dynamic parts
/// and world coordinates for static shapes.
struct Shape {
  ShapeKind kind = ShapeKind::rect;
  Vec2 center = Vec2::Zero();
  Vec2 size = Vec2::Ones();  // rect extent
  double radius = 0.5;       // disc
  Color color{0.5, 0.5, 0.5};
  /// Stripe texture along the surface: brightness varies by up to `stripe_amp`.
  double stripe_amp = 0.0;
  double stripe_period = 0.1;
};

/// Scripted excursion: the part moves by `offset` and back, holding the extreme
/// for the middle half of [start, end].
struct Episode {
  int start = 0;
  int end = 0;
  Vec2 offset = Vec2::Zero();
};

/// Region attached to a part that darkens every other surface inside it.
struct Shade {
  Vec2 center = Vec2::Zero();
  Vec2 size = Vec2::Zero();
  double factor = 0.6;
};

struct Part {
  std::string name;
  Vec2 origin = Vec2::Zero();  // rest position of the local frame
  std::vector<Shape> shapes;
  std::vector<Episode> episodes;
  std::vector<Shade> shades;
  /// Brightness of the part itself at full displacement, blended linearly with
  /// |offset| / max episode |offset|. 1 keeps the part unchanged.
  double press_shade = 1.0;
  /// Ground-truth key point in local coordinates.
  Vec2 marker = Vec2::Zero();
};

struct CameraPath {
  Vec2 target = Vec2::Zero();
  double radius = 2.0;
  double azimuth_start = 0.0;
  double azimuth_end = 0.0;
  double focal = 80.0;
};

struct NoiseSpec {
  double flow_sigma = 0.0;
  double image_sigma = 0.0;
};

struct SceneSpec {
  std::string name;
  int frames = 1;
  int width = 96;
  double near = 1.0;
  double far = 3.0;
  Color background{1.0, 1.0, 1.0};
  Vec2 bounds_lo{-1.0, -1.0};
  Vec2 bounds_hi{1.0, 1.0};
  CameraPath camera;
  std::vector<Shape> statics;
  std::vector<Part> parts;
  NoiseSpec noise;

  /// Throws std::invalid_argument describing the first violated invariant.
  void validate() const;
};

void to_json(nlohmann::json& j, const SceneSpec& s);
void from_json(const nlohmann::json& j, SceneSpec& s);
SceneSpec load_spec(const std::filesystem::path& path);

/// Displacement of every part from its rest position (one row per part).
using PartOffsets = std::vector<Vec2>;

PartOffsets offsets_at(const SceneSpec& spec, int t);
/// Profile in [0, 1] of an episode at frame t.
double episode_profile(const Episode& e, int t);
Camera camera_at(const SceneSpec& spec, int t);

/// Marker position of `part` in world coordinates under `offsets`.
Vec2 marker_world(const SceneSpec& spec, const PartOffsets& offsets, int part);

struct Hit {
  bool found = false;
  double distance = 0.0;
  int id = 0;  // 0 background, 1..P dynamic parts, P+1 static scenery
  int part = -1;
  Vec2 point = Vec2::Zero();
  Color color{0, 0, 0};
};

/// First surface along a ray, front-most over all shapes.
Hit cast(const SceneSpec& spec, const PartOffsets& offsets, const Ray& ray);

struct Raster {
  Matrix rgb;    // W x 3
  Vector depth;  // W, first-hit distance or far
  std::vector<std::uint16_t> ids;
};

Raster rasterize(const SceneSpec& spec, const PartOffsets& offsets, const Camera& cam);

/// Exact forward flow t -> t+1 (or backward, t -> t-1) seen at continuous pixel `u` of frame t.
/// Returns nullopt for background pixels and surface points hidden in the target frame.
std::optional<double> flow_at(const SceneSpec& spec, int t, int target, double u);

struct FlowField {
  Vector flow;
  std::vector<std::uint8_t> valid;
};

/// Per-pixel flow from frame t to `target` at pixel centers; invalid pixels take the
/// flow of the nearest valid pixel (zero if none).
FlowField exact_flow(const SceneSpec& spec, int t, int target);

struct Track {
  std::string part;
  std::vector<Vec2> world;
  std::vector<double> pixel;
  std::vector<double> distance;
  std::vector<bool> visible;
};

std::vector<Track> ground_truth_tracks(const SceneSpec& spec);

}  // namespace kpnerf::synth
