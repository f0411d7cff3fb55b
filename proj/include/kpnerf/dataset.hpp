#pragma once

#include "kpnerf/camera.hpp"
#include "kpnerf/synth.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace kpnerf {

/// In-memory copy of a dataset directory.
struct Dataset {
  int dim = 2;
  int frames = 0;
  int width = 0;
  double near = 0.0;
  double far = 1.0;
  Eigen::Vector3d background{1.0, 1.0, 1.0};
  Vec2 bounds_lo{-1.0, -1.0};
  Vec2 bounds_hi{1.0, 1.0};
  std::vector<std::string> part_names;
  std::vector<Camera> cameras;
  std::vector<Matrix> rgb;       // per frame, W x 3
  std::vector<Vector> depth;     // per frame
  std::vector<Vector> flow_fw;   // frames 0..T-2
  std::vector<Vector> flow_bw;   // frames 1..T-1, stored at index t
  std::vector<std::vector<std::uint16_t>> masks;
  std::vector<synth::Track> tracks;

  double diagonal() const { return (bounds_hi - bounds_lo).norm(); }
  /// Forward flow t -> t+1 (t < T-1) or backward flow t -> t-1 (t > 0).
  const Vector& forward_flow(int t) const { return flow_fw.at(t); }
  const Vector& backward_flow(int t) const { return flow_bw.at(t); }
};

/// Linear interpolation of a per-pixel signal between pixel centers; clamps at the ends.
double sample_pixels(const Vector& values, double u);

/// Renders the spec, applies seeded noise and writes the dataset directory.
/// `png` additionally writes preview.png (frames stacked as rows).
void generate(const synth::SceneSpec& spec, std::uint64_t seed, const std::filesystem::path& dir,
              bool png = false);

Dataset load_dataset(const std::filesystem::path& dir);

struct ValidationReport {
  bool ok = true;
  std::vector<std::string> errors;
  std::vector<std::string> notes;
  /// Largest |interpolated flow - track displacement| over visible track pairs.
  double max_track_flow_error = 0.0;
};

/// `flow_tolerance` bounds the track-consistency residual in pixels; by default
/// 0.25 px plus five noise deviations taken from the stored spec.
ValidationReport validate_dataset(const std::filesystem::path& dir, double flow_tolerance = -1.0);

/// Writes an RGB strip image (rows x width) as 8-bit PNG.
void write_png(const std::filesystem::path& path, const std::vector<Matrix>& rows);

}  // namespace kpnerf
