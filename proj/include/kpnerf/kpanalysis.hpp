#pragma once

#include "kpnerf/dataset.hpp"
#include "kpnerf/fields.hpp"
#include "kpnerf/renderer.hpp"

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <stdexcept>

namespace kpnerf {

struct AnalysisConfig {
  int grid = 64;
  double sigma = 1.5;          // Gaussian smoothing, cells
  double min_coverage = 0.25;  // fraction of frames a cell must be observed in
  double rho = 0.2;            // score floor relative to the global maximum
  double suppression = 8.0;    // non-maximum suppression radius, cells
  double delta_fraction = 0.01;
  int skip_every = 0;          // M; 0 means ceil(T / 8)
  double conf_threshold = 0.5;
  double conf_eps = 1e-6;
  int samples = 64;
  double surface_opacity = 0.5;
  /// Surface rays per pixel when collecting ambient samples.
  int rays_per_pixel = 4;

  int skip_interval(int frames) const { return skip_every > 0 ? skip_every : (frames + 7) / 8; }
};

void to_json(nlohmann::json& j, const AnalysisConfig& c);
void from_json(const nlohmann::json& j, AnalysisConfig& c);

class AnalysisError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct AmbientSample {
  Vec2 canonical;
  int frame = 0;
  Vector ambient;
};

struct VarianceGrid {
  GridSpec spec;
  int frames = 0;
  int ambient_dim = 0;
  std::vector<Matrix> frame_means;                // per frame, cells x A
  std::vector<std::vector<int>> frame_counts;     // per frame, samples per cell
  std::vector<int> observed;                      // frames with at least one sample
  Vector variance;                                // raw, 0 where unobserved
  Vector smoothed;
  std::vector<std::uint8_t> valid;

  int cells() const { return spec.nx * spec.ny; }
  int index(int ix, int iy) const { return iy * spec.nx + ix; }
  /// Cell containing a point, or -1 outside the grid.
  int locate(const Vec2& x) const;
  /// nx x ny matrices (row iy) for inspection.
  Matrix variance_image() const;
  Matrix smoothed_image() const;
};

/// Per-frame per-cell means, population variance across frames (summed over
/// components), validity by coverage, then Gaussian smoothing over valid cells.
VarianceGrid accumulate_variance(const GridSpec& grid, int frames, int ambient_dim,
                                 const std::vector<AmbientSample>& samples, const AnalysisConfig& cfg);

/// Gaussian filter in which invalid cells contribute 0; invalid cells stay 0 in the output.
Vector smooth_valid(const Vector& values, const std::vector<std::uint8_t>& valid, int nx, int ny,
                    double sigma);

/// Surface points of every frame (opacity > threshold), warped to canonical space,
/// with their ambient coordinates.
std::vector<AmbientSample> ambient_samples(const Stage1Model& model, const std::vector<Camera>& cameras,
                                           const AnalysisConfig& cfg);

VarianceGrid build_variance_grid(const Dataset& data, const Stage1Model& model,
                                 const AnalysisConfig& cfg);

struct ReferenceKeyPoint {
  Vec2 position = Vec2::Zero();  // cell center
  double score = 0.0;
  int ix = 0;
  int iy = 0;
  int frame = -1;  // t_ref once selected
};

/// Strict local maxima above rho * max, greedy suppression, sorted by score (ties by (ix, iy)).
std::vector<ReferenceKeyPoint> detect_reference_keypoints(const VarianceGrid& grid,
                                                          const AnalysisConfig& cfg);

/// Smallest frame whose depth agrees with the key point within delta.
int select_reference_frame(const Vec2& k, const std::vector<Vector>& depth,
                           const std::vector<Camera>& cameras, double delta);

/// Optical flow between frames at continuous pixel positions.
class FlowSource {
 public:
  virtual ~FlowSource() = default;
  virtual int frames() const = 0;
  virtual int width() const = 0;
  /// Flow from `from` to `to` (|to - from| == 1).
  virtual double step(int from, int to, double u) const = 0;
  /// Flow between arbitrary frames; the default composes clamped per-frame steps.
  virtual double direct(int from, int to, double u) const;

  double clamp(double u) const { return std::clamp(u, 0.0, static_cast<double>(width())); }
};

/// Per-frame forward and backward flow maps with linear sampling.
class MapFlowSource : public FlowSource {
 public:
  MapFlowSource(std::vector<Vector> forward, std::vector<Vector> backward, int width);
  explicit MapFlowSource(const Dataset& data);
  int frames() const override { return frames_; }
  int width() const override { return width_; }
  double step(int from, int to, double u) const override;

 private:
  std::vector<Vector> forward_;
  std::vector<Vector> backward_;
  int frames_ = 0;
  int width_ = 0;
};

/// Per-frame maps for steps plus independent long-range maps produced on demand
/// (e.g. by an oracle or a flow network), cached per frame pair.
class DirectFlowSource : public MapFlowSource {
 public:
  using PairFn = std::function<Vector(int from, int to)>;
  DirectFlowSource(const Dataset& data, PairFn pair);
  double direct(int from, int to, double u) const override;

 private:
  PairFn pair_;
  mutable std::map<std::pair<int, int>, Vector> cache_;
  mutable std::mutex mutex_;
};

enum class Provenance { reference, frame_by_frame, skip };
std::string to_string(Provenance p);
Provenance provenance_from_string(const std::string& s);

struct KeyPointTrack {
  Vec2 k_ref = Vec2::Zero();
  int t_ref = 0;
  double score = 0.0;
  std::vector<double> pixel;
  std::vector<Vec2> world;
  std::vector<double> confidence;
  std::vector<Provenance> provenance;
  std::vector<bool> clamped;
};

struct Lifting {
  const std::vector<Vector>* depth = nullptr;
  const std::vector<Camera>* cameras = nullptr;
};

/// 1 / (eps + |round trip - u_ref|) through direct flows t_ref -> t -> t_ref.
double flow_confidence(const FlowSource& flow, double u_ref, int t_ref, int t, double eps = 1e-6);

/// Frame-by-frame propagation from the reference projection, clamped to the image, lifted by depth.
KeyPointTrack propagate(const Vec2& k_ref, int t_ref, const FlowSource& flow, const Lifting& lift,
                        double eps = 1e-6);

/// Replaces every M-th frame from t_ref with its direct-flow position when the round trip
/// is confident, re-propagating frame by frame up to the next anchor.
KeyPointTrack skipping_propagate(const KeyPointTrack& track, const FlowSource& flow, const Lifting& lift,
                                 int every, double threshold, double eps = 1e-6);

struct AnalysisResult {
  VarianceGrid grid;
  std::vector<ReferenceKeyPoint> references;
  std::vector<KeyPointTrack> tracks;
};

/// Grid, detection, reference frames and skipping-propagated tracks.
AnalysisResult analyze(const Dataset& data, const Stage1Model& model, const std::vector<Vector>& depth,
                       const FlowSource& flow, const AnalysisConfig& cfg);

KeyPointSet to_keypoint_set(const std::vector<KeyPointTrack>& tracks);

nlohmann::json tracks_to_json(const std::vector<KeyPointTrack>& tracks);
std::vector<KeyPointTrack> tracks_from_json(const nlohmann::json& j);
void save_tracks(const std::filesystem::path& path, const std::vector<KeyPointTrack>& tracks);
std::vector<KeyPointTrack> load_tracks(const std::filesystem::path& path);

}  // namespace kpnerf
