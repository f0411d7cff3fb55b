#pragma once

#include "kpnerf/adam.hpp"
#include "kpnerf/dataset.hpp"
#include "kpnerf/fields.hpp"
#include "kpnerf/renderer.hpp"

#include <functional>
#include <iosfwd>
#include <optional>
#include <stdexcept>

namespace kpnerf {

struct LossWeights {
  double motion = 1e-4;
  double geo = 0.5;
  double reg = 0.1;
};

struct TrainConfig {
  int stage1_steps = 20000;
  int stage2_steps = 30000;
  int rays_per_batch = 512;
  int samples = 64;
  std::uint64_t seed = 0;

  double learning_rate = 1e-3;
  /// The rate decays exponentially to learning_rate * final_rate_factor at the last step.
  double final_rate_factor = 0.1;

  LossWeights weights;
  /// Stage-1 penalty on squared ambient coordinates; keeps static regions at a = 0.
  double ambient_penalty = 0.03;

  /// Coarse-to-fine window on the warp encoding over the first `anneal_fraction` of stage 2.
  bool anneal_warp = false;
  double anneal_fraction = 0.2;

  int surface_refresh = 500;
  int surface_pool = 256;
  int reg_points = 64;
  int keypoint_pairs = 512;

  bool freeze_keypoints = false;
  /// Metrics cadence; the probe view is rendered every `probe_every` steps (0 disables).
  int log_every = 100;
  int probe_every = 1000;
  int probe_frame = 0;
  /// Steps between MetricsSink::checkpoint calls (0 disables).
  int checkpoint_every = 0;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// Training aborted because a loss or gradient became non-finite.
class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Per-pixel signals a key-point loss reads at continuous pixel positions.
using PixelSignal = std::function<double(int frame, double u)>;

struct KeypointSupervision {
  std::vector<Camera> cameras;
  PixelSignal forward_flow;  // F_t^{t+1}(u), t < T-1
  PixelSignal depth;         // D_t(u)
  PixelSignal opacity;       // opacity behind D_t(u)
  double min_opacity = 0.1;
};

/// Linear interpolation of stored maps, matching how the losses sample images.
KeypointSupervision dataset_supervision(const Dataset& data, std::vector<Vector> depth,
                                        std::vector<Vector> opacity);

struct PairLoss {
  double value = 0.0;
  Vec2 grad_a = Vec2::Zero();  // d/d k_t
  Vec2 grad_b = Vec2::Zero();  // d/d k_{t+1} (motion only)
  bool active = false;
};

/// |Pi_{t+1}(k_{t+1}) - Pi_t(k_t) - F_t(Pi_t(k_t))|^2; inactive when either
/// projection is behind its camera or outside the image.
PairLoss loss_motion(const KeypointSupervision& sup, int t, const Vec2& k_t, const Vec2& k_next);
/// |Phi_t(k) - D_t(Pi_t(k))|^2; inactive outside the image or where opacity < min_opacity.
PairLoss loss_geo(const KeypointSupervision& sup, int t, const Vec2& k);

struct KeypointLossTotals {
  double motion = 0.0;
  double geo = 0.0;
  int motion_terms = 0;
  int geo_terms = 0;
};

/// Sums the weighted key-point losses over (t, i) pairs and adds their gradients to
/// `grad` (rows t * N + i). Empty `pairs` means every pair.
KeypointLossTotals keypoint_losses(const KeypointSupervision& sup, const KeyPointSet& kp,
                                   const LossWeights& w, Matrix* grad,
                                   const std::vector<std::pair<int, int>>& pairs = {});

/// Mean squared error over all colour channels.
double loss_rec(const Matrix& rendered, const Matrix& target);
Var loss_rec(Var rendered, const Matrix& target);

/// Warp of world points for each point's frame.
using WarpFn = std::function<Var(Graph&, Var points, const std::vector<int>& frames)>;
WarpFn scene_warp(const SceneModel& model);
WarpFn stage1_warp(const Stage1Model& model);
/// Mean of |x - T(x, beta_t)|^2 over the given points.
Var loss_reg(Graph& g, const WarpFn& warp, const Matrix& points, const std::vector<int>& frames);

/// Surface points (expected termination of rays with opacity > 0.5) per frame.
struct SurfacePool {
  std::vector<Matrix> points;  // per frame, rows are points
  int total() const;
};

SurfacePool collect_surface_points(const RadianceModel& model, const std::vector<Camera>& cameras,
                                   int samples, int per_frame, std::uint64_t seed);
SurfacePool surface_points_from(const std::vector<RenderOutput>& renders,
                                const std::vector<Camera>& cameras, int per_frame, std::uint64_t seed);

/// Renders every training frame of a model.
std::vector<RenderOutput> render_frames(const RadianceModel& model, const std::vector<Camera>& cameras,
                                        int samples,
                                        const Eigen::Vector3d& background = Eigen::Vector3d::Ones());

double psnr(const Matrix& a, const Matrix& b);

struct MetricsSink {
  std::ostream* out = nullptr;
  std::function<void(const nlohmann::json&)> callback;
  /// Called between steps, never during one: (stage, completed steps, model).
  std::function<void(int, int, const RadianceModel&)> checkpoint;
  void write(const nlohmann::json& record) const;
};

FieldConfig field_config_for(const Dataset& data, int keypoints, std::uint64_t seed);

struct Stage1Result {
  std::unique_ptr<Stage1Model> model;
  std::vector<RenderOutput> renders;  // per frame at training resolution

  std::vector<Vector> depth_maps(double far) const;
  std::vector<Vector> opacity_maps() const;
};

/// Reconstruction + warp regularization + ambient penalty on a stage-1 hyperspace model.
Stage1Result train_stage1(const Dataset& data, const TrainConfig& cfg,
                          const FieldConfig& field, const MetricsSink& metrics = {});

/// Joint optimization of the key-point conditioned model from initial tracks.
std::unique_ptr<SceneModel> train_stage2(const Dataset& data, const KeypointSupervision& sup,
                                         const KeyPointSet& initial, const TrainConfig& cfg,
                                         const FieldConfig& field, const MetricsSink& metrics = {});

}  // namespace kpnerf
