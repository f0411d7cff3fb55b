#pragma once

#include "kpnerf/dataset.hpp"
#include "kpnerf/fields.hpp"
#include "kpnerf/renderer.hpp"

#include <nlohmann/json.hpp>

#include <atomic>
#include <condition_variable>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace kpnerf {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class ModelKind { stage1, scene };

/// Everything a checkpoint file holds. Parameters (including key points and
/// latent tables) live in `store`; `meta` echoes configs and dataset facts.
struct Checkpoint {
  static constexpr int format_version = 1;

  ModelKind kind = ModelKind::scene;
  FieldConfig field;
  ParamStore store;
  std::vector<int> reference_frames;
  std::vector<Camera> cameras;
  double far = 1.0;
  Eigen::Vector3d background{1.0, 1.0, 1.0};
  nlohmann::json meta = nlohmann::json::object();
};

/// One JSON header line, then per block a little-endian u64 element count and
/// that many little-endian f64 values (row-major), in store order.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

Checkpoint make_checkpoint(const SceneModel& model, const std::vector<Camera>& cameras, double far,
                           const Eigen::Vector3d& background, nlohmann::json meta = {});
Checkpoint make_checkpoint(const Stage1Model& model, const std::vector<Camera>& cameras, double far,
                           const Eigen::Vector3d& background, nlohmann::json meta = {});
std::unique_ptr<SceneModel> scene_model(const Checkpoint& ckpt);
std::unique_ptr<Stage1Model> stage1_model(const Checkpoint& ckpt);

/// A render with user-chosen key points. Latent codes come from `base_frame`.
struct EditRequest {
  Camera camera;
  std::optional<Matrix> keypoints;  // N x D; unset uses the base frame's stored positions
  int base_frame = -1;              // -1 picks t_ref of key point 0
  std::uint64_t seed = 0;
  int samples = 64;
};

struct EditResult {
  RenderOutput image;
  Matrix density;  // ny x nx over the scene bounds
  GridSpec grid;
  bool extrapolated = false;
  int base_frame = 0;
};

/// True when some key point lies farther than `fraction` of the scene diagonal
/// outside the bounding box of all stored key-point positions.
bool extrapolation_warning(const KeyPointSet& stored, const Matrix& keypoints, double diagonal,
                           double fraction = 0.25);

EditResult render_edit(const SceneModel& model, const EditRequest& req,
                       const Eigen::Vector3d& background, int density_cells = 64);

/// Mean camera distance of the K stored key-point positions whose projections
/// land nearest to pixel u. Uses all in-front points when fewer than K exist.
double default_depth(double u, const Camera& cam, const KeyPointSet& tracks, int k = 4);

Matrix interpolate_keypoints(const Matrix& a, const Matrix& b, double s);

/// x -> A x + b in the plane.
struct Affine2 {
  Eigen::Matrix2d linear = Eigen::Matrix2d::Identity();
  Vec2 offset = Vec2::Zero();
  Vec2 operator()(const Vec2& x) const { return linear * x + offset; }
};

/// Least-squares affine map from >= 3 non-collinear correspondences.
Affine2 fit_affine(const std::vector<Vec2>& source, const std::vector<Vec2>& target);
std::vector<Vec2> motion_transfer(const std::vector<Vec2>& track, const std::vector<Vec2>& anchors_source,
                                  const std::vector<Vec2>& anchors_target);

struct TrailPoint {
  double time = 0.0;
  Matrix keypoints;  // N x D
};

/// Uniform time sampling of a piecewise-linear trail; `samples` >= 2 includes both ends.
std::vector<Matrix> sample_trail(std::vector<TrailPoint> trail, int samples);

/// Depth and opacity maps of a trained stage-1 model on the dataset views.
struct SurfaceMaps {
  std::vector<Vector> depth;
  std::vector<Vector> opacity;
};
SurfaceMaps surface_maps(const Stage1Model& model, const Dataset& data, int samples = 64);

/// Ground-truth track assigned to each key point: greedy by world distance at the
/// key point's reference frame, each track used at most once (-1 when none left).
std::vector<int> match_tracks(const KeyPointSet& kp, const std::vector<synth::Track>& tracks);

/// Projected pixel error per key point per frame against the matched track;
/// NaN where the track is hidden or no track is matched.
std::vector<std::vector<double>> track_errors(const KeyPointSet& kp, const std::vector<synth::Track>& tracks,
                                              const std::vector<Camera>& cameras,
                                              const std::vector<int>& matched);

struct EvalReport {
  std::vector<double> psnr;
  double mean_psnr = 0.0;
  std::vector<int> matched;
  std::vector<std::vector<double>> track_error;
  /// Fraction of visible (key point, frame) pairs within `px` pixels.
  double fraction_within(double px) const;
  double mean_track_error() const;
  nlohmann::json to_json() const;
};

EvalReport evaluate_model(const SceneModel& model, const Dataset& data, int samples = 64);

/// Image encoding on the wire: base64 of little-endian f64, row-major.
std::string encode_matrix(const Matrix& m);

nlohmann::json camera_to_json(const Camera& c);
Camera camera_from_json(const nlohmann::json& j);
nlohmann::json matrix_to_json(const Matrix& m);
Matrix matrix_from_json(const nlohmann::json& j);

/// Request handling behind the HTTP service, usable without a socket.
class Workbench {
 public:
  struct Response {
    int status = 200;
    nlohmann::json body;
  };

  explicit Workbench(Checkpoint ckpt, int k_depth = 4);

  Response state() const;
  Response keypoints(const std::string& frame) const;
  Response render(const std::string& body);
  Response default_depth(const std::string& body) const;
  Response video(const std::string& body);

  const SceneModel& model() const { return *model_; }
  const Checkpoint& checkpoint() const { return ckpt_; }
  EditRequest parse_edit(const nlohmann::json& j) const;
  nlohmann::json render_payload(const EditResult& r) const;

 private:
  /// Renders run one at a time in arrival order.
  class Ticket {
   public:
    explicit Ticket(Workbench& w);
    ~Ticket();

   private:
    Workbench& w_;
  };

  Checkpoint ckpt_;
  std::unique_ptr<SceneModel> model_;
  int k_depth_;
  std::mutex queue_mutex_;
  std::condition_variable queue_cv_;
  std::uint64_t next_ticket_ = 0;
  std::uint64_t serving_ = 0;
};

/// Blocks serving HTTP until stop() from another thread. Returns false when the port cannot be bound.
class Service {
 public:
  Service(Workbench& bench, int threads = 4);
  ~Service();
  bool listen(const std::string& host, int port);
  /// Binds to a free port and serves on a background thread; returns the port.
  int start(const std::string& host = "127.0.0.1");
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace kpnerf
