#pragma once

#include "kpnerf/encoding.hpp"
#include "kpnerf/field.hpp"
#include "kpnerf/mlp.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <optional>
#include <vector>

namespace kpnerf {

/// Architecture and initialization of the scene fields.
struct FieldConfig {
  int dim = 2;
  int frames = 1;
  int keypoints = 1;

  // Sized for a single desk CPU; wider nets converged slower per second of training.
  int warp_width = 32;
  int warp_depth = 4;
  int weight_width = 32;
  int weight_depth = 4;
  int trunk_width = 64;
  int trunk_depth = 4;
  std::vector<int> trunk_skips{};
  /// Hidden-layer activation of every network.
  Activation activation = Activation::relu;
  int color_width = 32;
  int ambient_width = 32;
  int ambient_depth = 4;

  int warp_latent = 8;
  int appearance_latent = 4;
  /// Whether the stage-1 radiance sees the appearance code. Off by default so that
  /// every per-frame change has to pass through the ambient coordinates.
  bool stage1_appearance = false;
  int ambient_latent = 8;
  int ambient_dim = 2;

  int spatial_bands = 6;
  int keypoint_bands = 2;
  int view_bands = 2;
  /// Whether colour sees the ray direction.
  bool view_dependent = true;

  double density_bias = -4.0;
  double latent_init = 0.05;
  double keypoint_lr_scale = 10.0;

  /// Scene bounds; coordinates are mapped to [-1, 1]^D before encoding.
  Vector bounds_lo = Vector::Constant(2, -1.0);
  Vector bounds_hi = Vector::Constant(2, 1.0);

  std::uint64_t seed = 0;
};

void to_json(nlohmann::json& j, const FieldConfig& c);
void from_json(const nlohmann::json& j, FieldConfig& c);

/// Per-frame key-point positions k[t][i] in D dimensions, stored row t * N + i.
struct KeyPointSet {
  int frames = 0;
  int count = 0;
  int dim = 0;
  Matrix positions;
  std::vector<int> reference_frames;

  KeyPointSet() = default;
  KeyPointSet(int frames, int count, int dim);

  Vector at(int t, int i) const { return positions.row(static_cast<Eigen::Index>(t) * count + i).transpose(); }
  void set(int t, int i, const Vector& p) {
    positions.row(static_cast<Eigen::Index>(t) * count + i) = p.transpose();
  }
  /// N x D positions of frame t.
  Matrix frame(int t) const { return positions.middleRows(static_cast<Eigen::Index>(t) * count, count); }

  /// Throws std::invalid_argument when N < 1, positions are non-finite or a
  /// reference frame is out of range.
  void validate() const;
};

/// p_r = sum_i w[r, i] * table[base[r] + i]. Differentiable in both the
/// weights and the key-point table.
Var mix_keypoints(Var weights, Var table, std::vector<int> base);

/// Radiance trunk and colour head shared by both stages: density depends on
/// (x', hyper) only, colour additionally on the view direction and appearance code.
class HyperRadiance {
 public:
  HyperRadiance() = default;
  HyperRadiance(const std::string& prefix, const FieldConfig& cfg, int hyper_dim, int hyper_bands,
                ParamStore& store, std::mt19937_64& rng);
  static HyperRadiance bind(const std::string& prefix, const FieldConfig& cfg, int hyper_dim,
                            int hyper_bands, const ParamStore& store);

  struct Output {
    Var density;
    Var rgb;
  };
  /// All coordinate inputs are already normalized to [-1, 1]^D.
  Output forward(Graph& g, Var canonical, Var hyper, Var directions, Var appearance) const;

 private:
  static MlpConfig trunk_config(const FieldConfig& cfg, int hyper_dim, int hyper_bands);
  static MlpConfig color_config(const FieldConfig& cfg);

  Mlp trunk_;
  Mlp color_;
  PositionalEncoder spatial_;
  PositionalEncoder hyper_;
  PositionalEncoder view_;
  bool view_dependent_ = true;
};

/// Shared helpers for coordinate normalization.
class SceneFrame {
 public:
  SceneFrame() = default;
  explicit SceneFrame(const FieldConfig& cfg);
  Var normalize(Graph& g, Var world) const;
  Matrix normalize(const Matrix& world) const;
  Vector half_extent() const { return half_; }

 private:
  Vector center_;
  Vector half_;
};

/// Key-point conditioned scene model: warp T, weight network W, radiance H.
class SceneModel : public RadianceModel {
 public:
  explicit SceneModel(FieldConfig cfg);
  /// Rebuilds a model around an existing parameter store (checkpoint load).
  SceneModel(FieldConfig cfg, ParamStore store, std::vector<int> reference_frames);

  int dim() const override { return cfg_.dim; }
  const ParamStore* param_store() const override { return &store_; }
  ParamStore* mutable_param_store() override { return &store_; }
  FieldOutput evaluate(Graph& g, const SampleBatch& batch,
                       const Matrix* keypoints = nullptr) const override;

  /// x' = x + delta(x, beta); the residual head starts at zero.
  Var warp(Graph& g, Var points, Var warp_latent) const;
  /// Softmax weights over key points, B x N. Requires N >= 2.
  Var keypoint_weights(Graph& g, Var canonical) const;
  /// Weighted key points for each row. Bypasses the weight network when N = 1.
  /// `table` holds key-point rows; `base[r]` is the row of key point 0 for sample r.
  Var weighted_keypoints(Graph& g, Var canonical, Var table, const std::vector<int>& base,
                         Var* weights_out = nullptr) const;
  HyperRadiance::Output radiance(Graph& g, Var canonical, Var weighted, Var directions,
                                 Var appearance) const;

  const FieldConfig& config() const { return cfg_; }
  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }

  KeyPointSet keypoint_set() const;
  void set_keypoints(const KeyPointSet& kp);
  Matrix keypoints(int frame) const;

  /// Coarse-to-fine window on the warp encoding (unset disables annealing).
  void set_warp_window(std::optional<double> alpha) { warp_enc_.window = alpha; }
  const PositionalEncoder& warp_encoder() const { return warp_enc_; }

  /// Warp residual |x' - x| helper on plain points for one frame.
  Matrix warp_points(const Matrix& points, int frame) const;
  Matrix weights_at(const Matrix& canonical) const;

 private:

  FieldConfig cfg_;
  ParamStore store_;
  SceneFrame frame_;
  PositionalEncoder warp_enc_;
  PositionalEncoder weight_enc_;
  Mlp warp_mlp_;
  Mlp weight_mlp_;
  HyperRadiance radiance_;
  std::vector<int> reference_frames_;
};

/// Stage-1 hyperspace baseline: per-frame ambient coordinates a = A(x, omega_t)
/// condition the radiance H1(x', a, d), optionally also alpha_t.
class Stage1Model : public RadianceModel {
 public:
  explicit Stage1Model(FieldConfig cfg);
  Stage1Model(FieldConfig cfg, ParamStore store);

  int dim() const override { return cfg_.dim; }
  const ParamStore* param_store() const override { return &store_; }
  ParamStore* mutable_param_store() override { return &store_; }
  FieldOutput evaluate(Graph& g, const SampleBatch& batch,
                       const Matrix* keypoints = nullptr) const override;

  Var warp(Graph& g, Var points, Var warp_latent) const;
  /// Ambient coordinates of un-warped world points.
  Var ambient(Graph& g, Var points, Var ambient_latent) const;

  struct Query {
    Matrix canonical;
    Matrix ambient;
  };
  Query query(const Matrix& points, int frame) const;

  const FieldConfig& config() const { return cfg_; }
  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }

 private:

  FieldConfig cfg_;
  ParamStore store_;
  SceneFrame frame_;
  PositionalEncoder spatial_;
  Mlp warp_mlp_;
  Mlp ambient_mlp_;
  HyperRadiance radiance_;
};

}  // namespace kpnerf
