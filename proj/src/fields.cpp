#include "kpnerf/fields.hpp"

#include <memory>

namespace kpnerf {

void to_json(nlohmann::json& j, const FieldConfig& c) {
  j = nlohmann::json{{"dim", c.dim},
                     {"frames", c.frames},
                     {"keypoints", c.keypoints},
                     {"warp_width", c.warp_width},
                     {"warp_depth", c.warp_depth},
                     {"weight_width", c.weight_width},
                     {"weight_depth", c.weight_depth},
                     {"trunk_width", c.trunk_width},
                     {"trunk_depth", c.trunk_depth},
                     {"trunk_skips", c.trunk_skips},
                     {"activation", activation_name(c.activation)},
                     {"color_width", c.color_width},
                     {"ambient_width", c.ambient_width},
                     {"ambient_depth", c.ambient_depth},
                     {"warp_latent", c.warp_latent},
                     {"appearance_latent", c.appearance_latent},
                     {"ambient_latent", c.ambient_latent},
                     {"ambient_dim", c.ambient_dim},
                     {"spatial_bands", c.spatial_bands},
                     {"keypoint_bands", c.keypoint_bands},
                     {"view_bands", c.view_bands},
                     {"view_dependent", c.view_dependent},
                     {"density_bias", c.density_bias},
                     {"latent_init", c.latent_init},
                     {"stage1_appearance", c.stage1_appearance},
                     {"keypoint_lr_scale", c.keypoint_lr_scale},
                     {"bounds_lo", std::vector<double>(c.bounds_lo.data(), c.bounds_lo.data() + c.bounds_lo.size())},
                     {"bounds_hi", std::vector<double>(c.bounds_hi.data(), c.bounds_hi.data() + c.bounds_hi.size())},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, FieldConfig& c) {
  FieldConfig d;
  c.dim = j.value("dim", d.dim);
  c.frames = j.value("frames", d.frames);
  c.keypoints = j.value("keypoints", d.keypoints);
  c.warp_width = j.value("warp_width", d.warp_width);
  c.warp_depth = j.value("warp_depth", d.warp_depth);
  c.weight_width = j.value("weight_width", d.weight_width);
  c.weight_depth = j.value("weight_depth", d.weight_depth);
  c.trunk_width = j.value("trunk_width", d.trunk_width);
  c.trunk_depth = j.value("trunk_depth", d.trunk_depth);
  c.trunk_skips = j.value("trunk_skips", d.trunk_skips);
  c.activation = activation_from_name(j.value("activation", activation_name(d.activation)));
  c.color_width = j.value("color_width", d.color_width);
  c.ambient_width = j.value("ambient_width", d.ambient_width);
  c.ambient_depth = j.value("ambient_depth", d.ambient_depth);
  c.warp_latent = j.value("warp_latent", d.warp_latent);
  c.appearance_latent = j.value("appearance_latent", d.appearance_latent);
  c.ambient_latent = j.value("ambient_latent", d.ambient_latent);
  c.ambient_dim = j.value("ambient_dim", d.ambient_dim);
  c.spatial_bands = j.value("spatial_bands", d.spatial_bands);
  c.keypoint_bands = j.value("keypoint_bands", d.keypoint_bands);
  c.view_bands = j.value("view_bands", d.view_bands);
  c.view_dependent = j.value("view_dependent", d.view_dependent);
  c.density_bias = j.value("density_bias", d.density_bias);
  c.latent_init = j.value("latent_init", d.latent_init);
  c.stage1_appearance = j.value("stage1_appearance", d.stage1_appearance);
  c.keypoint_lr_scale = j.value("keypoint_lr_scale", d.keypoint_lr_scale);
  c.seed = j.value("seed", d.seed);
  if (j.contains("bounds_lo")) {
    auto v = j.at("bounds_lo").get<std::vector<double>>();
    c.bounds_lo = Eigen::Map<Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
  } else {
    c.bounds_lo = Vector::Constant(c.dim, -1.0);
  }
  if (j.contains("bounds_hi")) {
    auto v = j.at("bounds_hi").get<std::vector<double>>();
    c.bounds_hi = Eigen::Map<Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
  } else {
    c.bounds_hi = Vector::Constant(c.dim, 1.0);
  }
}

KeyPointSet::KeyPointSet(int frames_, int count_, int dim_)
    : frames(frames_), count(count_), dim(dim_),
      positions(Matrix::Zero(static_cast<Eigen::Index>(frames_) * count_, dim_)),
      reference_frames(static_cast<std::size_t>(std::max(count_, 0)), 0) {}

void KeyPointSet::validate() const {
  if (count < 1) throw std::invalid_argument("a key-point set needs at least one key point");
  if (positions.rows() != static_cast<Eigen::Index>(frames) * count || positions.cols() != dim) {
    throw std::invalid_argument("key-point positions have shape " + shape_str(positions));
  }
  if (!positions.allFinite()) throw std::invalid_argument("key-point positions must be finite");
  if (reference_frames.size() != static_cast<std::size_t>(count)) {
    throw std::invalid_argument("each key point needs exactly one reference frame");
  }
  for (int t : reference_frames) {
    if (t < 0 || t >= frames) {
      throw std::invalid_argument("reference frame " + std::to_string(t) + " out of range");
    }
  }
}

Var mix_keypoints(Var weights, Var table, std::vector<int> base) {
  Graph& g = *weights.graph;
  const Matrix& w = weights.value();
  const Matrix& k = table.value();
  if (static_cast<Eigen::Index>(base.size()) != w.rows()) {
    throw ShapeError("mix_keypoints: " + std::to_string(base.size()) + " bases for " +
                     std::to_string(w.rows()) + " weight rows");
  }
  const Eigen::Index n = w.cols();
  Matrix out = Matrix::Zero(w.rows(), k.cols());
  for (Eigen::Index r = 0; r < w.rows(); ++r) {
    if (base[r] < 0 || base[r] + n > k.rows()) {
      throw ShapeError("mix_keypoints: key-point rows out of range");
    }
    for (Eigen::Index i = 0; i < n; ++i) out.row(r) += w(r, i) * k.row(base[r] + i);
  }
  auto idx = std::make_shared<std::vector<int>>(std::move(base));
  return g.record(std::move(out), {weights, table}, [idx](Graph& g, int node) {
    const int pw = g.parent(node, 0);
    const int pk = g.parent(node, 1);
    const Matrix& w = g.value(pw);
    const Matrix& k = g.value(pk);
    const Matrix& go = g.grad(node);
    const Eigen::Index n = w.cols();
    if (g.needs_grad(pw)) {
      Matrix dw(w.rows(), n);
      for (Eigen::Index r = 0; r < w.rows(); ++r) {
        for (Eigen::Index i = 0; i < n; ++i) dw(r, i) = go.row(r).dot(k.row((*idx)[r] + i));
      }
      g.accumulate(pw, dw);
    }
    if (g.needs_grad(pk)) {
      Matrix dk = Matrix::Zero(k.rows(), k.cols());
      for (Eigen::Index r = 0; r < w.rows(); ++r) {
        for (Eigen::Index i = 0; i < n; ++i) dk.row((*idx)[r] + i) += w(r, i) * go.row(r);
      }
      g.accumulate(pk, dk);
    }
  });
}

// ---------------------------------------------------------------------------

MlpConfig HyperRadiance::trunk_config(const FieldConfig& cfg, int hyper_dim, int hyper_bands) {
  MlpConfig m;
  m.input_dim = cfg.dim * (1 + 2 * cfg.spatial_bands) + hyper_dim * (1 + 2 * hyper_bands);
  m.width = cfg.trunk_width;
  m.depth = cfg.trunk_depth;
  m.output_dim = 1 + cfg.color_width;
  m.skips = cfg.trunk_skips;
  m.activation = cfg.activation;
  return m;
}

MlpConfig HyperRadiance::color_config(const FieldConfig& cfg) {
  MlpConfig m;
  m.input_dim = cfg.color_width + (cfg.view_dependent ? cfg.dim * (1 + 2 * cfg.view_bands) : 0) +
                cfg.appearance_latent;
  m.width = cfg.color_width;
  m.depth = 1;
  m.activation = cfg.activation;
  m.output_dim = 3;
  return m;
}

HyperRadiance::HyperRadiance(const std::string& prefix, const FieldConfig& cfg, int hyper_dim,
                             int hyper_bands, ParamStore& store, std::mt19937_64& rng)
    : trunk_(prefix + "trunk", trunk_config(cfg, hyper_dim, hyper_bands), store, rng),
      color_(prefix + "color", color_config(cfg), store, rng),
      spatial_{cfg.spatial_bands},
      hyper_{hyper_bands},
      view_{cfg.view_bands},
      view_dependent_(cfg.view_dependent) {
  // density starts near zero everywhere so an untrained field renders the background
  const std::string last = std::to_string(cfg.trunk_depth);
  store.at(prefix + "trunk.w" + last).value.col(0).setZero();
  store.at(prefix + "trunk.b" + last).value(0, 0) = cfg.density_bias;
}

HyperRadiance HyperRadiance::bind(const std::string& prefix, const FieldConfig& cfg,
                                  int hyper_dim, int hyper_bands, const ParamStore& store) {
  HyperRadiance h;
  h.trunk_ = Mlp::bind(prefix + "trunk", trunk_config(cfg, hyper_dim, hyper_bands), store);
  h.color_ = Mlp::bind(prefix + "color", color_config(cfg), store);
  h.spatial_ = PositionalEncoder{cfg.spatial_bands};
  h.hyper_ = PositionalEncoder{hyper_bands};
  h.view_ = PositionalEncoder{cfg.view_bands};
  h.view_dependent_ = cfg.view_dependent;
  return h;
}

HyperRadiance::Output HyperRadiance::forward(Graph& g, Var canonical, Var hyper, Var directions,
                                             Var appearance) const {
  Var trunk_in = concat_cols({encode(canonical, spatial_), encode(hyper, hyper_)});
  Var trunk = trunk_.forward(g, trunk_in);
  const int feat = trunk_.config().output_dim - 1;
  Output out;
  out.density = softplus(slice_cols(trunk, 0, 1));
  Var features = slice_cols(trunk, 1, feat);
  std::vector<Var> color_in{features};
  if (view_dependent_) color_in.push_back(encode(directions, view_));
  if (appearance.valid()) color_in.push_back(appearance);
  out.rgb = sigmoid(color_.forward(g, concat_cols(color_in)));
  return out;
}

// ---------------------------------------------------------------------------

SceneFrame::SceneFrame(const FieldConfig& cfg) {
  if (cfg.bounds_lo.size() != cfg.dim || cfg.bounds_hi.size() != cfg.dim) {
    throw std::invalid_argument("scene bounds must have one entry per dimension");
  }
  center_ = 0.5 * (cfg.bounds_lo + cfg.bounds_hi);
  half_ = 0.5 * (cfg.bounds_hi - cfg.bounds_lo);
  if ((half_.array() <= 0.0).any()) throw std::invalid_argument("scene bounds are empty");
}

Var SceneFrame::normalize(Graph& g, Var world) const {
  const Eigen::Index d = center_.size();
  Matrix w = Matrix::Zero(d, d);
  w.diagonal() = half_.cwiseInverse();
  Matrix b = (-center_.cwiseQuotient(half_)).transpose();
  return affine(world, g.constant(std::move(w)), g.constant(std::move(b)));
}

Matrix SceneFrame::normalize(const Matrix& world) const {
  Matrix out = world;
  out.rowwise() -= center_.transpose();
  out.array().rowwise() /= half_.transpose().array();
  return out;
}

namespace {

Matrix latent_init(int rows, int cols, double scale, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * dist(rng);
  return m;
}

MlpConfig warp_config(const FieldConfig& cfg) {
  MlpConfig m;
  m.input_dim = cfg.dim * (1 + 2 * cfg.spatial_bands) + cfg.warp_latent;
  m.width = cfg.warp_width;
  m.depth = cfg.warp_depth;
  m.activation = cfg.activation;
  m.output_dim = cfg.dim;
  m.zero_init_output = true;
  return m;
}

MlpConfig weight_config(const FieldConfig& cfg) {
  MlpConfig m;
  m.input_dim = cfg.dim * (1 + 2 * cfg.spatial_bands);
  m.width = cfg.weight_width;
  m.depth = cfg.weight_depth;
  m.activation = cfg.activation;
  m.output_dim = cfg.keypoints;
  m.zero_init_output = true;
  return m;
}

MlpConfig ambient_config(const FieldConfig& cfg) {
  MlpConfig m;
  m.input_dim = cfg.dim * (1 + 2 * cfg.spatial_bands) + cfg.ambient_latent;
  m.width = cfg.ambient_width;
  m.depth = cfg.ambient_depth;
  m.activation = cfg.activation;
  m.output_dim = cfg.ambient_dim;
  m.zero_init_output = true;
  return m;
}

Var scale_columns(Graph& g, Var v, const Vector& s) {
  Matrix d = Matrix::Zero(s.size(), s.size());
  d.diagonal() = s;
  return matmul(v, g.constant(std::move(d)));
}

std::vector<int> frame_rows(const std::vector<int>& frames, int rows, const char* what) {
  for (int f : frames) {
    if (f < 0 || f >= rows) {
      throw std::out_of_range(std::string(what) + ": frame " + std::to_string(f) +
                              " outside [0, " + std::to_string(rows) + ")");
    }
  }
  return frames;
}

}  // namespace

SceneModel::SceneModel(FieldConfig cfg) : cfg_(std::move(cfg)), frame_(cfg_) {
  if (cfg_.keypoints < 1) throw std::invalid_argument("scene model needs at least one key point");
  std::mt19937_64 rng(cfg_.seed);
  warp_mlp_ = Mlp("warp", warp_config(cfg_), store_, rng);
  if (cfg_.keypoints >= 2) weight_mlp_ = Mlp("weights", weight_config(cfg_), store_, rng);
  radiance_ = HyperRadiance("", cfg_, cfg_.dim, cfg_.keypoint_bands, store_, rng);
  store_.add("latent.warp", latent_init(cfg_.frames, cfg_.warp_latent, cfg_.latent_init, rng));
  store_.add("latent.app",
             latent_init(cfg_.frames, cfg_.appearance_latent, cfg_.latent_init, rng));
  store_.add("keypoints", Matrix::Zero(static_cast<Eigen::Index>(cfg_.frames) * cfg_.keypoints, cfg_.dim),
             true, cfg_.keypoint_lr_scale);
  reference_frames_.assign(cfg_.keypoints, 0);
  warp_enc_ = PositionalEncoder{cfg_.spatial_bands};
  weight_enc_ = PositionalEncoder{cfg_.spatial_bands};
}

SceneModel::SceneModel(FieldConfig cfg, ParamStore store, std::vector<int> reference_frames)
    : cfg_(std::move(cfg)), store_(std::move(store)), frame_(cfg_),
      reference_frames_(std::move(reference_frames)) {
  warp_mlp_ = Mlp::bind("warp", warp_config(cfg_), store_);
  if (cfg_.keypoints >= 2) weight_mlp_ = Mlp::bind("weights", weight_config(cfg_), store_);
  radiance_ = HyperRadiance::bind("", cfg_, cfg_.dim, cfg_.keypoint_bands, store_);
  warp_enc_ = PositionalEncoder{cfg_.spatial_bands};
  weight_enc_ = PositionalEncoder{cfg_.spatial_bands};
  store_.at("keypoints").lr_scale = cfg_.keypoint_lr_scale;
  if (reference_frames_.size() != static_cast<std::size_t>(cfg_.keypoints)) {
    throw std::invalid_argument("checkpoint reference frames do not match the key-point count");
  }
}

Var SceneModel::warp(Graph& g, Var points, Var warp_latent) const {
  Var in = concat_cols({encode(frame_.normalize(g, points), warp_enc_), warp_latent});
  Var delta = scale_columns(g, warp_mlp_.forward(g, in), frame_.half_extent());
  return add(points, delta);
}

Var SceneModel::keypoint_weights(Graph& g, Var canonical) const {
  if (cfg_.keypoints < 2) {
    throw std::logic_error("the weight network is bypassed for a single key point");
  }
  return softmax(weight_mlp_.forward(g, encode(frame_.normalize(g, canonical), weight_enc_)));
}

Var SceneModel::weighted_keypoints(Graph& g, Var canonical, Var table,
                                   const std::vector<int>& base, Var* weights_out) const {
  if (cfg_.keypoints == 1) return gather_rows(table, base);
  Var w = keypoint_weights(g, canonical);
  if (weights_out != nullptr) *weights_out = w;
  return mix_keypoints(w, table, base);
}

HyperRadiance::Output SceneModel::radiance(Graph& g, Var canonical, Var weighted, Var directions,
                                           Var appearance) const {
  return radiance_.forward(g, frame_.normalize(g, canonical), frame_.normalize(g, weighted),
                           directions, appearance);
}

FieldOutput SceneModel::evaluate(Graph& g, const SampleBatch& batch,
                                 const Matrix* keypoints) const {
  const std::vector<int> rows = frame_rows(batch.frames, cfg_.frames, "scene model");
  Var x = g.constant(batch.points);
  Var beta = gather_rows(g.param("latent.warp"), rows);
  Var alpha = gather_rows(g.param("latent.app"), rows);
  FieldOutput out;
  out.canonical = warp(g, x, beta);

  Var table;
  std::vector<int> base(rows.size());
  if (keypoints != nullptr) {
    if (keypoints->rows() != cfg_.keypoints || keypoints->cols() != cfg_.dim) {
      throw ShapeError("key-point override has shape " + shape_str(*keypoints) + ", expected (" +
                       std::to_string(cfg_.keypoints) + "x" + std::to_string(cfg_.dim) + ")");
    }
    table = g.constant(*keypoints);
    std::fill(base.begin(), base.end(), 0);
  } else {
    table = g.param("keypoints");
    for (std::size_t r = 0; r < rows.size(); ++r) base[r] = rows[r] * cfg_.keypoints;
  }
  out.ambient = weighted_keypoints(g, out.canonical, table, base, &out.weights);
  auto rad = radiance(g, out.canonical, out.ambient, g.constant(batch.directions), alpha);
  out.density = rad.density;
  out.rgb = rad.rgb;
  return out;
}

KeyPointSet SceneModel::keypoint_set() const {
  KeyPointSet kp(cfg_.frames, cfg_.keypoints, cfg_.dim);
  kp.positions = store_.at("keypoints").value;
  kp.reference_frames = reference_frames_;
  return kp;
}

void SceneModel::set_keypoints(const KeyPointSet& kp) {
  kp.validate();
  if (kp.frames != cfg_.frames || kp.count != cfg_.keypoints || kp.dim != cfg_.dim) {
    throw ShapeError("key-point set does not match the model's T, N and D");
  }
  store_.at("keypoints").value = kp.positions;
  reference_frames_ = kp.reference_frames;
}

Matrix SceneModel::keypoints(int frame) const {
  return store_.at("keypoints").value.middleRows(static_cast<Eigen::Index>(frame) * cfg_.keypoints,
                                                 cfg_.keypoints);
}

Matrix SceneModel::warp_points(const Matrix& points, int frame) const {
  Graph g(&store_);
  std::vector<int> rows(points.rows(), frame);
  frame_rows(rows, cfg_.frames, "warp");
  Var beta = gather_rows(g.param("latent.warp"), rows);
  return warp(g, g.constant(points), beta).value();
}

Matrix SceneModel::weights_at(const Matrix& canonical) const {
  if (cfg_.keypoints == 1) return Matrix::Ones(canonical.rows(), 1);
  Graph g(&store_);
  return keypoint_weights(g, g.constant(canonical)).value();
}

// ---------------------------------------------------------------------------

static FieldConfig stage1_radiance(FieldConfig cfg) {
  if (!cfg.stage1_appearance) cfg.appearance_latent = 0;
  return cfg;
}

Stage1Model::Stage1Model(FieldConfig cfg) : cfg_(std::move(cfg)), frame_(cfg_) {
  std::mt19937_64 rng(cfg_.seed ^ 0x5eedULL);
  warp_mlp_ = Mlp("s1.warp", warp_config(cfg_), store_, rng);
  ambient_mlp_ = Mlp("s1.ambient", ambient_config(cfg_), store_, rng);
  radiance_ = HyperRadiance("s1.", stage1_radiance(cfg_), cfg_.ambient_dim, cfg_.keypoint_bands,
                            store_, rng);
  store_.add("s1.latent.warp", latent_init(cfg_.frames, cfg_.warp_latent, cfg_.latent_init, rng));
  if (cfg_.stage1_appearance) {
    store_.add("s1.latent.app",
               latent_init(cfg_.frames, cfg_.appearance_latent, cfg_.latent_init, rng));
  }
  store_.add("s1.latent.amb",
             latent_init(cfg_.frames, cfg_.ambient_latent, cfg_.latent_init, rng));
  spatial_ = PositionalEncoder{cfg_.spatial_bands};
}

Stage1Model::Stage1Model(FieldConfig cfg, ParamStore store)
    : cfg_(std::move(cfg)), store_(std::move(store)), frame_(cfg_) {
  warp_mlp_ = Mlp::bind("s1.warp", warp_config(cfg_), store_);
  ambient_mlp_ = Mlp::bind("s1.ambient", ambient_config(cfg_), store_);
  radiance_ = HyperRadiance::bind("s1.", stage1_radiance(cfg_), cfg_.ambient_dim, cfg_.keypoint_bands,
                                  store_);
  spatial_ = PositionalEncoder{cfg_.spatial_bands};
}

Var Stage1Model::warp(Graph& g, Var points, Var warp_latent) const {
  Var in = concat_cols({encode(frame_.normalize(g, points), spatial_), warp_latent});
  Var delta = scale_columns(g, warp_mlp_.forward(g, in), frame_.half_extent());
  return add(points, delta);
}

Var Stage1Model::ambient(Graph& g, Var points, Var ambient_latent) const {
  Var in = concat_cols({encode(frame_.normalize(g, points), spatial_), ambient_latent});
  return ambient_mlp_.forward(g, in);
}

FieldOutput Stage1Model::evaluate(Graph& g, const SampleBatch& batch, const Matrix*) const {
  const std::vector<int> rows = frame_rows(batch.frames, cfg_.frames, "stage-1 model");
  Var x = g.constant(batch.points);
  FieldOutput out;
  out.ambient = ambient(g, x, gather_rows(g.param("s1.latent.amb"), rows));
  out.canonical = warp(g, x, gather_rows(g.param("s1.latent.warp"), rows));
  const Var app = cfg_.stage1_appearance ? gather_rows(g.param("s1.latent.app"), rows) : Var{};
  auto rad = radiance_.forward(g, frame_.normalize(g, out.canonical), out.ambient,
                               g.constant(batch.directions), app);
  out.density = rad.density;
  out.rgb = rad.rgb;
  return out;
}

Stage1Model::Query Stage1Model::query(const Matrix& points, int frame) const {
  Graph g(&store_);
  std::vector<int> rows(points.rows(), frame);
  frame_rows(rows, cfg_.frames, "stage-1 query");
  Var x = g.constant(points);
  Query q;
  q.ambient = ambient(g, x, gather_rows(g.param("s1.latent.amb"), rows)).value();
  q.canonical = warp(g, x, gather_rows(g.param("s1.latent.warp"), rows)).value();
  return q;
}

}  // namespace kpnerf
