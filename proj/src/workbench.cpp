#include "kpnerf/workbench.hpp"

#include "kpnerf/training.hpp"

#include <httplib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <tuple>
#include <thread>

namespace kpnerf {

using nlohmann::json;

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

const char* kind_name(ModelKind k) { return k == ModelKind::stage1 ? "stage1" : "scene"; }

ModelKind kind_from(const std::string& s) {
  if (s == "stage1") return ModelKind::stage1;
  if (s == "scene") return ModelKind::scene;
  throw CheckpointError("unknown model kind '" + s + "'");
}

template <class T>
void write_raw(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

Checkpoint base_checkpoint(const FieldConfig& field, const ParamStore& store, const std::vector<Camera>& cameras,
                           double far, const Eigen::Vector3d& background, json meta) {
  Checkpoint c;
  c.field = field;
  c.store = store;
  c.cameras = cameras;
  c.far = far;
  c.background = background;
  c.meta = meta.is_null() ? json::object() : std::move(meta);
  for (ParamBlock& b : c.store) b.grad = Matrix();
  return c;
}

ParamStore clone_store(const ParamStore& s) {
  ParamStore out;
  for (const ParamBlock& b : s) out.add(b.name, b.value, b.trainable, b.lr_scale);
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------

json camera_to_json(const Camera& c) {
  return {{"origin", {c.origin.x(), c.origin.y()}}, {"angle", c.angle}, {"focal", c.focal},
          {"principal", c.principal}, {"width", c.width}, {"near", c.near}, {"far", c.far}};
}

Camera camera_from_json(const json& j) {
  Camera c;
  const auto o = j.at("origin").get<std::vector<double>>();
  if (o.size() != 2) throw std::invalid_argument("camera origin needs two coordinates");
  c.origin = Vec2(o[0], o[1]);
  c.angle = j.at("angle").get<double>();
  c.focal = j.at("focal").get<double>();
  c.principal = j.value("principal", 0.5 * j.at("width").get<double>());
  c.width = j.at("width").get<int>();
  c.near = j.at("near").get<double>();
  c.far = j.at("far").get<double>();
  c.validate();
  return c;
}

json matrix_to_json(const Matrix& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

Matrix matrix_from_json(const json& j) {
  if (!j.is_array() || j.empty()) throw std::invalid_argument("expected a non-empty array of rows");
  const std::size_t cols = j.at(0).size();
  Matrix m(j.size(), cols);
  for (std::size_t r = 0; r < j.size(); ++r) {
    if (!j[r].is_array() || j[r].size() != cols) throw std::invalid_argument("ragged matrix rows");
    for (std::size_t c = 0; c < cols; ++c) m(r, c) = j[r][c].get<double>();
  }
  return m;
}

std::string encode_matrix(const Matrix& m) {
  std::string raw(static_cast<std::size_t>(m.size()) * sizeof(double), '\0');
  std::memcpy(raw.data(), m.data(), raw.size());
  return httplib::detail::base64_encode(raw);
}

// ---------------------------------------------------------------------------

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  json blocks = json::array();
  for (const ParamBlock& b : ckpt.store) {
    blocks.push_back({{"name", b.name}, {"rows", b.value.rows()}, {"cols", b.value.cols()},
                      {"trainable", b.trainable}, {"lr_scale", b.lr_scale}});
  }
  json cams = json::array();
  for (const Camera& c : ckpt.cameras) cams.push_back(camera_to_json(c));
  const json header = {{"format", "kpnerf-checkpoint"},
                       {"version", Checkpoint::format_version},
                       {"kind", kind_name(ckpt.kind)},
                       {"dim", ckpt.field.dim},
                       {"keypoints", ckpt.field.keypoints},
                       {"frames", ckpt.field.frames},
                       {"field", ckpt.field},
                       {"reference_frames", ckpt.reference_frames},
                       {"cameras", cams},
                       {"far", ckpt.far},
                       {"background", {ckpt.background[0], ckpt.background[1], ckpt.background[2]}},
                       {"blocks", blocks},
                       {"meta", ckpt.meta}};
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError("cannot write checkpoint " + path.string());
    os << header.dump() << '\n';
    for (const ParamBlock& b : ckpt.store) {
      write_raw(os, static_cast<std::uint64_t>(b.value.size()));
      os.write(reinterpret_cast<const char*>(b.value.data()),
               static_cast<std::streamsize>(b.value.size() * sizeof(double)));
    }
    if (!os) throw CheckpointError("failed writing checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
  std::string line;
  if (!std::getline(is, line)) throw CheckpointError("checkpoint " + path.string() + " is empty");
  json h;
  try {
    h = json::parse(line);
  } catch (const json::exception& e) {
    throw CheckpointError("checkpoint header is not valid JSON: " + std::string(e.what()));
  }
  if (h.value("format", std::string()) != "kpnerf-checkpoint") {
    throw CheckpointError(path.string() + " is not a kpnerf checkpoint");
  }
  if (h.value("version", 0) != Checkpoint::format_version) {
    throw CheckpointError("unsupported checkpoint version " + h.value("version", json()).dump());
  }
  Checkpoint c;
  c.kind = kind_from(h.at("kind").get<std::string>());
  c.field = h.at("field").get<FieldConfig>();
  c.reference_frames = h.at("reference_frames").get<std::vector<int>>();
  for (const json& cj : h.at("cameras")) c.cameras.push_back(camera_from_json(cj));
  c.far = h.at("far").get<double>();
  const auto bg = h.at("background").get<std::vector<double>>();
  c.background = Eigen::Vector3d(bg.at(0), bg.at(1), bg.at(2));
  c.meta = h.value("meta", json::object());
  for (const json& b : h.at("blocks")) {
    const auto rows = b.at("rows").get<Eigen::Index>();
    const auto cols = b.at("cols").get<Eigen::Index>();
    std::uint64_t n = 0;
    is.read(reinterpret_cast<char*>(&n), sizeof(n));
    if (!is || n != static_cast<std::uint64_t>(rows * cols)) {
      throw CheckpointError("checkpoint block '" + b.at("name").get<std::string>() + "' is truncated or malformed");
    }
    Matrix m(rows, cols);
    is.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(n * sizeof(double)));
    if (!is) throw CheckpointError("checkpoint payload ends early");
    c.store.add(b.at("name").get<std::string>(), std::move(m), b.value("trainable", true),
                b.value("lr_scale", 1.0));
  }
  return c;
}

Checkpoint make_checkpoint(const SceneModel& model, const std::vector<Camera>& cameras, double far,
                           const Eigen::Vector3d& background, json meta) {
  Checkpoint c = base_checkpoint(model.config(), model.params(), cameras, far, background, std::move(meta));
  c.kind = ModelKind::scene;
  c.reference_frames = model.keypoint_set().reference_frames;
  return c;
}

Checkpoint make_checkpoint(const Stage1Model& model, const std::vector<Camera>& cameras, double far,
                           const Eigen::Vector3d& background, json meta) {
  Checkpoint c = base_checkpoint(model.config(), model.params(), cameras, far, background, std::move(meta));
  c.kind = ModelKind::stage1;
  return c;
}

std::unique_ptr<SceneModel> scene_model(const Checkpoint& ckpt) {
  if (ckpt.kind != ModelKind::scene) throw CheckpointError("checkpoint holds a stage-1 model, not a scene model");
  return std::make_unique<SceneModel>(ckpt.field, clone_store(ckpt.store), ckpt.reference_frames);
}

std::unique_ptr<Stage1Model> stage1_model(const Checkpoint& ckpt) {
  if (ckpt.kind != ModelKind::stage1) throw CheckpointError("checkpoint holds a scene model, not a stage-1 model");
  return std::make_unique<Stage1Model>(ckpt.field, clone_store(ckpt.store));
}

// ---------------------------------------------------------------------------

bool extrapolation_warning(const KeyPointSet& stored, const Matrix& keypoints, double diagonal,
                           double fraction) {
  if (stored.positions.rows() == 0) return false;
  const Vector lo = stored.positions.colwise().minCoeff().transpose();
  const Vector hi = stored.positions.colwise().maxCoeff().transpose();
  for (Eigen::Index r = 0; r < keypoints.rows(); ++r) {
    const Vector p = keypoints.row(r).transpose();
    const Vector outside = (lo - p).cwiseMax(p - hi).cwiseMax(0.0);
    if (outside.norm() > fraction * diagonal) return true;
  }
  return false;
}

EditResult render_edit(const SceneModel& model, const EditRequest& req, const Eigen::Vector3d& background,
                       int density_cells) {
  const FieldConfig& cfg = model.config();
  const KeyPointSet stored = model.keypoint_set();
  EditResult r;
  r.base_frame = req.base_frame >= 0 ? req.base_frame : stored.reference_frames.at(0);
  if (r.base_frame >= cfg.frames) {
    throw std::invalid_argument("base frame " + std::to_string(r.base_frame) + " is outside [0, " +
                                std::to_string(cfg.frames) + ")");
  }
  const Matrix kp = req.keypoints ? *req.keypoints : model.keypoints(r.base_frame);
  if (kp.rows() != cfg.keypoints || kp.cols() != cfg.dim) {
    throw ShapeError("key points have shape " + shape_str(kp) + ", the model expects (" +
                     std::to_string(cfg.keypoints) + "x" + std::to_string(cfg.dim) + ")");
  }
  if (!kp.allFinite()) throw std::invalid_argument("key points must be finite");
  req.camera.validate();

  RenderOptions opt;
  opt.samples = req.samples;
  opt.seed = req.seed;
  opt.background = background;
  r.image = render_image(model, req.camera, r.base_frame, opt, &kp);
  r.grid.lo = Vec2(cfg.bounds_lo(0), cfg.bounds_lo(1));
  r.grid.hi = Vec2(cfg.bounds_hi(0), cfg.bounds_hi(1));
  r.grid.nx = r.grid.ny = density_cells;
  r.density = render_density_map(model, r.grid, r.base_frame, &kp);
  const Vector extent = cfg.bounds_hi - cfg.bounds_lo;
  r.extrapolated = extrapolation_warning(stored, kp, extent.norm());
  return r;
}

double default_depth(double u, const Camera& cam, const KeyPointSet& tracks, int k) {
  if (k < 1) throw std::invalid_argument("default depth needs K >= 1");
  std::vector<std::pair<double, double>> hits;  // (pixel distance, camera distance)
  for (Eigen::Index r = 0; r < tracks.positions.rows(); ++r) {
    const Vec2 x = tracks.positions.row(r).transpose();
    const Projection p = cam.project(x);
    if (!p.in_front) continue;
    hits.emplace_back(std::abs(p.u - u), cam.distance(x));
  }
  if (hits.empty()) throw std::invalid_argument("no stored key point projects in front of the camera");
  const std::size_t n = std::min<std::size_t>(k, hits.size());
  std::partial_sort(hits.begin(), hits.begin() + n, hits.end());
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) sum += hits[i].second;
  return sum / static_cast<double>(n);
}

Matrix interpolate_keypoints(const Matrix& a, const Matrix& b, double s) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError("cannot interpolate " + shape_str(a) + " and " + shape_str(b));
  }
  return (1.0 - s) * a + s * b;
}

Affine2 fit_affine(const std::vector<Vec2>& source, const std::vector<Vec2>& target) {
  if (source.size() != target.size()) throw std::invalid_argument("anchor lists differ in length");
  if (source.size() < 3) throw std::invalid_argument("motion transfer needs at least 3 anchor pairs");
  const Eigen::Index n = static_cast<Eigen::Index>(source.size());
  Eigen::MatrixXd a(n, 3);
  Eigen::MatrixXd b(n, 2);
  for (Eigen::Index i = 0; i < n; ++i) {
    a.row(i) << source[i].x(), source[i].y(), 1.0;
    b.row(i) = target[i].transpose();
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(a);
  // centred spread gives a scale for the rank threshold
  const double scale = std::max(1.0, a.leftCols(2).cwiseAbs().maxCoeff());
  qr.setThreshold(1e-10 * scale);
  if (qr.rank() < 3) throw std::invalid_argument("anchor points are collinear; the affine map is undetermined");
  const Eigen::MatrixXd x = qr.solve(b);  // 3 x 2
  Affine2 f;
  f.linear = x.topRows(2).transpose();
  f.offset = x.row(2).transpose();
  return f;
}

std::vector<Vec2> motion_transfer(const std::vector<Vec2>& track, const std::vector<Vec2>& anchors_source,
                                  const std::vector<Vec2>& anchors_target) {
  const Affine2 f = fit_affine(anchors_source, anchors_target);
  std::vector<Vec2> out;
  out.reserve(track.size());
  for (const Vec2& p : track) out.push_back(f(p));
  return out;
}

std::vector<Matrix> sample_trail(std::vector<TrailPoint> trail, int samples) {
  if (trail.empty()) throw std::invalid_argument("trail is empty");
  if (samples < 1) throw std::invalid_argument("trail needs at least one sample");
  std::stable_sort(trail.begin(), trail.end(), [](const auto& a, const auto& b) { return a.time < b.time; });
  for (const TrailPoint& p : trail) {
    if (p.keypoints.rows() != trail[0].keypoints.rows() || p.keypoints.cols() != trail[0].keypoints.cols()) {
      throw ShapeError("trail configurations differ in shape");
    }
  }
  const double t0 = trail.front().time;
  const double t1 = trail.back().time;
  std::vector<Matrix> out;
  out.reserve(samples);
  std::size_t seg = 0;
  for (int s = 0; s < samples; ++s) {
    const double t = samples == 1 ? t0 : t0 + (t1 - t0) * s / (samples - 1);
    while (seg + 2 < trail.size() && trail[seg + 1].time <= t) ++seg;
    if (trail.size() == 1 || t1 == t0) {
      out.push_back(trail.front().keypoints);
      continue;
    }
    const TrailPoint& a = trail[seg];
    const TrailPoint& b = trail[seg + 1];
    const double span = b.time - a.time;
    const double w = span > 0.0 ? std::clamp((t - a.time) / span, 0.0, 1.0) : 1.0;
    out.push_back(s == samples - 1 ? trail.back().keypoints : interpolate_keypoints(a.keypoints, b.keypoints, w));
  }
  return out;
}

// ---------------------------------------------------------------------------

SurfaceMaps surface_maps(const Stage1Model& model, const Dataset& data, int samples) {
  const auto renders = render_frames(model, data.cameras, samples, data.background);
  SurfaceMaps m;
  for (const RenderOutput& r : renders) {
    m.depth.push_back(supervision_depth(r, data.far));
    m.opacity.push_back(r.opacity);
  }
  return m;
}

std::vector<int> match_tracks(const KeyPointSet& kp, const std::vector<synth::Track>& tracks) {
  struct Candidate {
    double distance;
    int keypoint;
    int track;
  };
  std::vector<Candidate> all;
  for (int i = 0; i < kp.count; ++i) {
    const int t = kp.reference_frames.empty() ? 0 : kp.reference_frames.at(i);
    for (std::size_t j = 0; j < tracks.size(); ++j) {
      all.push_back({(kp.at(t, i) - tracks[j].world.at(t)).norm(), i, static_cast<int>(j)});
    }
  }
  std::sort(all.begin(), all.end(), [](const Candidate& a, const Candidate& b) {
    return std::tie(a.distance, a.keypoint, a.track) < std::tie(b.distance, b.keypoint, b.track);
  });
  std::vector<int> matched(kp.count, -1);
  std::vector<bool> used(tracks.size(), false);
  for (const Candidate& c : all) {
    if (matched[c.keypoint] >= 0 || used[c.track]) continue;
    matched[c.keypoint] = c.track;
    used[c.track] = true;
  }
  return matched;
}

std::vector<std::vector<double>> track_errors(const KeyPointSet& kp, const std::vector<synth::Track>& tracks,
                                              const std::vector<Camera>& cameras,
                                              const std::vector<int>& matched) {
  const double nan = std::numeric_limits<double>::quiet_NaN();
  std::vector<std::vector<double>> err(kp.count, std::vector<double>(kp.frames, nan));
  for (int i = 0; i < kp.count; ++i) {
    if (matched.at(i) < 0) continue;
    const synth::Track& tr = tracks.at(matched[i]);
    for (int t = 0; t < kp.frames; ++t) {
      if (!tr.visible.at(t)) continue;
      const Projection p = cameras.at(t).project(kp.at(t, i));
      err[i][t] = p.in_front ? std::abs(p.u - tr.pixel.at(t)) : std::numeric_limits<double>::infinity();
    }
  }
  return err;
}

double EvalReport::fraction_within(double px) const {
  int hit = 0, total = 0;
  for (const auto& row : track_error) {
    for (double e : row) {
      if (std::isnan(e)) continue;
      ++total;
      hit += e <= px ? 1 : 0;
    }
  }
  return total > 0 ? static_cast<double>(hit) / total : 0.0;
}

double EvalReport::mean_track_error() const {
  double sum = 0.0;
  int total = 0;
  for (const auto& row : track_error) {
    for (double e : row) {
      if (std::isnan(e)) continue;
      sum += e;
      ++total;
    }
  }
  return total > 0 ? sum / total : std::numeric_limits<double>::quiet_NaN();
}

json EvalReport::to_json() const {
  json errors = json::array();
  for (const auto& row : track_error) {
    json r = json::array();
    for (double e : row) r.push_back(std::isnan(e) ? json(nullptr) : json(e));
    errors.push_back(std::move(r));
  }
  return {{"psnr", psnr},
          {"mean_psnr", mean_psnr},
          {"matched_tracks", matched},
          {"track_error_px", errors},
          {"mean_track_error_px", mean_track_error()},
          {"fraction_within_2px", fraction_within(2.0)}};
}

EvalReport evaluate_model(const SceneModel& model, const Dataset& data, int samples) {
  if (model.config().frames != data.frames) {
    throw std::invalid_argument("model has " + std::to_string(model.config().frames) + " frames, dataset has " +
                                std::to_string(data.frames));
  }
  EvalReport r;
  const auto renders = render_frames(model, data.cameras, samples, data.background);
  for (int t = 0; t < data.frames; ++t) r.psnr.push_back(psnr(renders[t].color, data.rgb[t]));
  r.mean_psnr = std::accumulate(r.psnr.begin(), r.psnr.end(), 0.0) / static_cast<double>(r.psnr.size());
  const KeyPointSet kp = model.keypoint_set();
  r.matched = match_tracks(kp, data.tracks);
  r.track_error = track_errors(kp, data.tracks, data.cameras, r.matched);
  return r;
}

// ---------------------------------------------------------------------------

Workbench::Ticket::Ticket(Workbench& w) : w_(w) {
  std::unique_lock lock(w_.queue_mutex_);
  const std::uint64_t mine = w_.next_ticket_++;
  w_.queue_cv_.wait(lock, [&] { return w_.serving_ == mine; });
}

Workbench::Ticket::~Ticket() {
  {
    std::lock_guard lock(w_.queue_mutex_);
    ++w_.serving_;
  }
  w_.queue_cv_.notify_all();
}

Workbench::Workbench(Checkpoint ckpt, int k_depth)
    : ckpt_(std::move(ckpt)), model_(scene_model(ckpt_)), k_depth_(k_depth) {}

Workbench::Response Workbench::state() const {
  const FieldConfig& cfg = model_->config();
  json cams = json::array();
  for (const Camera& c : ckpt_.cameras) cams.push_back(camera_to_json(c));
  const KeyPointSet kp = model_->keypoint_set();
  const int base = kp.reference_frames.at(0);
  return {200,
          {{"D", cfg.dim},
           {"N", cfg.keypoints},
           {"T", cfg.frames},
           {"cameras", cams},
           {"reference_frames", kp.reference_frames},
           {"base_frame", base},
           {"keypoints", matrix_to_json(model_->keypoints(base))},
           {"bounds_lo", {cfg.bounds_lo(0), cfg.bounds_lo(1)}},
           {"bounds_hi", {cfg.bounds_hi(0), cfg.bounds_hi(1)}}}};
}

Workbench::Response Workbench::keypoints(const std::string& frame) const {
  int t = 0;
  try {
    std::size_t used = 0;
    t = std::stoi(frame, &used);
    if (used != frame.size()) throw std::invalid_argument(frame);
  } catch (const std::exception&) {
    return {400, {{"error", "frame must be an integer, got '" + frame + "'"}}};
  }
  if (t < 0 || t >= model_->config().frames) {
    return {400, {{"error", "frame " + std::to_string(t) + " is out of range"}}};
  }
  return {200, {{"frame", t}, {"keypoints", matrix_to_json(model_->keypoints(t))}}};
}

EditRequest Workbench::parse_edit(const json& j) const {
  EditRequest r;
  if (j.contains("camera")) {
    r.camera = camera_from_json(j.at("camera"));
  } else {
    const int preset = j.value("camera_preset", 0);
    if (preset < 0 || preset >= static_cast<int>(ckpt_.cameras.size())) {
      throw std::invalid_argument("camera preset " + std::to_string(preset) + " does not exist");
    }
    r.camera = ckpt_.cameras[preset];
  }
  if (j.contains("keypoints") && !j.at("keypoints").is_null()) r.keypoints = matrix_from_json(j.at("keypoints"));
  r.base_frame = j.value("base_frame", -1);
  r.seed = j.value("seed", std::uint64_t{0});
  r.samples = j.value("samples", 64);
  if (r.samples < 2) throw std::invalid_argument("samples must be at least 2");
  return r;
}

json Workbench::render_payload(const EditResult& r) const {
  return {{"width", r.image.color.rows()},
          {"image", encode_matrix(r.image.color)},
          {"depth", encode_matrix(r.image.depth)},
          {"opacity", encode_matrix(r.image.opacity)},
          {"density", encode_matrix(r.density)},
          {"density_shape", {r.density.rows(), r.density.cols()}},
          {"density_lo", {r.grid.lo.x(), r.grid.lo.y()}},
          {"density_hi", {r.grid.hi.x(), r.grid.hi.y()}},
          {"base_frame", r.base_frame},
          {"extrapolated", r.extrapolated},
          {"encoding", "base64 f64 little-endian row-major"}};
}

namespace {

template <class F>
Workbench::Response guarded(F&& body) {
  try {
    return body();
  } catch (const json::exception& e) {
    return {400, {{"error", std::string("malformed request: ") + e.what()}}};
  } catch (const std::invalid_argument& e) {
    return {400, {{"error", e.what()}}};
  } catch (const std::exception& e) {
    return {500, {{"error", std::string("render failed: ") + e.what()}}};
  }
}

}  // namespace

Workbench::Response Workbench::render(const std::string& body) {
  return guarded([&]() -> Response {
    const EditRequest req = parse_edit(json::parse(body));
    if (req.keypoints && (req.keypoints->rows() != model_->config().keypoints ||
                          req.keypoints->cols() != model_->config().dim)) {
      throw std::invalid_argument("key points must be " + std::to_string(model_->config().keypoints) + "x" +
                                  std::to_string(model_->config().dim));
    }
    Ticket turn(*this);
    return {200, render_payload(render_edit(*model_, req, ckpt_.background))};
  });
}

Workbench::Response Workbench::default_depth(const std::string& body) const {
  return guarded([&]() -> Response {
    const json j = json::parse(body);
    const Camera cam = j.contains("camera") ? camera_from_json(j.at("camera"))
                                            : ckpt_.cameras.at(j.value("camera_preset", 0));
    const double u = j.at("u").get<double>();
    const int k = j.value("k", k_depth_);
    return {200, {{"depth", kpnerf::default_depth(u, cam, model_->keypoint_set(), k)}, {"k", k}}};
  });
}

Workbench::Response Workbench::video(const std::string& body) {
  return guarded([&]() -> Response {
    const json j = json::parse(body);
    EditRequest req = parse_edit(j);
    std::vector<TrailPoint> trail;
    for (const json& p : j.at("trail")) trail.push_back({p.at("time").get<double>(), matrix_from_json(p.at("keypoints"))});
    const int samples = j.at("frames").get<int>();
    if (samples < 1 || samples > 1000) throw std::invalid_argument("frames must be in [1, 1000]");
    const std::vector<Matrix> configs = sample_trail(trail, samples);
    for (const Matrix& m : configs) {
      if (m.rows() != model_->config().keypoints || m.cols() != model_->config().dim) {
        throw std::invalid_argument("trail key points have the wrong shape");
      }
    }
    Ticket turn(*this);
    json frames = json::array();
    bool extrapolated = false;
    for (const Matrix& kp : configs) {
      req.keypoints = kp;
      const EditResult r = render_edit(*model_, req, ckpt_.background);
      extrapolated = extrapolated || r.extrapolated;
      json f = render_payload(r);
      f["keypoints"] = matrix_to_json(kp);
      frames.push_back(std::move(f));
    }
    return {200, {{"frames", frames}, {"count", samples}, {"extrapolated", extrapolated}}};
  });
}

// ---------------------------------------------------------------------------

struct Service::Impl {
  Workbench& bench;
  httplib::Server server;
  std::thread thread;

  Impl(Workbench& b, int threads) : bench(b) {
    server.new_task_queue = [threads] { return new httplib::ThreadPool(static_cast<std::size_t>(threads)); };
    auto reply = [](httplib::Response& res, const Workbench::Response& r) {
      res.status = r.status;
      res.set_content(r.body.dump(), "application/json");
    };
    server.Get("/state", [this, reply](const httplib::Request&, httplib::Response& res) { reply(res, bench.state()); });
    server.Get("/keypoints", [this, reply](const httplib::Request& req, httplib::Response& res) {
      if (!req.has_param("frame")) {
        reply(res, {400, {{"error", "missing query parameter 'frame'"}}});
        return;
      }
      reply(res, bench.keypoints(req.get_param_value("frame")));
    });
    server.Post("/render", [this, reply](const httplib::Request& req, httplib::Response& res) {
      reply(res, bench.render(req.body));
    });
    server.Post("/default_depth", [this, reply](const httplib::Request& req, httplib::Response& res) {
      reply(res, bench.default_depth(req.body));
    });
    server.Post("/video", [this, reply](const httplib::Request& req, httplib::Response& res) {
      reply(res, bench.video(req.body));
    });
  }
};

Service::Service(Workbench& bench, int threads) : impl_(std::make_unique<Impl>(bench, threads)) {}

Service::~Service() { stop(); }

bool Service::listen(const std::string& host, int port) { return impl_->server.listen(host, port); }

int Service::start(const std::string& host) {
  const int port = impl_->server.bind_to_any_port(host);
  if (port < 0) throw std::runtime_error("could not bind a port on " + host);
  impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
  return port;
}

void Service::stop() {
  if (!impl_) return;
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

}  // namespace kpnerf
