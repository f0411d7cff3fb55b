#include "kpnerf/kpanalysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace kpnerf {

void to_json(nlohmann::json& j, const AnalysisConfig& c) {
  j = nlohmann::json{{"grid", c.grid},
                     {"sigma", c.sigma},
                     {"min_coverage", c.min_coverage},
                     {"rho", c.rho},
                     {"suppression", c.suppression},
                     {"delta_fraction", c.delta_fraction},
                     {"skip_every", c.skip_every},
                     {"conf_threshold", c.conf_threshold},
                     {"conf_eps", c.conf_eps},
                     {"samples", c.samples},
                     {"surface_opacity", c.surface_opacity},
                     {"rays_per_pixel", c.rays_per_pixel}};
}

void from_json(const nlohmann::json& j, AnalysisConfig& c) {
  const AnalysisConfig d;
  c.grid = j.value("grid", d.grid);
  c.sigma = j.value("sigma", d.sigma);
  c.min_coverage = j.value("min_coverage", d.min_coverage);
  c.rho = j.value("rho", d.rho);
  c.suppression = j.value("suppression", d.suppression);
  c.delta_fraction = j.value("delta_fraction", d.delta_fraction);
  c.skip_every = j.value("skip_every", d.skip_every);
  c.conf_threshold = j.value("conf_threshold", d.conf_threshold);
  c.conf_eps = j.value("conf_eps", d.conf_eps);
  c.samples = j.value("samples", d.samples);
  c.surface_opacity = j.value("surface_opacity", d.surface_opacity);
  c.rays_per_pixel = j.value("rays_per_pixel", d.rays_per_pixel);
}

int VarianceGrid::locate(const Vec2& x) const {
  const double fx = (x.x() - spec.lo.x()) / (spec.hi.x() - spec.lo.x()) * spec.nx;
  const double fy = (x.y() - spec.lo.y()) / (spec.hi.y() - spec.lo.y()) * spec.ny;
  if (!(fx >= 0.0 && fy >= 0.0 && fx < spec.nx && fy < spec.ny)) return -1;
  return index(static_cast<int>(fx), static_cast<int>(fy));
}

namespace {

Matrix as_image(const Vector& v, int nx, int ny) {
  Matrix m(ny, nx);
  for (int iy = 0; iy < ny; ++iy)
    for (int ix = 0; ix < nx; ++ix) m(iy, ix) = v(iy * nx + ix);
  return m;
}

}  // namespace

Matrix VarianceGrid::variance_image() const { return as_image(variance, spec.nx, spec.ny); }
Matrix VarianceGrid::smoothed_image() const { return as_image(smoothed, spec.nx, spec.ny); }

Vector smooth_valid(const Vector& values, const std::vector<std::uint8_t>& valid, int nx, int ny,
                    double sigma) {
  Vector out = Vector::Zero(values.size());
  if (sigma <= 0.0) {
    for (Eigen::Index c = 0; c < values.size(); ++c) out(c) = valid[c] ? values(c) : 0.0;
    return out;
  }
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> kernel(2 * radius + 1);
  for (int k = -radius; k <= radius; ++k) kernel[k + radius] = std::exp(-0.5 * k * k / (sigma * sigma));
  for (int iy = 0; iy < ny; ++iy) {
    for (int ix = 0; ix < nx; ++ix) {
      if (!valid[iy * nx + ix]) continue;
      double num = 0.0, den = 0.0;
      for (int dy = -radius; dy <= radius; ++dy) {
        const int y = iy + dy;
        if (y < 0 || y >= ny) continue;
        for (int dx = -radius; dx <= radius; ++dx) {
          const int x = ix + dx;
          if (x < 0 || x >= nx) continue;
          const double w = kernel[dx + radius] * kernel[dy + radius];
          // unobserved cells count as zero variance instead of being renormalized away,
          // so an isolated blob keeps a single central peak
          if (valid[y * nx + x]) num += w * values(y * nx + x);
          den += w;
        }
      }
      out(iy * nx + ix) = num / den;
    }
  }
  return out;
}

VarianceGrid accumulate_variance(const GridSpec& grid, int frames, int ambient_dim,
                                 const std::vector<AmbientSample>& samples, const AnalysisConfig& cfg) {
  if (samples.empty()) throw AnalysisError("variance grid is empty: no surface points were found");
  VarianceGrid g;
  g.spec = grid;
  g.frames = frames;
  g.ambient_dim = ambient_dim;
  const int cells = g.cells();
  g.frame_means.assign(frames, Matrix::Zero(cells, ambient_dim));
  g.frame_counts.assign(frames, std::vector<int>(cells, 0));
  int placed = 0;
  for (const auto& s : samples) {
    const int c = g.locate(s.canonical);
    if (c < 0) continue;
    if (s.frame < 0 || s.frame >= frames) throw std::out_of_range("ambient sample frame out of range");
    g.frame_means[s.frame].row(c) += s.ambient.transpose();
    ++g.frame_counts[s.frame][c];
    ++placed;
  }
  if (placed == 0) throw AnalysisError("variance grid is empty: no surface point fell inside the grid");

  g.observed.assign(cells, 0);
  for (int t = 0; t < frames; ++t) {
    for (int c = 0; c < cells; ++c) {
      if (g.frame_counts[t][c] == 0) continue;
      g.frame_means[t].row(c) /= g.frame_counts[t][c];
      ++g.observed[c];
    }
  }
  g.variance = Vector::Zero(cells);
  g.valid.assign(cells, 0);
  const double needed = cfg.min_coverage * frames;
  for (int c = 0; c < cells; ++c) {
    const int n = g.observed[c];
    if (n == 0) continue;
    Vector mu = Vector::Zero(ambient_dim);
    for (int t = 0; t < frames; ++t)
      if (g.frame_counts[t][c] > 0) mu += g.frame_means[t].row(c).transpose();
    mu /= n;
    double var = 0.0;
    for (int t = 0; t < frames; ++t)
      if (g.frame_counts[t][c] > 0) var += (g.frame_means[t].row(c).transpose() - mu).squaredNorm();
    g.variance(c) = var / n;
    g.valid[c] = n >= needed ? 1 : 0;
  }
  g.smoothed = smooth_valid(g.variance, g.valid, grid.nx, grid.ny, cfg.sigma);
  return g;
}

std::vector<AmbientSample> ambient_samples(const Stage1Model& model, const std::vector<Camera>& cameras,
                                           const AnalysisConfig& cfg) {
  const int rpp = std::max(1, cfg.rays_per_pixel);
  RenderOptions opt;
  opt.samples = cfg.samples;
  std::vector<AmbientSample> out;
  for (std::size_t t = 0; t < cameras.size(); ++t) {
    const Camera& cam = cameras[t];
    const int n = cam.width * rpp;
    RayBatch rays;
    rays.origins.resize(n, 2);
    rays.directions.resize(n, 2);
    rays.frames.assign(n, static_cast<int>(t));
    rays.keys.resize(n);
    rays.near = cam.near;
    rays.far = cam.far;
    std::vector<double> us(n);
    for (int k = 0; k < n; ++k) {
      us[k] = (k + 0.5) / rpp;
      const Ray r = cam.ray(us[k]);
      rays.origins.row(k) = r.origin.transpose();
      rays.directions.row(k) = r.direction.transpose();
      rays.keys[k] = k;
    }
    Graph g(model.param_store());
    const RenderResult rr = render_rays(g, model, rays, opt);
    const Matrix& depth = rr.out.depth.value();
    const Matrix& opacity = rr.out.opacity.value();
    Matrix pts(n, 2);
    int m = 0;
    for (int k = 0; k < n; ++k) {
      if (opacity(k, 0) <= cfg.surface_opacity) continue;
      pts.row(m++) = cam.lift(us[k], depth(k, 0)).transpose();
    }
    if (m == 0) continue;
    const Stage1Model::Query q = model.query(pts.topRows(m), static_cast<int>(t));
    for (int k = 0; k < m; ++k) {
      out.push_back({q.canonical.row(k).transpose(), static_cast<int>(t), q.ambient.row(k).transpose()});
    }
  }
  return out;
}

VarianceGrid build_variance_grid(const Dataset& data, const Stage1Model& model,
                                 const AnalysisConfig& cfg) {
  GridSpec grid;
  grid.lo = data.bounds_lo;
  grid.hi = data.bounds_hi;
  grid.nx = grid.ny = cfg.grid;
  return accumulate_variance(grid, data.frames, model.config().ambient_dim,
                             ambient_samples(model, data.cameras, cfg), cfg);
}

std::vector<ReferenceKeyPoint> detect_reference_keypoints(const VarianceGrid& grid,
                                                          const AnalysisConfig& cfg) {
  const int nx = grid.spec.nx, ny = grid.spec.ny;
  double top = 0.0;
  for (int c = 0; c < grid.cells(); ++c)
    if (grid.valid[c]) top = std::max(top, grid.smoothed(c));
  std::vector<ReferenceKeyPoint> cand;
  if (top > 0.0) {
    for (int iy = 0; iy < ny; ++iy) {
      for (int ix = 0; ix < nx; ++ix) {
        const int c = grid.index(ix, iy);
        const double s = grid.smoothed(c);
        if (!grid.valid[c] || s < cfg.rho * top) continue;
        bool peak = true;
        for (int dy = -1; dy <= 1 && peak; ++dy)
          for (int dx = -1; dx <= 1 && peak; ++dx) {
            if (dx == 0 && dy == 0) continue;
            const int x = ix + dx, y = iy + dy;
            if (x < 0 || y < 0 || x >= nx || y >= ny) continue;
            if (grid.smoothed(grid.index(x, y)) >= s) peak = false;
          }
        if (!peak) continue;
        ReferenceKeyPoint r;
        r.ix = ix;
        r.iy = iy;
        r.score = s;
        r.position = grid.spec.cell_center(ix, iy);
        cand.push_back(r);
      }
    }
  }
  std::sort(cand.begin(), cand.end(), [](const auto& a, const auto& b) {
    if (a.score != b.score) return a.score > b.score;
    return std::tie(a.ix, a.iy) < std::tie(b.ix, b.iy);
  });
  std::vector<ReferenceKeyPoint> kept;
  for (const auto& c : cand) {
    const bool clear = std::all_of(kept.begin(), kept.end(), [&](const auto& k) {
      return std::hypot(c.ix - k.ix, c.iy - k.iy) > cfg.suppression;
    });
    if (clear) kept.push_back(c);
  }
  if (kept.empty()) {
    throw AnalysisError("no key points detected; lower the score floor rho (now " +
                        std::to_string(cfg.rho) + ") or the smoothing sigma");
  }
  return kept;
}

int select_reference_frame(const Vec2& k, const std::vector<Vector>& depth,
                           const std::vector<Camera>& cameras, double delta) {
  int best = -1;
  double best_r = std::numeric_limits<double>::infinity();
  for (std::size_t t = 0; t < cameras.size(); ++t) {
    const Camera& cam = cameras[t];
    const Projection p = cam.project(k);
    if (!p.in_front || !cam.inside(p.u)) continue;
    const double r = cam.distance(k) - sample_pixels(depth.at(t), p.u);
    if (r * r < delta * delta) return static_cast<int>(t);
    if (std::abs(r) < best_r) best_r = std::abs(r), best = static_cast<int>(t);
  }
  std::ostringstream msg;
  msg << "no reference frame for key point (" << k.x() << ", " << k.y() << ") within delta " << delta;
  if (best >= 0) msg << "; best frame " << best << " with residual " << best_r;
  throw AnalysisError(msg.str());
}

double FlowSource::direct(int from, int to, double u) const {
  const int dir = to > from ? 1 : -1;
  double x = u;
  for (int t = from; t != to; t += dir) x = clamp(x + step(t, t + dir, x));
  return x - u;
}

MapFlowSource::MapFlowSource(std::vector<Vector> forward, std::vector<Vector> backward, int width)
    : forward_(std::move(forward)), backward_(std::move(backward)),
      frames_(static_cast<int>(backward_.size())), width_(width) {
  if (frames_ < 1 || static_cast<int>(forward_.size()) < frames_ - 1) {
    throw std::invalid_argument("flow maps: need T backward and at least T-1 forward entries");
  }
}

MapFlowSource::MapFlowSource(const Dataset& data)
    : MapFlowSource(data.flow_fw, data.flow_bw, data.width) {}

double MapFlowSource::step(int from, int to, double u) const {
  if (to == from + 1) return sample_pixels(forward_.at(from), u);
  if (to == from - 1) return sample_pixels(backward_.at(from), u);
  throw std::invalid_argument("flow step between non-adjacent frames");
}

DirectFlowSource::DirectFlowSource(const Dataset& data, PairFn pair)
    : MapFlowSource(data), pair_(std::move(pair)) {}

double DirectFlowSource::direct(int from, int to, double u) const {
  if (std::abs(to - from) == 1) return step(from, to, u);
  if (to == from) return 0.0;
  std::lock_guard lock(mutex_);
  auto it = cache_.find({from, to});
  if (it == cache_.end()) it = cache_.emplace(std::make_pair(from, to), pair_(from, to)).first;
  return sample_pixels(it->second, u);
}

std::string to_string(Provenance p) {
  switch (p) {
    case Provenance::reference: return "reference";
    case Provenance::frame_by_frame: return "frame-by-frame";
    case Provenance::skip: return "skip";
  }
  return "?";
}

Provenance provenance_from_string(const std::string& s) {
  if (s == "reference") return Provenance::reference;
  if (s == "frame-by-frame") return Provenance::frame_by_frame;
  if (s == "skip") return Provenance::skip;
  throw std::invalid_argument("unknown provenance '" + s + "'");
}

namespace {

double round_trip(const FlowSource& flow, double u_ref, int t_ref, int t, bool use_direct,
                  double* forward_pos) {
  auto go = [&](int a, int b, double u) {
    return flow.clamp(u + (use_direct ? flow.direct(a, b, u) : flow.FlowSource::direct(a, b, u)));
  };
  const double p = go(t_ref, t, u_ref);
  if (forward_pos != nullptr) *forward_pos = p;
  return std::abs(go(t, t_ref, p) - u_ref);
}

Vec2 lift_at(const Lifting& lift, int t, double u) {
  return lift.cameras->at(t).lift(u, sample_pixels(lift.depth->at(t), u));
}

}  // namespace

double flow_confidence(const FlowSource& flow, double u_ref, int t_ref, int t, double eps) {
  if (t == t_ref) return 1.0 / eps;
  return 1.0 / (eps + round_trip(flow, u_ref, t_ref, t, true, nullptr));
}

KeyPointTrack propagate(const Vec2& k_ref, int t_ref, const FlowSource& flow, const Lifting& lift,
                        double eps) {
  const int T = flow.frames();
  if (t_ref < 0 || t_ref >= T) throw std::out_of_range("reference frame out of range");
  KeyPointTrack tr;
  tr.k_ref = k_ref;
  tr.t_ref = t_ref;
  tr.pixel.assign(T, 0.0);
  tr.world.assign(T, Vec2::Zero());
  tr.confidence.assign(T, 0.0);
  tr.provenance.assign(T, Provenance::frame_by_frame);
  tr.clamped.assign(T, false);

  const Projection p = lift.cameras->at(t_ref).project(k_ref);
  tr.pixel[t_ref] = flow.clamp(p.u);
  tr.clamped[t_ref] = !p.in_front || tr.pixel[t_ref] != p.u;
  tr.provenance[t_ref] = Provenance::reference;
  tr.confidence[t_ref] = 1.0 / eps;
  for (int dir : {1, -1}) {
    for (int t = t_ref + dir; t >= 0 && t < T; t += dir) {
      const double raw = tr.pixel[t - dir] + flow.step(t - dir, t, tr.pixel[t - dir]);
      tr.pixel[t] = flow.clamp(raw);
      tr.clamped[t] = tr.pixel[t] != raw;
      tr.confidence[t] = 1.0 / (eps + round_trip(flow, tr.pixel[t_ref], t_ref, t, false, nullptr));
    }
  }
  for (int t = 0; t < T; ++t) tr.world[t] = lift_at(lift, t, tr.pixel[t]);
  return tr;
}

KeyPointTrack skipping_propagate(const KeyPointTrack& track, const FlowSource& flow, const Lifting& lift,
                                 int every, double threshold, double eps) {
  if (every < 1) throw std::invalid_argument("skip interval must be positive");
  KeyPointTrack tr = track;
  const int T = flow.frames();
  const int t_ref = tr.t_ref;
  const double u_ref = tr.pixel[t_ref];
  for (int dir : {1, -1}) {
    bool rerun = false;  // positions since the last replaced anchor need re-propagation
    for (int t = t_ref + dir; t >= 0 && t < T; t += dir) {
      if ((std::abs(t - t_ref) % every) == 0) {
        double pos = 0.0;
        const double conf = 1.0 / (eps + round_trip(flow, u_ref, t_ref, t, true, &pos));
        if (conf > threshold) {
          tr.pixel[t] = pos;
          tr.confidence[t] = conf;
          tr.provenance[t] = Provenance::skip;
          tr.clamped[t] = false;
          rerun = true;
          continue;
        }
      }
      if (!rerun) continue;
      const double raw = tr.pixel[t - dir] + flow.step(t - dir, t, tr.pixel[t - dir]);
      tr.pixel[t] = flow.clamp(raw);
      tr.clamped[t] = tr.pixel[t] != raw;
      tr.provenance[t] = Provenance::frame_by_frame;
    }
  }
  for (int t = 0; t < T; ++t) tr.world[t] = lift_at(lift, t, tr.pixel[t]);
  return tr;
}

AnalysisResult analyze(const Dataset& data, const Stage1Model& model, const std::vector<Vector>& depth,
                       const FlowSource& flow, const AnalysisConfig& cfg) {
  AnalysisResult r;
  r.grid = build_variance_grid(data, model, cfg);
  r.references = detect_reference_keypoints(r.grid, cfg);
  const Lifting lift{&depth, &data.cameras};
  const double delta = cfg.delta_fraction * data.diagonal();
  for (auto& ref : r.references) {
    ref.frame = select_reference_frame(ref.position, depth, data.cameras, delta);
    KeyPointTrack tr = propagate(ref.position, ref.frame, flow, lift, cfg.conf_eps);
    tr = skipping_propagate(tr, flow, lift, cfg.skip_interval(data.frames), cfg.conf_threshold,
                            cfg.conf_eps);
    tr.score = ref.score;
    r.tracks.push_back(std::move(tr));
  }
  return r;
}

KeyPointSet to_keypoint_set(const std::vector<KeyPointTrack>& tracks) {
  if (tracks.empty()) throw std::invalid_argument("no tracks to convert");
  const int T = static_cast<int>(tracks[0].world.size());
  KeyPointSet kp(T, static_cast<int>(tracks.size()), 2);
  for (std::size_t i = 0; i < tracks.size(); ++i) {
    if (static_cast<int>(tracks[i].world.size()) != T) throw std::invalid_argument("tracks differ in length");
    for (int t = 0; t < T; ++t) kp.set(t, static_cast<int>(i), tracks[i].world[t]);
    kp.reference_frames[i] = tracks[i].t_ref;
  }
  kp.validate();
  return kp;
}

nlohmann::json tracks_to_json(const std::vector<KeyPointTrack>& tracks) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& t : tracks) {
    nlohmann::json world = nlohmann::json::array();
    for (const auto& w : t.world) world.push_back({w.x(), w.y()});
    std::vector<std::string> prov;
    for (auto p : t.provenance) prov.push_back(to_string(p));
    // confidences reach 1/eps; store them as plain numbers
    arr.push_back({{"t_ref", t.t_ref},
                   {"k_ref", {t.k_ref.x(), t.k_ref.y()}},
                   {"score", t.score},
                   {"pixel", t.pixel},
                   {"world", world},
                   {"confidence", t.confidence},
                   {"provenance", prov},
                   {"clamped", t.clamped}});
  }
  return {{"version", 1}, {"keypoints", arr}};
}

std::vector<KeyPointTrack> tracks_from_json(const nlohmann::json& j) {
  std::vector<KeyPointTrack> out;
  for (const auto& e : j.at("keypoints")) {
    KeyPointTrack t;
    t.t_ref = e.at("t_ref").get<int>();
    t.k_ref = Vec2(e.at("k_ref")[0].get<double>(), e.at("k_ref")[1].get<double>());
    t.score = e.value("score", 0.0);
    t.pixel = e.at("pixel").get<std::vector<double>>();
    for (const auto& w : e.at("world")) t.world.emplace_back(w[0].get<double>(), w[1].get<double>());
    t.confidence = e.at("confidence").get<std::vector<double>>();
    for (const auto& p : e.at("provenance")) t.provenance.push_back(provenance_from_string(p.get<std::string>()));
    t.clamped = e.at("clamped").get<std::vector<bool>>();
    const std::size_t T = t.pixel.size();
    if (t.world.size() != T || t.confidence.size() != T || t.provenance.size() != T || t.clamped.size() != T) {
      throw std::invalid_argument("track entries have inconsistent lengths");
    }
    out.push_back(std::move(t));
  }
  return out;
}

void save_tracks(const std::filesystem::path& path, const std::vector<KeyPointTrack>& tracks) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << tracks_to_json(tracks).dump(1) << '\n';
}

std::vector<KeyPointTrack> load_tracks(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  return tracks_from_json(nlohmann::json::parse(in));
}

}  // namespace kpnerf
