#include "kpnerf/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>

namespace kpnerf::synth {

namespace {

using nlohmann::json;

Vec2 vec2_from(const json& j) {
  if (!j.is_array() || j.size() != 2) throw std::invalid_argument("expected a 2-vector, got " + j.dump());
  return {j[0].get<double>(), j[1].get<double>()};
}

json vec2_to(const Vec2& v) { return json::array({v.x(), v.y()}); }

Color color_from(const json& j) {
  if (!j.is_array() || j.size() != 3) throw std::invalid_argument("expected an RGB triple, got " + j.dump());
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

json shape_to(const Shape& s) {
  json j{{"type", s.kind == ShapeKind::rect ? "rect" : "disc"},
         {"center", vec2_to(s.center)},
         {"color", s.color}};
  if (s.kind == ShapeKind::rect) {
    j["size"] = vec2_to(s.size);
  } else {
    j["radius"] = s.radius;
  }
  if (s.stripe_amp != 0.0) {
    j["stripe_amp"] = s.stripe_amp;
    j["stripe_period"] = s.stripe_period;
  }
  return j;
}

Shape shape_from(const json& j) {
  Shape s;
  const std::string type = j.at("type").get<std::string>();
  if (type == "rect") {
    s.kind = ShapeKind::rect;
    s.size = vec2_from(j.at("size"));
  } else if (type == "disc") {
    s.kind = ShapeKind::disc;
    s.radius = j.at("radius").get<double>();
  } else {
    throw std::invalid_argument("unknown shape type '" + type + "'");
  }
  s.center = vec2_from(j.at("center"));
  s.color = color_from(j.at("color"));
  s.stripe_amp = j.value("stripe_amp", 0.0);
  s.stripe_period = j.value("stripe_period", 0.1);
  return s;
}

/// Entry distance of a ray into a shape placed at `shift`, if it is hit in front.
std::optional<double> intersect(const Shape& s, const Vec2& shift, const Ray& ray) {
  const Vec2 c = s.center + shift;
  constexpr double kMin = 1e-9;
  if (s.kind == ShapeKind::rect) {
    const Vec2 lo = c - 0.5 * s.size;
    const Vec2 hi = c + 0.5 * s.size;
    double t0 = -std::numeric_limits<double>::infinity();
    double t1 = std::numeric_limits<double>::infinity();
    for (int a = 0; a < 2; ++a) {
      const double o = ray.origin(a);
      const double d = ray.direction(a);
      if (std::abs(d) < 1e-15) {
        if (o < lo(a) || o > hi(a)) return std::nullopt;
        continue;
      }
      double ta = (lo(a) - o) / d;
      double tb = (hi(a) - o) / d;
      if (ta > tb) std::swap(ta, tb);
      t0 = std::max(t0, ta);
      t1 = std::min(t1, tb);
    }
    if (t0 > t1 || t1 < kMin) return std::nullopt;
    // a ray starting inside a shape sees its inner wall
    return t0 >= kMin ? t0 : t1;
  }
  const Vec2 oc = ray.origin - c;
  const double b = oc.dot(ray.direction);
  const double disc = b * b - (oc.squaredNorm() - s.radius * s.radius);
  if (disc < 0.0) return std::nullopt;
  const double root = std::sqrt(disc);
  if (-b + root < kMin) return std::nullopt;
  return -b - root >= kMin ? -b - root : -b + root;
}

bool inside_box(const Vec2& p, const Vec2& center, const Vec2& size) {
  return std::abs(p.x() - center.x()) <= 0.5 * size.x() &&
         std::abs(p.y() - center.y()) <= 0.5 * size.y();
}

double stripe(const Shape& s, const Vec2& local) {
  if (s.stripe_amp == 0.0) return 1.0;
  const double phase = 2.0 * std::numbers::pi * (local.x() + local.y()) / s.stripe_period;
  return 1.0 - s.stripe_amp * 0.5 * (1.0 + std::sin(phase));
}

void check_box_inside(const SceneSpec& spec, const Vec2& lo, const Vec2& hi, const std::string& what) {
  if ((lo.array() < spec.bounds_lo.array() - 1e-12).any() ||
      (hi.array() > spec.bounds_hi.array() + 1e-12).any()) {
    throw std::invalid_argument(what + " leaves the scene bounds");
  }
}

void shape_extent(const Shape& s, const Vec2& shift, Vec2& lo, Vec2& hi) {
  const Vec2 half = s.kind == ShapeKind::rect ? Vec2(0.5 * s.size) : Vec2(s.radius, s.radius);
  lo = s.center + shift - half;
  hi = s.center + shift + half;
}

}  // namespace

void SceneSpec::validate() const {
  if (frames < 1) throw std::invalid_argument("scene needs at least one frame");
  if (width < 1) throw std::invalid_argument("image width must be positive");
  if (!(near > 0.0 && near < far)) throw std::invalid_argument("need 0 < near < far");
  if (!(camera.focal > 0.0)) throw std::invalid_argument("focal length must be positive");
  if ((bounds_hi.array() <= bounds_lo.array()).any()) throw std::invalid_argument("empty scene bounds");
  for (const Shape& s : statics) {
    Vec2 lo, hi;
    shape_extent(s, Vec2::Zero(), lo, hi);
    check_box_inside(*this, lo, hi, "a static shape");
  }
  for (const Part& p : parts) {
    if (p.shapes.empty()) throw std::invalid_argument("part '" + p.name + "' has no shapes");
    for (const Episode& e : p.episodes) {
      if (e.start < 0 || e.end >= frames || e.end <= e.start) {
        throw std::invalid_argument("part '" + p.name + "' has an episode outside [0, T)");
      }
    }
  }
  for (int t = 0; t < frames; ++t) {
    const PartOffsets off = offsets_at(*this, t);
    for (std::size_t i = 0; i < parts.size(); ++i) {
      for (const Shape& s : parts[i].shapes) {
        Vec2 lo, hi;
        shape_extent(s, parts[i].origin + off[i], lo, hi);
        check_box_inside(*this, lo, hi, "part '" + parts[i].name + "' at frame " + std::to_string(t));
      }
    }
  }
}

void to_json(json& j, const SceneSpec& s) {
  json statics = json::array();
  for (const Shape& sh : s.statics) statics.push_back(shape_to(sh));
  json parts = json::array();
  for (const Part& p : s.parts) {
    json shapes = json::array();
    for (const Shape& sh : p.shapes) shapes.push_back(shape_to(sh));
    json episodes = json::array();
    for (const Episode& e : p.episodes) {
      episodes.push_back({{"start", e.start}, {"end", e.end}, {"offset", vec2_to(e.offset)}});
    }
    json shades = json::array();
    for (const Shade& sh : p.shades) {
      shades.push_back({{"center", vec2_to(sh.center)}, {"size", vec2_to(sh.size)}, {"factor", sh.factor}});
    }
    parts.push_back({{"name", p.name},
                     {"origin", vec2_to(p.origin)},
                     {"marker", vec2_to(p.marker)},
                     {"shapes", shapes},
                     {"episodes", episodes},
                     {"shades", shades},
                     {"press_shade", p.press_shade}});
  }
  j = json{{"name", s.name},
           {"frames", s.frames},
           {"width", s.width},
           {"near", s.near},
           {"far", s.far},
           {"background", s.background},
           {"bounds_lo", vec2_to(s.bounds_lo)},
           {"bounds_hi", vec2_to(s.bounds_hi)},
           {"camera",
            {{"target", vec2_to(s.camera.target)},
             {"radius", s.camera.radius},
             {"azimuth_start", s.camera.azimuth_start},
             {"azimuth_end", s.camera.azimuth_end},
             {"focal", s.camera.focal}}},
           {"statics", statics},
           {"parts", parts},
           {"noise", {{"flow_sigma", s.noise.flow_sigma}, {"image_sigma", s.noise.image_sigma}}}};
}

void from_json(const json& j, SceneSpec& s) {
  s = SceneSpec{};
  s.name = j.value("name", std::string("scene"));
  s.frames = j.at("frames").get<int>();
  s.width = j.at("width").get<int>();
  s.near = j.at("near").get<double>();
  s.far = j.at("far").get<double>();
  if (j.contains("background")) s.background = color_from(j.at("background"));
  if (j.contains("bounds_lo")) s.bounds_lo = vec2_from(j.at("bounds_lo"));
  if (j.contains("bounds_hi")) s.bounds_hi = vec2_from(j.at("bounds_hi"));
  const json& c = j.at("camera");
  s.camera.target = vec2_from(c.at("target"));
  s.camera.radius = c.at("radius").get<double>();
  s.camera.azimuth_start = c.at("azimuth_start").get<double>();
  s.camera.azimuth_end = c.value("azimuth_end", s.camera.azimuth_start);
  s.camera.focal = c.at("focal").get<double>();
  for (const json& sh : j.value("statics", json::array())) s.statics.push_back(shape_from(sh));
  for (const json& pj : j.value("parts", json::array())) {
    Part p;
    p.name = pj.at("name").get<std::string>();
    p.origin = vec2_from(pj.at("origin"));
    p.marker = vec2_from(pj.at("marker"));
    for (const json& sh : pj.at("shapes")) p.shapes.push_back(shape_from(sh));
    for (const json& e : pj.value("episodes", json::array())) {
      p.episodes.push_back({e.at("start").get<int>(), e.at("end").get<int>(), vec2_from(e.at("offset"))});
    }
    for (const json& sh : pj.value("shades", json::array())) {
      p.shades.push_back({vec2_from(sh.at("center")), vec2_from(sh.at("size")), sh.value("factor", 0.6)});
    }
    p.press_shade = pj.value("press_shade", 1.0);
    s.parts.push_back(std::move(p));
  }
  if (j.contains("noise")) {
    s.noise.flow_sigma = j["noise"].value("flow_sigma", 0.0);
    s.noise.image_sigma = j["noise"].value("image_sigma", 0.0);
  }
}

SceneSpec load_spec(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open scene spec " + path.string());
  SceneSpec spec = json::parse(in).get<SceneSpec>();
  spec.validate();
  return spec;
}

double episode_profile(const Episode& e, int t) {
  if (t <= e.start || t >= e.end) return 0.0;
  const double s = static_cast<double>(t - e.start) / static_cast<double>(e.end - e.start);
  return std::clamp(std::min(s, 1.0 - s) / 0.25, 0.0, 1.0);
}

PartOffsets offsets_at(const SceneSpec& spec, int t) {
  PartOffsets off(spec.parts.size(), Vec2::Zero());
  for (std::size_t i = 0; i < spec.parts.size(); ++i) {
    for (const Episode& e : spec.parts[i].episodes) off[i] += episode_profile(e, t) * e.offset;
  }
  return off;
}

Camera camera_at(const SceneSpec& spec, int t) {
  const double s = spec.frames > 1 ? static_cast<double>(t) / (spec.frames - 1) : 0.0;
  const double az = spec.camera.azimuth_start + s * (spec.camera.azimuth_end - spec.camera.azimuth_start);
  return look_at_orbit(spec.camera.target, spec.camera.radius, az, spec.camera.focal, spec.width,
                       spec.near, spec.far);
}

Vec2 marker_world(const SceneSpec& spec, const PartOffsets& offsets, int part) {
  const Part& p = spec.parts.at(part);
  return p.origin + offsets.at(part) + p.marker;
}

Hit cast(const SceneSpec& spec, const PartOffsets& offsets, const Ray& ray) {
  Hit best;
  best.distance = std::numeric_limits<double>::infinity();
  const Shape* shape = nullptr;
  Vec2 shift = Vec2::Zero();
  const int static_id = static_cast<int>(spec.parts.size()) + 1;
  for (const Shape& s : spec.statics) {
    if (auto d = intersect(s, Vec2::Zero(), ray); d && *d < best.distance) {
      best = Hit{true, *d, static_id, -1};
      shape = &s;
      shift = Vec2::Zero();
    }
  }
  for (std::size_t i = 0; i < spec.parts.size(); ++i) {
    const Vec2 sh = spec.parts[i].origin + offsets[i];
    for (const Shape& s : spec.parts[i].shapes) {
      if (auto d = intersect(s, sh, ray); d && *d < best.distance) {
        best = Hit{true, *d, static_cast<int>(i) + 1, static_cast<int>(i)};
        shape = &s;
        shift = sh;
      }
    }
  }
  if (!best.found) return Hit{};
  best.point = ray.origin + best.distance * ray.direction;
  double k = stripe(*shape, best.point - shift);
  if (best.part >= 0) {
    const Part& p = spec.parts[best.part];
    double reach = 0.0;
    for (const Episode& e : p.episodes) reach = std::max(reach, e.offset.norm());
    if (reach > 0.0 && p.press_shade != 1.0) {
      const double a = std::min(1.0, offsets[best.part].norm() / reach);
      k *= 1.0 - (1.0 - p.press_shade) * a;
    }
  }
  for (std::size_t i = 0; i < spec.parts.size(); ++i) {
    if (static_cast<int>(i) == best.part) continue;
    const Vec2 sh = spec.parts[i].origin + offsets[i];
    for (const Shade& shade : spec.parts[i].shades) {
      if (inside_box(best.point, shade.center + sh, shade.size)) k *= shade.factor;
    }
  }
  for (int c = 0; c < 3; ++c) best.color[c] = std::clamp(shape->color[c] * k, 0.0, 1.0);
  return best;
}

Raster rasterize(const SceneSpec& spec, const PartOffsets& offsets, const Camera& cam) {
  Raster r;
  r.rgb.resize(cam.width, 3);
  r.depth.resize(cam.width);
  r.ids.assign(cam.width, 0);
  for (int i = 0; i < cam.width; ++i) {
    const Hit h = cast(spec, offsets, cam.ray(i + 0.5));
    if (h.found && h.distance <= cam.far) {
      for (int c = 0; c < 3; ++c) r.rgb(i, c) = h.color[c];
      r.depth(i) = h.distance;
      r.ids[i] = static_cast<std::uint16_t>(h.id);
    } else {
      for (int c = 0; c < 3; ++c) r.rgb(i, c) = spec.background[c];
      r.depth(i) = cam.far;
    }
  }
  return r;
}

namespace {

/// True when `x` (on part `part`, -1 for scenery) is the first surface seen from `cam`.
bool visible_from(const SceneSpec& spec, const PartOffsets& offsets, const Camera& cam,
                  const Vec2& x, int id) {
  const Projection p = cam.project(x);
  if (!p.in_front || !cam.inside(p.u)) return false;
  const double dist = cam.distance(x);
  if (dist > cam.far) return false;
  const Ray ray{cam.origin, (x - cam.origin) / dist};
  const Hit h = cast(spec, offsets, ray);
  return h.found && h.id == id && std::abs(h.distance - dist) < 1e-7;
}

}  // namespace

std::optional<double> flow_at(const SceneSpec& spec, int t, int target, double u) {
  const Camera cam = camera_at(spec, t);
  const PartOffsets off = offsets_at(spec, t);
  const Hit h = cast(spec, off, cam.ray(u));
  if (!h.found || h.distance > cam.far) return std::nullopt;
  const PartOffsets off_target = offsets_at(spec, target);
  Vec2 moved = h.point;
  if (h.part >= 0) moved += off_target[h.part] - off[h.part];
  const Camera cam_target = camera_at(spec, target);
  if (!visible_from(spec, off_target, cam_target, moved, h.id)) return std::nullopt;
  return cam_target.project(moved).u - u;
}

FlowField exact_flow(const SceneSpec& spec, int t, int target) {
  FlowField f;
  f.flow = Vector::Zero(spec.width);
  f.valid.assign(spec.width, 0);
  for (int i = 0; i < spec.width; ++i) {
    if (auto v = flow_at(spec, t, target, i + 0.5)) {
      f.flow(i) = *v;
      f.valid[i] = 1;
    }
  }
  // nearest valid pixel, left neighbour first on ties
  const Vector raw = f.flow;
  for (int i = 0; i < spec.width; ++i) {
    if (f.valid[i]) continue;
    for (int r = 1; r < spec.width; ++r) {
      if (i - r >= 0 && f.valid[i - r]) {
        f.flow(i) = raw(i - r);
        break;
      }
      if (i + r < spec.width && f.valid[i + r]) {
        f.flow(i) = raw(i + r);
        break;
      }
    }
  }
  return f;
}

std::vector<Track> ground_truth_tracks(const SceneSpec& spec) {
  std::vector<Track> tracks(spec.parts.size());
  for (std::size_t i = 0; i < spec.parts.size(); ++i) tracks[i].part = spec.parts[i].name;
  for (int t = 0; t < spec.frames; ++t) {
    const PartOffsets off = offsets_at(spec, t);
    const Camera cam = camera_at(spec, t);
    for (std::size_t i = 0; i < spec.parts.size(); ++i) {
      const Vec2 x = marker_world(spec, off, static_cast<int>(i));
      tracks[i].world.push_back(x);
      tracks[i].pixel.push_back(cam.project(x).u);
      tracks[i].distance.push_back(cam.distance(x));
      tracks[i].visible.push_back(visible_from(spec, off, cam, x, static_cast<int>(i) + 1));
    }
  }
  return tracks;
}

}  // namespace kpnerf::synth
