#include "kpnerf/dataset.hpp"

#include <doctest.h>

#include <cstring>
#include <fstream>

using namespace kpnerf;
using namespace kpnerf::synth;
namespace fs = std::filesystem;

namespace {

fs::path fixture(const char* name) { return fs::path(KPNERF_FIXTURE_DIR) / name; }

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("kpnerf_synth_" + name);
  fs::remove_all(p);
  return p;
}

SceneSpec axis_spec() {
  SceneSpec s;
  s.frames = 3;
  s.width = 64;
  s.near = 0.5;
  s.far = 5.0;
  s.bounds_lo = Vec2(-3, -3);
  s.bounds_hi = Vec2(3, 3);
  // camera at the origin looking along +y
  s.camera.target = Vec2(0.0, 2.0);
  s.camera.radius = 2.0;
  s.camera.azimuth_start = s.camera.azimuth_end = std::numbers::pi;
  s.camera.focal = 40.0;
  return s;
}

std::vector<char> slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

bool same_tree(const fs::path& a, const fs::path& b) {
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    const fs::path rel = fs::relative(e.path(), a);
    if (slurp(e.path()) != slurp(b / rel)) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("rasterize: empty scene shows background at the far plane") {
  SceneSpec s = axis_spec();
  Raster r = rasterize(s, offsets_at(s, 0), camera_at(s, 0));
  CHECK((r.rgb.array() == 1.0).all());
  CHECK((r.depth.array() == s.far).all());
  CHECK(std::all_of(r.ids.begin(), r.ids.end(), [](auto id) { return id == 0; }));
}

TEST_CASE("rasterize: a surrounding wall at distance two") {
  SceneSpec s = axis_spec();
  Shape ring;
  ring.kind = ShapeKind::disc;
  ring.radius = 2.0;
  ring.center = Vec2::Zero();
  s.statics.push_back(ring);
  const Camera cam = camera_at(s, 0);
  REQUIRE(cam.origin.norm() < 1e-12);
  Raster r = rasterize(s, offsets_at(s, 0), cam);
  CHECK((r.depth.array() - 2.0).abs().maxCoeff() < 1e-12);
}

TEST_CASE("rasterize: pressing key 1 only changes key 1 and its shadow") {
  const SceneSpec spec = load_spec(fixture("piano-2.json"));
  const Part& key = spec.parts[0];
  const int pressed = 15;
  REQUIRE(episode_profile(key.episodes[0], pressed) == 1.0);
  const Camera cam = camera_at(spec, pressed);
  const PartOffsets rest = offsets_at(spec, 0);
  const PartOffsets down = offsets_at(spec, pressed);
  Raster a = rasterize(spec, rest, cam);
  Raster b = rasterize(spec, down, cam);
  int changed = 0;
  for (int i = 0; i < spec.width; ++i) {
    if ((a.rgb.row(i) - b.rgb.row(i)).norm() == 0.0) continue;
    ++changed;
    const bool on_key = a.ids[i] == 1 || b.ids[i] == 1;
    bool shaded = false;
    const Hit h = cast(spec, down, cam.ray(i + 0.5));
    for (const Shade& sh : key.shades) {
      const Vec2 c = key.origin + down[0] + sh.center;
      shaded |= std::abs(h.point.x() - c.x()) <= 0.5 * sh.size.x() &&
                std::abs(h.point.y() - c.y()) <= 0.5 * sh.size.y();
    }
    CHECK_MESSAGE((on_key || shaded), "pixel " << i);
  }
  CHECK(changed > 0);
}

TEST_CASE("exact_flow: static scene and static camera give zero flow") {
  SceneSpec s = axis_spec();
  Shape wall;
  wall.center = Vec2(0.0, 2.5);
  wall.size = Vec2(4.0, 0.2);
  wall.stripe_amp = 0.3;
  s.statics.push_back(wall);
  FlowField f = exact_flow(s, 0, 1);
  CHECK(f.flow.cwiseAbs().maxCoeff() < 1e-9);
  CHECK(std::all_of(f.valid.begin(), f.valid.end(), [](auto v) { return v == 1; }));
}

TEST_CASE("exact_flow: uniform lateral translation") {
  SceneSpec s = axis_spec();
  s.frames = 5;
  const double z = 2.0;
  Part p;
  p.name = "slab";
  p.origin = Vec2(0.0, z + 0.1);
  Shape slab;
  slab.size = Vec2(1.0, 0.2);
  p.shapes.push_back(slab);
  // shifts the projection by +2 px between frames 0 and 1
  p.episodes.push_back({0, 4, Vec2(2.0 * z / s.camera.focal, 0.0)});
  s.parts.push_back(p);
  s.validate();
  Raster r = rasterize(s, offsets_at(s, 0), camera_at(s, 0));
  FlowField f = exact_flow(s, 0, 1);
  int checked = 0;
  for (int i = 0; i < s.width; ++i) {
    if (r.ids[i] != 1 || !f.valid[i]) continue;
    CHECK(f.flow(i) == doctest::Approx(2.0).epsilon(1e-12));
    ++checked;
  }
  CHECK(checked > 10);
}

TEST_CASE("exact_flow: composing flow along visible tracks reproduces them") {
  for (const char* name : {"piano-2.json", "dice-cups-3.json", "slider-1.json"}) {
    const SceneSpec spec = load_spec(fixture(name));
    const auto tracks = ground_truth_tracks(spec);
    double worst = 0.0;
    int steps = 0;
    for (const Track& tr : tracks) {
      double u = tr.pixel[0];
      for (int t = 0; t + 1 < spec.frames; ++t) {
        if (!tr.visible[t] || !tr.visible[t + 1]) {
          u = tr.pixel[t + 1];
          continue;
        }
        auto f = flow_at(spec, t, t + 1, u);
        REQUIRE(f.has_value());
        u += *f;
        worst = std::max(worst, std::abs(u - tr.pixel[t + 1]));
        ++steps;
      }
    }
    CHECK_MESSAGE(worst < 1e-6, name);
    CHECK(steps >= 60);
  }
}

TEST_CASE("synth oracle: depth at track pixels equals the camera distance") {
  const SceneSpec spec = load_spec(fixture("piano-2.json"));
  const auto tracks = ground_truth_tracks(spec);
  for (const Track& tr : tracks) {
    for (int t = 0; t < spec.frames; ++t) {
      if (!tr.visible[t]) continue;
      const Camera cam = camera_at(spec, t);
      const Hit h = cast(spec, offsets_at(spec, t), cam.ray(tr.pixel[t]));
      CHECK(std::abs(h.distance - tr.distance[t]) < 1e-9);
    }
  }
}

TEST_CASE("synth fixtures: every part reaches rest and each episode extreme") {
  for (const char* name : {"piano-2.json", "dice-cups-3.json", "slider-1.json"}) {
    const SceneSpec spec = load_spec(fixture(name));
    for (std::size_t i = 0; i < spec.parts.size(); ++i) {
      bool rest = false;
      for (int t = 0; t < spec.frames; ++t) rest |= offsets_at(spec, t)[i].norm() == 0.0;
      CHECK(rest);
      for (const Episode& e : spec.parts[i].episodes) {
        bool extreme = false;
        for (int t = e.start; t <= e.end; ++t) extreme |= episode_profile(e, t) == 1.0;
        CHECK(extreme);
      }
    }
  }
}

TEST_CASE("scene specs: validation and json round trip") {
  SceneSpec spec = load_spec(fixture("dice-cups-3.json"));
  nlohmann::json j = spec;
  CHECK(nlohmann::json(j.get<SceneSpec>()) == j);
  spec.parts[0].episodes[0].offset = Vec2(0.0, 2.0);
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
  SceneSpec bad = axis_spec();
  bad.near = 6.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("generate: single frame writes no flow") {
  SceneSpec spec = load_spec(fixture("slider-1.json"));
  spec.frames = 1;
  spec.parts[0].episodes.clear();
  const fs::path dir = scratch("single");
  generate(spec, 1, dir);
  CHECK(fs::is_empty(dir / "flow"));
  Dataset d = load_dataset(dir);
  CHECK(d.frames == 1);
  CHECK(validate_dataset(dir).ok);
  fs::remove_all(dir);
}

TEST_CASE("generate: deterministic for a fixed seed") {
  SceneSpec spec = load_spec(fixture("piano-2.json"));
  spec.frames = 12;
  spec.parts[0].episodes[0] = {2, 9, Vec2(0.0, -0.05)};
  spec.parts[1].episodes[0] = {3, 10, Vec2(0.0, -0.05)};
  const fs::path a = scratch("det_a"), b = scratch("det_b"), c = scratch("det_c");
  generate(spec, 4, a);
  generate(spec, 4, b);
  CHECK(same_tree(a, b));
  spec.noise.flow_sigma = 0.5;
  spec.noise.image_sigma = 0.01;
  generate(spec, 4, a);
  generate(spec, 4, b);
  generate(spec, 5, c);
  CHECK(same_tree(a, b));
  CHECK_FALSE(same_tree(a, c));
  for (const auto& p : {a, b, c}) fs::remove_all(p);
}

TEST_CASE("validate: fresh, truncated and perturbed datasets") {
  SceneSpec spec = load_spec(fixture("piano-2.json"));
  spec.frames = 24;
  spec.parts[0].episodes[0] = {2, 10, Vec2(0.0, -0.05)};
  spec.parts[1].episodes[0] = {12, 20, Vec2(0.0, -0.05)};
  const fs::path dir = scratch("validate");
  generate(spec, 2, dir, true);
  CHECK(fs::exists(dir / "preview.png"));
  ValidationReport ok = validate_dataset(dir);
  CHECK(ok.ok);
  CHECK(ok.max_track_flow_error < 0.25);

  const Dataset d = load_dataset(dir);
  const fs::path flow = dir / "flow" / "00005_fw.bin";
  const auto bytes = fs::file_size(flow);
  fs::resize_file(flow, bytes - 8);
  ValidationReport trunc = validate_dataset(dir);
  CHECK_FALSE(trunc.ok);
  REQUIRE_FALSE(trunc.errors.empty());
  CHECK(trunc.errors[0].find("00005_fw.bin") != std::string::npos);

  // restore, then push the flow around track 0's pixel off by 3 px
  generate(spec, 2, dir);
  std::vector<float> f(d.width);
  {
    std::ifstream in(flow, std::ios::binary);
    in.read(reinterpret_cast<char*>(f.data()), static_cast<std::streamsize>(f.size() * 4));
  }
  const int px = static_cast<int>(d.tracks[0].pixel[5]);
  for (int i = std::max(0, px - 2); i <= std::min(d.width - 1, px + 2); ++i) f[i] += 3.0f;
  {
    std::ofstream out(flow, std::ios::binary);
    out.write(reinterpret_cast<const char*>(f.data()), static_cast<std::streamsize>(f.size() * 4));
  }
  ValidationReport moved = validate_dataset(dir);
  CHECK_FALSE(moved.ok);
  bool mentions = false;
  for (const auto& e : moved.errors) mentions |= e.find("disagrees with the flow") != std::string::npos;
  CHECK(mentions);
  CHECK_THROWS(validate_dataset(dir / "missing"));
  fs::remove_all(dir);
}

TEST_CASE("sample_pixels: linear between pixel centers, clamped at the ends") {
  Vector v(3);
  v << 0.0, 2.0, 6.0;
  CHECK(sample_pixels(v, 0.5) == 0.0);
  CHECK(sample_pixels(v, 1.0) == 1.0);
  CHECK(sample_pixels(v, 2.0) == 4.0);
  CHECK(sample_pixels(v, -3.0) == 0.0);
  CHECK(sample_pixels(v, 9.0) == 6.0);
}
