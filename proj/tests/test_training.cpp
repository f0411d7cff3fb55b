#include "kpnerf/training.hpp"

#include "exact_supervision.hpp"
#include "gradcheck.hpp"

#include <doctest.h>

#include <sstream>

using namespace kpnerf;
namespace fs = std::filesystem;

namespace {

fs::path fixture(const char* name) { return fs::path(KPNERF_FIXTURE_DIR) / name; }

// Camera at the origin looking along +y; pixel u sees lateral x = (u - c) z / f.
Camera axis_camera(double shift = 0.0) {
  Camera c;
  c.origin = Vec2(shift, 0.0);
  c.focal = 20.0;
  c.principal = 16.0;
  c.width = 32;
  c.near = 0.5;
  c.far = 6.0;
  return c;
}

Vec2 at_pixel(const Camera& c, double u, double z) { return c.unproject(u, z); }

KeypointSupervision flat_supervision(int frames, double flow, double depth, double opacity = 1.0) {
  KeypointSupervision s;
  for (int t = 0; t < frames; ++t) s.cameras.push_back(axis_camera());
  s.forward_flow = [flow](int, double) { return flow; };
  s.depth = [depth](int, double) { return depth; };
  s.opacity = [opacity](int, double) { return opacity; };
  return s;
}

// Smooth, non-trivial signals so that every gradient term is exercised.
KeypointSupervision wavy_supervision(int frames) {
  KeypointSupervision s;
  for (int t = 0; t < frames; ++t) s.cameras.push_back(axis_camera(0.05 * t));
  s.forward_flow = [](int t, double u) { return 1.5 + 0.3 * std::sin(0.2 * u + t); };
  s.depth = [](int t, double u) { return 2.0 + 0.1 * std::cos(0.15 * u - t); };
  s.opacity = [](int, double) { return 1.0; };
  return s;
}

FieldConfig tiny_field(const Dataset& data, int keypoints) {
  FieldConfig f = field_config_for(data, keypoints, 3);
  f.warp_width = f.weight_width = f.color_width = f.ambient_width = 16;
  f.warp_depth = f.weight_depth = f.ambient_depth = 2;
  f.trunk_width = 24;
  f.trunk_depth = 3;
  f.trunk_skips = {};
  return f;
}

synth::SceneSpec small_slider() {
  synth::SceneSpec s = synth::load_spec(fixture("slider-1.json"));
  s.frames = 6;
  s.width = 24;
  s.parts[0].episodes = {{1, 5, Vec2(0.2, 0.0)}};
  return s;
}

const Dataset& small_dataset() {
  static const Dataset data = [] {
    const fs::path dir = fs::temp_directory_path() / "kpnerf_training_small";
    fs::remove_all(dir);
    generate(small_slider(), 5, dir);
    return load_dataset(dir);
  }();
  return data;
}

TrainConfig tiny_train(int s1, int s2) {
  TrainConfig c;
  c.stage1_steps = s1;
  c.stage2_steps = s2;
  c.rays_per_batch = 16;
  c.samples = 16;
  c.surface_refresh = 5;
  c.reg_points = 8;
  c.log_every = 1;
  c.probe_every = 0;
  return c;
}

}  // namespace

TEST_CASE("loss weights default to the published values") {
  const LossWeights w;
  CHECK(w.motion == 1e-4);
  CHECK(w.geo == 0.5);
  CHECK(w.reg == 0.1);
  const TrainConfig c;
  CHECK(c.weights.motion == 1e-4);
  CHECK(c.surface_refresh == 500);
  CHECK(c.surface_pool == 256);
  CHECK(c.keypoint_pairs == 512);
}

TEST_CASE("motion loss: consistent pair is zero, one pixel off is one") {
  const KeypointSupervision s = flat_supervision(2, 2.0, 2.0);
  const Camera& c = s.cameras[0];
  const Vec2 k0 = at_pixel(c, 10.0, 2.0);
  PairLoss l = loss_motion(s, 0, k0, at_pixel(c, 12.0, 2.5));
  CHECK(l.active);
  CHECK(l.value == doctest::Approx(0.0).epsilon(1e-12));
  l = loss_motion(s, 0, k0, at_pixel(c, 13.0, 2.0));
  CHECK(l.value == doctest::Approx(1.0).epsilon(1e-9));
  // gradients point both key points toward agreement
  CHECK(l.grad_b.dot(c.project_gradient(at_pixel(c, 13.0, 2.0))) > 0.0);
  CHECK(l.grad_a.dot(c.project_gradient(k0)) < 0.0);
}

TEST_CASE("motion loss: behind or outside the camera contributes nothing") {
  const KeypointSupervision s = flat_supervision(2, 2.0, 2.0);
  const Vec2 front = at_pixel(s.cameras[0], 10.0, 2.0);
  const PairLoss behind = loss_motion(s, 0, front, Vec2(0.1, -1.0));
  CHECK_FALSE(behind.active);
  CHECK(behind.value == 0.0);
  CHECK(behind.grad_a.isZero(0.0));
  CHECK(behind.grad_b.isZero(0.0));
  const PairLoss outside = loss_motion(s, 0, at_pixel(s.cameras[0], 40.0, 2.0), front);
  CHECK_FALSE(outside.active);
  CHECK(outside.value == 0.0);
}

TEST_CASE("geometry loss: distance against the depth map, masked by opacity") {
  const KeypointSupervision s = flat_supervision(1, 0.0, 2.0);
  const Camera& c = s.cameras[0];
  const Vec2 on = c.lift(9.0, 2.0);
  CHECK(loss_geo(s, 0, on).value == doctest::Approx(0.0).epsilon(1e-12));
  const Vec2 off = c.lift(9.0, 2.5);
  const PairLoss l = loss_geo(s, 0, off);
  CHECK(l.active);
  CHECK(l.value == doctest::Approx(0.25));
  const KeypointSupervision faint = flat_supervision(1, 0.0, 2.0, 0.05);
  const PairLoss masked = loss_geo(faint, 0, off);
  CHECK_FALSE(masked.active);
  CHECK(masked.value == 0.0);
}

TEST_CASE("key-point loss gradients match finite differences") {
  const int T = 4, N = 2;
  const KeypointSupervision s = wavy_supervision(T);
  KeyPointSet kp(T, N, 2);
  for (int t = 0; t < T; ++t)
    for (int i = 0; i < N; ++i)
      kp.set(t, i, at_pixel(s.cameras[t], 8.0 + 5.0 * i + 1.3 * t + 0.2 * i * t, 1.8 + 0.1 * t + 0.2 * i));
  const LossWeights w{0.7, 0.3, 0.0};
  Matrix grad = Matrix::Zero(T * N, 2);
  keypoint_losses(s, kp, w, &grad);
  auto total = [&](const KeyPointSet& k) {
    const auto l = keypoint_losses(s, k, w, nullptr);
    return w.motion * l.motion + w.geo * l.geo;
  };
  const double h = 1e-6;
  double worst = 0.0;
  for (Eigen::Index r = 0; r < kp.positions.rows(); ++r) {
    for (int d = 0; d < 2; ++d) {
      KeyPointSet a = kp, b = kp;
      a.positions(r, d) += h;
      b.positions(r, d) -= h;
      const double fd = (total(a) - total(b)) / (2 * h);
      worst = std::max(worst, std::abs(fd - grad(r, d)) / std::max(1.0, std::abs(fd)));
    }
  }
  CHECK(worst < 1e-5);
}

TEST_CASE("key-point losses vanish at ground truth with exact supervision") {
  for (const char* name : {"piano-2.json", "dice-cups-3.json", "slider-1.json"}) {
    CAPTURE(name);
    const synth::SceneSpec spec = synth::load_spec(fixture(name));
    const KeypointSupervision s = testing::exact_supervision(spec);
    const KeyPointSet kp = testing::ground_truth_keypoints(spec);
    const auto tracks = synth::ground_truth_tracks(spec);
    Matrix grad = Matrix::Zero(kp.positions.rows(), 2);
    std::vector<std::pair<int, int>> pairs;
    for (int t = 0; t < kp.frames; ++t)
      for (int i = 0; i < kp.count; ++i) {
        const bool next = t + 1 >= kp.frames || tracks[i].visible[t + 1];
        if (tracks[i].visible[t] && next) pairs.emplace_back(t, i);
      }
    REQUIRE(pairs.size() > kp.positions.rows() / 2);
    const auto l = keypoint_losses(s, kp, LossWeights{}, &grad, pairs);
    CHECK(l.motion_terms > 0);
    CHECK(l.geo_terms > 0);
    CHECK(l.motion < 1e-12);
    CHECK(l.geo < 1e-12);
    CHECK(grad.norm() < 1e-6);
  }
}

TEST_CASE("key-point losses: explicit subsets visit only the given pairs") {
  const KeypointSupervision s = flat_supervision(3, 2.0, 2.0);
  KeyPointSet kp(3, 2, 2);
  for (int t = 0; t < 3; ++t)
    for (int i = 0; i < 2; ++i) kp.set(t, i, at_pixel(s.cameras[t], 5.0 + i + 3.0 * t, 2.2));
  Matrix grad = Matrix::Zero(6, 2);
  const auto l = keypoint_losses(s, kp, LossWeights{}, &grad, {{1, 0}});
  CHECK(l.geo_terms == 1);
  CHECK(l.motion_terms == 1);
  CHECK(grad.row(0).isZero(0.0));
  CHECK(grad.row(1).isZero(0.0));
  CHECK_FALSE(grad.row(2).isZero(0.0));
  CHECK_FALSE(grad.row(4).isZero(0.0));
}

TEST_CASE("reconstruction loss is the per-channel mean squared error") {
  Matrix a = Matrix::Constant(7, 3, 0.3);
  Matrix b = (a.array() + 0.1).matrix();
  CHECK(loss_rec(a, b) == doctest::Approx(0.01));
  Graph g;
  CHECK(loss_rec(g.variable(a), b).value()(0, 0) == doctest::Approx(0.01));
  CHECK_THROWS_AS(loss_rec(a, Matrix::Zero(7, 2)), ShapeError);
  CHECK(psnr(a, a) == 99.0);
  CHECK(psnr(a, b) == doctest::Approx(20.0));
}

TEST_CASE("warp regularizer is zero for the identity warp and positive after an offset") {
  FieldConfig f;
  f.frames = 2;
  f.keypoints = 2;
  SceneModel model(f);
  Matrix pts = Matrix::Random(10, 2) * 0.5;
  std::vector<int> frames(10, 1);
  {
    Graph g(&model.params());
    CHECK(loss_reg(g, scene_warp(model), pts, frames).value()(0, 0) == 0.0);
  }
  const std::string last = "warp.b" + std::to_string(f.warp_depth);
  model.params().at(last).value(0, 0) = 0.1;
  Graph g(&model.params());
  CHECK(loss_reg(g, scene_warp(model), pts, frames).value()(0, 0) > 0.0);
}

TEST_CASE("training config JSON round trip") {
  TrainConfig c = tiny_train(3, 4);
  c.weights.geo = 0.25;
  c.anneal_warp = true;
  TrainConfig back = nlohmann::json(c).get<TrainConfig>();
  CHECK(nlohmann::json(back) == nlohmann::json(c));
}

TEST_CASE("stage 1 trains, logs every step and renders each frame") {
  const Dataset& data = small_dataset();
  std::vector<nlohmann::json> log;
  MetricsSink sink;
  sink.callback = [&](const nlohmann::json& j) { log.push_back(j); };
  const Stage1Result r = train_stage1(data, tiny_train(12, 0), tiny_field(data, 1), sink);
  REQUIRE(r.model);
  CHECK(log.size() == 12);
  for (const auto& j : log) CHECK(std::isfinite(j["loss"].get<double>()));
  CHECK(r.renders.size() == static_cast<std::size_t>(data.frames));
  CHECK(r.depth_maps(data.far).size() == static_cast<std::size_t>(data.frames));
  CHECK(r.opacity_maps()[0].size() == data.width);
}

TEST_CASE("stage 1 aborts with diagnostics when the loss becomes non-finite") {
  const Dataset& data = small_dataset();
  TrainConfig c = tiny_train(5, 0);
  c.learning_rate = std::numeric_limits<double>::quiet_NaN();
  try {
    train_stage1(data, c, tiny_field(data, 1));
    FAIL("expected divergence");
  } catch (const TrainingDiverged& e) {
    CHECK(std::string(e.what()).find("stage 1 diverged at step") != std::string::npos);
  }
}

TEST_CASE("stage 2 is deterministic, honours frozen key points and clamps escapes") {
  const Dataset& data = small_dataset();
  const synth::SceneSpec spec = small_slider();
  const KeypointSupervision sup = testing::exact_supervision(spec);
  KeyPointSet init = testing::ground_truth_keypoints(spec);
  const FieldConfig f = tiny_field(data, 1);

  const auto a = train_stage2(data, sup, init, tiny_train(0, 6), f);
  const auto b = train_stage2(data, sup, init, tiny_train(0, 6), f);
  for (int k = 0; k < a->params().size(); ++k) CHECK(a->params()[k].value == b->params()[k].value);

  TrainConfig frozen = tiny_train(0, 6);
  frozen.freeze_keypoints = true;
  CHECK(train_stage2(data, sup, init, frozen, f)->keypoint_set().positions == init.positions);

  init.set(2, 0, Vec2(50.0, 0.0));
  int warnings = 0;
  MetricsSink sink;
  sink.callback = [&](const nlohmann::json& j) { warnings += j.contains("warning") ? 1 : 0; };
  const auto c = train_stage2(data, sup, init, tiny_train(0, 2), f, sink);
  CHECK(warnings >= 1);
  const double limit = data.bounds_hi.x() + 0.2 * data.diagonal();
  CHECK(c->keypoint_set().at(2, 0)(0) <= limit + 1e-12);
}

TEST_CASE("stage 2 rejects key points that do not match the field") {
  const Dataset& data = small_dataset();
  const KeypointSupervision sup = testing::exact_supervision(small_slider());
  KeyPointSet wrong(data.frames, 2, 2);
  CHECK_THROWS_AS(train_stage2(data, sup, wrong, tiny_train(0, 1), tiny_field(data, 1)),
                  std::invalid_argument);
}

TEST_CASE("surface points come from opaque pixels only") {
  std::vector<Camera> cams{axis_camera()};
  RenderOutput r;
  r.color = Matrix::Zero(32, 3);
  r.depth = Vector::Constant(32, 2.0);
  r.opacity = Vector::Zero(32);
  r.opacity.head(5).setConstant(0.9);
  const SurfacePool p = surface_points_from({r}, cams, 256, 1);
  REQUIRE(p.total() == 5);
  for (Eigen::Index k = 0; k < 5; ++k) {
    const Vec2 x = p.points[0].row(k).transpose();
    CHECK(cams[0].distance(x) == doctest::Approx(2.0));
    CHECK(cams[0].project(x).u < 5.0);
  }
  CHECK(surface_points_from({r}, cams, 3, 1).total() == 3);
}
