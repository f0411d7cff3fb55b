#include "kpnerf/kpanalysis.hpp"

#include "exact_supervision.hpp"

#include <doctest.h>

using namespace kpnerf;
namespace fs = std::filesystem;

namespace {

fs::path fixture(const char* name) { return fs::path(KPNERF_FIXTURE_DIR) / name; }

GridSpec unit_grid(int n) {
  GridSpec g;
  g.lo = Vec2(0, 0);
  g.hi = Vec2(n, n);
  g.nx = g.ny = n;
  return g;
}

AmbientSample sample(double x, double y, int t, double a) {
  return {Vec2(x, y), t, Vector::Constant(1, a)};
}

// Grid whose smoothed scores are set by hand, every cell valid.
VarianceGrid scored_grid(int n, const std::vector<std::tuple<int, int, double>>& peaks) {
  VarianceGrid g;
  g.spec = unit_grid(n);
  g.smoothed = Vector::Zero(n * n);
  g.variance = g.smoothed;
  g.valid.assign(n * n, 1);
  for (auto [ix, iy, s] : peaks) g.smoothed(g.index(ix, iy)) = s;
  return g;
}

struct Scene {
  synth::SceneSpec spec;
  Dataset data;
};

const Scene& scene(const char* file, double flow_sigma) {
  static std::map<std::pair<std::string, double>, Scene> cache;
  auto key = std::make_pair(std::string(file), flow_sigma);
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  Scene s;
  s.spec = synth::load_spec(fixture(file));
  s.spec.noise.flow_sigma = flow_sigma;
  const fs::path dir = fs::temp_directory_path() /
                       ("kpnerf_analysis_" + s.spec.name + "_" + std::to_string(flow_sigma));
  fs::remove_all(dir);
  generate(s.spec, 11, dir);
  s.data = load_dataset(dir);
  return cache.emplace(key, std::move(s)).first->second;
}

std::vector<double> pixel_errors(const KeyPointTrack& tr, const synth::Track& gt) {
  std::vector<double> e;
  for (std::size_t t = 0; t < gt.pixel.size(); ++t) e.push_back(std::abs(tr.pixel[t] - gt.pixel[t]));
  return e;
}

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

}  // namespace

TEST_CASE("variance grid: ambient constant in time gives zero variance") {
  std::vector<AmbientSample> s;
  for (int t = 0; t < 4; ++t)
    for (int k = 0; k < 6; ++k) s.push_back(sample(k + 0.5, 2.5, t, 0.3 * k));
  const VarianceGrid g = accumulate_variance(unit_grid(8), 4, 1, s, AnalysisConfig{});
  CHECK(g.variance.cwiseAbs().maxCoeff() == 0.0);
  CHECK(g.smoothed.cwiseAbs().maxCoeff() == 0.0);
  CHECK(g.valid[g.index(3, 2)] == 1);
  CHECK(g.valid[g.index(3, 3)] == 0);
}

TEST_CASE("variance grid: per-frame means 0 and 2 give population variance 1") {
  // frame 1 has two samples averaging to 2
  const std::vector<AmbientSample> s{sample(1.5, 1.5, 0, 0.0), sample(1.2, 1.7, 1, 1.0),
                                     sample(1.8, 1.1, 1, 3.0)};
  const VarianceGrid g = accumulate_variance(unit_grid(4), 2, 1, s, AnalysisConfig{});
  CHECK(g.variance(g.index(1, 1)) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(g.frame_counts[1][g.index(1, 1)] == 2);
  CHECK(g.observed[g.index(1, 1)] == 2);
}

TEST_CASE("variance grid: components add and sparse cells are invalid") {
  std::vector<AmbientSample> s;
  for (int t = 0; t < 8; ++t) {
    Vector a(2);
    a << (t % 2 ? 1.0 : -1.0), (t % 2 ? 2.0 : -2.0);
    s.push_back({Vec2(0.5, 0.5), t, a});
  }
  s.push_back({Vec2(3.5, 3.5), 0, Vector::Constant(2, 9.0)});
  s.push_back({Vec2(2.5, 3.5), 5, Vector::Constant(2, -9.0)});
  const VarianceGrid g = accumulate_variance(unit_grid(4), 8, 2, s, AnalysisConfig{});
  CHECK(g.variance(g.index(0, 0)) == doctest::Approx(5.0));
  CHECK(g.valid[g.index(0, 0)] == 1);
  CHECK(g.valid[g.index(3, 3)] == 0);  // 1 of 8 frames
  CHECK(g.smoothed(g.index(3, 3)) == 0.0);
  for (Eigen::Index c = 0; c < g.variance.size(); ++c) CHECK(g.variance(c) >= 0.0);
}

TEST_CASE("variance grid: no surface points is an error") {
  CHECK_THROWS_AS(accumulate_variance(unit_grid(4), 2, 1, {}, AnalysisConfig{}), AnalysisError);
  CHECK_THROWS_AS(accumulate_variance(unit_grid(4), 2, 1, {sample(9, 9, 0, 1)}, AnalysisConfig{}),
                  AnalysisError);
}

TEST_CASE("smoothing preserves constants and spreads a spike") {
  const int n = 9;
  Vector v = Vector::Constant(n * n, 2.0);
  const Vector s = smooth_valid(v, std::vector<std::uint8_t>(n * n, 1), n, n, 1.5);
  for (int c = 0; c < n * n; ++c) CHECK(s(c) == doctest::Approx(2.0).epsilon(1e-12));
  Vector spike = Vector::Zero(n * n);
  spike(4 * n + 4) = 1.0;
  const Vector ss = smooth_valid(spike, std::vector<std::uint8_t>(n * n, 1), n, n, 1.5);
  CHECK(ss(4 * n + 4) < 1.0);
  CHECK(ss(4 * n + 5) > 0.0);
  CHECK(ss(4 * n + 5) == doctest::Approx(ss(4 * n + 3)));
}

TEST_CASE("smoothing: invalid cells count as zero and stay zero") {
  // a flat 3x3 block of valid cells inside an invalid border becomes a single central peak
  const int n = 9;
  std::vector<std::uint8_t> valid(n * n, 0);
  Vector v = Vector::Constant(n * n, 5.0);
  for (int iy = 3; iy <= 5; ++iy)
    for (int ix = 3; ix <= 5; ++ix) valid[iy * n + ix] = 1;
  const Vector s = smooth_valid(v, valid, n, n, 1.0);
  CHECK(s(0) == 0.0);
  CHECK(s(2 * n + 4) == 0.0);
  CHECK(s(4 * n + 4) > s(4 * n + 3));
  CHECK(s(4 * n + 3) > s(3 * n + 3));
  CHECK(s(4 * n + 4) < 5.0);
}

TEST_CASE("detection: single isolated peak") {
  const VarianceGrid g = scored_grid(32, {{10, 20, 1.0}, {11, 20, 0.5}});
  const auto k = detect_reference_keypoints(g, AnalysisConfig{});
  REQUIRE(k.size() == 1);
  CHECK(k[0].ix == 10);
  CHECK(k[0].iy == 20);
  CHECK(k[0].position.isApprox(Vec2(10.5, 20.5)));
}

TEST_CASE("detection: equal peaks beyond the suppression radius, ties by cell index") {
  const VarianceGrid g = scored_grid(32, {{25, 3, 1.0}, {5, 9, 1.0}, {15, 28, 0.1}});
  const auto k = detect_reference_keypoints(g, AnalysisConfig{});
  REQUIRE(k.size() == 2);  // 0.1 is below the score floor
  CHECK(k[0].ix == 5);
  CHECK(k[1].ix == 25);
}

TEST_CASE("detection: suppression keeps the stronger of two close peaks") {
  const VarianceGrid g = scored_grid(32, {{10, 10, 0.8}, {16, 10, 1.0}});
  const auto k = detect_reference_keypoints(g, AnalysisConfig{});
  REQUIRE(k.size() == 1);
  CHECK(k[0].ix == 16);
  AnalysisConfig loose;
  loose.suppression = 5;
  CHECK(detect_reference_keypoints(g, loose).size() == 2);
}

TEST_CASE("detection: plateaus and empty grids are not maxima") {
  CHECK_THROWS_WITH_AS(detect_reference_keypoints(scored_grid(8, {}), AnalysisConfig{}),
                       doctest::Contains("rho"), AnalysisError);
  const VarianceGrid flat = scored_grid(8, {{3, 3, 1.0}, {4, 3, 1.0}});
  CHECK_THROWS_AS(detect_reference_keypoints(flat, AnalysisConfig{}), AnalysisError);
  VarianceGrid hidden = scored_grid(8, {{3, 3, 1.0}});
  hidden.valid[hidden.index(3, 3)] = 0;
  CHECK_THROWS_AS(detect_reference_keypoints(hidden, AnalysisConfig{}), AnalysisError);
}

TEST_CASE("reference frame: first frame whose depth agrees") {
  Camera c;
  c.focal = 20;
  c.principal = 16;
  c.width = 32;
  c.near = 0.5;
  c.far = 6;
  const std::vector<Camera> cams(10, c);
  const Vec2 k(0.1, 2.0);
  const double d = c.distance(k);
  std::vector<Vector> depth(10, Vector::Constant(32, d));
  CHECK(select_reference_frame(k, depth, cams, 0.01) == 0);
  // an occluder in front until frame 7
  for (int t = 0; t < 7; ++t) depth[t].setConstant(1.0);
  CHECK(select_reference_frame(k, depth, cams, 0.01) == 7);
  CHECK_THROWS_WITH_AS(select_reference_frame(k, depth, cams, 0.0), doctest::Contains("best frame 7"),
                       AnalysisError);
  // behind every camera
  CHECK_THROWS_AS(select_reference_frame(Vec2(0, -1), depth, cams, 1.0), AnalysisError);
}

TEST_CASE("propagation: zero flow keeps the pixel constant and lifts consistently") {
  const int T = 6, W = 20;
  std::vector<Vector> fw(T - 1, Vector::Zero(W)), bw(T, Vector::Zero(W));
  const MapFlowSource flow(fw, bw, W);
  Camera c;
  c.focal = 15;
  c.principal = 10;
  c.width = W;
  std::vector<Camera> cams;
  for (int t = 0; t < T; ++t) {
    c.origin = Vec2(0.1 * t, 0.0);
    cams.push_back(c);
  }
  std::vector<Vector> depth(T, Vector::LinSpaced(W, 2.0, 2.5));
  const Lifting lift{&depth, &cams};
  const KeyPointTrack tr = propagate(cams[2].lift(7.3, 2.2), 2, flow, lift);
  for (int t = 0; t < T; ++t) {
    CHECK(tr.pixel[t] == doctest::Approx(7.3).epsilon(1e-12));
    CHECK(std::abs(cams[t].project(tr.world[t]).u - tr.pixel[t]) < 1e-6);
  }
  CHECK(tr.provenance[2] == Provenance::reference);
  CHECK(tr.provenance[0] == Provenance::frame_by_frame);
  CHECK(tr.confidence[4] == doctest::Approx(1e6));
}

TEST_CASE("propagation clamps to the image and records it") {
  const int T = 4, W = 10;
  std::vector<Vector> fw(T - 1, Vector::Constant(W, 4.0)), bw(T, Vector::Constant(W, -4.0));
  const MapFlowSource flow(fw, bw, W);
  Camera c;
  c.focal = 10;
  c.principal = 5;
  c.width = W;
  const std::vector<Camera> cams(T, c);
  std::vector<Vector> depth(T, Vector::Constant(W, 2.0));
  const KeyPointTrack tr = propagate(c.lift(5.0, 2.0), 0, flow, Lifting{&depth, &cams});
  CHECK(tr.pixel[1] == doctest::Approx(9.0));
  CHECK(tr.pixel[2] == 10.0);
  CHECK(tr.clamped[2]);
  CHECK_FALSE(tr.clamped[1]);
}

TEST_CASE("flow confidence: regularized reciprocal of the round trip") {
  const int T = 3, W = 10;
  std::vector<Vector> fw(T - 1, Vector::Constant(W, 1.5)), bw(T, Vector::Constant(W, -1.5));
  CHECK(flow_confidence(MapFlowSource(fw, bw, W), 4.0, 0, 2) == doctest::Approx(1e6));
  for (auto& b : bw) b.setConstant(-0.5);
  // 2 px of drift over the round trip
  CHECK(flow_confidence(MapFlowSource(fw, bw, W), 2.0, 0, 2) == doctest::Approx(0.5).epsilon(1e-6));
}

TEST_CASE("propagation with exact flow stays within a pixel of ground truth") {
  for (const char* name : {"piano-2.json", "dice-cups-3.json", "slider-1.json"}) {
    CAPTURE(name);
    const Scene& s = scene(name, 0.0);
    const MapFlowSource flow(s.data);
    const Lifting lift{&s.data.depth, &s.data.cameras};
    for (const auto& gt : synth::ground_truth_tracks(s.spec)) {
      const int t_ref = select_reference_frame(gt.world[0], s.data.depth, s.data.cameras,
                                               0.01 * s.data.diagonal());
      const KeyPointTrack tr = propagate(gt.world[t_ref], t_ref, flow, lift);
      double worst = 0.0;
      for (double e : pixel_errors(tr, gt)) worst = std::max(worst, e);
      CAPTURE(gt.part);
      CHECK(worst < 1.0);
      const KeyPointTrack sk = skipping_propagate(tr, flow, lift, 8, 0.5);
      CHECK(sk.pixel == tr.pixel);
    }
  }
}

TEST_CASE("noisy flow: drift grows with distance from the reference frame") {
  const Scene& s = scene("piano-2.json", 0.5);
  const MapFlowSource flow(s.data);
  const Lifting lift{&s.data.depth, &s.data.cameras};
  double near = 0.0, far = 0.0;
  for (const auto& gt : synth::ground_truth_tracks(s.spec)) {
    const auto e = pixel_errors(propagate(gt.world[0], 0, flow, lift), gt);
    for (int t = 1; t <= 16; ++t) near += e[t];
    for (int t = 48; t < 64; ++t) far += e[t];
  }
  CHECK(far > near);
}

TEST_CASE("skipping propagation: gated anchors and error against frame-by-frame") {
  const Scene& s = scene("piano-2.json", 0.5);
  const DirectFlowSource flow(s.data, testing::oracle_pair_flow(s.spec, 0.5, 3));
  const Lifting lift{&s.data.depth, &s.data.cameras};
  const int M = AnalysisConfig{}.skip_interval(s.data.frames);
  CHECK(M == 8);
  double fbf = 0.0, skip = 0.0;
  for (const auto& gt : synth::ground_truth_tracks(s.spec)) {
    const KeyPointTrack tr = propagate(gt.world[0], 0, flow, lift);
    const KeyPointTrack none = skipping_propagate(tr, flow, lift, M, 1e12);
    CHECK(none.pixel == tr.pixel);
    const KeyPointTrack sk = skipping_propagate(tr, flow, lift, M, 0.5);
    CHECK(sk.provenance[0] == Provenance::reference);
    int anchors = 0;
    for (int t = 0; t < s.data.frames; ++t) anchors += sk.provenance[t] == Provenance::skip;
    CHECK(anchors > 0);
    for (int t = 0; t < s.data.frames; ++t) {
      if (sk.provenance[t] == Provenance::skip) CHECK(t % M == 0);
      CHECK(std::abs(s.data.cameras[t].project(sk.world[t]).u - sk.pixel[t]) < 1e-6);
    }
    fbf += mean(pixel_errors(tr, gt));
    skip += mean(pixel_errors(sk, gt));
  }
  MESSAGE("mean error frame-by-frame " << fbf / 2 << " px, skipping " << skip / 2 << " px");
  CHECK(skip <= fbf);
}

TEST_CASE("confidence ranks against true error on the noisy fixture") {
  const Scene& s = scene("piano-2.json", 0.5);
  const DirectFlowSource flow(s.data, testing::oracle_pair_flow(s.spec, 0.5, 3));
  std::vector<double> conf, err;
  for (const auto& gt : synth::ground_truth_tracks(s.spec)) {
    for (int t_ref = 0; t_ref < s.data.frames; t_ref += 4) {
      const double u = gt.pixel[t_ref];
      for (int t = t_ref % 8; t < s.data.frames; t += 8) {
        if (t == t_ref) continue;
        conf.push_back(flow_confidence(flow, u, t_ref, t));
        err.push_back(std::abs(flow.clamp(u + flow.direct(t_ref, t, u)) - gt.pixel[t]));
      }
    }
  }
  const double rho = testing::rank_correlation(conf, err);
  MESSAGE("rank correlation " << rho << " over " << conf.size() << " skip targets");
  CHECK(rho < 0.0);
}

TEST_CASE("tracks: JSON round trip and key-point set") {
  KeyPointTrack a;
  a.t_ref = 1;
  a.k_ref = Vec2(0.25, -0.5);
  a.score = 3.5;
  a.pixel = {1.0, 2.0, 3.5};
  a.world = {Vec2(0, 1), Vec2(0.1, 1), Vec2(0.2, 1.5)};
  a.confidence = {2.0, 1e6, 0.25};
  a.provenance = {Provenance::frame_by_frame, Provenance::reference, Provenance::skip};
  a.clamped = {false, false, true};
  const fs::path p = fs::temp_directory_path() / "kpnerf_tracks.json";
  save_tracks(p, {a, a});
  const auto back = load_tracks(p);
  REQUIRE(back.size() == 2);
  CHECK(back[1].pixel == a.pixel);
  CHECK(back[1].world[2] == a.world[2]);
  CHECK(back[1].provenance == a.provenance);
  CHECK(back[1].clamped == a.clamped);
  CHECK(back[1].confidence == a.confidence);
  const KeyPointSet kp = to_keypoint_set(back);
  CHECK(kp.count == 2);
  CHECK(kp.reference_frames[0] == 1);
  CHECK(kp.at(2, 1).isApprox(Vector(a.world[2])));
  nlohmann::json bad = tracks_to_json({a});
  bad["keypoints"][0]["provenance"][0] = "guess";
  CHECK_THROWS_AS(tracks_from_json(bad), std::invalid_argument);
}
