#include "kpnerf/training.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <random>
#include <sstream>

namespace kpnerf {

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"stage1_steps", c.stage1_steps},
                     {"stage2_steps", c.stage2_steps},
                     {"rays_per_batch", c.rays_per_batch},
                     {"samples", c.samples},
                     {"seed", c.seed},
                     {"learning_rate", c.learning_rate},
                     {"final_rate_factor", c.final_rate_factor},
                     {"lambda_motion", c.weights.motion},
                     {"lambda_geo", c.weights.geo},
                     {"lambda_reg", c.weights.reg},
                     {"ambient_penalty", c.ambient_penalty},
                     {"anneal_warp", c.anneal_warp},
                     {"anneal_fraction", c.anneal_fraction},
                     {"surface_refresh", c.surface_refresh},
                     {"surface_pool", c.surface_pool},
                     {"reg_points", c.reg_points},
                     {"keypoint_pairs", c.keypoint_pairs},
                     {"freeze_keypoints", c.freeze_keypoints},
                     {"log_every", c.log_every},
                     {"probe_every", c.probe_every},
                     {"checkpoint_every", c.checkpoint_every},
                     {"probe_frame", c.probe_frame}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  const TrainConfig d;
  c.stage1_steps = j.value("stage1_steps", d.stage1_steps);
  c.stage2_steps = j.value("stage2_steps", d.stage2_steps);
  c.rays_per_batch = j.value("rays_per_batch", d.rays_per_batch);
  c.samples = j.value("samples", d.samples);
  c.seed = j.value("seed", d.seed);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.final_rate_factor = j.value("final_rate_factor", d.final_rate_factor);
  c.weights.motion = j.value("lambda_motion", d.weights.motion);
  c.weights.geo = j.value("lambda_geo", d.weights.geo);
  c.weights.reg = j.value("lambda_reg", d.weights.reg);
  c.ambient_penalty = j.value("ambient_penalty", d.ambient_penalty);
  c.anneal_warp = j.value("anneal_warp", d.anneal_warp);
  c.anneal_fraction = j.value("anneal_fraction", d.anneal_fraction);
  c.surface_refresh = j.value("surface_refresh", d.surface_refresh);
  c.surface_pool = j.value("surface_pool", d.surface_pool);
  c.reg_points = j.value("reg_points", d.reg_points);
  c.keypoint_pairs = j.value("keypoint_pairs", d.keypoint_pairs);
  c.freeze_keypoints = j.value("freeze_keypoints", d.freeze_keypoints);
  c.log_every = j.value("log_every", d.log_every);
  c.probe_every = j.value("probe_every", d.probe_every);
  c.checkpoint_every = j.value("checkpoint_every", d.checkpoint_every);
  c.probe_frame = j.value("probe_frame", d.probe_frame);
}

KeypointSupervision dataset_supervision(const Dataset& data, std::vector<Vector> depth,
                                        std::vector<Vector> opacity) {
  if (static_cast<int>(depth.size()) != data.frames ||
      static_cast<int>(opacity.size()) != data.frames) {
    throw std::invalid_argument("supervision needs one depth and opacity map per frame");
  }
  KeypointSupervision sup;
  sup.cameras = data.cameras;
  const auto flows = std::make_shared<std::vector<Vector>>(data.flow_fw);
  const auto d = std::make_shared<std::vector<Vector>>(std::move(depth));
  const auto o = std::make_shared<std::vector<Vector>>(std::move(opacity));
  sup.forward_flow = [flows](int t, double u) { return sample_pixels(flows->at(t), u); };
  sup.depth = [d](int t, double u) { return sample_pixels(d->at(t), u); };
  sup.opacity = [o](int t, double u) { return sample_pixels(o->at(t), u); };
  return sup;
}

namespace {

// Slope of a sampled signal; central differences are exact inside a linear segment.
double slope(const PixelSignal& f, int t, double u) {
  constexpr double h = 1e-4;
  return (f(t, u + h) - f(t, u - h)) / (2.0 * h);
}

bool visible(const Camera& cam, const Projection& p) { return p.in_front && cam.inside(p.u); }

}  // namespace

PairLoss loss_motion(const KeypointSupervision& sup, int t, const Vec2& k_t, const Vec2& k_next) {
  PairLoss out;
  const Camera& ca = sup.cameras.at(t);
  const Camera& cb = sup.cameras.at(t + 1);
  const Projection pa = ca.project(k_t);
  const Projection pb = cb.project(k_next);
  if (!visible(ca, pa) || !visible(cb, pb)) return out;
  const double flow = sup.forward_flow(t, pa.u);
  const double r = pb.u - pa.u - flow;
  out.active = true;
  out.value = r * r;
  out.grad_a = -2.0 * r * (1.0 + slope(sup.forward_flow, t, pa.u)) * ca.project_gradient(k_t);
  out.grad_b = 2.0 * r * cb.project_gradient(k_next);
  return out;
}

PairLoss loss_geo(const KeypointSupervision& sup, int t, const Vec2& k) {
  PairLoss out;
  const Camera& cam = sup.cameras.at(t);
  const Projection p = cam.project(k);
  if (!visible(cam, p)) return out;
  if (sup.opacity(t, p.u) < sup.min_opacity) return out;
  const Vec2 rel = k - cam.origin;
  const double dist = rel.norm();
  const double r = dist - sup.depth(t, p.u);
  out.active = true;
  out.value = r * r;
  out.grad_a = 2.0 * r * (rel / dist - slope(sup.depth, t, p.u) * cam.project_gradient(k));
  return out;
}

KeypointLossTotals keypoint_losses(const KeypointSupervision& sup, const KeyPointSet& kp,
                                   const LossWeights& w, Matrix* grad,
                                   const std::vector<std::pair<int, int>>& pairs) {
  if (kp.dim != 2) throw std::invalid_argument("key-point losses need D = 2");
  KeypointLossTotals totals;
  auto visit = [&](int t, int i) {
    const Vec2 k = kp.at(t, i);
    const auto row = [&](int f) { return static_cast<Eigen::Index>(f) * kp.count + i; };
    const PairLoss geo = loss_geo(sup, t, k);
    if (geo.active) {
      totals.geo += geo.value;
      ++totals.geo_terms;
      if (grad != nullptr) grad->row(row(t)) += w.geo * geo.grad_a.transpose();
    }
    if (t + 1 < kp.frames) {
      const PairLoss m = loss_motion(sup, t, k, kp.at(t + 1, i));
      if (m.active) {
        totals.motion += m.value;
        ++totals.motion_terms;
        if (grad != nullptr) {
          grad->row(row(t)) += w.motion * m.grad_a.transpose();
          grad->row(row(t + 1)) += w.motion * m.grad_b.transpose();
        }
      }
    }
  };
  if (pairs.empty()) {
    for (int t = 0; t < kp.frames; ++t)
      for (int i = 0; i < kp.count; ++i) visit(t, i);
  } else {
    for (const auto& [t, i] : pairs) visit(t, i);
  }
  return totals;
}

double loss_rec(const Matrix& rendered, const Matrix& target) {
  if (rendered.rows() != target.rows() || rendered.cols() != target.cols()) {
    throw ShapeError("reconstruction shapes " + shape_str(rendered) + " and " + shape_str(target));
  }
  return (rendered - target).squaredNorm() / static_cast<double>(rendered.size());
}

Var loss_rec(Var rendered, const Matrix& target) {
  Graph& g = *rendered.graph;
  return mean(square(sub(rendered, g.constant(target))));
}

WarpFn scene_warp(const SceneModel& model) {
  return [&model](Graph& g, Var points, const std::vector<int>& frames) {
    return model.warp(g, points, gather_rows(g.param("latent.warp"), frames));
  };
}

WarpFn stage1_warp(const Stage1Model& model) {
  return [&model](Graph& g, Var points, const std::vector<int>& frames) {
    return model.warp(g, points, gather_rows(g.param("s1.latent.warp"), frames));
  };
}

Var loss_reg(Graph& g, const WarpFn& warp, const Matrix& points, const std::vector<int>& frames) {
  Var x = g.constant(points);
  return mean(squared_norm(sub(x, warp(g, x, frames))));
}

int SurfacePool::total() const {
  int n = 0;
  for (const auto& p : points) n += static_cast<int>(p.rows());
  return n;
}

std::vector<RenderOutput> render_frames(const RadianceModel& model, const std::vector<Camera>& cameras,
                                        int samples, const Eigen::Vector3d& background) {
  RenderOptions opt;
  opt.samples = samples;
  opt.background = background;
  std::vector<RenderOutput> out;
  out.reserve(cameras.size());
  for (std::size_t t = 0; t < cameras.size(); ++t) {
    out.push_back(render_image(model, cameras[t], static_cast<int>(t), opt));
  }
  return out;
}

SurfacePool collect_surface_points(const RadianceModel& model, const std::vector<Camera>& cameras,
                                   int samples, int per_frame, std::uint64_t seed) {
  return surface_points_from(render_frames(model, cameras, samples), cameras, per_frame, seed);
}

SurfacePool surface_points_from(const std::vector<RenderOutput>& renders,
                                const std::vector<Camera>& cameras, int per_frame, std::uint64_t seed) {
  SurfacePool pool;
  std::mt19937_64 rng(seed);
  for (std::size_t t = 0; t < cameras.size(); ++t) {
    std::vector<Vec2> pts;
    for (int i = 0; i < cameras[t].width; ++i) {
      if (renders[t].opacity(i) > 0.5) pts.push_back(cameras[t].lift(i + 0.5, renders[t].depth(i)));
    }
    std::shuffle(pts.begin(), pts.end(), rng);
    if (static_cast<int>(pts.size()) > per_frame) pts.resize(per_frame);
    Matrix m(static_cast<Eigen::Index>(pts.size()), 2);
    for (std::size_t k = 0; k < pts.size(); ++k) m.row(k) = pts[k].transpose();
    pool.points.push_back(std::move(m));
  }
  return pool;
}

double psnr(const Matrix& a, const Matrix& b) {
  const double mse = loss_rec(a, b);
  if (mse <= 1e-10) return 99.0;
  return std::min(99.0, -10.0 * std::log10(mse));
}

void MetricsSink::write(const nlohmann::json& record) const {
  if (out != nullptr) *out << record.dump() << '\n' << std::flush;
  if (callback) callback(record);
}

FieldConfig field_config_for(const Dataset& data, int keypoints, std::uint64_t seed) {
  FieldConfig f;
  f.dim = data.dim;
  f.frames = data.frames;
  f.keypoints = keypoints;
  f.bounds_lo = data.bounds_lo;
  f.bounds_hi = data.bounds_hi;
  f.seed = seed;
  return f;
}

std::vector<Vector> Stage1Result::depth_maps(double far) const {
  std::vector<Vector> out;
  for (const auto& r : renders) out.push_back(supervision_depth(r, far));
  return out;
}

std::vector<Vector> Stage1Result::opacity_maps() const {
  std::vector<Vector> out;
  for (const auto& r : renders) out.push_back(r.opacity);
  return out;
}

namespace {

struct Batch {
  RayBatch rays;
  Matrix target;
};

Batch sample_batch(const Dataset& data, int count, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> frame(0, data.frames - 1);
  std::uniform_int_distribution<int> pixel(0, data.width - 1);
  Batch b;
  b.rays.origins.resize(count, 2);
  b.rays.directions.resize(count, 2);
  b.rays.frames.resize(count);
  b.rays.keys.resize(count);
  b.target.resize(count, 3);
  b.rays.near = data.near;
  b.rays.far = data.far;
  for (int r = 0; r < count; ++r) {
    const int t = frame(rng);
    const int i = pixel(rng);
    const Ray ray = data.cameras[t].ray(i + 0.5);
    b.rays.origins.row(r) = ray.origin.transpose();
    b.rays.directions.row(r) = ray.direction.transpose();
    b.rays.frames[r] = t;
    b.rays.keys[r] = static_cast<std::uint64_t>(t) * data.width + i;
    b.target.row(r) = data.rgb[t].row(i);
  }
  return b;
}

// Random draw of surface points across frames, with each point's frame.
bool sample_surface(const SurfacePool& pool, int count, std::mt19937_64& rng, Matrix& points,
                    std::vector<int>& frames) {
  const int total = pool.total();
  if (total == 0 || count <= 0) return false;
  std::uniform_int_distribution<int> pick(0, total - 1);
  points.resize(count, 2);
  frames.resize(count);
  for (int k = 0; k < count; ++k) {
    int idx = pick(rng);
    int t = 0;
    while (idx >= pool.points[t].rows()) idx -= static_cast<int>(pool.points[t].rows()), ++t;
    points.row(k) = pool.points[t].row(idx);
    frames[k] = t;
  }
  return true;
}

AdamConfig schedule(const TrainConfig& cfg, int steps) {
  AdamConfig a;
  a.base_rate = cfg.learning_rate;
  a.decay_factor = cfg.final_rate_factor;
  a.decay_interval = std::max(1, steps);
  return a;
}

void check_finite(double loss, int stage, int step, const nlohmann::json& terms) {
  if (std::isfinite(loss)) return;
  std::ostringstream msg;
  msg << "stage " << stage << " diverged at step " << step << ": loss terms " << terms.dump();
  throw TrainingDiverged(msg.str());
}

void optimizer_step(Adam& opt, ParamStore& store, int stage, int step) {
  try {
    opt.step(store);
  } catch (const NonFiniteError& e) {
    std::ostringstream msg;
    msg << "stage " << stage << " diverged at step " << step << ": " << e.what();
    throw TrainingDiverged(msg.str());
  }
}

void validate_training(const Dataset& data, const TrainConfig& cfg, int steps) {
  if (data.dim != 2) throw std::invalid_argument("training supports D = 2 datasets");
  if (data.frames < 1 || data.cameras.size() != static_cast<std::size_t>(data.frames)) {
    throw std::invalid_argument("dataset has no frames");
  }
  if (steps < 0) throw std::invalid_argument("step count must be non-negative");
  if (cfg.rays_per_batch < 1) throw std::invalid_argument("rays_per_batch must be positive");
  if (cfg.samples < 2) throw std::invalid_argument("samples must be at least 2");
}

double probe_psnr(const RadianceModel& model, const Dataset& data, const TrainConfig& cfg) {
  const int f = std::clamp(cfg.probe_frame, 0, data.frames - 1);
  RenderOptions opt;
  opt.samples = cfg.samples;
  opt.background = data.background;
  return psnr(render_image(model, data.cameras[f], f, opt).color, data.rgb[f]);
}

}  // namespace

Stage1Result train_stage1(const Dataset& data, const TrainConfig& cfg, const FieldConfig& field,
                          const MetricsSink& metrics) {
  validate_training(data, cfg, cfg.stage1_steps);
  tune_allocator();
  Stage1Result result;
  result.model = std::make_unique<Stage1Model>(field);
  Stage1Model& model = *result.model;
  ParamStore& store = model.params();
  Adam opt(store, schedule(cfg, cfg.stage1_steps));
  std::mt19937_64 rng(cfg.seed ^ 0x5157a9e1ULL);
  const WarpFn warp = stage1_warp(model);

  RenderOptions ropt;
  ropt.samples = cfg.samples;
  ropt.jitter = true;
  ropt.background = data.background;

  SurfacePool pool;
  for (int step = 0; step < cfg.stage1_steps; ++step) {
    if (cfg.surface_refresh > 0 && step > 0 && step % cfg.surface_refresh == 0) {
      pool = collect_surface_points(model, data.cameras, cfg.samples, cfg.surface_pool, rng());
    }
    const Batch b = sample_batch(data, cfg.rays_per_batch, rng);
    ropt.seed = cfg.seed * 1000003ULL + static_cast<std::uint64_t>(step);

    store.zero_grad();
    Graph g(&store);
    const RenderResult rr = render_rays(g, model, b.rays, ropt);
    Var rec = loss_rec(rr.out.color, b.target);
    Var amb = mean(squared_norm(rr.field.ambient));
    Var total = add(rec, scale(amb, cfg.ambient_penalty));
    double reg_value = 0.0;
    Matrix rp;
    std::vector<int> rf;
    if (sample_surface(pool, cfg.reg_points, rng, rp, rf)) {
      Var reg = loss_reg(g, warp, rp, rf);
      reg_value = reg.value()(0, 0);
      total = add(total, scale(reg, cfg.weights.reg));
    }
    const double loss = total.value()(0, 0);
    nlohmann::json terms{{"rec", rec.value()(0, 0)}, {"ambient", amb.value()(0, 0)}, {"reg", reg_value}};
    check_finite(loss, 1, step, terms);
    g.backward(total);
    const double lr = opt.learning_rate();
    optimizer_step(opt, store, 1, step);

    if (cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.stage1_steps)) {
      nlohmann::json rec_json{{"stage", 1}, {"step", step}, {"loss", loss}, {"lr", lr}};
      rec_json.update(terms);
      if (cfg.probe_every > 0 && step % cfg.probe_every == 0) rec_json["probe_psnr"] = probe_psnr(model, data, cfg);
      metrics.write(rec_json);
    }
    if (metrics.checkpoint && cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0) {
      metrics.checkpoint(1, step + 1, model);
    }
  }
  result.renders = render_frames(model, data.cameras, cfg.samples, data.background);
  return result;
}

std::unique_ptr<SceneModel> train_stage2(const Dataset& data, const KeypointSupervision& sup,
                                         const KeyPointSet& initial, const TrainConfig& cfg,
                                         const FieldConfig& field, const MetricsSink& metrics) {
  validate_training(data, cfg, cfg.stage2_steps);
  initial.validate();
  if (initial.frames != data.frames || initial.count != field.keypoints || initial.dim != data.dim) {
    throw std::invalid_argument("initial key points do not match the dataset and field config");
  }
  tune_allocator();
  auto model = std::make_unique<SceneModel>(field);
  model->set_keypoints(initial);
  ParamStore& store = model->params();
  const int kp_block = store.id("keypoints");
  if (cfg.freeze_keypoints) store[kp_block].trainable = false;
  Adam opt(store, schedule(cfg, cfg.stage2_steps));
  std::mt19937_64 rng(cfg.seed ^ 0x2b7e1516ULL);
  const WarpFn warp = scene_warp(*model);

  RenderOptions ropt;
  ropt.samples = cfg.samples;
  ropt.jitter = true;
  ropt.background = data.background;

  const int T = data.frames;
  const int N = field.keypoints;
  const bool all_pairs = static_cast<long>(T) * N <= cfg.keypoint_pairs;
  std::uniform_int_distribution<int> pick_t(0, T - 1);
  std::uniform_int_distribution<int> pick_i(0, N - 1);
  const double margin = 0.2 * data.diagonal();
  const double bands = static_cast<double>(model->warp_encoder().bands);

  SurfacePool pool;
  for (int step = 0; step < cfg.stage2_steps; ++step) {
    if (cfg.surface_refresh > 0 && step > 0 && step % cfg.surface_refresh == 0) {
      pool = collect_surface_points(*model, data.cameras, cfg.samples, cfg.surface_pool, rng());
    }
    if (cfg.anneal_warp) {
      const double span = std::max(1.0, cfg.anneal_fraction * cfg.stage2_steps);
      model->set_warp_window(bands * std::min(1.0, step / span));
    }
    const Batch b = sample_batch(data, cfg.rays_per_batch, rng);
    ropt.seed = cfg.seed * 1000003ULL + static_cast<std::uint64_t>(step);

    store.zero_grad();
    Graph g(&store);
    const RenderResult rr = render_rays(g, *model, b.rays, ropt);
    Var rec = loss_rec(rr.out.color, b.target);
    Var total = rec;
    double reg_value = 0.0;
    Matrix rp;
    std::vector<int> rf;
    if (sample_surface(pool, cfg.reg_points, rng, rp, rf)) {
      Var reg = loss_reg(g, warp, rp, rf);
      reg_value = reg.value()(0, 0);
      total = add(total, scale(reg, cfg.weights.reg));
    }
    g.backward(total);

    std::vector<std::pair<int, int>> pairs;
    if (!all_pairs) {
      pairs.reserve(cfg.keypoint_pairs);
      for (int k = 0; k < cfg.keypoint_pairs; ++k) pairs.emplace_back(pick_t(rng), pick_i(rng));
    }
    const KeyPointSet kp = model->keypoint_set();
    const KeypointLossTotals kl = keypoint_losses(sup, kp, cfg.weights, &store[kp_block].grad, pairs);
    const double loss = total.value()(0, 0) + cfg.weights.motion * kl.motion + cfg.weights.geo * kl.geo;
    nlohmann::json terms{{"rec", rec.value()(0, 0)}, {"reg", reg_value}, {"motion", kl.motion}, {"geo", kl.geo}};
    check_finite(loss, 2, step, terms);
    const double lr = opt.learning_rate();
    optimizer_step(opt, store, 2, step);

    // keep escaping key points inside the padded scene bounds
    Matrix& pos = store[kp_block].value;
    for (Eigen::Index r = 0; r < pos.rows(); ++r) {
      for (int d = 0; d < 2; ++d) {
        const double lo = data.bounds_lo(d) - margin;
        const double hi = data.bounds_hi(d) + margin;
        if (pos(r, d) < lo || pos(r, d) > hi) {
          const int t = static_cast<int>(r / N);
          const int i = static_cast<int>(r % N);
          std::cerr << "warning: key point " << i << " of frame " << t << " left the scene bounds at step "
                    << step << "; clamped\n";
          metrics.write({{"stage", 2}, {"step", step}, {"warning", "keypoint clamped"}, {"frame", t}, {"keypoint", i}});
          pos(r, d) = std::clamp(pos(r, d), lo, hi);
        }
      }
    }

    if (cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.stage2_steps)) {
      nlohmann::json rec_json{{"stage", 2}, {"step", step}, {"loss", loss}, {"lr", lr}};
      rec_json.update(terms);
      if (cfg.probe_every > 0 && step % cfg.probe_every == 0) rec_json["probe_psnr"] = probe_psnr(*model, data, cfg);
      metrics.write(rec_json);
    }
    if (metrics.checkpoint && cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0) {
      metrics.checkpoint(2, step + 1, *model);
    }
  }
  model->set_warp_window(std::nullopt);
  return model;
}

}  // namespace kpnerf
