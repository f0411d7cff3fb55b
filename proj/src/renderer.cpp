#include "kpnerf/renderer.hpp"

#include <cmath>
#include <memory>

namespace kpnerf {

namespace {

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

double unit_hash(std::uint64_t seed, std::uint64_t key, std::uint64_t j) {
  const std::uint64_t h = splitmix(splitmix(splitmix(seed) ^ key) ^ (j * 0x632be59bd9b4e019ULL));
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

constexpr double kOpacityFloor = 1e-10;

}  // namespace

RaySamples sample_rays(const RayBatch& rays, const RenderOptions& options) {
  const int s = options.samples;
  if (s < 2) throw std::invalid_argument("at least two samples per ray are required");
  if (!(rays.near < rays.far)) throw std::invalid_argument("near bound must be below far bound");
  const int r = rays.size();
  const double bin = (rays.far - rays.near) / s;
  RaySamples out;
  out.distances.resize(r, s);
  out.entries.resize(r, s);
  out.deltas.resize(r, s);
  for (int i = 0; i < r; ++i) {
    const std::uint64_t key = rays.keys.empty() ? static_cast<std::uint64_t>(i) : rays.keys[i];
    for (int j = 0; j < s; ++j) {
      const double u = options.jitter ? unit_hash(options.seed, key, j) : 0.5;
      out.distances(i, j) = rays.near + (j + u) * bin;
    }
    double entry = rays.near;
    for (int j = 0; j < s; ++j) {
      const double exit =
          j + 1 < s ? 0.5 * (out.distances(i, j) + out.distances(i, j + 1)) : rays.far;
      out.entries(i, j) = entry;
      out.deltas(i, j) = exit - entry;
      entry = exit;
    }
  }
  return out;
}

Composite composite(Var density, Var rgb, const RaySamples& samples,
                    const Eigen::Vector3d& background) {
  Graph& g = *density.graph;
  const Eigen::Index r = samples.distances.rows();
  const Eigen::Index s = samples.distances.cols();
  if (density.rows() != r * s || density.cols() != 1 || rgb.rows() != r * s || rgb.cols() != 3) {
    throw ShapeError("composite: expected " + std::to_string(r * s) + " samples, got density " +
                     shape_str(density.value()) + " and rgb " + shape_str(rgb.value()));
  }
  const Matrix& sigma = density.value();
  const Matrix& c = rgb.value();
  Matrix out(r, 5);
  Matrix weights(r, s);
  for (Eigen::Index i = 0; i < r; ++i) {
    double trans = 1.0;
    Eigen::Vector3d col = Eigen::Vector3d::Zero();
    double opacity = 0.0;
    double depth_sum = 0.0;
    for (Eigen::Index j = 0; j < s; ++j) {
      const Eigen::Index k = i * s + j;
      const double tau = sigma(k, 0) * samples.deltas(i, j);
      const double next = trans * std::exp(-tau);
      const double w = trans - next;
      weights(i, j) = w;
      col += w * c.row(k).transpose();
      opacity += w;
      depth_sum += w * samples.entries(i, j);
      trans = next;
    }
    col += (1.0 - opacity) * background;
    out(i, 0) = col.x();
    out(i, 1) = col.y();
    out(i, 2) = col.z();
    out(i, 3) = depth_sum / std::max(opacity, kOpacityFloor);
    out(i, 4) = opacity;
  }

  auto entries = std::make_shared<Matrix>(samples.entries);
  auto deltas = std::make_shared<Matrix>(samples.deltas);
  auto w_saved = std::make_shared<Matrix>(weights);
  Var packed = g.record(std::move(out), {density, rgb},
                        [entries, deltas, w_saved, background](Graph& g, int n) {
    const int pd = g.parent(n, 0);
    const int pc = g.parent(n, 1);
    const Matrix& c = g.value(pc);
    const Matrix& res = g.value(n);
    const Matrix& go = g.grad(n);
    const Matrix& w = *w_saved;
    const Eigen::Index r = w.rows();
    const Eigen::Index s = w.cols();
    Matrix dsigma(r * s, 1);
    Matrix dc(r * s, 3);
    Vector gw(s);
    for (Eigen::Index i = 0; i < r; ++i) {
      const Eigen::Vector3d gcol = go.row(i).head<3>().transpose();
      const double gdepth = go(i, 3);
      const double gopa = go(i, 4);
      const double opacity = res(i, 4);
      const double depth = res(i, 3);
      for (Eigen::Index j = 0; j < s; ++j) {
        const Eigen::Index k = i * s + j;
        double dd = 0.0;
        if (opacity > kOpacityFloor) {
          dd = ((*entries)(i, j) - depth) / opacity;
        } else {
          dd = (*entries)(i, j) / kOpacityFloor;
        }
        gw(j) = gcol.dot(c.row(k).transpose() - background) + gopa + gdepth * dd;
        dc.row(k) = w(i, j) * gcol.transpose();
      }
      // dL/dtau_j = T_{j+1} gw_j - sum_{k>j} w_k gw_k
      double suffix = 0.0;
      double trans_end = 1.0 - opacity;  // T_S
      for (Eigen::Index j = s - 1; j >= 0; --j) {
        const Eigen::Index k = i * s + j;
        const double t_next = trans_end;
        const double dtau = t_next * gw(j) - suffix;
        dsigma(k, 0) = dtau * (*deltas)(i, j);
        suffix += w(i, j) * gw(j);
        trans_end = t_next + w(i, j);  // T_j = T_{j+1} + w_j
      }
    }
    if (g.needs_grad(pd)) g.accumulate(pd, dsigma);
    if (g.needs_grad(pc)) g.accumulate(pc, dc);
  });

  Composite result;
  result.color = slice_cols(packed, 0, 3);
  result.depth = slice_cols(packed, 3, 1);
  result.opacity = slice_cols(packed, 4, 1);
  result.weights = std::move(weights);
  return result;
}

RenderResult render_rays(Graph& g, const RadianceModel& model, const RayBatch& rays,
                         const RenderOptions& options, const Matrix* keypoints) {
  RenderResult res;
  res.samples = sample_rays(rays, options);
  const int r = rays.size();
  const int s = options.samples;
  const int d = static_cast<int>(rays.origins.cols());
  res.batch.points.resize(static_cast<Eigen::Index>(r) * s, d);
  res.batch.directions.resize(static_cast<Eigen::Index>(r) * s, d);
  res.batch.frames.resize(static_cast<std::size_t>(r) * s);
  for (int i = 0; i < r; ++i) {
    for (int j = 0; j < s; ++j) {
      const Eigen::Index k = static_cast<Eigen::Index>(i) * s + j;
      res.batch.points.row(k) =
          rays.origins.row(i) + res.samples.distances(i, j) * rays.directions.row(i);
      res.batch.directions.row(k) = rays.directions.row(i);
      res.batch.frames[k] = rays.frames[i];
    }
  }
  res.field = model.evaluate(g, res.batch, keypoints);
  res.out = composite(res.field.density, res.field.rgb, res.samples, options.background);
  return res;
}

RayRender render_ray(const RadianceModel& model, const Ray& ray, double near, double far,
                     int frame, const RenderOptions& options, const Matrix* keypoints) {
  const double len = ray.direction.norm();
  if (!(len > 1e-12) || !std::isfinite(len)) {
    throw std::invalid_argument("degenerate ray direction");
  }
  RayBatch rays;
  rays.origins = ray.origin.transpose();
  rays.directions = (ray.direction / len).transpose();
  rays.frames = {frame};
  rays.keys = {0};
  rays.near = near;
  rays.far = far;
  Graph g(model.param_store());
  RenderResult res = render_rays(g, model, rays, options, keypoints);
  RayRender out;
  out.color = res.out.color.value().row(0).transpose();
  out.depth = res.out.depth.value()(0, 0);
  out.opacity = res.out.opacity.value()(0, 0);
  out.weights = res.out.weights.row(0).transpose();
  return out;
}

RayBatch camera_rays(const Camera& cam, int frame, std::uint64_t key_base) {
  cam.validate();
  RayBatch rays;
  rays.origins.resize(cam.width, 2);
  rays.directions.resize(cam.width, 2);
  rays.frames.assign(cam.width, frame);
  rays.keys.resize(cam.width);
  for (int i = 0; i < cam.width; ++i) {
    const Ray ray = cam.ray(i + 0.5);
    rays.origins.row(i) = ray.origin.transpose();
    rays.directions.row(i) = ray.direction.transpose();
    rays.keys[i] = key_base + static_cast<std::uint64_t>(i);
  }
  rays.near = cam.near;
  rays.far = cam.far;
  return rays;
}

RenderOutput render_image(const RadianceModel& model, const Camera& cam, int frame,
                          const RenderOptions& options, const Matrix* keypoints) {
  const RayBatch all = camera_rays(cam, frame);
  RenderOutput out;
  out.color.resize(cam.width, 3);
  out.depth.resize(cam.width);
  out.opacity.resize(cam.width);
  constexpr int kChunk = 256;
  for (int start = 0; start < cam.width; start += kChunk) {
    const int count = std::min(kChunk, cam.width - start);
    RayBatch rays;
    rays.origins = all.origins.middleRows(start, count);
    rays.directions = all.directions.middleRows(start, count);
    rays.frames.assign(count, frame);
    rays.keys.assign(all.keys.begin() + start, all.keys.begin() + start + count);
    rays.near = all.near;
    rays.far = all.far;
    Graph g(model.param_store());
    RenderResult res = render_rays(g, model, rays, options, keypoints);
    out.color.middleRows(start, count) = res.out.color.value();
    out.depth.segment(start, count) = res.out.depth.value().col(0);
    out.opacity.segment(start, count) = res.out.opacity.value().col(0);
  }
  return out;
}

Vector supervision_depth(const RenderOutput& image, double far, double min_opacity) {
  Vector d = image.depth;
  for (Eigen::Index i = 0; i < d.size(); ++i) {
    if (image.opacity(i) < min_opacity) d(i) = far;
  }
  return d;
}

Vec2 GridSpec::cell_center(int ix, int iy) const {
  return {lo.x() + (ix + 0.5) * (hi.x() - lo.x()) / nx, lo.y() + (iy + 0.5) * (hi.y() - lo.y()) / ny};
}

Matrix render_density_map(const RadianceModel& model, const GridSpec& grid, int frame,
                          const Matrix* keypoints) {
  if (model.dim() != 2) throw std::invalid_argument("density maps need a two-dimensional model");
  SampleBatch batch;
  const Eigen::Index n = static_cast<Eigen::Index>(grid.nx) * grid.ny;
  batch.points.resize(n, 2);
  batch.directions.resize(n, 2);
  batch.frames.assign(n, frame);
  for (int iy = 0; iy < grid.ny; ++iy) {
    for (int ix = 0; ix < grid.nx; ++ix) {
      const Eigen::Index k = static_cast<Eigen::Index>(iy) * grid.nx + ix;
      batch.points.row(k) = grid.cell_center(ix, iy).transpose();
      batch.directions.row(k) << 0.0, 1.0;
    }
  }
  Graph g(model.param_store());
  FieldOutput f = model.evaluate(g, batch, keypoints);
  Matrix out(grid.ny, grid.nx);
  for (int iy = 0; iy < grid.ny; ++iy) {
    for (int ix = 0; ix < grid.nx; ++ix) {
      out(iy, ix) = f.density.value()(static_cast<Eigen::Index>(iy) * grid.nx + ix, 0);
    }
  }
  return out;
}

}  // namespace kpnerf
