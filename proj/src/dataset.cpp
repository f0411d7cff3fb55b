#include "kpnerf/dataset.hpp"

#include <png.h>

#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>

namespace kpnerf {

static_assert(std::endian::native == std::endian::little, "dataset IO assumes a little-endian host");

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string frame_name(int t, const char* suffix) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%05d%s.bin", t, suffix);
  return buf;
}

template <typename T>
void write_raw(const fs::path& path, const std::vector<T>& data) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(T)));
  if (!out) throw std::runtime_error("short write to " + path.string());
}

template <typename T>
std::vector<T> read_raw(const fs::path& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  const auto bytes = static_cast<std::size_t>(in.tellg());
  if (bytes % sizeof(T) != 0) throw std::runtime_error(path.string() + " has a partial element");
  std::vector<T> data(bytes / sizeof(T));
  in.seekg(0);
  in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(bytes));
  return data;
}

std::vector<float> to_f32(const double* p, std::size_t n) {
  std::vector<float> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<float>(p[i]);
  return out;
}

Vector vector_from(const std::vector<float>& v) {
  Vector out(static_cast<Eigen::Index>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i) out(static_cast<Eigen::Index>(i)) = v[i];
  return out;
}

json camera_json(const Camera& c) {
  return {{"o", {c.origin.x(), c.origin.y()}}, {"orientation", c.angle}, {"f", c.focal}, {"c", c.principal}};
}

json tracks_json(const std::vector<synth::Track>& tracks) {
  json arr = json::array();
  for (const auto& tr : tracks) {
    json world = json::array();
    for (const Vec2& w : tr.world) world.push_back({w.x(), w.y()});
    arr.push_back({{"part", tr.part},
                   {"world", world},
                   {"pixel", tr.pixel},
                   {"distance", tr.distance},
                   {"visible", tr.visible}});
  }
  return {{"keypoints", arr}};
}

std::vector<synth::Track> tracks_from(const json& j) {
  std::vector<synth::Track> out;
  for (const json& k : j.at("keypoints")) {
    synth::Track tr;
    tr.part = k.at("part").get<std::string>();
    for (const json& w : k.at("world")) tr.world.emplace_back(w[0].get<double>(), w[1].get<double>());
    tr.pixel = k.at("pixel").get<std::vector<double>>();
    tr.distance = k.at("distance").get<std::vector<double>>();
    tr.visible = k.at("visible").get<std::vector<bool>>();
    out.push_back(std::move(tr));
  }
  return out;
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  return json::parse(in);
}

}  // namespace

double sample_pixels(const Vector& values, double u) {
  const Eigen::Index n = values.size();
  if (n == 0) throw std::invalid_argument("cannot sample an empty pixel row");
  const double x = u - 0.5;
  if (x <= 0.0) return values(0);
  if (x >= static_cast<double>(n - 1)) return values(n - 1);
  const auto i = static_cast<Eigen::Index>(std::floor(x));
  const double f = x - static_cast<double>(i);
  return (1.0 - f) * values(i) + f * values(i + 1);
}

void write_png(const fs::path& path, const std::vector<Matrix>& rows) {
  if (rows.empty()) throw std::invalid_argument("no rows to write");
  const int width = static_cast<int>(rows.front().rows());
  const int height = static_cast<int>(rows.size());
  FILE* fp = std::fopen(path.string().c_str(), "wb");
  if (fp == nullptr) throw std::runtime_error("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw std::runtime_error("libpng failed writing " + path.string());
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, width, height, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_byte> line(static_cast<std::size_t>(width) * 3);
  for (const Matrix& row : rows) {
    for (int i = 0; i < width; ++i) {
      for (int c = 0; c < 3; ++c) {
        line[static_cast<std::size_t>(i) * 3 + c] =
            static_cast<png_byte>(std::lround(255.0 * std::clamp(row(i, c), 0.0, 1.0)));
      }
    }
    png_write_row(png, line.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

void generate(const synth::SceneSpec& spec, std::uint64_t seed, const fs::path& dir, bool png) {
  spec.validate();
  fs::create_directories(dir / "rgb");
  fs::create_directories(dir / "flow");
  fs::create_directories(dir / "depth");
  fs::create_directories(dir / "masks");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  json cams = json::array();
  std::vector<Matrix> preview;
  for (int t = 0; t < spec.frames; ++t) {
    const Camera cam = synth::camera_at(spec, t);
    cams.push_back(camera_json(cam));
    synth::Raster r = synth::rasterize(spec, synth::offsets_at(spec, t), cam);
    if (spec.noise.image_sigma > 0.0) {
      for (Eigen::Index i = 0; i < r.rgb.size(); ++i) {
        r.rgb.data()[i] = std::clamp(r.rgb.data()[i] + spec.noise.image_sigma * normal(rng), 0.0, 1.0);
      }
    }
    write_raw(dir / "rgb" / frame_name(t, ""), to_f32(r.rgb.data(), r.rgb.size()));
    write_raw(dir / "depth" / frame_name(t, ""), to_f32(r.depth.data(), r.depth.size()));
    write_raw(dir / "masks" / frame_name(t, ""), r.ids);
    if (png) preview.push_back(r.rgb);
    for (int target : {t + 1, t - 1}) {
      if (target < 0 || target >= spec.frames) continue;
      synth::FlowField f = synth::exact_flow(spec, t, target);
      if (spec.noise.flow_sigma > 0.0) {
        for (Eigen::Index i = 0; i < f.flow.size(); ++i) f.flow(i) += spec.noise.flow_sigma * normal(rng);
      }
      const char* tag = target > t ? "_fw" : "_bw";
      write_raw(dir / "flow" / frame_name(t, tag), to_f32(f.flow.data(), f.flow.size()));
      write_raw(dir / "flow" / frame_name(t, target > t ? "_fw_valid" : "_bw_valid"), f.valid);
    }
  }

  json parts = json::array();
  for (const auto& p : spec.parts) parts.push_back(p.name);
  json meta{{"version", 1},
            {"D", 2},
            {"T", spec.frames},
            {"width", spec.width},
            {"channels", 3},
            {"near", spec.near},
            {"far", spec.far},
            {"background", spec.background},
            {"bounds_lo", {spec.bounds_lo.x(), spec.bounds_lo.y()}},
            {"bounds_hi", {spec.bounds_hi.x(), spec.bounds_hi.y()}},
            {"parts", parts},
            {"seed", seed},
            {"cameras", cams}};
  std::ofstream(dir / "meta.json") << meta.dump(2) << '\n';
  std::ofstream(dir / "gt_tracks.json") << tracks_json(synth::ground_truth_tracks(spec)).dump() << '\n';
  std::ofstream(dir / "spec.json") << json(spec).dump(2) << '\n';
  if (png) write_png(dir / "preview.png", preview);
}

Dataset load_dataset(const fs::path& dir) {
  const json meta = read_json(dir / "meta.json");
  Dataset d;
  d.dim = meta.at("D").get<int>();
  if (d.dim != 2) throw std::runtime_error("only two-dimensional datasets are supported");
  d.frames = meta.at("T").get<int>();
  d.width = meta.at("width").get<int>();
  d.near = meta.at("near").get<double>();
  d.far = meta.at("far").get<double>();
  const auto bg = meta.at("background").get<std::vector<double>>();
  d.background = Eigen::Vector3d(bg.at(0), bg.at(1), bg.at(2));
  const auto lo = meta.at("bounds_lo").get<std::vector<double>>();
  const auto hi = meta.at("bounds_hi").get<std::vector<double>>();
  d.bounds_lo = Vec2(lo.at(0), lo.at(1));
  d.bounds_hi = Vec2(hi.at(0), hi.at(1));
  d.part_names = meta.value("parts", std::vector<std::string>{});
  for (const json& c : meta.at("cameras")) {
    Camera cam;
    cam.origin = Vec2(c.at("o")[0].get<double>(), c.at("o")[1].get<double>());
    cam.angle = c.at("orientation").get<double>();
    cam.focal = c.at("f").get<double>();
    cam.principal = c.at("c").get<double>();
    cam.width = d.width;
    cam.near = d.near;
    cam.far = d.far;
    d.cameras.push_back(cam);
  }
  if (static_cast<int>(d.cameras.size()) != d.frames) {
    throw std::runtime_error("meta.json lists " + std::to_string(d.cameras.size()) + " cameras for " +
                             std::to_string(d.frames) + " frames");
  }
  const auto expect = [&](const fs::path& p, std::size_t got, std::size_t want) {
    if (got != want) {
      throw std::runtime_error(p.string() + " holds " + std::to_string(got) + " values, expected " +
                               std::to_string(want));
    }
  };
  const auto w = static_cast<std::size_t>(d.width);
  d.flow_fw.resize(d.frames);
  d.flow_bw.resize(d.frames);
  for (int t = 0; t < d.frames; ++t) {
    const fs::path rgb_path = dir / "rgb" / frame_name(t, "");
    const auto rgb = read_raw<float>(rgb_path);
    expect(rgb_path, rgb.size(), 3 * w);
    Matrix img(d.width, 3);
    for (std::size_t i = 0; i < rgb.size(); ++i) img.data()[i] = rgb[i];
    d.rgb.push_back(std::move(img));
    const fs::path depth_path = dir / "depth" / frame_name(t, "");
    const auto depth = read_raw<float>(depth_path);
    expect(depth_path, depth.size(), w);
    d.depth.push_back(vector_from(depth));
    const fs::path mask_path = dir / "masks" / frame_name(t, "");
    auto mask = read_raw<std::uint16_t>(mask_path);
    expect(mask_path, mask.size(), w);
    d.masks.push_back(std::move(mask));
    if (t + 1 < d.frames) {
      const fs::path p = dir / "flow" / frame_name(t, "_fw");
      const auto f = read_raw<float>(p);
      expect(p, f.size(), w);
      d.flow_fw[t] = vector_from(f);
    }
    if (t > 0) {
      const fs::path p = dir / "flow" / frame_name(t, "_bw");
      const auto f = read_raw<float>(p);
      expect(p, f.size(), w);
      d.flow_bw[t] = vector_from(f);
    }
  }
  if (fs::exists(dir / "gt_tracks.json")) d.tracks = tracks_from(read_json(dir / "gt_tracks.json"));
  return d;
}

ValidationReport validate_dataset(const fs::path& dir, double flow_tolerance) {
  ValidationReport rep;
  if (!fs::is_directory(dir)) throw std::runtime_error("dataset directory " + dir.string() + " does not exist");
  const auto fail = [&](std::string msg) {
    rep.ok = false;
    rep.errors.push_back(std::move(msg));
  };
  Dataset d;
  try {
    d = load_dataset(dir);
  } catch (const nlohmann::json::exception& e) {
    fail(std::string("malformed json: ") + e.what());
    return rep;
  } catch (const std::runtime_error& e) {
    fail(e.what());
    return rep;
  }
  if (flow_tolerance < 0.0) {
    double sigma = 0.0;
    if (fs::exists(dir / "spec.json")) {
      sigma = read_json(dir / "spec.json").value("noise", json::object()).value("flow_sigma", 0.0);
    }
    flow_tolerance = 0.25 + 5.0 * sigma;
  }
  const auto max_id = static_cast<std::uint16_t>(d.part_names.size() + 1);
  for (int t = 0; t < d.frames; ++t) {
    const std::string name = frame_name(t, "");
    if (!d.rgb[t].allFinite() || d.rgb[t].minCoeff() < 0.0 || d.rgb[t].maxCoeff() > 1.0) {
      fail("rgb/" + name + " has values outside [0, 1]");
    }
    if (!d.depth[t].allFinite() || d.depth[t].minCoeff() <= 0.0 || d.depth[t].maxCoeff() > d.far * (1 + 1e-6)) {
      fail("depth/" + name + " has values outside (0, far]");
    }
    for (std::uint16_t id : d.masks[t]) {
      if (id > max_id) {
        fail("masks/" + name + " holds unknown part id " + std::to_string(id));
        break;
      }
    }
    if (t + 1 < d.frames && !d.flow_fw[t].allFinite()) fail("flow/" + frame_name(t, "_fw") + " is not finite");
    if (t > 0 && !d.flow_bw[t].allFinite()) fail("flow/" + frame_name(t, "_bw") + " is not finite");
  }
  if (d.tracks.size() != d.part_names.size()) {
    fail("gt_tracks.json lists " + std::to_string(d.tracks.size()) + " tracks for " +
         std::to_string(d.part_names.size()) + " parts");
  }
  for (const auto& tr : d.tracks) {
    if (static_cast<int>(tr.pixel.size()) != d.frames || static_cast<int>(tr.world.size()) != d.frames ||
        static_cast<int>(tr.visible.size()) != d.frames) {
      fail("track '" + tr.part + "' does not cover every frame");
      continue;
    }
    for (int t = 0; t < d.frames; ++t) {
      const Projection p = d.cameras[t].project(tr.world[t]);
      if (std::abs(p.u - tr.pixel[t]) > 1e-6) {
        fail("track '" + tr.part + "' pixel at frame " + std::to_string(t) + " disagrees with its camera");
      }
      if (t + 1 >= d.frames || !tr.visible[t] || !tr.visible[t + 1]) continue;
      const double fw = sample_pixels(d.flow_fw[t], tr.pixel[t]) - (tr.pixel[t + 1] - tr.pixel[t]);
      const double bw = sample_pixels(d.flow_bw[t + 1], tr.pixel[t + 1]) - (tr.pixel[t] - tr.pixel[t + 1]);
      const double err = std::max(std::abs(fw), std::abs(bw));
      rep.max_track_flow_error = std::max(rep.max_track_flow_error, err);
      if (err > flow_tolerance) {
        fail("track '" + tr.part + "' disagrees with the flow between frames " + std::to_string(t) +
             " and " + std::to_string(t + 1) + " by " + std::to_string(err) + " px");
      }
    }
  }
  rep.notes.push_back("max track/flow residual " + std::to_string(rep.max_track_flow_error) + " px");
  return rep;
}

}  // namespace kpnerf
