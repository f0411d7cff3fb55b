#include "kpnerf/dataset.hpp"
#include "kpnerf/kpanalysis.hpp"
#include "kpnerf/training.hpp"
#include "kpnerf/workbench.hpp"

#include <CLI11.hpp>

#include <csignal>
#include <fstream>
#include <iostream>

using namespace kpnerf;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

json read_json(const fs::path& p) {
  std::ifstream is(p);
  if (!is) throw std::runtime_error("cannot read " + p.string());
  return json::parse(is);
}

void write_json(const fs::path& p, const json& j) {
  std::ofstream os(p);
  if (!os) throw std::runtime_error("cannot write " + p.string());
  os << j.dump(2) << '\n';
}

TrainConfig train_config(const std::string& path) {
  TrainConfig c;
  if (!path.empty()) c = read_json(path).get<TrainConfig>();
  return c;
}

struct TrainFlags {
  std::string config;
  std::string metrics;
  int steps = -1;
  int rays = -1;
  int samples = -1;
  int checkpoint_every = -1;
  std::uint64_t seed = 0;
  bool seed_set = false;

  void add(CLI::App* cmd) {
    cmd->add_option("--config", config, "training config JSON")->check(CLI::ExistingFile);
    cmd->add_option("--metrics", metrics, "metrics log (JSON lines)");
    cmd->add_option("--steps", steps, "override the step budget");
    cmd->add_option("--rays", rays, "rays per batch");
    cmd->add_option("--samples", samples, "samples per ray");
    cmd->add_option("--checkpoint-every", checkpoint_every, "periodic checkpoint interval");
    cmd->add_option("--seed", seed, "random seed")->each([this](const std::string&) { seed_set = true; });
  }

  TrainConfig resolve(int stage) const {
    TrainConfig c = train_config(config);
    if (steps >= 0) (stage == 1 ? c.stage1_steps : c.stage2_steps) = steps;
    if (rays > 0) c.rays_per_batch = rays;
    if (samples > 0) c.samples = samples;
    if (checkpoint_every >= 0) c.checkpoint_every = checkpoint_every;
    if (seed_set) c.seed = seed;
    return c;
  }
};

// Metrics file plus periodic checkpoints next to the final one.
struct TrainOutputs {
  std::ofstream log;
  MetricsSink sink;

  TrainOutputs(const std::string& metrics, const fs::path& ckpt, const Dataset& data) {
    if (!metrics.empty()) {
      log.open(metrics);
      if (!log) throw std::runtime_error("cannot write metrics log " + metrics);
      sink.out = &log;
    }
    sink.checkpoint = [ckpt, &data](int, int step, const RadianceModel& m) {
      const fs::path p = ckpt.string() + ".step" + std::to_string(step);
      if (auto* s = dynamic_cast<const SceneModel*>(&m)) {
        save_checkpoint(p, make_checkpoint(*s, data.cameras, data.far, data.background, {{"step", step}}));
      } else if (auto* s1 = dynamic_cast<const Stage1Model*>(&m)) {
        save_checkpoint(p, make_checkpoint(*s1, data.cameras, data.far, data.background, {{"step", step}}));
      }
    };
  }
};

Matrix parse_keypoints(const std::string& text) {
  json j = json::parse(text);
  return matrix_from_json(j);
}

Service* active_service = nullptr;

void on_signal(int) {
  if (active_service != nullptr) active_service->stop();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Key-point editable radiance fields in flatland"};
  app.require_subcommand(1);

  // synth
  std::string spec_path, out_dir;
  std::uint64_t synth_seed = 1;
  bool png = false;
  auto* synth_cmd = app.add_subcommand("synth", "render a scene description into a dataset directory");
  synth_cmd->add_option("spec", spec_path)->required()->check(CLI::ExistingFile);
  synth_cmd->add_option("out", out_dir)->required();
  synth_cmd->add_option("--seed", synth_seed, "noise seed");
  synth_cmd->add_flag("--png", png, "also write preview.png");

  // validate
  std::string data_dir;
  auto* validate_cmd = app.add_subcommand("validate", "check a dataset directory");
  validate_cmd->add_option("dir", data_dir)->required()->check(CLI::ExistingDirectory);

  // train-stage1
  std::string ckpt1, ckpt2, tracks_path;
  TrainFlags s1_flags, s2_flags;
  auto* s1_cmd = app.add_subcommand("train-stage1", "train the hyperspace baseline");
  s1_cmd->add_option("dir", data_dir)->required()->check(CLI::ExistingDirectory);
  s1_cmd->add_option("ckpt", ckpt1)->required();
  s1_flags.add(s1_cmd);

  // analyze
  std::string analysis_config, grid_out;
  auto* analyze_cmd = app.add_subcommand("analyze", "detect key points and initialize their tracks");
  analyze_cmd->add_option("dir", data_dir)->required()->check(CLI::ExistingDirectory);
  analyze_cmd->add_option("ckpt", ckpt1)->required()->check(CLI::ExistingFile);
  analyze_cmd->add_option("tracks", tracks_path)->required();
  analyze_cmd->add_option("--config", analysis_config, "analysis config JSON")->check(CLI::ExistingFile);
  analyze_cmd->add_option("--grid", grid_out, "write the variance grid as JSON");

  // train
  auto* train_cmd = app.add_subcommand("train", "train the key-point conditioned model");
  train_cmd->add_option("dir", data_dir)->required()->check(CLI::ExistingDirectory);
  train_cmd->add_option("ckpt1", ckpt1)->required()->check(CLI::ExistingFile);
  train_cmd->add_option("tracks", tracks_path)->required()->check(CLI::ExistingFile);
  train_cmd->add_option("ckpt2", ckpt2)->required();
  s2_flags.add(train_cmd);

  // render
  std::string ckpt, image_out, camera_json, keypoints_json;
  int frame = 0, samples = 64;
  auto* render_cmd = app.add_subcommand("render", "render one view");
  render_cmd->add_option("ckpt", ckpt)->required()->check(CLI::ExistingFile);
  render_cmd->add_option("--frame", frame, "frame for latents, camera and key points");
  render_cmd->add_option("--camera", camera_json, "camera JSON overriding the frame camera");
  render_cmd->add_option("--keypoints", keypoints_json, "N x D key points as a JSON array of rows");
  render_cmd->add_option("--samples", samples, "samples per ray");
  render_cmd->add_option("-o,--out", image_out, "output: .png image or .json payload")->required();

  // eval
  std::string eval_out;
  auto* eval_cmd = app.add_subcommand("eval", "PSNR and track errors against a dataset");
  eval_cmd->add_option("ckpt", ckpt)->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("dir", data_dir)->required()->check(CLI::ExistingDirectory);
  eval_cmd->add_option("--samples", samples, "samples per ray");
  eval_cmd->add_option("--json", eval_out, "write the full report");

  // serve
  int port = 8080, threads = 4;
  std::string host = "127.0.0.1";
  auto* serve_cmd = app.add_subcommand("serve", "HTTP service for the editor");
  serve_cmd->add_option("ckpt", ckpt)->required()->check(CLI::ExistingFile);
  serve_cmd->add_option("--port", port, "listening port");
  serve_cmd->add_option("--host", host, "listening address");
  serve_cmd->add_option("--threads", threads, "connection worker threads")->check(CLI::PositiveNumber);

  // video
  std::string trail_path;
  auto* video_cmd = app.add_subcommand("video", "render a key-point trail to a frame sequence");
  video_cmd->add_option("ckpt", ckpt)->required()->check(CLI::ExistingFile);
  video_cmd->add_option("trail", trail_path)->required()->check(CLI::ExistingFile);
  video_cmd->add_option("out", out_dir)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth_cmd) {
      generate(synth::load_spec(spec_path), synth_seed, out_dir, png);
      std::cout << "wrote " << out_dir << '\n';
      return 0;
    }
    if (*validate_cmd) {
      const ValidationReport r = validate_dataset(data_dir);
      for (const auto& n : r.notes) std::cout << "note: " << n << '\n';
      for (const auto& e : r.errors) std::cerr << "error: " << e << '\n';
      std::cout << (r.ok ? "ok" : "invalid") << " (max track/flow residual " << r.max_track_flow_error
                << " px)\n";
      return r.ok ? 0 : 1;
    }
    if (*s1_cmd) {
      const Dataset data = load_dataset(data_dir);
      const TrainConfig cfg = s1_flags.resolve(1);
      TrainOutputs out(s1_flags.metrics, ckpt1, data);
      const Stage1Result r = train_stage1(data, cfg, field_config_for(data, 1, cfg.seed), out.sink);
      save_checkpoint(ckpt1, make_checkpoint(*r.model, data.cameras, data.far, data.background, {{"train", cfg}}));
      double total = 0.0;
      for (int t = 0; t < data.frames; ++t) total += psnr(r.renders[t].color, data.rgb[t]);
      std::cout << "stage 1 done, mean training PSNR " << total / data.frames << " dB\n";
      return 0;
    }
    if (*analyze_cmd) {
      const Dataset data = load_dataset(data_dir);
      const auto model = stage1_model(load_checkpoint(ckpt1));
      AnalysisConfig cfg;
      if (!analysis_config.empty()) cfg = read_json(analysis_config).get<AnalysisConfig>();
      const SurfaceMaps maps = surface_maps(*model, data, cfg.samples);
      const MapFlowSource flow(data);
      const AnalysisResult r = analyze(data, *model, maps.depth, flow, cfg);
      save_tracks(tracks_path, r.tracks);
      if (!grid_out.empty()) {
        write_json(grid_out, {{"nx", r.grid.spec.nx},
                              {"ny", r.grid.spec.ny},
                              {"variance", matrix_to_json(r.grid.variance_image())},
                              {"smoothed", matrix_to_json(r.grid.smoothed_image())}});
      }
      for (const ReferenceKeyPoint& k : r.references) {
        std::cout << "key point at (" << k.position.x() << ", " << k.position.y() << ") score " << k.score
                  << " reference frame " << k.frame << '\n';
      }
      return 0;
    }
    if (*train_cmd) {
      const Dataset data = load_dataset(data_dir);
      const auto s1 = stage1_model(load_checkpoint(ckpt1));
      const TrainConfig cfg = s2_flags.resolve(2);
      const SurfaceMaps maps = surface_maps(*s1, data, cfg.samples);
      const KeyPointSet init = to_keypoint_set(load_tracks(tracks_path));
      const KeypointSupervision sup = dataset_supervision(data, maps.depth, maps.opacity);
      TrainOutputs out(s2_flags.metrics, ckpt2, data);
      const auto model =
          train_stage2(data, sup, init, cfg, field_config_for(data, init.count, cfg.seed), out.sink);
      save_checkpoint(ckpt2, make_checkpoint(*model, data.cameras, data.far, data.background, {{"train", cfg}}));
      const EvalReport rep = evaluate_model(*model, data, cfg.samples);
      std::cout << "stage 2 done, mean training PSNR " << rep.mean_psnr << " dB\n";
      return 0;
    }
    if (*render_cmd) {
      const Checkpoint c = load_checkpoint(ckpt);
      const auto model = scene_model(c);
      EditRequest req;
      if (frame < 0 || frame >= model->config().frames) throw std::invalid_argument("frame out of range");
      req.base_frame = frame;
      req.camera = camera_json.empty() ? c.cameras.at(frame) : camera_from_json(json::parse(camera_json));
      if (!keypoints_json.empty()) req.keypoints = parse_keypoints(keypoints_json);
      req.samples = samples;
      const EditResult r = render_edit(*model, req, c.background);
      if (r.extrapolated) std::cerr << "warning: key points are far outside the trained range\n";
      if (fs::path(image_out).extension() == ".json") {
        Workbench wb(c);
        write_json(image_out, wb.render_payload(r));
      } else {
        write_png(image_out, {r.image.color});
      }
      return 0;
    }
    if (*eval_cmd) {
      const Dataset data = load_dataset(data_dir);
      const auto model = scene_model(load_checkpoint(ckpt));
      const EvalReport r = evaluate_model(*model, data, samples);
      std::cout << "frame  psnr_db\n";
      for (std::size_t t = 0; t < r.psnr.size(); ++t) std::cout << t << "  " << r.psnr[t] << '\n';
      std::cout << "mean PSNR " << r.mean_psnr << " dB\n";
      std::cout << "mean track error " << r.mean_track_error() << " px, within 2 px on "
                << 100.0 * r.fraction_within(2.0) << "% of visible frames\n";
      if (!eval_out.empty()) write_json(eval_out, r.to_json());
      return 0;
    }
    if (*serve_cmd) {
      Workbench wb(load_checkpoint(ckpt));
      Service svc(wb, threads);
      active_service = &svc;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      std::cout << "serving on http://" << host << ":" << port << std::endl;
      if (!svc.listen(host, port)) {
        std::cerr << "cannot listen on " << host << ":" << port << '\n';
        return 1;
      }
      return 0;
    }
    if (*video_cmd) {
      Workbench wb(load_checkpoint(ckpt));
      const json trail = read_json(trail_path);
      const Workbench::Response r = wb.video(trail.dump());
      if (r.status != 200) {
        std::cerr << r.body.value("error", std::string("video failed")) << '\n';
        return 1;
      }
      fs::create_directories(out_dir);
      const EditRequest base = wb.parse_edit(trail);
      int index = 0;
      for (const json& f : r.body["frames"]) {
        EditRequest req = base;
        req.keypoints = matrix_from_json(f["keypoints"]);
        const EditResult one = render_edit(wb.model(), req, wb.checkpoint().background);
        char name[32];
        std::snprintf(name, sizeof(name), "frame_%04d.png", index++);
        write_png(fs::path(out_dir) / name, {one.image.color});
      }
      write_json(fs::path(out_dir) / "frames.json", r.body);
      std::cout << "wrote " << index << " frames to " << out_dir << '\n';
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
