#include "kpnerf/dataset.hpp"
#include "kpnerf/kpanalysis.hpp"
#include "kpnerf/training.hpp"
#include "kpnerf/workbench.hpp"

#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

namespace py = pybind11;
using namespace kpnerf;
using nlohmann::json;

namespace {

// Configs cross the boundary as JSON text so Python sees the same keys as the CLI.
template <class T>
T from_text(const std::string& text) {
  return text.empty() ? T{} : json::parse(text).get<T>();
}

py::dict response(const Workbench::Response& r) {
  py::dict d;
  d["status"] = r.status;
  d["body"] = r.body.dump();
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Key-point editable radiance fields in flatland";

  py::register_exception<CheckpointError>(m, "CheckpointError", PyExc_RuntimeError);
  py::register_exception<AnalysisError>(m, "AnalysisError", PyExc_RuntimeError);
  py::register_exception<TrainingDiverged>(m, "TrainingDiverged", PyExc_RuntimeError);

  py::class_<Camera>(m, "Camera")
      .def(py::init<>())
      .def_readwrite("origin", &Camera::origin)
      .def_readwrite("angle", &Camera::angle)
      .def_readwrite("focal", &Camera::focal)
      .def_readwrite("principal", &Camera::principal)
      .def_readwrite("width", &Camera::width)
      .def_readwrite("near", &Camera::near)
      .def_readwrite("far", &Camera::far)
      .def("project", [](const Camera& c, const Vec2& x) {
        const Projection p = c.project(x);
        return py::make_tuple(p.u, p.depth, p.in_front);
      })
      .def("lift", &Camera::lift)
      .def("to_json", [](const Camera& c) { return camera_to_json(c).dump(); })
      .def_static("from_json", [](const std::string& s) { return camera_from_json(json::parse(s)); });

  py::class_<Dataset>(m, "Dataset")
      .def_readonly("frames", &Dataset::frames)
      .def_readonly("width", &Dataset::width)
      .def_readonly("near", &Dataset::near)
      .def_readonly("far", &Dataset::far)
      .def_readonly("cameras", &Dataset::cameras)
      .def_readonly("rgb", &Dataset::rgb)
      .def_readonly("depth", &Dataset::depth)
      .def_readonly("flow_fw", &Dataset::flow_fw)
      .def_readonly("part_names", &Dataset::part_names);

  m.def("generate", [](const std::filesystem::path& spec, const std::filesystem::path& out, std::uint64_t seed) {
    generate(synth::load_spec(spec), seed, out);
  }, py::arg("spec"), py::arg("out"), py::arg("seed") = 1);
  m.def("load_dataset", &load_dataset);
  m.def("validate_dataset", [](const std::filesystem::path& dir) {
    const ValidationReport r = validate_dataset(dir);
    return py::make_tuple(r.ok, r.errors, r.max_track_flow_error);
  });
  m.def("psnr", &psnr);

  py::class_<Stage1Model>(m, "Stage1Model");
  py::class_<SceneModel>(m, "SceneModel")
      .def("keypoints", &SceneModel::keypoints)
      .def_property_readonly("num_keypoints", [](const SceneModel& s) { return s.config().keypoints; })
      .def_property_readonly("frames", [](const SceneModel& s) { return s.config().frames; })
      .def("weights_at", &SceneModel::weights_at);

  m.def("train_stage1", [](const Dataset& data, const std::string& config, const std::filesystem::path& ckpt) {
    const TrainConfig cfg = from_text<TrainConfig>(config);
    py::gil_scoped_release release;
    const Stage1Result r = train_stage1(data, cfg, field_config_for(data, 1, cfg.seed));
    save_checkpoint(ckpt, make_checkpoint(*r.model, data.cameras, data.far, data.background));
  }, py::arg("data"), py::arg("config"), py::arg("ckpt"));

  m.def("analyze", [](const Dataset& data, const std::filesystem::path& ckpt, const std::string& config,
                      const std::filesystem::path& tracks) {
    const AnalysisConfig cfg = from_text<AnalysisConfig>(config);
    const auto model = stage1_model(load_checkpoint(ckpt));
    const SurfaceMaps maps = surface_maps(*model, data, cfg.samples);
    const AnalysisResult r = analyze(data, *model, maps.depth, MapFlowSource(data), cfg);
    save_tracks(tracks, r.tracks);
    std::vector<Vec2> refs;
    for (const auto& k : r.references) refs.push_back(k.position);
    return refs;
  }, py::arg("data"), py::arg("stage1_ckpt"), py::arg("config") = "", py::arg("tracks"));

  m.def("train_stage2", [](const Dataset& data, const std::filesystem::path& stage1_ckpt,
                           const std::filesystem::path& tracks, const std::string& config,
                           const std::filesystem::path& ckpt) {
    const TrainConfig cfg = from_text<TrainConfig>(config);
    py::gil_scoped_release release;
    const auto s1 = stage1_model(load_checkpoint(stage1_ckpt));
    const SurfaceMaps maps = surface_maps(*s1, data, cfg.samples);
    const KeyPointSet init = to_keypoint_set(load_tracks(tracks));
    const auto model = train_stage2(data, dataset_supervision(data, maps.depth, maps.opacity), init, cfg,
                                    field_config_for(data, init.count, cfg.seed));
    save_checkpoint(ckpt, make_checkpoint(*model, data.cameras, data.far, data.background));
  }, py::arg("data"), py::arg("stage1_ckpt"), py::arg("tracks"), py::arg("config"), py::arg("ckpt"));

  m.def("load_scene_model", [](const std::filesystem::path& p) { return scene_model(load_checkpoint(p)); });

  m.def("render", [](const SceneModel& model, const Camera& cam, int base_frame, std::optional<Matrix> keypoints,
                     int samples) {
    EditRequest req;
    req.camera = cam;
    req.base_frame = base_frame;
    req.keypoints = std::move(keypoints);
    req.samples = samples;
    const EditResult r = render_edit(model, req, Eigen::Vector3d::Ones());
    py::dict d;
    d["color"] = r.image.color;
    d["depth"] = r.image.depth;
    d["opacity"] = r.image.opacity;
    d["density"] = r.density;
    d["extrapolated"] = r.extrapolated;
    return d;
  }, py::arg("model"), py::arg("camera"), py::arg("base_frame") = -1, py::arg("keypoints") = py::none(),
     py::arg("samples") = 64);

  m.def("default_depth", [](const SceneModel& model, double u, const Camera& cam, int k) {
    return default_depth(u, cam, model.keypoint_set(), k);
  }, py::arg("model"), py::arg("u"), py::arg("camera"), py::arg("k") = 4);
  m.def("interpolate_keypoints", &interpolate_keypoints);
  m.def("motion_transfer", &motion_transfer, py::arg("track"), py::arg("anchors_source"), py::arg("anchors_target"));
  m.def("fit_affine", [](const std::vector<Vec2>& src, const std::vector<Vec2>& dst) {
    const Affine2 f = fit_affine(src, dst);
    return py::make_tuple(Eigen::Matrix2d(f.linear), Vec2(f.offset));
  });
  m.def("evaluate", [](const SceneModel& model, const Dataset& data, int samples) {
    return evaluate_model(model, data, samples).to_json().dump();
  }, py::arg("model"), py::arg("data"), py::arg("samples") = 64);

  py::class_<Workbench>(m, "Workbench")
      .def(py::init([](const std::filesystem::path& ckpt) { return std::make_unique<Workbench>(load_checkpoint(ckpt)); }))
      .def("state", [](const Workbench& w) { return response(w.state()); })
      .def("keypoints", [](const Workbench& w, const std::string& frame) { return response(w.keypoints(frame)); })
      .def("render", [](Workbench& w, const std::string& body) { return response(w.render(body)); })
      .def("default_depth", [](const Workbench& w, const std::string& body) { return response(w.default_depth(body)); })
      .def("video", [](Workbench& w, const std::string& body) { return response(w.video(body)); });
}
