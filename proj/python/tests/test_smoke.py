import base64
import json
from pathlib import Path

import numpy as np
import pytest

import kpnerf

FIXTURES = Path(__file__).resolve().parents[2] / "fixtures"

TINY_TRAIN = {"rays_per_batch": 16, "samples": 16, "surface_refresh": 2, "reg_points": 8,
              "log_every": 0, "probe_every": 0}


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("slider")
    spec = json.loads((FIXTURES / "slider-1.json").read_text())
    spec["frames"] = 5
    spec["width"] = 20
    spec["parts"][0]["episodes"] = [{"start": 1, "end": 4, "offset": [0.2, 0.0]}]
    spec_path = root / "spec.json"
    spec_path.write_text(json.dumps(spec))
    out = root / "data"
    kpnerf.generate(spec_path, out, seed=3)
    return root, out


def gt_tracks_file(data_dir, path):
    gt = json.loads((data_dir / "gt_tracks.json").read_text())["keypoints"]
    tracks = []
    for tr in gt:
        n = len(tr["world"])
        tracks.append({"t_ref": 0, "k_ref": tr["world"][0], "score": 1.0, "pixel": tr["pixel"],
                       "world": tr["world"], "confidence": [1.0] * n,
                       "provenance": ["reference"] + ["frame-by-frame"] * (n - 1), "clamped": [False] * n})
    path.write_text(json.dumps({"version": 1, "keypoints": tracks}))
    return path


def test_generate_validate_and_load(small_dataset):
    _, data_dir = small_dataset
    ok, errors, residual = kpnerf.validate_dataset(data_dir)
    assert ok, errors
    assert residual < 0.5
    data = kpnerf.load_dataset(data_dir)
    assert data.frames == 5 and data.width == 20
    assert data.rgb[0].shape == (20, 3)
    assert len(data.cameras) == 5


def test_psnr_examples():
    a = np.zeros((4, 3))
    assert kpnerf.psnr(a, a) == 99.0
    assert kpnerf.psnr(a, a + 0.1) == pytest.approx(20.0)
    assert kpnerf.psnr(a, a + 0.01) == pytest.approx(40.0)


def test_editing_operations():
    a = np.zeros((1, 2))
    b = np.array([[2.0, 4.0]])
    np.testing.assert_allclose(kpnerf.interpolate_keypoints(a, b, 0.5), [[1.0, 2.0]])
    square = [np.array(p, dtype=float) for p in [(0, 0), (1, 0), (1, 1), (0, 1)]]
    moved = [p + np.array([0.5, -1.0]) for p in square]
    out = kpnerf.motion_transfer([np.array([0.3, 0.3])], square, moved)
    np.testing.assert_allclose(out[0], [0.8, -0.7], atol=1e-12)
    line = [np.array([t, t], dtype=float) for t in range(4)]
    with pytest.raises(ValueError):
        kpnerf.fit_affine(line, line)


def test_pipeline_checkpoint_and_service(small_dataset):
    root, data_dir = small_dataset
    data = kpnerf.load_dataset(data_dir)
    s1 = root / "s1.ckpt"
    kpnerf.train_stage1(data, json.dumps(dict(TINY_TRAIN, stage1_steps=3)), s1)
    assert s1.exists()

    tracks = gt_tracks_file(data_dir, root / "tracks.json")
    s2 = root / "s2.ckpt"
    kpnerf.train_stage2(data, s1, tracks, json.dumps(dict(TINY_TRAIN, stage2_steps=3)), s2)
    model = kpnerf.load_scene_model(s2)
    assert model.num_keypoints == 1

    out = kpnerf.render(model, data.cameras[0], base_frame=0, samples=16)
    assert out["color"].shape == (20, 3)
    again = kpnerf.render(model, data.cameras[0], base_frame=0, keypoints=model.keypoints(0), samples=16)
    assert np.array_equal(out["color"], again["color"])

    report = json.loads(kpnerf.evaluate(model, data, samples=16))
    assert len(report["psnr"]) == 5

    bench = kpnerf.Workbench(s2)
    state = bench.state()
    assert state["status"] == 200
    body = json.loads(state["body"])
    assert body["N"] == 1 and body["D"] == 2 and body["T"] == 5

    request = {"camera_preset": 0, "base_frame": 0, "samples": 16}
    reply = bench.render(json.dumps(request))
    assert reply["status"] == 200
    image = np.frombuffer(base64.b64decode(json.loads(reply["body"])["image"]), dtype="<f8").reshape(20, 3)
    assert np.array_equal(image, out["color"])

    assert bench.render("{broken")["status"] == 400
    assert bench.keypoints("-1")["status"] == 400
