import http.client
import json
import os
import threading

import numpy as np
import pytest

from codedlf.cli import main
from codedlf.imgfile import (CODED_MAGIC, DEPTH_MAGIC, FileFormatError, read_f32_map,
                             read_gray_png, write_f32_map)
from codedlf.lightfield import (LayerSpec, MaskSpec, SceneSpec, save_scene_spec)
from codedlf.models import FeatNetConfig, NeRFNetConfig
from codedlf.rendering import RenderConfig
from codedlf.training import TrainConfig, load_checkpoint, train

SCENE = SceneSpec(layers=(
    LayerSpec(disparity=1.0, texture="noise", seed=1, mask=MaskSpec("full", 0)),
    LayerSpec(disparity=-1.0, texture="checker", seed=2, mask=MaskSpec("disk", 3)),
))


def tiny_train_config_dict():
    cfg = TrainConfig(
        scenes=[SCENE], epochs=2, rays_per_batch=32, patch_h=12, patch_w=12,
        scene_height=16, scene_width=16, grid_u=3, grid_v=3, seed=0,
        render=RenderConfig(n_train_samples=4, n_test_samples=8),
        featnet=FeatNetConfig(hidden_channels=6, n_blocks=1, depth_levels=4,
                              feature_channels=3),
        nerfnet=NeRFNetConfig(hidden_layers=2, hidden_width=16, feature_channels=3),
        pattern_k=2, pattern_tile=3)
    return cfg.to_json_dict()


@pytest.fixture
def scene_file(tmp_path):
    path = str(tmp_path / "scene.json")
    save_scene_spec(SCENE, path)
    return path


def _first_stdout_line(capsys):
    return capsys.readouterr().out.splitlines()[0]


# ---------------------------------------------------------------------------
# synth / pattern / encode

def test_synth_writes_loadable_lightfield(tmp_path, scene_file, capsys):
    out = str(tmp_path / "lf")
    rc = main(["synth", "--spec", scene_file, "--out", out,
               "--grid", "3", "3", "--size", "16", "16"])
    assert rc == 0
    line = _first_stdout_line(capsys)
    assert json.loads(line)["effective_config"]["command"] == "synth"
    from codedlf.lightfield import load_lightfield, synth_lightfield
    back = load_lightfield(out)
    assert back.grid == (3, 3)
    ref = synth_lightfield(SCENE, 3, 3, 16, 16)
    assert np.allclose(back.views, ref.views, atol=2e-5)


def test_synth_bad_spec_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"layers": []}))
    rc = main(["synth", "--spec", str(bad), "--out", str(tmp_path / "o")])
    assert rc == 2
    err = capsys.readouterr().err
    assert json.loads(err.splitlines()[-1])["kind"] == "config"


def test_encode_uncoded_constant_field(tmp_path, capsys):
    from codedlf.lightfield import LightField, save_lightfield
    lf_dir = str(tmp_path / "lf")
    save_lightfield(LightField(views=np.full((3, 3, 12, 12), 0.5)), lf_dir)
    out = str(tmp_path / "coded.png")
    rc = main(["encode", "--lf", lf_dir, "--mode", "uncoded", "--out", out])
    assert rc == 0
    sidecar = read_f32_map(str(tmp_path / "coded.f32"), CODED_MAGIC)
    assert np.allclose(sidecar, sidecar[0, 0])
    arr, depth = read_gray_png(out)
    assert depth == 16 and np.all(arr == arr[0, 0])


def test_encode_joint_requires_pattern(tmp_path, capsys):
    from codedlf.lightfield import LightField, save_lightfield
    lf_dir = str(tmp_path / "lf")
    save_lightfield(LightField(views=np.full((3, 3, 12, 12), 0.5)), lf_dir)
    rc = main(["encode", "--lf", lf_dir, "--mode", "joint",
               "--out", str(tmp_path / "c.png")])
    assert rc == 2


def test_encode_matches_library_call(tmp_path):
    from codedlf import coding
    from codedlf.lightfield import synth_lightfield, save_lightfield
    lf = synth_lightfield(SCENE, 3, 3, 16, 16)
    lf_dir = str(tmp_path / "lf")
    save_lightfield(lf, lf_dir)
    pat_path = str(tmp_path / "pat.json")
    assert main(["pattern", "--out", pat_path, "--k", "2", "--grid", "3", "3",
                 "--size", "16", "16", "--tile", "3", "--seed", "0"]) == 0
    out = str(tmp_path / "coded.png")
    assert main(["encode", "--lf", lf_dir, "--mode", "joint",
                 "--pattern", pat_path, "--out", out]) == 0
    from codedlf.lightfield import load_lightfield
    expected = coding.normalize(coding.encode_joint(
        load_lightfield(lf_dir), coding.load_pattern(pat_path).with_size(16, 16)))
    sidecar = read_f32_map(str(tmp_path / "coded.f32"), CODED_MAGIC)
    assert np.array_equal(sidecar, expected.astype(np.float32))


# ---------------------------------------------------------------------------
# train / render / eval

def test_train_epochs_zero_rejected(tmp_path, capsys):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(tiny_train_config_dict()))
    rc = main(["train", "--config", str(cfg_path), "--out", str(tmp_path / "run"),
               "--override", "epochs=0"])
    assert rc == 2


def test_train_writes_checkpoint_and_losslog(tmp_path, capsys):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(tiny_train_config_dict()))
    out_dir = str(tmp_path / "run")
    rc = main(["train", "--config", str(cfg_path), "--out", out_dir])
    assert rc == 0
    assert os.path.exists(os.path.join(out_dir, "final.ckpt"))
    log_lines = open(os.path.join(out_dir, "losslog.csv")).read().splitlines()
    assert log_lines[0] == "step,loss,lr,wall_ms"
    assert len(log_lines) == 3   # 2 epochs x 1 scene
    out = capsys.readouterr().out.splitlines()
    assert json.loads(out[0])["effective_config"]["command"] == "train"
    assert json.loads(out[-1])["event"] == "trained"


def test_train_resume_flag_continues(tmp_path):
    cfg = tiny_train_config_dict()
    cfg["epochs"] = 4
    cfg["checkpoint_every"] = 2
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))
    full_dir = str(tmp_path / "full")
    assert main(["train", "--config", str(cfg_path), "--out", full_dir]) == 0
    resumed_dir = str(tmp_path / "resumed")
    rc = main(["train", "--config", str(cfg_path), "--out", resumed_dir,
               "--resume", os.path.join(full_dir, "ckpt_epoch0002.ckpt")])
    assert rc == 0
    full_log = open(os.path.join(full_dir, "losslog.csv")).read().splitlines()
    resumed_log = open(os.path.join(resumed_dir, "losslog.csv")).read().splitlines()
    strip = lambda lines: [",".join(l.split(",")[:3]) for l in lines[1:]]
    assert strip(resumed_log) == strip(full_log)


def test_render_continuous_viewpoint_matches_library(tmp_path, capsys):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(tiny_train_config_dict()))
    out_dir = str(tmp_path / "run")
    assert main(["train", "--config", str(cfg_path), "--out", out_dir]) == 0
    ckpt_path = os.path.join(out_dir, "final.ckpt")

    from codedlf.lightfield import synth_lightfield, save_lightfield
    lf_dir = str(tmp_path / "lf")
    save_lightfield(synth_lightfield(SCENE, 3, 3, 16, 16), lf_dir)

    out_png = str(tmp_path / "view.png")
    depth_png = str(tmp_path / "depth.png")
    rc = main(["render", "--ckpt", ckpt_path, "--lf", lf_dir, "--u", "1.5",
               "--v", "-0.25", "--out", out_png, "--depth", depth_png])
    assert rc == 0
    assert os.path.exists(out_png) and os.path.exists(depth_png)
    depth_raw = read_f32_map(depth_png + ".lfdm", DEPTH_MAGIC)

    from codedlf import coding
    from codedlf.lightfield import load_lightfield
    from codedlf.rendering import render_view
    from codedlf.training import checkpoint_feature_volume
    ckpt = load_checkpoint(ckpt_path)
    image = coding.normalize(coding.encode(load_lightfield(lf_dir), "joint",
                                           ckpt.pattern.with_size(16, 16)))
    vol, store = checkpoint_feature_volume(ckpt, image.astype(np.float32))
    img, depth = render_view(vol, store, ckpt.nerfnet, (1.5, -0.25), 16, 16,
                             ckpt.render)
    arr, _ = read_gray_png(out_png)
    assert np.array_equal(arr, np.round(np.clip(img, 0, 1) * 65535).astype(np.uint16))
    assert np.array_equal(depth_raw, depth.astype(np.float32))


def test_eval_missing_checkpoint_exits_2(tmp_path, scene_file):
    rc = main(["eval", "--ckpt", str(tmp_path / "nope.ckpt"), "--scene", scene_file,
               "--out", str(tmp_path / "r.json")])
    assert rc == 2


def test_eval_writes_report_and_heatmap(tmp_path, scene_file):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(tiny_train_config_dict()))
    out_dir = str(tmp_path / "run")
    assert main(["train", "--config", str(cfg_path), "--out", out_dir]) == 0
    report_path = str(tmp_path / "report.json")
    heat_path = str(tmp_path / "heat.png")
    rc = main(["eval", "--ckpt", os.path.join(out_dir, "final.ckpt"),
               "--scene", scene_file, "--grid", "3", "--step", "0.5",
               "--size", "16", "16", "--out", report_path, "--heatmap", heat_path])
    assert rc == 0
    from codedlf.evaluation import EvalReport
    report = EvalReport.load(report_path)
    assert report.m == 3
    assert os.path.exists(heat_path)


def test_gradcheck_plumbing(monkeypatch, capsys):
    import codedlf.checks
    monkeypatch.setattr(codedlf.checks, "run_gradcheck_suite",
                        lambda seed, eps: {"ops": {"add": 1e-9}, "pipeline": 1e-6,
                                           "worst_op": "add", "worst_op_error": 1e-9,
                                           "op_tolerance": 1e-6,
                                           "pipeline_tolerance": 1e-4, "passed": True})
    assert main(["gradcheck", "--json"]) == 0
    line = capsys.readouterr().out.splitlines()[-1]
    assert json.loads(line)["passed"] is True

    monkeypatch.setattr(codedlf.checks, "run_gradcheck_suite",
                        lambda seed, eps: {"ops": {"add": 1e-2}, "pipeline": 1e-6,
                                           "worst_op": "add", "worst_op_error": 1e-2,
                                           "op_tolerance": 1e-6,
                                           "pipeline_tolerance": 1e-4, "passed": False})
    assert main(["gradcheck"]) != 0


def test_corrupted_backward_detected():
    from codedlf.checks import pipeline_check, PIPELINE_TOLERANCE
    assert pipeline_check(seed=0, corrupt=True) > PIPELINE_TOLERANCE


# ---------------------------------------------------------------------------
# raw f32 maps

def test_f32_map_roundtrip(tmp_path):
    arr = np.random.default_rng(0).random((5, 7)).astype(np.float32)
    path = str(tmp_path / "m.f32")
    write_f32_map(path, arr, DEPTH_MAGIC)
    back = read_f32_map(path, DEPTH_MAGIC)
    assert np.array_equal(back, arr)
    with pytest.raises(FileFormatError):
        read_f32_map(path, CODED_MAGIC)


def test_f32_truncated_rejected(tmp_path):
    path = str(tmp_path / "m.f32")
    write_f32_map(path, np.zeros((4, 4), dtype=np.float32), DEPTH_MAGIC)
    raw = open(path, "rb").read()
    open(path, "wb").write(raw[:20])
    with pytest.raises(FileFormatError):
        read_f32_map(path, DEPTH_MAGIC)


# ---------------------------------------------------------------------------
# serve

@pytest.fixture(scope="module")
def live_server(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("serve")
    cfg = TrainConfig(
        scenes=[SCENE], epochs=2, rays_per_batch=32, patch_h=12, patch_w=12,
        scene_height=16, scene_width=16, grid_u=3, grid_v=3, seed=0,
        render=RenderConfig(n_train_samples=4, n_test_samples=8),
        featnet=FeatNetConfig(hidden_channels=6, n_blocks=1, depth_levels=4,
                              feature_channels=3),
        nerfnet=NeRFNetConfig(hidden_layers=2, hidden_width=16, feature_channels=3),
        pattern_k=2, pattern_tile=3)
    ckpt = train(cfg)
    from codedlf import coding
    from codedlf.lightfield import synth_lightfield
    from codedlf.server import RenderService, make_server
    lf = synth_lightfield(SCENE, 3, 3, 16, 16)
    image = coding.normalize(coding.encode_joint(lf, ckpt.pattern.with_size(16, 16)))
    web_dir = tmp / "web"
    web_dir.mkdir()
    (web_dir / "index.html").write_text("<html>viewer</html>")
    service = RenderService(ckpt, image)
    httpd = make_server(service, port=0, web_dir=str(web_dir))
    thread = threading.Thread(target=httpd.serve_forever, daemon=True)
    thread.start()
    yield service, httpd.server_address[1]
    httpd.shutdown()


def _get(port, path):
    conn = http.client.HTTPConnection("127.0.0.1", port, timeout=10)
    conn.request("GET", path)
    resp = conn.getresponse()
    body = resp.read()
    conn.close()
    return resp.status, resp.getheader("Content-Type"), body


def test_info_endpoint(live_server):
    service, port = live_server
    status, ctype, body = _get(port, "/api/info")
    assert status == 200 and ctype == "application/json"
    doc = json.loads(body)
    assert doc["H"] == 16 and doc["W"] == 16
    assert doc["t_min"] == -3.0 and doc["t_max"] == 3.0
    assert doc["u_range"] == [-3.0, 3.0] and doc["v_range"] == [-3.0, 3.0]


def test_render_endpoint_deterministic_bytes(live_server):
    service, port = live_server
    s1, c1, b1 = _get(port, "/api/render?u=0&v=0")
    s2, _, b2 = _get(port, "/api/render?u=0&v=0")
    assert s1 == s2 == 200 and c1 == "image/png"
    assert b1 == b2
    assert b1[:8] == b"\x89PNG\r\n\x1a\n"


def test_depth_parameter_changes_body(live_server):
    service, port = live_server
    _, _, lum = _get(port, "/api/render?u=0.5&v=-0.5")
    _, _, dep = _get(port, "/api/render?u=0.5&v=-0.5&depth=1")
    assert lum != dep


def test_bad_viewpoint_is_400(live_server):
    service, port = live_server
    assert _get(port, "/api/render?u=abc&v=0")[0] == 400
    assert _get(port, "/api/render?u=nan&v=0")[0] == 400
    assert _get(port, "/api/render?v=0")[0] == 400


def test_unknown_route_is_404(live_server):
    service, port = live_server
    assert _get(port, "/api/nope")[0] == 404


def test_static_assets_served(live_server):
    service, port = live_server
    status, ctype, body = _get(port, "/")
    assert status == 200 and ctype == "text/html" and b"viewer" in body


def test_feature_volume_computed_once(live_server):
    service, port = live_server
    for q in ("/api/render?u=1&v=1", "/api/render?u=-1&v=0.25",
              "/api/render?u=1&v=1&depth=1"):
        assert _get(port, q)[0] == 200
    assert service.featnet_calls == 1
