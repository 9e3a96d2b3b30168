import os

import numpy as np
import pytest

import codedlf.autodiff as ad
from codedlf import coding
from codedlf.lightfield import LayerSpec, MaskSpec, SceneSpec, synth_lightfield
from codedlf.models import FeatNetConfig, NeRFNetConfig, featnet_forward
from codedlf.rendering import RenderConfig, render_rays, render_view
from codedlf.training import (Checkpoint, RayBatch, TrainConfig, TrainError,
                              CheckpointError, checkpoint_feature_volume,
                              load_checkpoint, materialize_fields, resolve_pattern,
                              sample_ray_batch, save_checkpoint, train, train_step)

SCENE = SceneSpec(layers=(
    LayerSpec(disparity=1.0, texture="noise", seed=1, mask=MaskSpec("full", 0)),
    LayerSpec(disparity=-1.0, texture="checker", seed=2, mask=MaskSpec("disk", 3)),
))


def tiny_config(**kw):
    base = dict(
        scenes=[SCENE],
        epochs=2,
        rays_per_batch=32,
        patch_h=12, patch_w=12,
        scene_height=16, scene_width=16,
        grid_u=3, grid_v=3,
        seed=0,
        render=RenderConfig(n_train_samples=4, n_test_samples=8),
        featnet=FeatNetConfig(hidden_channels=6, n_blocks=1, depth_levels=4,
                              feature_channels=3),
        nerfnet=NeRFNetConfig(hidden_layers=2, hidden_width=16, feature_channels=3),
        pattern_k=2, pattern_tile=3,
    )
    base.update(kw)
    return TrainConfig(**base)


def test_config_validation():
    with pytest.raises(TrainError):
        tiny_config(epochs=0).validate()
    with pytest.raises(TrainError):
        tiny_config(input_mode="banana").validate()
    with pytest.raises(TrainError):
        tiny_config(scenes=[]).validate()
    with pytest.raises(TrainError):
        tiny_config(patch_h=99).validate()


def test_config_json_roundtrip():
    cfg = tiny_config()
    back = TrainConfig.from_json_dict(cfg.to_json_dict())
    assert back == cfg


def test_loss_nonnegative_and_decreases_on_overfit():
    cfg = tiny_config(epochs=40)
    ckpt = train(cfg)
    losses = [row[1] for row in ckpt.meta["loss_history"]]
    assert all(l >= 0 for l in losses)
    assert np.mean(losses[-5:]) < np.mean(losses[:5])


def _deterministic_columns(history):
    return [(step, loss, lr) for step, loss, lr, _wall_ms in history]


def test_two_runs_same_seed_identical_loss_sequence():
    cfg = tiny_config(epochs=10)
    a = train(cfg)
    b = train(cfg)
    assert _deterministic_columns(a.meta["loss_history"]) == \
        _deterministic_columns(b.meta["loss_history"])
    for name in a.params:
        assert np.array_equal(a.params[name], b.params[name])


def test_loss_is_mean_of_squared_ray_errors():
    cfg = tiny_config()
    lf = materialize_fields(cfg)[0]
    pattern = resolve_pattern(cfg)
    patch_lf = lf
    image = coding.normalize(coding.encode(
        type(lf)(views=lf.views[:, :, :12, :12].copy(),
                 center_index=lf.center_index), cfg.input_mode, pattern))
    rng = np.random.default_rng(5)
    rays = np.array([[0.0, 0.0, 2.0, 3.0], [1.0, -1.0, 4.0, 1.0], [0.0, 1.0, 0.0, 0.0]])
    targets = np.array([0.25, 0.5, 0.75])
    from codedlf.models import init_params
    store = init_params(cfg.featnet, cfg.nerfnet, seed=0, dtype=np.float32)

    # render the same rays with an identical rng to get the per-ray values
    probe = np.random.default_rng(17)
    with ad.no_grad():
        vol = featnet_forward(store, cfg.featnet, image.astype(np.float32))
        rb = render_rays(vol, store, cfg.nerfnet, rays, 12, 12, cfg.render,
                         mode="train", rng=np.random.default_rng(17))
    hand = float(np.mean((rb.ray_luminance.data - targets.astype(np.float32)) ** 2))
    loss = train_step(store, cfg, RayBatch(image, rays, targets),
                      np.random.default_rng(17), lr=0.0)
    assert loss == pytest.approx(hand, rel=1e-6)


def test_train_step_rejects_fractional_target_viewpoints():
    cfg = tiny_config()
    image = np.zeros((12, 12))
    rays = np.array([[0.5, 0.0, 1.0, 1.0]])
    from codedlf.models import init_params
    store = init_params(cfg.featnet, cfg.nerfnet, seed=0, dtype=np.float32)
    with pytest.raises(TrainError):
        train_step(store, cfg, RayBatch(image, rays, np.array([0.5])),
                   np.random.default_rng(0), lr=1e-3)


def test_center_mode_trains_without_pattern():
    cfg = tiny_config(input_mode="center", epochs=1)
    assert resolve_pattern(cfg) is None
    ckpt = train(cfg)
    assert ckpt.pattern is None
    assert ckpt.input_mode == "center"


def test_resume_continues_exact_trajectory(tmp_path):
    # an interrupted run resumed from its periodic snapshot with the same
    # config reproduces the uninterrupted trajectory exactly
    full = train(tiny_config(epochs=6, checkpoint_every=3), out_dir=str(tmp_path))
    snapshot = os.path.join(str(tmp_path), "ckpt_epoch0003.ckpt")
    resumed = train(tiny_config(epochs=6), resume_from=snapshot)
    assert _deterministic_columns(resumed.meta["loss_history"]) == \
        _deterministic_columns(full.meta["loss_history"])
    for name in full.params:
        assert np.array_equal(resumed.params[name], full.params[name])
    # the spec's weaker bound: first resumed loss within 2x of the last saved
    n_saved = 3 * len(tiny_config().scenes)
    last_saved = full.meta["loss_history"][n_saved - 1][1]
    first_resumed = resumed.meta["loss_history"][n_saved][1]
    assert first_resumed < 2 * max(last_saved, 1e-9)


def test_resume_beyond_config_epochs_rejected(tmp_path):
    train(tiny_config(epochs=2), out_dir=str(tmp_path))
    with pytest.raises(TrainError):
        train(tiny_config(epochs=2), resume_from=str(tmp_path / "final.ckpt"))


def test_unreadable_dataset_entry_names_path():
    cfg = tiny_config(scenes=["/nonexistent/lf_dir"])
    with pytest.raises(TrainError, match="/nonexistent/lf_dir"):
        materialize_fields(cfg)


def test_lightfield_path_entries_supported(tmp_path):
    from codedlf.lightfield import save_lightfield
    lf = synth_lightfield(SCENE, 3, 3, 16, 16)
    save_lightfield(lf, str(tmp_path / "lf"))
    cfg = tiny_config(scenes=[str(tmp_path / "lf")], epochs=1)
    fields = materialize_fields(cfg)
    assert np.allclose(fields[0].views, lf.views, atol=2e-5)   # 16-bit quantization


# ---------------------------------------------------------------------------
# checkpoints

def test_checkpoint_roundtrip_bit_exact(tmp_path):
    ckpt = train(tiny_config(epochs=1))
    path = str(tmp_path / "a.ckpt")
    save_checkpoint(ckpt, path)
    back = load_checkpoint(path)
    assert back.params.keys() == ckpt.params.keys()
    for name in ckpt.params:
        assert np.array_equal(back.params[name], ckpt.params[name])
        assert back.params[name].dtype == ckpt.params[name].dtype
        assert np.array_equal(back.adam_m[name], ckpt.adam_m[name])
        assert np.array_equal(back.adam_v[name], ckpt.adam_v[name])
    assert back.adam_step_count == ckpt.adam_step_count
    assert back.meta == ckpt.meta
    assert np.array_equal(back.pattern.aperture, ckpt.pattern.aperture)


def test_render_identical_after_roundtrip(tmp_path):
    cfg = tiny_config(epochs=1)
    ckpt = train(cfg)
    path = str(tmp_path / "a.ckpt")
    save_checkpoint(ckpt, path)
    back = load_checkpoint(path)
    lf = materialize_fields(cfg)[0]
    pattern = ckpt.pattern.with_size(16, 16)
    image = coding.normalize(coding.encode(lf, "joint", pattern)).astype(np.float32)
    vol_a, store_a = checkpoint_feature_volume(ckpt, image)
    vol_b, store_b = checkpoint_feature_volume(back, image)
    img_a, dep_a = render_view(vol_a, store_a, cfg.nerfnet, (0.5, -0.5), 16, 16, cfg.render)
    img_b, dep_b = render_view(vol_b, store_b, cfg.nerfnet, (0.5, -0.5), 16, 16, cfg.render)
    assert np.array_equal(img_a, img_b)
    assert np.array_equal(dep_a, dep_b)


def test_truncated_checkpoint_rejected(tmp_path):
    ckpt = train(tiny_config(epochs=1))
    path = str(tmp_path / "a.ckpt")
    save_checkpoint(ckpt, path)
    raw = open(path, "rb").read()
    open(path, "wb").write(raw[:len(raw) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_bad_magic_rejected(tmp_path):
    path = str(tmp_path / "a.ckpt")
    open(path, "wb").write(b"NOTACKPT" + b"\0" * 64)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_periodic_checkpoints_written(tmp_path):
    train(tiny_config(epochs=4, checkpoint_every=2), out_dir=str(tmp_path))
    names = sorted(os.listdir(tmp_path))
    assert "ckpt_epoch0002.ckpt" in names
    assert "ckpt_epoch0004.ckpt" in names
    assert "final.ckpt" in names


def test_sample_ray_batch_targets_match_views():
    lf = synth_lightfield(SCENE, 3, 3, 16, 16)
    rays, targets = sample_ray_batch(lf, 200, np.random.default_rng(0))
    u0, v0 = lf.center_index
    for (ut, vt, x, y), tgt in zip(rays, targets):
        assert float(ut).is_integer() and float(vt).is_integer()
        assert lf.views[int(ut) + u0, int(vt) + v0, int(y), int(x)] == tgt
