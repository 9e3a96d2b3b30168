"""End-to-end optimization of FeatNet + NeRFNet from coded observations.

Each step: extract a random patch from one training field, form the coded
observation for the configured input mode, run FeatNet once, render a
batch of rays at integer target viewpoints with stratified t samples, take
the MSE against the ground-truth view samples, and apply one Adam update.
Per-epoch RNG streams make a resumed run continue the exact trajectory of
an uninterrupted one when resuming at an epoch boundary.
"""

from __future__ import annotations

import json
import os
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import coding
from .autodiff import ParamStore
from .coding import CodingPattern
from .lightfield import LightField, SceneSpec, extract_patch, load_lightfield, synth_lightfield
from .models import FeatNetConfig, NeRFNetConfig, featnet_forward, init_params
from .rendering import RenderConfig, render_rays

CHECKPOINT_MAGIC = b"CLFCKPT1"

INPUT_MODES = ("joint", "uncoded", "center")

_DTYPES = {"float32": np.float32, "float64": np.float64}


class TrainError(Exception):
    pass


class CheckpointError(Exception):
    pass


@dataclass
class TrainConfig:
    scenes: list                      # SceneSpec entries or light-field dir paths
    epochs: int = 30
    rays_per_batch: int = 1024
    patch_h: int = 48
    patch_w: int = 48
    batches_per_scene: int = 1
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_decay_milestones: tuple = (0.6, 0.85)
    lr_decay_factor: float = 0.5
    seed: int = 0
    scene_height: int = 64
    scene_width: int = 64
    grid_u: int = 5
    grid_v: int = 5
    input_mode: str = "joint"
    pattern_k: int = 4
    pattern_tile: int = 4
    pattern_path: str | None = None
    render: RenderConfig = field(default_factory=RenderConfig)
    featnet: FeatNetConfig = field(default_factory=FeatNetConfig)
    nerfnet: NeRFNetConfig = field(default_factory=NeRFNetConfig)
    dtype: str = "float32"
    checkpoint_every: int = 0         # epochs between periodic saves; 0 = only final

    def validate(self) -> None:
        if self.epochs < 1:
            raise TrainError(f"epochs must be >= 1, got {self.epochs}")
        if self.rays_per_batch < 1:
            raise TrainError("rays_per_batch must be >= 1")
        if self.input_mode not in INPUT_MODES:
            raise TrainError(f"input mode must be one of {INPUT_MODES}, got {self.input_mode!r}")
        if not self.scenes:
            raise TrainError("dataset manifest is empty")
        if self.dtype not in _DTYPES:
            raise TrainError(f"dtype must be float32/float64, got {self.dtype!r}")
        if self.patch_h > self.scene_height or self.patch_w > self.scene_width:
            raise TrainError("patch larger than scene")
        self.render.validate()
        self.featnet.validate()
        self.nerfnet.validate()

    def to_json_dict(self) -> dict:
        scenes = []
        for s in self.scenes:
            if isinstance(s, SceneSpec):
                scenes.append({"scene": s.to_json_dict()})
            else:
                scenes.append({"path": str(s)})
        d = {k: getattr(self, k) for k in (
            "epochs", "rays_per_batch", "patch_h", "patch_w", "batches_per_scene",
            "lr", "beta1", "beta2", "adam_eps", "lr_decay_factor", "seed",
            "scene_height", "scene_width", "grid_u", "grid_v", "input_mode",
            "pattern_k", "pattern_tile", "pattern_path", "dtype", "checkpoint_every")}
        d["lr_decay_milestones"] = list(self.lr_decay_milestones)
        d["scenes"] = scenes
        d["render"] = self.render.to_json_dict()
        d["featnet"] = self.featnet.to_json_dict()
        d["nerfnet"] = self.nerfnet.to_json_dict()
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        scenes = []
        for entry in d.pop("scenes"):
            if "scene" in entry:
                scenes.append(SceneSpec.from_json_dict(entry["scene"]))
            elif "path" in entry:
                scenes.append(entry["path"])
            else:
                raise TrainError(f"manifest entry needs 'scene' or 'path': {entry}")
        d["scenes"] = scenes
        d["render"] = RenderConfig.from_json_dict(d["render"]) if "render" in d else RenderConfig()
        d["featnet"] = (FeatNetConfig.from_json_dict(d["featnet"])
                        if "featnet" in d else FeatNetConfig())
        d["nerfnet"] = (NeRFNetConfig.from_json_dict(d["nerfnet"])
                        if "nerfnet" in d else NeRFNetConfig())
        d["lr_decay_milestones"] = tuple(d.get("lr_decay_milestones", (0.6, 0.85)))
        unknown = set(d) - {f.name for f in _config_fields()}
        if unknown:
            raise TrainError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**d)


def _config_fields():
    import dataclasses
    return dataclasses.fields(TrainConfig)


@dataclass
class RayBatch:
    image: np.ndarray     # normalized coded observation [H,W]
    rays: np.ndarray      # [N,4] target rays at integer viewpoints
    targets: np.ndarray   # [N] ground-truth luminance


@dataclass
class Checkpoint:
    featnet: FeatNetConfig
    nerfnet: NeRFNetConfig
    render: RenderConfig
    input_mode: str
    pattern: CodingPattern | None
    params: dict
    adam_m: dict
    adam_v: dict
    adam_step_count: int
    meta: dict

    def make_store(self) -> ParamStore:
        store = ParamStore()
        for name, arr in self.params.items():
            store.add(name, arr.copy())
        for name in self.params:
            store.load_moments(name, self.adam_m[name], self.adam_v[name])
        store.step_count = self.adam_step_count
        return store

    @classmethod
    def from_store(cls, store: ParamStore, config: TrainConfig,
                   pattern: CodingPattern | None, meta: dict) -> "Checkpoint":
        params, m_arrs, v_arrs = {}, {}, {}
        for name, p in store.items():
            params[name] = p.data.copy()
            m, v = store.moment_arrays(name)
            m_arrs[name] = m.copy()
            v_arrs[name] = v.copy()
        return cls(featnet=config.featnet, nerfnet=config.nerfnet, render=config.render,
                   input_mode=config.input_mode, pattern=pattern, params=params,
                   adam_m=m_arrs, adam_v=v_arrs, adam_step_count=store.step_count,
                   meta=meta)


def _pattern_json(pat: CodingPattern | None):
    if pat is None:
        return None
    return {"k": pat.k, "grid_u": pat.grid[0], "grid_v": pat.grid[1],
            "height": pat.height, "width": pat.width, "tile": pat.tile,
            "aperture": pat.aperture.tolist(),
            "exposure_tile": pat.exposure_tile.tolist()}


def _pattern_from_json(doc) -> CodingPattern | None:
    if doc is None:
        return None
    return CodingPattern(aperture=np.asarray(doc["aperture"]),
                         exposure_tile=np.asarray(doc["exposure_tile"]),
                         height=int(doc["height"]), width=int(doc["width"]))


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    """JSON header + raw little-endian tensor blob; atomic via temp+rename."""
    tensors = []
    blob = bytearray()
    for role, group in (("param", ckpt.params), ("adam_m", ckpt.adam_m),
                        ("adam_v", ckpt.adam_v)):
        for name, arr in group.items():
            raw = np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes()
            tensors.append({"name": name, "role": role, "shape": list(arr.shape),
                            "dtype": arr.dtype.str if arr.dtype.byteorder == "<"
                            else np.dtype(arr.dtype).newbyteorder("<").str,
                            "offset": len(blob), "nbytes": len(raw)})
            blob.extend(raw)
    header = {"featnet": ckpt.featnet.to_json_dict(),
              "nerfnet": ckpt.nerfnet.to_json_dict(),
              "render": ckpt.render.to_json_dict(),
              "input_mode": ckpt.input_mode,
              "pattern": _pattern_json(ckpt.pattern),
              "adam_step_count": ckpt.adam_step_count,
              "meta": ckpt.meta,
              "tensors": tensors}
    payload = json.dumps(header).encode("utf-8")
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(payload)))
        f.write(payload)
        f.write(bytes(blob))
    os.replace(tmp, path)


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        (hlen,) = struct.unpack("<Q", f.read(8))
        raw = f.read(hlen)
        if len(raw) < hlen:
            raise CheckpointError(f"{path}: truncated header")
        header = json.loads(raw.decode("utf-8"))
        blob = f.read()
    groups = {"param": {}, "adam_m": {}, "adam_v": {}}
    for spec in header["tensors"]:
        lo, n = spec["offset"], spec["nbytes"]
        if lo + n > len(blob):
            raise CheckpointError(f"{path}: truncated tensor {spec['name']!r}")
        arr = np.frombuffer(blob[lo:lo + n], dtype=np.dtype(spec["dtype"]))
        groups[spec["role"]][spec["name"]] = arr.reshape(spec["shape"]).copy()
    return Checkpoint(featnet=FeatNetConfig.from_json_dict(header["featnet"]),
                      nerfnet=NeRFNetConfig.from_json_dict(header["nerfnet"]),
                      render=RenderConfig.from_json_dict(header["render"]),
                      input_mode=header["input_mode"],
                      pattern=_pattern_from_json(header["pattern"]),
                      params=groups["param"], adam_m=groups["adam_m"],
                      adam_v=groups["adam_v"],
                      adam_step_count=int(header["adam_step_count"]),
                      meta=header["meta"])


# ---------------------------------------------------------------------------
# training

def resolve_pattern(config: TrainConfig) -> CodingPattern | None:
    if config.input_mode != "joint":
        return None
    if config.pattern_path is not None:
        return coding.load_pattern(config.pattern_path).with_size(
            config.patch_h, config.patch_w)
    return coding.make_default_pattern(config.pattern_k, config.grid_u, config.grid_v,
                                       config.patch_h, config.patch_w,
                                       tile=config.pattern_tile, seed=config.seed)


def materialize_fields(config: TrainConfig) -> list[LightField]:
    fields = []
    for entry in config.scenes:
        if isinstance(entry, SceneSpec):
            fields.append(synth_lightfield(entry, config.grid_u, config.grid_v,
                                           config.scene_height, config.scene_width))
        else:
            try:
                lf = load_lightfield(str(entry))
            except Exception as e:
                raise TrainError(f"unreadable dataset entry {entry!r}: {e}") from e
            if lf.grid != (config.grid_u, config.grid_v):
                raise TrainError(f"dataset entry {entry!r}: grid {lf.grid} != "
                                 f"configured {(config.grid_u, config.grid_v)}")
            fields.append(lf)
    return fields


def sample_ray_batch(patch: LightField, n: int, rng: np.random.Generator) -> tuple:
    """Uniform (view, pixel) targets; returns ([N,4] rays, [N] luminances)."""
    u_n, v_n, h, w = patch.views.shape
    u0, v0 = patch.center_index
    u = rng.integers(0, u_n, n)
    v = rng.integers(0, v_n, n)
    x = rng.integers(0, w, n)
    y = rng.integers(0, h, n)
    targets = patch.views[u, v, y, x]
    rays = np.stack([(u - u0) * patch.view_spacing, (v - v0) * patch.view_spacing,
                     x.astype(np.float64), y.astype(np.float64)], axis=1)
    return rays, targets


def train_step(store: ParamStore, config: TrainConfig, batch: RayBatch,
               rng: np.random.Generator, lr: float) -> float:
    """One optimization step; returns the scalar MSE loss."""
    if not np.array_equal(batch.rays[:, 0:2], np.round(batch.rays[:, 0:2])):
        raise TrainError("training targets must sit at integer viewpoints")
    dtype = _DTYPES[config.dtype]
    h, w = batch.image.shape
    vol = featnet_forward(store, config.featnet, batch.image.astype(dtype))
    rb = render_rays(vol, store, config.nerfnet, batch.rays, w, h,
                     config.render, mode="train", rng=rng)
    loss = ad.mse(rb.ray_luminance, ad.constant(batch.targets, dtype=dtype))
    ad.backward(loss)
    ad.adam_step(store, lr=lr, beta1=config.beta1, beta2=config.beta2,
                 eps=config.adam_eps)
    return float(loss.data)


def _lr_at(config: TrainConfig, step: int, total_steps: int) -> float:
    lr = config.lr
    for frac in config.lr_decay_milestones:
        if step > frac * total_steps:
            lr *= config.lr_decay_factor
    return lr


def train(config: TrainConfig, out_dir: str | None = None,
          resume_from: "Checkpoint | str | None" = None,
          step_callback=None, stop_fn=None) -> Checkpoint:
    """Full training run; returns (and optionally writes) the checkpoint.

    `stop_fn(epoch, step, store, history) -> bool` is consulted at epoch
    boundaries; returning True ends training early (the lr schedule still
    follows the configured epoch count).
    """
    config.validate()
    dtype = _DTYPES[config.dtype]
    fields = materialize_fields(config)
    pattern = resolve_pattern(config)

    epochs_done = 0
    history: list = []
    if resume_from is not None:
        ckpt = (load_checkpoint(resume_from) if isinstance(resume_from, str)
                else resume_from)
        store = ckpt.make_store()
        epochs_done = int(ckpt.meta.get("epochs_done", 0))
        history = [tuple(row) for row in ckpt.meta.get("loss_history", [])]
        if ckpt.pattern is not None:
            pattern = ckpt.pattern.with_size(config.patch_h, config.patch_w)
        if epochs_done >= config.epochs:
            raise TrainError(f"checkpoint already trained {epochs_done} epochs; "
                             f"config asks for {config.epochs}")
    else:
        store = init_params(config.featnet, config.nerfnet, seed=config.seed,
                            dtype=dtype)

    steps_per_epoch = len(fields) * config.batches_per_scene
    total_steps = config.epochs * steps_per_epoch
    step = epochs_done * steps_per_epoch

    def snapshot(epoch_count: int) -> Checkpoint:
        meta = {"seed": config.seed, "epochs_done": epoch_count,
                "steps_done": step, "loss_history": [list(r) for r in history],
                "grid_u": config.grid_u, "grid_v": config.grid_v,
                "center_u": (config.grid_u - 1) // 2,
                "center_v": (config.grid_v - 1) // 2,
                "view_spacing": 1.0, "dtype": config.dtype,
                "patch_h": config.patch_h, "patch_w": config.patch_w}
        return Checkpoint.from_store(store, config, pattern, meta)

    epochs_completed = epochs_done
    for epoch in range(epochs_done, config.epochs):
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 997, epoch]))
        order = rng.permutation(len(fields))
        for idx in order:
            lf = fields[int(idx)]
            _, _, h, w = lf.views.shape
            y0 = int(rng.integers(0, h - config.patch_h + 1))
            x0 = int(rng.integers(0, w - config.patch_w + 1))
            patch = extract_patch(lf, x0, y0, config.patch_h, config.patch_w)
            observed = coding.encode(patch, config.input_mode, pattern)
            image = coding.normalize(observed)
            for _ in range(config.batches_per_scene):
                step += 1
                lr = _lr_at(config, step, total_steps)
                rays, targets = sample_ray_batch(patch, config.rays_per_batch, rng)
                t0 = time.perf_counter()
                loss = train_step(store, config, RayBatch(image, rays, targets),
                                  rng, lr)
                wall_ms = (time.perf_counter() - t0) * 1e3
                history.append((step, loss, lr, wall_ms))
                if step_callback is not None:
                    step_callback(step, loss, lr, store)
        epochs_completed = epoch + 1
        if out_dir and config.checkpoint_every and epochs_completed % config.checkpoint_every == 0:
            save_checkpoint(snapshot(epochs_completed),
                            os.path.join(out_dir, f"ckpt_epoch{epochs_completed:04d}.ckpt"))
        if stop_fn is not None and stop_fn(epochs_completed, step, store, history):
            break

    final = snapshot(epochs_completed)
    if out_dir:
        save_checkpoint(final, os.path.join(out_dir, "final.ckpt"))
    return final


def checkpoint_feature_volume(ckpt: Checkpoint, image: np.ndarray):
    """FeatNet forward with checkpoint params; returns (volume Value, store)."""
    store = ckpt.make_store()
    with ad.no_grad():
        vol = featnet_forward(store, ckpt.featnet, image)
    return vol, store
