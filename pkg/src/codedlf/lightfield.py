"""Grayscale 4-D light fields: data model, synthesis, file I/O, EPI slices.

A light field is a [U,V,H,W] array of luminance in [0,1] plus viewpoint
geometry. Synthetic scenes are stacks of fronto-parallel textured layers;
a layer whose disparity is d lives on the sampling plane t=d of the
renderer, so between views its content moves by -d pixels per unit
viewpoint step (the view at u_tilde samples the layer texture at
x + d*u_tilde). Layer shifts use bilinear resampling with edge clamping,
which keeps ground truth continuous in the viewpoint.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .imgfile import read_gray_png, write_gray_png

META_KEYS = ("grid_u", "grid_v", "height", "width", "view_spacing",
             "center_u", "center_v", "bit_depth")

TEXTURE_KINDS = ("checker", "noise", "impulse", "impulse_center", "const")
MASK_KINDS = ("full", "blobs", "disk", "soft", "stripes")


class LightFieldError(Exception):
    """Base class for light-field data errors."""


class MissingViewError(LightFieldError):
    pass


class DimensionMismatchError(LightFieldError):
    pass


class MetadataError(LightFieldError):
    pass


class SceneSpecError(LightFieldError):
    pass


@dataclass
class LightField:
    views: np.ndarray            # [U,V,H,W], luminance in [0,1]
    view_spacing: float = 1.0
    center_index: tuple[int, int] | None = None

    def __post_init__(self):
        self.views = np.asarray(self.views, dtype=np.float64)
        if self.views.ndim != 4:
            raise LightFieldError(f"views must be [U,V,H,W], got shape {self.views.shape}")
        if self.center_index is None:
            u, v = self.views.shape[:2]
            self.center_index = ((u - 1) // 2, (v - 1) // 2)
        self.validate()

    def validate(self) -> None:
        u, v, h, w = self.views.shape
        if min(u, v, h, w) < 1:
            raise LightFieldError(f"empty light field: shape {self.views.shape}")
        if not np.all(np.isfinite(self.views)):
            raise LightFieldError("non-finite luminance sample")
        lo, hi = float(self.views.min()), float(self.views.max())
        if lo < 0.0 or hi > 1.0:
            raise LightFieldError(f"luminance outside [0,1]: range [{lo}, {hi}]")
        u0, v0 = self.center_index
        if not (0 <= u0 < u and 0 <= v0 < v):
            raise LightFieldError(f"center_index {self.center_index} outside {u}x{v} grid")

    @property
    def grid(self) -> tuple[int, int]:
        return self.views.shape[0], self.views.shape[1]

    @property
    def image_size(self) -> tuple[int, int]:
        return self.views.shape[2], self.views.shape[3]

    def center_view(self) -> np.ndarray:
        u0, v0 = self.center_index
        return self.views[u0, v0]


@dataclass(frozen=True)
class MaskSpec:
    kind: str = "full"
    seed: int = 0


@dataclass(frozen=True)
class LayerSpec:
    disparity: float
    texture: str
    seed: int = 0
    mask: MaskSpec = field(default_factory=MaskSpec)


@dataclass(frozen=True)
class SceneSpec:
    """Back-to-front layer stack; disparities strictly decrease (far to near).

    Ray compositing integrates t upward from t_min, so content at smaller t
    occludes content at larger t: near layers carry smaller disparities.
    """

    layers: tuple[LayerSpec, ...]
    background: tuple[str, int] | None = None   # (texture, seed), rendered at disparity 0

    def validate(self, t_min: float = -3.0, t_max: float = 3.0) -> None:
        if len(self.layers) < 1:
            raise SceneSpecError("scene needs at least one layer")
        disparities = [la.disparity for la in self.layers]
        for a, b in zip(disparities, disparities[1:]):
            if not a > b:
                raise SceneSpecError(
                    f"layer disparities must strictly decrease far to near: {disparities}")
        for la in self.layers:
            if not (t_min <= la.disparity <= t_max):
                raise SceneSpecError(
                    f"layer disparity {la.disparity} outside [{t_min}, {t_max}]")
            if la.texture not in TEXTURE_KINDS:
                raise SceneSpecError(f"unknown texture {la.texture!r}")
            if la.mask.kind not in MASK_KINDS:
                raise SceneSpecError(f"unknown mask {la.mask.kind!r}")
        if self.background is not None and self.background[0] not in TEXTURE_KINDS:
            raise SceneSpecError(f"unknown background texture {self.background[0]!r}")

    def to_json_dict(self) -> dict:
        out = {"layers": [
            {"disparity": la.disparity, "texture": la.texture, "seed": la.seed,
             "mask": {"kind": la.mask.kind, "seed": la.mask.seed}}
            for la in self.layers]}
        if self.background is not None:
            out["background"] = {"texture": self.background[0], "seed": self.background[1]}
        return out

    @classmethod
    def from_json_dict(cls, d: dict) -> "SceneSpec":
        try:
            layers = tuple(
                LayerSpec(disparity=float(la["disparity"]), texture=str(la["texture"]),
                          seed=int(la["seed"]),
                          mask=MaskSpec(str(la["mask"]["kind"]), int(la["mask"]["seed"])))
                for la in d["layers"])
            background = None
            if "background" in d and d["background"] is not None:
                background = (str(d["background"]["texture"]), int(d["background"]["seed"]))
        except (KeyError, TypeError) as e:
            raise SceneSpecError(f"malformed scene spec: missing {e}") from e
        spec = cls(layers=layers, background=background)
        spec.validate()
        return spec


def load_scene_spec(path: str) -> SceneSpec:
    with open(path, "r", encoding="utf-8") as f:
        return SceneSpec.from_json_dict(json.load(f))


def save_scene_spec(spec: SceneSpec, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(spec.to_json_dict(), f, indent=2)


# ---------------------------------------------------------------------------
# procedural textures and masks

def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(key)))


def _upsample_bilinear(coarse: np.ndarray, h: int, w: int, cell: int) -> np.ndarray:
    ys = np.arange(h) / cell
    xs = np.arange(w) / cell
    y0 = np.minimum(ys.astype(np.int64), coarse.shape[0] - 2)
    x0 = np.minimum(xs.astype(np.int64), coarse.shape[1] - 2)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = coarse[y0][:, x0]
    b = coarse[y0][:, x0 + 1]
    c = coarse[y0 + 1][:, x0]
    d = coarse[y0 + 1][:, x0 + 1]
    return (1 - fy) * ((1 - fx) * a + fx * b) + fy * ((1 - fx) * c + fx * d)


def make_texture(kind: str, seed: int, h: int, w: int, salt: int = 0) -> np.ndarray:
    """Deterministic [H,W] texture in [0,1] keyed by (kind, seed, salt)."""
    rng = _rng(salt, seed, 101)
    if kind == "checker":
        period = int(rng.integers(8, 15))
        ox, oy = int(rng.integers(0, period)), int(rng.integers(0, period))
        lo = 0.05 + 0.35 * rng.random()
        hi = 0.60 + 0.35 * rng.random()
        yy, xx = np.mgrid[0:h, 0:w]
        cell = ((yy + oy) // period + (xx + ox) // period) % 2
        return np.where(cell == 0, lo, hi)
    if kind == "noise":
        cell = int(rng.choice([6, 8, 10]))
        coarse = rng.random((h // cell + 2, w // cell + 2))
        tex = _upsample_bilinear(coarse, h, w, cell)
        return np.clip(tex, 0.0, 1.0)
    if kind == "impulse":
        spacing = int(rng.integers(7, 13))
        oy, ox = int(rng.integers(0, spacing)), int(rng.integers(0, spacing))
        tex = np.zeros((h, w))
        tex[oy::spacing, ox::spacing] = 1.0
        return tex
    if kind == "impulse_center":
        tex = np.zeros((h, w))
        tex[h // 2, w // 2] = 1.0
        return tex
    if kind == "const":
        return np.full((h, w), 0.15 + 0.7 * rng.random())
    raise SceneSpecError(f"unknown texture {kind!r}")


def make_mask(spec: MaskSpec, h: int, w: int, salt: int = 0) -> np.ndarray:
    """Deterministic [H,W] opacity mask in [0,1] (binary for hard kinds)."""
    rng = _rng(salt, spec.seed, 202)
    if spec.kind == "full":
        return np.ones((h, w))
    if spec.kind == "blobs":
        cell = int(rng.choice([6, 8]))
        coarse = rng.random((h // cell + 2, w // cell + 2))
        soft = _upsample_bilinear(coarse, h, w, cell)
        return (soft > np.quantile(soft, 0.55)).astype(np.float64)
    if spec.kind == "disk":
        r = (0.18 + 0.17 * rng.random()) * min(h, w)
        cy = h / 2 + rng.uniform(-0.15, 0.15) * h
        cx = w / 2 + rng.uniform(-0.15, 0.15) * w
        yy, xx = np.mgrid[0:h, 0:w]
        return (((yy - cy) ** 2 + (xx - cx) ** 2) <= r * r).astype(np.float64)
    if spec.kind == "soft":
        cell = int(rng.choice([6, 8]))
        coarse = rng.random((h // cell + 2, w // cell + 2))
        return np.clip(_upsample_bilinear(coarse, h, w, cell), 0.0, 1.0)
    if spec.kind == "stripes":
        period = int(rng.integers(6, 12))
        phase = int(rng.integers(0, period))
        yy, xx = np.mgrid[0:h, 0:w]
        return (((yy + 2 * xx + phase) // period) % 2).astype(np.float64)
    raise SceneSpecError(f"unknown mask {spec.kind!r}")


def shift_sample(img: np.ndarray, sx: float, sy: float) -> np.ndarray:
    """out[y,x] = img[y+sy, x+sx], bilinear with edge-clamp padding."""
    h, w = img.shape

    def axis_gather(arr, shift, n, axis):
        pos = np.clip(np.arange(n) + shift, 0.0, n - 1.0)
        if n == 1:
            return np.take(arr, np.zeros(1, dtype=np.int64), axis=axis)
        i0 = np.minimum(pos.astype(np.int64), n - 2)
        f = pos - i0
        a = np.take(arr, i0, axis=axis)
        b = np.take(arr, i0 + 1, axis=axis)
        fshape = [1, 1]
        fshape[axis] = n
        f = f.reshape(fshape)
        return a * (1.0 - f) + b * f

    out = axis_gather(img, sx, w, axis=1)
    return axis_gather(out, sy, h, axis=0)


# ---------------------------------------------------------------------------
# synthesis

def synth_view(spec: SceneSpec, vp: tuple[float, float], h: int, w: int,
               seed: int = 0) -> np.ndarray:
    """Ground-truth view at a continuous viewpoint (u_tilde, v_tilde).

    A layer at disparity d is sampled at (x + d*u_tilde, y + d*v_tilde),
    i.e. its content moves by -d pixels per unit viewpoint step, which is
    exactly where the volume plane t=d projects under the ray mapping
    X = x_tilde + u_tilde * t.
    """
    spec.validate()
    ut, vt = float(vp[0]), float(vp[1])
    if spec.background is not None:
        img = make_texture(spec.background[0], spec.background[1], h, w, salt=seed)
    else:
        img = np.zeros((h, w))
    for layer in spec.layers:
        tex = make_texture(layer.texture, layer.seed, h, w, salt=seed)
        msk = make_mask(layer.mask, h, w, salt=seed)
        sx = layer.disparity * ut
        sy = layer.disparity * vt
        if sx != 0.0 or sy != 0.0:
            tex = shift_sample(tex, sx, sy)
            msk = shift_sample(msk, sx, sy)
        img = msk * tex + (1.0 - msk) * img
    return np.clip(img, 0.0, 1.0)


def synth_lightfield(spec: SceneSpec, u: int, v: int, h: int, w: int,
                     seed: int = 0) -> LightField:
    """Discrete light field; view (i,j) equals synth_view at (i-u0, j-v0)."""
    if min(u, v, h, w) < 1:
        raise SceneSpecError(f"invalid dimensions {u}x{v}x{h}x{w}")
    u0, v0 = (u - 1) // 2, (v - 1) // 2
    views = np.empty((u, v, h, w))
    for i in range(u):
        for j in range(v):
            views[i, j] = synth_view(spec, (i - u0, j - v0), h, w, seed=seed)
    return LightField(views=views, view_spacing=1.0, center_index=(u0, v0))


# ---------------------------------------------------------------------------
# patches and EPI slices

def extract_patch(lf: LightField, x0: int, y0: int, ph: int, pw: int) -> LightField:
    """Crop every view identically to [y0:y0+ph, x0:x0+pw]."""
    _, _, h, w = lf.views.shape
    if not (0 <= x0 and x0 + pw <= w and 0 <= y0 and y0 + ph <= h and ph >= 1 and pw >= 1):
        raise LightFieldError(
            f"patch [{y0}:{y0 + ph}, {x0}:{x0 + pw}] outside {h}x{w} image")
    return LightField(views=lf.views[:, :, y0:y0 + ph, x0:x0 + pw].copy(),
                      view_spacing=lf.view_spacing, center_index=lf.center_index)


def extract_epi(lf: LightField, y: int, v: int) -> np.ndarray:
    """EPI(u, x) = L(u, v, x, y) for a fixed row y and viewpoint column v."""
    u_n, v_n, h, _ = lf.views.shape
    if not 0 <= y < h:
        raise LightFieldError(f"row {y} outside image height {h}")
    if not 0 <= v < v_n:
        raise LightFieldError(f"viewpoint column {v} outside grid height {v_n}")
    return lf.views[:, v, y, :].copy()


# ---------------------------------------------------------------------------
# on-disk format: view_{u}_{v}.png (8- or 16-bit grayscale) + meta.json

def _view_name(u: int, v: int) -> str:
    return f"view_{u}_{v}.png"


def save_lightfield(lf: LightField, path: str, bit_depth: int = 16) -> None:
    if bit_depth not in (8, 16):
        raise LightFieldError(f"unsupported bit depth {bit_depth}")
    lf.validate()
    os.makedirs(path, exist_ok=True)
    u_n, v_n, h, w = lf.views.shape
    peak = (1 << bit_depth) - 1
    for u in range(u_n):
        for v in range(v_n):
            q = np.round(lf.views[u, v] * peak).astype(np.uint16 if bit_depth == 16 else np.uint8)
            write_gray_png(os.path.join(path, _view_name(u, v)), q, bit_depth)
    meta = {"grid_u": u_n, "grid_v": v_n, "height": h, "width": w,
            "view_spacing": lf.view_spacing,
            "center_u": lf.center_index[0], "center_v": lf.center_index[1],
            "bit_depth": bit_depth}
    with open(os.path.join(path, "meta.json"), "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2)


def load_lightfield(path: str) -> LightField:
    meta_path = os.path.join(path, "meta.json")
    if not os.path.exists(meta_path):
        raise MetadataError(f"missing metadata file {meta_path}")
    try:
        with open(meta_path, "r", encoding="utf-8") as f:
            meta = json.load(f)
    except json.JSONDecodeError as e:
        raise MetadataError(f"malformed metadata {meta_path}: {e}") from e
    for key in META_KEYS:
        if key not in meta:
            raise MetadataError(f"metadata field {key!r} missing in {meta_path}")
    u_n, v_n = int(meta["grid_u"]), int(meta["grid_v"])
    h, w = int(meta["height"]), int(meta["width"])
    bit_depth = int(meta["bit_depth"])
    if bit_depth not in (8, 16):
        raise MetadataError(f"metadata field 'bit_depth' unsupported: {bit_depth}")
    if min(u_n, v_n, h, w) < 1:
        raise MetadataError(f"metadata declares empty field {u_n}x{v_n}x{h}x{w}")
    peak = (1 << bit_depth) - 1
    views = np.empty((u_n, v_n, h, w))
    for u in range(u_n):
        for v in range(v_n):
            view_path = os.path.join(path, _view_name(u, v))
            if not os.path.exists(view_path):
                raise MissingViewError(f"missing view {_view_name(u, v)} in {path}")
            arr, file_depth = read_gray_png(view_path)
            if file_depth != bit_depth:
                raise DimensionMismatchError(
                    f"{_view_name(u, v)}: file bit depth {file_depth} != declared {bit_depth}")
            if arr.shape != (h, w):
                raise DimensionMismatchError(
                    f"{_view_name(u, v)}: image {arr.shape} != declared {(h, w)}")
            if arr.max(initial=0) > peak:
                raise LightFieldError(f"{_view_name(u, v)}: sample above declared peak")
            views[u, v] = arr.astype(np.float64) / peak
    return LightField(views=views, view_spacing=float(meta["view_spacing"]),
                      center_index=(int(meta["center_u"]), int(meta["center_v"])))


def quantize_field(views: np.ndarray, bit_depth: int = 16) -> np.ndarray:
    """Snap samples to the on-disk grid so save/load round-trips exactly."""
    peak = (1 << bit_depth) - 1
    return np.round(np.asarray(views) * peak) / peak


def parallax_shift(disparity: float, u_tilde: float) -> float:
    """Pixel displacement of layer content between the central view and u_tilde."""
    return -disparity * u_tilde


def correlation_peak_shift(a: np.ndarray, b: np.ndarray, max_shift: int) -> int:
    """Integer x-displacement of b's content relative to a (peak correlation).

    Positive means b looks like a moved to the right: b(x) ~ a(x - s).
    """
    best, best_s = -math.inf, 0
    az = a - a.mean()
    bz = b - b.mean()
    w = a.shape[1]
    for s in range(-max_shift, max_shift + 1):
        if s >= 0:
            prod = az[:, :w - s] * bz[:, s:]
        else:
            prod = az[:, -s:] * bz[:, :w + s]
        score = float(prod.mean())
        if score > best:
            best, best_s = score, s
    return best_s
