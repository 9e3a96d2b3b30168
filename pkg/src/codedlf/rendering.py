"""Continuous light-field rendering.

A ray is (u_tilde, v_tilde, x_tilde, y_tilde): viewpoint (doubling as the
angle pair fed to NeRFNet) and position on the Z=0 plane in pixel units.
A sampling position t in [t_min, t_max] maps into the feature volume as

    X = norm_x(x_tilde + u_tilde * t)
    Y = norm_y(y_tilde + v_tilde * t)
    Z = norm_z(t)

with norm_x: [0, W-1] -> [-1, 1], norm_y: [0, H-1] -> [-1, 1] and
norm_z: [t_min, t_max] -> [-1, 1], all affine. Compositing uses the
NeRF quadrature: delta_i = t_{i+1} - t_i (the last delta runs to t_max),
T_i = exp(-sum_{j<i} sigma_j delta_j), w_i = T_i (1 - exp(-sigma_i delta_i)),
L = sum w_i c_i. Pseudo-depth is sum(w t) / max(sum w, 1e-8).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .models import NeRFNetConfig, nerfnet_forward

DEPTH_EPS = 1e-8


class RenderError(Exception):
    pass


@dataclass(frozen=True)
class RenderConfig:
    t_min: float = -3.0
    t_max: float = 3.0
    n_train_samples: int = 16
    n_test_samples: int = 32

    def validate(self) -> None:
        if not self.t_min < self.t_max:
            raise RenderError(f"need t_min < t_max, got [{self.t_min}, {self.t_max}]")
        if self.n_train_samples < 2 or self.n_test_samples < 2:
            raise RenderError("sample counts must be >= 2")

    def to_json_dict(self) -> dict:
        return {"t_min": self.t_min, "t_max": self.t_max,
                "n_train_samples": self.n_train_samples,
                "n_test_samples": self.n_test_samples}

    @classmethod
    def from_json_dict(cls, d: dict) -> "RenderConfig":
        return cls(**d)


@dataclass(frozen=True)
class RayCoord:
    u_tilde: float
    v_tilde: float
    x_tilde: float
    y_tilde: float


@dataclass
class RaySampleBatch:
    """Per-ray sample state; Values where the pipeline is differentiable."""

    t: np.ndarray              # [N,S], strictly increasing per ray
    ndc: np.ndarray            # [N,S,3]
    features: Value            # [N*S,C]
    luminances: Value          # [N,S]
    densities: Value           # [N,S]
    weights: Value             # [N,S]
    transmittances: Value      # [N,S]
    ray_luminance: Value       # [N]


def _norm_axis(p, n: int):
    if n <= 1:
        return np.zeros_like(np.asarray(p, dtype=np.float64))
    return 2.0 * np.asarray(p, dtype=np.float64) / (n - 1) - 1.0


def map_to_ndc(ray: RayCoord, t: float, width: int, height: int,
               cfg: RenderConfig) -> tuple[float, float, float]:
    """Eq-style plane+angle mapping of one sampling position into NDC."""
    x = _norm_axis(ray.x_tilde + ray.u_tilde * t, width)
    y = _norm_axis(ray.y_tilde + ray.v_tilde * t, height)
    z = 2.0 * (t - cfg.t_min) / (cfg.t_max - cfg.t_min) - 1.0
    return float(x), float(y), float(z)


def place_samples(cfg: RenderConfig, mode: str,
                  rng: np.random.Generator | None = None) -> np.ndarray:
    """Sampling positions along one ray: stratified draws (train) or
    deterministic bin centers (test)."""
    cfg.validate()
    if mode == "train":
        if rng is None:
            raise RenderError("train-mode sampling needs an rng")
        return _stratified_t(cfg, 1, rng)[0]
    if mode == "test":
        n = cfg.n_test_samples
        step = (cfg.t_max - cfg.t_min) / n
        return cfg.t_min + (np.arange(n) + 0.5) * step
    raise RenderError(f"unknown sampling mode {mode!r}")


def _stratified_t(cfg: RenderConfig, n_rays: int, rng: np.random.Generator) -> np.ndarray:
    n = cfg.n_train_samples
    width = (cfg.t_max - cfg.t_min) / n
    lo = cfg.t_min + np.arange(n) * width
    return lo[None, :] + rng.random((n_rays, n)) * width


def _deltas(t: np.ndarray, t_max: float) -> np.ndarray:
    if np.any(np.diff(t, axis=-1) <= 0.0):
        raise RenderError("sample positions must be strictly increasing")
    return np.concatenate([np.diff(t, axis=-1), t_max - t[..., -1:]], axis=-1)


def composite_values(c: Value, sigma: Value, t: np.ndarray, t_max: float
                     ) -> tuple[Value, Value, Value]:
    """Differentiable quadrature over [N,S] batches.

    Returns (ray luminance [N], weights [N,S], transmittances [N,S]).
    """
    deltas = ad.constant(_deltas(t, t_max), dtype=sigma.dtype)
    a = ad.mul(sigma, deltas)
    trans = ad.exp(-ad.cumsum_exclusive(a, axis=1))
    alpha = 1.0 - ad.exp(-a)
    weights = ad.mul(trans, alpha)
    lum = ad.sum_(ad.mul(weights, c), axis=1)
    return lum, weights, trans


def composite(c, sigma, t, t_max: float):
    """Plain-array single-ray quadrature: (luminance, weights, transmittances)."""
    c = np.asarray(c, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if not (c.shape == sigma.shape == t.shape) or c.ndim != 1:
        raise RenderError(f"composite expects matching 1-D arrays, got "
                          f"{c.shape}/{sigma.shape}/{t.shape}")
    if np.any(sigma < 0.0):
        raise RenderError("densities must be nonnegative")
    with ad.no_grad():
        lum, w, trans = composite_values(ad.constant(c[None, :]),
                                         ad.constant(sigma[None, :]),
                                         t[None, :], t_max)
    return float(lum.data[0]), w.data[0].copy(), trans.data[0].copy()


def render_rays(volume: Value, store, nerf_cfg: NeRFNetConfig, rays: np.ndarray,
                width: int, height: int, cfg: RenderConfig, mode: str,
                rng: np.random.Generator | None = None) -> RaySampleBatch:
    """Render a [N,4] ray batch through gather -> NeRFNet -> compositing."""
    cfg.validate()
    rays = np.asarray(rays, dtype=np.float64)
    if rays.ndim != 2 or rays.shape[1] != 4:
        raise RenderError(f"rays must be [N,4], got {rays.shape}")
    n = rays.shape[0]
    if mode == "train":
        if rng is None:
            raise RenderError("train-mode rendering needs an rng")
        t = _stratified_t(cfg, n, rng)
    elif mode == "test":
        t = np.broadcast_to(place_samples(cfg, "test"), (n, cfg.n_test_samples)).copy()
    else:
        raise RenderError(f"unknown sampling mode {mode!r}")

    ut, vt = rays[:, 0:1], rays[:, 1:2]
    xt, yt = rays[:, 2:3], rays[:, 3:4]
    x = _norm_axis(xt + ut * t, width)
    y = _norm_axis(yt + vt * t, height)
    z = 2.0 * (t - cfg.t_min) / (cfg.t_max - cfg.t_min) - 1.0
    s = t.shape[1]
    ndc = np.stack([x, y, z], axis=2)
    coords = ndc.reshape(n * s, 3)
    angles = np.repeat(rays[:, 0:2], s, axis=0)

    feats = ad.trilinear_gather(volume, coords)
    lum_q, dens_q = nerfnet_forward(store, nerf_cfg, coords, angles, feats)
    c = ad.reshape(lum_q, (n, s))
    sigma = ad.reshape(dens_q, (n, s))
    ray_lum, weights, trans = composite_values(c, sigma, t, cfg.t_max)
    return RaySampleBatch(t=t, ndc=ndc, features=feats, luminances=c,
                          densities=sigma, weights=weights, transmittances=trans,
                          ray_luminance=ray_lum)


def render_ray(volume: Value, store, nerf_cfg: NeRFNetConfig, ray: RayCoord,
               width: int, height: int, cfg: RenderConfig, mode: str = "test",
               rng: np.random.Generator | None = None) -> float:
    batch = render_rays(volume, store, nerf_cfg,
                        np.array([[ray.u_tilde, ray.v_tilde, ray.x_tilde, ray.y_tilde]]),
                        width, height, cfg, mode, rng)
    return float(batch.ray_luminance.data[0])


def render_view(volume: Value, store, nerf_cfg: NeRFNetConfig,
                viewpoint: tuple[float, float], width: int, height: int,
                cfg: RenderConfig, chunk: int = 8192) -> tuple[np.ndarray, np.ndarray]:
    """One ray per pixel center at a continuous viewpoint (test sampling).

    Returns (image [H,W], pseudo-depth [H,W]); deterministic.
    """
    ut, vt = float(viewpoint[0]), float(viewpoint[1])
    ys, xs = np.mgrid[0:height, 0:width]
    rays = np.stack([np.full(width * height, ut), np.full(width * height, vt),
                     xs.reshape(-1).astype(np.float64),
                     ys.reshape(-1).astype(np.float64)], axis=1)
    img = np.empty(width * height, dtype=np.float64)
    depth = np.empty(width * height, dtype=np.float64)
    with ad.no_grad():
        for lo in range(0, rays.shape[0], chunk):
            part = rays[lo:lo + chunk]
            batch = render_rays(volume, store, nerf_cfg, part, width, height,
                                cfg, mode="test")
            w = batch.weights.data
            img[lo:lo + part.shape[0]] = batch.ray_luminance.data
            wsum = w.sum(axis=1)
            depth[lo:lo + part.shape[0]] = (w * batch.t).sum(axis=1) / np.maximum(
                wsum, DEPTH_EPS)
    return img.reshape(height, width), depth.reshape(height, width)


def pseudo_depth_to_unit(depth: np.ndarray, cfg: RenderConfig) -> np.ndarray:
    """Map a pseudo-depth map from [t_min, t_max] into [0,1] for imaging."""
    return np.clip((depth - cfg.t_min) / (cfg.t_max - cfg.t_min), 0.0, 1.0)
