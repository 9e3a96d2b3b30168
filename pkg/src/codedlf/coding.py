"""Joint aperture-exposure coding and the simulated single-image observation.

The camera integrates K temporal sub-patterns: per sub-pattern an aperture
mask a_k(u,v) weights viewpoints and a binary exposure gate p_k(x,y) weights
pixels, so the observed image is
    I(x,y) = sum_{u,v} [ sum_k a_k(u,v) p_k(x,y) ] L(u,v,x,y).
All-ones masks with K=1 reduce this to the plain uncoded sum over views.
Coded images are kept pre-normalization together with the maximum
achievable gain, so the network input can be scaled into [0,1] regardless
of mask density.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .lightfield import LightField

PATTERN_KEYS = ("k", "grid_u", "grid_v", "height", "width", "tile",
                "aperture", "exposure_tile")


class CodingError(Exception):
    pass


class PatternError(CodingError):
    pass


def _tile_to_full(tile_pattern: np.ndarray, h: int, w: int) -> np.ndarray:
    k, th, tw = tile_pattern.shape
    reps = (1, math.ceil(h / th), math.ceil(w / tw))
    return np.tile(tile_pattern, reps)[:, :h, :w]


@dataclass
class CodingPattern:
    """K aperture masks over the view grid + tiled binary exposure gates.

    Generated and loaded patterns additionally satisfy coverage (every
    viewpoint and every pixel exposed by at least one sub-pattern); direct
    construction allows degenerate masks such as single-view selectors.
    """

    aperture: np.ndarray        # [K,U,V], transmittance in [0,1]
    exposure_tile: np.ndarray   # [K,T,T], binary micro-pattern tiled over (x,y)
    height: int
    width: int

    def __post_init__(self):
        self.aperture = np.asarray(self.aperture, dtype=np.float64)
        self.exposure_tile = np.asarray(self.exposure_tile, dtype=np.float64)
        self.validate()

    def validate(self, require_coverage: bool = False) -> None:
        if self.aperture.ndim != 3 or self.exposure_tile.ndim != 3:
            raise PatternError("aperture must be [K,U,V], exposure tile [K,T,T]")
        if self.k < 1:
            raise PatternError(f"pattern needs K >= 1, got {self.k}")
        if self.exposure_tile.shape[0] != self.k:
            raise PatternError("aperture and exposure disagree on K")
        if min(self.height, self.width) < 1:
            raise PatternError(f"invalid target size {self.height}x{self.width}")
        if self.aperture.min() < 0.0 or self.aperture.max() > 1.0:
            raise PatternError("aperture transmittance outside [0,1]")
        if not np.all(np.isin(self.exposure_tile, (0.0, 1.0))):
            raise PatternError("exposure gates must be binary")
        if require_coverage:
            if np.any(self.aperture.sum(axis=0) <= 0.0):
                raise PatternError("coverage violated: some viewpoint is never exposed")
            if np.any(self.exposure().sum(axis=0) <= 0.0):
                raise PatternError("coverage violated: some pixel is never exposed")

    @property
    def k(self) -> int:
        return self.aperture.shape[0]

    @property
    def grid(self) -> tuple[int, int]:
        return self.aperture.shape[1], self.aperture.shape[2]

    @property
    def tile(self) -> int:
        return self.exposure_tile.shape[1]

    def exposure(self) -> np.ndarray:
        """Full [K,H,W] gates, the micro-tile repeated with truncation."""
        return _tile_to_full(self.exposure_tile, self.height, self.width)

    def with_size(self, height: int, width: int) -> "CodingPattern":
        """Same physical masks applied to a different sensor crop."""
        return CodingPattern(aperture=self.aperture.copy(),
                             exposure_tile=self.exposure_tile.copy(),
                             height=height, width=width)


@dataclass
class CodedImage:
    pixels: np.ndarray   # [H,W], pre-normalization
    gain: float          # maximum achievable per-pixel mask weight

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if not np.all(np.isfinite(self.pixels)):
            raise CodingError("non-finite coded pixel")
        if self.gain <= 0.0:
            raise CodingError(f"gain must be positive, got {self.gain}")


def make_default_pattern(k: int, u: int, v: int, h: int, w: int,
                         tile: int = 4, seed: int = 0) -> CodingPattern:
    """Random binary masks with coverage repair, deterministic per seed."""
    if k < 1:
        raise PatternError(f"K must be >= 1, got {k}")
    if min(u, v, h, w, tile) < 1:
        raise PatternError("pattern dimensions must be positive")
    rng = np.random.default_rng(np.random.SeedSequence([seed, k, u, v, tile]))
    aperture = (rng.random((k, u, v)) < 0.5).astype(np.float64)
    dead = aperture.sum(axis=0) == 0.0
    for iu, iv in zip(*np.nonzero(dead)):
        aperture[rng.integers(0, k), iu, iv] = 1.0
    tile_pat = (rng.random((k, tile, tile)) < 0.5).astype(np.float64)
    dead = tile_pat.sum(axis=0) == 0.0
    for iy, ix in zip(*np.nonzero(dead)):
        tile_pat[rng.integers(0, k), iy, ix] = 1.0
    pat = CodingPattern(aperture=aperture, exposure_tile=tile_pat, height=h, width=w)
    pat.validate(require_coverage=True)
    return pat


def save_pattern(pat: CodingPattern, path: str) -> None:
    doc = {"k": pat.k, "grid_u": pat.grid[0], "grid_v": pat.grid[1],
           "height": pat.height, "width": pat.width, "tile": pat.tile,
           "aperture": pat.aperture.tolist(),
           "exposure_tile": pat.exposure_tile.tolist()}
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f)


def load_pattern(path: str) -> CodingPattern:
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise PatternError(f"malformed pattern file {path}: {e}") from e
    for key in PATTERN_KEYS:
        if key not in doc:
            raise PatternError(f"pattern field {key!r} missing in {path}")
    pat = CodingPattern(aperture=np.asarray(doc["aperture"], dtype=np.float64),
                        exposure_tile=np.asarray(doc["exposure_tile"], dtype=np.float64),
                        height=int(doc["height"]), width=int(doc["width"]))
    if pat.k != int(doc["k"]) or pat.grid != (int(doc["grid_u"]), int(doc["grid_v"])):
        raise PatternError(f"pattern header disagrees with mask arrays in {path}")
    pat.validate(require_coverage=True)
    return pat


def _check_dims(lf: LightField, pat: CodingPattern) -> None:
    u, v = lf.grid
    h, w = lf.image_size
    if pat.grid != (u, v):
        raise CodingError(f"pattern view grid {pat.grid} != light field {u}x{v}")
    if (pat.height, pat.width) != (h, w):
        raise CodingError(
            f"pattern size {pat.height}x{pat.width} != light field image {h}x{w}")


def encode_joint(lf: LightField, pat: CodingPattern) -> CodedImage:
    """Eq. (3): per-pixel weighted sum over views and sub-patterns.

    The view sum runs in the same order as encode_uncoded's, so all-ones
    masks with K=1 reproduce the uncoded image bit-exactly.
    """
    _check_dims(lf, pat)
    exposure = pat.exposure()
    weights = np.einsum("kuv,kxy->uvxy", pat.aperture, exposure)
    pixels = (weights * lf.views).sum(axis=(0, 1))
    gain = float(weights.sum(axis=(0, 1)).max())
    return CodedImage(pixels=pixels, gain=gain)


def encode_uncoded(lf: LightField) -> CodedImage:
    """Eq. (1): plain sum over all views (no camera-side coding)."""
    u, v = lf.grid
    return CodedImage(pixels=lf.views.sum(axis=(0, 1)), gain=float(u * v))


def center_view(lf: LightField) -> CodedImage:
    """Central view only, the weakest ablation input."""
    return CodedImage(pixels=lf.center_view().copy(), gain=1.0)


def normalize(ci: CodedImage) -> np.ndarray:
    """Scale by the recorded gain into [0,1]; refuses out-of-range input."""
    out = ci.pixels / ci.gain
    hi = float(out.max())
    if out.min() < -1e-9 or hi > 1.0 + 1e-9:
        raise CodingError(f"normalized pixels outside [0,1]: max {hi}")
    return np.clip(out, 0.0, 1.0)


def encode(lf: LightField, mode: str, pat: CodingPattern | None = None) -> CodedImage:
    """Dispatch over the three ablation input modes."""
    if mode == "joint":
        if pat is None:
            raise CodingError("joint mode requires a coding pattern")
        return encode_joint(lf, pat)
    if mode == "uncoded":
        return encode_uncoded(lf)
    if mode == "center":
        return center_view(lf)
    raise CodingError(f"unknown input mode {mode!r}")
