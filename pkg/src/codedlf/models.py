"""FeatNet and NeRFNet as parameterized differentiable functions.

FeatNet is a fully convolutional residual net: a 3x3 stem, n_blocks
residual blocks at a fixed channel width with leaky ReLU, and a 1x1
projection to D*C channels reshaped into an [H,W,D,C] feature volume.
The projection is zero-initialized so the volume starts empty.

NeRFNet is a small MLP over (X,Y,Z, theta, phi, feature vector); the
luminance head is a sigmoid, the density head a softplus whose bias
starts at -1 so the initial field is mostly transparent. The viewpoint
(u_tilde, v_tilde) is fed directly as the angle pair.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Value


class ModelConfigError(ValueError):
    pass


@dataclass(frozen=True)
class FeatNetConfig:
    hidden_channels: int = 32
    n_blocks: int = 4
    kernel: int = 3
    depth_levels: int = 13     # D
    feature_channels: int = 8  # C
    lrelu_slope: float = 0.2

    def validate(self) -> None:
        if self.depth_levels < 2:
            raise ModelConfigError(f"depth_levels must be >= 2, got {self.depth_levels}")
        if self.feature_channels < 1:
            raise ModelConfigError("feature_channels must be >= 1")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ModelConfigError(f"kernel must be odd and positive, got {self.kernel}")
        if self.hidden_channels < 1 or self.n_blocks < 0:
            raise ModelConfigError("invalid FeatNet width/depth")

    def to_json_dict(self) -> dict:
        return {"hidden_channels": self.hidden_channels, "n_blocks": self.n_blocks,
                "kernel": self.kernel, "depth_levels": self.depth_levels,
                "feature_channels": self.feature_channels, "lrelu_slope": self.lrelu_slope}

    @classmethod
    def from_json_dict(cls, d: dict) -> "FeatNetConfig":
        return cls(**d)


@dataclass(frozen=True)
class NeRFNetConfig:
    hidden_layers: int = 4
    hidden_width: int = 64
    feature_channels: int = 8
    pe_frequencies: int = 0    # 0 disables positional encoding
    lrelu_slope: float = 0.2

    @property
    def input_dim(self) -> int:
        return 5 * (1 + 2 * self.pe_frequencies) + self.feature_channels

    def validate(self) -> None:
        if self.hidden_layers < 1 or self.hidden_width < 1:
            raise ModelConfigError("invalid NeRFNet depth/width")
        if self.pe_frequencies < 0:
            raise ModelConfigError("pe_frequencies must be >= 0")
        if self.pe_frequencies == 0 and self.hidden_width < self.feature_channels + 5:
            raise ModelConfigError(
                f"hidden_width {self.hidden_width} < C+5 with positional encoding off")

    def to_json_dict(self) -> dict:
        return {"hidden_layers": self.hidden_layers, "hidden_width": self.hidden_width,
                "feature_channels": self.feature_channels,
                "pe_frequencies": self.pe_frequencies, "lrelu_slope": self.lrelu_slope}

    @classmethod
    def from_json_dict(cls, d: dict) -> "NeRFNetConfig":
        return cls(**d)


def _kaiming_std(fan_in: int, slope: float) -> float:
    return float(np.sqrt(2.0 / ((1.0 + slope * slope) * fan_in)))


def init_params(featnet: FeatNetConfig, nerfnet: NeRFNetConfig, seed: int = 0,
                dtype=np.float64) -> ParamStore:
    """Kaiming fan-in init; FeatNet projection zeroed, density bias at -1."""
    featnet.validate()
    nerfnet.validate()
    if featnet.feature_channels != nerfnet.feature_channels:
        raise ModelConfigError("FeatNet and NeRFNet disagree on feature channels")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7341]))
    store = ParamStore()
    k, hc = featnet.kernel, featnet.hidden_channels
    slope = featnet.lrelu_slope

    def conv_param(name, cout, cin):
        std = _kaiming_std(cin * k * k, slope)
        store.add(f"{name}.w", rng.standard_normal((cout, cin, k, k)) * std, dtype=dtype)
        store.add(f"{name}.b", np.zeros(cout), dtype=dtype)

    conv_param("featnet.stem", hc, 1)
    for i in range(featnet.n_blocks):
        conv_param(f"featnet.block{i}.conv1", hc, hc)
        conv_param(f"featnet.block{i}.conv2", hc, hc)
    dc = featnet.depth_levels * featnet.feature_channels
    store.add("featnet.proj.w", np.zeros((dc, hc, 1, 1)), dtype=dtype)
    store.add("featnet.proj.b", np.zeros(dc), dtype=dtype)

    width = nerfnet.hidden_width
    in_dim = nerfnet.input_dim
    for i in range(nerfnet.hidden_layers):
        fan_in = in_dim if i == 0 else width
        # unit gain on the first layer (raw inputs are near unit scale), the
        # leaky-corrected gain afterwards: pre-activations stay near unit
        # variance through the whole chain
        std = (np.sqrt(1.0 / fan_in) if i == 0
               else _kaiming_std(fan_in, nerfnet.lrelu_slope))
        store.add(f"nerfnet.hidden{i}.w", rng.standard_normal((fan_in, width)) * std,
                  dtype=dtype)
        store.add(f"nerfnet.hidden{i}.b", np.zeros(width), dtype=dtype)
    # zero heads: the initial field is the constant (sigmoid(0), softplus(-1)),
    # a dim, mostly transparent start
    store.add("nerfnet.lum.w", np.zeros((width, 1)), dtype=dtype)
    store.add("nerfnet.lum.b", np.zeros(1), dtype=dtype)
    store.add("nerfnet.density.w", np.zeros((width, 1)), dtype=dtype)
    store.add("nerfnet.density.b", np.full(1, -1.0), dtype=dtype)
    return store


def featnet_forward(store: ParamStore, cfg: FeatNetConfig, image: np.ndarray) -> Value:
    """Normalized coded image [H,W] -> feature volume Value [H,W,D,C]."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ModelConfigError(f"FeatNet input must be [H,W], got shape {image.shape}")
    dtype = store["featnet.stem.w"].dtype
    h, w = image.shape
    pad = cfg.kernel // 2
    x = ad.constant(image[None, :, :], dtype=dtype)
    hcur = ad.leaky_relu(
        ad.conv2d(x, store["featnet.stem.w"], store["featnet.stem.b"], padding=pad),
        cfg.lrelu_slope)
    for i in range(cfg.n_blocks):
        y = ad.leaky_relu(
            ad.conv2d(hcur, store[f"featnet.block{i}.conv1.w"],
                      store[f"featnet.block{i}.conv1.b"], padding=pad),
            cfg.lrelu_slope)
        y = ad.conv2d(y, store[f"featnet.block{i}.conv2.w"],
                      store[f"featnet.block{i}.conv2.b"], padding=pad)
        hcur = ad.leaky_relu(ad.add(hcur, y), cfg.lrelu_slope)
    out = ad.conv2d(hcur, store["featnet.proj.w"], store["featnet.proj.b"], padding=0)
    vol = ad.reshape(ad.transpose(out, (1, 2, 0)),
                     (h, w, cfg.depth_levels, cfg.feature_channels))
    return vol


def positional_encoding(q: np.ndarray, n_freqs: int) -> np.ndarray:
    """[N,D] -> [N, D*(1+2L)]: raw coords plus sin/cos at 2^l * pi."""
    if n_freqs == 0:
        return q
    parts = [q]
    for level in range(n_freqs):
        s = (2.0 ** level) * np.pi
        parts.append(np.sin(s * q))
        parts.append(np.cos(s * q))
    return np.concatenate(parts, axis=1)


def nerfnet_forward(store: ParamStore, cfg: NeRFNetConfig, coords: np.ndarray,
                    angles: np.ndarray, features) -> tuple[Value, Value]:
    """Batched radiance query.

    coords [N,3] and angles [N,2] are plain arrays (no gradient); features
    is a Value or array [N,C]. Returns (luminance [N] in (0,1),
    density [N] >= 0).
    """
    coords = np.asarray(coords)
    angles = np.asarray(angles)
    if coords.ndim != 2 or coords.shape[1] != 3 or angles.shape != (coords.shape[0], 2):
        raise ModelConfigError(
            f"bad query shapes: coords {coords.shape}, angles {angles.shape}")
    dtype = store["nerfnet.hidden0.w"].dtype
    if not isinstance(features, Value):
        features = ad.constant(features, dtype=dtype)
    if features.shape != (coords.shape[0], cfg.feature_channels):
        raise ModelConfigError(
            f"feature shape {features.shape} != (N, {cfg.feature_channels})")
    raw = np.concatenate([coords, angles], axis=1).astype(dtype)
    encoded = ad.constant(positional_encoding(raw, cfg.pe_frequencies), dtype=dtype)
    h = ad.concat([encoded, features], axis=1)
    for i in range(cfg.hidden_layers):
        h = ad.leaky_relu(
            ad.add(ad.matmul(h, store[f"nerfnet.hidden{i}.w"]),
                   store[f"nerfnet.hidden{i}.b"]),
            cfg.lrelu_slope)
    lum = ad.sigmoid(ad.add(ad.matmul(h, store["nerfnet.lum.w"]), store["nerfnet.lum.b"]))
    density = ad.softplus(
        ad.add(ad.matmul(h, store["nerfnet.density.w"]), store["nerfnet.density.b"]))
    n = coords.shape[0]
    return ad.reshape(lum, (n,)), ad.reshape(density, (n,))


def nerfnet_query(store: ParamStore, cfg: NeRFNetConfig, x: float, y: float, z: float,
                  theta: float, phi: float, f: np.ndarray) -> tuple[float, float]:
    """Single-point convenience wrapper around the batched query."""
    lum, density = nerfnet_forward(store, cfg,
                                   np.array([[x, y, z]]), np.array([[theta, phi]]),
                                   np.asarray(f, dtype=np.float64)[None, :])
    return float(lum.data[0]), float(density.data[0])
