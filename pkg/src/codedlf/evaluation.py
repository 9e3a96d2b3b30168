"""Quality metrics, viewpoint-grid evaluation, heat maps, ablation tables.

PSNR is 10*log10(peak^2 / MSE) with an infinity sentinel for identical
images. SSIM is the uniform-window variant: 8x8 windows, stride 1, valid
windows only, population statistics, C1=(k1*peak)^2, C2=(k2*peak)^2; the
paper names no SSIM flavor so this one is pinned here. Grid PSNR/SSIM
means average per-view scores over views (and callers average over
scenes).
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from . import coding
from ._colormap import HEATMAP_TABLE
from .lightfield import SceneSpec, synth_lightfield, synth_view
from .rendering import render_view
from .training import Checkpoint, checkpoint_feature_volume


class EvalError(Exception):
    pass


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise EvalError(f"psnr shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def ssim(a: np.ndarray, b: np.ndarray, window: int = 8, k1: float = 0.01,
         k2: float = 0.03, peak: float = 1.0) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise EvalError(f"ssim shape mismatch: {a.shape} vs {b.shape}")
    if min(a.shape) < window:
        raise EvalError(f"image {a.shape} smaller than {window}x{window} window")
    wa = np.lib.stride_tricks.sliding_window_view(a, (window, window))
    wb = np.lib.stride_tricks.sliding_window_view(b, (window, window))
    mu_a = wa.mean(axis=(-1, -2))
    mu_b = wb.mean(axis=(-1, -2))
    var_a = np.maximum((wa * wa).mean(axis=(-1, -2)) - mu_a * mu_a, 0.0)
    var_b = np.maximum((wb * wb).mean(axis=(-1, -2)) - mu_b * mu_b, 0.0)
    cov = (wa * wb).mean(axis=(-1, -2)) - mu_a * mu_b
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    score = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2))
    return float(score.mean())


# ---------------------------------------------------------------------------
# viewpoint grids

def grid_viewpoints(m: int, step: float) -> np.ndarray:
    """[M] symmetric viewpoint coordinates: (i - (M-1)/2) * step."""
    return (np.arange(m) - (m - 1) / 2.0) * step


def corner_mask(m: int, per_corner: int = 2) -> np.ndarray:
    """Boolean [M,M] mask of the per_corner^2 viewpoints at each corner."""
    edge = np.zeros(m, dtype=bool)
    edge[:per_corner] = True
    edge[m - per_corner:] = True
    return np.outer(edge, edge)


@dataclass
class EvalReport:
    checkpoint: str
    scene: str
    m: int
    step: float
    psnr_grid: list            # [M][M] floats (inf allowed)
    ssim_grid: list
    mean_psnr: float
    mean_ssim: float
    warnings: list = field(default_factory=list)

    def to_json_dict(self) -> dict:
        def enc(x):
            return "inf" if math.isinf(x) else x
        return {"checkpoint": self.checkpoint, "scene": self.scene,
                "grid": {"m": self.m, "step": self.step},
                "psnr": [[enc(x) for x in row] for row in self.psnr_grid],
                "ssim": [[float(x) for x in row] for row in self.ssim_grid],
                "mean_psnr": enc(self.mean_psnr), "mean_ssim": self.mean_ssim,
                "warnings": list(self.warnings)}

    @classmethod
    def from_json_dict(cls, d: dict) -> "EvalReport":
        def dec(x):
            return math.inf if x == "inf" else float(x)
        return cls(checkpoint=d["checkpoint"], scene=d["scene"],
                   m=int(d["grid"]["m"]), step=float(d["grid"]["step"]),
                   psnr_grid=[[dec(x) for x in row] for row in d["psnr"]],
                   ssim_grid=[[float(x) for x in row] for row in d["ssim"]],
                   mean_psnr=dec(d["mean_psnr"]), mean_ssim=float(d["mean_ssim"]),
                   warnings=list(d.get("warnings", [])))

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_json_dict(), f, indent=2)

    @classmethod
    def load(cls, path: str) -> "EvalReport":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_json_dict(json.load(f))

    def psnr_array(self) -> np.ndarray:
        return np.asarray(self.psnr_grid, dtype=np.float64)

    def center_psnr(self) -> float:
        return float(self.psnr_array()[self.m // 2, self.m // 2])

    def corner_psnr(self, per_corner: int = 2) -> float:
        return float(self.psnr_array()[corner_mask(self.m, per_corner)].mean())


def eval_grid(ckpt: Checkpoint, scene: SceneSpec, m: int = 13, step: float = 0.5,
              height: int = 48, width: int = 48, checkpoint_id: str = "",
              scene_id: str = "") -> EvalReport:
    """Encode the scene with the checkpoint's camera, render an MxM viewpoint
    grid and score each view against the synthetic ground truth."""
    scene.validate(ckpt.render.t_min, ckpt.render.t_max)
    grid_u = int(ckpt.meta.get("grid_u", 5))
    grid_v = int(ckpt.meta.get("grid_v", 5))
    lf = synth_lightfield(scene, grid_u, grid_v, height, width)
    pattern = ckpt.pattern.with_size(height, width) if ckpt.pattern is not None else None
    image = coding.normalize(coding.encode(lf, ckpt.input_mode, pattern))
    dtype = np.float32 if ckpt.meta.get("dtype", "float32") == "float32" else np.float64
    volume, store = checkpoint_feature_volume(ckpt, image.astype(dtype))

    warnings = []
    vps = grid_viewpoints(m, step)
    max_d = max(abs(la.disparity) for la in scene.layers)
    if max_d * float(np.max(np.abs(vps))) > width / 2.0:
        warnings.append(
            f"viewpoint grid (|u|<={np.max(np.abs(vps))}) shifts layers beyond "
            f"half the {width}px image for |disparity|={max_d}")

    psnr_grid = np.empty((m, m))
    ssim_grid = np.empty((m, m))
    for i, ut in enumerate(vps):
        for j, vt in enumerate(vps):
            img, _ = render_view(volume, store, ckpt.nerfnet, (ut, vt),
                                 width, height, ckpt.render)
            gt = synth_view(scene, (ut, vt), height, width)
            psnr_grid[i, j] = psnr(img, gt)
            ssim_grid[i, j] = ssim(img, gt)
    return EvalReport(checkpoint=checkpoint_id, scene=scene_id, m=m, step=step,
                      psnr_grid=psnr_grid.tolist(), ssim_grid=ssim_grid.tolist(),
                      mean_psnr=float(psnr_grid.mean()),
                      mean_ssim=float(ssim_grid.mean()), warnings=warnings)


# ---------------------------------------------------------------------------
# heat maps

def heatmap_png_bytes(grid, cell: int = 24) -> bytes:
    """Pure function of the score grid: normalized, colormapped, upsampled."""
    g = np.asarray(grid, dtype=np.float64)
    finite = np.isfinite(g)
    norm = np.full(g.shape, 1.0)
    if finite.any():
        lo = float(g[finite].min())
        hi = float(g[finite].max())
        if hi > lo:
            norm[finite] = (g[finite] - lo) / (hi - lo)
        else:
            norm[finite] = 0.5
    idx = np.round(norm * 255).astype(np.int64)
    table = np.asarray(HEATMAP_TABLE, dtype=np.uint8)
    rgb = table[idx]
    big = np.kron(rgb, np.ones((cell, cell, 1), dtype=np.uint8))
    buf = io.BytesIO()
    Image.fromarray(big, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def save_heatmap(grid, path: str, cell: int = 24) -> None:
    with open(path, "wb") as f:
        f.write(heatmap_png_bytes(grid, cell))


# ---------------------------------------------------------------------------
# ablation comparison

@dataclass
class AblationRow:
    scene: str
    variant: str
    mean_psnr: float
    mean_ssim: float
    center_psnr: float
    corner_psnr: float


@dataclass
class AblationTable:
    rows: list

    CSV_FIELDS = ("scene", "variant", "mean_psnr", "mean_ssim",
                  "center_psnr", "corner_psnr")

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.CSV_FIELDS)
        for r in self.rows:
            writer.writerow([r.scene, r.variant, repr(r.mean_psnr), repr(r.mean_ssim),
                             repr(r.center_psnr), repr(r.corner_psnr)])
        return buf.getvalue()

    def to_markdown(self) -> str:
        lines = ["| " + " | ".join(self.CSV_FIELDS) + " |",
                 "|" + "---|" * len(self.CSV_FIELDS)]
        for r in self.rows:
            lines.append(f"| {r.scene} | {r.variant} | {r.mean_psnr:.2f} | "
                         f"{r.mean_ssim:.4f} | {r.center_psnr:.2f} | {r.corner_psnr:.2f} |")
        return "\n".join(lines) + "\n"

    def variant_mean(self, variant: str, attr: str = "corner_psnr") -> float:
        vals = [getattr(r, attr) for r in self.rows if r.variant == variant]
        if not vals:
            raise EvalError(f"no rows for variant {variant!r}")
        return float(np.mean(vals))


def compare_ablations(scenes, ckpts: dict, m: int = 13, step: float = 0.5,
                      height: int = 48, width: int = 48) -> AblationTable:
    """Grid-evaluate every (scene, variant) pair; scenes must be nonempty."""
    scenes = list(scenes)
    if not scenes:
        raise EvalError("empty scene set")
    if not ckpts:
        raise EvalError("no checkpoints to compare")
    rows = []
    for si, scene in enumerate(scenes):
        for variant, ckpt in ckpts.items():
            report = eval_grid(ckpt, scene, m=m, step=step, height=height,
                               width=width, checkpoint_id=variant,
                               scene_id=f"scene{si}")
            rows.append(AblationRow(scene=f"scene{si}", variant=variant,
                                    mean_psnr=report.mean_psnr,
                                    mean_ssim=report.mean_ssim,
                                    center_psnr=report.center_psnr(),
                                    corner_psnr=report.corner_psnr()))
    return AblationTable(rows=rows)


def write_ablation_outputs(table: AblationTable, out_dir: str,
                           basename: str = "ablations") -> tuple[str, str]:
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, basename + ".csv")
    md_path = os.path.join(out_dir, basename + ".md")
    with open(csv_path, "w", encoding="utf-8") as f:
        f.write(table.to_csv())
    with open(md_path, "w", encoding="utf-8") as f:
        f.write(table.to_markdown())
    return csv_path, md_path
