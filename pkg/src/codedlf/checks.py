"""Finite-difference verification of every autodiff op and the full pipeline.

Each op is probed on a small random double-precision instance; the loss is
a fixed random projection of the op output so every output element gets a
nonzero pull. The pipeline check runs the real path (synthetic scene ->
joint coding -> FeatNet -> ray rendering -> MSE) on a downsized model and
compares sampled parameter coordinates against central differences.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import coding
from .autodiff import Value, grad_check
from .lightfield import LayerSpec, MaskSpec, SceneSpec, synth_lightfield
from .models import FeatNetConfig, NeRFNetConfig, featnet_forward, init_params
from .rendering import RenderConfig, render_rays

OP_TOLERANCE = 1e-6
PIPELINE_TOLERANCE = 1e-4


def _proj_loss(out: Value, rng: np.random.Generator) -> Value:
    proj = ad.constant(rng.standard_normal(out.shape), dtype=out.dtype)
    return ad.sum_(ad.mul(out, proj))


def _param(rng, shape, scale=1.0) -> Value:
    return Value(rng.standard_normal(shape) * scale, requires_grad=True)


def op_checks(seed: int = 0, eps: float = 1e-5) -> dict[str, float]:
    """Max relative error per operator (f64, central differences)."""
    rng = np.random.default_rng(seed)
    results: dict[str, float] = {}

    def check(name, params, build):
        proj_rng = np.random.default_rng(seed + 1000 + len(results))
        sample = build()
        proj = ad.constant(proj_rng.standard_normal(sample.shape), dtype=sample.dtype)
        results[name] = grad_check(lambda: ad.sum_(ad.mul(build(), proj)), params,
                                   eps=eps, rng=np.random.default_rng(seed + 77))

    a = _param(rng, (3, 4))
    b = _param(rng, (3, 4))
    row = _param(rng, (4,))
    check("add", [a, row], lambda: ad.add(a, row))
    check("sub", [a, b], lambda: ad.sub(a, b))
    check("mul", [a, row], lambda: ad.mul(a, row))

    m1 = _param(rng, (3, 4))
    m2 = _param(rng, (4, 2))
    check("matmul", [m1, m2], lambda: ad.matmul(m1, m2))

    cx = _param(rng, (2, 6, 5))
    cw = _param(rng, (3, 2, 3, 3), scale=0.5)
    cb = _param(rng, (3,))
    check("conv2d", [cx, cw, cb], lambda: ad.conv2d(cx, cw, cb, padding=1))

    e = _param(rng, (3, 5))
    check("leaky_relu", [e], lambda: ad.leaky_relu(e, 0.2))
    check("relu", [e], lambda: ad.relu(e))
    check("sigmoid", [e], lambda: ad.sigmoid(e))
    check("softplus", [e], lambda: ad.softplus(e))
    check("exp", [e], lambda: ad.exp(e))

    c1 = _param(rng, (3, 2))
    c2 = _param(rng, (3, 3))
    check("concat", [c1, c2], lambda: ad.concat([c1, c2], axis=1))
    check("reshape", [a], lambda: ad.reshape(a, (2, 6)))
    check("transpose", [a], lambda: ad.transpose(a, (1, 0)))
    check("slice", [a], lambda: a[1:3, 0:2])
    check("sum", [a], lambda: ad.sum_(a, axis=1))
    check("mean", [a], lambda: ad.mean_(a, axis=0))
    check("cumsum_exclusive", [a], lambda: ad.cumsum_exclusive(a, axis=1))

    pred = _param(rng, (7,))
    target = ad.constant(rng.standard_normal(7))
    results["mse"] = grad_check(lambda: ad.mse(pred, target), [pred], eps=eps)

    vol = _param(rng, (4, 5, 3, 2))
    coords = rng.uniform(-1.2, 1.2, size=(24, 3))   # includes clamped points
    check("trilinear_gather", [vol], lambda: ad.trilinear_gather(vol, coords))
    return results


def pipeline_check(seed: int = 0, eps: float = 1e-5,
                   corrupt: bool = False) -> float:
    """Coded image -> FeatNet -> render_rays -> MSE, vs finite differences.

    `corrupt` is a test hook: it skews one analytic gradient entry per
    parameter before the comparison, which must drive the reported error
    far above tolerance (proves the checker can actually fail).
    """
    scene = SceneSpec(layers=(
        LayerSpec(disparity=1.5, texture="noise", seed=3, mask=MaskSpec("full", 0)),
        LayerSpec(disparity=-1.0, texture="checker", seed=4, mask=MaskSpec("disk", 5)),
    ))
    lf = synth_lightfield(scene, 3, 3, 8, 8)
    pattern = coding.make_default_pattern(2, 3, 3, 8, 8, tile=4, seed=seed)
    image = coding.normalize(coding.encode_joint(lf, pattern))

    feat_cfg = FeatNetConfig(hidden_channels=6, n_blocks=1, kernel=3,
                             depth_levels=4, feature_channels=3)
    nerf_cfg = NeRFNetConfig(hidden_layers=2, hidden_width=16, feature_channels=3)
    store = init_params(feat_cfg, nerf_cfg, seed=seed, dtype=np.float64)
    render_cfg = RenderConfig(n_train_samples=4)
    rays = np.array([[0.0, 0.0, 3.0, 4.0],
                     [1.0, -1.0, 2.0, 5.0],
                     [-1.0, 1.0, 6.0, 1.0]])
    targets = ad.constant(np.array([0.3, 0.6, 0.2]))

    def f():
        rng = np.random.default_rng(seed + 13)  # fixed per call: deterministic loss
        vol = featnet_forward(store, feat_cfg, image)
        rb = render_rays(vol, store, nerf_cfg, rays, 8, 8, render_cfg,
                         mode="train", rng=rng)
        return ad.mse(rb.ray_luminance, targets)

    if corrupt:
        loss = f()
        ad.backward(loss)
        worst = 0.0
        rng = np.random.default_rng(seed)
        for p in store.values():
            an = p.grad.copy()
            an.reshape(-1)[0] += 1.0   # skewed analytic gradient
            p.grad = None
            idx = [0]
            flat = p.data.reshape(-1)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + eps
                f_plus = float(f().data)
                flat[i] = orig - eps
                f_minus = float(f().data)
                flat[i] = orig
                fd = (f_plus - f_minus) / (2 * eps)
                num = abs(fd - an.reshape(-1)[i])
                worst = max(worst, num / max(abs(fd), abs(an.reshape(-1)[i]), 1e-8))
        return worst

    return grad_check(f, store, eps=eps, max_coords=6,
                      rng=np.random.default_rng(seed + 5))


def run_gradcheck_suite(seed: int = 0, eps: float = 1e-5) -> dict:
    ops = op_checks(seed=seed, eps=eps)
    pipe = pipeline_check(seed=seed, eps=eps)
    worst_name = max(ops, key=ops.get)
    passed = all(err < OP_TOLERANCE for err in ops.values()) and pipe < PIPELINE_TOLERANCE
    return {"ops": ops, "pipeline": pipe, "worst_op": worst_name,
            "worst_op_error": ops[worst_name], "op_tolerance": OP_TOLERANCE,
            "pipeline_tolerance": PIPELINE_TOLERANCE, "passed": bool(passed)}
