"""Reverse-mode automatic differentiation over dense numpy arrays.

The operator set is exactly what the coded light-field pipeline needs:
elementwise arithmetic with trailing-axis broadcasting, 2-D matmul,
stride-1 conv2d, the usual activations, shape ops, reductions, MSE, an
exclusive cumulative sum (for ray transmittance), and a trilinear volume
gather. The computation graph is the implicit DAG of parent links; every
Value carries a creation counter, and backward() visits the reachable
nodes once, in decreasing counter order (a valid reverse topological
order). After backward() the walked graph is freed, so a second backward
on the same loss raises GraphError rather than silently accumulating.

Values default to float64; the training pipeline opts into float32 for
speed. Coordinates passed to trilinear_gather are plain arrays and never
receive gradients: they are functions of ray geometry and the sampling
position, not of any trainable parameter.
"""

from __future__ import annotations

import itertools

import numpy as np

DEFAULT_DTYPE = np.float64

_SUPPORTED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class GraphError(RuntimeError):
    """Misuse of the computation graph (non-scalar loss, reuse after free)."""


class MissingGradientError(RuntimeError):
    """adam_step found a parameter whose gradient was never populated."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN/Inf while debug checks were enabled."""


_debug_finite = False
_grad_enabled = True
_counter = itertools.count()


def set_debug_checks(enabled: bool) -> None:
    """Enable NaN/Inf detection on every op output (slow; for tests)."""
    global _debug_finite
    _debug_finite = bool(enabled)


class no_grad:
    """Context manager: ops inside build no graph (pure inference)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Value:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_order", "_freed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _SUPPORTED_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        if _debug_finite and not np.all(np.isfinite(arr)):
            raise NonFiniteError("non-finite data in Value")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._order = next(_counter)
        self._freed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Value(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; all routed through the module-level ops
    def __add__(self, other):
        return add(self, _as_value(other, self.dtype))

    def __radd__(self, other):
        return add(_as_value(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_value(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_value(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_value(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_value(other, self.dtype), self)

    def __neg__(self):
        return mul(self, _as_value(-1.0, self.dtype))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis=axis, keepdims=keepdims)

    def backward(self):
        backward(self)


def _as_value(x, dtype) -> Value:
    if isinstance(x, Value):
        return x
    return Value(np.asarray(x, dtype=dtype))


def constant(data, dtype=None) -> Value:
    """A non-trainable Value (graph leaf with no gradient)."""
    return Value(data, requires_grad=False, dtype=dtype)


def _node(data, parents, backward_fn) -> Value:
    """Wrap an op result; records the graph only when a parent needs grad."""
    if _debug_finite and not np.all(np.isfinite(data)):
        raise NonFiniteError("non-finite op output")
    if _grad_enabled and any(p.requires_grad for p in parents):
        out = Value.__new__(Value)
        out.data = data
        out.grad = None
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._order = next(_counter)
        out._freed = False
        return out
    return Value(data)


_owned_grad_ids: set[int] = set()


def _accum(v: Value, g) -> None:
    if not v.requires_grad:
        return
    if v.grad is None:
        # adopt freshly allocated arrays; copy views/duplicates (a backward
        # fn may hand the same array to several parents)
        if (isinstance(g, np.ndarray) and g.flags["OWNDATA"]
                and g.dtype == v.data.dtype and id(g) not in _owned_grad_ids):
            v.grad = g
            _owned_grad_ids.add(id(g))
        else:
            v.grad = np.array(g, dtype=v.data.dtype, copy=True)
            _owned_grad_ids.add(id(v.grad))
    else:
        v.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a gradient back to `shape` under trailing-axis broadcasting."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(loss: Value) -> None:
    """Accumulate dLoss/dParam into every reachable requires_grad leaf.

    Visits the graph exactly once in reverse creation order, then frees
    the non-leaf nodes; re-running backward on the same loss raises.
    """
    if loss._freed:
        raise GraphError("graph already consumed by a previous backward; re-run the forward pass")
    if loss.data.size != 1:
        raise GraphError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any requires_grad Value")

    nodes = []
    seen = set()
    stack = [loss]
    while stack:
        v = stack.pop()
        if id(v) in seen:
            continue
        seen.add(id(v))
        nodes.append(v)
        stack.extend(p for p in v._parents if p.requires_grad)
    nodes.sort(key=lambda v: v._order, reverse=True)

    loss.grad = np.ones_like(loss.data)
    _owned_grad_ids.clear()
    try:
        for v in nodes:
            if v._backward is not None:
                v._backward(v.grad)
                # free the interior node; leaves keep their accumulated grads
                v._backward = None
                v._parents = ()
                v.grad = None
                v._freed = True
    finally:
        _owned_grad_ids.clear()


# ---------------------------------------------------------------------------
# elementwise arithmetic (trailing-axis broadcasting)

def add(a: Value, b: Value) -> Value:
    out = a.data + b.data

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _node(out, (a, b), bw)


def sub(a: Value, b: Value) -> Value:
    out = a.data - b.data

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _node(out, (a, b), bw)


def mul(a: Value, b: Value) -> Value:
    out = a.data * b.data
    ad, bd = a.data, b.data

    def bw(g):
        _accum(a, _unbroadcast(g * bd, ad.shape))
        _accum(b, _unbroadcast(g * ad, bd.shape))

    return _node(out, (a, b), bw)


def matmul(a: Value, b: Value) -> Value:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data
    ad, bd = a.data, b.data

    def bw(g):
        _accum(a, g @ bd.T)
        _accum(b, ad.T @ g)

    return _node(out, (a, b), bw)


# ---------------------------------------------------------------------------
# convolution

def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """[C,H,W] -> [C*kh*kw, Ho*Wo] patch matrix (valid windows)."""
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    c, ho, wo = win.shape[:3]
    return np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(c * kh * kw, ho * wo)


def conv2d(x: Value, w: Value, b: Value | None = None, padding: int = 0) -> Value:
    """Stride-1 2-D convolution: x [Cin,H,W], w [Cout,Cin,kh,kw], b [Cout]."""
    cin, h, wd = x.data.shape
    cout, cin_w, kh, kw = w.data.shape
    if cin_w != cin:
        raise ValueError(f"conv2d channel mismatch: input {cin}, kernel expects {cin_w}")
    p = int(padding)
    if p < 0 or p > kh - 1 or p > kw - 1:
        raise ValueError(f"conv2d padding {p} outside [0, kernel-1]")
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p))) if p else x.data
    cols = _im2col(xp, kh, kw)
    ho, wo = h + 2 * p - kh + 1, wd + 2 * p - kw + 1
    out = w.data.reshape(cout, -1) @ cols
    if b is not None:
        out = out + b.data[:, None]
    out = out.reshape(cout, ho, wo)
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        gm = g.reshape(cout, -1)
        _accum(w, (gm @ cols.T).reshape(w.data.shape))
        if b is not None:
            _accum(b, gm.sum(axis=1))
        if x.requires_grad:
            # dX is the full correlation of the output grad with flipped kernels
            q = kh - 1 - p
            gp = np.pad(g, ((0, 0), (q, q), (q, q))) if q else g
            cols2 = _im2col(gp, kh, kw)
            wf = np.ascontiguousarray(
                w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            ).reshape(cin, cout * kh * kw)
            _accum(x, (wf @ cols2).reshape(cin, h, wd))

    return _node(out, parents, bw)


# ---------------------------------------------------------------------------
# activations

def leaky_relu(x: Value, slope: float = 0.2) -> Value:
    pos = x.data >= 0
    out = np.where(pos, x.data, x.data * slope)

    def bw(g):
        _accum(x, np.where(pos, g, g * slope))

    return _node(out, (x,), bw)


def relu(x: Value) -> Value:
    return leaky_relu(x, slope=0.0)


def sigmoid(x: Value) -> Value:
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bw(g):
        _accum(x, g * out * (1.0 - out))

    return _node(out, (x,), bw)


def softplus(x: Value) -> Value:
    xd = x.data
    out = np.maximum(xd, 0.0) + np.log1p(np.exp(-np.abs(xd)))

    def bw(g):
        pos = xd >= 0
        s = np.empty_like(xd)
        s[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
        ex = np.exp(xd[~pos])
        s[~pos] = ex / (1.0 + ex)
        _accum(x, g * s)

    return _node(out, (x,), bw)


def exp(x: Value) -> Value:
    out = np.exp(x.data)

    def bw(g):
        _accum(x, g * out)

    return _node(out, (x,), bw)


# ---------------------------------------------------------------------------
# shape ops

def concat(values, axis: int = 0) -> Value:
    values = list(values)
    out = np.concatenate([v.data for v in values], axis=axis)
    sizes = [v.data.shape[axis] for v in values]

    def bw(g):
        offsets = np.cumsum(sizes)[:-1]
        for v, piece in zip(values, np.split(g, offsets, axis=axis)):
            _accum(v, piece)

    return _node(out, tuple(values), bw)


def reshape(x: Value, shape) -> Value:
    out = x.data.reshape(shape)
    orig = x.data.shape

    def bw(g):
        _accum(x, g.reshape(orig))

    return _node(out, (x,), bw)


def transpose(x: Value, axes) -> Value:
    out = np.transpose(x.data, axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        _accum(x, np.transpose(g, inv))

    return _node(out, (x,), bw)


def slice_(x: Value, key) -> Value:
    out = x.data[key]

    def bw(g):
        gz = np.zeros_like(x.data)
        gz[key] += g
        _accum(x, gz)

    return _node(out, (x,), bw)


# ---------------------------------------------------------------------------
# reductions

def sum_(x: Value, axis=None, keepdims: bool = False) -> Value:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, x.data.shape))

    return _node(out, (x,), bw)


def mean_(x: Value, axis=None, keepdims: bool = False) -> Value:
    out = x.data.mean(axis=axis, keepdims=keepdims)
    n = x.data.size if axis is None else np.prod(
        [x.data.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))]
    )

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g / n, x.data.shape))

    return _node(out, (x,), bw)


def mse(pred: Value, target: Value) -> Value:
    """Mean squared error over all elements (scalar output)."""
    if pred.data.shape != target.data.shape:
        raise ValueError(f"mse shape mismatch: {pred.data.shape} vs {target.data.shape}")
    d = pred.data - target.data
    out = np.asarray((d * d).mean(), dtype=pred.data.dtype)
    n = d.size

    def bw(g):
        gd = g * d * (2.0 / n)
        _accum(pred, gd)
        _accum(target, -gd)

    return _node(out, (pred, target), bw)


def cumsum_exclusive(x: Value, axis: int) -> Value:
    """out[..., i] = sum of x[..., j] for j < i along `axis`."""
    inc = np.cumsum(x.data, axis=axis)
    out = inc - x.data

    def bw(g):
        suffix = np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)
        _accum(x, suffix - g)

    return _node(out, (x,), bw)


# ---------------------------------------------------------------------------
# trilinear volume gather

def trilinear_gather(volume: Value, coords: np.ndarray) -> Value:
    """Sample a [H,W,D,C] volume at N continuous NDC points.

    coords is a plain [N,3] array of (X,Y,Z) in [-1,1]^3 with X along the
    width axis, Y along height, Z along depth; out-of-range coordinates
    clamp to the boundary. Differentiable w.r.t. the volume only.
    """
    if volume.data.ndim != 4:
        raise ValueError(f"trilinear_gather expects a [H,W,D,C] volume, got {volume.data.shape}")
    coords = np.asarray(coords)
    if coords.ndim != 2 or coords.shape[1] != 3:
        raise ValueError(f"coords must be [N,3], got {coords.shape}")
    if not np.all(np.isfinite(coords)):
        raise ValueError("non-finite coordinates in trilinear_gather")
    h, w, d, _ = volume.data.shape
    dt = volume.data.dtype
    c = np.clip(coords, -1.0, 1.0).astype(dt)
    gx = (c[:, 0] + 1.0) * (0.5 * (w - 1))
    gy = (c[:, 1] + 1.0) * (0.5 * (h - 1))
    gz = (c[:, 2] + 1.0) * (0.5 * (d - 1))

    def lower(g, n):
        i = np.floor(g).astype(np.int64)
        np.clip(i, 0, max(n - 2, 0), out=i)
        return i, (g - i).astype(dt)

    x0, fx = lower(gx, w)
    y0, fy = lower(gy, h)
    z0, fz = lower(gz, d)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    z1 = np.minimum(z0 + 1, d - 1)

    corners = []
    for yi, wy in ((y0, 1.0 - fy), (y1, fy)):
        for xi, wx in ((x0, 1.0 - fx), (x1, fx)):
            for zi, wz in ((z0, 1.0 - fz), (z1, fz)):
                corners.append((yi, xi, zi, wy * wx * wz))

    vol = volume.data
    out = np.zeros((coords.shape[0], vol.shape[3]), dtype=dt)
    for yi, xi, zi, wgt in corners:
        out += wgt[:, None] * vol[yi, xi, zi, :]

    def bw(g):
        gv = np.zeros_like(vol)
        for yi, xi, zi, wgt in corners:
            np.add.at(gv, (yi, xi, zi), wgt[:, None] * g)
        _accum(volume, gv)

    return _node(out, (volume,), bw)


# ---------------------------------------------------------------------------
# parameters and the optimizer

class ParamStore:
    """Named trainable Values with persistent Adam state."""

    def __init__(self):
        self._params: dict[str, Value] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, data, dtype=None) -> Value:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = Value(data, requires_grad=True, dtype=dtype)
        self._params[name] = p
        self._m[name] = np.zeros_like(p.data)
        self._v[name] = np.zeros_like(p.data)
        return p

    def __getitem__(self, name: str) -> Value:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self):
        return list(self._params)

    def values(self):
        return list(self._params.values())

    def items(self):
        return list(self._params.items())

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def moment_arrays(self, name: str):
        return self._m[name], self._v[name]

    def load_moments(self, name: str, m: np.ndarray, v: np.ndarray) -> None:
        p = self._params[name]
        if m.shape != p.data.shape or v.shape != p.data.shape:
            raise ValueError(f"Adam moment shape mismatch for {name!r}")
        self._m[name] = np.array(m, dtype=p.data.dtype)
        self._v[name] = np.array(v, dtype=p.data.dtype)


def adam_step(store: ParamStore, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update; consumes and clears the gradients."""
    for name, p in store.items():
        if p.grad is None:
            raise MissingGradientError(f"parameter {name!r} has no gradient")
    store.step_count += 1
    t = store.step_count
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in store.items():
        g = p.grad
        m = store._m[name]
        v = store._v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.grad = None


def grad_check(f, params, eps: float = 1e-5, max_coords: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Worst relative error of backward() vs central finite differences.

    `f` rebuilds a scalar loss from scratch on every call. When a
    parameter has more entries than `max_coords`, a random subset is
    probed. Relative error uses an absolute floor of 1e-8.
    """
    if isinstance(params, ParamStore):
        params = params.values()
    params = list(params)
    if rng is None:
        rng = np.random.default_rng(0)

    for p in params:
        p.grad = None
    loss = f()
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    for p in params:
        p.grad = None

    worst = 0.0
    for p, an in zip(params, analytic):
        n = p.data.size
        if max_coords is not None and n > max_coords:
            idxs = rng.choice(n, size=max_coords, replace=False)
        else:
            idxs = range(n)
        flat = p.data.reshape(-1)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(f().data)
            flat[i] = orig - eps
            f_minus = float(f().data)
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * eps)
            num = abs(fd - an.reshape(-1)[i])
            den = max(abs(fd), abs(an.reshape(-1)[i]), 1e-8)
            worst = max(worst, num / den)
    return worst
