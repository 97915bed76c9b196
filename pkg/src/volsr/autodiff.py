"""A small reverse-mode automatic differentiation engine over numpy arrays.

Only the operators needed by the super-resolution networks and their losses
are provided. Volumetric tensors use the ``(N, C, D, H, W)`` layout and all
math runs in float64. Broadcasting is limited to scalars (Python numbers or
single-element tensors).
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager

import numpy as np
from scipy.linalg.blas import dgemm

from .errors import ShapeError, ValidationError

_ids = itertools.count()
_grad_enabled = True


@contextmanager
def no_grad():
    """Build no graph inside the block (inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "parents", "backward_fn", "node_id", "name")

    def __init__(self, value, requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.parents = ()
        self.backward_fn = None
        self.node_id = next(_ids)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size

    def item(self):
        return float(self.value.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(value, parents, backward_fn) -> Tensor:
    out = Tensor(value)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    return out


def _accumulate(t: Tensor, g):
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=np.float64)
    if g.shape != t.shape:
        # scalar broadcast: the upstream gradient is summed onto the scalar
        g = np.full(t.shape, g.sum())
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every reachable tensor that requires it."""
    if loss.size != 1:
        raise ValidationError(f"backward needs a scalar root, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for p in reversed(node.parents):
            if p.requires_grad and p.node_id not in seen:
                stack.append((p, False))
    loss.grad = np.ones(loss.shape)
    for node in reversed(order):
        if node.backward_fn is None or node.grad is None:
            continue
        node.backward_fn(node.grad)
        # interior gradients are not needed once propagated
        node.grad = None if node.parents else node.grad
    loss.grad = np.ones(loss.shape)


# ---------------------------------------------------------------------------
# elementwise


def _is_scalar(t: Tensor) -> bool:
    return t.size == 1


def _binary_shapes(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (only scalar broadcast)")


def _squeeze_scalar(t: Tensor):
    return t.value.reshape(()) if _is_scalar(t) and t.value.ndim else t.value


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "add")
    value = _squeeze_scalar(a) + _squeeze_scalar(b)

    def bw(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _result(value, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "sub")
    value = _squeeze_scalar(a) - _squeeze_scalar(b)

    def bw(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _result(value, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "mul")
    av, bv = _squeeze_scalar(a), _squeeze_scalar(b)

    def bw(g):
        _accumulate(a, g * bv)
        _accumulate(b, g * av)

    return _result(av * bv, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "div")
    av, bv = _squeeze_scalar(a), _squeeze_scalar(b)
    value = av / bv

    def bw(g):
        _accumulate(a, g / bv)
        _accumulate(b, -g * value / bv)

    return _result(value, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.value * c, (a,), lambda g: _accumulate(a, g * c))


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0  # subgradient 0 at exactly 0
    return _result(np.where(mask, a.value, 0.0), (a,), lambda g: _accumulate(a, g * mask))


def square(a: Tensor) -> Tensor:
    return _result(a.value * a.value, (a,), lambda g: _accumulate(a, 2.0 * g * a.value))


def sqrt_eps(a: Tensor, eps: float) -> Tensor:
    if not eps > 0:
        raise ValidationError("sqrt_eps needs eps > 0")
    value = np.sqrt(a.value + eps)
    return _result(value, (a,), lambda g: _accumulate(a, 0.5 * g / value))


# ---------------------------------------------------------------------------
# reductions and reshaping


def sum(a: Tensor) -> Tensor:  # noqa: A001
    return _result(np.array(a.value.sum()), (a,), lambda g: _accumulate(a, np.full(a.shape, float(g))))


def mean(a: Tensor) -> Tensor:
    n = a.size
    return _result(np.array(a.value.mean()), (a,), lambda g: _accumulate(a, np.full(a.shape, float(g) / n)))


def concat_channels(*tensors: Tensor) -> Tensor:
    if len(tensors) == 1 and isinstance(tensors[0], (list, tuple)):
        tensors = tuple(tensors[0])
    ref = tensors[0].shape
    for t in tensors:
        if t.value.ndim != 5 or t.shape[:1] + t.shape[2:] != ref[:1] + ref[2:]:
            raise ShapeError(f"concat_channels: incompatible shapes {[t.shape for t in tensors]}")
    sizes = [t.shape[1] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    value = np.concatenate([t.value for t in tensors], axis=1)

    def bw(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            _accumulate(t, g[:, lo:hi])

    return _result(value, tensors, bw)


def crop_center(a: Tensor, target) -> Tensor:
    """Crop the three trailing (spatial) axes to ``target``, centred."""
    target = tuple(int(t) for t in target)
    spatial = a.shape[-3:]
    if len(target) != 3 or any(t > n or t < 1 for t, n in zip(target, spatial)):
        raise ShapeError(f"crop_center: cannot crop {spatial} to {target}")
    starts = [(n - t) // 2 for n, t in zip(spatial, target)]
    idx = (Ellipsis,) + tuple(slice(s, s + t) for s, t in zip(starts, target))

    def bw(g):
        full = np.zeros(a.shape)
        full[idx] = g
        _accumulate(a, full)

    return _result(a.value[idx].copy(), (a,), bw)


def global_skip_add(inp: Tensor, residual: Tensor) -> Tensor:
    """``inp + residual`` for equal shapes (network-level skip connection)."""
    if inp.shape != residual.shape:
        raise ShapeError(f"global_skip_add: {inp.shape} vs {residual.shape}")
    return add(inp, residual)


def subsample2(a: Tensor) -> Tensor:
    """Keep every second voxel along each spatial axis (stride-2 decimation)."""
    idx = (Ellipsis, slice(None, None, 2), slice(None, None, 2), slice(None, None, 2))

    def bw(g):
        full = np.zeros(a.shape)
        full[idx] = g
        _accumulate(a, full)

    return _result(a.value[idx].copy(), (a,), bw)


def channel_unit_normalize(a: Tensor, eps: float = 1e-10) -> Tensor:
    """Scale each voxel's channel vector to unit length: ``a / sqrt(sum_c a^2 + eps)``."""
    norm = np.sqrt(np.sum(a.value * a.value, axis=1, keepdims=True) + eps)
    value = a.value / norm

    def bw(g):
        proj = np.sum(g * value, axis=1, keepdims=True)
        _accumulate(a, (g - value * proj) / norm)

    return _result(value, (a,), bw)


# ---------------------------------------------------------------------------
# convolution


def _triple(p):
    if np.isscalar(p):
        return (int(p),) * 3
    p = tuple(int(v) for v in p)
    if len(p) != 3:
        raise ValidationError(f"padding must be an int or a triple, got {p}")
    return p


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding=0) -> Tensor:
    """Stride-1 3D cross-correlation with zero padding.

    x: (N, Cin, D, H, W); weight: (Cout, Cin, kd, kh, kw); bias: (Cout,).

    Internally the padded input is stored channels-last and flattened, so each
    kernel tap is a constant row offset into one (rows, Cin) matrix. Every tap
    is then a single in-place GEMM on a contiguous slice; outputs are computed
    on the padded grid and the valid corner is cut out afterwards.
    """
    if x.value.ndim != 5 or weight.value.ndim != 5:
        raise ShapeError(f"conv3d expects 5-D input and weight, got {x.shape} and {weight.shape}")
    n, cin, d, h, w = x.shape
    cout, wcin, kd, kh, kw = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv3d: input has {cin} channels, weight expects {wcin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv3d: bias shape {bias.shape} != ({cout},)")
    pd, ph, pw = _triple(padding)
    dp, hp, wp = d + 2 * pd, h + 2 * ph, w + 2 * pw
    od, oh, ow = dp - kd + 1, hp - kh + 1, wp - kw + 1
    if min(od, oh, ow) < 1:
        raise ShapeError(f"conv3d: kernel {(kd, kh, kw)} larger than padded input {(dp, hp, wp)}")

    xt = np.zeros((n, dp, hp, wp, cin))
    xt[:, pd : pd + d, ph : ph + h, pw : pw + w, :] = x.value.transpose(0, 2, 3, 4, 1)
    xf = xt.reshape(-1, cin)
    total = xf.shape[0]
    taps = [(a, b, c) for a in range(kd) for b in range(kh) for c in range(kw)]
    offsets = [a * hp * wp + b * wp + c for a, b, c in taps]
    span = total - offsets[-1]
    wk = [np.asfortranarray(weight.value[:, :, a, b, c]) for a, b, c in taps]

    acc = np.zeros((total, cout))
    head = acc[:span]
    for k, off in enumerate(offsets):
        dgemm(1.0, wk[k], xf[off : off + span].T, beta=1.0, c=head.T, overwrite_c=1)
    value = acc.reshape(n, dp, hp, wp, cout)[:, :od, :oh, :ow, :].transpose(0, 4, 1, 2, 3)
    if bias is not None:
        value = value + bias.value[None, :, None, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g.sum(axis=(0, 2, 3, 4)))
        gfull = np.zeros((n, dp, hp, wp, cout))
        gfull[:, :od, :oh, :ow, :] = g.transpose(0, 2, 3, 4, 1)
        gf = gfull.reshape(-1, cout)[:span]
        if weight.requires_grad:
            gw = np.empty((cout, cin, kd, kh, kw))
            for (a, b, c), off in zip(taps, offsets):
                gw[:, :, a, b, c] = dgemm(1.0, gf.T, xf[off : off + span].T, trans_b=1)
            _accumulate(weight, gw)
        if x.requires_grad:
            gx = np.zeros((total, cin))
            for k, off in enumerate(offsets):
                dgemm(1.0, wk[k], gf.T, trans_a=1, beta=1.0, c=gx[off : off + span].T, overwrite_c=1)
            gx = gx.reshape(n, dp, hp, wp, cin)[:, pd : pd + d, ph : ph + h, pw : pw + w, :]
            _accumulate(x, gx.transpose(0, 4, 1, 2, 3))

    return _result(np.ascontiguousarray(value), parents, bw)


# ---------------------------------------------------------------------------
# finite-difference checking


def grad_check(f, point, eps: float = 1e-5) -> float:
    """Max relative error between backward() and central differences.

    ``f`` maps a list of Tensors to a scalar Tensor; ``point`` is an array or a
    list of arrays. Per coordinate the error is
    ``|analytic - numeric| / max(1e-8, |analytic| + |numeric|)``.
    """
    arrays = [np.array(p, dtype=np.float64) for p in (point if isinstance(point, (list, tuple)) else [point])]
    inputs = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = f(inputs)
    backward(loss)
    worst = 0.0
    for i, arr in enumerate(arrays):
        analytic = inputs[i].grad if inputs[i].grad is not None else np.zeros(arr.shape)
        flat = arr.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            fp = f([Tensor(a) for a in arrays]).item()
            flat[j] = orig - eps
            fm = f([Tensor(a) for a in arrays]).item()
            flat[j] = orig
            numeric = (fp - fm) / (2 * eps)
            an = analytic.reshape(-1)[j]
            err = abs(an - numeric) / max(1e-8, abs(an) + abs(numeric))
            worst = max(worst, err)
    return worst
