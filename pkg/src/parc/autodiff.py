"""A small define-by-run reverse-mode differentiation engine.

Only what the model needs: elementwise arithmetic with limited broadcasting,
tanh/relu/softplus, channel concat/slice, 2D convolution with replicate
padding, the finite-difference stencils as fixed linear operators, and
scalar reductions.  Tensors are numpy float64 arrays, normally shaped
``N x C x H x W``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import fdops
from .errors import NonFiniteError, ShapeError, ValidationError


class Tensor:
    __slots__ = ("value", "grad", "parents", "backward_fn", "name", "requires_grad")

    def __init__(self, value, parents=(), backward_fn=None, name=None, requires_grad=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.name = name
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def parameter(value, name):
    return Tensor(np.array(value, dtype=np.float64), name=name, requires_grad=True)


def constant(value):
    return Tensor(value)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(value, parents, backward_fn):
    parents = tuple(parents)
    if not any(p.requires_grad for p in parents):
        return Tensor(value)
    return Tensor(value, parents, backward_fn)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (the inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# --- elementwise ----------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.value + b.value

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _make(out, (a, b), back)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.value - b.value

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    return _make(out, (a, b), back)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    out = av * bv

    def back(g):
        return _unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)
    return _make(out, (a, b), back)


def scale(a, c):
    a = as_tensor(a)
    c = float(c)
    return _make(a.value * c, (a,), lambda g: (g * c,))


def absolute(a):
    a = as_tensor(a)
    sgn = np.sign(a.value)
    return _make(np.abs(a.value), (a,), lambda g: (g * sgn,))


def tanh(a):
    a = as_tensor(a)
    y = np.tanh(a.value)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),))


def relu(a):
    a = as_tensor(a)
    pos = a.value > 0
    return _make(np.where(pos, a.value, 0.0), (a,), lambda g: (g * pos,))


def softplus(a):
    a = as_tensor(a)
    x = a.value
    y = np.logaddexp(0.0, x)
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    return _make(y, (a,), lambda g: (g * sig,))


def activation(a, kind):
    if kind == "tanh":
        return tanh(a)
    if kind == "relu":
        return relu(a)
    raise ValidationError(f"unknown activation {kind!r}")


# --- shape plumbing -----------------------------------------------------------

def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.value for t in tensors], axis=axis)
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))
    return _make(out, tensors, back)


def channels(a, start, stop):
    """Slice channels ``start:stop`` along axis 1."""
    a = as_tensor(a)
    out = a.value[:, start:stop]

    def back(g):
        full = np.zeros_like(a.value)
        full[:, start:stop] = g
        return (full,)
    return _make(out.copy(), (a,), back)


# --- reductions -------------------------------------------------------------

def total(a):
    a = as_tensor(a)
    shape = a.shape
    return _make(np.sum(a.value), (a,), lambda g: (np.full(shape, float(g)),))


def mean(a):
    a = as_tensor(a)
    n = a.value.size
    shape = a.shape
    return _make(np.sum(a.value) / n, (a,), lambda g: (np.full(shape, float(g) / n),))


def l1_mean(a):
    """Mean absolute value, the reduction used by the training losses."""
    return mean(absolute(a))


# --- convolution -------------------------------------------------------------

@dataclass
class ConvLayer:
    """Cross-correlation weights ``out x in x kh x kw`` plus bias, stride 1,
    replicate padding."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 4:
            raise ShapeError("conv weight must be out x in x kh x kw")
        kh, kw = self.weight.shape[2:]
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValidationError(f"kernel size must be odd, got {kh}x{kw}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ShapeError("bias length must equal output channels")

    @property
    def in_channels(self):
        return self.weight.shape[1]

    @property
    def out_channels(self):
        return self.weight.shape[0]


def _pad_replicate(x, ph, pw):
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)), mode="edge")


def _unpad_replicate(gp, ph, pw):
    """Adjoint of edge-replicate padding: fold the halo back onto the edges."""
    if ph == 0 and pw == 0:
        return gp
    g = gp.copy()
    if ph:
        g[:, :, ph, :] += g[:, :, :ph, :].sum(axis=2)
        g[:, :, -ph - 1, :] += g[:, :, -ph:, :].sum(axis=2)
        g = g[:, :, ph:-ph, :]
    if pw:
        g[:, :, :, pw] += g[:, :, :, :pw].sum(axis=3)
        g[:, :, :, -pw - 1] += g[:, :, :, -pw:].sum(axis=3)
        g = g[:, :, :, pw:-pw]
    return g


def conv2d(x, weight, bias=None):
    """Stride-1 cross-correlation with replicate padding; output keeps H x W."""
    x, weight = as_tensor(x), as_tensor(weight)
    xv, wv = x.value, weight.value
    if xv.ndim != 4:
        raise ShapeError(f"conv2d input must be N x C x H x W, got {xv.shape}")
    n, c, h, w = xv.shape
    o, ci, kh, kw = wv.shape
    if ci != c:
        raise ShapeError(f"conv2d expects {ci} input channels, got {c}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValidationError("kernel size must be odd")
    ph, pw = kh // 2, kw // 2
    hp, wp = h + 2 * ph, w + 2 * pw
    # Channels-last padded image flattened to rows; the window at output pixel p
    # starts at padded row p, so tap (a, b) is the contiguous slice shifted by
    # a * wp + b.  Rows whose window wraps past an image edge are discarded.
    xp = np.pad(xv.transpose(0, 2, 3, 1), ((0, 0), (ph, ph), (pw, pw), (0, 0)), mode="edge")
    xp = xp.reshape(n * hp * wp, c)
    full = n * hp * wp
    length = full - (kh - 1) * wp - (kw - 1)
    taps = [(a, b, a * wp + b) for a in range(kh) for b in range(kw)]
    wtaps = {(a, b): np.ascontiguousarray(wv[:, :, a, b].T) for a, b, _ in taps}
    acc = np.zeros((full, o))
    for a, b, off in taps:
        acc[:length] += xp[off:off + length] @ wtaps[a, b]
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        acc += bias.value
        parents.append(bias)
    out = np.ascontiguousarray(acc.reshape(n, hp, wp, o)[:, :h, :w].transpose(0, 3, 1, 2))

    def back(g):
        gfull = np.zeros((n, hp, wp, o))
        gfull[:, :h, :w] = g.transpose(0, 2, 3, 1)
        gfull = gfull.reshape(full, o)[:length]
        gw = np.empty_like(wv)
        gxp = np.zeros((full, c))
        for a, b, off in taps:
            gw[:, :, a, b] = gfull.T @ xp[off:off + length]
            gxp[off:off + length] += gfull @ wtaps[a, b].T
        gx = _unpad_replicate(gxp.reshape(n, hp, wp, c).transpose(0, 3, 1, 2), ph, pw)
        grads = [np.ascontiguousarray(gx), gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)
    return _make(out, parents, back)


def conv_layer(x, layer: ConvLayer):
    return conv2d(x, Tensor(layer.weight), Tensor(layer.bias))


# --- stencils as linear operators --------------------------------------------

def _stencil(a, kind, axis, dx, boundary):
    a = as_tensor(a)
    v = a.value
    if axis == "x":
        out = fdops.ddx(v, dx, boundary) if kind == "d1" else fdops.d2x(v, dx, boundary)
        m = fdops.operator_matrix(kind, v.shape[-1], dx, boundary)
        return _make(out, (a,), lambda g: (g @ m,))
    out = fdops.ddy(v, dx, boundary) if kind == "d1" else fdops.d2y(v, dx, boundary)
    m = fdops.operator_matrix(kind, v.shape[-2], dx, boundary)
    return _make(out, (a,), lambda g: (m.T @ g,))


def grad_x(a, dx, boundary="replicate"):
    return _stencil(a, "d1", "x", dx, boundary)


def grad_y(a, dx, boundary="replicate"):
    return _stencil(a, "d1", "y", dx, boundary)


def laplacian(a, dx, boundary="replicate"):
    a = as_tensor(a)
    v = a.value
    out = fdops.laplacian_array(v, dx, boundary)
    mx = fdops.operator_matrix("d2", v.shape[-1], dx, boundary)
    my = fdops.operator_matrix("d2", v.shape[-2], dx, boundary)
    return _make(out, (a,), lambda g: (g @ mx + my.T @ g,))


def advect(ux, uy, f, dx, boundary="replicate"):
    """``ux * df/dx + uy * df/dy`` for N x C x H x W ``f`` and N x 1 x H x W velocities."""
    return add(mul(ux, grad_x(f, dx, boundary)), mul(uy, grad_y(f, dx, boundary)))


# --- backward pass --------------------------------------------------------------

def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor):
    """Reverse sweep from a scalar ``loss``.

    Returns ``{name: gradient}`` for every named leaf that requires grad.
    Leaf values are never modified.
    """
    if loss.value.shape != ():
        raise ShapeError(f"backward needs a scalar root, got shape {loss.shape}")
    order = _topo_order(loss)
    for node in order:
        node.grad = None
    loss.grad = np.array(1.0)
    grads = {}
    for node in reversed(order):
        g = node.grad
        if g is None:
            continue
        if node.backward_fn is None:
            if node.name is not None:
                grads[node.name] = grads.get(node.name, 0.0) + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if not parent.requires_grad:
                continue
            parent.grad = pg if parent.grad is None else parent.grad + pg
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name}")
    return grads


# --- optimizer ------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState):
    """One bias-corrected Adam update.

    Parameters without an entry in ``grads`` are left unchanged.  Returns the
    new parameter dict; ``state`` is advanced in place and also returned.
    """
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    out = dict(params)
    for name, g in grads.items():
        p = params[name]
        g = np.asarray(g, dtype=np.float64)
        if g.shape != np.shape(p):
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {np.shape(p)}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        out[name] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return out, state


# --- verification harness -------------------------------------------------------

@dataclass
class GradCheckReport:
    errors: dict  # per block: ||analytic - numeric|| / max(||analytic||, ||numeric||, floor)
    tolerance: float
    elementwise: dict = field(default_factory=dict)  # per block: worst single-entry relative error

    @property
    def max_error(self):
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def max_elementwise(self):
        return max(self.elementwise.values()) if self.elementwise else 0.0

    @property
    def passed(self):
        return self.max_error <= self.tolerance

    def lines(self):
        return [f"{name}: rel err {err:.3e} (worst entry {self.elementwise.get(name, 0.0):.3e})"
                for name, err in sorted(self.errors.items())]


def grad_check(forward, params: dict, tolerance=1e-5, h=1e-6, floor=1e-8, names=None):
    """Compare ``backward`` against central finite differences.

    ``forward(tensors)`` receives ``{name: parameter Tensor}`` and returns a
    scalar Tensor.  The error of a block is the 2-norm relative error
    ``||analytic - numeric|| / max(||analytic||, ||numeric||, floor)``.  The
    worst single-entry relative error is kept as a diagnostic: entries far
    below the block scale sit at the finite-difference round-off level
    (about ``eps * |L| / h``) and cannot be resolved individually.
    """
    names = list(params) if names is None else list(names)
    tensors = {k: parameter(v, k) for k, v in params.items()}
    analytic = backward(forward(tensors))
    errors, worst = {}, {}
    for name in names:
        base = np.array(params[name], dtype=np.float64)
        num = np.zeros_like(base)
        flat = base.reshape(-1)
        for i in range(flat.size):
            vals = []
            for sign in (1.0, -1.0):
                pert = flat.copy()
                pert[i] += sign * h
                trial = {k: Tensor(v) for k, v in params.items()}
                trial[name] = Tensor(pert.reshape(base.shape))
                vals.append(float(forward(trial).value))
            num.reshape(-1)[i] = (vals[0] - vals[1]) / (2 * h)
        ana = np.asarray(analytic.get(name, np.zeros_like(base)))
        diff = ana - num
        scale = max(np.linalg.norm(ana), np.linalg.norm(num), floor)
        errors[name] = float(np.linalg.norm(diff) / scale)
        denom = np.maximum(np.maximum(np.abs(ana), np.abs(num)), floor)
        worst[name] = float(np.max(np.abs(diff) / denom))
    return GradCheckReport(errors, tolerance, worst)
