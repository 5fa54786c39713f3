"""Second-order finite-difference operators on uniform grids.

The array-level kernels (``ddx``, ``ddy``, ``d2x``, ``d2y``, ``laplacian_array``)
act on the last two axes of any ``(..., H, W)`` array, so they serve the
metric suite, the DNS and the autodiff engine alike.  ``gradient``,
``laplacian``, ``advect`` and ``divergence`` are the Field-level wrappers.

Boundary modes:

``one_sided2``
    second-order one-sided differences on the first/last row or column.
``replicate``
    first derivatives copy the adjacent interior value onto the edge;
    second derivatives see the field padded by edge replication.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ShapeError, ValidationError
from .fields import Field

BOUNDARIES = ("one_sided2", "replicate")


@dataclass(frozen=True)
class StencilScheme:
    interior: str = "central2"
    boundary: str = "one_sided2"

    def __post_init__(self):
        if self.interior != "central2":
            raise ValidationError("only the central2 interior scheme is supported")
        if self.boundary not in BOUNDARIES:
            raise ValidationError(f"boundary must be one of {BOUNDARIES}, got {self.boundary!r}")


METRIC_SCHEME = StencilScheme(boundary="one_sided2")
MODEL_SCHEME = StencilScheme(boundary="replicate")


def _check_size(n):
    if n < 4:
        raise ValidationError(f"stencils need at least 4 points per axis, got {n}")


def _d1(f, dx, boundary):
    """First derivative along the last axis."""
    n = f.shape[-1]
    _check_size(n)
    out = np.empty_like(f, dtype=np.float64)
    out[..., 1:-1] = (f[..., 2:] - f[..., :-2]) / (2 * dx)
    if boundary == "one_sided2":
        # (-3 f0 + 4 f1 - f2) / 2dx, written in differences so constants give exactly 0
        out[..., 0] = (4 * (f[..., 1] - f[..., 0]) - (f[..., 2] - f[..., 0])) / (2 * dx)
        out[..., -1] = (f[..., -3] - f[..., -1] - 4 * (f[..., -2] - f[..., -1])) / (2 * dx)
    elif boundary == "replicate":
        out[..., 0] = out[..., 1]
        out[..., -1] = out[..., -2]
    else:
        raise ValidationError(f"unknown boundary {boundary!r}")
    return out


def _d2(f, dx, boundary):
    """Second derivative along the last axis."""
    n = f.shape[-1]
    _check_size(n)
    h2 = dx * dx
    out = np.empty_like(f, dtype=np.float64)
    out[..., 1:-1] = (f[..., 2:] - 2 * f[..., 1:-1] + f[..., :-2]) / h2
    if boundary == "one_sided2":
        d = [f[..., k] - f[..., 0] for k in (1, 2, 3)]
        out[..., 0] = (-5 * d[0] + 4 * d[1] - d[2]) / h2
        d = [f[..., -1 - k] - f[..., -1] for k in (1, 2, 3)]
        out[..., -1] = (-5 * d[0] + 4 * d[1] - d[2]) / h2
    elif boundary == "replicate":
        out[..., 0] = (f[..., 1] - f[..., 0]) / h2
        out[..., -1] = (f[..., -2] - f[..., -1]) / h2
    else:
        raise ValidationError(f"unknown boundary {boundary!r}")
    return out


def ddx(f, dx, boundary="one_sided2"):
    return _d1(np.asarray(f, dtype=np.float64), dx, boundary)


def ddy(f, dx, boundary="one_sided2"):
    f = np.asarray(f, dtype=np.float64)
    return np.swapaxes(_d1(np.swapaxes(f, -1, -2), dx, boundary), -1, -2)


def d2x(f, dx, boundary="replicate"):
    return _d2(np.asarray(f, dtype=np.float64), dx, boundary)


def d2y(f, dx, boundary="replicate"):
    f = np.asarray(f, dtype=np.float64)
    return np.swapaxes(_d2(np.swapaxes(f, -1, -2), dx, boundary), -1, -2)


def laplacian_array(f, dx, boundary="replicate"):
    f = np.asarray(f, dtype=np.float64)
    _check_size(f.shape[-1])
    _check_size(f.shape[-2])
    if boundary == "replicate":
        p = np.pad(f, [(0, 0)] * (f.ndim - 2) + [(1, 1), (1, 1)], mode="edge")
        return (p[..., 1:-1, 2:] + p[..., 1:-1, :-2] + p[..., 2:, 1:-1] + p[..., :-2, 1:-1]
                - 4 * f) / (dx * dx)
    return d2x(f, dx, boundary) + d2y(f, dx, boundary)


@lru_cache(maxsize=64)
def operator_matrix(kind, n, dx, boundary):
    """Dense ``n x n`` matrix ``M`` of a 1D stencil, so that ``op(f) == f @ M.T``
    along the last axis.  Used for adjoints in the autodiff engine."""
    eye = np.eye(n)
    fn = {"d1": _d1, "d2": _d2}[kind]
    # row i of fn(eye) is the operator applied to e_i, i.e. column i of M
    m = fn(eye, dx, boundary).T.copy()
    m.flags.writeable = False
    return m


# --- obstacle-aware kernels ------------------------------------------------

def _avail(valid, shift, axis):
    """valid[i + shift] along axis, False outside the grid."""
    out = np.zeros_like(valid)
    n = valid.shape[axis]
    src = [slice(None)] * valid.ndim
    dst = [slice(None)] * valid.ndim
    if shift > 0:
        src[axis] = slice(shift, n)
        dst[axis] = slice(0, n - shift)
    else:
        src[axis] = slice(0, n + shift)
        dst[axis] = slice(-shift, n)
    out[tuple(dst)] = valid[tuple(src)]
    return out


def _shift(f, shift, axis):
    out = np.zeros_like(f)
    n = f.shape[axis]
    src = [slice(None)] * f.ndim
    dst = [slice(None)] * f.ndim
    if shift > 0:
        src[axis] = slice(shift, n)
        dst[axis] = slice(0, n - shift)
    else:
        src[axis] = slice(0, n + shift)
        dst[axis] = slice(-shift, n)
    out[tuple(dst)] = f[tuple(src)]
    return out


def masked_d1(f, dx, obstacle, axis):
    """First derivative that never reads obstacle cells.

    Central where both neighbours are fluid, otherwise second-order one-sided
    pointing away from the obstacle (or grid edge), falling back to first
    order and finally to zero.  Obstacle cells themselves get zero.
    """
    f = np.asarray(f, dtype=np.float64)
    valid = np.asarray(obstacle) == 0
    p1, m1 = _avail(valid, 1, axis), _avail(valid, -1, axis)
    p2, m2 = p1 & _avail(valid, 2, axis), m1 & _avail(valid, -2, axis)
    fp1, fm1 = _shift(f, 1, axis), _shift(f, -1, axis)
    fp2, fm2 = _shift(f, 2, axis), _shift(f, -2, axis)
    out = np.zeros_like(f)
    choices = [
        (p1 & m1, (fp1 - fm1) / (2 * dx)),
        (p2, (-3 * f + 4 * fp1 - fp2) / (2 * dx)),
        (m2, (3 * f - 4 * fm1 + fm2) / (2 * dx)),
        (p1, (fp1 - f) / dx),
        (m1, (f - fm1) / dx),
    ]
    done = ~valid
    for cond, val in choices:
        use = cond & ~done
        out[use] = val[use]
        done |= use
    return out


def masked_d2(f, dx, obstacle, axis):
    f = np.asarray(f, dtype=np.float64)
    valid = np.asarray(obstacle) == 0
    p1, m1 = _avail(valid, 1, axis), _avail(valid, -1, axis)
    p2, m2 = p1 & _avail(valid, 2, axis), m1 & _avail(valid, -2, axis)
    fp1, fm1 = _shift(f, 1, axis), _shift(f, -1, axis)
    fp2, fm2 = _shift(f, 2, axis), _shift(f, -2, axis)
    h2 = dx * dx
    out = np.zeros_like(f)
    choices = [
        (p1 & m1, (fp1 - 2 * f + fm1) / h2),
        (p2, (f - 2 * fp1 + fp2) / h2),
        (m2, (f - 2 * fm1 + fm2) / h2),
    ]
    done = ~valid
    for cond, val in choices:
        use = cond & ~done
        out[use] = val[use]
        done |= use
    return out


# --- Field-level API --------------------------------------------------------

def _scheme(scheme):
    return METRIC_SCHEME if scheme is None else scheme


def _mask_values(mask):
    if mask is None:
        return None
    return np.asarray(mask.values if isinstance(mask, Field) else mask)


def gradient(f: Field, scheme: StencilScheme | None = None, mask=None):
    """Return ``(df/dx, df/dy)`` as Fields."""
    s = _scheme(scheme)
    m = _mask_values(mask)
    if m is None:
        gx = ddx(f.values, f.grid.dx, s.boundary)
        gy = ddy(f.values, f.grid.dx, s.boundary)
    else:
        gx = masked_d1(f.values, f.grid.dx, m, axis=1)
        gy = masked_d1(f.values, f.grid.dx, m, axis=0)
    return Field(f.grid, gx, f.units), Field(f.grid, gy, f.units)


def laplacian(f: Field, scheme: StencilScheme | None = None, mask=None):
    s = MODEL_SCHEME if scheme is None else scheme
    m = _mask_values(mask)
    if m is None:
        vals = laplacian_array(f.values, f.grid.dx, s.boundary)
    else:
        vals = masked_d2(f.values, f.grid.dx, m, 1) + masked_d2(f.values, f.grid.dx, m, 0)
    return Field(f.grid, vals, f.units)


def _pair_grid(u):
    if len(u) != 2:
        raise ShapeError("velocity must have two components")
    if u[0].grid != u[1].grid:
        raise ShapeError("velocity components on different grids")
    return u[0].grid


def advect(u, f: Field, scheme: StencilScheme | None = None, mask=None):
    """``u_x * df/dx + u_y * df/dy``."""
    grid = _pair_grid(u)
    if f.grid != grid:
        raise ShapeError("advected field and velocity on different grids")
    gx, gy = gradient(f, scheme, mask)
    return Field(grid, u[0].values * gx.values + u[1].values * gy.values, f.units)


def divergence(u, scheme: StencilScheme | None = None, mask=None):
    grid = _pair_grid(u)
    gxx, _ = gradient(u[0], scheme, mask)
    _, gyy = gradient(u[1], scheme, mask)
    return Field(grid, gxx.values + gyy.values, u[0].units)
