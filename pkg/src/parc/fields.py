"""Uniform 2D grids, scalar fields, snapshots and trajectories.

Layout convention used throughout the package: arrays are row-major with
``values[i, j]`` at row ``i`` (y axis, increasing downward) and column ``j``
(x axis, increasing rightward).  Cell ``(i, j)`` is centred at
``(origin[0] + j*dx, origin[1] + i*dx)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import NonFiniteError, ShapeError, ValidationError


def check_finite(arr, what="array"):
    """Raise NonFiniteError if ``arr`` holds NaN or Inf; return it otherwise."""
    arr = np.asarray(arr)
    if not np.all(np.isfinite(arr)):
        bad = np.argwhere(~np.isfinite(arr))
        raise NonFiniteError(f"{what} has {len(bad)} non-finite entries, first at {tuple(bad[0])}")
    return arr


@dataclass(frozen=True)
class GridSpec:
    height: int
    width: int
    dx: float
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if int(self.height) < 4 or int(self.width) < 4:
            raise ValidationError(f"grid must be at least 4x4, got {self.height}x{self.width}")
        if not self.dx > 0 or not np.isfinite(self.dx):
            raise ValidationError(f"dx must be positive, got {self.dx}")
        object.__setattr__(self, "height", int(self.height))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "dx", float(self.dx))
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @classmethod
    def centered(cls, height, width, length_x, length_y=None):
        """Cell-centred grid covering ``[-Lx/2, Lx/2] x [-Ly/2, Ly/2]``.

        ``length_y`` must agree with ``height * dx`` since spacing is isotropic.
        """
        dx = length_x / width
        if length_y is not None and not np.isclose(length_y, height * dx):
            raise ValidationError("anisotropic spacing is not supported")
        ly = height * dx
        return cls(height, width, dx, (-length_x / 2 + dx / 2, -ly / 2 + dx / 2))

    @property
    def shape(self):
        return (self.height, self.width)

    @property
    def cell_area(self):
        return self.dx * self.dx

    @property
    def area(self):
        return self.height * self.width * self.cell_area

    def x(self):
        return self.origin[0] + self.dx * np.arange(self.width)

    def y(self):
        return self.origin[1] + self.dx * np.arange(self.height)

    def coords(self):
        """Return ``(X, Y)`` arrays of cell-centre coordinates, each H x W."""
        return np.meshgrid(self.x(), self.y(), indexing="xy")


@dataclass(frozen=True)
class Field:
    grid: GridSpec
    values: np.ndarray
    units: str = ""

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float64, copy=True)
        if vals.ndim == 1 and vals.size == self.grid.height * self.grid.width:
            vals = vals.reshape(self.grid.shape)
        if vals.shape != self.grid.shape:
            raise ShapeError(f"values shape {vals.shape} does not match grid {self.grid.shape}")
        check_finite(vals, "field values")
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    @classmethod
    def constant(cls, grid, value, units=""):
        return cls(grid, np.full(grid.shape, float(value)), units)

    @classmethod
    def from_function(cls, grid, fn, units=""):
        X, Y = grid.coords()
        return cls(grid, np.broadcast_to(fn(X, Y), grid.shape), units)

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)


def _same_grid(a: Field, b: Field):
    if a.grid != b.grid:
        raise ShapeError(f"grid mismatch: {a.grid} vs {b.grid}")


_BINARY = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
}


def elementwise(op, a: Field, b=None) -> Field:
    """Pointwise ``add``/``sub``/``mul`` (Field or scalar), ``scale`` (scalar) or ``abs``."""
    if op == "abs":
        return Field(a.grid, np.abs(a.values), a.units)
    if op == "scale":
        return Field(a.grid, a.values * float(b), a.units)
    if op not in _BINARY:
        raise ValidationError(f"unknown elementwise op {op!r}")
    if isinstance(b, Field):
        _same_grid(a, b)
        other = b.values
    else:
        other = float(b)
    return Field(a.grid, _BINARY[op](a.values, other), a.units)


def reduce(op, a: Field) -> float:
    if a.values.size == 0:
        raise ValidationError("cannot reduce an empty field")
    if op == "mean":
        return float(np.sum(a.values) / a.values.size)
    if op == "sum":
        return float(np.sum(a.values))
    if op == "max":
        return float(np.max(a.values))
    if op == "min":
        return float(np.min(a.values))
    raise ValidationError(f"unknown reduction {op!r}")


def masked_fill(a: Field, mask, value) -> Field:
    m = np.asarray(mask.values if isinstance(mask, Field) else mask)
    if m.shape != a.grid.shape:
        raise ShapeError(f"mask shape {m.shape} does not match grid {a.grid.shape}")
    if not np.all((m == 0) | (m == 1)):
        raise ValidationError("mask must contain only 0 and 1")
    return Field(a.grid, np.where(m == 1, float(value), a.values), a.units)


def disk_mask(grid: GridSpec, center, radius):
    """Binary array marking cells whose centre lies within ``radius`` of ``center``."""
    X, Y = grid.coords()
    return (((X - center[0]) ** 2 + (Y - center[1]) ** 2) <= radius * radius).astype(np.float64)


@dataclass(frozen=True)
class Snapshot:
    """Multi-channel state at one instant: two velocity channels plus state channels."""

    t: float
    velocity: tuple[Field, ...]
    state: tuple[Field, ...] = ()
    channel_names: tuple[str, ...] = ()

    def __post_init__(self):
        vel = tuple(self.velocity)
        st = tuple(self.state)
        if len(vel) != 2:
            raise ShapeError(f"velocity must have 2 channels, got {len(vel)}")
        grid = vel[0].grid
        for f in vel + st:
            if f.grid != grid:
                raise ShapeError("all snapshot channels must share one grid")
        names = tuple(self.channel_names) or default_channel_names(len(st))
        if len(names) != 2 + len(st):
            raise ShapeError(f"{len(names)} channel names for {2 + len(st)} channels")
        object.__setattr__(self, "velocity", vel)
        object.__setattr__(self, "state", st)
        object.__setattr__(self, "channel_names", names)
        object.__setattr__(self, "t", float(self.t))

    @property
    def grid(self) -> GridSpec:
        return self.velocity[0].grid

    @property
    def n_channels(self):
        return 2 + len(self.state)

    def channel(self, name) -> Field:
        return (self.velocity + self.state)[self.channel_names.index(name)]

    def to_array(self):
        """Stack channels into a ``C x H x W`` float64 array."""
        return np.stack([f.values for f in self.velocity + self.state])

    @classmethod
    def from_array(cls, arr, grid, t, channel_names=None, units=None):
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[0] < 2:
            raise ShapeError(f"expected C x H x W with C >= 2, got {arr.shape}")
        units = units or [""] * arr.shape[0]
        fields = [Field(grid, arr[c], units[c]) for c in range(arr.shape[0])]
        return cls(t, tuple(fields[:2]), tuple(fields[2:]),
                   tuple(channel_names) if channel_names else ())


def default_channel_names(n_state):
    return ("u_x", "u_y") + tuple(f"x{i}" for i in range(n_state))


@dataclass(frozen=True)
class Trajectory:
    snapshots: tuple[Snapshot, ...]
    dt: float
    constants: dict = field(default_factory=dict)

    def __post_init__(self):
        snaps = tuple(self.snapshots)
        if not snaps:
            raise ValidationError("trajectory needs at least one snapshot")
        if not self.dt > 0:
            raise ValidationError(f"dt must be positive, got {self.dt}")
        first = snaps[0]
        t0 = first.t
        for k, s in enumerate(snaps):
            if s.grid != first.grid or s.channel_names != first.channel_names:
                raise ShapeError(f"snapshot {k} layout differs from snapshot 0")
            expected = t0 + k * self.dt
            if abs(s.t - expected) > 4 * np.spacing(max(abs(expected), abs(t0), self.dt)):
                raise ValidationError(f"snapshot {k} at t={s.t!r}, expected {expected!r}")
        object.__setattr__(self, "snapshots", snaps)
        object.__setattr__(self, "dt", float(self.dt))

    def __len__(self):
        return len(self.snapshots)

    def __getitem__(self, k):
        return self.snapshots[k]

    @property
    def grid(self):
        return self.snapshots[0].grid

    @property
    def channel_names(self):
        return self.snapshots[0].channel_names

    @property
    def t0(self):
        return self.snapshots[0].t

    def times(self):
        return np.array([s.t for s in self.snapshots])

    def to_array(self):
        """``T x C x H x W`` float64 array."""
        return np.stack([s.to_array() for s in self.snapshots])

    @classmethod
    def from_array(cls, arr, grid, dt, t0=0.0, channel_names=None, constants=None):
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim != 4:
            raise ShapeError(f"expected T x C x H x W, got {arr.shape}")
        snaps = tuple(Snapshot.from_array(arr[k], grid, t0 + k * dt, channel_names)
                      for k in range(arr.shape[0]))
        return cls(snaps, dt, dict(constants or {}))


def stack_snapshots(snapshots: Sequence[Snapshot], dt, constants=None) -> Trajectory:
    return Trajectory(tuple(snapshots), dt, dict(constants or {}))
