"""Ground-truth data: 2D viscous Burgers DNS, manufactured solutions, Taylor-Green fields.

The Burgers solver is backward Euler in time.  Each substep solves the
nonlinear system

    u - u_n + h * A(u) u - (h / R) * Lap(u) = 0

by Picard iteration: advection is lagged to the previous iterate and the
remaining symmetric diffusion system ``(I - h/R Lap) u = rhs`` is solved with
conjugate gradients on the interior unknowns (Dirichlet zero boundary).
``A`` is first-order upwind, which makes the converged step satisfy a
discrete maximum principle.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import cg

from . import fdops
from .dataset import Dataset
from .errors import SolverError, ValidationError
from .fields import Field, GridSpec, Snapshot, Trajectory, check_finite

# PDE constants for the 2D Burgers sweeps (R in cm^2/s, a in cm/s, w in cm)
TRAIN_PARAMS = {
    "R": [1000.0, 2500.0, 5000.0, 7500.0, 10000.0],
    "a": [0.5, 0.6, 0.7, 0.8, 0.9],
    "w": [0.7, 0.8, 0.9, 1.0],
}
TEST_PARAMS = {
    "R": [100.0, 500.0, 3000.0, 6500.0, 12500.0, 15000.0],
    "a": [0.35, 0.40, 0.45, 0.55, 0.65, 0.75, 0.85, 0.95, 1.00],
    "w": [0.55, 0.6, 0.65, 0.75, 0.85, 0.95, 1.05],
}

DOMAIN_CM = 6.0


def default_grid(n=64):
    return GridSpec.centered(n, n, DOMAIN_CM)


@dataclass(frozen=True)
class BurgersConfig:
    R: float = 1000.0
    a: float = 0.9
    w: float = 1.0
    grid: GridSpec = field(default_factory=default_grid)
    dt_out: float = 0.02
    steps_out: int = 100
    substeps: int = 15
    advection: bool = True
    picard_tol: float = 1e-10
    picard_max_iter: int = 50

    def __post_init__(self):
        for name in ("R", "a", "w", "dt_out"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be positive")
        if self.steps_out < 0 or self.substeps < 1:
            raise ValidationError("steps_out >= 0 and substeps >= 1 required")

    @property
    def h(self):
        return self.dt_out / self.substeps

    @property
    def nu(self):
        return 1.0 / self.R

    def constants(self):
        return {"R": self.R, "a": self.a, "w": self.w}


def gaussian_ic(cfg: BurgersConfig, t=0.0) -> Snapshot:
    """``u = v = a exp(-|r|^2 / w)`` about the domain centre, zero on the boundary ring."""
    g = cfg.grid
    X, Y = g.coords()
    cx = g.origin[0] + 0.5 * (g.width - 1) * g.dx
    cy = g.origin[1] + 0.5 * (g.height - 1) * g.dx
    vals = cfg.a * np.exp(-((X - cx) ** 2 + (Y - cy) ** 2) / cfg.w)
    vals[0, :] = vals[-1, :] = 0.0
    vals[:, 0] = vals[:, -1] = 0.0
    f = Field(g, vals, "cm/s")
    return Snapshot(t, (f, f), (), ("u_x", "u_y"))


_DIFFUSION_CACHE: dict = {}


def _diffusion_matrix(ny, nx, dx, coef):
    """Sparse ``I - coef * Lap`` on an ``ny x nx`` interior block with zero Dirichlet halo."""
    key = (ny, nx, dx, coef)
    mat = _DIFFUSION_CACHE.get(key)
    if mat is None:
        def second(n):
            return sp.diags([np.ones(n - 1), -2 * np.ones(n), np.ones(n - 1)], [-1, 0, 1])
        lap = (sp.kron(sp.identity(ny), second(nx)) + sp.kron(second(ny), sp.identity(nx))) / dx ** 2
        mat = (sp.identity(ny * nx) - coef * lap).tocsr()
        if len(_DIFFUSION_CACHE) > 32:
            _DIFFUSION_CACHE.clear()
        _DIFFUSION_CACHE[key] = mat
    return mat


def _upwind_advection(U, dx):
    """Interior values of ``(u . grad) U_c`` with first-order upwinding, for U of shape 2 x H x W."""
    u = U[0, 1:-1, 1:-1]
    v = U[1, 1:-1, 1:-1]
    out = np.empty((2,) + u.shape)
    for c in range(2):
        f = U[c]
        back_x = (f[1:-1, 1:-1] - f[1:-1, :-2]) / dx
        fwd_x = (f[1:-1, 2:] - f[1:-1, 1:-1]) / dx
        back_y = (f[1:-1, 1:-1] - f[:-2, 1:-1]) / dx
        fwd_y = (f[2:, 1:-1] - f[1:-1, 1:-1]) / dx
        out[c] = (np.where(u > 0, u * back_x, u * fwd_x)
                  + np.where(v > 0, v * back_y, v * fwd_y))
    return out


def _interior_laplacian(U, dx):
    return (U[:, 1:-1, 2:] + U[:, 1:-1, :-2] + U[:, 2:, 1:-1] + U[:, :-2, 1:-1]
            - 4 * U[:, 1:-1, 1:-1]) / dx ** 2


def _backward_euler(Un, dx, h, nu, advection, tol, max_iter):
    ny, nx = Un.shape[1] - 2, Un.shape[2] - 2
    mat = _diffusion_matrix(ny, nx, dx, h * nu)
    U = Un.copy()
    U[:, 0, :] = U[:, -1, :] = 0.0
    U[:, :, 0] = U[:, :, -1] = 0.0
    base = U.copy()
    history = []
    for it in range(1, max_iter + 1):
        rhs = base[:, 1:-1, 1:-1]
        if advection:
            rhs = rhs - h * _upwind_advection(U, dx)
        new = U.copy()
        for c in range(2):
            b = rhs[c].ravel()
            sol, info = cg(mat, b, x0=U[c, 1:-1, 1:-1].ravel(), rtol=1e-14, atol=1e-15, maxiter=500)
            if info != 0:
                raise SolverError("CG failed in diffusion solve", {"iteration": it, "cg_info": info})
            new[c, 1:-1, 1:-1] = sol.reshape(ny, nx)
        U = new
        res = U[:, 1:-1, 1:-1] - base[:, 1:-1, 1:-1] - h * nu * _interior_laplacian(U, dx)
        if advection:
            res = res + h * _upwind_advection(U, dx)
        r = float(np.max(np.abs(res)))
        history.append(r)
        if r <= tol:
            return U, it
    raise SolverError(f"Picard iteration did not reach {tol:g} in {max_iter} iterations",
                      {"residual_history": history})


def step_burgers(state: Snapshot, cfg: BurgersConfig) -> Snapshot:
    """Advance one inner substep of length ``cfg.h``."""
    if state.grid != cfg.grid:
        raise ValidationError("snapshot grid does not match the config grid")
    Un = np.stack([state.velocity[0].values, state.velocity[1].values])
    U, _ = _backward_euler(Un, cfg.grid.dx, cfg.h, cfg.nu, cfg.advection,
                           cfg.picard_tol, cfg.picard_max_iter)
    check_finite(U, "Burgers state")
    g = cfg.grid
    return Snapshot(state.t + cfg.h, (Field(g, U[0], "cm/s"), Field(g, U[1], "cm/s")), (),
                    state.channel_names)


def generate_trajectory(cfg: BurgersConfig, initial: Optional[Snapshot] = None) -> Trajectory:
    """IC plus ``steps_out`` snapshots spaced ``dt_out`` apart, ``substeps`` solves each."""
    snap = gaussian_ic(cfg) if initial is None else initial
    t0 = snap.t
    out = [snap]
    Un = np.stack([snap.velocity[0].values, snap.velocity[1].values])
    g = cfg.grid
    for k in range(1, cfg.steps_out + 1):
        for _ in range(cfg.substeps):
            Un, _ = _backward_euler(Un, g.dx, cfg.h, cfg.nu, cfg.advection,
                                    cfg.picard_tol, cfg.picard_max_iter)
        check_finite(Un, f"Burgers output step {k}")
        out.append(Snapshot(t0 + k * cfg.dt_out,
                            (Field(g, Un[0], "cm/s"), Field(g, Un[1], "cm/s")), (),
                            snap.channel_names))
    return Trajectory(tuple(out), cfg.dt_out, cfg.constants())


def sweep_dataset(param_lists=None, split="train", base: Optional[BurgersConfig] = None,
                  progress: Optional[Callable] = None) -> Dataset:
    """One trajectory per element of the Cartesian product ``R x a x w``."""
    if param_lists is None:
        param_lists = TRAIN_PARAMS if split == "train" else TEST_PARAMS
    base = base or BurgersConfig()
    lists = [list(param_lists[k]) for k in ("R", "a", "w")]
    if any(len(v) == 0 for v in lists):
        raise ValidationError("parameter lists must be non-empty")
    trajs = []
    for i, (R, a, w) in enumerate(itertools.product(*lists)):
        trajs.append(generate_trajectory(replace(base, R=float(R), a=float(a), w=float(w))))
        if progress:
            progress(i, R, a, w)
    return Dataset(trajs, split)


# --- manufactured solutions --------------------------------------------------

@dataclass(frozen=True)
class Manufactured:
    """Closed-form velocity ``u*(x, y, t)`` with its analytic time derivative.

    ``velocity`` and ``dvelocity_dt`` map ``(X, Y, t)`` to a pair of arrays.
    ``pressure``, when given, enters the recorded body force through
    ``grad(p) / density``.
    """

    velocity: Callable
    dvelocity_dt: Callable
    diffusivity: float = 0.0
    pressure: Optional[Callable] = None
    density: float = 1.0


@dataclass
class MMSResult:
    trajectory: Trajectory
    reaction: np.ndarray  # T x 2 x H x W, du/dt + u.grad u - k Lap u
    forcing: np.ndarray   # reaction + grad(p)/rho; zero for exact NS solutions


def mms_trajectory(grid: GridSpec, dt, steps, manufactured: Manufactured, t0=0.0,
                   scheme: Optional[fdops.StencilScheme] = None) -> MMSResult:
    scheme = scheme or fdops.METRIC_SCHEME
    X, Y = grid.coords()
    snaps, reactions, forcings = [], [], []
    dx = grid.dx
    for k in range(steps + 1):
        t = t0 + k * dt
        ux, uy = (np.broadcast_to(v, grid.shape).astype(np.float64)
                  for v in manufactured.velocity(X, Y, t))
        dux, duy = (np.broadcast_to(v, grid.shape).astype(np.float64)
                    for v in manufactured.dvelocity_dt(X, Y, t))
        U = np.stack([ux, uy])
        adv = ux * fdops.ddx(U, dx, scheme.boundary) + uy * fdops.ddy(U, dx, scheme.boundary)
        lap = fdops.laplacian_array(U, dx, scheme.boundary)
        react = np.stack([dux, duy]) + adv - manufactured.diffusivity * lap
        force = react
        if manufactured.pressure is not None:
            p = np.broadcast_to(manufactured.pressure(X, Y, t), grid.shape).astype(np.float64)
            force = react + np.stack([fdops.ddx(p, dx, scheme.boundary),
                                      fdops.ddy(p, dx, scheme.boundary)]) / manufactured.density
        snaps.append(Snapshot(t, (Field(grid, ux), Field(grid, uy)), (), ("u_x", "u_y")))
        reactions.append(react)
        forcings.append(force)
    traj = Trajectory(tuple(snaps), dt, {"k": manufactured.diffusivity})
    return MMSResult(traj, np.stack(reactions), np.stack(forcings))


def taylor_green_grid(n, m=None):
    """``n x m`` grid on ``[0, 2pi)`` with cells at ``i * 2pi / n``."""
    return GridSpec(n, m or n, 2 * np.pi / (m or n), (0.0, 0.0))


def _rotate(X, Y, angle):
    c, s = np.cos(angle), np.sin(angle)
    return c * X + s * Y, -s * X + c * Y


def taylor_green_velocity(X, Y, t, nu, angle=0.0):
    """Velocity of the vortex array, optionally rotated by ``angle`` about the origin.

    Rotation keeps it an exact Navier-Stokes solution but breaks the
    grid-aligned symmetry that makes central-difference divergence vanish.
    """
    decay = np.exp(-2 * nu * t)
    xr, yr = _rotate(X, Y, angle)
    up = -np.cos(xr) * np.sin(yr) * decay
    vp = np.sin(xr) * np.cos(yr) * decay
    if angle == 0.0:
        return up, vp
    c, s = np.cos(angle), np.sin(angle)
    return c * up - s * vp, s * up + c * vp


def taylor_green_pressure(X, Y, t, nu, rho, angle=0.0):
    xr, yr = _rotate(X, Y, angle)
    return -(rho / 4) * (np.cos(2 * xr) + np.cos(2 * yr)) * np.exp(-4 * nu * t)


def taylor_green_manufactured(nu, rho=1.0, angle=0.0) -> Manufactured:
    def vel(X, Y, t):
        return taylor_green_velocity(X, Y, t, nu, angle)

    def dvel(X, Y, t):
        ux, uy = taylor_green_velocity(X, Y, t, nu, angle)
        return -2 * nu * ux, -2 * nu * uy

    return Manufactured(vel, dvel, diffusivity=nu,
                        pressure=lambda X, Y, t: taylor_green_pressure(X, Y, t, nu, rho, angle),
                        density=rho)


def taylor_green(grid: GridSpec, nu, rho=1.0, t=0.0, angle=0.0) -> Snapshot:
    """Velocity and pressure (channel ``p``) of the decaying Taylor-Green vortex."""
    X, Y = grid.coords()
    ux, uy = taylor_green_velocity(X, Y, t, nu, angle)
    p = taylor_green_pressure(X, Y, t, nu, rho, angle)
    return Snapshot(t, (Field(grid, ux, "m/s"), Field(grid, uy, "m/s")), (Field(grid, p, "Pa"),),
                    ("u_x", "u_y", "p"))


def taylor_green_trajectory(grid: GridSpec, nu, rho=1.0, dt=0.01, steps=10, t0=0.0,
                            angle=0.0) -> Trajectory:
    snaps = tuple(taylor_green(grid, nu, rho, t0 + k * dt, angle) for k in range(steps + 1))
    return Trajectory(snaps, dt, {"nu": nu, "rho": rho, "Re": 1.0 / nu})


def taylor_green_peak_acceleration(grid: GridSpec, nu, rho=1.0, t=0.0, angle=0.0):
    """Largest analytic ``|Du/Dt|`` over the grid; equals ``|grad p| / rho`` for this flow."""
    X, Y = grid.coords()
    xr, yr = _rotate(X, Y, angle)
    decay = np.exp(-4 * nu * t)
    return float(np.max(0.5 * np.hypot(np.sin(2 * xr), np.sin(2 * yr)) * decay))
