"""Differentiator / hybrid-integrator network for advection-diffusion-reaction fields.

The differentiator produces time derivatives

    F_u = -u . grad u  [+ k_u Lap u]            + R_u(x, u, c)
    F_x = -u . grad x  +  k   Lap x             + R_x(x, u, c)

with the advection and diffusion branches computed by fixed finite-difference
stencils and the reaction branches by convolution stacks.  The integrator
advances one step as ``s + Psi + S`` where ``Psi`` is a Heun or RK4
quadrature of ``F`` and ``S`` a learned correction fed with ``(s, F)``.

Reaction and correction networks work in normalized units: inputs are mapped
per channel onto [-1, 1] using dataset statistics, reaction outputs are
scaled by ``value_scale / time_scale`` and correction outputs by
``value_scale``.  Advection and diffusion act on physical values.

Parameter names are prefixed ``diff.`` (differentiator) or ``corr.``
(correction) so the two blocks can be trained and frozen separately.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .errors import NonFiniteError, ShapeError, ValidationError
from .fields import Field, Snapshot, Trajectory


@dataclass(frozen=True)
class IntegratorSpec:
    scheme: str = "heun"
    dt: float = 0.02
    use_correction: bool = False

    def __post_init__(self):
        if self.scheme not in ("heun", "rk4"):
            raise ValidationError(f"unknown integrator {self.scheme!r}")
        if not self.dt > 0:
            raise ValidationError("dt must be positive")


@dataclass(frozen=True)
class ModelConfig:
    state_channels: tuple = ()
    constants: tuple = ("inv_R",)
    reaction_layers: int = 4
    reaction_channels: int = 48
    correction_layers: int = 3
    correction_channels: int = 32
    kernel_size: int = 3
    activation: str = "tanh"
    include_diffusion_in_momentum: bool = False
    include_advection_of_state: bool = True
    static_channels: tuple = ()
    learn_diffusivity: bool = True
    diffusivity: float = 1e-3
    momentum_diffusivity: float = 1e-3
    boundary: str = "replicate"

    def __post_init__(self):
        object.__setattr__(self, "state_channels", tuple(self.state_channels))
        object.__setattr__(self, "constants", tuple(self.constants))
        object.__setattr__(self, "static_channels", tuple(self.static_channels))
        if self.reaction_layers < 1 or self.correction_layers < 1:
            raise ValidationError("networks need at least one layer")
        if self.kernel_size % 2 == 0:
            raise ValidationError("kernel_size must be odd")
        unknown = set(self.static_channels) - set(self.state_channels)
        if unknown:
            raise ValidationError(f"static channels {sorted(unknown)} are not state channels")
        if self.diffusivity < 0 or self.momentum_diffusivity < 0:
            raise ValidationError("diffusivity must be non-negative")

    @property
    def n_state(self):
        return len(self.state_channels)

    @property
    def n_inputs(self):
        return self.n_state + 2 + len(self.constants)


def derived_constants(constants: dict) -> dict:
    """Add reciprocal forms (``inv_R``, ``inv_Re``) of the usual PDE constants."""
    out = dict(constants)
    for key in ("R", "Re"):
        if key in out and f"inv_{key}" not in out:
            out[f"inv_{key}"] = 1.0 / float(out[key])
    return out


@dataclass
class Normalizer:
    """Per-channel affine maps onto [-1, 1] plus the derivative time scale."""

    velocity_center: np.ndarray
    velocity_scale: np.ndarray
    state_center: np.ndarray
    state_scale: np.ndarray
    constant_center: np.ndarray
    constant_scale: np.ndarray
    time_scale: float = 1.0

    @classmethod
    def identity(cls, n_state=0, n_const=0, time_scale=1.0):
        return cls(np.zeros(2), np.ones(2), np.zeros(n_state), np.ones(n_state),
                   np.zeros(n_const), np.ones(n_const), float(time_scale))

    @classmethod
    def from_dataset(cls, dataset, config: ModelConfig, time_scale=None):
        stats = dataset.stats
        names = dataset.channel_names
        vel = [stats[n] for n in names[:2]]
        st = [stats[n] for n in config.state_channels]
        consts = np.array([[derived_constants(t.constants)[k] for k in config.constants]
                           for t in dataset.trajectories]).reshape(len(dataset), -1)
        if consts.size:
            lo, hi = consts.min(axis=0), consts.max(axis=0)
            c_center = 0.5 * (lo + hi)
            c_scale = np.where(hi > lo, 0.5 * (hi - lo), np.where(c_center != 0, np.abs(c_center), 1.0))
        else:
            c_center = c_scale = np.zeros(0)
        if time_scale is None:
            t = dataset.trajectories[0]
            time_scale = t.dt * max(len(t) - 1, 1)
        return cls(np.array([s.center for s in vel]), np.array([s.half_range for s in vel]),
                   np.array([s.center for s in st]), np.array([s.half_range for s in st]),
                   np.asarray(c_center, dtype=np.float64), np.asarray(c_scale, dtype=np.float64),
                   float(time_scale))

    def to_blocks(self):
        return {
            "norm.velocity_center": self.velocity_center, "norm.velocity_scale": self.velocity_scale,
            "norm.state_center": self.state_center, "norm.state_scale": self.state_scale,
            "norm.constant_center": self.constant_center, "norm.constant_scale": self.constant_scale,
            "norm.time_scale": np.array([self.time_scale]),
        }

    @classmethod
    def from_blocks(cls, blocks):
        return cls(*(np.asarray(blocks[f"norm.{k}"], dtype=np.float64) for k in
                     ("velocity_center", "velocity_scale", "state_center", "state_scale",
                      "constant_center", "constant_scale")),
                   float(np.asarray(blocks["norm.time_scale"]).reshape(-1)[0]))


def _bcast(vec):
    return np.asarray(vec, dtype=np.float64).reshape(1, -1, 1, 1)


def _inv_softplus(y):
    return float(np.log(np.expm1(y)))


def _stack_layout(n_in, hidden, n_out, layers):
    if layers == 1:
        return [(n_in, n_out)]
    return [(n_in, hidden)] + [(hidden, hidden)] * (layers - 2) + [(hidden, n_out)]


def init_params(config: ModelConfig, seed=0):
    """Fan-in scaled uniform kernels; correction output layers start at zero."""
    rng = np.random.default_rng(seed)
    k = config.kernel_size
    params = {}

    def stack(prefix, n_in, n_out, hidden, layers, zero_last):
        for i, (ci, co) in enumerate(_stack_layout(n_in, hidden, n_out, layers)):
            bound = 1.0 / np.sqrt(ci * k * k)
            last = i == layers - 1
            if zero_last and last:
                params[f"{prefix}.{i}.weight"] = np.zeros((co, ci, k, k))
                params[f"{prefix}.{i}.bias"] = np.zeros(co)
            else:
                params[f"{prefix}.{i}.weight"] = rng.uniform(-bound, bound, (co, ci, k, k))
                params[f"{prefix}.{i}.bias"] = rng.uniform(-bound, bound, co)

    n_in = config.n_inputs
    stack("diff.reaction_u", n_in, 2, config.reaction_channels, config.reaction_layers, False)
    if config.n_state:
        stack("diff.reaction_x", n_in, config.n_state, config.reaction_channels,
              config.reaction_layers, False)
        if config.learn_diffusivity:
            params["diff.diffusivity_raw"] = np.full(config.n_state, _inv_softplus(max(config.diffusivity, 1e-12)))
    if config.include_diffusion_in_momentum and config.learn_diffusivity:
        params["diff.momentum_diffusivity_raw"] = np.full(
            2, _inv_softplus(max(config.momentum_diffusivity, 1e-12)))
    stack("corr.correction_u", 4, 2, config.correction_channels, config.correction_layers, True)
    if config.n_state:
        stack("corr.correction_x", 2 * config.n_state, config.n_state, config.correction_channels,
              config.correction_layers, True)
    return params


def conv_stack(x, tensors, prefix, layers, activation):
    h = x
    for i in range(layers):
        h = ad.conv2d(h, tensors[f"{prefix}.{i}.weight"], tensors[f"{prefix}.{i}.bias"])
        if i < layers - 1:
            h = ad.activation(h, activation)
    return h


def _lin(state, other, c):
    """Elementwise ``state + c * other`` over matching lists."""
    return [s + o * c for s, o in zip(state, other)]


def psi_step(evaluate: Callable, state: Sequence, spec: IntegratorSpec):
    """Numerical increment over one step of ``spec.dt``.

    ``evaluate`` maps a list of state components to a list of derivatives;
    components may be floats, arrays or Tensors.  Returns ``(psi, F(state))``.
    """
    dt = spec.dt
    state = list(state)
    f1 = list(evaluate(state))
    if spec.scheme == "heun":
        f2 = list(evaluate(_lin(state, f1, dt)))
        psi = [(a + b) * (dt / 2) for a, b in zip(f1, f2)]
    else:
        f2 = list(evaluate(_lin(state, f1, dt / 2)))
        f3 = list(evaluate(_lin(state, f2, dt / 2)))
        f4 = list(evaluate(_lin(state, f3, dt)))
        psi = [(a + (b + c) * 2.0 + d) * (dt / 6) for a, b, c, d in zip(f1, f2, f3, f4)]
    return psi, f1


class PARCModel:
    """Parameters plus normalization for one differentiator/integrator pair."""

    def __init__(self, config: ModelConfig, normalizer: Optional[Normalizer] = None,
                 params: Optional[dict] = None, dx: float = 1.0, seed: int = 0):
        self.config = config
        self.normalizer = normalizer or Normalizer.identity(config.n_state, len(config.constants))
        self.params = dict(params) if params is not None else init_params(config, seed)
        self.dx = float(dx)

    # -- parameter bookkeeping ----------------------------------------------

    def diff_params(self):
        return {k: v for k, v in self.params.items() if k.startswith("diff.")}

    def corr_params(self):
        return {k: v for k, v in self.params.items() if k.startswith("corr.")}

    def tensors(self, trainable=()):
        """Wrap parameters as Tensors; names with a prefix in ``trainable`` require grad."""
        trainable = tuple(trainable)
        return {k: ad.parameter(v, k) if k.startswith(trainable) and trainable else ad.Tensor(v)
                for k, v in self.params.items()}

    def zero_reaction(self):
        for k in list(self.params):
            if k.startswith(("diff.reaction_u", "diff.reaction_x")):
                self.params[k] = np.zeros_like(self.params[k])

    def diffusivity(self):
        cfg = self.config
        if not cfg.n_state:
            return np.zeros(0)
        if cfg.learn_diffusivity:
            return np.logaddexp(0.0, self.params["diff.diffusivity_raw"])
        return np.full(cfg.n_state, cfg.diffusivity)

    # -- differentiator -------------------------------------------------------

    def constant_array(self, constants, n, shape):
        """``N x K x H x W`` normalized constant channels from a dict or list of dicts."""
        if isinstance(constants, dict) or constants is None:
            constants = [constants or {}] * n
        if len(constants) != n:
            raise ShapeError("one constants dict per batch item required")
        keys = self.config.constants
        vals = np.array([[derived_constants(c)[k] for k in keys] for c in constants]).reshape(n, len(keys))
        norm = self.normalizer
        vals = (vals - norm.constant_center) / norm.constant_scale
        return np.broadcast_to(vals[:, :, None, None], (n, len(keys)) + tuple(shape)).copy()

    def _reaction_input(self, u, x, c):
        norm = self.normalizer
        parts = []
        if self.config.n_state:
            parts.append((x - _bcast(norm.state_center)) * _bcast(1.0 / norm.state_scale))
        parts.append((u - _bcast(norm.velocity_center)) * _bcast(1.0 / norm.velocity_scale))
        if c.shape[1]:
            parts.append(ad.Tensor(c))
        return ad.concat(parts, axis=1) if len(parts) > 1 else parts[0]

    def branches(self, u, x, c, tensors):
        """Return the advection, diffusion and reaction contributions separately.

        Each is a dict with keys ``u`` and ``x`` holding Tensors (or None).
        """
        cfg = self.config
        norm = self.normalizer
        dx = self.dx
        b = cfg.boundary
        ux, uy = ad.channels(u, 0, 1), ad.channels(u, 1, 2)
        adv = {"u": -ad.advect(ux, uy, u, dx, b), "x": None}
        diff = {"u": None, "x": None}
        react = {"u": None, "x": None}
        net_in = self._reaction_input(u, x, c)
        tau = norm.time_scale
        r_u = conv_stack(net_in, tensors, "diff.reaction_u", cfg.reaction_layers, cfg.activation)
        react["u"] = r_u * _bcast(norm.velocity_scale / tau)
        if cfg.include_diffusion_in_momentum:
            if cfg.learn_diffusivity:
                ku = ad.softplus(tensors["diff.momentum_diffusivity_raw"])
                ku = _reshape_channels(ku)
            else:
                ku = ad.Tensor(_bcast(np.full(2, cfg.momentum_diffusivity)))
            diff["u"] = ku * ad.laplacian(u, dx, b)
        if cfg.n_state:
            static = _bcast([1.0 if n in cfg.static_channels else 0.0 for n in cfg.state_channels])
            dynamic = 1.0 - static
            a_x = -ad.advect(ux, uy, x, dx, b)
            adv["x"] = a_x * dynamic
            if cfg.include_advection_of_state and static.any():
                adv["x"] = adv["x"] + a_x * static
            if cfg.learn_diffusivity:
                k = _reshape_channels(ad.softplus(tensors["diff.diffusivity_raw"]))
            else:
                k = ad.Tensor(_bcast(np.full(cfg.n_state, cfg.diffusivity)))
            diff["x"] = k * ad.laplacian(x, dx, b) * dynamic
            r_x = conv_stack(net_in, tensors, "diff.reaction_x", cfg.reaction_layers, cfg.activation)
            react["x"] = r_x * _bcast(norm.state_scale / tau) * dynamic
        return adv, diff, react

    def derivatives(self, u, x, c, tensors):
        adv, diff, react = self.branches(u, x, c, tensors)
        out = []
        for key in ("u", "x"):
            if key == "x" and not self.config.n_state:
                out.append(None)
                continue
            terms = [t for t in (adv[key], diff[key], react[key]) if t is not None]
            total = terms[0]
            for t in terms[1:]:
                total = total + t
            out.append(total)
        return out[0], out[1]

    def correction(self, u, x, fu, fx, tensors):
        """Learned increments ``(S_u, S_x)`` in physical units."""
        cfg = self.config
        norm = self.normalizer
        tau = norm.time_scale
        su_in = ad.concat([
            (u - _bcast(norm.velocity_center)) * _bcast(1.0 / norm.velocity_scale),
            fu * _bcast(tau / norm.velocity_scale)], axis=1)
        s_u = conv_stack(su_in, tensors, "corr.correction_u", cfg.correction_layers, cfg.activation)
        s_u = s_u * _bcast(norm.velocity_scale)
        s_x = None
        if cfg.n_state:
            sx_in = ad.concat([
                (x - _bcast(norm.state_center)) * _bcast(1.0 / norm.state_scale),
                fx * _bcast(tau / norm.state_scale)], axis=1)
            s_x = conv_stack(sx_in, tensors, "corr.correction_x", cfg.correction_layers, cfg.activation)
            static = _bcast([0.0 if n in cfg.static_channels else 1.0 for n in cfg.state_channels])
            s_x = s_x * _bcast(norm.state_scale) * static
        return s_u, s_x

    # -- integrator ------------------------------------------------------------

    def evaluator(self, c, tensors):
        n_state = self.config.n_state

        def evaluate(state):
            u = state[0]
            x = state[1] if n_state else None
            fu, fx = self.derivatives(u, x, c, tensors)
            return [fu, fx] if n_state else [fu]
        return evaluate

    def psi(self, u, x, c, spec: IntegratorSpec, tensors):
        state = [u, x] if self.config.n_state else [u]
        psi, f = psi_step(self.evaluator(c, tensors), state, spec)
        if not self.config.n_state:
            return (psi[0], None), (f[0], None)
        return (psi[0], psi[1]), (f[0], f[1])

    def step(self, u, x, c, spec: IntegratorSpec, tensors):
        """One integrator step on Tensors; returns ``(u_next, x_next)``."""
        (pu, px), (fu, fx) = self.psi(u, x, c, spec, tensors)
        u_next = u + pu
        x_next = x + px if px is not None else None
        if spec.use_correction:
            s_u, s_x = self.correction(u, x, fu, fx, tensors)
            u_next = u_next + s_u
            if s_x is not None:
                x_next = x_next + s_x
        return u_next, x_next

    # -- Snapshot-level API -------------------------------------------------------

    def _split(self, snapshot: Snapshot):
        arr = snapshot.to_array()[None]
        names = snapshot.channel_names
        missing = [n for n in self.config.state_channels if n not in names]
        if missing:
            raise ShapeError(f"snapshot lacks model state channels {missing}; has {list(names)}")
        idx = [names.index(n) for n in self.config.state_channels]
        u = ad.Tensor(arr[:, :2])
        x = ad.Tensor(arr[:, idx]) if idx else None
        return u, x

    def _snapshot(self, template: Snapshot, t, u, x):
        grid = template.grid
        vals = np.asarray(u.value)[0]
        units = [f.units for f in template.velocity + template.state]
        fields_ = [Field(grid, vals[0], units[0]), Field(grid, vals[1], units[1])]
        names = template.channel_names
        state = list(template.state)
        if x is not None:
            xv = np.asarray(x.value)[0]
            for j, n in enumerate(self.config.state_channels):
                i = names.index(n) - 2
                state[i] = Field(grid, xv[j], units[i + 2])
        return Snapshot(t, tuple(fields_), tuple(state), names)

    def differentiate(self, snapshot: Snapshot, constants=None):
        """Time-derivative arrays ``(dU/dt, dX/dt)`` for one snapshot."""
        u, x = self._split(snapshot)
        c = self.constant_array(constants, 1, snapshot.grid.shape)
        fu, fx = self.derivatives(u, x, c, self.tensors())
        return fu.value[0], (fx.value[0] if fx is not None else None)

    def integrate_step(self, snapshot: Snapshot, spec: IntegratorSpec, constants=None):
        u, x = self._split(snapshot)
        c = self.constant_array(constants, 1, snapshot.grid.shape)
        un, xn = self.step(u, x, c, spec, self.tensors())
        return self._snapshot(snapshot, snapshot.t + spec.dt, un, xn)

    def rollout(self, initial: Snapshot, n_steps: int, spec: IntegratorSpec, constants=None):
        """Feed-forward prediction of ``n_steps`` steps from ``initial``."""
        if n_steps < 0:
            raise ValidationError("n_steps must be >= 0")
        u, x = self._split(initial)
        c = self.constant_array(constants, 1, initial.grid.shape)
        tensors = self.tensors()
        snaps = [initial]
        for k in range(1, n_steps + 1):
            u, x = self.step(u, x, c, spec, tensors)
            if not np.all(np.isfinite(u.value)) or (x is not None and not np.all(np.isfinite(x.value))):
                raise NonFiniteError(f"rollout produced non-finite values at step {k}")
            snaps.append(self._snapshot(initial, initial.t + k * spec.dt, u, x))
        return Trajectory(tuple(snaps), spec.dt, dict(constants or {}))


def _reshape_channels(t):
    """Reshape a length-C parameter Tensor to ``1 x C x 1 x 1``."""
    shape = t.shape
    out = t.value.reshape(1, -1, 1, 1)
    return ad._make(out, (t,), lambda g: (g.reshape(shape),))
