"""Flat ``key=value`` run configuration with dotted namespaces and documented defaults."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from . import dns
from .errors import ConfigError
from .fields import GridSpec
from .io import fmt, format_kv, parse_kv
from .model import IntegratorSpec, ModelConfig


def _bool(s):
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _strs(s):
    if isinstance(s, (list, tuple)):
        return tuple(str(x) for x in s)
    return tuple(x.strip() for x in str(s).split(",") if x.strip())


def _floats(s):
    if isinstance(s, (list, tuple)):
        return tuple(float(x) for x in s)
    return tuple(float(x) for x in _strs(s))


def _ints(s):
    if isinstance(s, (list, tuple)):
        return tuple(int(x) for x in s)
    return tuple(int(x) for x in _strs(s))


def _opt_float(s):
    s = str(s).strip()
    return None if s in ("", "auto") else float(s)


@dataclass(frozen=True)
class Key:
    default: Any
    parse: Callable
    doc: str


def _show(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return fmt(v)
    if isinstance(v, tuple):
        return ",".join(_show(x) for x in v)
    if v is None:
        return "auto"
    return str(v)


_m = ModelConfig()
_b = dns.BurgersConfig()
_t = dns.TRAIN_PARAMS

KEYS: dict[str, Key] = {
    # data generation
    "dns.R": Key(tuple(float(x) for x in _t["R"]), _floats, "Reynolds numbers of the sweep"),
    "dns.a": Key(tuple(float(x) for x in _t["a"]), _floats, "initial-condition amplitude list"),
    "dns.w": Key(tuple(float(x) for x in _t["w"]), _floats, "initial-condition width list"),
    "dns.split": Key("train", str, "split tag written to the manifest"),
    "dns.grid": Key(64, int, "cells per side of the square domain"),
    "dns.domain": Key(dns.DOMAIN_CM, float, "domain side length in cm"),
    "dns.dt_out": Key(_b.dt_out, float, "snapshot spacing in s"),
    "dns.steps": Key(_b.steps_out, int, "snapshots after the initial condition"),
    "dns.substeps": Key(_b.substeps, int, "implicit solves per output interval"),
    "dns.picard_tol": Key(_b.picard_tol, float, "Picard residual tolerance"),
    "dns.picard_max_iter": Key(_b.picard_max_iter, int, "Picard iteration cap"),
    "dns.advection": Key(True, _bool, "include the nonlinear advection term"),
    "mms.grid": Key(64, int, "cells per side of the periodic verification domain"),
    "mms.nu": Key(0.01, float, "kinematic viscosity of the manufactured flow"),
    "mms.rho": Key(1.0, float, "density of the manufactured flow"),
    "mms.angle": Key(0.0, float, "rotation of the Taylor-Green pattern in rad"),
    "mms.dt": Key(0.01, float, "snapshot spacing"),
    "mms.steps": Key(10, int, "snapshots after the first"),
    # ingestion
    "ingest.descriptor": Key("", str, "path of the key=value raster descriptor"),
    # model
    "model.state_channels": Key(_m.state_channels, _strs, "state channel names (after u_x, u_y)"),
    "model.static_channels": Key(_m.static_channels, _strs, "state channels without dynamics"),
    "model.constants": Key(_m.constants, _strs, "PDE constants fed as input channels"),
    "model.reaction.layers": Key(_m.reaction_layers, int, "reaction conv layers"),
    "model.reaction.channels": Key(_m.reaction_channels, int, "reaction hidden channels"),
    "model.correction.layers": Key(_m.correction_layers, int, "correction conv layers"),
    "model.correction.channels": Key(_m.correction_channels, int, "correction hidden channels"),
    "model.kernel_size": Key(_m.kernel_size, int, "conv kernel size (odd)"),
    "model.activation": Key(_m.activation, str, "hidden activation: tanh, relu or softplus"),
    "model.diffusion_in_momentum": Key(_m.include_diffusion_in_momentum, _bool,
                                       "add a diffusion term to the velocity equation"),
    "model.advection_of_state": Key(_m.include_advection_of_state, _bool,
                                    "advect static state channels too"),
    "model.learn_diffusivity": Key(_m.learn_diffusivity, _bool, "train diffusivities"),
    "model.diffusivity": Key(_m.diffusivity, float, "state diffusivity (initial value if learned)"),
    "model.momentum_diffusivity": Key(_m.momentum_diffusivity, float, "velocity diffusivity"),
    "model.boundary": Key(_m.boundary, str, "stencil boundary: replicate or one_sided2"),
    "model.time_scale": Key(None, _opt_float, "derivative scale in s; auto = dt * (T - 1)"),
    "model.seed": Key(0, int, "parameter initialization seed"),
    # integrator
    "integrator.scheme": Key("heun", str, "heun or rk4"),
    "integrator.dt": Key(0.02, float, "step size; must equal the data spacing"),
    # training
    "train.stage": Key(1, int, "1 = differentiator, 2 = correction"),
    "train.epochs": Key(500, int, "maximum epochs"),
    "train.batch_size": Key(10, int, "pairs per optimizer step"),
    "train.lr": Key(1e-4, float, "initial learning rate"),
    "train.lr_halve_every": Key(100, int, "epochs between learning-rate halvings"),
    "train.lr_floor": Key(1e-6, float, "learning-rate floor"),
    "train.patience": Key(50, int, "early-stop patience in epochs"),
    "train.seed": Key(0, int, "shuffling and split seed"),
    "train.val_fraction": Key(0.1, float, "held-out fraction (at least one trajectory)"),
    "train.val_trajectories": Key((), _ints, "explicit held-out trajectory indices"),
    "train.workers": Key(0, int, "worker threads; 0 = PARC_THREADS or 1"),
    "train.stage1_checkpoint": Key("", str, "stage-1 checkpoint required by stage 2"),
    # data and rollout
    "data.manifest": Key("", str, "dataset manifest path"),
    "rollout.checkpoint": Key("", str, "checkpoint to roll out"),
    "rollout.steps": Key(0, int, "steps to predict; 0 = match the ground truth"),
    "rollout.use_correction": Key(False, _bool, "apply the learned correction"),
    "eval.pred": Key("", str, "prediction manifest or directory"),
    "eval.truth": Key("", str, "ground-truth manifest"),
    "eval.mask": Key("", str, "optional obstacle mask (.npy)"),
    "report.frames": Key((0,), _ints, "snapshot indices rendered as images"),
    "report.colormap": Key("viridis", str, "colormap for raster renders"),
}


class Config:
    """Resolved values for every key; unknown keys are rejected."""

    def __init__(self, values=None):
        self.values = {k: spec.default for k, spec in KEYS.items()}
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key, raw):
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}; valid keys: {', '.join(sorted(KEYS))}")
        try:
            self.values[key] = KEYS[key].parse(raw) if isinstance(raw, str) else KEYS[key].parse(_show(raw))
        except ValueError as e:
            raise ConfigError(f"bad value for {key}: {raw!r} ({e})") from None

    def __getitem__(self, key):
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        return self.values[key]

    def update(self, overrides: dict):
        for k, v in overrides.items():
            self.set(k, v)
        return self

    def to_text(self):
        return format_kv((k, _show(self.values[k])) for k in KEYS)

    @classmethod
    def from_text(cls, text, what="config"):
        return cls(parse_kv(text, what))

    @classmethod
    def load(cls, path):
        return cls.from_text(Path(path).read_text(encoding="utf-8"), str(path))

    def save(self, path):
        Path(path).write_text(self.to_text(), encoding="utf-8")

    def section_text(self, prefix):
        return format_kv((k, _show(self.values[k])) for k in KEYS if k.startswith(prefix))

    # -- typed views --------------------------------------------------------------

    def model_config(self) -> ModelConfig:
        v = self.values
        return ModelConfig(
            state_channels=v["model.state_channels"], constants=v["model.constants"],
            reaction_layers=v["model.reaction.layers"], reaction_channels=v["model.reaction.channels"],
            correction_layers=v["model.correction.layers"],
            correction_channels=v["model.correction.channels"], kernel_size=v["model.kernel_size"],
            activation=v["model.activation"],
            include_diffusion_in_momentum=v["model.diffusion_in_momentum"],
            include_advection_of_state=v["model.advection_of_state"],
            static_channels=v["model.static_channels"], learn_diffusivity=v["model.learn_diffusivity"],
            diffusivity=v["model.diffusivity"], momentum_diffusivity=v["model.momentum_diffusivity"],
            boundary=v["model.boundary"])

    def integrator(self, use_correction=None) -> IntegratorSpec:
        v = self.values
        uc = v["rollout.use_correction"] if use_correction is None else use_correction
        return IntegratorSpec(v["integrator.scheme"], v["integrator.dt"], uc)

    def burgers(self) -> dns.BurgersConfig:
        v = self.values
        grid = GridSpec.centered(v["dns.grid"], v["dns.grid"], v["dns.domain"])
        return dns.BurgersConfig(grid=grid,
                                 dt_out=v["dns.dt_out"], steps_out=v["dns.steps"],
                                 substeps=v["dns.substeps"], advection=v["dns.advection"],
                                 picard_tol=v["dns.picard_tol"], picard_max_iter=v["dns.picard_max_iter"])

    def model_text(self):
        """Canonical text of the model keys; its digest identifies the architecture."""
        return self.section_text("model.")


def valid_keys():
    return sorted(KEYS)
