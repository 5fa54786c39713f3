"""Two-stage training on teacher-forced ground-truth pairs.

Stage 1 fits the differentiator through the numerical integrator alone;
stage 2 freezes it and fits the correction networks.  Both losses are the
mean absolute one-step residual in normalized units (residual divided by the
per-channel value scale), averaged over cells, channels and pairs, with the
velocity and state terms added.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .dataset import Dataset
from .errors import NonFiniteError, StageError, ValidationError
from .model import IntegratorSpec, ModelConfig, Normalizer, PARCModel, derived_constants

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    stage: int = 1
    epochs: int = 500
    batch_size: int = 10
    lr: float = 1e-4
    lr_halve_every: int = 100
    lr_floor: float = 1e-6
    patience: int = 50
    seed: int = 0
    integrator: IntegratorSpec = field(default_factory=IntegratorSpec)
    val_fraction: float = 0.1
    val_trajectories: tuple = ()
    workers: int = 0

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValidationError(f"stage must be 1 or 2, got {self.stage}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValidationError("epochs >= 0 and batch_size >= 1 required")

    def lr_at(self, epoch):
        return max(self.lr_floor, self.lr * 0.5 ** (epoch // self.lr_halve_every))


@dataclass
class Batch:
    """Consecutive ground-truth pairs: velocities ``N x 2 x H x W``, states ``N x S x H x W``."""

    u0: np.ndarray
    u1: np.ndarray
    x0: Optional[np.ndarray]
    x1: Optional[np.ndarray]
    constants: list
    dt: float

    def __len__(self):
        return self.u0.shape[0]

    def take(self, idx):
        idx = np.asarray(idx)
        return Batch(self.u0[idx], self.u1[idx],
                     None if self.x0 is None else self.x0[idx],
                     None if self.x1 is None else self.x1[idx],
                     [self.constants[i] for i in idx], self.dt)


def make_pairs(dataset: Dataset, state_channels=()) -> Batch:
    """All ``(k, k+1)`` pairs of every trajectory in ``dataset``."""
    u0, u1, x0, x1, consts = [], [], [], [], []
    for traj in dataset.trajectories:
        arr = traj.to_array()
        names = traj.channel_names
        idx = [names.index(n) for n in state_channels]
        u0.append(arr[:-1, :2])
        u1.append(arr[1:, :2])
        if idx:
            x0.append(arr[:-1][:, idx])
            x1.append(arr[1:][:, idx])
        consts.extend([derived_constants(traj.constants)] * (len(traj) - 1))
    return Batch(np.concatenate(u0), np.concatenate(u1),
                 np.concatenate(x0) if x0 else None, np.concatenate(x1) if x1 else None,
                 consts, dataset.dt)


def _check_dt(batch: Batch, spec: IntegratorSpec):
    if not math.isclose(batch.dt, spec.dt, rel_tol=1e-12):
        raise ValidationError(f"data dt {batch.dt} does not match integrator dt {spec.dt}")


def _residuals(model: PARCModel, batch: Batch, spec: IntegratorSpec, tensors, with_correction):
    u0 = ad.Tensor(batch.u0)
    x0 = ad.Tensor(batch.x0) if batch.x0 is not None else None
    c = model.constant_array(batch.constants, len(batch), batch.u0.shape[-2:])
    (pu, px), (fu, fx) = model.psi(u0, x0, c, spec, tensors)
    norm = model.normalizer
    inv_u = (1.0 / norm.velocity_scale).reshape(1, -1, 1, 1)
    ru = ad.Tensor(batch.u1 - batch.u0) - pu
    rx = ad.Tensor(batch.x1 - batch.x0) - px if px is not None else None
    if with_correction:
        su, sx = model.correction(u0, x0, fu, fx, tensors)
        ru = ru - su
        if rx is not None:
            rx = rx - sx
    loss = ad.l1_mean(ru * inv_u)
    if rx is not None:
        inv_x = (1.0 / norm.state_scale).reshape(1, -1, 1, 1)
        loss = loss + ad.l1_mean(rx * inv_x)
    return loss


def stage1_loss(model: PARCModel, batch: Batch, spec: IntegratorSpec, tensors=None):
    """Mean L1 of ``u_{k+1} - u_k - Psi[F(u_k)]`` (plus the state term) on ground-truth pairs."""
    _check_dt(batch, spec)
    tensors = model.tensors(("diff.",)) if tensors is None else tensors
    return _residuals(model, batch, spec, tensors, False)


def stage2_loss(model: PARCModel, batch: Batch, spec: IntegratorSpec, tensors=None):
    """Mean L1 of the residual after both ``Psi`` and the correction ``S``.

    Differentiator parameters must not require gradients.
    """
    _check_dt(batch, spec)
    tensors = model.tensors(("corr.",)) if tensors is None else tensors
    leaked = [k for k, t in tensors.items() if k.startswith("diff.") and t.requires_grad]
    if leaked:
        raise StageError(f"stage 2 requires frozen differentiator weights; trainable: {leaked[:3]}")
    return _residuals(model, batch, spec, tensors, True)


def loss_and_grads(model, batch, spec, stage):
    if stage == 1:
        tensors = model.tensors(("diff.",))
        loss = stage1_loss(model, batch, spec, tensors)
    else:
        tensors = model.tensors(("corr.",))
        loss = stage2_loss(model, batch, spec, tensors)
    if not math.isfinite(float(loss.value)):
        raise NonFiniteError(f"non-finite loss {float(loss.value)}")
    return float(loss.value), ad.backward(loss)


def evaluate_loss(model, batch, spec, stage, chunk=50):
    """Loss over a whole batch, evaluated in chunks without building gradients."""
    total, count = 0.0, 0
    for start in range(0, len(batch), chunk):
        part = batch.take(np.arange(start, min(start + chunk, len(batch))))
        tensors = model.tensors()
        fn = stage1_loss if stage == 1 else stage2_loss
        total += float(fn(model, part, spec, tensors).value) * len(part)
        count += len(part)
    return total / max(count, 1)


def split_indices(n, config: TrainConfig):
    """``(train, validation)`` trajectory indices.

    Explicit ``val_trajectories`` win; otherwise hold out
    ``max(1, ceil(val_fraction * n))`` trajectories chosen by the seed.
    """
    if config.val_trajectories:
        val = sorted(int(i) for i in config.val_trajectories)
    else:
        if n < 2:
            raise ValidationError("need at least two trajectories to hold one out")
        k = max(1, math.ceil(config.val_fraction * n))
        perm = np.random.default_rng(config.seed).permutation(n)
        val = sorted(int(i) for i in perm[:k])
    train = [i for i in range(n) if i not in val]
    if not train:
        raise ValidationError("no training trajectories left after the validation split")
    return train, val


@dataclass
class TrainResult:
    model: PARCModel
    history: list  # dicts with epoch, train_loss, val_loss, lr
    best_epoch: int
    optimizer: ad.AdamState
    train_indices: list
    val_indices: list

    @property
    def initial_loss(self):
        return self.history[0]["train_loss"] if self.history else float("nan")


def write_loss_csv(history, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for row in history:
            w.writerow([row["epoch"]] + [format(float(row[k]), ".17g")
                                         for k in ("train_loss", "val_loss", "lr")])


def _thread_count(config: TrainConfig):
    if config.workers:
        return config.workers
    return max(1, int(os.environ.get("PARC_THREADS", "1")))


def _batch_grads(model, batch, spec, stage, threads, pool):
    """Loss and gradient of the batch mean, optionally split over worker threads.

    Chunk results are combined in a fixed order so the outcome does not
    depend on scheduling.
    """
    if threads <= 1 or len(batch) < 2 or pool is None:
        return loss_and_grads(model, batch, spec, stage)
    parts = np.array_split(np.arange(len(batch)), min(threads, len(batch)))
    futures = [pool.submit(loss_and_grads, model, batch.take(p), spec, stage) for p in parts]
    results = [f.result() for f in futures]
    n = len(batch)
    loss = sum(r[0] * len(p) for r, p in zip(results, parts)) / n
    grads = {}
    for (_, g), p in zip(results, parts):
        for k, v in g.items():
            grads[k] = grads.get(k, 0.0) + v * (len(p) / n)
    return loss, grads


def train(dataset: Dataset, model: PARCModel, config: TrainConfig, out_dir=None,
          stage1_params: Optional[dict] = None, callback=None) -> TrainResult:
    """Run one training stage in place on ``model`` and return its history.

    Stage 2 needs ``stage1_params`` (the stage-1 checkpoint parameters); the
    differentiator blocks are restored from it and never updated.  The model
    returned carries the parameters from the epoch with the best validation
    loss.  With ``out_dir`` a ``loss.csv`` is written.
    """
    spec = config.integrator
    if config.stage == 2:
        if stage1_params is None:
            raise StageError("stage 2 training requires a stage-1 checkpoint")
        for k, v in stage1_params.items():
            if k.startswith("diff."):
                model.params[k] = np.array(v, copy=True)
    train_idx, val_idx = split_indices(len(dataset), config)
    state_ch = model.config.state_channels
    train_pairs = make_pairs(dataset.subset(train_idx), state_ch)
    val_pairs = make_pairs(dataset.subset(val_idx), state_ch)
    _check_dt(train_pairs, spec)
    prefix = "diff." if config.stage == 1 else "corr."
    rng = np.random.default_rng(config.seed)
    opt = ad.AdamState(lr=config.lr)
    threads = _thread_count(config)
    pool = ThreadPoolExecutor(threads) if threads > 1 else None

    val0 = evaluate_loss(model, val_pairs, spec, config.stage)
    train0 = evaluate_loss(model, train_pairs, spec, config.stage)
    history = [{"epoch": 0, "train_loss": train0, "val_loss": val0, "lr": config.lr_at(0)}]
    best_val, best_epoch = val0, 0
    best_params = {k: v.copy() for k, v in model.params.items()}
    stale = 0
    try:
        for epoch in range(1, config.epochs + 1):
            opt.lr = config.lr_at(epoch - 1)
            order = rng.permutation(len(train_pairs))
            total = 0.0
            for start in range(0, len(order), config.batch_size):
                batch = train_pairs.take(order[start:start + config.batch_size])
                loss, grads = _batch_grads(model, batch, spec, config.stage, threads, pool)
                grads = {k: v for k, v in grads.items() if k.startswith(prefix)}
                new, opt = ad.adam_step(model.params, grads, opt)
                model.params = new
                total += loss * len(batch)
            train_loss = total / len(train_pairs)
            val_loss = evaluate_loss(model, val_pairs, spec, config.stage)
            if not (math.isfinite(train_loss) and math.isfinite(val_loss)):
                raise NonFiniteError(f"non-finite loss at epoch {epoch}")
            history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss,
                            "lr": opt.lr})
            log.info("stage %d epoch %d train %.6e val %.6e", config.stage, epoch, train_loss, val_loss)
            if callback:
                callback(history[-1])
            if val_loss < best_val:
                best_val, best_epoch, stale = val_loss, epoch, 0
                best_params = {k: v.copy() for k, v in model.params.items()}
            else:
                stale += 1
                if stale >= config.patience:
                    log.info("early stop at epoch %d (best %d)", epoch, best_epoch)
                    break
    finally:
        if pool is not None:
            pool.shutdown()
    model.params = best_params
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        write_loss_csv(history, Path(out_dir) / "loss.csv")
    return TrainResult(model, history, best_epoch, opt, train_idx, val_idx)


def build_model(dataset: Dataset, config: ModelConfig, seed=0, time_scale=None) -> PARCModel:
    norm = Normalizer.from_dataset(dataset, config, time_scale)
    return PARCModel(config, norm, dx=dataset.trajectories[0].grid.dx, seed=seed)
