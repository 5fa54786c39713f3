"""Command-line entry point: ``parc <subcommand> [-c config] [-o run_dir] [key=value ...]``.

Exit codes: 0 success, 1 validation or contract error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import dns, io, metrics, report as report_mod, training
from .config import Config
from .dataset import Dataset
from .errors import (ConfigError, FormatError, NonFiniteError, ParcError, ShapeError, SolverError,
                     StageError, ValidationError)
from .model import Normalizer, PARCModel

log = logging.getLogger("parc")

SUBCOMMANDS = ("gen-burgers", "gen-mms", "gen-taylor-green", "ingest", "train", "rollout",
               "eval", "report")
CHECKPOINT_NAME = "checkpoint.parcckp"


class UsageError(ValidationError):
    pass


def _require(cfg: Config, key):
    v = cfg[key]
    if not v:
        raise UsageError(f"{key} must be set")
    return v


# --- checkpoints <-> models ---------------------------------------------------------

def checkpoint_from_model(model: PARCModel, cfg: Config, stage, seed, optimizer=None,
                          stage1_digest=bytes(32)) -> io.Checkpoint:
    return io.Checkpoint(stage, dict(model.params), seed, cfg.model_text(), stage1_digest,
                         optimizer, model.normalizer.to_blocks())


def model_from_checkpoint(ck: io.Checkpoint, dx) -> PARCModel:
    mcfg = Config.from_text(ck.config_text, "checkpoint config").model_config()
    return PARCModel(mcfg, Normalizer.from_blocks(ck.extra), ck.params, dx)


# --- subcommands ------------------------------------------------------------------------

def cmd_gen_burgers(cfg: Config, run: Path):
    params = {"R": cfg["dns.R"], "a": cfg["dns.a"], "w": cfg["dns.w"]}
    n = len(params["R"]) * len(params["a"]) * len(params["w"])
    ds = dns.sweep_dataset(params, cfg["dns.split"], cfg.burgers(),
                           progress=lambda i, *_: log.info("trajectory %d/%d done", i + 1, n))
    path = io.save_dataset(ds, run / "data")
    log.info("wrote %d trajectories, manifest %s", len(ds), path)


def cmd_gen_mms(cfg: Config, run: Path):
    grid = dns.taylor_green_grid(cfg["mms.grid"])
    man = dns.taylor_green_manufactured(cfg["mms.nu"], cfg["mms.rho"], cfg["mms.angle"])
    res = dns.mms_trajectory(grid, cfg["mms.dt"], cfg["mms.steps"], man)
    io.save_dataset(Dataset([res.trajectory], "mms"), run / "data")
    np.save(run / "data" / "reaction.npy", res.reaction)
    np.save(run / "data" / "forcing.npy", res.forcing)


def cmd_gen_taylor_green(cfg: Config, run: Path):
    grid = dns.taylor_green_grid(cfg["mms.grid"])
    traj = dns.taylor_green_trajectory(grid, cfg["mms.nu"], cfg["mms.rho"], cfg["mms.dt"],
                                       cfg["mms.steps"], angle=cfg["mms.angle"])
    io.save_dataset(Dataset([traj], "verification"), run / "data")


def cmd_ingest(cfg: Config, run: Path):
    path = Path(_require(cfg, "ingest.descriptor"))
    desc = io.parse_kv(path.read_text(encoding="utf-8"), str(path))
    traj, mask, entry = io.ingest_external(desc, base_dir=path.parent)
    io.save_dataset(Dataset([traj], "external"), run / "data")
    np.save(run / "data" / "mask.npy", mask)
    log.info("ingested %d snapshots, %d obstacle cells", len(traj), entry["mask_cells"])


def _train_config(cfg: Config) -> training.TrainConfig:
    return training.TrainConfig(
        stage=cfg["train.stage"], epochs=cfg["train.epochs"], batch_size=cfg["train.batch_size"],
        lr=cfg["train.lr"], lr_halve_every=cfg["train.lr_halve_every"], lr_floor=cfg["train.lr_floor"],
        patience=cfg["train.patience"], seed=cfg["train.seed"], integrator=cfg.integrator(False),
        val_fraction=cfg["train.val_fraction"], val_trajectories=cfg["train.val_trajectories"],
        workers=cfg["train.workers"])


def cmd_train(cfg: Config, run: Path):
    tcfg = _train_config(cfg)
    stage1 = None
    if tcfg.stage == 2:
        ck_path = cfg["train.stage1_checkpoint"]
        if not ck_path or not Path(ck_path).exists():
            raise StageError("stage 2 training requires a stage-1 checkpoint (train.stage1_checkpoint)")
        stage1 = io.read_checkpoint(ck_path)
        if stage1.stage != 1:
            raise StageError(f"{ck_path} is a stage-{stage1.stage} checkpoint, expected stage 1")
        if stage1.config_text != cfg.model_text():
            raise ConfigError("model configuration differs from the stage-1 checkpoint")
    ds = io.load_dataset(_require(cfg, "data.manifest"))
    dx = ds.trajectories[0].grid.dx
    if stage1 is None:
        model = training.build_model(ds, cfg.model_config(), cfg["model.seed"], cfg["model.time_scale"])
    else:
        model = model_from_checkpoint(stage1, dx)
    res = training.train(ds, model, tcfg, out_dir=run,
                         stage1_params=stage1.params if stage1 else None)
    digest = stage1.theta_digest() if stage1 else bytes(32)
    ck = checkpoint_from_model(res.model, cfg, tcfg.stage, tcfg.seed, res.optimizer, digest)
    io.write_checkpoint(ck, run / CHECKPOINT_NAME)
    last = res.history[-1]
    log.info("stage %d done: best epoch %d, final train %.6e val %.6e", tcfg.stage, res.best_epoch,
             last["train_loss"], last["val_loss"])


def cmd_rollout(cfg: Config, run: Path):
    ck = io.read_checkpoint(_require(cfg, "rollout.checkpoint"))
    ds = io.load_dataset(_require(cfg, "data.manifest"))
    model = model_from_checkpoint(ck, ds.trajectories[0].grid.dx)
    spec = cfg.integrator()
    if spec.use_correction and ck.stage != 2:
        raise StageError("use_correction needs a stage-2 checkpoint")
    preds = []
    for traj in ds.trajectories:
        steps = cfg["rollout.steps"] or len(traj) - 1
        preds.append(model.rollout(traj.snapshots[0], steps, spec, traj.constants))
    io.save_dataset(Dataset(preds, "prediction"), run / "pred")


def _resolve_manifest(p):
    p = Path(p)
    return p / "manifest.txt" if p.is_dir() else p


def cmd_eval(cfg: Config, run: Path):
    pred = io.load_dataset(_resolve_manifest(_require(cfg, "eval.pred")))
    truth = io.load_dataset(_resolve_manifest(_require(cfg, "eval.truth")))
    if len(pred) != len(truth):
        raise ShapeError(f"{len(pred)} predicted vs {len(truth)} true trajectories")
    mask = np.load(cfg["eval.mask"]) if cfg["eval.mask"] else None
    errors = []
    for i, (p, t) in enumerate(zip(pred.trajectories, truth.trajectories)):
        if len(p) > len(t):
            raise ShapeError(f"trajectory {i}: prediction longer than ground truth")
        t = type(t)(t.snapshots[:len(p)], t.dt, t.constants)
        c = t.constants
        rec = metrics.evaluate(p, t, name=truth.files[i] if truth.files else str(i),
                               R=c.get("R"), rho=c.get("rho"), Re=c.get("Re"), mask=mask)
        rec.extra.update({k: v for k, v in c.items()})
        errors.append(rec)
    keys = sorted({k for r in errors for k in r.extra})
    (run / "metrics.csv").write_text(report_mod.error_csv(errors, keys), encoding="utf-8")
    (run / "quality.csv").write_text(report_mod.quality_csv(errors, keys), encoding="utf-8")


def cmd_report(cfg: Config, run: Path):
    report_mod.report(run, frames=cfg["report.frames"], colormap=cfg["report.colormap"])


COMMANDS = {
    "gen-burgers": cmd_gen_burgers, "gen-mms": cmd_gen_mms, "gen-taylor-green": cmd_gen_taylor_green,
    "ingest": cmd_ingest, "train": cmd_train, "rollout": cmd_rollout, "eval": cmd_eval,
    "report": cmd_report,
}


def build_parser():
    p = argparse.ArgumentParser(prog="parc", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=SUBCOMMANDS)
    p.add_argument("-c", "--config", help="key=value config file")
    p.add_argument("-o", "--run-dir", default=None, help="output directory (default runs/<command>)")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("overrides", nargs="*", help="key=value overrides; bare stage=N means train.stage")
    return p


def _overrides(items):
    out = {}
    for item in items:
        if "=" not in item:
            raise UsageError(f"override must be key=value, got {item!r}")
        k, v = item.split("=", 1)
        k = k.strip()
        if k == "stage":
            k = "train.stage"
        out[k] = v.strip()
    return out


def main(argv=None) -> int:
    try:
        args = build_parser().parse_intermixed_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = Config.load(args.config) if args.config else Config()
        cfg.update(_overrides(args.overrides))
        run = Path(args.run_dir or Path("runs") / args.command)
        run.mkdir(parents=True, exist_ok=True)
        if args.command != "report":
            cfg.save(run / "config.txt")
        COMMANDS[args.command](cfg, run)
    except (ValidationError, ShapeError, StageError, FormatError) as e:
        print(f"parc {args.command}: error: {e}", file=sys.stderr)
        return 1
    except (NonFiniteError, SolverError, ParcError, OSError) as e:
        print(f"parc {args.command}: failed: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - last-resort runtime failure
        print(f"parc {args.command}: failed: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
