"""CSV tables and static renders for a finished run directory."""

from __future__ import annotations

import csv
import io as _io
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import io
from .errors import ValidationError
from .metrics import format_number, read_metrics_csv

ERROR_COLUMNS = ("rmse_u", "rmse_T", "rmse_P", "eps_T_hs", "eps_A_hs", "eps_Tdot_hs", "eps_Adot_hs")
QUALITY_COLUMNS = ("burgers_residual", "ns_residual", "eps_div", "eps_div_abs", "hotspot_empty_steps")
COLORMAP = "viridis"


def _csv(records, columns, extra_keys=()):
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = ["trajectory"] + list(columns) + list(extra_keys)
    w.writerow(cols)
    for r in records:
        row = asdict(r)
        extra = row.pop("extra")
        w.writerow([row["trajectory"]] + [format_number(row.get(c)) for c in columns]
                   + [format_number(extra.get(k)) for k in extra_keys])
    return buf.getvalue()


def error_csv(records, extra_keys=()):
    """Prediction-versus-truth errors; identical inputs give an all-zero row."""
    return _csv(records, ERROR_COLUMNS, extra_keys)


def quality_csv(records, extra_keys=()):
    """Physics-consistency measures of the prediction alone."""
    return _csv(records, QUALITY_COLUMNS, extra_keys)


def rmse_vs_param(rows, param="R", metric="rmse_u"):
    """``(param, metric)`` pairs sorted by the parameter, averaging duplicates."""
    acc = {}
    for r in rows:
        if r.get(param) is None or r.get(metric) is None:
            continue
        acc.setdefault(float(r[param]), []).append(float(r[metric]))
    return [(k, float(np.mean(v))) for k, v in sorted(acc.items())]


def _plt():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def render_frame(values, path, title="", colormap=COLORMAP, vmin=None, vmax=None):
    plt = _plt()
    fig, ax = plt.subplots(figsize=(4, 4), dpi=80)
    im = ax.imshow(values, origin="upper", cmap=colormap, vmin=vmin, vmax=vmax)
    ax.set_title(title)
    ax.set_xticks([])
    ax.set_yticks([])
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.savefig(path)
    plt.close(fig)


def plot_loss(loss_csv, path):
    rows = list(csv.DictReader(Path(loss_csv).read_text(encoding="utf-8").splitlines()))
    ep = [int(r["epoch"]) for r in rows]
    plt = _plt()
    fig, ax = plt.subplots(figsize=(5, 3.5), dpi=80)
    ax.semilogy(ep, [float(r["train_loss"]) for r in rows], label="train")
    ax.semilogy(ep, [float(r["val_loss"]) for r in rows], label="validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def _run_config(run: Path):
    p = run / "config.txt"
    return io.parse_kv(p.read_text(encoding="utf-8"), str(p)) if p.exists() else {}


def _pred_manifest(run: Path, cfg: dict):
    for cand in (run / "pred" / "manifest.txt", cfg.get("eval.pred", "")):
        if cand:
            p = Path(cand)
            p = p / "manifest.txt" if p.is_dir() else p
            if p.exists():
                return p
    return None


def report(run_dir, frames=(0,), colormap=COLORMAP):
    """Write ``report/`` inside ``run_dir`` and return the list of files produced.

    Needs at least one of ``metrics.csv`` (from eval) or ``loss.csv`` (from
    train).  Frames are rendered for the speed of every predicted trajectory
    with a colour range shared across frames.
    """
    run = Path(run_dir)
    metrics_path, loss_path = run / "metrics.csv", run / "loss.csv"
    if not metrics_path.exists() and not loss_path.exists():
        raise ValidationError(f"{run} has no metrics.csv or loss.csv to report on")
    out = run / "report"
    out.mkdir(exist_ok=True)
    made = []
    if metrics_path.exists():
        text = metrics_path.read_text(encoding="utf-8")
        rows = read_metrics_csv(text)
        (out / "metrics.csv").write_text(text, encoding="utf-8")
        made.append(out / "metrics.csv")
        curve = rmse_vs_param(rows)
        if curve:
            buf = "R,rmse_u\n" + "".join(f"{format_number(a)},{format_number(b)}\n" for a, b in curve)
            (out / "rmse_vs_R.csv").write_text(buf, encoding="utf-8")
            made.append(out / "rmse_vs_R.csv")
    if loss_path.exists():
        plot_loss(loss_path, out / "loss.png")
        made.append(out / "loss.png")
    pm = _pred_manifest(run, _run_config(run))
    if pm is not None:
        ds = io.load_dataset(pm)
        for i, traj in enumerate(ds.trajectories):
            sel = [k for k in frames if 0 <= k < len(traj)]
            arr = traj.to_array()
            speed = np.hypot(arr[:, 0], arr[:, 1])
            vmax = float(speed[sel].max()) if sel else None
            for k in sel:
                p = out / f"traj{i:04d}_frame{k:04d}.png"
                render_frame(speed[k], p, f"|u| t={traj.snapshots[k].t:.3g}", colormap, 0.0, vmax)
                made.append(p)
    return made
