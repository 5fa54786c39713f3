"""Prediction-accuracy and solution-quality metrics.

Residual metrics average the cellwise residual magnitude over the grid
minus a one-cell boundary ring and any obstacle cells (both configurable),
and over all snapshots of the trajectory unless ``at`` picks one.  Time
derivatives are centred, with second-order one-sided differences on the
first and last snapshot.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field, fields as dc_fields
from typing import Optional

import numpy as np

from . import fdops
from .errors import ShapeError, ValidationError
from .fields import Field, Snapshot, Trajectory

HOTSPOT_THRESHOLD_K = 875.0


def _values(x):
    if isinstance(x, Field):
        return x.values
    return np.asarray(x, dtype=np.float64)


def speed(ux, uy):
    return np.hypot(_values(ux), _values(uy))


def rmse(pred, truth):
    """Root mean squared cellwise difference."""
    p, t = _values(pred), _values(truth)
    if isinstance(pred, Field) and isinstance(truth, Field) and pred.grid != truth.grid:
        raise ShapeError("grid mismatch")
    if p.shape != t.shape:
        raise ShapeError(f"shape mismatch {p.shape} vs {t.shape}")
    return float(np.sqrt(np.mean((p - t) ** 2)))


def rmse_u(pred: Snapshot, truth: Snapshot):
    """RMSE of the speed ``sqrt(u_x^2 + u_y^2)``."""
    return rmse(speed(*pred.velocity), speed(*truth.velocity))


def rmse_channel(pred: Snapshot, truth: Snapshot, name):
    return rmse(pred.channel(name), truth.channel(name))


def _check_aligned(pred: Trajectory, truth: Trajectory):
    if len(pred) != len(truth):
        raise ShapeError(f"trajectory lengths differ: {len(pred)} vs {len(truth)}")
    if pred.grid != truth.grid:
        raise ShapeError("trajectory grids differ")


def rmse_u_series(pred: Trajectory, truth: Trajectory):
    _check_aligned(pred, truth)
    return np.array([rmse_u(p, t) for p, t in zip(pred.snapshots, truth.snapshots)])


def time_derivative(arr, dt):
    """d/dt along axis 0: centred inside, second-order one-sided at the ends."""
    arr = np.asarray(arr, dtype=np.float64)
    if arr.shape[0] < 3:
        raise ValidationError("time derivative needs at least 3 snapshots")
    out = np.empty_like(arr)
    out[1:-1] = (arr[2:] - arr[:-2]) / (2 * dt)
    # difference form so a constant series gives exactly zero
    out[0] = (4 * (arr[1] - arr[0]) - (arr[2] - arr[0])) / (2 * dt)
    out[-1] = ((arr[-3] - arr[-1]) - 4 * (arr[-2] - arr[-1])) / (2 * dt)
    return out


def interior_weights(shape, ring=1, mask=None):
    """Boolean array of cells included in residual averages."""
    keep = np.ones(shape, dtype=bool)
    if ring:
        keep[:ring, :] = keep[-ring:, :] = False
        keep[:, :ring] = keep[:, -ring:] = False
    if mask is not None:
        keep &= np.asarray(_values(mask)) == 0
    return keep


def _spatial_terms(U, dx, scheme, mask):
    """Return ``u . grad U`` and ``Lap U`` for U of shape T x 2 x H x W."""
    if mask is None:
        gx = fdops.ddx(U, dx, scheme.boundary)
        gy = fdops.ddy(U, dx, scheme.boundary)
        lap = fdops.d2x(U, dx, scheme.boundary) + fdops.d2y(U, dx, scheme.boundary)
    else:
        m = _values(mask)
        gx = np.stack([np.stack([fdops.masked_d1(U[k, c], dx, m, 1) for c in range(2)])
                       for k in range(U.shape[0])])
        gy = np.stack([np.stack([fdops.masked_d1(U[k, c], dx, m, 0) for c in range(2)])
                       for k in range(U.shape[0])])
        lap = np.stack([np.stack([fdops.masked_d2(U[k, c], dx, m, 1) + fdops.masked_d2(U[k, c], dx, m, 0)
                                  for c in range(2)]) for k in range(U.shape[0])])
    ux, uy = U[:, 0:1], U[:, 1:2]
    return ux * gx + uy * gy, lap


def _velocity_array(traj: Trajectory):
    return np.stack([np.stack([s.velocity[0].values, s.velocity[1].values]) for s in traj.snapshots])


def _reduce_residual(f, keep, at):
    mag = np.sqrt(f[:, 0] ** 2 + f[:, 1] ** 2)
    if at is not None:
        return float(mag[at][keep].mean())
    return float(mag[:, keep].mean())


def burgers_residual_field(traj: Trajectory, R, scheme=None, mask=None):
    """Cellwise residual ``T x 2 x H x W`` of ``du/dt + u.grad u - Lap(u)/R``."""
    scheme = scheme or fdops.METRIC_SCHEME
    if len(traj) < 3:
        raise ValidationError("burgers_residual needs at least 3 snapshots")
    U = _velocity_array(traj)
    adv, lap = _spatial_terms(U, traj.grid.dx, scheme, mask)
    return time_derivative(U, traj.dt) + adv - lap / R


def burgers_residual(traj: Trajectory, R, at: Optional[int] = None, ring=1, mask=None,
                     scheme=None):
    """Mean over cells (and snapshots unless ``at`` is given) of ``sqrt(f_x^2 + f_y^2)``."""
    f = burgers_residual_field(traj, R, scheme, mask)
    return _reduce_residual(f, interior_weights(traj.grid.shape, ring, mask), at)


def ns_residual(traj: Trajectory, rho, Re, pressure="p", at: Optional[int] = None, ring=1,
                mask=None, scheme=None):
    """Momentum residual ``du/dt + u.grad u + grad(p)/rho - Lap(u)/Re``, obstacle cells excluded."""
    scheme = scheme or fdops.METRIC_SCHEME
    if pressure not in traj.channel_names:
        raise ValidationError(f"ns_residual needs a pressure channel {pressure!r}")
    if len(traj) < 3:
        raise ValidationError("ns_residual needs at least 3 snapshots")
    U = _velocity_array(traj)
    P = np.stack([s.channel(pressure).values for s in traj.snapshots])
    dx = traj.grid.dx
    adv, lap = _spatial_terms(U, dx, scheme, mask)
    if mask is None:
        gp = np.stack([fdops.ddx(P, dx, scheme.boundary), fdops.ddy(P, dx, scheme.boundary)], axis=1)
    else:
        m = _values(mask)
        gp = np.stack([np.stack([fdops.masked_d1(p, dx, m, 1), fdops.masked_d1(p, dx, m, 0)])
                       for p in P])
    f = time_derivative(U, traj.dt) + adv + gp / rho - lap / Re
    return _reduce_residual(f, interior_weights(traj.grid.shape, ring, mask), at)


def divergence_error(snapshot: Snapshot, scheme=None, mask=None):
    """``(signed mean, mean absolute)`` cellwise divergence over all non-obstacle cells."""
    div = fdops.divergence(snapshot.velocity, scheme or fdops.METRIC_SCHEME, mask).values
    keep = interior_weights(div.shape, 0, mask)
    return float(div[keep].mean()), float(np.abs(div[keep]).mean())


# --- hotspots ------------------------------------------------------------------

@dataclass
class HotspotSeries:
    times: np.ndarray
    temperature: np.ndarray  # T_hs(t_k)
    area: np.ndarray         # A_hs(t_k)
    temperature_rate: np.ndarray  # from k = 1 on
    area_rate: np.ndarray
    empty: np.ndarray        # True where A_hs == 0 and T_hs was set to 0


def hotspot_series(temperatures, times, cell_area, threshold=HOTSPOT_THRESHOLD_K):
    """Hotspot temperature, area and their backward-difference rates.

    ``temperatures`` is ``T x H x W`` (or a sequence of Fields).  An empty
    hotspot reports ``T_hs = 0`` and is flagged in ``empty``.
    """
    temps = np.stack([_values(t) for t in temperatures]).astype(np.float64)
    times = np.asarray(times, dtype=np.float64)
    if temps.shape[0] != times.shape[0]:
        raise ShapeError("one time per temperature field required")
    hot = temps >= threshold
    count = hot.sum(axis=(1, 2))
    area = count * cell_area
    # uniform cells: the area weights cancel, so average the hot temperatures directly
    hot_sum = np.where(hot, temps, 0.0).sum(axis=(1, 2))
    empty = count == 0
    t_hs = np.where(empty, 0.0, hot_sum / np.where(empty, 1, count))
    dt = np.diff(times)
    return HotspotSeries(times, t_hs, area, np.diff(t_hs) / dt, np.diff(area) / dt, empty)


def _rmse_series(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"series lengths differ: {a.shape} vs {b.shape}")
    if a.size == 0:
        return 0.0
    return float(np.sqrt(np.mean((a - b) ** 2)))


def hotspot_errors(pred: HotspotSeries, truth: HotspotSeries):
    """RMSE over time of each hotspot quantity."""
    return {
        "eps_T_hs": _rmse_series(pred.temperature, truth.temperature),
        "eps_A_hs": _rmse_series(pred.area, truth.area),
        "eps_Tdot_hs": _rmse_series(pred.temperature_rate, truth.temperature_rate),
        "eps_Adot_hs": _rmse_series(pred.area_rate, truth.area_rate),
    }


# --- records ---------------------------------------------------------------------

@dataclass
class MetricsRecord:
    trajectory: str = ""
    rmse_u: Optional[float] = None
    rmse_T: Optional[float] = None
    rmse_P: Optional[float] = None
    burgers_residual: Optional[float] = None
    ns_residual: Optional[float] = None
    eps_div: Optional[float] = None
    eps_div_abs: Optional[float] = None
    eps_T_hs: Optional[float] = None
    eps_A_hs: Optional[float] = None
    eps_Tdot_hs: Optional[float] = None
    eps_Adot_hs: Optional[float] = None
    hotspot_empty_steps: Optional[int] = None
    extra: dict = field(default_factory=dict)


METRIC_COLUMNS = tuple(f.name for f in dc_fields(MetricsRecord) if f.name != "extra")


def format_number(x):
    """Locale-independent 17-significant-digit formatting; blank for missing values."""
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    return format(float(x), ".17g")


def records_to_csv(records, extra_columns=()):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = list(METRIC_COLUMNS) + list(extra_columns)
    w.writerow(cols)
    for r in records:
        row = asdict(r)
        extra = row.pop("extra")
        vals = [row[c] if c in row else extra.get(c) for c in cols]
        w.writerow([v if isinstance(v, str) else format_number(v) for v in vals])
    return buf.getvalue()


def read_metrics_csv(text):
    rows = list(csv.DictReader(io.StringIO(text)))
    out = []
    for row in rows:
        parsed = {}
        for k, v in row.items():
            if k == "trajectory" or v == "":
                parsed[k] = v if k == "trajectory" else None
            else:
                parsed[k] = float(v)
        out.append(parsed)
    return out


def evaluate(pred: Trajectory, truth: Trajectory, name="", R=None, rho=None, Re=None,
             temperature="T", pressure_state="P", mask=None, skip_first=True):
    """Compute every applicable metric for an aligned prediction/truth pair.

    RMSEs average the per-snapshot values over predicted steps (step 0 is
    the shared initial condition and is skipped unless ``skip_first`` is
    False or the trajectory has a single snapshot).  Residual metrics are
    evaluated on the prediction.
    """
    _check_aligned(pred, truth)
    start = 1 if skip_first and len(pred) > 1 else 0
    pairs = list(zip(pred.snapshots[start:], truth.snapshots[start:]))
    rec = MetricsRecord(trajectory=name)
    rec.rmse_u = float(np.mean([rmse_u(p, t) for p, t in pairs]))
    names = pred.channel_names
    if temperature in names:
        rec.rmse_T = float(np.mean([rmse_channel(p, t, temperature) for p, t in pairs]))
        cell = pred.grid.cell_area
        hp = hotspot_series([s.channel(temperature) for s in pred.snapshots], pred.times(), cell)
        ht = hotspot_series([s.channel(temperature) for s in truth.snapshots], truth.times(), cell)
        for k, v in hotspot_errors(hp, ht).items():
            setattr(rec, k, v)
        rec.hotspot_empty_steps = int(hp.empty.sum())
    if pressure_state in names:
        rec.rmse_P = float(np.mean([rmse_channel(p, t, pressure_state) for p, t in pairs]))
    if R is not None and len(pred) >= 3:
        rec.burgers_residual = burgers_residual(pred, R, mask=mask)
    if rho is not None and Re is not None and "p" in names and len(pred) >= 3:
        rec.ns_residual = ns_residual(pred, rho, Re, mask=mask)
    divs = [divergence_error(s, mask=mask) for s in pred.snapshots]
    rec.eps_div = float(np.mean([d[0] for d in divs]))
    rec.eps_div_abs = float(np.mean([d[1] for d in divs]))
    return rec


def persistence(traj: Trajectory) -> Trajectory:
    """Baseline forecast that repeats the first frame at every time."""
    s0 = traj.snapshots[0]
    snaps = tuple(Snapshot(s.t, s0.velocity, s0.state, s0.channel_names) for s in traj.snapshots)
    return Trajectory(snaps, traj.dt, dict(traj.constants))


def is_finite_record(rec: MetricsRecord):
    return all(v is None or math.isfinite(v) for v in
               (getattr(rec, c) for c in METRIC_COLUMNS[1:]))
