"""Coverage / width metrics and trajectory-level evaluation reports."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .conformal import CalibrationResult
from .datagen import Trajectory, pad_input, segment
from .errors import ContractError, DegenerateRangeError
from .model import QafModel, predict_interval

__all__ = [
    "picp",
    "pinaw",
    "IntervalReport",
    "predict_curve",
    "evaluate_model",
    "write_report",
    "write_plot_data",
    "sweep",
    "STAGES",
]

STAGES = ("pretrained", "finetuned", "conformal")


def _aligned(targets, lowers, uppers):
    y, lo, hi = (np.asarray(a, dtype=np.float64).reshape(-1) for a in (targets, lowers, uppers))
    if not y.size == lo.size == hi.size:
        raise ContractError(f"length mismatch: {y.size}, {lo.size}, {hi.size}")
    if y.size == 0:
        raise ContractError("need at least one point")
    return y, lo, hi


def picp(targets, lowers, uppers) -> float:
    """Fraction of targets inside the closed intervals ``[lower, upper]``."""
    y, lo, hi = _aligned(targets, lowers, uppers)
    return float(np.mean((y >= lo) & (y <= hi)))


def pinaw(targets, lowers, uppers) -> float:
    """Mean interval width divided by the range of ``targets``.

    The sum is correctly rounded, so the value does not depend on the order
    of the points.
    """
    y, lo, hi = _aligned(targets, lowers, uppers)
    span = y.max() - y.min()
    if not span > 0.0:
        raise DegenerateRangeError("targets are constant; PINAW is undefined")
    return math.fsum((hi - lo) / span) / y.size


@dataclass
class IntervalReport:
    rows: list
    config: dict = field(default_factory=dict)

    @property
    def mean_picp(self) -> float:
        return float(np.mean([r["picp"] for r in self.rows]))

    @property
    def mean_pinaw(self) -> float:
        return float(np.mean([r["pinaw"] for r in self.rows]))

    @property
    def mean_crossing_rate(self) -> float:
        return float(np.mean([r["crossing_rate"] for r in self.rows]))


def predict_curve(model: QafModel, calib: CalibrationResult | None, traj: Trajectory, dt_obs: float):
    """Raw and (optionally) calibrated bounds over every grid point of the target window."""
    pin = pad_input(traj, dt_obs, model.config.sensor_times())
    seg = segment(traj, dt_obs)
    n = seg.v_times.size
    lo, hi, crossed = predict_interval(model, pin.values[None, :], [pin.valid_len], seg.v_times,
                                       np.zeros(n, dtype=np.int64))
    q = 0.0 if calib is None else calib.q_hat
    return {"t": seg.v_times, "truth": seg.v_values, "lo_raw": lo, "hi_raw": hi,
            "lo": lo - q, "hi": hi + q, "crossed": crossed}


def evaluate_model(model: QafModel, calib: CalibrationResult | None, trajs, dt_obs: float,
                   extra_config: dict | None = None) -> IntervalReport:
    """Per-trajectory PICP / PINAW over the dense target window.

    PINAW is normalised by each trajectory's own true range.
    """
    rows = []
    for j, tr in enumerate(trajs):
        c = predict_curve(model, calib, tr, dt_obs)
        rows.append({
            "trajectory": j,
            "bus_id": tr.scenario.bus_id,
            "stable": int(tr.scenario.stable),
            "n_points": int(c["t"].size),
            "picp": picp(c["truth"], c["lo"], c["hi"]),
            "pinaw": pinaw(c["truth"], c["lo"], c["hi"]),
            "crossing_rate": float(np.mean(c["crossed"])),
        })
    config = {"dt_obs": float(dt_obs), "alpha": model.config.alpha, "calibrated": calib is not None,
              "q_hat": None if calib is None else calib.q_hat, "n_test": len(rows),
              "pinaw_normalisation": "per-trajectory true range"}
    config.update(extra_config or {})
    return IntervalReport(rows, config)


_REPORT_COLUMNS = ("trajectory", "bus_id", "stable", "n_points", "picp", "pinaw", "crossing_rate")


def write_report(report: IntervalReport, path) -> None:
    """CSV: ``#`` config lines, one row per trajectory, then a ``mean`` footer row."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        for k in sorted(report.config):
            fh.write(f"# {k}: {report.config[k]}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_REPORT_COLUMNS)
        for r in report.rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in _REPORT_COLUMNS])
        w.writerow(["mean", "", "", "", repr(report.mean_picp), repr(report.mean_pinaw),
                    repr(report.mean_crossing_rate)])


def write_plot_data(model, calib, traj, dt_obs, path) -> None:
    c = predict_curve(model, calib, traj, dt_obs)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "truth", "lo_raw", "hi_raw", "lo_cal", "hi_cal"])
        for row in zip(c["t"], c["truth"], c["lo_raw"], c["hi_raw"], c["lo"], c["hi"]):
            w.writerow([repr(float(x)) for x in row])


def sweep(cells: dict, test_trajs: dict, dt_obs_list, sizes, stages=STAGES, path=None) -> list[dict]:
    """Mean PICP / PINAW for every (dt_obs, size, stage) cell.

    ``cells[(dt_obs, size)][stage]`` is ``(model, calib_or_None)``; a missing
    entry is reported with ``status="absent"``.  ``test_trajs[dt_obs]`` (or a
    single list shared by all) supplies the test trajectories.
    """
    rows = []
    for dt in dt_obs_list:
        trajs = test_trajs[dt] if isinstance(test_trajs, dict) else test_trajs
        for size in sizes:
            for stage in stages:
                entry = cells.get((dt, size), {}).get(stage)
                if entry is None:
                    rows.append({"dt_obs": dt, "size": size, "stage": stage,
                                 "mean_picp": "", "mean_pinaw": "", "status": "absent"})
                    continue
                rep = evaluate_model(entry[0], entry[1], trajs, dt)
                rows.append({"dt_obs": dt, "size": size, "stage": stage, "mean_picp": rep.mean_picp,
                             "mean_pinaw": rep.mean_pinaw, "status": "ok"})
    if path is not None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["dt_obs", "size", "stage", "mean_picp", "mean_pinaw", "status"],
                               lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
    return rows
