"""Split conformal calibration of quantile intervals.

Scores are ``max(lo - G, G - hi)``.  The offset ``q_hat`` is the k-th
smallest calibration score with ``k = ceil((n + 1)(1 - alpha))`` and the
calibrated interval is ``[lo - q_hat, hi + q_hat]``.  Scores and intervals
are both computed on the order-fixed pair ``(min(lo, hi), max(lo, hi))``
that the inference path emits, so the finite-sample guarantee applies to
what users actually see.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datagen import TripletDataset
from .errors import ArtifactError, CalibrationError, ConfigError, ContractError
from .model import QafModel, file_sha256, predict_interval

__all__ = [
    "CalibrationResult",
    "score",
    "score_batch",
    "conformal_rank",
    "min_calibration_size",
    "conformal_quantile",
    "calibrate",
    "calibrated_interval",
    "save_calibration",
    "load_calibration",
]

CALIBRATION_FORMAT = "qafnet-calibration"


@dataclass
class CalibrationResult:
    q_hat: float
    scores: np.ndarray
    n_cal: int
    alpha: float
    k: int
    mode: str = "triplet"
    checkpoint_sha256: str | None = None
    extra: dict = field(default_factory=dict)


def _interval_scores(lo, hi, G):
    return np.maximum(lo - G, G - hi)


def score_batch(model: QafModel, U, valid_len, t, G, index=None) -> np.ndarray:
    lo, hi, _ = predict_interval(model, U, valid_len, t, index)
    return _interval_scores(lo, hi, np.asarray(G, dtype=np.float64))


def score(model: QafModel, u, t: float, G: float) -> float:
    """Nonconformity of one triplet; negative iff G lies strictly inside."""
    return float(score_batch(model, u, None, [t], [G])[0])


def conformal_rank(n: int, alpha: float) -> int:
    """``ceil((n + 1)(1 - alpha))``, guarded against float noise in the product."""
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must lie in (0, 1), got {alpha}")
    return math.ceil(round((n + 1) * (1.0 - alpha), 9))


def min_calibration_size(alpha: float) -> int:
    n = 1
    while conformal_rank(n, alpha) > n:
        n += 1
    return n


def conformal_quantile(scores, alpha: float):
    """Return ``(q_hat, k, sorted_scores)``; raises when n is too small for alpha."""
    s = np.sort(np.asarray(scores, dtype=np.float64).reshape(-1))
    n = s.size
    if n < 1:
        raise CalibrationError("calibration set is empty", min_n=min_calibration_size(alpha))
    k = conformal_rank(n, alpha)
    if k > n:
        need = min_calibration_size(alpha)
        raise CalibrationError(
            f"n_cal = {n} is too small for alpha = {alpha}; need at least n_cal = {need}", min_n=need)
    return float(s[k - 1]), k, s


def calibrate(model: QafModel, cal_set: TripletDataset, alpha: float | None = None,
              mode: str = "triplet", rng: np.random.Generator | None = None) -> CalibrationResult:
    """Compute the conformal offset on ``cal_set``.

    ``mode="trajectory"`` keeps one randomly chosen triplet per source
    trajectory, which makes calibration points independent draws.
    """
    alpha = model.config.alpha if alpha is None else alpha
    if mode == "trajectory":
        rng = rng if rng is not None else np.random.default_rng(0)
        rows = np.array([rng.choice(np.flatnonzero(cal_set.index == j))
                         for j in range(cal_set.n_trajectories)], dtype=np.int64)
    elif mode == "triplet":
        rows = np.arange(len(cal_set))
    else:
        raise ContractError(f"unknown calibration mode {mode!r}")
    scores = []
    for start in range(0, rows.size, 2048):
        U, valid, index, t, G = cal_set.compact_batch(rows[start:start + 2048])
        scores.append(score_batch(model, U, valid, t, G, index))
    scores = np.concatenate(scores) if scores else np.zeros(0)
    q_hat, k, s = conformal_quantile(scores, alpha)
    return CalibrationResult(q_hat, s, int(s.size), float(alpha), k, mode)


def calibrated_interval(model: QafModel, calib: CalibrationResult, u, t, valid_len=None, index=None):
    """``(lo - q_hat, hi + q_hat)`` for scalar or batched inputs."""
    lo, hi, _ = predict_interval(model, u, valid_len, np.atleast_1d(t), index)
    lo, hi = lo - calib.q_hat, hi + calib.q_hat
    if np.ndim(t) == 0:
        return float(lo[0]), float(hi[0])
    return lo, hi


def save_calibration(result: CalibrationResult, path, checkpoint_path=None, bins: int = 20) -> None:
    sha = file_sha256(checkpoint_path) if checkpoint_path is not None else result.checkpoint_sha256
    counts, edges = np.histogram(result.scores, bins=bins)
    doc = {
        "format": CALIBRATION_FORMAT,
        "version": 1,
        "alpha": result.alpha,
        "n_cal": result.n_cal,
        "k": result.k,
        "q_hat": result.q_hat,
        "mode": result.mode,
        "checkpoint_sha256": sha,
        "histogram": {"counts": [int(c) for c in counts], "edges": [float(e) for e in edges]},
        "scores": [float(x) for x in result.scores],
        "extra": result.extra,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1) + "\n")


def load_calibration(path, checkpoint_path=None) -> CalibrationResult:
    """Load a calibration file; with ``checkpoint_path`` the hash must match."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ArtifactError(f"calibration file not found: {path}") from None
    if doc.get("format") != CALIBRATION_FORMAT:
        raise ArtifactError(f"{path} is not a calibration file")
    if checkpoint_path is not None:
        actual = file_sha256(checkpoint_path)
        if actual != doc["checkpoint_sha256"]:
            raise ArtifactError(
                f"calibration {path} was made for checkpoint {doc['checkpoint_sha256'][:12]}..., "
                f"but {checkpoint_path} hashes to {actual[:12]}...")
    return CalibrationResult(doc["q_hat"], np.array(doc["scores"], dtype=np.float64), doc["n_cal"],
                             doc["alpha"], doc["k"], doc["mode"], doc["checkpoint_sha256"],
                             doc.get("extra", {}))
