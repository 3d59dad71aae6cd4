"""End-to-end stages driven by a :class:`~qafnet.config.RunConfig`.

Each stage reads the artifacts of the previous one by path and writes its
own, plus a copy of the resolved configuration (``run_config.ini``) in its
output directory.  File names::

    <data_dir>/bus{b:02d}.triplets      triplet dataset of bus b
    <data_dir>/bus{b:02d}.traj          full trajectories of bus b
    <checkpoint_dir>/pretrained.json    federated pre-training result
    <checkpoint_dir>/finetuned.json     target-bus fine-tuning result
    <checkpoint_dir>/calibration.json   conformal offset for finetuned.json
    <report_dir>/report_<stage>.csv     per-trajectory PICP / PINAW
    <report_dir>/summary.csv            one line per stage
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .config import RunConfig
from .conformal import calibrate, load_calibration, save_calibration
from .datagen import (BusProfile, assemble_triplets, default_t_max, generate_bus, load_dataset,
                      load_trajectories, make_bus_profiles, save_dataset, save_trajectories)
from .errors import ArtifactError, CalibrationError, ContractError
from .evaluation import STAGES, evaluate_model, write_report
from .federated import MessageLog, finetune, pretrain
from .model import load_checkpoint, save_checkpoint

__all__ = [
    "bus_profiles",
    "target_profile",
    "dataset_path",
    "trajectory_path",
    "generate_data",
    "run_pretrain",
    "run_finetune",
    "run_calibrate",
    "run_evaluate",
    "CONFIG_NAME",
]

CONFIG_NAME = "run_config.ini"


def target_profile(seed: int, spread: float) -> BusProfile:
    # separate stream from the neighbours so the target is not one of them
    return make_bus_profiles(1, seed + 1000, spread=spread)[0]


def bus_profiles(cfg: RunConfig) -> dict:
    """Bus id -> profile for every neighbour and the target."""
    out = dict(enumerate(make_bus_profiles(cfg.data.n_buses - 1, cfg.seed, cfg.data.bus_spread)))
    out[cfg.data.target_bus] = target_profile(cfg.seed, cfg.data.target_spread)
    return out


def dataset_path(data_dir, bus: int) -> Path:
    return Path(data_dir) / f"bus{bus:02d}.triplets"


def trajectory_path(data_dir, bus: int) -> Path:
    return Path(data_dir) / f"bus{bus:02d}.traj"


def _claim(paths, force: bool) -> None:
    existing = [str(p) for p in paths if Path(p).exists()]
    if existing and not force:
        raise ArtifactError(f"refusing to overwrite {', '.join(existing)}; pass --force-overwrite")


def _persist(cfg: RunConfig, directory) -> None:
    cfg.write(Path(directory) / CONFIG_NAME)


def generate_data(cfg: RunConfig, data_dir=None, force: bool = False) -> list[Path]:
    data_dir = Path(data_dir or cfg.data_dir)
    buses = range(cfg.data.n_buses)
    _claim([dataset_path(data_dir, b) for b in buses] + [trajectory_path(data_dir, b) for b in buses], force)
    profiles = bus_profiles(cfg)
    m = cfg.model["m"]
    t_max = default_t_max(cfg.dt_obs)
    written = []
    for b in buses:
        trajs = generate_bus(cfg.seed, b, cfg.data.n_per_bus, profiles[b], grid_step=cfg.data.grid_step,
                             T=cfg.data.horizon, noise_std=cfg.data.noise_std, p_stable=cfg.data.p_stable)
        ds = assemble_triplets(trajs, cfg.dt_obs, m, cfg.data.n_loc, np.random.default_rng([cfg.seed, b, 0xDA7A]),
                               t_max=t_max, seed=cfg.seed)
        ds.meta["role"] = "target" if b == cfg.data.target_bus else "neighbour"
        save_dataset(ds, dataset_path(data_dir, b))
        save_trajectories(trajs, trajectory_path(data_dir, b),
                          header={"bus_id": b, "seed": cfg.seed, "noise_std": cfg.data.noise_std})
        written += [dataset_path(data_dir, b), trajectory_path(data_dir, b)]
    _persist(cfg, data_dir)
    return written


def _check_dataset(ds, cfg: RunConfig, path) -> None:
    if ds.meta.get("m") != cfg.model["m"] or abs(ds.meta.get("dt_obs", -1) - cfg.dt_obs) > 1e-12:
        raise ArtifactError(f"{path} was built with m={ds.meta.get('m')}, dt_obs={ds.meta.get('dt_obs')}; "
                            f"config asks for m={cfg.model['m']}, dt_obs={cfg.dt_obs}")


def _target_subset(cfg: RunConfig, data_dir, part: int):
    path = dataset_path(data_dir, cfg.data.target_bus)
    ds = load_dataset(path)
    _check_dataset(ds, cfg, path)
    rows = np.array(list(cfg.data.target_split(ds.n_trajectories)[part]), dtype=np.int64)
    if rows.size == 0:
        raise ContractError(f"target split {('finetune', 'calibration', 'test')[part]} is empty")
    return ds.select_trajectories(rows)


def run_pretrain(cfg: RunConfig, data_dir=None, checkpoint_dir=None, threads: int = 1, force: bool = False,
                 round_checkpoints: bool = False, log: MessageLog | None = None) -> Path:
    data_dir = Path(data_dir or cfg.data_dir)
    ckpt_dir = Path(checkpoint_dir or cfg.checkpoint_dir)
    out = ckpt_dir / "pretrained.json"
    _claim([out], force)
    datasets = {}
    for b in cfg.data.neighbour_buses:
        path = dataset_path(data_dir, b)
        datasets[b] = load_dataset(path)
        _check_dataset(datasets[b], cfg, path)
    model, _ = pretrain(cfg.fed_config(), datasets, cfg.model_config(), log=log,
                        telemetry_path=ckpt_dir / "pretrain_telemetry.csv",
                        checkpoint_dir=ckpt_dir / "rounds" if round_checkpoints else None, threads=threads)
    save_checkpoint(model, out, extra={"stage": "pretrained", "buses": cfg.data.neighbour_buses})
    _persist(cfg, ckpt_dir)
    return out


def run_finetune(cfg: RunConfig, data_dir=None, checkpoint_dir=None, force: bool = False) -> Path:
    data_dir = Path(data_dir or cfg.data_dir)
    ckpt_dir = Path(checkpoint_dir or cfg.checkpoint_dir)
    out = ckpt_dir / "finetuned.json"
    _claim([out], force)
    base = load_checkpoint(ckpt_dir / "pretrained.json")
    ft_set = _target_subset(cfg, data_dir, 0)
    model, history = finetune(base, ft_set, cfg.finetune_config(), telemetry_path=ckpt_dir / "finetune_telemetry.csv")
    best = min(history, key=lambda h: h[2])[0]
    save_checkpoint(model, out, extra={"stage": "finetuned", "bus": cfg.data.target_bus, "best_epoch": best})
    _persist(cfg, ckpt_dir)
    return out


def run_calibrate(cfg: RunConfig, data_dir=None, checkpoint_dir=None, force: bool = False,
                  checkpoint=None) -> Path:
    data_dir = Path(data_dir or cfg.data_dir)
    ckpt_dir = Path(checkpoint_dir or cfg.checkpoint_dir)
    out = ckpt_dir / "calibration.json"
    _claim([out], force)
    checkpoint = Path(checkpoint or ckpt_dir / "finetuned.json")
    model = load_checkpoint(checkpoint)
    cal_set = _target_subset(cfg, data_dir, 1)
    results = {}
    for mode in ("triplet", "trajectory"):
        try:
            results[mode] = calibrate(model, cal_set, cfg.alpha, mode=mode,
                                      rng=np.random.default_rng([cfg.seed, 0xCA1]))
        except CalibrationError:
            if mode == cfg.calibration_mode:
                raise
    result = results[cfg.calibration_mode]
    other = "trajectory" if cfg.calibration_mode == "triplet" else "triplet"
    result.extra = {"bus": cfg.data.target_bus, "n_trajectories": cal_set.n_trajectories,
                    f"q_hat_{other}_mode": results[other].q_hat if other in results else None}
    save_calibration(result, out, checkpoint)
    _persist(cfg, ckpt_dir)
    return out


def run_evaluate(cfg: RunConfig, data_dir=None, checkpoint_dir=None, report_dir=None, stages=STAGES,
                 force: bool = False) -> list[dict]:
    """Evaluate the requested stages on the target test trajectories.

    ``pretrained`` is the zero-shot model, ``finetuned`` the fine-tuned one
    with raw quantile bounds and ``conformal`` the fine-tuned one with the
    calibration offset applied.
    """
    data_dir = Path(data_dir or cfg.data_dir)
    ckpt_dir = Path(checkpoint_dir or cfg.checkpoint_dir)
    rep_dir = Path(report_dir or cfg.report_dir)
    for s in stages:
        if s not in STAGES:
            raise ContractError(f"unknown stage {s!r}; choose from {STAGES}")
    outs = [rep_dir / f"report_{s}.csv" for s in stages] + [rep_dir / "summary.csv"]
    _claim(outs, force)
    trajs, _ = load_trajectories(trajectory_path(data_dir, cfg.data.target_bus))
    test = [trajs[i] for i in cfg.data.target_split(len(trajs))[2]]
    summary = []
    for stage in stages:
        ckpt = ckpt_dir / ("pretrained.json" if stage == "pretrained" else "finetuned.json")
        model = load_checkpoint(ckpt)
        calib = None
        if stage == "conformal":
            cal_path = ckpt_dir / "calibration.json"
            if not cal_path.exists():
                raise ArtifactError(f"conformal evaluation needs {cal_path}; run calibrate first")
            calib = load_calibration(cal_path, ckpt)
        report = evaluate_model(model, calib, test, cfg.dt_obs,
                                {"stage": stage, "checkpoint": ckpt.name, "bus": cfg.data.target_bus})
        write_report(report, rep_dir / f"report_{stage}.csv")
        summary.append({"stage": stage, "mean_picp": report.mean_picp, "mean_pinaw": report.mean_pinaw,
                        "mean_crossing_rate": report.mean_crossing_rate, "n_test": len(report.rows)})
    with open(rep_dir / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stage", "mean_picp", "mean_pinaw", "mean_crossing_rate", "n_test"])
        for row in summary:
            w.writerow([row["stage"], repr(row["mean_picp"]), repr(row["mean_pinaw"]),
                        repr(row["mean_crossing_rate"]), row["n_test"]])
    _persist(cfg, rep_dir)
    return summary
