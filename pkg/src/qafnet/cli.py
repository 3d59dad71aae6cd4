"""Command line entry point: ``qafnet <subcommand> [options]``.

Subcommands run one pipeline stage each (see :mod:`qafnet.pipeline`)::

    gen-data   neighbour and target bus datasets
    pretrain   federated pre-training on the neighbour buses
    finetune   fine-tuning on the target bus
    calibrate  split conformal offset for the fine-tuned model
    evaluate   PICP / PINAW reports on the target test trajectories
    predict    interval curve for one observed trajectory (CSV: time,voltage)

The configuration comes from ``--config``, else ``$QAFNET_CONFIG``, else the
built-in defaults; flags override it.  Exit codes: 0 success, 2 usage or
configuration error, 3 data error, 4 training error, 5 calibration error,
6 missing or mismatched artifact.
"""

from __future__ import annotations

import argparse
import csv
import io
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import pipeline
from .config import CONFIG_ENV, load_config
from .conformal import load_calibration
from .datagen import pad_observed
from .errors import ArtifactError, DataError, QafError
from .evaluation import STAGES
from .model import load_checkpoint, predict_interval


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _probability(text: str) -> float:
    value = float(text)
    if not 0.0 < value < 1.0:
        raise argparse.ArgumentTypeError(f"must lie in (0, 1), got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help=f"INI run configuration (default: ${CONFIG_ENV} or built-in)")
    common.add_argument("--seed", type=int)
    common.add_argument("--dt-obs", type=float, help="observed post-fault window in seconds")
    common.add_argument("--alpha", type=_probability, help="miscoverage level")
    common.add_argument("--data-dir")
    common.add_argument("--checkpoint-dir")
    common.add_argument("--report-dir")
    common.add_argument("--threads", type=_positive_int, default=1,
                        help="worker threads; 1 (default) is bit-reproducible")
    common.add_argument("--force-overwrite", action="store_true", help="replace existing outputs")

    parser = argparse.ArgumentParser(prog="qafnet", description="Quantile DeepONet intervals for post-fault voltages")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate bus datasets")
    p.add_argument("--buses", type=_positive_int, help="total buses; the last one is the target")
    p.add_argument("--n-per-bus", type=_positive_int, help="trajectories per bus")
    p.add_argument("--n-loc", type=_positive_int, help="query points per trajectory")
    p.add_argument("--out", help="output directory (overrides --data-dir)")

    p = sub.add_parser("pretrain", parents=[common], help="federated pre-training")
    p.add_argument("--rounds", type=int, help="total local rounds")
    p.add_argument("--k-local", type=_positive_int, help="local rounds between averaging events")
    p.add_argument("--round-checkpoints", action="store_true", help="checkpoint at every averaging event")

    p = sub.add_parser("finetune", parents=[common], help="fine-tune on the target bus")
    p.add_argument("--epochs", type=int, help="maximum fine-tuning epochs")

    p = sub.add_parser("calibrate", parents=[common], help="conformal calibration")
    p.add_argument("--checkpoint", help="checkpoint to calibrate (default: finetuned.json)")
    p.add_argument("--mode", choices=("triplet", "trajectory"))

    p = sub.add_parser("evaluate", parents=[common], help="coverage / width reports")
    p.add_argument("--stages", default=",".join(STAGES), help=f"comma list from {','.join(STAGES)}")
    p.add_argument("--calibrated", action="store_true", help="only the calibrated stage (same as --stages conformal)")

    p = sub.add_parser("predict", parents=[common], help="interval curve for one observed trajectory")
    p.add_argument("input", help="CSV with columns time,voltage covering the observed window")
    p.add_argument("--checkpoint", help="default: finetuned.json in the checkpoint directory")
    p.add_argument("--calibration", help="default: calibration.json next to the checkpoint, if present")
    p.add_argument("--raw", action="store_true", help="skip the conformal offset")
    p.add_argument("--out", help="output CSV (default: stdout)")
    return parser


def _resolve_config(args):
    cfg = load_config(args.config)
    over = {"seed": args.seed, "dt_obs": args.dt_obs, "alpha": args.alpha, "data_dir": args.data_dir,
            "checkpoint_dir": args.checkpoint_dir, "report_dir": args.report_dir}
    if args.command == "gen-data":
        over.update({"data.n_buses": args.buses, "data.n_per_bus": args.n_per_bus, "data.n_loc": args.n_loc,
                     "data_dir": args.out or args.data_dir})
    elif args.command == "pretrain":
        over.update({"fed.total_rounds": args.rounds, "fed.k_local": args.k_local})
    elif args.command == "finetune":
        over["finetune.max_epochs"] = args.epochs
    elif args.command == "calibrate":
        over["calibration_mode"] = args.mode
    return cfg.with_overrides(**over)


def _read_observation(path):
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except FileNotFoundError:
        raise ArtifactError(f"observation file not found: {path}") from None
    if not rows or [c.strip().lower() for c in rows[0]] != ["time", "voltage"]:
        raise DataError(f"{path}: expected a header line 'time,voltage'")
    try:
        data = np.array([[float(a), float(b)] for a, b in rows[1:]], dtype=np.float64)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None
    if data.shape[0] == 0:
        raise DataError(f"{path}: no observations")
    return data[:, 0], data[:, 1]


def _predict(cfg, args, out):
    ckpt_dir = Path(cfg.checkpoint_dir)
    checkpoint = Path(args.checkpoint or ckpt_dir / "finetuned.json")
    model = load_checkpoint(checkpoint)
    q_hat = 0.0
    if not args.raw:
        cal_path = Path(args.calibration) if args.calibration else checkpoint.parent / "calibration.json"
        if args.calibration or cal_path.exists():
            q_hat = load_calibration(cal_path, checkpoint).q_hat
    times, volts = _read_observation(args.input)
    pin = pad_observed(times, volts, model.config.sensor_times())
    step = cfg.data.grid_step
    first = int(np.floor(times[-1] / step + 1e-9)) + 1
    last = int(np.floor(model.config.horizon / step + 1e-9))
    if first > last:
        raise DataError(f"observations reach {times[-1]} s; nothing left to predict before {model.config.horizon} s")
    t = np.arange(first, last + 1) * step
    lo, hi, crossed = predict_interval(model, pin.values[None, :], [pin.valid_len], t, np.zeros(t.size, dtype=np.int64))
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["t", "lower", "upper", "lower_raw", "upper_raw", "crossed"])
    for row in zip(t, lo - q_hat, hi + q_hat, lo, hi, crossed):
        w.writerow([repr(float(x)) for x in row[:5]] + [int(row[5])])


def run(args) -> None:
    cfg = _resolve_config(args)
    force = args.force_overwrite
    if args.command == "gen-data":
        for path in pipeline.generate_data(cfg, force=force):
            print(path)
    elif args.command == "pretrain":
        print(pipeline.run_pretrain(cfg, threads=args.threads, force=force,
                                    round_checkpoints=args.round_checkpoints))
    elif args.command == "finetune":
        print(pipeline.run_finetune(cfg, force=force))
    elif args.command == "calibrate":
        print(pipeline.run_calibrate(cfg, force=force, checkpoint=args.checkpoint))
    elif args.command == "evaluate":
        stages = ("conformal",) if args.calibrated else tuple(s.strip() for s in args.stages.split(",") if s.strip())
        for row in pipeline.run_evaluate(cfg, stages=stages, force=force):
            print(f"{row['stage']:<11} PICP {row['mean_picp']:.4f}  PINAW {row['mean_pinaw']:.4f}  "
                  f"crossing {row['mean_crossing_rate']:.4f}")
    elif args.command == "predict":
        if args.out:
            out_path = Path(args.out)
            if out_path.exists() and not force:
                raise ArtifactError(f"refusing to overwrite {out_path}; pass --force-overwrite")
            buf = io.StringIO()
            _predict(cfg, args, buf)
            out_path.parent.mkdir(parents=True, exist_ok=True)
            out_path.write_text(buf.getvalue())
        else:
            _predict(cfg, args, sys.stdout)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with threadpool_limits(limits=args.threads):
            run(args)
    except QafError as exc:
        print(f"qafnet {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
