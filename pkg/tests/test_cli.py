import csv
import hashlib
import json

import numpy as np
import pytest

from qafnet import datagen as D
from qafnet.cli import main
from qafnet.config import RunConfig

SMALL_MODEL = {"model.m": 16, "model.patch": 4, "model.d": 4, "model.p": 4, "model.s": 3, "model.fourier_m": 4,
               "model.branch_hidden": (6,), "model.trunk_hidden": (6,), "model.head_hidden": (4,)}


def _write_config(path, **kw):
    over = dict(SMALL_MODEL)
    over.update({"data.n_buses": 3, "data.n_per_bus": 60, "data.n_loc": 4, "fed.total_rounds": 6,
                 "fed.k_local": 3, "fed.batch_size": 32, "finetune.max_epochs": 2})
    over.update(kw)
    RunConfig().with_overrides(**over).write(path)
    return str(path)


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("QAFNET_CONFIG", raising=False)
    return tmp_path


def _run_all(config, extra=()):
    for cmd in ("gen-data", "pretrain", "finetune", "calibrate", "evaluate"):
        assert main([cmd, "--config", config, *extra]) == 0, cmd


def _digests(root):
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_full_pipeline_smoke(workdir, capsys):
    config = _write_config(workdir / "run.ini", **{"data.n_per_bus": 200})
    _run_all(config)
    rows = list(csv.DictReader(open(workdir / "reports" / "summary.csv")))
    assert [r["stage"] for r in rows] == ["pretrained", "finetuned", "conformal"]
    for r in rows:
        assert 0.0 <= float(r["mean_picp"]) <= 1.0 and int(r["n_test"]) == 60
    assert (workdir / "checkpoints" / "run_config.ini").exists()


def test_same_seed_gives_identical_artifacts(tmp_path, monkeypatch):
    monkeypatch.delenv("QAFNET_CONFIG", raising=False)
    digests = []
    for name in ("a", "b"):
        d = tmp_path / name
        d.mkdir()
        monkeypatch.chdir(d)
        _run_all(_write_config(d / "run.ini"))
        digests.append(_digests(d))
    assert digests[0] == digests[1]


def test_dataset_files_per_bus(workdir):
    assert main(["gen-data", "--buses", "7", "--n-per-bus", "5", "--n-loc", "3", "--out", "d"]) == 0
    files = sorted((workdir / "d").glob("*.triplets"))
    assert len(files) == 7
    for f in files:
        assert len(D.load_dataset(f)) == 5 * 3


def test_refuses_overwrite(workdir, capsys):
    config = _write_config(workdir / "run.ini")
    assert main(["gen-data", "--config", config]) == 0
    assert main(["gen-data", "--config", config]) == 6
    assert "force-overwrite" in capsys.readouterr().err
    assert main(["gen-data", "--config", config, "--force-overwrite"]) == 0


def test_usage_errors(workdir):
    with pytest.raises(SystemExit) as exc:
        main(["gen-data", "--n-per-bus", "0"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["evaluate", "--alpha", "1.5"])
    assert exc.value.code == 2
    (workdir / "bad.ini").write_text("[model]\nwidth = 1\n")
    assert main(["gen-data", "--config", "bad.ini"]) == 2


def test_missing_artifacts(workdir, capsys):
    config = _write_config(workdir / "run.ini")
    assert main(["pretrain", "--config", config]) == 6
    assert main(["gen-data", "--config", config]) == 0
    assert main(["pretrain", "--config", config]) == 0
    assert main(["finetune", "--config", config]) == 0
    assert main(["evaluate", "--config", config, "--calibrated"]) == 6
    assert "calibrate" in capsys.readouterr().err


def test_calibration_set_too_small(workdir, capsys):
    # 10 trajectories x 1 query point leave 3 calibration scores; alpha 0.05 needs 19
    config = _write_config(workdir / "run.ini", **{"data.n_per_bus": 10, "data.n_loc": 1})
    for cmd in ("gen-data", "pretrain", "finetune"):
        assert main([cmd, "--config", config]) == 0
    assert main(["calibrate", "--config", config]) == 5
    assert "19" in capsys.readouterr().err


def test_predict(workdir, capsys):
    config = _write_config(workdir / "run.ini")
    _run_all(config)
    trajs, _ = D.load_trajectories(workdir / "data" / "bus02.traj")
    seg = D.segment(trajs[-1], 0.4)
    with open(workdir / "obs.csv", "w") as fh:
        fh.write("time,voltage\n")
        for t, v in zip(seg.u_times, seg.u_values):
            fh.write(f"{float(t)!r},{float(v)!r}\n")
    assert main(["predict", "obs.csv", "--config", config, "--out", "curve.csv"]) == 0
    rows = list(csv.DictReader(open(workdir / "curve.csv")))
    assert list(rows[0]) == ["t", "lower", "upper", "lower_raw", "upper_raw", "crossed"]
    t = np.array([float(r["t"]) for r in rows])
    assert t[0] > seg.u_times[-1] and t[-1] == pytest.approx(8.5)
    q_hat = json.loads((workdir / "checkpoints" / "calibration.json").read_text())["q_hat"]
    for r in rows:
        assert float(r["lower"]) == pytest.approx(float(r["lower_raw"]) - q_hat, abs=1e-14)
        assert float(r["upper"]) == pytest.approx(float(r["upper_raw"]) + q_hat, abs=1e-14)
    capsys.readouterr()
    assert main(["predict", "obs.csv", "--config", config, "--raw"]) == 0
    out = capsys.readouterr().out.splitlines()
    raw = list(csv.DictReader(out))
    assert len(raw) == len(rows) and all(a["lower"] == a["lower_raw"] for a in raw)
    (workdir / "late.csv").write_text("time,voltage\n0.0,1.0\n9.0,1.0\n")
    assert main(["predict", "late.csv", "--config", config, "--out", "late_out.csv"]) == 3
    assert not (workdir / "late_out.csv").exists()
