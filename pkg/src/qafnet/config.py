"""Run configuration: INI files with one section per pipeline stage.

A file may set any subset of keys; everything else keeps its default.  The
fully resolved configuration is written next to every output so a rerun from
that file reproduces the outputs.  Sections and keys::

    [run]       seed, alpha, dt_obs, data_dir, checkpoint_dir, report_dir,
                calibration_mode
    [data]      n_buses, n_per_bus, n_loc, grid_step, horizon, noise_std,
                p_stable, bus_spread, target_spread, finetune_fraction,
                calibration_fraction
    [model]     ModelConfig fields except alpha, t_max_input and horizon
                (those follow from [run] and [data])
    [fed]       FedConfig fields (seed follows [run])
    [finetune]  FineTuneConfig fields (seed follows [run])

Bus ``n_buses - 1`` is the target bus; the others are the neighbours used
for federated pre-training.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import os
from dataclasses import dataclass, field
from pathlib import Path

from .datagen import default_t_max
from .errors import ConfigError
from .federated import FedConfig, FineTuneConfig
from .model import ModelConfig

__all__ = ["DataConfig", "RunConfig", "CONFIG_ENV", "load_config", "default_config_path"]

CONFIG_ENV = "QAFNET_CONFIG"


@dataclass(frozen=True)
class DataConfig:
    n_buses: int = 7
    n_per_bus: int = 500
    n_loc: int = 16
    grid_step: float = 0.01
    horizon: float = 8.5
    noise_std: float = 0.01
    p_stable: float = 0.8
    bus_spread: float = 1.0
    target_spread: float = 2.5
    finetune_fraction: float = 0.4
    calibration_fraction: float = 0.3

    def __post_init__(self):
        if self.n_buses < 2:
            raise ConfigError(f"need at least one neighbour and one target bus, got n_buses={self.n_buses}")
        if self.n_per_bus < 1 or self.n_loc < 1:
            raise ConfigError("n_per_bus and n_loc must be >= 1")
        if not (0 < self.finetune_fraction and 0 < self.calibration_fraction
                and self.finetune_fraction + self.calibration_fraction < 1):
            raise ConfigError("finetune_fraction and calibration_fraction must be positive and sum below 1")

    @property
    def target_bus(self) -> int:
        return self.n_buses - 1

    @property
    def neighbour_buses(self) -> list[int]:
        return list(range(self.n_buses - 1))

    def target_split(self, n: int | None = None):
        """Trajectory index ranges ``(finetune, calibration, test)`` of the target bus."""
        n = self.n_per_bus if n is None else n
        a = int(round(self.finetune_fraction * n))
        b = a + int(round(self.calibration_fraction * n))
        return range(0, a), range(a, b), range(b, n)


# model fields that are derived from other sections
_DERIVED_MODEL = ("alpha", "t_max_input", "horizon")

# the desk-scale defaults used throughout the narrative scripts
_MODEL_DEFAULTS = dict(m=64, patch=4, d=16, p=16, s=16, fourier_m=16, fourier_sigma=2.0,
                       branch_hidden=(32,), trunk_hidden=(32, 32), head_hidden=(16,))
_FED_DEFAULTS = dict(k_local=5, total_rounds=5000, batch_size=64, lr=2e-3)
_FINETUNE_DEFAULTS = dict(max_epochs=40, patience=5, lr=3e-4)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    alpha: float = 0.05
    dt_obs: float = 0.4
    data_dir: str = "data"
    checkpoint_dir: str = "checkpoints"
    report_dir: str = "reports"
    calibration_mode: str = "triplet"
    data: DataConfig = field(default_factory=DataConfig)
    model: dict = field(default_factory=lambda: dict(_MODEL_DEFAULTS))
    fed: dict = field(default_factory=lambda: dict(_FED_DEFAULTS))
    finetune: dict = field(default_factory=lambda: dict(_FINETUNE_DEFAULTS))

    def __post_init__(self):
        if self.calibration_mode not in ("triplet", "trajectory"):
            raise ConfigError(f"calibration_mode must be 'triplet' or 'trajectory', got {self.calibration_mode!r}")
        if self.dt_obs < 0:
            raise ConfigError(f"dt_obs must be >= 0, got {self.dt_obs}")
        # resolve every section once: bad values fail here and equal configs compare equal
        try:
            model, fed, ft = self.model_config(), self.fed_config(), self.finetune_config()
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        object.__setattr__(self, "model", {f.name: getattr(model, f.name) for f in dataclasses.fields(model)
                                           if f.name not in _DERIVED_MODEL})
        object.__setattr__(self, "fed", {f.name: getattr(fed, f.name) for f in dataclasses.fields(fed)
                                         if f.name != "seed"})
        object.__setattr__(self, "finetune", {f.name: getattr(ft, f.name) for f in dataclasses.fields(ft)
                                              if f.name != "seed"})

    def model_config(self) -> ModelConfig:
        return ModelConfig(**self.model, alpha=self.alpha, t_max_input=default_t_max(self.dt_obs),
                           horizon=self.data.horizon)

    def fed_config(self) -> FedConfig:
        return FedConfig(**self.fed, seed=self.seed)

    def finetune_config(self) -> FineTuneConfig:
        return FineTuneConfig(**self.finetune, seed=self.seed)

    def with_overrides(self, **kw) -> "RunConfig":
        """Replace top-level or ``section.key`` values, skipping ``None``."""
        top, nested = {}, {}
        for key, value in kw.items():
            if value is None:
                continue
            if "." in key:
                sec, name = key.split(".", 1)
                nested.setdefault(sec, {})[name] = value
            else:
                top[key] = value
        for sec, values in nested.items():
            if sec == "data":
                top["data"] = dataclasses.replace(top.get("data", self.data), **values)
            else:
                top[sec] = {**getattr(self, sec), **values}
        return dataclasses.replace(self, **top)

    def paths(self, root=".") -> dict:
        root = Path(root)
        return {"data": root / self.data_dir, "checkpoints": root / self.checkpoint_dir,
                "reports": root / self.report_dir}

    # ------------------------------------------------------------------ INI

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp["run"] = {k: _fmt(getattr(self, k)) for k in
                     ("seed", "alpha", "dt_obs", "data_dir", "checkpoint_dir", "report_dir", "calibration_mode")}
        cp["data"] = {f.name: _fmt(getattr(self.data, f.name)) for f in dataclasses.fields(DataConfig)}
        for sec in ("model", "fed", "finetune"):
            cp[sec] = {k: _fmt(v) for k, v in getattr(self, sec).items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def write(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_ini())

    @classmethod
    def from_ini(cls, text: str, source: str = "<string>") -> "RunConfig":
        cp = configparser.ConfigParser(interpolation=None)
        try:
            cp.read_string(text, source=source)
        except configparser.Error as exc:
            raise ConfigError(f"{source}: {exc}") from None
        known = {"run", "data", "model", "fed", "finetune"}
        unknown = set(cp.sections()) - known
        if unknown:
            raise ConfigError(f"{source}: unknown section(s) {sorted(unknown)}")
        kw = {}
        if cp.has_section("run"):
            kw.update(_parse_section(cp["run"], {f.name: f for f in dataclasses.fields(cls)
                                                 if f.name not in ("data", "model", "fed", "finetune")},
                                     cls, source))
        if cp.has_section("data"):
            kw["data"] = DataConfig(**_parse_section(cp["data"], _field_map(DataConfig), DataConfig, source))
        for sec, target, skip, defaults in (("model", ModelConfig, _DERIVED_MODEL, _MODEL_DEFAULTS),
                                            ("fed", FedConfig, ("seed",), _FED_DEFAULTS),
                                            ("finetune", FineTuneConfig, ("seed",), _FINETUNE_DEFAULTS)):
            values = dict(defaults)
            if cp.has_section(sec):
                fields = {k: v for k, v in _field_map(target).items() if k not in skip}
                values.update(_parse_section(cp[sec], fields, target, source))
            kw[sec] = values
        try:
            return cls(**kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{source}: {exc}") from None


def _field_map(cls):
    return {f.name: f for f in dataclasses.fields(cls)}


def _fmt(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_section(section, fields, owner, source) -> dict:
    defaults = owner()
    out = {}
    for key, raw in section.items():
        if key not in fields:
            raise ConfigError(f"{source}: unknown key {key!r} in [{section.name}]")
        out[key] = _coerce(raw, getattr(defaults, key) if key in _instance_fields(defaults) else None,
                           f"{source}: [{section.name}] {key}")
    return out


def _instance_fields(obj):
    return {f.name for f in dataclasses.fields(obj)}


def _coerce(raw: str, like, where: str):
    raw = raw.strip()
    try:
        if isinstance(like, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        if isinstance(like, tuple):
            return tuple(int(x) for x in raw.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r}") from None
    return raw


def default_config_path() -> Path | None:
    value = os.environ.get(CONFIG_ENV)
    return Path(value) if value else None


def load_config(path=None) -> RunConfig:
    """Read ``path``, else ``$QAFNET_CONFIG``, else return the defaults."""
    path = Path(path) if path is not None else default_config_path()
    if path is None:
        return RunConfig()
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    return RunConfig.from_ini(text, str(path))
