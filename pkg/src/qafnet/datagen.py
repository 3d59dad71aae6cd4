"""Synthetic three-stage fault trajectories and triplet datasets.

The generator is a closed-form stand-in for a transient-stability
simulator, not a power-flow solution.  Each curve has a constant pre-fault
level, a constant dip while the fault is on, and a (damped or undamped)
oscillation after clearing that settles toward a post-fault level::

    V(t) = V0                                    t < t_f
    V(t) = V0 (1 - depth)                        t_f <= t < t_cl
    V(t) = Vinf + (Vcl - Vinf) exp(-zeta w t') cos(w_d t'),  t' = t - t_cl

with ``w_d = w sqrt(1 - zeta^2)``.  ``zeta <= 0`` gives the unstable branch
(sustained or growing swing), clipped to ``[0, 1.45]`` p.u.  Optional
Gaussian measurement noise is added on top.

Heterogeneity between buses comes from :class:`BusProfile` offsets.
Randomness for trajectory ``i`` of bus ``b`` comes from its own stream
``default_rng([seed, b, i])`` so serial and parallel generation agree.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DataError, ScenarioError, SegmentationError, ShapeError
from .model import PaddedInput
from .storage import read_container, write_container

__all__ = [
    "BusProfile",
    "GridScenario",
    "Trajectory",
    "TripletDataset",
    "Segments",
    "make_bus_profiles",
    "sample_scenarios",
    "simulate_trajectory",
    "generate_bus",
    "segment",
    "pad_input",
    "pad_observed",
    "assemble_triplets",
    "default_t_max",
    "critical_clearing_time",
    "save_dataset",
    "load_dataset",
    "save_trajectories",
    "load_trajectories",
    "CLEARING_RANGE",
    "T_F_RANGE",
]

CLEARING_RANGE = (0.100, 0.333)
LOAD_RANGE = (0.7, 1.3)
DEPTH_RANGE = (0.3, 0.9)
T_F_RANGE = (0.5, 1.5)
STABLE_DAMPING = (0.05, 0.30)
UNSTABLE_DAMPING = (-0.15, 0.0)
OSC_FREQ = (3.0, 9.0)
JITTER = 0.03
V_CLIP = (0.0, 1.45)
V0_RANGE = (0.9, 1.1)


@dataclass(frozen=True)
class BusProfile:
    """Per-bus offsets applied on top of the shared scenario law."""

    depth_shift: float = 0.0
    v0_shift: float = 0.0
    drop_shift: float = 0.0
    freq_scale: float = 1.0
    damping_scale: float = 1.0


def make_bus_profiles(n_buses: int, seed: int, spread: float = 1.0) -> list[BusProfile]:
    """Draw ``n_buses`` distinct profiles; ``spread`` scales every offset."""
    rng = np.random.default_rng([seed, 0x5EED])
    out = []
    for _ in range(n_buses):
        out.append(BusProfile(
            depth_shift=float(spread * rng.uniform(-0.12, 0.12)),
            v0_shift=float(spread * rng.uniform(-0.03, 0.03)),
            drop_shift=float(spread * rng.uniform(-0.03, 0.03)),
            freq_scale=float(np.exp(spread * rng.uniform(-0.3, 0.3))),
            damping_scale=float(np.exp(spread * rng.uniform(-0.4, 0.4))),
        ))
    return out


@dataclass(frozen=True)
class GridScenario:
    bus_id: int
    load_scale: float
    fault_depth: float
    t_f: float
    t_cl: float
    damping: float
    osc_freq: float
    stable: bool
    v0_shift: float = 0.0
    drop_shift: float = 0.0

    @property
    def v0(self) -> float:
        v = 1.0 - 0.15 * (self.load_scale - 1.0) + self.v0_shift
        return float(min(max(v, V0_RANGE[0]), V0_RANGE[1]))

    @property
    def v_fault(self) -> float:
        return self.v0 * (1.0 - self.fault_depth)

    @property
    def v_inf(self) -> float:
        # the settled drop scales with the dip, so a zero-depth fault leaves V flat
        return self.v0 - self.fault_depth * (0.04 + 0.07 * self.load_scale + self.drop_shift)

    def validate(self, t_max: float | None = None):
        if not 0.0 < self.t_f < self.t_cl:
            raise ScenarioError(f"stage times out of order: t0=0, t_f={self.t_f}, t_cl={self.t_cl}")
        if t_max is not None and self.t_cl > t_max:
            raise ScenarioError(f"t_cl={self.t_cl} beyond T_max={t_max}")
        if not 0.0 <= self.fault_depth < 1.0:
            raise ScenarioError(f"fault_depth {self.fault_depth} outside [0, 1)")
        if self.osc_freq <= 0.0 or abs(self.damping) >= 1.0:
            raise ScenarioError("need osc_freq > 0 and |damping| < 1")
        if self.stable != (self.damping > 0.0):
            raise ScenarioError("stable flag must agree with the sign of the damping")


@dataclass
class Trajectory:
    times: np.ndarray
    values: np.ndarray
    scenario: GridScenario

    @property
    def grid_step(self) -> float:
        return float(self.times[1] - self.times[0])

    @property
    def horizon(self) -> float:
        return float(self.times[-1])


def critical_clearing_time(p_stable: float = 0.8) -> float:
    """Fault duration beyond which the surrogate loses stability.

    Durations are uniform, so putting the threshold at the ``p_stable``
    quantile of the clearing range makes P(stable) exactly ``p_stable``.
    """
    lo, hi = CLEARING_RANGE
    return lo + p_stable * (hi - lo)


def _swing_parameters(load, duration, stable, bias, rng):
    """Damping and frequency of the post-fault swing.

    Both follow the operating point and the fault duration, which are
    visible in the observed window, up to a small multiplicative jitter.
    """
    frac_load = (load - LOAD_RANGE[0]) / (LOAD_RANGE[1] - LOAD_RANGE[0])
    frac_dur = (duration - CLEARING_RANGE[0]) / (CLEARING_RANGE[1] - CLEARING_RANGE[0])
    omega = OSC_FREQ[0] + (OSC_FREQ[1] - OSC_FREQ[0]) * (1.0 - frac_load)
    omega *= bias.freq_scale * (1.0 + rng.uniform(-JITTER, JITTER))
    if stable:
        lo, hi = STABLE_DAMPING
        zeta = (hi - (hi - lo) * frac_dur) * bias.damping_scale * (1.0 + rng.uniform(-JITTER, JITTER))
        zeta = float(np.clip(zeta, 1e-3, 0.9))
    else:
        zeta = float(rng.uniform(*UNSTABLE_DAMPING))
    return zeta, float(omega)


def sample_scenarios(bus_id: int, n: int, bus_bias: BusProfile | None = None,
                     rng: np.random.Generator | None = None, p_stable: float = 0.8) -> list[GridScenario]:
    if n < 1:
        raise ContractError(f"n must be >= 1, got {n}")
    bias = bus_bias or BusProfile()
    rng = rng if rng is not None else np.random.default_rng()
    out = []
    for _ in range(n):
        load = rng.uniform(*LOAD_RANGE)
        t_f = rng.uniform(*T_F_RANGE)
        duration = rng.uniform(*CLEARING_RANGE)
        depth = float(np.clip(rng.uniform(*DEPTH_RANGE) + bias.depth_shift, 0.05, 0.95))
        stable = bool(duration < critical_clearing_time(p_stable))
        zeta, omega = _swing_parameters(load, duration, stable, bias, rng)
        out.append(GridScenario(int(bus_id), float(load), depth, float(t_f), float(t_f + duration),
                                zeta, omega, stable, bias.v0_shift, bias.drop_shift))
    return out


def simulate_trajectory(scenario: GridScenario, grid_step: float = 0.01, T: float = 8.5,
                        rng: np.random.Generator | None = None, noise_std: float = 0.0) -> Trajectory:
    scenario.validate(t_max=T)
    n = int(round(T / grid_step)) + 1
    times = np.arange(n) * grid_step
    s = scenario
    v = np.empty(n)
    pre = times < s.t_f
    on = (times >= s.t_f) & (times < s.t_cl)
    post = times >= s.t_cl
    v[pre] = s.v0
    v[on] = s.v_fault
    tp = times[post] - s.t_cl
    w_d = s.osc_freq * np.sqrt(1.0 - s.damping ** 2)
    v[post] = s.v_inf + (s.v_fault - s.v_inf) * np.exp(-s.damping * s.osc_freq * tp) * np.cos(w_d * tp)
    if not s.stable:
        v[post] = np.clip(v[post], *V_CLIP)
    if noise_std > 0.0:
        if rng is None:
            raise ContractError("noise_std > 0 needs an rng")
        v = v + rng.normal(0.0, noise_std, size=n)
    return Trajectory(times, v, scenario)


def generate_bus(seed: int, bus_id: int, n: int, profile: BusProfile | None = None, *,
                 grid_step: float = 0.01, T: float = 8.5, noise_std: float = 0.01,
                 p_stable: float = 0.8, start: int = 0) -> list[Trajectory]:
    """Trajectories ``start .. start+n-1`` of one bus, one RNG stream each."""
    if n < 1:
        raise ContractError(f"n must be >= 1, got {n}")
    out = []
    for i in range(start, start + n):
        rng = np.random.default_rng([seed, bus_id, i])
        sc = sample_scenarios(bus_id, 1, profile, rng, p_stable=p_stable)[0]
        out.append(simulate_trajectory(sc, grid_step, T, rng, noise_std))
    return out


@dataclass
class Segments:
    u_times: np.ndarray
    u_values: np.ndarray
    v_times: np.ndarray
    v_values: np.ndarray


_EPS = 1e-9


def segment(traj: Trajectory, dt_obs: float) -> Segments:
    """Split into the observed window ``[0, t_cl + dt_obs]`` and the rest."""
    end = traj.scenario.t_cl + dt_obs
    if dt_obs < 0 or end >= traj.horizon:
        raise SegmentationError(
            f"t_cl + dt_obs = {end:.4f} s leaves no prediction window before T = {traj.horizon}")
    cut = int(np.searchsorted(traj.times, end + _EPS, side="right"))
    return Segments(traj.times[:cut], traj.values[:cut], traj.times[cut:], traj.values[cut:])


def default_t_max(dt_obs: float) -> float:
    """Latest possible end of the observed window."""
    return T_F_RANGE[1] + CLEARING_RANGE[1] + dt_obs


def pad_input(traj: Trajectory, dt_obs: float, sensor_times: np.ndarray) -> PaddedInput:
    """Sample the observed window at the sensors; zero at sensors past it."""
    seg = segment(traj, dt_obs)
    end = seg.u_times[-1]
    if sensor_times[-1] + _EPS < traj.scenario.t_cl + dt_obs:
        raise SegmentationError(
            f"observed window ends at {traj.scenario.t_cl + dt_obs:.4f} s, past T_max = {sensor_times[-1]}")
    return pad_observed(seg.u_times, seg.u_values, sensor_times)


def pad_observed(times, values, sensor_times) -> PaddedInput:
    """Interpolate an observed record ``(times, values)`` onto the sensors.

    Sensors later than the last observation are set to zero.  ``times``
    must be increasing and start at or before the first sensor.
    """
    times = np.asarray(times, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if times.ndim != 1 or times.shape != values.shape or times.size == 0:
        raise ShapeError(f"times and values must be equal-length 1-D arrays, got {times.shape}, {values.shape}")
    if np.any(np.diff(times) <= 0):
        raise DataError("observation times must be strictly increasing")
    if times[0] > sensor_times[0] + _EPS:
        raise DataError(f"observations start at {times[0]} s, after the first sensor at {sensor_times[0]} s")
    if times[-1] > sensor_times[-1] + _EPS:
        raise SegmentationError(f"observed window ends at {times[-1]:.4f} s, past T_max = {sensor_times[-1]}")
    valid = sensor_times <= times[-1] + _EPS
    out = np.zeros(sensor_times.size)
    out[valid] = np.interp(sensor_times[valid], times, values)
    return PaddedInput(out, int(valid.sum()))


@dataclass
class TripletDataset:
    """Triplets ``(u, t, G)``; inputs are stored once per source trajectory.

    ``index[i]`` names the row of ``inputs`` that triplet ``i`` uses.
    """

    inputs: np.ndarray
    valid_len: np.ndarray
    index: np.ndarray
    t: np.ndarray
    G: np.ndarray
    traj_bus: np.ndarray
    traj_id: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return int(self.t.size)

    @property
    def n_trajectories(self) -> int:
        return int(self.inputs.shape[0])

    def triplet(self, i: int):
        j = self.index[i]
        return PaddedInput(self.inputs[j], int(self.valid_len[j])), float(self.t[i]), float(self.G[i])

    def batch(self, rows=None):
        rows = np.arange(len(self)) if rows is None else np.asarray(rows)
        j = self.index[rows]
        return self.inputs[j], self.valid_len[j], self.t[rows], self.G[rows]

    def compact_batch(self, rows=None):
        """Like :meth:`batch` but with each distinct input listed once.

        Returns ``(U, valid_len, index, t, G)`` where ``index`` maps triplets
        to rows of ``U``; feed it to :func:`qafnet.model.forward`.
        """
        rows = np.arange(len(self)) if rows is None else np.asarray(rows)
        uniq, local = np.unique(self.index[rows], return_inverse=True)
        return self.inputs[uniq], self.valid_len[uniq], local, self.t[rows], self.G[rows]

    def select_trajectories(self, which) -> "TripletDataset":
        which = np.asarray(which, dtype=np.int64)
        remap = np.full(self.n_trajectories, -1)
        remap[which] = np.arange(which.size)
        keep = np.flatnonzero(np.isin(self.index, which))
        keep = keep[np.argsort(remap[self.index[keep]], kind="stable")]
        return TripletDataset(self.inputs[which], self.valid_len[which], remap[self.index[keep]],
                              self.t[keep], self.G[keep], self.traj_bus[which],
                              self.traj_id[which], dict(self.meta))

    def select_triplets(self, rows) -> "TripletDataset":
        rows = np.asarray(rows, dtype=np.int64)
        return dataclasses.replace(self, index=self.index[rows], t=self.t[rows], G=self.G[rows],
                                   meta=dict(self.meta))


def assemble_triplets(trajs, dt_obs: float, m: int, n_loc: int, rng: np.random.Generator,
                      t_max: float | None = None, seed: int | None = None) -> TripletDataset:
    """Build ``n_loc`` triplets per trajectory, sharing one padded input each."""
    trajs = list(trajs)
    if not trajs:
        raise ContractError("trajectory list is empty")
    if m < 1 or n_loc < 1:
        raise ContractError(f"m and n_loc must be >= 1, got m={m}, n_loc={n_loc}")
    t_max = default_t_max(dt_obs) if t_max is None else t_max
    sensors = np.linspace(0.0, t_max, m)
    inputs = np.zeros((len(trajs), m))
    valid = np.zeros(len(trajs), dtype=np.int64)
    index, ts, gs = [], [], []
    for j, tr in enumerate(trajs):
        pin = pad_input(tr, dt_obs, sensors)
        inputs[j], valid[j] = pin.values, pin.valid_len
        seg = segment(tr, dt_obs)
        pick = rng.choice(seg.v_times.size, size=n_loc, replace=n_loc > seg.v_times.size)
        index.append(np.full(n_loc, j))
        ts.append(seg.v_times[pick])
        gs.append(seg.v_values[pick])
    buses = np.array([tr.scenario.bus_id for tr in trajs], dtype=np.int64)
    meta = {"dt_obs": float(dt_obs), "m": int(m), "n_loc": int(n_loc), "t_max_input": float(t_max),
            "grid_step": trajs[0].grid_step, "horizon": trajs[0].horizon,
            "bus_ids": sorted({int(b) for b in buses}), "seed": seed}
    return TripletDataset(inputs, valid, np.concatenate(index), np.concatenate(ts),
                          np.concatenate(gs), buses, np.arange(len(trajs), dtype=np.int64), meta)


def save_dataset(ds: TripletDataset, path) -> None:
    write_container(path, "triplets", dict(ds.meta, n_triplets=len(ds)), {
        "inputs": ds.inputs, "valid_len": ds.valid_len, "traj_bus": ds.traj_bus,
        "traj_id": ds.traj_id, "index": ds.index, "t": ds.t, "G": ds.G,
    })


def load_dataset(path) -> TripletDataset:
    header, a = read_container(path, "triplets")
    header.pop("n_triplets", None)
    return TripletDataset(a["inputs"], a["valid_len"], a["index"], a["t"], a["G"],
                          a["traj_bus"], a["traj_id"], header)


_SCENARIO_COLUMNS = ("bus_id", "load_scale", "fault_depth", "t_f", "t_cl", "damping",
                     "osc_freq", "stable", "v0_shift", "drop_shift")


def save_trajectories(trajs, path, header: dict | None = None) -> None:
    trajs = list(trajs)
    table = np.array([[float(getattr(tr.scenario, c)) for c in _SCENARIO_COLUMNS] for tr in trajs])
    write_container(path, "trajectories", dict(header or {}, scenario_columns=list(_SCENARIO_COLUMNS)), {
        "times": trajs[0].times, "values": np.stack([tr.values for tr in trajs]), "scenarios": table,
    })


def load_trajectories(path):
    header, a = read_container(path, "trajectories")
    out = []
    for row, vals in zip(a["scenarios"], a["values"]):
        kw = dict(zip(_SCENARIO_COLUMNS, row))
        kw["bus_id"] = int(kw["bus_id"])
        kw["stable"] = bool(kw["stable"])
        out.append(Trajectory(a["times"].copy(), vals.copy(), GridScenario(**kw)))
    return out, header
