from contextlib import contextmanager

import numpy as np
import pytest

from qafnet import datagen as D
from qafnet.model import ModelConfig, init_model


def rel_error(a, b, floor=1e-8):
    """Elementwise ``|a - b| / max(|a|, |b|, floor)``, as a max over entries."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def tiny_config(**kw):
    base = dict(m=16, patch=4, d=4, p=4, s=3, fourier_m=4, fourier_sigma=1.0, branch_hidden=(5,),
                trunk_hidden=(5,), head_hidden=(4,), t_max_input=D.default_t_max(0.4), horizon=8.5)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny_model():
    return init_model(tiny_config(), seed=3)


@pytest.fixture(scope="session")
def small_bus_data():
    """Two neighbour buses and one target bus, small enough for unit tests."""
    dt = 0.4
    profiles = D.make_bus_profiles(3, 7)
    out = {}
    for b in range(3):
        trajs = D.generate_bus(7, b, 12, profiles[b])
        out[b] = D.assemble_triplets(trajs, dt, 16, 4, np.random.default_rng([7, b]), seed=7)
    return out


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list = []


@contextmanager
def criterion(number: int, title: str):
    """Record PASS or FAIL for an acceptance criterion; ``detail`` may be filled in."""
    detail = {}
    ok = False
    try:
        yield detail
        ok = True
    finally:
        extra = ", ".join(f"{k}={v}" for k, v in detail.items())
        ACCEPTANCE_LINES.append((number, f"criterion {number} {'PASS' if ok else 'FAIL'}: {title}"
                                         + (f" ({extra})" if extra else "")))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
