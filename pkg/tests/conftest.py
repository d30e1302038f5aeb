import contextlib
import time

import numpy as np
import pytest

from scrapopt import PulseSet, SystemParams, standard_scrap_pulses
from scrapopt.optimizer import OptimizationProblem, evaluate_points


@pytest.fixture
def table1():
    return standard_scrap_pulses()


@pytest.fixture
def decay_params():
    return SystemParams(gamma=1.0)


def central_difference(problem, pulses, point, eps=1e-4):
    """Finite-difference gradient of the performance index at one point, shape (3, q, 3)."""
    p0 = pulses.to_array()
    grad = np.zeros_like(p0)
    for idx in np.ndindex(p0.shape):
        plus, minus = p0.copy(), p0.copy()
        plus[idx] += eps
        minus[idx] -= eps
        fp = evaluate_points(problem, PulseSet.from_array(plus), [point], with_gradient=False)[0][0]
        fm = evaluate_points(problem, PulseSet.from_array(minus), [point], with_gradient=False)[0][0]
        grad[idx] = (fp - fm) / (2 * eps)
    return grad


def gradient_mismatch(analytic, numeric, rel=2e-3, abs_=1e-6):
    """Indices where neither the relative nor the absolute tolerance holds."""
    err = np.abs(analytic - numeric)
    ok = (err <= rel * np.abs(numeric)) | (err <= abs_)
    return np.argwhere(~ok)


def random_pulses(rng, params: SystemParams, q=9):
    """In-bounds random PulseSet around the nine-Gaussian layout."""
    base = standard_scrap_pulses().to_array()
    arr = base.copy()
    caps = np.array([params.omega0_cap, params.omega0_cap, params.s0_cap])
    arr[..., 0] = rng.uniform(0.05, 0.25, size=base[..., 0].shape) * caps[:, None]
    arr[..., 1] = base[..., 1] + rng.uniform(-0.3, 0.3, size=base[..., 1].shape)
    arr[..., 2] = base[..., 2] * rng.uniform(0.6, 2.0, size=base[..., 2].shape)
    return PulseSet.from_array(arr)


def random_negative_point(rng, s0=200.0):
    """(delta_p, delta_s) with delta_p > 0 > delta_p - delta_s > delta_p - s0."""
    dp = rng.uniform(5.0, 100.0)
    ds = rng.uniform(dp + 2.0, min(dp + 80.0, s0 - 5.0))
    return dp, ds


ACCEPTANCE = pytest.StashKey[dict]()


class AcceptanceReport:
    """Collects one PASS/FAIL line per acceptance criterion."""

    def __init__(self, store):
        self.store = store
        self.detail = ""

    @contextlib.contextmanager
    def __call__(self, number, title):
        self.detail = ""
        start = time.perf_counter()
        status = "FAIL"
        try:
            yield self
            status = "PASS"
        finally:
            elapsed = time.perf_counter() - start
            line = f"criterion {number} {status}: {title} ({elapsed:.1f} s) {self.detail}".rstrip()
            self.store[number] = line
            print(line)


@pytest.fixture
def report(request):
    return AcceptanceReport(request.config.stash.setdefault(ACCEPTANCE, {}))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])
