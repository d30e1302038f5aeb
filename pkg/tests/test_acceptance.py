"""Acceptance criteria, one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -s`` to see the lines as they
happen; they are also collected in the terminal summary.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from scrapopt import (
    DensityMatrix,
    PulseSet,
    SystemParams,
    crossing_times,
    propagate,
    reference_gaussian_pulses,
    sample_schedule,
    standard_scrap_pulses,
    validate_regime,
)
from scrapopt.cli import main
from scrapopt.dynamics import expm_stack
from scrapopt.model import hamiltonians
from scrapopt.optimizer import OptimizationProblem, parameter_gradients
from scrapopt.pulses import caps, peak_envelopes

from .conftest import gradient_mismatch, random_negative_point, random_pulses
from .test_model import REGIME_TABLE

RHO1 = DensityMatrix.projector(0).elements
STANDARD = SystemParams(30.0, 45.0, 0.0)
PRESET_OUTPUTS = {
    "fig2": ("simulate", ["trace.csv", "stdout.json"]),
    "decay": ("simulate", ["trace.csv", "stdout.json"]),
    "fig3": ("sweep", ["map.csv", "map.meta.json"]),
    "fig4-points": ("reproduce", [
        "original/map.csv", "original/map.meta.json", "optimized/map.csv", "optimized/map.meta.json",
        "optimized/pulses_opt.json", "optimized/trace.jsonl", "log_increase.csv", "compare.json",
        "stdout.json",
    ]),
}


def run_preset(name, out: Path, capsys) -> float:
    command, _ = PRESET_OUTPUTS[name]
    capsys.readouterr()
    start = time.perf_counter()
    code = main([command, "--preset", name, "--out", str(out), "--seed", "0"])
    elapsed = time.perf_counter() - start
    assert code == 0
    (out / "stdout.json").write_text(capsys.readouterr().out)
    return elapsed


@pytest.fixture(scope="module")
def fig4_points_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("fig4-first")


def test_criterion_1_standard_dynamics(report):
    with report(1, "standard SCRAP dynamics") as r:
        start = time.perf_counter()
        rec = propagate(RHO1, sample_schedule(reference_gaussian_pulses(), STANDARD), STANDARD)
        elapsed = time.perf_counter() - start
        pops = rec.populations
        k = int(np.argmax(pops[:, 1]))
        t_peak = rec.times[k]
        xs = crossing_times(STANDARD, 200.0, 2.0)
        r.detail = (f"P3={pops[-1, 2]:.5f} P1={pops[-1, 0]:.5f} P2 max {pops[k, 1]:.4f} at t={t_peak:.3f}, "
                    f"crossings +-{xs.t_12[1]:.4f}/+-{xs.t_23[1]:.4f}, propagate {elapsed * 1e3:.0f} ms")
        assert pops[-1, 2] >= 0.90
        assert pops[-1, 0] <= 0.05
        assert -3.0 < t_peak < 0.0
        assert pops[k, 1] > pops[0, 1] and pops[k, 1] > pops[-1, 1]
        assert elapsed < 1.0


def batched_phi(envelopes, points, base):
    """Final P3 for every (envelope set, point) pair; envelopes has shape (M, 3, N)."""
    env = np.maximum(envelopes, 0.0)
    out = np.empty((len(env), len(points)))
    for i in range(0, len(env), 16):
        e = env[i : i + 16]
        h = hamiltonians(points[None, :, 0, None], points[None, :, 1, None], base.gamma,
                         e[:, None, 0], e[:, None, 1], e[:, None, 2])
        u = expm_stack(-1j * base.dt * h)
        ud = np.swapaxes(u, -1, -2).conj()
        rho = np.zeros(u.shape[:2] + (3, 3), dtype=complex)
        rho[..., 0, 0] = 1.0
        for j in range(base.n_steps):
            rho = u[:, :, j] @ rho @ ud[:, :, j]
        out[i : i + 16] = rho[..., 2, 2].real
    return out


def central_differences(pulses, points, base, eps=1e-4):
    """Central-difference gradients at every point, shape (d, 3, q, 3)."""
    p0 = pulses.to_array()
    t = base.midpoints()
    envs = []
    for idx in np.ndindex(p0.shape):
        for sign in (1.0, -1.0):
            p = p0.copy()
            p[idx] += sign * eps
            envs.append(PulseSet.from_array(p).envelopes(t))
    phi = batched_phi(np.array(envs), points, base).reshape(p0.size, 2, len(points))
    grad = (phi[:, 0] - phi[:, 1]) / (2 * eps)
    return np.moveaxis(grad, -1, 0).reshape((len(points),) + p0.shape)


@pytest.mark.slow
def test_criterion_2_gradient_oracle(report):
    with report(2, "gradient oracle, 20 pulse sets x 5 points") as r:
        base = SystemParams(gamma=1.0)
        rng = np.random.default_rng(20)
        start = time.perf_counter()
        worst, failures, checked = 0.0, 0, 0
        for _ in range(20):
            pulses = random_pulses(rng, base)
            points = np.array([random_negative_point(rng) for _ in range(5)])
            problem = OptimizationProblem(base, [tuple(p) for p in points], pulses)
            numeric = central_differences(pulses, points, base)
            for i, point in enumerate(points):
                _, analytic = parameter_gradients(problem, pulses, tuple(point))
                a, n = analytic.values, numeric[i]
                failures += len(gradient_mismatch(a, n))
                checked += a.size
                scale = np.maximum(np.abs(n) * 2e-3, 1e-6)
                worst = max(worst, float(np.max(np.abs(a - n) / scale)))
        elapsed = time.perf_counter() - start
        r.detail = f"{failures}/{checked} components outside tolerance, worst {worst:.3g} of allowed"
        assert failures == 0
        assert elapsed < 120.0


def test_criterion_3_conservation(report):
    with report(3, "conservation suite") as r:
        rng = np.random.default_rng(3)
        schedules = [sample_schedule(reference_gaussian_pulses(), STANDARD)]
        schedules += [sample_schedule(random_pulses(rng, STANDARD), STANDARD) for _ in range(3)]
        trace_err, drift, rise = 0.0, 0.0, -np.inf
        for sched in schedules:
            rec = propagate(RHO1, sched, STANDARD)
            trace_err = max(trace_err, abs(rec.final.trace - 1.0))
            drift = max(drift, float(np.max(np.abs(rec.rho - np.swapaxes(rec.rho, -1, -2).conj()))))
            lossy = SystemParams(30.0, 45.0, 1.0)
            tr = np.trace(propagate(RHO1, sched, lossy).rho, axis1=1, axis2=2).real
            rise = max(rise, float(np.max(np.diff(tr))))
        phi = [propagate(RHO1, sample_schedule(reference_gaussian_pulses(), p), p).populations[-1, 2]
               for p in (SystemParams(30.0, 45.0, n_steps=n) for n in (800, 1600, 3200))]
        ratio = (phi[0] - phi[1]) / (phi[1] - phi[2])
        r.detail = (f"|tr-1|={trace_err:.2e} hermitian drift={drift:.2e} "
                    f"max trace rise={rise:.2e} doubling ratio={ratio:.3f}")
        assert trace_err < 1e-9
        assert drift < 1e-11
        assert rise <= 1e-10
        assert 3.0 <= ratio <= 5.0


def test_criterion_4_nine_gaussians(report):
    with report(4, "nine-Gaussian approximation") as r:
        t = np.linspace(-4.0, 4.0, 8001)
        table1 = standard_scrap_pulses().envelopes(t)
        ref = reference_gaussian_pulses().envelopes(t)
        peak = ref.max(axis=1)
        dev = np.abs(table1 - ref).max(axis=1) / peak
        fine = np.linspace(-4.0, 4.0, 80001)
        ratio = standard_scrap_pulses().envelopes(fine).max(axis=1) / np.array([50.0, 50.0, 200.0])
        r.detail = (f"max deviation {np.round(dev * 100, 2).tolist()} % of peak, "
                    f"peak/cap {np.round(ratio, 4).tolist()}")
        assert np.all(dev < 0.08)
        assert np.all(np.abs(ratio - 1) < 0.05)


@pytest.mark.slow
def test_criterion_5_optimization(report, fig4_points_dir, capsys):
    with report(5, "optimization improvement on fig4-points") as r:
        elapsed = run_preset("fig4-points", fig4_points_dir, capsys)
        summary = json.loads((fig4_points_dir / "compare.json").read_text())
        rows = [json.loads(line) for line in (fig4_points_dir / "optimized" / "trace.jsonl").read_text().splitlines()]
        objective = np.array([row["objective"] for row in rows])
        raw_phi = np.array([row["phi"] for row in rows])
        payload = json.loads((fig4_points_dir / "optimized" / "pulses_opt.json").read_text())
        pulses = PulseSet.from_dict(payload["pulses"])
        excess = float(np.max(peak_envelopes(pulses, SystemParams()) - caps(SystemParams())))
        gain_f, gain_a = summary["relative_mean_gain"], summary["relative_area_gain"]
        r.detail = (f"F {summary['before']['f_mean']:.4f}->{summary['after']['f_mean']:.4f} (+{gain_f:.1%}), "
                    f"A {summary['before']['a_above_0p8']:.4f}->{summary['after']['a_above_0p8']:.4f} "
                    f"(+{gain_a:.1%}), {len(rows) - 1} iterations, min objective step "
                    f"{np.diff(objective).min():.2e}, min raw phi step {np.diff(raw_phi).min():.2e}, "
                    f"cap excess {excess:.1e}, {elapsed:.0f} s")
        assert gain_f >= 0.20
        assert gain_a >= 0.15
        assert np.all(np.diff(objective) >= 0)
        assert excess <= 1e-9
        assert elapsed <= 30 * 60


def test_criterion_6_truth_table(report):
    with report(6, "crossing-condition truth table") as r:
        got = [validate_regime(SystemParams(dp, ds), 200.0) for dp, ds, _ in REGIME_TABLE]
        wrong = [row for row, g in zip(REGIME_TABLE, got) if g is not row[2]]
        r.detail = f"{len(REGIME_TABLE) - len(wrong)}/{len(REGIME_TABLE)} cases match"
        assert not wrong


@pytest.mark.slow
def test_criterion_7_determinism(report, fig4_points_dir, tmp_path, capsys):
    with report(7, "determinism across repeated preset runs") as r:
        if not (fig4_points_dir / "compare.json").exists():
            run_preset("fig4-points", fig4_points_dir, capsys)
        checked, differing = 0, []
        for name, (_, files) in PRESET_OUTPUTS.items():
            second = tmp_path / name / "b"
            if name == "fig4-points":
                first = fig4_points_dir
            else:
                first = tmp_path / name / "a"
                run_preset(name, first, capsys)
            run_preset(name, second, capsys)
            for fname in files:
                checked += 1
                if (first / fname).read_bytes() != (second / fname).read_bytes():
                    differing.append(f"{name}:{fname}")
        r.detail = f"{checked - len(differing)}/{checked} files byte-identical over {len(PRESET_OUTPUTS)} presets"
        assert not differing, differing
