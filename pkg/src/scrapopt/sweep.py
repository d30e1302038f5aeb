"""Fidelity maps over detuning space and the robustness metrics derived from them."""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from scrapopt.dynamics import eigensystem, expm_stack
from scrapopt.model import DensityMatrix, SystemParams, density_violations, hamiltonians

log = logging.getLogger(__name__)

CHUNK_CELLS = 64
LOG_FLOOR = 1e-30


class UndefinedMetricError(ValueError):
    """A metric was requested on a map with no valid cells."""


@dataclass(frozen=True)
class DetuningGrid:
    """Cells (x, y) with x = delta_p - delta_s (two-photon detuning) and y = delta_p."""

    x_axis: np.ndarray
    y_axis: np.ndarray

    def __post_init__(self):
        for name in ("x_axis", "y_axis"):
            axis = np.atleast_1d(np.asarray(getattr(self, name), dtype=float))
            if axis.ndim != 1 or axis.size == 0 or not np.all(np.isfinite(axis)):
                raise ValueError(f"{name} must be a non-empty finite 1-D sequence")
            if np.any(np.diff(axis) <= 0):
                raise ValueError(f"{name} must be strictly increasing")
            object.__setattr__(self, name, axis)

    @classmethod
    def linspace(cls, x_min, x_max, nx, y_min, y_max, ny) -> "DetuningGrid":
        return cls(np.linspace(x_min, x_max, nx), np.linspace(y_min, y_max, ny))

    @classmethod
    def default(cls) -> "DetuningGrid":
        return cls.linspace(-80.0, -2.0, 60, 2.0, 120.0, 60)

    @property
    def shape(self):
        return (self.y_axis.size, self.x_axis.size)

    def detunings(self) -> np.ndarray:
        """(delta_p, delta_s) for every cell, shape (ny, nx, 2)."""
        x, y = np.meshgrid(self.x_axis, self.y_axis)
        return np.stack([y, y - x], axis=-1)

    def is_negative_regime(self) -> bool:
        return bool(self.x_axis.max() < 0 < self.y_axis.min())

    def to_dict(self) -> dict:
        return {"x_axis": self.x_axis.tolist(), "y_axis": self.y_axis.tolist()}

    def same_as(self, other: "DetuningGrid") -> bool:
        return (
            self.shape == other.shape
            and np.array_equal(self.x_axis, other.x_axis)
            and np.array_equal(self.y_axis, other.y_axis)
        )


@dataclass(frozen=True)
class FidelityMap:
    grid: DetuningGrid
    values: np.ndarray  # (ny, nx), NaN marks a failed cell

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape != self.grid.shape:
            raise ValueError(f"values shape {values.shape} does not match grid {self.grid.shape}")
        object.__setattr__(self, "values", values)

    @property
    def nan_count(self) -> int:
        return int(np.isnan(self.values).sum())


def _final_states(rho0, env, points, base: SystemParams):
    """Final density matrices for a batch of detuning points, shape (B, 3, 3)."""
    h = hamiltonians(points[:, 0, None], points[:, 1, None], base.gamma, env[0], env[1], env[2])
    a = -1j * base.dt * h
    u = expm_stack(a, eigensystem(a))
    ud = np.swapaxes(u, -1, -2).conj()
    rho = np.broadcast_to(rho0, (len(points), 3, 3)).astype(complex)
    for j in range(base.n_steps):
        rho = u[:, j] @ rho @ ud[:, j]
    return rho


def fidelity_map(
    pulses,
    grid: DetuningGrid,
    base: SystemParams,
    rho0=None,
    target=None,
    threads: int = 1,
) -> FidelityMap:
    """Final-state fidelity for every cell of ``grid``.

    Cells whose final state is not a valid density matrix become NaN.  Work
    is split into fixed-size chunks so the result does not depend on
    ``threads``.
    """
    rho0 = DensityMatrix.projector(0).elements if rho0 is None else np.asarray(rho0, dtype=complex)
    c = DensityMatrix.projector(2).elements if target is None else np.asarray(target, dtype=complex)
    env = np.maximum(pulses.envelopes(base.midpoints()), 0.0)
    points = grid.detunings().reshape(-1, 2)
    chunks = [points[i : i + CHUNK_CELLS] for i in range(0, len(points), CHUNK_CELLS)]

    def run(chunk):
        with np.errstate(all="ignore"):
            return _final_states(rho0, env, chunk, base)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            finals = list(pool.map(run, chunks))
    else:
        finals = [run(chunk) for chunk in chunks]
    finals = np.concatenate(finals)
    values = np.real(np.einsum("ij,bij->b", c.conj(), finals))
    for b, rho in enumerate(finals):
        if density_violations(rho, hermitian_tol=1e-10):
            values[b] = np.nan
    fmap = FidelityMap(grid, values.reshape(grid.shape))
    if fmap.nan_count:
        log.warning("fidelity_map: %d cells failed and were set to NaN", fmap.nan_count)
    return fmap


def _valid(fmap: FidelityMap) -> np.ndarray:
    vals = fmap.values[~np.isnan(fmap.values)]
    if vals.size == 0:
        raise UndefinedMetricError("map has no valid cells")
    return vals


def area_above(fmap: FidelityMap, threshold: float = 0.8) -> float:
    """Fraction of valid cells with fidelity strictly above ``threshold``."""
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    vals = _valid(fmap)
    return float(np.count_nonzero(vals > threshold) / vals.size)


def mean_fidelity(fmap: FidelityMap) -> float:
    return float(_valid(fmap).mean())


class LogIncrease(NamedTuple):
    """log10 percentage increase per cell.

    ``values`` is NaN wherever there was no increase; ``sign`` is +1, 0 or -1
    for increase, no change and decrease (0 also for NaN inputs).
    """

    values: np.ndarray
    sign: np.ndarray


def log_increase_map(before: FidelityMap, after: FidelityMap, floor: float = LOG_FLOOR) -> LogIncrease:
    if not before.grid.same_as(after.grid):
        raise ValueError("fidelity maps are on different grids")
    b, a = before.values, after.values
    diff = a - b
    sign = np.nan_to_num(np.sign(diff)).astype(int)
    with np.errstate(divide="ignore", invalid="ignore"):
        values = np.log10(100.0 * diff / np.maximum(b, floor))
    values = np.where(diff > 0, values, np.nan)
    return LogIncrease(values, sign)


def relative_gain(before: float, after: float) -> float:
    if before == 0:
        return 0.0 if after == 0 else math.inf
    return (after - before) / before


def map_metrics(fmap: FidelityMap, threshold: float = 0.8) -> dict:
    return {
        "a_above_0p8": area_above(fmap, threshold),
        "f_mean": mean_fidelity(fmap),
        "nan_count": fmap.nan_count,
    }


def _fmt(v: float) -> str:
    return f"{v:.17g}"


def write_matrix_csv(path, grid: DetuningGrid, values: np.ndarray) -> None:
    """Header row of x values, then one row per y value led by that y."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["y\\x"] + [_fmt(x) for x in grid.x_axis])
        for y, row in zip(grid.y_axis, values):
            writer.writerow([_fmt(y)] + [_fmt(v) for v in row])


def read_map_csv(path) -> FidelityMap:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2 or len(rows[0]) < 2:
        raise ValueError(f"{path}: not a fidelity map CSV")
    x = [float(v) for v in rows[0][1:]]
    y = [float(r[0]) for r in rows[1:]]
    values = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    return FidelityMap(DetuningGrid(np.array(x), np.array(y)), values)


def write_map(path_csv, path_meta, fmap: FidelityMap, base: SystemParams, pulse_fingerprint: str,
              extra: Optional[dict] = None) -> dict:
    write_matrix_csv(path_csv, fmap.grid, fmap.values)
    meta = {
        "grid": fmap.grid.to_dict(),
        "gamma": base.gamma,
        "window": [base.t_start, base.t_end],
        "n_steps": base.n_steps,
        "pulse_fingerprint": pulse_fingerprint,
        "metrics": map_metrics(fmap),
    }
    if extra:
        meta.update(extra)
    with open(path_meta, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return meta
