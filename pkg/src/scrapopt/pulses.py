"""Gaussian-sum control pulses and their piecewise-constant sampling."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Iterable, Sequence, Tuple

import numpy as np

from scrapopt.model import ControlSample, SystemParams

CONTROLS = ("pump", "stokes", "stark")

# Nine-Gaussian decomposition of a single Gaussian of width T centred at tau:
# centres tau + offset*T, widths factor*T, every amplitude 0.23 * peak.
TABLE1_OFFSETS = np.array([0.0, -0.15, 0.15, -0.4, 0.4, -0.55, 0.55, -1.0, 1.0])
TABLE1_WIDTHS = np.sqrt([0.2, 0.2, 0.2, 0.25, 0.25, 0.2, 0.2, 0.32, 0.32])
TABLE1_AMPLITUDE = 0.23


@dataclass(frozen=True)
class GaussianTerm:
    """h * exp(-(t - tau)^2 / sigma^2).  Note: sigma^2, not 2 sigma^2."""

    h: float
    tau: float
    sigma: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.h, self.tau, self.sigma)):
            raise ValueError(f"non-finite Gaussian parameters: {self!r}")
        if self.sigma <= 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        if self.h < 0:
            raise ValueError(f"amplitude must be >= 0, got {self.h}")

    def __call__(self, t):
        return self.h * np.exp(-((np.asarray(t, dtype=float) - self.tau) ** 2) / self.sigma**2)


def sample_pulse(terms: Iterable[GaussianTerm], t):
    """Sum of Gaussian terms evaluated at ``t`` (scalar or array)."""
    t = np.asarray(t, dtype=float)
    total = np.zeros_like(t)
    for term in terms:
        total = total + term(t)
    return float(total) if total.ndim == 0 else total


def gaussian_basis(params: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Unit-amplitude Gaussians exp(-(t - tau)^2/sigma^2), shape (3, q, len(t)).

    ``params`` has shape (3, q, 3) with last axis (h, tau, sigma).
    """
    tau = params[..., 1, None]
    sigma = params[..., 2, None]
    return np.exp(-((t - tau) ** 2) / sigma**2)


@dataclass(frozen=True)
class PulseSet:
    """q Gaussian terms for each of the pump, Stokes and Stark controls."""

    pump: Tuple[GaussianTerm, ...]
    stokes: Tuple[GaussianTerm, ...]
    stark: Tuple[GaussianTerm, ...]

    def __post_init__(self):
        for name in CONTROLS:
            object.__setattr__(self, name, tuple(getattr(self, name)))
        qs = {len(self.pump), len(self.stokes), len(self.stark)}
        if len(qs) != 1 or 0 in qs:
            raise ValueError(f"every control needs the same q >= 1 terms, got {sorted(qs)}")

    @property
    def q(self) -> int:
        return len(self.pump)

    def controls(self):
        return (self.pump, self.stokes, self.stark)

    def to_array(self) -> np.ndarray:
        """Parameters as an array of shape (3, q, 3): control, term, (h, tau, sigma)."""
        return np.array(
            [[(g.h, g.tau, g.sigma) for g in terms] for terms in self.controls()], dtype=float
        )

    @classmethod
    def from_array(cls, params) -> "PulseSet":
        params = np.asarray(params, dtype=float)
        if params.ndim != 3 or params.shape[0] != 3 or params.shape[2] != 3:
            raise ValueError(f"expected shape (3, q, 3), got {params.shape}")
        return cls(*(tuple(GaussianTerm(*map(float, row)) for row in ctrl) for ctrl in params))

    @classmethod
    def zeros(cls, q: int = 1, tau: float = 0.0, sigma: float = 1.0) -> "PulseSet":
        term = GaussianTerm(0.0, tau, sigma)
        return cls((term,) * q, (term,) * q, (term,) * q)

    def envelopes(self, t) -> np.ndarray:
        """Pump, Stokes and Stark envelopes at times ``t``, shape (3, len(t))."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        params = self.to_array()
        return np.einsum("kq,kqn->kn", params[..., 0], gaussian_basis(params, t))

    def fingerprint(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.to_array()).tobytes()).hexdigest()[:16]

    def to_dict(self) -> dict:
        return {
            name: [{"h": g.h, "tau": g.tau, "sigma": g.sigma} for g in terms]
            for name, terms in zip(CONTROLS, self.controls())
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PulseSet":
        unknown = set(data) - set(CONTROLS)
        if unknown:
            raise ValueError(f"unknown pulse controls: {sorted(unknown)}")
        return cls(*(tuple(GaussianTerm(**term) for term in data[name]) for name in CONTROLS))


def _table1_terms(peak: float, centre: float, width: float) -> Tuple[GaussianTerm, ...]:
    return tuple(
        GaussianTerm(TABLE1_AMPLITUDE * peak, centre + off * width, fac * width)
        for off, fac in zip(TABLE1_OFFSETS, TABLE1_WIDTHS)
    )


def standard_scrap_pulses(
    omega0: float = 50.0,
    s0: float = 200.0,
    tau_p: float = -1.0,
    tau_s: float = -2.0,
    t_p: float = 1.0,
    t_s: float = 1.0,
    t_st: float = 2.0,
) -> PulseSet:
    """Nine-Gaussian approximation of the standard SCRAP pulses (Stark centred at t=0)."""
    if min(t_p, t_s, t_st) <= 0:
        raise ValueError("pulse widths must be > 0")
    return PulseSet(
        _table1_terms(omega0, tau_p, t_p),
        _table1_terms(omega0, tau_s, t_s),
        _table1_terms(s0, 0.0, t_st),
    )


@dataclass(frozen=True)
class ReferencePulses:
    """Single-Gaussian pump, Stokes and Stark pulses."""

    omega0: float = 50.0
    s0: float = 200.0
    tau_p: float = -1.0
    tau_s: float = -2.0
    t_p: float = 1.0
    t_s: float = 1.0
    t_st: float = 2.0

    def envelopes(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return np.stack(
            [
                self.omega0 * np.exp(-((t - self.tau_p) ** 2) / self.t_p**2),
                self.omega0 * np.exp(-((t - self.tau_s) ** 2) / self.t_s**2),
                self.s0 * np.exp(-(t**2) / self.t_st**2),
            ]
        )

    def __call__(self, t: float) -> ControlSample:
        return ControlSample(*map(float, self.envelopes(t)[:, 0]))


def reference_gaussian_pulses(
    omega0: float = 50.0,
    s0: float = 200.0,
    tau_p: float = -1.0,
    tau_s: float = -2.0,
    t_p: float = 1.0,
    t_s: float = 1.0,
    t_st: float = 2.0,
) -> ReferencePulses:
    if min(t_p, t_s, t_st) <= 0:
        raise ValueError("pulse widths must be > 0")
    return ReferencePulses(omega0, s0, tau_p, tau_s, t_p, t_s, t_st)


@dataclass(frozen=True)
class Schedule:
    """Piecewise-constant controls: one value per time step for each field."""

    omega_p: np.ndarray
    omega_s: np.ndarray
    stark: np.ndarray

    @classmethod
    def from_array(cls, values) -> "Schedule":
        values = np.asarray(values, dtype=float)
        return cls(values[0].copy(), values[1].copy(), values[2].copy())

    @classmethod
    def zeros(cls, n_steps: int) -> "Schedule":
        return cls.from_array(np.zeros((3, n_steps)))

    def as_array(self) -> np.ndarray:
        return np.stack([self.omega_p, self.omega_s, self.stark])

    def __len__(self):
        return len(self.omega_p)

    def __getitem__(self, j) -> ControlSample:
        return ControlSample(float(self.omega_p[j]), float(self.omega_s[j]), float(self.stark[j]))

    def __iter__(self):
        return (self[j] for j in range(len(self)))


def sample_schedule(pulses, params: SystemParams) -> Schedule:
    """Sample ``pulses`` at the midpoint of every step; negative values clamp to 0.

    Works for any object with an ``envelopes(t)`` method (``PulseSet`` or
    ``ReferencePulses``).
    """
    values = pulses.envelopes(params.midpoints())
    return Schedule.from_array(np.maximum(values, 0.0))


def peak_envelopes(pulses, params: SystemParams) -> np.ndarray:
    """Maximum sampled value of each control over the time grid."""
    return sample_schedule(pulses, params).as_array().max(axis=1)


def caps(params: SystemParams) -> np.ndarray:
    return np.array([params.omega0_cap, params.omega0_cap, params.s0_cap])


def project_to_caps(pulses: PulseSet, params: SystemParams) -> PulseSet:
    """Rescale the amplitudes of any control whose sampled peak exceeds its cap."""
    peaks = peak_envelopes(pulses, params)
    limit = caps(params)
    scale = np.where(peaks > limit, limit / np.where(peaks > 0, peaks, 1.0), 1.0)
    if np.all(scale == 1.0):
        return pulses
    arr = pulses.to_array()
    arr[..., 0] *= scale[:, None]
    return PulseSet.from_array(arr)


def permuted(pulses: PulseSet, order: Sequence[int]) -> PulseSet:
    """Reorder the terms of every control by the permutation ``order``."""
    return PulseSet.from_array(pulses.to_array()[:, list(order), :])
