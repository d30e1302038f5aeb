"""Three-level Lambda system: parameters, Hamiltonian and level-crossing analysis.

Units: hbar = 1, times in units of the pump width T_P and frequencies in
units of 1/T_P.  States are indexed 0, 1, 2 for |1>, |2>, |3>.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace
from typing import NamedTuple, Optional, Tuple

import numpy as np

HERMITIAN_TOL = 1e-12
PSD_TOL = 1e-10
TRACE_TOL = 1e-10

# Control Hamiltonians: d H / d u_k for pump, Stokes and Stark envelopes.
# The Stark envelope enters as S2 = -S on the excited level.
H_PUMP = np.array([[0, 0.5, 0], [0.5, 0, 0], [0, 0, 0]], dtype=complex)
H_STOKES = np.array([[0, 0, 0], [0, 0, 0.5], [0, 0.5, 0]], dtype=complex)
H_STARK = np.array([[0, 0, 0], [0, -1.0, 0], [0, 0, 0]], dtype=complex)
CONTROL_HAMILTONIANS = np.stack([H_PUMP, H_STOKES, H_STARK])


@dataclass(frozen=True)
class SystemParams:
    """Physical configuration of one simulation.

    ``delta_p`` and ``delta_s`` are the pump and Stokes detunings, ``gamma``
    the loss rate out of the excited state.  The caps bound the pump/Stokes
    Rabi frequency and the Stark shift.  The window ``[t_start, t_end]`` is
    split into ``n_steps`` piecewise-constant intervals.
    """

    delta_p: float = 30.0
    delta_s: float = 45.0
    gamma: float = 0.0
    omega0_cap: float = 50.0
    s0_cap: float = 200.0
    t_start: float = -4.0
    t_end: float = 4.0
    n_steps: int = 800

    def __post_init__(self):
        for name in ("delta_p", "delta_s", "gamma", "omega0_cap", "s0_cap", "t_start", "t_end"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite, got {getattr(self, name)!r}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.omega0_cap <= 0 or self.s0_cap <= 0:
            raise ValueError("amplitude caps must be > 0")
        if not self.t_end > self.t_start:
            raise ValueError("t_end must be greater than t_start")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError(f"n_steps must be a positive integer, got {self.n_steps!r}")

    @property
    def dt(self) -> float:
        return (self.t_end - self.t_start) / self.n_steps

    @property
    def duration(self) -> float:
        return self.t_end - self.t_start

    def midpoints(self) -> np.ndarray:
        """Centres of the N time steps."""
        return self.t_start + (np.arange(self.n_steps) + 0.5) * self.dt

    def edges(self) -> np.ndarray:
        """The N+1 step boundaries, t_0 = t_start ... t_N = t_end."""
        return self.t_start + np.arange(self.n_steps + 1) * self.dt

    def with_detunings(self, delta_p: float, delta_s: float) -> "SystemParams":
        return replace(self, delta_p=float(delta_p), delta_s=float(delta_s))


@dataclass(frozen=True)
class ControlSample:
    """Instantaneous pump and Stokes Rabi frequencies and Stark shift magnitude."""

    omega_p: float = 0.0
    omega_s: float = 0.0
    stark: float = 0.0


class DensityMatrix:
    """A 3x3 density operator, possibly with trace < 1 after leakage."""

    __slots__ = ("elements",)

    def __init__(self, elements):
        elements = np.array(elements, dtype=complex)
        if elements.shape != (3, 3):
            raise ValueError(f"density matrix must be 3x3, got shape {elements.shape}")
        self.elements = elements

    @classmethod
    def projector(cls, level: int) -> "DensityMatrix":
        """|level><level| for level in {0, 1, 2}."""
        rho = np.zeros((3, 3), dtype=complex)
        rho[level, level] = 1.0
        return cls(rho)

    @property
    def trace(self) -> float:
        return float(np.trace(self.elements).real)

    @property
    def populations(self) -> np.ndarray:
        return np.diag(self.elements).real.copy()

    def violations(self) -> list:
        """Names of the density-matrix invariants this state breaks."""
        return density_violations(self.elements)

    def check(self) -> "DensityMatrix":
        bad = self.violations()
        if bad:
            raise ValueError("invalid density matrix: " + ", ".join(bad))
        return self

    def __array__(self, dtype=None, copy=None):
        return self.elements if dtype is None else self.elements.astype(dtype)

    def __repr__(self):
        return f"DensityMatrix({np.array2string(self.elements, precision=4)})"


def density_violations(rho: np.ndarray, hermitian_tol=HERMITIAN_TOL) -> list:
    bad = []
    if not np.all(np.isfinite(rho)):
        return ["non-finite entries"]
    if np.max(np.abs(rho - rho.conj().T)) > hermitian_tol:
        bad.append("not Hermitian")
    herm = 0.5 * (rho + rho.conj().T)
    if np.linalg.eigvalsh(herm).min() < -PSD_TOL:
        bad.append("not positive semidefinite")
    tr = np.trace(rho).real
    if tr < -TRACE_TOL or tr > 1 + TRACE_TOL:
        bad.append(f"trace {tr} outside [0, 1]")
    return bad


def hamiltonians(delta_p, delta_s, gamma, omega_p, omega_s, stark) -> np.ndarray:
    """Broadcasting Hamiltonian assembly; returns an array of shape (..., 3, 3).

    The Stark envelope ``stark`` is the non-negative magnitude S = -S2.
    """
    delta_p, delta_s, omega_p, omega_s, stark = np.broadcast_arrays(
        *(np.asarray(a, dtype=float) for a in (delta_p, delta_s, omega_p, omega_s, stark))
    )
    h = np.zeros(delta_p.shape + (3, 3), dtype=complex)
    h[..., 0, 1] = h[..., 1, 0] = 0.5 * omega_p
    h[..., 1, 2] = h[..., 2, 1] = 0.5 * omega_s
    h[..., 1, 1] = delta_p - stark - 0.5j * gamma
    h[..., 2, 2] = delta_p - delta_s
    return h


def build_hamiltonian(params: SystemParams, ctrl: ControlSample) -> np.ndarray:
    values = (ctrl.omega_p, ctrl.omega_s, ctrl.stark)
    if not all(math.isfinite(v) for v in values):
        raise ValueError(f"control values must be finite, got {ctrl!r}")
    return hamiltonians(params.delta_p, params.delta_s, params.gamma, *values)


def diabatic_energies(params: SystemParams, stark: float) -> Tuple[float, float, float]:
    """Diabatic energies (E1, E2, E3), using the factor-2 convention of the level scheme."""
    if not math.isfinite(stark) or stark < 0:
        raise ValueError(f"stark must be finite and >= 0, got {stark!r}")
    return (
        0.0,
        2.0 * (params.delta_p - stark),
        2.0 * (params.delta_p - params.delta_s),
    )


class Crossings(NamedTuple):
    t_12: Optional[Tuple[float, float]]
    t_23: Optional[Tuple[float, float]]


def _gaussian_crossing(s0: float, t_st: float, detuning: float):
    if not s0 > detuning > 0:
        return None
    t = t_st * math.sqrt(math.log(s0 / detuning))
    return (-t, t)


def crossing_times(params: SystemParams, s0: float, t_st: float) -> Crossings:
    """Times at which a Stark pulse s0*exp(-t^2/t_st^2) brings |2> onto |1> and |3>.

    The 1-2 crossing happens where S(t) = delta_p and the 2-3 crossing where
    S(t) = delta_s.  Each entry is ``(-t, +t)`` or ``None`` if the pulse never
    reaches that detuning.
    """
    if not s0 > 0 or not t_st > 0:
        raise ValueError("Stark amplitude and width must be > 0")
    return Crossings(
        _gaussian_crossing(s0, t_st, params.delta_p),
        _gaussian_crossing(s0, t_st, params.delta_s),
    )


class Regime(str, enum.Enum):
    NEGATIVE_TWO_PHOTON = "negative_two_photon"
    POSITIVE_TWO_PHOTON = "positive_two_photon"
    TWO_PHOTON_RESONANT = "two_photon_resonant"
    NO_CROSSING = "no_crossing"


def validate_regime(params: SystemParams, s0: float) -> Regime:
    """Classify the detunings by which level crossings a Stark shift of ``s0`` produces."""
    dp, ds = params.delta_p, params.delta_s
    if not (s0 > dp > 0 and s0 > ds > 0):
        return Regime.NO_CROSSING
    two_photon = dp - ds
    if dp > 0 > two_photon > dp - s0:
        return Regime.NEGATIVE_TWO_PHOTON
    if dp > two_photon > 0 > dp - s0:
        return Regime.POSITIVE_TWO_PHOTON
    return Regime.TWO_PHOTON_RESONANT
