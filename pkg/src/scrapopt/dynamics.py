"""Piecewise-constant density-matrix propagation under a non-Hermitian Hamiltonian.

Each step applies rho -> U rho U^dagger with U = exp(-i dt H).  The decay
term of H is anti-Hermitian, so population leaks out and the trace falls.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np

from scrapopt.model import PSD_TOL, TRACE_TOL, DensityMatrix, SystemParams, hamiltonians
from scrapopt.pulses import Schedule

# Eigenvector condition number above which the eigendecomposition is not trusted.
COND_LIMIT = 1e8
HERMITIAN_DRIFT_TOL = 1e-10


class NumericalError(RuntimeError):
    """Propagation produced a state that is no longer a valid density matrix."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


@dataclass
class Eigensystem:
    """exp(A) = V diag(exp(w)) V^-1 for a stack of generators A."""

    w: np.ndarray
    v: np.ndarray
    vinv: np.ndarray
    fallback: np.ndarray  # steps whose eigenvectors were too ill-conditioned


def taylor_expm(a: np.ndarray, order: int = 20) -> np.ndarray:
    """Scaling-and-squaring Taylor exponential for a stack of matrices."""
    a = np.asarray(a, dtype=complex)
    norm = np.abs(a).sum(axis=-2).max(axis=-1)
    squarings = np.maximum(0, np.ceil(np.log2(np.maximum(norm, 1e-300) / 0.25))).astype(int)
    scaled = a / (2.0 ** squarings)[..., None, None]
    eye = np.broadcast_to(np.eye(a.shape[-1], dtype=complex), a.shape)
    result = eye.copy()
    term = eye.copy()
    for k in range(1, order + 1):
        term = term @ scaled / k
        result = result + term
    for s in range(squarings.max(initial=0)):
        more = squarings > s
        result[more] = result[more] @ result[more]
    return result


def eigensystem(a: np.ndarray) -> Eigensystem:
    w, v = np.linalg.eig(a)
    try:
        vinv = np.linalg.inv(v)
    except np.linalg.LinAlgError:
        flat = v.reshape((-1,) + v.shape[-2:])
        out = np.full_like(flat, np.nan)
        for i, m in enumerate(flat):
            try:
                out[i] = np.linalg.inv(m)
            except np.linalg.LinAlgError:
                pass
        vinv = out.reshape(v.shape)
    with np.errstate(all="ignore"):
        cond = np.linalg.norm(v, axis=(-2, -1)) * np.linalg.norm(vinv, axis=(-2, -1))
    fallback = ~np.isfinite(cond) | (cond > COND_LIMIT)
    vinv[fallback] = 0.0
    return Eigensystem(w, v, vinv, fallback)


def expm_stack(a: np.ndarray, eig: Optional[Eigensystem] = None) -> np.ndarray:
    """exp(a) for every matrix in the stack ``a`` (shape (..., n, n))."""
    a = np.asarray(a, dtype=complex)
    if eig is None:
        eig = eigensystem(a)
    u = (eig.v * np.exp(eig.w)[..., None, :]) @ eig.vinv
    if np.any(eig.fallback):
        u[eig.fallback] = taylor_expm(a[eig.fallback])
    return u


def step_propagator(h, dt: float) -> np.ndarray:
    """U = exp(-i dt H) for a single Hamiltonian or a stack of them."""
    if not dt > 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    h = np.asarray(h, dtype=complex)
    if not np.all(np.isfinite(h)):
        raise ValueError("Hamiltonian has non-finite entries")
    return expm_stack(-1j * dt * h)


def _phi1(z: np.ndarray) -> np.ndarray:
    """(exp(z) - 1) / z, continuous at z = 0."""
    small = np.abs(z) < 1e-8
    safe = np.where(small, 1.0, z)
    return np.where(small, 1.0 + z / 2, np.expm1(safe) / safe)


def frechet_weights(eig: Eigensystem) -> np.ndarray:
    """Divided differences of exp over eigenvalue pairs: (e^a_p - e^a_q)/(a_p - a_q)."""
    w = eig.w
    return np.exp(w)[..., :, None] * _phi1(w[..., None, :] - w[..., :, None])


def expm_frechet_block(a: np.ndarray, e: np.ndarray) -> np.ndarray:
    """Directional derivative of exp at ``a`` along ``e`` via the 2n x 2n block exponential."""
    n = a.shape[-1]
    block = np.zeros(a.shape[:-2] + (2 * n, 2 * n), dtype=complex)
    block[..., :n, :n] = a
    block[..., n:, n:] = a
    block[..., :n, n:] = e
    return taylor_expm(block)[..., :n, n:]


def _conj_t(m):
    return np.swapaxes(m, -1, -2).conj()


@dataclass
class PropagationRecord:
    """Forward trajectory rho_0 ... rho_N and the step propagators U_1 ... U_N.

    ``propagators[j-1]`` is U_j, mapping ``rho[j-1]`` to ``rho[j]``.
    """

    times: np.ndarray
    rho: np.ndarray
    propagators: np.ndarray
    hamiltonians: np.ndarray
    eig: Optional[Eigensystem] = None

    @property
    def populations(self) -> np.ndarray:
        return np.real(np.diagonal(self.rho, axis1=-2, axis2=-1)).copy()

    @property
    def final(self) -> DensityMatrix:
        return DensityMatrix(self.rho[-1])

    def state(self, j: int) -> DensityMatrix:
        return DensityMatrix(self.rho[j])


def check_states(rho: np.ndarray, hermitian_tol: float = HERMITIAN_DRIFT_TOL) -> None:
    """Raise NumericalError naming the first step whose state breaks the invariants.

    ``rho`` has shape (N+1, 3, 3) or (B, N+1, 3, 3).
    """
    rho = np.asarray(rho)
    bad = ~np.all(np.isfinite(rho), axis=(-2, -1))
    drift = np.max(np.abs(rho - _conj_t(rho)), axis=(-2, -1))
    bad |= drift > hermitian_tol
    herm = 0.5 * (rho + _conj_t(rho))
    herm = np.where(np.isfinite(herm), herm, 0.0)
    bad |= np.linalg.eigvalsh(herm)[..., 0] < -PSD_TOL
    tr = np.trace(rho, axis1=-2, axis2=-1).real
    bad |= (tr < -TRACE_TOL) | (tr > 1 + TRACE_TOL)
    if np.any(bad):
        idx = np.argwhere(bad)[0]
        step = int(idx[-1])
        raise NumericalError(f"invalid density matrix at step {step}", step=step)


def forward_states(rho0: np.ndarray, u: np.ndarray) -> np.ndarray:
    """rho_j = U_j rho_{j-1} U_j^dagger; ``u`` has shape (..., N, 3, 3)."""
    n = u.shape[-3]
    rho = np.empty(u.shape[:-3] + (n + 1, 3, 3), dtype=complex)
    rho[..., 0, :, :] = rho0
    ud = _conj_t(u)
    current = np.broadcast_to(rho0, u.shape[:-3] + (3, 3)).astype(complex)
    for j in range(n):
        current = u[..., j, :, :] @ current @ ud[..., j, :, :]
        rho[..., j + 1, :, :] = current
    return rho


def backward_costates(target, propagators) -> np.ndarray:
    """Costates lambda_0 ... lambda_N with lambda_N = C, lambda_{j-1} = U_j^dag lambda_j U_j.

    Entry j pairs with the forward state rho_j, so tr(lambda_j rho_j) is the
    same performance index for every j.  The propagator stack may carry
    leading batch axes.
    """
    c = np.asarray(target, dtype=complex)
    u = np.asarray(propagators, dtype=complex)
    n = u.shape[-3]
    lam = np.empty(u.shape[:-3] + (n + 1, 3, 3), dtype=complex)
    current = np.broadcast_to(c, u.shape[:-3] + (3, 3)).astype(complex)
    lam[..., n, :, :] = current
    ud = _conj_t(u)
    for j in range(n, 0, -1):
        current = ud[..., j - 1, :, :] @ current @ u[..., j - 1, :, :]
        lam[..., j - 1, :, :] = current
    return lam


def schedule_hamiltonians(schedule: Schedule, params: SystemParams) -> np.ndarray:
    return hamiltonians(
        params.delta_p, params.delta_s, params.gamma,
        schedule.omega_p, schedule.omega_s, schedule.stark,
    )


def propagate(rho0, schedule: Schedule, params: SystemParams, check: bool = True) -> PropagationRecord:
    """Propagate ``rho0`` through every step of ``schedule``."""
    if len(schedule) != params.n_steps:
        raise ValueError(f"schedule has {len(schedule)} steps, params expect {params.n_steps}")
    rho0 = np.asarray(rho0, dtype=complex)
    h = schedule_hamiltonians(schedule, params)
    if not np.all(np.isfinite(h)):
        raise ValueError("schedule produced non-finite Hamiltonians")
    a = -1j * params.dt * h
    eig = eigensystem(a)
    u = expm_stack(a, eig)
    rho = forward_states(rho0, u)
    if check:
        check_states(rho)
    return PropagationRecord(params.edges(), rho, u, h, eig)


def population_trace(record: PropagationRecord) -> np.ndarray:
    """Rows (t, P1, P2, P3) at every step boundary, shape (N+1, 4)."""
    return np.column_stack([record.times, record.populations])


def write_trace_csv(path, table: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["t", "p1", "p2", "p3"])
        for row in table:
            writer.writerow([f"{v:.17g}" for v in row])
