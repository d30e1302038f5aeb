"""Gradient-based optimisation of Gaussian-sum SCRAP pulses.

The performance index of one detuning point is the overlap tr(C^dag rho(T))
of the final state with a target projector.  Its gradient is assembled
from per-step control gradients (forward states paired with backward
costates) and the chain rule through each Gaussian term.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize

from scrapopt.dynamics import (
    NumericalError,
    backward_costates,
    eigensystem,
    expm_frechet_block,
    expm_stack,
    forward_states,
    frechet_weights,
    check_states,
)
from scrapopt.model import CONTROL_HAMILTONIANS, DensityMatrix, SystemParams, hamiltonians
from scrapopt.pulses import (
    TABLE1_AMPLITUDE,
    PulseSet,
    caps,
    gaussian_basis,
    peak_envelopes,
    project_to_caps,
)

log = logging.getLogger(__name__)

GRADIENT_MODES = ("exact", "first_order")
PENALTY_SMOOTHING = 2e-3


def fidelity(rho_t, target) -> float:
    """Overlap tr(C^dag rho) of the final state with the target."""
    rho_t = np.asarray(rho_t, dtype=complex)
    c = np.asarray(target, dtype=complex)
    return float(np.real(np.trace(c.conj().T @ rho_t)))


def control_gradient(lambda_j, rho_j, h_k, dt: float) -> float:
    """First-order GRAPE gradient -<lambda_j | i dt [H_k, rho_j]> for one step.

    Exact only to first order in dt * ||H||; :func:`parameter_gradients`
    uses the exact propagator derivative by default.
    """
    lam = np.asarray(lambda_j, dtype=complex)
    rho = np.asarray(rho_j, dtype=complex)
    h = np.asarray(h_k, dtype=complex)
    value = -np.trace(lam.conj().T @ (1j * dt * (h @ rho - rho @ h)))
    if abs(value.imag) > 1e-12 * max(1.0, abs(value.real)):
        raise ValueError(f"control gradient is not real: {value}")
    return float(value.real)


@dataclass(frozen=True)
class GradientVector:
    """Derivatives of the performance index, laid out like ``PulseSet.to_array()``."""

    values: np.ndarray  # (3, q, 3): control, term, (d/dh, d/dtau, d/dsigma)

    @property
    def dh(self) -> np.ndarray:
        return self.values[..., 0]

    @property
    def dtau(self) -> np.ndarray:
        return self.values[..., 1]

    @property
    def dsigma(self) -> np.ndarray:
        return self.values[..., 2]

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))


@dataclass(frozen=True)
class Bounds:
    lower: np.ndarray
    upper: np.ndarray

    def contains(self, params: np.ndarray) -> bool:
        return bool(np.all(params >= self.lower) and np.all(params <= self.upper))

    def clip(self, params: np.ndarray) -> np.ndarray:
        return np.clip(params, self.lower, self.upper)


def default_bounds(
    initial: PulseSet,
    base: SystemParams,
    kappa: float = 1.1,
    amplitude_fraction: float = TABLE1_AMPLITUDE,
    width_floor: float = 0.5,
    width_ceiling: float = 4.0,
) -> Bounds:
    """Box bounds: 0 <= h <= fraction*cap*kappa, tau inside the window, widths
    between ``width_floor`` and ``width_ceiling`` times their initial values."""
    p0 = initial.to_array()
    lower = np.empty_like(p0)
    upper = np.empty_like(p0)
    lower[..., 0] = 0.0
    upper[..., 0] = (amplitude_fraction * kappa * caps(base))[:, None]
    lower[..., 1] = base.t_start
    upper[..., 1] = base.t_end
    lower[..., 2] = width_floor * p0[..., 2]
    upper[..., 2] = width_ceiling * p0[..., 2]
    return Bounds(lower, upper)


@dataclass
class OptimizationProblem:
    """Detuning-averaged pulse optimisation from an initial ``PulseSet``.

    ``base`` carries decay, caps and time grid; its detunings are replaced by
    each entry of ``detuning_points``.  ``bounds=None`` selects
    :func:`default_bounds`.
    """

    base: SystemParams
    detuning_points: Sequence[Tuple[float, float]]
    initial: PulseSet
    bounds: Optional[Bounds] = None
    rho0: np.ndarray = field(default_factory=lambda: DensityMatrix.projector(0).elements)
    target: np.ndarray = field(default_factory=lambda: DensityMatrix.projector(2).elements)
    envelope_slack: float = 0.01
    penalty_weight: float = 10.0
    gradient: str = "exact"

    def __post_init__(self):
        self.detuning_points = [tuple(map(float, p)) for p in self.detuning_points]
        if len(self.detuning_points) < 1:
            raise ValueError("need at least one detuning point")
        if any(len(p) != 2 for p in self.detuning_points):
            raise ValueError("detuning points must be (delta_p, delta_s) pairs")
        if self.bounds is None:
            self.bounds = default_bounds(self.initial, self.base)
        self.rho0 = np.asarray(self.rho0, dtype=complex)
        self.target = np.asarray(self.target, dtype=complex)
        if self.gradient not in GRADIENT_MODES:
            raise ValueError(f"gradient must be one of {GRADIENT_MODES}")

    def with_points(self, points) -> "OptimizationProblem":
        return replace(self, detuning_points=list(points))


def _exact_step_gradients(rho, u, eig, lam, a_stack, dt):
    """d Phi / d u_k(j) using the exact derivative of each step exponential.

    d rho_j = dU rho_{j-1} U^dag + h.c., so g = 2 Re tr(lambda_j dU rho_{j-1} U^dag),
    with dU = V (W o (V^-1 E V)) V^-1 in the eigenbasis of the generator.
    """
    rho_prev = rho[..., :-1, :, :]
    lam_j = lam[..., 1:, :, :]
    ud = np.swapaxes(u, -1, -2).conj()
    inner = rho_prev @ ud @ lam_j  # tr(lam dU rho U^dag) == tr(dU inner)
    x = eig.vinv @ inner @ eig.v
    weights = frechet_weights(eig)
    e_stack = -1j * dt * CONTROL_HAMILTONIANS  # (3, 3, 3)
    m = np.einsum("...ip,kpq,...qj->k...ij", eig.vinv, e_stack, eig.v)
    g = 2.0 * np.real(np.einsum("k...pq,...pq,...qp->k...", m, weights, x))
    if np.any(eig.fallback):
        idx = np.nonzero(eig.fallback)
        for k in range(3):
            e = np.broadcast_to(e_stack[k], a_stack[idx].shape)
            du = expm_frechet_block(a_stack[idx], e)
            val = np.trace(du @ inner[idx], axis1=-2, axis2=-1)
            g[(k,) + idx] = 2.0 * np.real(val)
    return np.moveaxis(g, 0, -2)  # (..., 3, N)


def _first_order_step_gradients(rho, lam, dt):
    rho_j = rho[..., 1:, :, :]
    lam_j = lam[..., 1:, :, :]
    out = []
    for h in CONTROL_HAMILTONIANS:
        comm = h @ rho_j - rho_j @ h
        val = -np.trace(np.swapaxes(lam_j, -1, -2).conj() @ (1j * dt * comm), axis1=-2, axis2=-1)
        out.append(val.real)
    return np.stack(out, axis=-2)


def chain_rule(step_grads: np.ndarray, params: np.ndarray, t: np.ndarray, envelopes=None) -> np.ndarray:
    """Map per-step control gradients (..., 3, N) to Gaussian parameters (..., 3, q, 3)."""
    basis = gaussian_basis(params, t)  # (3, q, N)
    if envelopes is not None:
        step_grads = step_grads * (envelopes >= 0)  # clamped steps carry no gradient
    h = params[..., 0, None]
    diff = t - params[..., 1, None]
    sigma = params[..., 2, None]
    d_h = basis
    d_tau = h * basis * 2.0 * diff / sigma**2
    d_sigma = h * basis * 2.0 * diff**2 / sigma**3
    partials = np.stack([d_h, d_tau, d_sigma], axis=-1)  # (3, q, N, 3)
    return np.einsum("...kn,kqnp->...kqp", step_grads, partials)


def evaluate_points(
    problem: OptimizationProblem,
    pulses,
    points: Optional[Sequence[Tuple[float, float]]] = None,
    with_gradient: bool = True,
    check: bool = True,
):
    """Performance index (and parameter gradients) for many detuning points at once.

    Returns ``(phi, grads)`` with shapes (d,) and (d, 3, q, 3); ``grads`` is None
    without gradients.
    """
    base = problem.base
    points = np.asarray(problem.detuning_points if points is None else points, dtype=float)
    t = base.midpoints()
    raw = pulses.envelopes(t)
    env = np.maximum(raw, 0.0)
    h = hamiltonians(
        points[:, 0, None], points[:, 1, None], base.gamma, env[0], env[1], env[2]
    )  # (d, N, 3, 3)
    a = -1j * base.dt * h
    eig = eigensystem(a)
    u = expm_stack(a, eig)
    rho = forward_states(problem.rho0, u)
    if check:
        try:
            check_states(rho)
        except NumericalError as exc:
            bad = [tuple(p) for p in points]
            raise NumericalError(f"{exc} for detuning points {bad}", step=exc.step) from exc
    c = problem.target
    phi = np.real(np.einsum("ij,dij->d", c.conj(), rho[:, -1]))
    if not with_gradient:
        return phi, None
    lam = backward_costates(c, u)
    if problem.gradient == "exact":
        step = _exact_step_gradients(rho, u, eig, lam, a, base.dt)
    else:
        step = _first_order_step_gradients(rho, lam, base.dt)
    grads = chain_rule(step, pulses.to_array(), t, raw)
    return phi, grads


def parameter_gradients(problem: OptimizationProblem, pulses: PulseSet, point) -> Tuple[float, GradientVector]:
    """Performance index and its Gaussian-parameter gradient at one detuning point."""
    phi, grads = evaluate_points(problem, pulses, [point])
    return float(phi[0]), GradientVector(grads[0])


def averaged_objective(problem: OptimizationProblem, pulses: PulseSet) -> Tuple[float, GradientVector]:
    """Mean performance index and gradient over the problem's detuning points."""
    phi, grads = evaluate_points(problem, pulses)
    return float(phi.mean()), GradientVector(grads.mean(axis=0))


def envelope_penalty(params: np.ndarray, base: SystemParams, slack: float, weight: float,
                     smoothing: float = PENALTY_SMOOTHING):
    """Penalty ~ weight * max relative envelope excess over (1 + slack) * cap, with gradient.

    The hinge is rounded quadratically over the first ``smoothing`` of excess
    so the penalty stays differentiable; line searches stall on a kink.
    """
    t = base.midpoints()
    basis = gaussian_basis(params, t)
    env = np.einsum("kq,kqn->kn", params[..., 0], basis)
    limit = caps(base)
    excess = env.max(axis=1) / limit - (1.0 + slack)
    grad = np.zeros_like(params)
    k = int(np.argmax(excess))
    if excess[k] <= 0:
        return 0.0, grad
    j = int(np.argmax(env[k]))
    h = params[k, :, 0]
    diff = t[j] - params[k, :, 1]
    sigma = params[k, :, 2]
    b = basis[k, :, j]
    grad[k, :, 0] = b
    grad[k, :, 1] = h * b * 2 * diff / sigma**2
    grad[k, :, 2] = h * b * 2 * diff**2 / sigma**3
    v = float(excess[k])
    if v < smoothing:
        value, slope = v * v / (2 * smoothing), v / smoothing
    else:
        value, slope = v - smoothing / 2, 1.0
    return weight * value, weight * slope * grad / limit[k]


@dataclass
class OptimizationResult:
    pulses: PulseSet
    unprojected: PulseSet
    trace: List[dict]
    phi_initial: float
    phi_final: float
    iterations: int
    message: str

    @property
    def phi_trace(self) -> List[float]:
        return [row["objective"] for row in self.trace]


def _projected_grad_norm(x, grad, lower, upper):
    g = grad.copy()
    g[(x <= lower) & (g > 0)] = 0.0
    g[(x >= upper) & (g < 0)] = 0.0
    return float(np.linalg.norm(g))


def optimize(
    problem: OptimizationProblem,
    max_iter: int = 500,
    gtol: float = 1e-6,
    ftol: float = 1e-9,
    project: bool = True,
    on_iteration: Optional[Callable[[dict], None]] = None,
) -> OptimizationResult:
    """Maximise the detuning-averaged fidelity with bounded L-BFGS.

    Works in box-normalised coordinates (each parameter mapped onto [0, 1]
    of its bounds) so amplitudes and times share a scale.  The returned
    trace has one row per accepted iterate, starting with the initial point.
    With ``project`` the final pulses are rescaled onto the amplitude caps.
    """
    bounds = problem.bounds
    p0 = problem.initial.to_array()
    if not bounds.contains(p0):
        raise ValueError("initial pulses violate the optimisation bounds")
    shape = p0.shape
    lower, upper = bounds.lower.ravel(), bounds.upper.ravel()
    span = np.where(upper > lower, upper - lower, 1.0)
    base = problem.base

    def unpack(z):
        return np.clip(lower + z * span, lower, upper).reshape(shape)

    cache = {}

    def evaluate(z):
        key = z.tobytes()
        if key not in cache:
            params = unpack(z)
            pulses = PulseSet.from_array(params)
            phi, grads = evaluate_points(problem, pulses)
            pen, pen_grad = envelope_penalty(params, base, problem.envelope_slack, problem.penalty_weight)
            obj = float(phi.mean()) - pen
            grad = (grads.mean(axis=0) - pen_grad).ravel() * span
            cache.clear()
            cache[key] = (obj, float(phi.mean()), grad, params)
        return cache[key]

    trace: List[dict] = []
    iterates: List[np.ndarray] = []

    def record(z):
        obj, phi, grad, params = evaluate(z)
        peaks = peak_envelopes(PulseSet.from_array(params), base)
        free = upper > lower
        row = {
            "iter": len(trace),
            "phi": phi,
            "objective": obj,
            "grad_norm": _projected_grad_norm(z, -grad, np.zeros_like(z), np.where(free, 1.0, 0.0)),
            "max_envelope_p": float(peaks[0]),
            "max_envelope_s": float(peaks[1]),
            "max_envelope_st": float(peaks[2]),
        }
        trace.append(row)
        iterates.append(params.copy())
        if on_iteration is not None:
            on_iteration(row)

    z0 = np.where(upper > lower, (p0.ravel() - lower) / span, 0.0)
    record(z0)

    def fun(z):
        obj, _, grad, _ = evaluate(z)
        return -obj, -grad

    def callback(intermediate_result):
        record(intermediate_result.x)

    zbounds = [(0.0, 1.0) if u > l else (0.0, 0.0) for l, u in zip(lower, upper)]
    res = minimize(
        fun,
        z0,
        jac=True,
        method="L-BFGS-B",
        bounds=zbounds,
        callback=callback,
        options={"maxiter": max_iter, "gtol": gtol, "ftol": ftol},
    )
    if not np.array_equal(unpack(res.x), iterates[-1]) and -res.fun > trace[-1]["objective"]:
        record(res.x)
    best = int(np.argmax([row["objective"] for row in trace]))
    unprojected = PulseSet.from_array(iterates[best])
    final = project_to_caps(unprojected, base) if project else unprojected
    phi_final = trace[best]["phi"] if final is unprojected else averaged_phi(problem, final)
    log.info("optimize: %d iterations, phi %.6f -> %.6f (%s)", res.nit, trace[0]["phi"], phi_final, res.message)
    return OptimizationResult(
        pulses=final,
        unprojected=unprojected,
        trace=trace,
        phi_initial=trace[0]["phi"],
        phi_final=phi_final,
        iterations=int(res.nit),
        message=str(res.message),
    )


def averaged_phi(problem: OptimizationProblem, pulses: PulseSet) -> float:
    phi, _ = evaluate_points(problem, pulses, with_gradient=False)
    return float(phi.mean())


@dataclass
class GreedyResult:
    points: List[Tuple[float, float]]
    scores: List[float]
    pulses: PulseSet
    rounds: List[List[dict]]


def _score_points(problem: OptimizationProblem, points, grid, optimize_kwargs: dict):
    from scrapopt.sweep import fidelity_map, mean_fidelity

    result = optimize(problem.with_points(points), **optimize_kwargs)
    fmap = fidelity_map(result.pulses, grid, problem.base, rho0=problem.rho0, target=problem.target)
    return mean_fidelity(fmap), result.pulses


def greedy_point_selection(
    candidates: Sequence[Tuple[float, float]],
    evaluation_grid,
    budget: int,
    problem: OptimizationProblem,
    optimize_kwargs: Optional[dict] = None,
    seed: int = 0,
    workers: int = 1,
) -> GreedyResult:
    """Grow the set of optimisation points one candidate at a time.

    Each round re-optimises from ``problem.initial`` with every candidate
    added to the points chosen so far and keeps the candidate whose
    optimised pulses give the best mean fidelity over ``evaluation_grid``.
    Stops once no candidate strictly improves the score or after ``budget``
    rounds.  ``seed`` fixes the evaluation order, which breaks ties.
    """
    candidates = [tuple(map(float, c)) for c in candidates]
    if not candidates:
        raise ValueError("need at least one candidate point")
    if budget < 1:
        raise ValueError("budget must be >= 1")
    optimize_kwargs = dict(optimize_kwargs or {})
    order = np.random.default_rng(seed).permutation(len(candidates))
    ordered = [candidates[i] for i in order]

    chosen: List[Tuple[float, float]] = []
    scores: List[float] = []
    rounds: List[List[dict]] = []
    best_pulses = problem.initial
    for _ in range(budget):
        trials = [chosen + [c] for c in ordered]
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                outcomes = list(
                    pool.map(
                        _score_points,
                        [problem] * len(trials),
                        trials,
                        [evaluation_grid] * len(trials),
                        [optimize_kwargs] * len(trials),
                    )
                )
        else:
            outcomes = [_score_points(problem, pts, evaluation_grid, optimize_kwargs) for pts in trials]
        rounds.append([{"candidate": c, "score": s} for c, (s, _) in zip(ordered, outcomes)])
        i = int(np.argmax([s for s, _ in outcomes]))  # first maximum wins ties
        score, pulses = outcomes[i]
        if scores and not score > scores[-1]:
            break
        chosen.append(ordered[i])
        scores.append(float(score))
        best_pulses = pulses
        log.info("greedy: added %s, score %.6f", ordered[i], score)
    return GreedyResult(chosen, scores, best_pulses, rounds)
