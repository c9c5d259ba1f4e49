"""Quantization-error propagation through a DDIM trajectory.

Per executed step ``t -> t_prev`` the cumulative error obeys::

    delta_{t_prev} = A_t delta_t + B_t eps_t,    A_t = a_t I + B_t J_t

with ``a_t = sqrt(alpha_{t_prev} / alpha_t)``.  Dropping ``J`` leaves the
scalar ``a_t`` and the products of ``a`` telescope to ratios of
``sqrt(alpha)``.

Two weight conventions are carried side by side.  ``recursion`` is what
unrolling the step equation produces (products of ``A_j``); ``inverse`` uses the
reciprocal products of ``A_j^{-1}``.  The two are exact reciprocals; only
``recursion`` reproduces measured trajectories.

All timesteps are step-plan neighbours: ``prev(t)`` is the next smaller
planned timestep, ``next(t)`` the previously executed (larger) one.
"""

from dataclasses import dataclass, field, asdict
from collections.abc import Mapping
import math

import numpy as np

from .errors import MissingRow, ScheduleError, ShapeError
from .latents import l2_norm
from .schedule import StepPlan, ddim_coeffs

MODES = ("inverse", "recursion")


def unit_plan(s) -> StepPlan:
    return StepPlan(tuple(range(s.T, 0, -1)), s.T)


def _check_mode(mode):
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")


@dataclass(frozen=True, eq=False)
class PropagationCoeffs:
    t: int
    t_prev: int
    a: float
    B: float
    A: object  # float (Jacobian dropped) or (D, D) array

    @property
    def is_scalar(self):
        return np.ndim(self.A) == 0


def prop_coeffs(s, t: int, t_prev: int, jacobian=None) -> PropagationCoeffs:
    a, B = ddim_coeffs(s, t, t_prev)
    if jacobian is None:
        return PropagationCoeffs(t, t_prev, a, B, a)
    J = np.asarray(getattr(jacobian, "matrix", jacobian), dtype=np.float64)
    if J.ndim != 2 or J.shape[0] != J.shape[1]:
        raise ShapeError(f"Jacobian must be square, got {J.shape}")
    return PropagationCoeffs(t, t_prev, a, B, a * np.eye(J.shape[0]) + B * J)


def telescoped_product(s, t: int, k: int, mode: str = "recursion", plan=None) -> float:
    """Closed form of ``prod_{j=t}^{k-1}`` of the per-step factor.

    ``inverse`` returns ``sqrt(alpha_{prev k}) / sqrt(alpha_{prev t})``;
    ``recursion`` its reciprocal (the product of the ``a_j``).
    """
    _check_mode(mode)
    plan = plan or unit_plan(s)
    if not (t <= k):
        raise ScheduleError(f"need t <= k, got t={t}, k={k}")
    if k == t:
        plan.index(t)
        return 1.0
    num = math.sqrt(float(s.alpha[plan.prev(k)]))
    den = math.sqrt(float(s.alpha[plan.prev(t)]))
    return num / den if mode == "inverse" else den / num


def _eps_map(eps, plan) -> dict:
    if isinstance(eps, Mapping):
        return {int(k): np.asarray(v, dtype=np.float64) for k, v in eps.items()}
    seq = list(eps)
    if len(seq) > plan.N:
        raise ValueError(f"{len(seq)} eps records for a {plan.N}-step plan")
    return {plan.steps[i]: np.asarray(v, dtype=np.float64) for i, v in enumerate(seq)}


def _get(eps_map, k):
    try:
        return eps_map[k]
    except KeyError:
        raise MissingRow(f"no eps record for timestep {k}") from None


def cumulative_error_closed_form(eps, s, plan, t: int, mode: str = "recursion",
                                 gains=None, shape=None) -> np.ndarray:
    """Cumulative error at state ``t`` from the per-step errors of every step
    executed before it::

        delta_t = sum_{k > t} w(next(t), k) B_k eps_k

    ``gains`` optionally maps timestep -> scalar propagation factor ``A_j``
    (e.g. ``a_j + B_j c_j`` for an affine denoiser with Jacobian ``c_j I``);
    by default ``A_j = a_j``.  ``inverse`` mode uses reciprocal weights.
    """
    _check_mode(mode)
    eps_map = _eps_map(eps, plan)
    stop = plan.index(t)
    if shape is None:
        if not eps_map:
            raise MissingRow("no eps records and no shape given")
        shape = next(iter(eps_map.values())).shape
    total = np.zeros(shape)
    if stop == 0:
        return total
    # gains products: prod_{j: t < j < k} A_j, built from the newest step outward
    weight = 1.0
    weights = {}
    for i in range(stop - 1, -1, -1):
        k = plan.steps[i]
        if gains is None:
            w = telescoped_product(s, plan.steps[stop - 1], k, mode, plan)
        else:
            w = weight if mode == "recursion" else 1.0 / weight
            weight *= float(gains[k])
        weights[k] = w
    for i in range(stop):
        k = plan.steps[i]
        _, B = ddim_coeffs(s, k, plan.prev(k))
        total = total + (weights[k] * B) * _get(eps_map, k)
    return total


def measure_delta(traj_fp, traj_q, t: int) -> np.ndarray:
    """``x~_t - x_t`` between paired trajectories."""
    if traj_fp.plan.steps != traj_q.plan.steps:
        raise ScheduleError("trajectories use different step plans")
    if not np.array_equal(traj_fp.states[0], traj_q.states[0]):
        raise ValueError("trajectories start from different x_T")
    i = traj_fp.plan.index(t)
    return traj_q.states[i] - traj_fp.states[i]


def correction_window(plan, t: int, m: int):
    """Planned timesteps ``t, next(t), ...`` up to ``m`` steps back."""
    if m < 1:
        raise ValueError(f"window size m must be >= 1, got {m}")
    i = plan.index(t)
    return [plan.steps[j] for j in range(i, max(i - m, 0) - 1, -1)]


def correction_term(eps, s, plan, t: int, m: int = 1, mode: str = "recursion",
                    gains=None) -> np.ndarray:
    """Windowed correction ``Delta_t = -sum_k w(t, k) B_k eps_k``.

    The window is ``t`` plus up to ``m`` previously executed steps, truncated
    at the trajectory start.  In ``inverse`` mode
    ``w = sqrt(alpha_{prev k}) / sqrt(alpha_{prev t})``; ``recursion`` uses the
    reciprocal, or products of ``gains`` when supplied.
    """
    _check_mode(mode)
    eps_map = _eps_map(eps, plan)
    window = correction_window(plan, t, m)
    total = None
    weight = 1.0
    for k in window:
        if gains is None:
            w = telescoped_product(s, t, k, mode, plan)
        else:
            w = weight if mode == "recursion" else 1.0 / weight
            weight *= float(gains[k])
        _, B = ddim_coeffs(s, k, plan.prev(k))
        term = (w * B) * _get(eps_map, k)
        total = term if total is None else total + term
    return -total


def m_condition(s, plan, m: int):
    """Rows ``(t, sum_{k in next m steps} |B_k|, |B_t|, holds)`` per planned step."""
    rows = []
    absB = {t: abs(ddim_coeffs(s, t, tp)[1]) for t, tp in plan.pairs()}
    for t in plan.steps:
        window = correction_window(plan, t, m)[1:]
        lhs = 0.0
        for k in window:
            lhs += absB[k]
        rows.append((t, lhs, absB[t], lhs <= absB[t]))
    return rows


@dataclass
class BoundReport:
    sigma: float
    timesteps: list
    a: list
    B: list
    rho: list
    eta: list
    bound_delta0: float
    corrected_bound_delta0: float
    measured_delta0: float
    rho_lt_one: list
    premise_rho_lt_one: list
    m_condition: dict = field(default_factory=dict)
    window: int = 1

    @property
    def bound_holds(self):
        if self.measured_delta0 is None:
            return None
        return self.measured_delta0 <= self.bound_delta0

    def to_dict(self):
        d = asdict(self)
        d["bound_holds"] = self.bound_holds
        d["m_condition"] = {
            str(m): [{"t": t, "sum_next": lhs, "abs_B_t": rhs, "holds": ok}
                     for t, lhs, rhs, ok in rows]
            for m, rows in self.m_condition.items()}
        return d


def bound_suite(s, plan, eps, jacobian_norms=None, a_norms=None,
                measured_delta0=None, m: int = 1) -> BoundReport:
    """Norm bounds on the final cumulative error.

    ``rho_t`` is ``a_norms[t]`` (a measured ``||A_t||``) when given, otherwise
    the triangle bound ``a_t + |B_t| L_t`` with ``L_t`` from ``jacobian_norms``
    (0 if absent).  ``premise_rho_lt_one`` flags ``a_t < 1``, the contraction
    premise with ``L = 0``.
    """
    eps_map = _eps_map(eps, plan)
    if not eps_map:
        raise ValueError("bound_suite needs a non-empty trajectory")
    sigma = 0.0
    for t in plan.steps:
        sigma = max(sigma, l2_norm(_get(eps_map, t)))

    ts, a_list, B_list, rho, eta = [], [], [], [], []
    for t, tp in plan.pairs():
        a, B = ddim_coeffs(s, t, tp)
        if a_norms is not None:
            r = float(a_norms[t])
        else:
            L = float(jacobian_norms[t]) if jacobian_norms is not None else 0.0
            r = a + abs(B) * L
        e = 0.0
        sq_prev_t = math.sqrt(float(s.alpha[tp]))
        for k in correction_window(plan, t, m)[1:]:
            _, Bk = ddim_coeffs(s, k, plan.prev(k))
            e += math.sqrt(float(s.alpha[plan.prev(k)])) * abs(Bk)
        ts.append(t)
        a_list.append(a)
        B_list.append(B)
        rho.append(r)
        eta.append(sigma * e / sq_prev_t)

    # execution order i = 0..N-1; later steps (smaller t) multiply earlier errors
    n = len(ts)
    bound = 0.0
    corrected = 0.0
    for i in range(n):
        prod = 1.0
        for j in range(i + 1, n):
            prod *= rho[j]
        bound += prod * abs(B_list[i])
        corrected += prod * eta[i]
    bound *= sigma

    return BoundReport(
        sigma=sigma, timesteps=ts, a=a_list, B=B_list, rho=rho, eta=eta,
        bound_delta0=bound, corrected_bound_delta0=corrected,
        measured_delta0=None if measured_delta0 is None else float(measured_delta0),
        rho_lt_one=[r < 1.0 for r in rho],
        premise_rho_lt_one=[a < 1.0 for a in a_list],
        m_condition={mm: m_condition(s, plan, mm) for mm in (1, 2, 3)},
        window=m)
