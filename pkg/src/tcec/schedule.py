"""Discrete noise schedules, DDIM step coefficients and step plans.

``alpha`` always denotes the cumulative signal-retention product
(``alpha[t] = prod_{s<=t} (1 - beta[s])``) with ``alpha[0] = 1``.
"""

from dataclasses import dataclass, field
import hashlib
import math

import numpy as np

from .errors import ScheduleError


def _frozen(a):
    a = np.array(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Schedule of ``T`` steps.

    ``beta`` has length ``T`` (``beta[0]`` is beta_1); ``alpha`` has length
    ``T + 1`` and is indexed directly by timestep.
    """

    T: int
    beta: np.ndarray
    alpha: np.ndarray

    @classmethod
    def from_betas(cls, betas, strict=True):
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ScheduleError("betas must be a non-empty 1-D sequence")
        lo_ok = np.all(betas > 0) if strict else np.all(betas >= 0)
        if not lo_ok or not np.all(betas < 1):
            raise ScheduleError("every beta must lie in (0, 1)")
        alpha = np.empty(betas.size + 1)
        alpha[0] = 1.0
        # explicit serial product keeps alpha[t] == alpha[t-1] * (1 - beta[t]) bit-exact
        for i, b in enumerate(betas, start=1):
            alpha[i] = alpha[i - 1] * (1.0 - b)
        return cls(T=int(betas.size), beta=_frozen(betas), alpha=_frozen(alpha))

    @classmethod
    def from_alphas(cls, alphas, strict=True):
        """Build from ``alpha_1..alpha_T``.

        ``strict=False`` admits non-strictly decreasing (e.g. constant)
        synthetic schedules used to probe degenerate coefficient cases.
        """
        alphas = np.asarray(alphas, dtype=np.float64)
        full = np.concatenate([[1.0], alphas])
        if np.any(full <= 0) or np.any(full > 1):
            raise ScheduleError("alpha values must lie in (0, 1]")
        diffs = np.diff(full)
        if strict and np.any(diffs >= 0):
            raise ScheduleError("alpha must be strictly decreasing")
        if np.any(diffs > 0):
            raise ScheduleError("alpha must be non-increasing")
        betas = 1.0 - full[1:] / full[:-1]
        return cls(T=int(alphas.size), beta=_frozen(betas), alpha=_frozen(full))

    def sqrt_alpha(self, t) -> float:
        return math.sqrt(self.alpha[t])

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(f"T={self.T};".encode())
        h.update(np.ascontiguousarray(self.beta, dtype="<f8").tobytes())
        return h.hexdigest()[:16]


def make_linear_beta(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    if int(T) != T or T < 2:
        raise ScheduleError(f"T must be an integer >= 2, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ScheduleError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return NoiseSchedule.from_betas(np.linspace(beta_start, beta_end, int(T)))


def ddim_coeffs(s: NoiseSchedule, t: int, t_prev: int):
    """Return ``(a, B)`` so that a DDIM step reads ``x_prev = a*x + B*eps``."""
    if not (0 <= t_prev < t <= s.T):
        raise ScheduleError(f"need 0 <= t_prev < t <= T, got t={t}, t_prev={t_prev}")
    at, ap = float(s.alpha[t]), float(s.alpha[t_prev])
    a = math.sqrt(ap / at)
    # written with a so that equal alphas give B == 0 exactly
    B = math.sqrt(1.0 - ap) - a * math.sqrt(1.0 - at)
    return a, B


@dataclass(frozen=True)
class StepPlan:
    """Strictly decreasing executed timesteps ``t_N > ... > t_1 >= 1``.

    The trajectory ends at timestep 0; ``timesteps`` includes that end point.
    """

    steps: tuple
    T: int
    _index: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        steps = tuple(int(v) for v in self.steps)
        if not steps:
            raise ScheduleError("step plan is empty")
        if any(a <= b for a, b in zip(steps, steps[1:])):
            raise ScheduleError("step plan must be strictly decreasing")
        if steps[0] > self.T or steps[-1] < 1:
            raise ScheduleError("step plan entries must lie in [1, T]")
        object.__setattr__(self, "steps", steps)
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(steps)})

    @property
    def N(self) -> int:
        return len(self.steps)

    def __len__(self):
        return len(self.steps)

    @property
    def timesteps(self) -> tuple:
        """State timesteps, start to end: ``steps + (0,)``."""
        return self.steps + (0,)

    def index(self, t: int) -> int:
        """Position of ``t`` in :attr:`timesteps` (0 -> ``N``)."""
        if t == 0:
            return self.N
        try:
            return self._index[t]
        except KeyError:
            raise ScheduleError(f"timestep {t} is not in the step plan") from None

    def prev(self, t: int) -> int:
        """Next smaller planned timestep (0 after the last step)."""
        i = self.index(t)
        if i >= self.N:
            raise ScheduleError("timestep 0 has no successor")
        return self.timesteps[i + 1]

    def next(self, t: int):
        """Previously executed (larger) planned timestep, or None at the start."""
        i = self.index(t)
        return None if i == 0 else self.steps[i - 1]

    def pairs(self):
        return list(zip(self.steps, self.timesteps[1:]))

    def fingerprint(self, schedule: NoiseSchedule = None) -> str:
        h = hashlib.sha256()
        if schedule is not None:
            h.update(schedule.fingerprint().encode())
        h.update((",".join(map(str, self.steps))).encode())
        return h.hexdigest()[:16]


def make_step_plan(s: NoiseSchedule, n_steps: int) -> StepPlan:
    if int(n_steps) != n_steps or not (1 <= n_steps <= s.T):
        raise ScheduleError(f"n_steps must be in [1, {s.T}], got {n_steps}")
    stride = s.T // int(n_steps)
    return StepPlan(tuple(s.T - stride * i for i in range(int(n_steps))), s.T)
