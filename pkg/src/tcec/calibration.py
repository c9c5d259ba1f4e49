"""Offline fit of the timestep-conditioned channel-wise scaling matrix ``K``.

The per-step error is modelled as ``eps_t = K_t * mu_q`` (one coefficient per
channel, broadcast over space).  ``K`` minimises, independently per
``(t, channel)``, the ridge objective::

    sum [(1 - K) mu_q - mu]^2 + lambda1 K^2

with sums pooled over spatial positions and calibration samples.  Its
stationary point is::

    K = sum(mu_q^2 - mu mu_q) / (sum(mu_q^2) + lambda1 + gamma)

where ``gamma = 1e-8`` guards the division.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
import logging

import numpy as np

from .denoiser import predict
from .errors import DegenerateCache, MissingRow, ScheduleError
from .schedule import ddim_coeffs
from .solvers import _dpm_step

log = logging.getLogger(__name__)

GAMMA = 1e-8
KFILE_VERSION = 1
_SUM_AXES = (1, 3, 4)  # samples, H, W of a (T, S, C, H, W) cache


@dataclass(eq=False)
class CalibrationCache:
    """Paired outputs ``mu`` (full precision) and ``mu_q`` (quantized), both
    evaluated on the quantized trajectory's states.  Arrays are
    ``(n_timesteps, n_samples, C, H, W)``; row ``i`` belongs to ``timesteps[i]``."""

    timesteps: tuple
    mu: np.ndarray
    mu_q: np.ndarray

    def __post_init__(self):
        if self.mu.shape != self.mu_q.shape or self.mu.ndim != 5:
            raise ValueError("mu and mu_q must share a (T, S, C, H, W) shape")
        if self.mu.shape[0] != len(self.timesteps):
            raise ValueError("one cache row per timestep required")

    @property
    def n_samples(self):
        return self.mu.shape[1]

    def subset(self, samples):
        return CalibrationCache(self.timesteps, self.mu[:, samples], self.mu_q[:, samples])


@dataclass(eq=False)
class ScalingMatrix:
    timesteps: tuple
    values: np.ndarray  # (n_timesteps, C)
    lambda1: float
    gamma: float = GAMMA
    schedule_fingerprint: str = ""
    plan_fingerprint: str = ""

    def __post_init__(self):
        self.timesteps = tuple(int(t) for t in self.timesteps)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape[0] != len(self.timesteps):
            raise ValueError("one K row per timestep required")
        if self.lambda1 < 0:
            raise ValueError("lambda1 must be >= 0")
        self._rows = {t: i for i, t in enumerate(self.timesteps)}

    @property
    def channels(self):
        return self.values.shape[1]

    def row(self, t):
        try:
            return self.values[self._rows[t]]
        except KeyError:
            raise MissingRow(f"no K row for timestep {t}") from None

    def estimate(self, mu_q, t):
        return estimate_eps(self, mu_q, t)

    def to_text(self) -> str:
        lines = [
            "# tcec channel-wise scaling matrix",
            f"version = {KFILE_VERSION}",
            f"rows = {len(self.timesteps)}",
            f"channels = {self.channels}",
            f"lambda1 = {self.lambda1:.17g}",
            f"gamma = {self.gamma:.17g}",
            f"schedule = {self.schedule_fingerprint}",
            f"plan = {self.plan_fingerprint}",
        ]
        for t, row in zip(self.timesteps, self.values):
            lines.append(f"{t}: " + " ".join(f"{v:.17g}" for v in row))
        return "\n".join(lines) + "\n"

    def write(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_text())

    @classmethod
    def from_text(cls, text: str):
        header = {}
        ts, rows = [], []
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" in line:
                key, _, val = line.partition("=")
                header[key.strip()] = val.strip()
                continue
            t, _, vals = line.partition(":")
            ts.append(int(t))
            rows.append([float(v) for v in vals.split()])
        if int(header.get("version", -1)) != KFILE_VERSION:
            raise ValueError(f"unsupported K file version {header.get('version')!r}")
        if len(ts) != int(header["rows"]):
            raise ValueError("K file row count does not match its header")
        values = np.array(rows, dtype=np.float64).reshape(len(ts), int(header["channels"]))
        return cls(tuple(ts), values, float(header["lambda1"]), float(header["gamma"]),
                   header.get("schedule", ""), header.get("plan", ""))

    @classmethod
    def read(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())


def estimate_eps(K: ScalingMatrix, mu_q, t: int) -> np.ndarray:
    mu_q = np.asarray(mu_q, dtype=np.float64)
    row = K.row(t)
    return row.reshape((-1,) + (1,) * (mu_q.ndim - 1)) * mu_q


def _collect_one(qd, plan, s, seed, j, solver):
    rng = np.random.default_rng([int(seed), 3, j])
    x = np.random.default_rng([int(seed), 2, j]).standard_normal(qd.spec.shape)
    mus, mqs = [], []
    for t, tp in plan.pairs():
        if solver == "ddim":
            mu, mu_q, _ = qd.evaluate(x, t, s, rng)
            a, B = ddim_coeffs(s, t, tp)
            x = a * x + B * mu_q
        else:
            mu = predict(qd.spec, x, t, s)
            x, mu_q, _, _ = _dpm_step(qd, x, t, tp, s, rng, "quant")
        mus.append(mu)
        mqs.append(mu_q)
    return np.stack(mus), np.stack(mqs)


def collect_cache(qd, n_samples: int, plan, s, seed: int = 0, solver: str = "ddim",
                  threads: int = 1) -> CalibrationCache:
    """Run the quantized sampler from ``n_samples`` seeded ``x_T`` and record
    ``(mu(x~_t), mu_q(x~_t))`` at every planned step."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    work = lambda j: _collect_one(qd, plan, s, seed, j, solver)  # noqa: E731
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, range(n_samples)))
    else:
        results = [work(j) for j in range(n_samples)]
    mu = np.stack([r[0] for r in results], axis=1)
    mu_q = np.stack([r[1] for r in results], axis=1)
    return CalibrationCache(tuple(plan.steps), mu, mu_q)


def _sums(cache):
    mq = cache.mu_q
    num = np.sum(mq * mq - cache.mu * mq, axis=_SUM_AXES)
    den = np.sum(mq * mq, axis=_SUM_AXES)
    return num, den


def solve_K(cache: CalibrationCache, lambda1: float, gamma: float = GAMMA,
            schedule_fingerprint: str = "", plan_fingerprint: str = "") -> ScalingMatrix:
    if lambda1 < 0:
        raise ValueError("lambda1 must be >= 0")
    num, den = _sums(cache)
    return ScalingMatrix(cache.timesteps, num / (den + lambda1 + gamma), float(lambda1),
                         gamma, schedule_fingerprint, plan_fingerprint)


def objective(cache: CalibrationCache, K_values, lambda1: float) -> float:
    """Ridge loss of a full ``(T, C)`` coefficient array."""
    Kb = np.asarray(K_values, dtype=np.float64)[:, None, :, None, None]
    r = (1.0 - Kb) * cache.mu_q - cache.mu
    return float(np.sum(r * r) + lambda1 * np.sum(np.asarray(K_values) ** 2))


def stationarity_residual(cache: CalibrationCache, K: ScalingMatrix) -> float:
    """Largest ``|sum[(1-K) mu_q - mu] mu_q - (lambda1 + gamma) K|`` over ``(t, c)``.

    Zero (up to rounding) exactly when ``K`` is the stationary point of the
    objective it was solved for, including the ``gamma`` guard.
    """
    Kv = K.values
    Kb = Kv[:, None, :, None, None]
    g = np.sum(((1.0 - Kb) * cache.mu_q - cache.mu) * cache.mu_q, axis=_SUM_AXES)
    return float(np.max(np.abs(g - (K.lambda1 + K.gamma) * Kv)))


def lambda_empirical(cache: CalibrationCache) -> float:
    """``0.01 * mean(mu_q^2) / var(mu)`` pooled over the whole cache."""
    var = float(np.var(cache.mu))
    if var == 0.0:
        raise DegenerateCache("var(mu) is zero over the calibration cache")
    return 0.01 * float(np.mean(cache.mu_q * cache.mu_q)) / var


def holdout_score(cache: CalibrationCache, K: ScalingMatrix) -> float:
    Kb = K.values[:, None, :, None, None]
    r = (1.0 - Kb) * cache.mu_q - cache.mu
    return float(np.sum(r * r))


def grid_search_lambda(cache: CalibrationCache, grid, holdout_fraction: float = 0.25):
    """Pick ``lambda1`` from ``grid`` by holdout reconstruction error.

    The last ``round(n * holdout_fraction)`` samples (at least one) form the
    holdout split.  Ties go to the larger ``lambda1``.  Returns
    ``(lambda1, [(lambda1, score), ...])`` in first-seen grid order.
    """
    grid = list(dict.fromkeys(float(g) for g in grid))
    if not grid:
        raise ValueError("empty lambda grid")
    if any(g < 0 for g in grid):
        raise ValueError("lambda candidates must be >= 0")
    if not 0 < holdout_fraction < 1:
        raise ValueError("holdout_fraction must be in (0, 1)")
    n = cache.n_samples
    if n < 2:
        raise ValueError("grid search needs at least 2 calibration samples")
    n_hold = min(n - 1, max(1, int(round(n * holdout_fraction))))
    fit = cache.subset(slice(0, n - n_hold))
    hold = cache.subset(slice(n - n_hold, n))
    table = [(lam, holdout_score(hold, solve_K(fit, lam))) for lam in grid]
    best_lam, best = None, None
    for lam, score in sorted(table, key=lambda p: -p[0]):
        if best is None or score < best:
            best_lam, best = lam, score
    return best_lam, table


def check_plan(K: ScalingMatrix, plan, s=None):
    if tuple(K.timesteps) != tuple(plan.steps):
        raise ScheduleError("K rows do not match the step plan")
    if s is not None and K.plan_fingerprint and K.plan_fingerprint != plan.fingerprint(s):
        raise ScheduleError("K was calibrated for a different schedule/plan")
