"""DDIM and second-order DPM-Solver++ samplers.

Each sampler runs in one of the variants

* ``fp``          full-precision model,
* ``quant``       quantized model, errors left to propagate,
* ``tcec``        quantized model plus the windowed correction, with the
                  per-step error estimated as ``K_t * mu_q``,
* ``tcec-oracle`` same correction fed with the true injected error.

Trajectories are deterministic given ``(x_T, seed)``.  Gaussian error models
draw exactly one sample per step from the stream ``default_rng([seed, 1])``,
so ``quant`` and ``tcec`` runs of one seed see the same error sequence.
"""

from collections import deque
from dataclasses import dataclass
import math

import numpy as np

from .denoiser import (DenoiserSpec, analytic_jacobian, absolute_step,
                       fd_jacobian, predict)
from .errors import NumericalAbort, ScheduleError, ShapeError
from .propagation import correction_term
from .quantizer import ErrorModel, QuantizedDenoiser
from .schedule import ddim_coeffs

VARIANTS = ("fp", "quant", "tcec", "tcec-oracle")
SOLVERS = ("ddim", "dpmpp2")


@dataclass(eq=False)
class TrajectoryRecord:
    plan: object
    states: np.ndarray           # (N+1, C, H, W); states[0] is x_T
    denoiser_outputs: np.ndarray  # (N, C, H, W) model output used by the update
    injected_eps: np.ndarray     # (N, C, H, W) eps_t in noise-prediction space
    corrections: np.ndarray      # (N, C, H, W) Delta_t added to the update
    seed: int
    variant: str
    solver: str = "ddim"

    @property
    def final(self):
        return self.states[-1]

    def state_at(self, t):
        return self.states[self.plan.index(t)]


def _as_quantized(model) -> QuantizedDenoiser:
    if isinstance(model, QuantizedDenoiser):
        return model
    if isinstance(model, DenoiserSpec):
        return QuantizedDenoiser(model, ErrorModel("zero"))
    raise TypeError(f"expected DenoiserSpec or QuantizedDenoiser, got {type(model)}")


def _error_stream(seed):
    return np.random.default_rng([int(seed), 1])


def _watchdog(x, i, t):
    if not np.all(np.isfinite(x)):
        raise NumericalAbort(i, t)


def _check_K(K, s, plan):
    if tuple(K.timesteps) != tuple(plan.steps):
        raise ScheduleError("scaling matrix rows do not match the step plan")
    fp = getattr(K, "plan_fingerprint", None)
    if fp and fp != plan.fingerprint(s):
        raise ScheduleError("scaling matrix was calibrated for a different schedule/plan")


def _record(plan, x_T, seed, variant, solver):
    n = plan.N
    shape = np.shape(x_T)
    return TrajectoryRecord(
        plan=plan,
        states=np.zeros((n + 1,) + shape),
        denoiser_outputs=np.zeros((n,) + shape),
        injected_eps=np.zeros((n,) + shape),
        corrections=np.zeros((n,) + shape),
        seed=int(seed), variant=variant, solver=solver)


# ---------------------------------------------------------------- DDIM

def ddim_step(x, eps_hat, s, t: int, t_prev: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    if x.shape != eps_hat.shape:
        raise ShapeError(f"shape mismatch: {x.shape} vs {eps_hat.shape}")
    a, B = ddim_coeffs(s, t, t_prev)
    return a * x + B * eps_hat


def run_ddim(model, s, plan, x_T, seed: int = 0, variant: str = "quant") -> TrajectoryRecord:
    """Plain DDIM in the ``fp`` or ``quant`` variant."""
    if variant not in ("fp", "quant"):
        raise ValueError(f"run_ddim handles fp/quant, got {variant!r}")
    qd = _as_quantized(model)
    x = np.array(x_T, dtype=np.float64)
    rec = _record(plan, x, seed, variant, "ddim")
    rec.states[0] = x
    rng = _error_stream(seed)
    for i, (t, tp) in enumerate(plan.pairs()):
        if variant == "fp":
            out = predict(qd.spec, x, t, s)
        else:
            _, out, eps = qd.evaluate(x, t, s, rng)
            rec.injected_eps[i] = eps
        rec.denoiser_outputs[i] = out
        x = ddim_step(x, out, s, t, tp)
        _watchdog(x, i, t)
        rec.states[i + 1] = x
    return rec


def run_ddim_tcec(model, K, s, plan, x_T, seed: int = 0, mode: str = "inverse",
                  m: int = 1, oracle: bool = False) -> TrajectoryRecord:
    """DDIM with the windowed cumulative-error correction.

    At step ``t`` the error estimate ``K_t * mu_q`` is combined with the cached
    estimates of the ``m`` previously executed steps (ring buffer of depth
    ``m``) into ``Delta_t``, which is added to the DDIM update.  ``mode``
    selects the window weights (see :func:`tcec.propagation.correction_term`).
    """
    qd = _as_quantized(model)
    if not oracle:
        _check_K(K, s, plan)
    x = np.array(x_T, dtype=np.float64)
    rec = _record(plan, x, seed, "tcec-oracle" if oracle else "tcec", "ddim")
    rec.states[0] = x
    rng = _error_stream(seed)
    cache = deque(maxlen=m)
    for i, (t, tp) in enumerate(plan.pairs()):
        _, mu_q, eps = qd.evaluate(x, t, s, rng)
        eps_hat = eps if oracle else K.estimate(mu_q, t)
        window = {t: eps_hat}
        window.update(cache)
        delta = correction_term(window, s, plan, t, m=m, mode=mode)
        cache.appendleft((t, eps_hat))
        x = ddim_step(x, mu_q, s, t, tp) + delta
        _watchdog(x, i, t)
        rec.states[i + 1] = x
        rec.denoiser_outputs[i] = mu_q
        rec.injected_eps[i] = eps
        rec.corrections[i] = delta
    return rec


# ---------------------------------------------------------------- DPM-Solver++

def stage_timestep(t_prev: int) -> int:
    # the noise-prediction network is undefined at t = 0 (alpha_0 = 1)
    return max(int(t_prev), 1)


def step_size(s, t: int, t_prev: int) -> float:
    return (t - t_prev) / s.T


def noise_std(s, t: int) -> float:
    return math.sqrt(1.0 - float(s.alpha[t]))


def f_theta(spec, x, t: int, s) -> np.ndarray:
    """Drift ``f = -mu / sqrt(1 - alpha_t)``."""
    return -predict(spec, x, t, s) / noise_std(s, t)


def dpmpp2_step(x, f, t, dt: float, t_mid) -> np.ndarray:
    """``x + dt/2 [f(x, t) + f(x + dt f(x, t), t_mid)]`` for a callable ``f``."""
    x = np.asarray(x, dtype=np.float64)
    f1 = np.asarray(f(x, t), dtype=np.float64)
    f2 = np.asarray(f(x + dt * f1, t_mid), dtype=np.float64)
    return x + (dt / 2.0) * (f1 + f2)


@dataclass(frozen=True, eq=False)
class DpmCoeffs:
    """Linearised DPM++ step ``delta' = A delta + B eps_f``.

    ``B`` differentiates the step with respect to an error added to both stage
    outputs, so it carries the Jacobian at the second-stage point.
    ``B_first_stage_jacobian`` is the same bracket built with the first-stage
    Jacobian instead; it is kept for comparison.
    """

    t: int
    t_prev: int
    dt: float
    A: np.ndarray
    B: np.ndarray
    B_first_stage_jacobian: np.ndarray
    jf_norm: float        # ||J_f||_F at the first stage
    lambda_decay: float = 0.0


@dataclass(frozen=True, eq=False)
class LowRank:
    left: np.ndarray   # (n, r) = U_r diag(S_r)
    right: np.ndarray  # (r, n) = V_r^T
    error: float       # Frobenius norm of the residual

    def matrix(self):
        return self.left @ self.right


def jacobian_lowrank(j, r: int) -> LowRank:
    """Best rank-``r`` approximation by dense SVD."""
    M = np.asarray(getattr(j, "matrix", j), dtype=np.float64)
    n = min(M.shape)
    if not 1 <= r <= n:
        raise ValueError(f"rank must be in [1, {n}], got {r}")
    U, S, Vt = np.linalg.svd(M)
    left = U[:, :r] * S[:r]
    right = Vt[:r]
    return LowRank(left, right, float(np.linalg.norm(M - left @ right)))


def _mu_jacobian(spec, x, t, s, h):
    if spec.kind == "analytic_gaussian":
        return analytic_jacobian(spec, t, s).matrix
    return fd_jacobian(lambda z: predict(spec, z, t, s), x, absolute_step(x, h))


def f_jacobian(spec, x, t, s, h: float = 1e-4) -> np.ndarray:
    return -_mu_jacobian(spec, x, t, s, h) / noise_std(s, t)


def dpmpp_prop_coeffs(spec, x, t: int, t_prev: int, s, dt=None, rank=None,
                      h: float = 1e-4, lambda_decay: float = 0.0,
                      jacobians=None) -> DpmCoeffs:
    """Propagation matrices of one DPM++ step::

        A = I + dt/2 (J1 + J2 (I + dt J1))
        B = dt/2 (I + (I + dt J2))

    with ``J1`` the drift Jacobian at ``(x, t)`` and ``J2`` at the second
    stage point.  ``jacobians=(J1, J2)`` overrides the computed ones; ``rank``
    replaces both by truncated-SVD approximations.
    """
    x = np.asarray(x, dtype=np.float64)
    dt = step_size(s, t, t_prev) if dt is None else float(dt)
    t_mid = stage_timestep(t_prev)
    n = x.size
    if jacobians is not None:
        J1, J2 = (np.asarray(J, dtype=np.float64) for J in jacobians)
    else:
        J1 = f_jacobian(spec, x, t, s, h)
        x_mid = x + dt * f_theta(spec, x, t, s)
        J2 = f_jacobian(spec, x_mid, t_mid, s, h)
    if rank is not None:
        J1 = jacobian_lowrank(J1, rank).matrix()
        J2 = jacobian_lowrank(J2, rank).matrix()
    I = np.eye(n)
    A = I + (dt / 2.0) * (J1 + J2 @ (I + dt * J1))
    B = (dt / 2.0) * (I + (I + dt * J2))
    B1 = (dt / 2.0) * (I + (I + dt * J1))
    return DpmCoeffs(t, t_prev, dt, A, B, B1, float(np.linalg.norm(J1)), lambda_decay)


def dpm_temporal_weights(s, plan, t: int, window, jf_norms=None, lambda_decay=0.0):
    """``gamma_k = sqrt(alpha_{prev k}) / sqrt(alpha_{prev t}) * exp(-lam sum_j ||J_fj||_F)``
    for ``k`` in ``window`` (ordered ``t, next(t), ...``)."""
    den = math.sqrt(float(s.alpha[plan.prev(t)]))
    out = []
    acc = 0.0
    for k in window:
        if lambda_decay:
            acc += float(jf_norms[k])
        decay = math.exp(-lambda_decay * acc) if lambda_decay else 1.0
        out.append(math.sqrt(float(s.alpha[plan.prev(k)])) / den * decay)
    return out


def _dpm_stage_two(qd, x_mid, t, t_mid, s, eps1):
    """Quantized second-stage output; the step's error model (row ``t``) applies."""
    spec, err = qd.spec, qd.error
    mu2 = predict(spec, x_mid, t_mid, s)
    if err.kind == "zero":
        return mu2
    if err.kind == "gaussian":
        return mu2 + eps1
    if err.kind == "scaled_output":
        row = err.kstar_row(t).reshape((-1,) + (1,) * (mu2.ndim - 1))
        return mu2 / (1.0 - row)
    return qd.quantized_output(x_mid, t_mid, s)


def _dpm_step(qd, x, t, tp, s, rng, variant):
    dt = step_size(s, t, tp)
    t_mid = stage_timestep(tp)
    if variant == "fp":
        mu1 = predict(qd.spec, x, t, s)
        eps1 = np.zeros_like(mu1)
        out1 = mu1
    else:
        _, out1, eps1 = qd.evaluate(x, t, s, rng)
    f1 = -out1 / noise_std(s, t)
    x_mid = x + dt * f1
    if variant == "fp":
        out2 = predict(qd.spec, x_mid, t_mid, s)
    else:
        out2 = _dpm_stage_two(qd, x_mid, t, t_mid, s, eps1)
    f2 = -out2 / noise_std(s, t_mid)
    return x + (dt / 2.0) * (f1 + f2), out1, eps1, dt


def run_dpmpp(model, s, plan, x_T, seed: int = 0, variant: str = "quant") -> TrajectoryRecord:
    if variant not in ("fp", "quant"):
        raise ValueError(f"run_dpmpp handles fp/quant, got {variant!r}")
    qd = _as_quantized(model)
    x = np.array(x_T, dtype=np.float64)
    rec = _record(plan, x, seed, variant, "dpmpp2")
    rec.states[0] = x
    rng = _error_stream(seed)
    for i, (t, tp) in enumerate(plan.pairs()):
        x, out1, eps1, _ = _dpm_step(qd, x, t, tp, s, rng, variant)
        _watchdog(x, i, t)
        rec.states[i + 1] = x
        rec.denoiser_outputs[i] = out1
        rec.injected_eps[i] = eps1
    return rec


def run_dpmpp_tcec(model, K, s, plan, x_T, seed: int = 0, lambda_decay: float = 0.0,
                   m: int = 2, use_jacobian: bool = False, oracle: bool = False,
                   h: float = 1e-4) -> TrajectoryRecord:
    """DPM++ (2nd order) with ``Delta_t = -sum_k gamma_k B_k eps_hat_k``.

    The error estimate is taken from the first-stage output only and mapped to
    drift space (``eps_f = -K_t * mu_q / sqrt(1 - alpha_t)``).  ``B_k`` is
    ``dt_k I`` (Jacobian dropped) unless ``use_jacobian``; Jacobian norms are
    only computed when needed (``lambda_decay > 0`` or ``use_jacobian``).
    """
    if lambda_decay < 0:
        raise ValueError("lambda_decay must be >= 0")
    qd = _as_quantized(model)
    if not oracle:
        _check_K(K, s, plan)
    need_j = use_jacobian or lambda_decay > 0
    x = np.array(x_T, dtype=np.float64)
    rec = _record(plan, x, seed, "tcec-oracle" if oracle else "tcec", "dpmpp2")
    rec.states[0] = x
    rng = _error_stream(seed)
    cache = deque(maxlen=m)  # (t, B_t @ eps_f_hat, ||J_f||_F)
    for i, (t, tp) in enumerate(plan.pairs()):
        x_in = x
        x, out1, eps1, dt = _dpm_step(qd, x_in, t, tp, s, rng, "quant")
        eps_mu = eps1 if oracle else K.estimate(out1, t)
        eps_f = -eps_mu / noise_std(s, t)
        jf = 0.0
        if need_j:
            co = dpmpp_prop_coeffs(qd.spec, x_in, t, tp, s, h=h)
            jf = co.jf_norm
            b_eps = (co.B @ eps_f.ravel()).reshape(eps_f.shape) if use_jacobian else dt * eps_f
        else:
            b_eps = dt * eps_f
        entries = [(t, b_eps, jf)] + list(cache)
        window = [k for k, _, _ in entries]
        gammas = dpm_temporal_weights(s, plan, t, window,
                                      {k: n for k, _, n in entries}, lambda_decay)
        delta = np.zeros_like(x)
        for g, (_, be, _) in zip(gammas, entries):
            delta = delta - g * be
        cache.appendleft((t, b_eps, jf))
        x = x + delta
        _watchdog(x, i, t)
        rec.states[i + 1] = x
        rec.denoiser_outputs[i] = out1
        rec.injected_eps[i] = eps1
        rec.corrections[i] = delta
    return rec


def run_trajectory(solver, variant, model, s, plan, x_T, seed=0, K=None, **kw):
    """Dispatch on ``(solver, variant)``."""
    if solver not in SOLVERS:
        raise ValueError(f"unknown solver {solver!r}")
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    if solver == "ddim":
        if variant in ("fp", "quant"):
            return run_ddim(model, s, plan, x_T, seed, variant)
        return run_ddim_tcec(model, K, s, plan, x_T, seed,
                             oracle=variant == "tcec-oracle", **kw)
    if variant in ("fp", "quant"):
        return run_dpmpp(model, s, plan, x_T, seed, variant)
    return run_dpmpp_tcec(model, K, s, plan, x_T, seed,
                          oracle=variant == "tcec-oracle", **kw)
