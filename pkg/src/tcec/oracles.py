"""Independent reference computations used by ``verify`` and the tests.

Each oracle recomputes a quantity the straightforward (slow) way, straight
from the raw schedule arrays, so it shares no code path with the fast
implementation it checks.
"""

import math

import numpy as np
from scipy.optimize import minimize_scalar


def plan_neighbours(steps):
    """``{t: t_prev}`` for a decreasing step list ending implicitly at 0."""
    steps = list(steps)
    return {t: (steps[i + 1] if i + 1 < len(steps) else 0) for i, t in enumerate(steps)}


def brute_force_weight(alpha, steps, t, k, mode="recursion"):
    """Multiply per-step ratios one at a time over planned steps ``t <= j < k``.

    ``recursion`` multiplies ``sqrt(alpha_prev(j) / alpha_j)``; ``inverse`` the
    reciprocals.
    """
    steps = list(steps)
    i_k, i_t = steps.index(k), steps.index(t)
    w = 1.0
    for i in range(i_k + 1, i_t + 1) if k != t else ():
        j = steps[i]
        jp = steps[i + 1] if i + 1 < len(steps) else 0
        r = math.sqrt(float(alpha[jp])) / math.sqrt(float(alpha[j]))
        w *= r if mode == "recursion" else 1.0 / r
    return w


def unroll(A_list, B_list, eps_list, delta0=None):
    """Iterate ``delta <- A delta + B eps`` and return every intermediate.

    ``A`` entries may be scalars or square matrices acting on flattened
    latents.
    """
    shape = np.shape(eps_list[0])
    d = np.zeros(int(np.prod(shape))) if delta0 is None else np.ravel(delta0).astype(float)
    out = []
    for A, B, e in zip(A_list, B_list, eps_list):
        e = np.ravel(e)
        d = (A @ d if np.ndim(A) == 2 else A * d) + B * e
        out.append(d.reshape(shape))
    return out


def golden_section_K(mu, mu_q, lambda1, bracket=(-10.0, 10.0), tol=1e-12):
    """Per-(t, channel) numeric minimiser of the ridge objective.

    ``mu``/``mu_q`` are ``(T, S, C, H, W)``.  The objective is evaluated as a
    raw sum of squared residuals for every trial coefficient.
    """
    T, _, C = mu.shape[:3]
    out = np.empty((T, C))
    for ti in range(T):
        for c in range(C):
            m = mu[ti, :, c].ravel()
            q = mu_q[ti, :, c].ravel()

            def loss(k):
                r = (1.0 - k) * q - m
                return float(np.sum(r * r) + lambda1 * k * k)

            res = minimize_scalar(loss, bracket=bracket, method="golden", tol=tol)
            out[ti, c] = res.x
    return out


def dpm_step_raw(f1_fn, f2_fn, x, dt, e=None):
    """One Heun-form DPM++ step with an additive error ``e`` on both stage outputs."""
    e = 0.0 if e is None else e
    f1 = f1_fn(x) + e
    f2 = f2_fn(x + dt * f1) + e
    return x + 0.5 * dt * (f1 + f2)


def fd_step_jacobians(f1_fn, f2_fn, x, dt, h=1e-6):
    """Central differences of one DPM++ step w.r.t. the state and the stage error.

    Returns ``(dPhi/dx, dPhi/de)`` as dense ``(n, n)`` matrices.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    zero = np.zeros_like(x)
    Jx = np.empty((n, n))
    Je = np.empty((n, n))
    for j in range(n):
        d = np.zeros(n)
        d[j] = h
        d = d.reshape(x.shape)
        Jx[:, j] = ((dpm_step_raw(f1_fn, f2_fn, x + d, dt, zero)
                     - dpm_step_raw(f1_fn, f2_fn, x - d, dt, zero)) / (2 * h)).ravel()
        Je[:, j] = ((dpm_step_raw(f1_fn, f2_fn, x, dt, d)
                     - dpm_step_raw(f1_fn, f2_fn, x, dt, -d)) / (2 * h)).ravel()
    return Jx, Je


def ddim_scalar(alpha_t, alpha_prev, x, eps):
    """Hand formula for one scalar DDIM step."""
    x0 = (x - math.sqrt(1 - alpha_t) * eps) / math.sqrt(alpha_t)
    return math.sqrt(alpha_prev) * x0 + math.sqrt(1 - alpha_prev) * eps
