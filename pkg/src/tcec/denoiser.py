"""Noise-prediction models and Jacobian tooling.

Two model kinds are provided:

``analytic_gaussian``
    The exact MMSE noise predictor for data ``x0 ~ N(m, s^2 I)`` under
    ``x_t = sqrt(alpha_t) x0 + sqrt(1 - alpha_t) eps``.  It is affine in ``x``,
    so its Jacobian ``c_t I`` is known in closed form and first-order Taylor
    expansions are exact.
``seeded_mlp``
    An untrained tanh MLP with seeded weights and a sinusoidal timestep
    embedding.  Used to exercise the theory under nonlinearity.
"""

from dataclasses import dataclass
from functools import lru_cache
import math

import numpy as np

from .errors import ShapeError, ScheduleError
from .latents import l2_norm

KINDS = ("analytic_gaussian", "seeded_mlp")
EMBED_DIM = 16
DEFAULT_MAX_DIM = 512


@dataclass(frozen=True)
class DenoiserSpec:
    kind: str = "analytic_gaussian"
    shape: tuple = (4, 8, 8)
    mean: float = 0.5
    scale: float = 0.5
    seed: int = 0
    width: int = 64
    depth: int = 2
    output_scale: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown denoiser kind {self.kind!r}")
        object.__setattr__(self, "shape", tuple(int(v) for v in self.shape))
        if len(self.shape) != 3 or min(self.shape) < 1:
            raise ShapeError(f"bad latent shape {self.shape}")
        if self.kind == "analytic_gaussian" and not self.scale > 0:
            raise ValueError("analytic_gaussian needs scale > 0")
        if self.kind == "seeded_mlp" and (self.width < 1 or self.depth < 1):
            raise ValueError("seeded_mlp needs width >= 1 and depth >= 1")

    @property
    def dim(self) -> int:
        c, h, w = self.shape
        return c * h * w


@dataclass(frozen=True, eq=False)
class JacobianEstimate:
    matrix: np.ndarray
    t: int
    fd_step: float = 0.0


def _check_t(s, t):
    if not (1 <= t <= s.T):
        raise ScheduleError(f"timestep {t} outside [1, {s.T}]")


def _check_x(spec, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape != spec.shape:
        raise ShapeError(f"expected latent shape {spec.shape}, got {x.shape}")
    return x


def gaussian_gain(spec: DenoiserSpec, s, t: int) -> float:
    """Closed-form slope ``c_t`` of the analytic Gaussian predictor."""
    at = float(s.alpha[t])
    return math.sqrt(1.0 - at) / (at * spec.scale ** 2 + 1.0 - at)


def timestep_embedding(t: int, T: int, dim: int = EMBED_DIM) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    arg = (t / T) * 1000.0 * freqs
    return np.concatenate([np.sin(arg), np.cos(arg)])


@lru_cache(maxsize=32)
def mlp_weights(spec: DenoiserSpec):
    """Seeded ``[(W, b), ...]``: depth hidden layers then a linear readout."""
    rng = np.random.default_rng(spec.seed)
    sizes = [spec.dim + EMBED_DIM] + [spec.width] * spec.depth + [spec.dim]
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        W = rng.standard_normal((fan_out, fan_in)) / math.sqrt(fan_in)
        b = 0.1 * rng.standard_normal(fan_out)
        W.flags.writeable = False
        b.flags.writeable = False
        layers.append((W, b))
    return tuple(layers)


def mlp_forward(layers, x_flat, emb, output_scale, act_quant=None):
    """Forward pass; ``act_quant`` (if given) is applied to every layer input
    and to the final output."""
    q = act_quant if act_quant is not None else (lambda v: v)
    h = np.concatenate([x_flat, emb])
    for W, b in layers[:-1]:
        h = np.tanh(W @ q(h) + b)
    W, b = layers[-1]
    return q(output_scale * (W @ q(h) + b))


def predict(spec: DenoiserSpec, x, t: int, s) -> np.ndarray:
    """Full-precision noise estimate at ``(x, t)``."""
    _check_t(s, t)
    x = _check_x(spec, x)
    if spec.kind == "analytic_gaussian":
        c = gaussian_gain(spec, s, t)
        return c * (x - math.sqrt(float(s.alpha[t])) * spec.mean)
    out = mlp_forward(mlp_weights(spec), x.ravel(),
                      timestep_embedding(t, s.T), spec.output_scale)
    return out.reshape(spec.shape)


def analytic_jacobian(spec: DenoiserSpec, t: int, s) -> JacobianEstimate:
    if spec.kind != "analytic_gaussian":
        raise ValueError("closed-form Jacobian only exists for analytic_gaussian")
    _check_t(s, t)
    return JacobianEstimate(gaussian_gain(spec, s, t) * np.eye(spec.dim), t, 0.0)


def fd_jacobian(fn, x, h: float, max_dim: int = DEFAULT_MAX_DIM) -> np.ndarray:
    """Central-difference Jacobian of ``fn`` (latent -> latent) at ``x``.

    ``h`` is an absolute step.  Column ``j`` is ``(fn(x+h e_j) - fn(x-h e_j)) / 2h``.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    if n > max_dim:
        raise ValueError(f"Jacobian dimension {n} exceeds cap {max_dim}")
    flat = x.ravel()
    out = np.empty((np.asarray(fn(x)).size, n))
    for j in range(n):
        xp = flat.copy()
        xm = flat.copy()
        xp[j] += h
        xm[j] -= h
        fp = np.asarray(fn(xp.reshape(x.shape)), dtype=np.float64).ravel()
        fm = np.asarray(fn(xm.reshape(x.shape)), dtype=np.float64).ravel()
        out[:, j] = (fp - fm) / (2.0 * h)
    return out


def absolute_step(x, h_rel: float) -> float:
    """Scale a relative FD step by the RMS of ``x`` (falls back to ``h_rel``)."""
    x = np.asarray(x, dtype=np.float64)
    rms = l2_norm(x) / math.sqrt(x.size)
    return h_rel * rms if rms > 0 else h_rel


def jacobian_fd(spec: DenoiserSpec, x, t: int, s, h: float = 1e-4,
                max_dim: int = DEFAULT_MAX_DIM) -> JacobianEstimate:
    """Finite-difference Jacobian of :func:`predict`; ``h`` is relative to RMS(x)."""
    x = _check_x(spec, x)
    _check_t(s, t)
    if spec.dim > max_dim:
        raise ValueError(f"Jacobian dimension {spec.dim} exceeds cap {max_dim}")
    step = absolute_step(x, h)
    mat = fd_jacobian(lambda z: predict(spec, z, t, s), x, step, max_dim)
    return JacobianEstimate(mat, t, step)


def spectral_norm(mat, iters: int = 100, seed: int = 0) -> float:
    """Largest singular value by power iteration on ``M^T M``."""
    mat = np.asarray(mat, dtype=np.float64)
    if not np.any(mat):
        return 0.0
    v = np.random.default_rng(seed).standard_normal(mat.shape[1])
    v /= np.linalg.norm(v)
    sigma2 = 0.0
    for _ in range(iters):
        w = mat.T @ (mat @ v)
        sigma2 = float(np.linalg.norm(w))
        if sigma2 == 0.0:
            return 0.0
        v = w / sigma2
    # Rayleigh quotient on the converged vector is sharper than the growth ratio
    return float(np.linalg.norm(mat @ v))


def jacobian_norm(j: JacobianEstimate) -> float:
    return spectral_norm(j.matrix)
