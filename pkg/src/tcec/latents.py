"""Latent tensors and the fidelity metrics computed on them.

A latent is a plain ``float64`` numpy array of shape ``(C, H, W)``.  Helpers
here validate shape and finiteness but do not wrap the array.
"""

from dataclasses import dataclass
import math

import numpy as np

from .errors import IdenticalInputs, ShapeError


def as_latent(x, shape=None) -> np.ndarray:
    """Return ``x`` as a finite float64 ``(C, H, W)`` array."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 3:
        raise ShapeError(f"latent must be 3-D (C, H, W), got shape {arr.shape}")
    if shape is not None and arr.shape != tuple(shape):
        raise ShapeError(f"expected latent shape {tuple(shape)}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("latent contains non-finite values")
    return arr


def zeros(shape) -> np.ndarray:
    return np.zeros(tuple(shape), dtype=np.float64)


def _check_same_shape(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def l2_norm(x) -> float:
    flat = np.asarray(x, dtype=np.float64).ravel()
    return float(math.sqrt(float(np.dot(flat, flat))))


def mse(a, b) -> float:
    a, b = _check_same_shape(a, b)
    d = (a - b).ravel()
    if d.size == 0:
        raise ShapeError("mse of empty latents")
    return float(np.dot(d, d)) / d.size


def psnr(reference, test) -> float:
    """Peak signal-to-noise ratio in dB.

    The dynamic range is the reference's own ``max - min``.  Raises
    :class:`IdenticalInputs` when the inputs are equal; callers that tabulate
    results report ``+inf`` in that case.
    """
    reference, test = _check_same_shape(reference, test)
    err = mse(reference, test)
    if err == 0.0:
        raise IdenticalInputs("psnr undefined for identical inputs")
    rng = float(reference.max() - reference.min())
    return 10.0 * math.log10(rng * rng / err)


def psnr_or_inf(reference, test) -> float:
    try:
        return psnr(reference, test)
    except IdenticalInputs:
        return math.inf


@dataclass(frozen=True)
class MetricSample:
    step_index: int
    t: int
    mse: float
    psnr: float
    delta_norm: float
    eps_norm: float
    correction_norm: float = 0.0
