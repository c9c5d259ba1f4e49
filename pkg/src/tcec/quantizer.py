"""Fake quantization and per-step error models.

A quantized denoiser returns ``mu_q = mu + eps_t``.  The error ``eps_t`` comes
from one of four models: real fake-quantization of the network, a synthetic
channel-wise scaling of the quantized output (``eps = K*_t * mu_q``), i.i.d.
Gaussian noise, or nothing.

Rounding is half-away-from-zero everywhere.
"""

from dataclasses import dataclass, field
import math

import numpy as np

from .denoiser import (DenoiserSpec, gaussian_gain, mlp_forward, mlp_weights,
                       predict, timestep_embedding)
from .errors import MissingRow, ShapeError

GRANULARITIES = ("per_tensor", "per_channel", "per_group")
ERROR_KINDS = ("zero", "gaussian", "scaled_output", "fake_quant")


def round_half_away(v):
    v = np.asarray(v, dtype=np.float64)
    a = np.abs(v)
    r = np.floor(a)
    r = r + (a - r >= 0.5)
    return np.copysign(r, v)


def _step_ulps(s, k):
    direction = np.inf if k > 0 else -np.inf
    for _ in range(abs(k)):
        s = np.nextafter(s, direction)
    return s


def _stable_scale(span, levels):
    """``span / levels`` nudged by a few ulps so that requantizing the
    dequantized extreme reproduces the same scale bit-exactly."""
    base = span / levels
    out = base.copy()
    pending = np.ones(base.shape, dtype=bool)
    for k in (0, 1, -1, 2, -2, 3, -3, 4, -4):
        cand = _step_ulps(base, k)
        ok = pending & ((cand * levels) / levels == cand)
        out[ok] = cand[ok]
        pending &= ~ok
        if not pending.any():
            break
    return out


def _slices(v, granularity, group_size, axis):
    """Reshape ``v`` to ``(n_slices, slice_len)`` for per-slice statistics."""
    if granularity == "per_tensor":
        return v.reshape(1, -1), v.shape, None
    if granularity == "per_channel":
        moved = np.moveaxis(v, axis, 0)
        return moved.reshape(moved.shape[0], -1), moved.shape, axis
    if granularity == "per_group":
        if not group_size or v.shape[-1] % group_size:
            raise ShapeError(
                f"group_size {group_size} does not divide axis length {v.shape[-1]}")
        return v.reshape(-1, group_size), v.shape, None
    raise ValueError(f"unknown granularity {granularity!r}")


def fake_quant(values, bits: int, granularity: str = "per_tensor",
               symmetric: bool = True, group_size=None, axis: int = 0) -> np.ndarray:
    """Uniform quantize-dequantize.

    Symmetric: ``scale = max|v| / (2^(bits-1) - 1)``; asymmetric uses the
    range ``[min(v, 0), max(v, 0)]`` over ``2^bits - 1`` levels with an integer
    zero point.  ``per_channel`` takes one scale per slice along ``axis``;
    ``per_group`` one scale per ``group_size`` run along the last axis.
    All-zero slices pass through unchanged.
    """
    if not 2 <= int(bits) <= 16:
        raise ValueError(f"bits must be in [2, 16], got {bits}")
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("fake_quant of an empty input")
    flat, shape, moved_axis = _slices(v, granularity, group_size, axis)

    if symmetric:
        qmax = float(2 ** (bits - 1) - 1)
        amax = np.max(np.abs(flat), axis=1)
        scale = _stable_scale(amax, qmax)
        safe = np.where(scale > 0, scale, 1.0)[:, None]
        q = np.clip(round_half_away(flat / safe), -qmax, qmax)
        out = np.where(scale[:, None] > 0, q * safe, flat)
    else:
        levels = float(2 ** bits - 1)
        lo = np.minimum(flat.min(axis=1), 0.0)
        hi = np.maximum(flat.max(axis=1), 0.0)
        scale = _stable_scale(hi - lo, levels)
        safe = np.where(scale > 0, scale, 1.0)
        zp = round_half_away(-lo / safe)[:, None]
        q = np.clip(round_half_away(flat / safe[:, None]) + zp, 0.0, levels)
        out = np.where(scale[:, None] > 0, (q - zp) * safe[:, None], flat)

    out = out.reshape(shape)
    if moved_axis is not None:
        out = np.moveaxis(out, 0, moved_axis)
    return out


@dataclass(frozen=True)
class QuantConfig:
    weight_bits: int = 8
    act_bits: int = 8
    granularity: str = "per_tensor"
    group_size: int = 16
    symmetric: bool = True

    def __post_init__(self):
        for name in ("weight_bits", "act_bits"):
            b = getattr(self, name)
            if not 2 <= b <= 16:
                raise ValueError(f"{name} must be in [2, 16], got {b}")
        if self.granularity not in GRANULARITIES:
            raise ValueError(f"unknown granularity {self.granularity!r}")
        if self.granularity == "per_group" and self.group_size < 1:
            raise ValueError("per_group needs group_size >= 1")


@dataclass(frozen=True, eq=False)
class ErrorModel:
    """Per-step error source.

    ``kstar`` maps planned timestep -> per-channel scale (scaled_output);
    ``sigma`` maps planned timestep -> Gaussian std (gaussian).
    """

    kind: str = "zero"
    kstar: dict = field(default_factory=dict)
    sigma: dict = field(default_factory=dict)
    quant: QuantConfig = None

    def __post_init__(self):
        if self.kind not in ERROR_KINDS:
            raise ValueError(f"unknown error kind {self.kind!r}")
        if self.kind == "fake_quant" and self.quant is None:
            raise ValueError("fake_quant error model needs a QuantConfig")
        if any(v < 0 for v in self.sigma.values()):
            raise ValueError("negative sigma_t")

    def kstar_row(self, t):
        try:
            return np.asarray(self.kstar[t], dtype=np.float64)
        except KeyError:
            raise MissingRow(f"no K* row for timestep {t}") from None

    def sigma_at(self, t):
        try:
            return float(self.sigma[t])
        except KeyError:
            raise MissingRow(f"no sigma for timestep {t}") from None


def _channel_broadcast(row, like):
    return np.asarray(row, dtype=np.float64).reshape((-1,) + (1,) * (like.ndim - 1))


def inject_error(model: ErrorModel, mu_q, t: int, rng=None) -> np.ndarray:
    """Per-step error for a given quantized output.

    ``rng`` is a seed or a ``numpy.random.Generator`` (gaussian kind only).
    """
    mu_q = np.asarray(mu_q, dtype=np.float64)
    if model.kind == "zero":
        return np.zeros_like(mu_q)
    if model.kind == "scaled_output":
        row = model.kstar_row(t)
        if row.shape[0] != mu_q.shape[0]:
            raise ShapeError(f"K* row has {row.shape[0]} channels, latent has {mu_q.shape[0]}")
        return _channel_broadcast(row, mu_q) * mu_q
    if model.kind == "gaussian":
        sig = model.sigma_at(t)
        if sig == 0.0:
            return np.zeros_like(mu_q)
        gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        return sig * gen.standard_normal(mu_q.shape)
    raise ValueError("fake_quant errors need the full-precision output; "
                     "use QuantizedDenoiser.evaluate")


class QuantizedDenoiser:
    """A full-precision denoiser paired with an error model.

    :meth:`evaluate` returns ``(mu, mu_q, eps)`` at the same input.
    """

    def __init__(self, spec: DenoiserSpec, error: ErrorModel):
        self.spec = spec
        self.error = error
        self._qlayers = None
        if error.kind == "fake_quant" and spec.kind == "seeded_mlp":
            q = error.quant
            self._qlayers = tuple(
                (self._quant_weight(W, q), b) for W, b in mlp_weights(spec))

    @staticmethod
    def _quant_weight(W, q):
        gran = q.granularity
        if gran == "per_group" and W.shape[1] % q.group_size:
            raise ShapeError(
                f"group_size {q.group_size} does not divide weight fan-in {W.shape[1]}")
        return fake_quant(W, q.weight_bits, gran, q.symmetric, q.group_size, axis=0)

    def _act(self, v):
        q = self.error.quant
        gran = q.granularity
        if gran == "per_channel" and v.ndim < 2:
            gran = "per_tensor"
        if gran == "per_group":
            if v.size % q.group_size:
                raise ShapeError(
                    f"group_size {q.group_size} does not divide activation size {v.size}")
            flat = fake_quant(v.ravel(), q.act_bits, gran, q.symmetric, q.group_size)
            return flat.reshape(v.shape)
        return fake_quant(v, q.act_bits, gran, q.symmetric, q.group_size, axis=0)

    def quantized_output(self, x, t, s):
        spec = self.spec
        if spec.kind == "seeded_mlp":
            out = mlp_forward(self._qlayers, np.asarray(x, dtype=np.float64).ravel(),
                              timestep_embedding(t, s.T), spec.output_scale,
                              act_quant=self._act)
            return out.reshape(spec.shape)
        return self._act(predict(spec, x, t, s))

    def evaluate(self, x, t: int, s, rng=None):
        mu = predict(self.spec, x, t, s)
        kind = self.error.kind
        if kind == "zero":
            return mu, mu.copy(), np.zeros_like(mu)
        if kind == "gaussian":
            eps = inject_error(self.error, mu, t, rng)
            return mu, mu + eps, eps
        if kind == "scaled_output":
            # mu_q solves mu_q = mu + K* mu_q, so eps = K* mu_q holds by construction
            row = _channel_broadcast(self.error.kstar_row(t), mu)
            mu_q = mu / (1.0 - row)
            return mu, mu_q, row * mu_q
        mu_q = self.quantized_output(x, t, s)
        return mu, mu_q, mu_q - mu

    def predict(self, x, t: int, s, rng=None):
        return self.evaluate(x, t, s, rng)[1]


def quantize_denoiser(spec: DenoiserSpec, q: QuantConfig) -> QuantizedDenoiser:
    return QuantizedDenoiser(spec, ErrorModel("fake_quant", quant=q))


def random_kstar(plan, channels: int, scale: float = 0.1, seed: int = 0) -> dict:
    """Ground-truth scaling rows, uniform in ``[-scale, scale]`` per channel."""
    if not 0 <= scale < 1:
        raise ValueError("K* scale must be in [0, 1)")
    rng = np.random.default_rng([seed, 7])
    rows = rng.uniform(-scale, scale, size=(len(plan.steps), channels))
    return {t: rows[i] for i, t in enumerate(plan.steps)}


def auto_sigma(spec: DenoiserSpec, s, plan, fraction: float = 0.01,
               n_probe: int = 8, seed: int = 0) -> dict:
    """Per-step Gaussian std as ``fraction`` of the RMS of ``mu`` on a probe set."""
    rng = np.random.default_rng([seed, 11])
    probes = rng.standard_normal((n_probe,) + spec.shape)
    out = {}
    for t in plan.steps:
        if spec.kind == "analytic_gaussian":
            c = gaussian_gain(spec, s, t)
            mus = c * (probes - math.sqrt(float(s.alpha[t])) * spec.mean)
        else:
            mus = np.stack([predict(spec, p, t, s) for p in probes])
        out[t] = fraction * float(np.sqrt(np.mean(mus * mus)))
    return out
