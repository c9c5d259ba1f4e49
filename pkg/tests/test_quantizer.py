import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from tcec.denoiser import DenoiserSpec, predict
from tcec.errors import MissingRow, ShapeError
from tcec.quantizer import (ErrorModel, QuantConfig, QuantizedDenoiser, fake_quant, inject_error,
                            quantize_denoiser, random_kstar, round_half_away)


def test_round_half_away():
    np.testing.assert_array_equal(round_half_away([0.5, 1.5, -0.5, -2.5, 0.49, 2.0]),
                                  [1.0, 2.0, -1.0, -3.0, 0.0, 2.0])


def test_grid_values_unchanged():
    v = np.array([-1.0, 0.0, 1.0, 1.0, -1.0])
    np.testing.assert_array_equal(fake_quant(v, 2), v)


def test_two_bit_hand_example():
    np.testing.assert_array_equal(fake_quant([0.0, 0.5, 1.0], 2), [0.0, 1.0, 1.0])


def test_sixteen_bit_error_bound():
    v = np.random.default_rng(0).standard_normal(1000)
    err = np.abs(fake_quant(v, 16) - v)
    assert err.max() <= np.abs(v).max() / (2 ** 15 - 1)


def test_zero_slices_pass_through():
    v = np.zeros((3, 4))
    v[1] = [0.3, -0.2, 0.1, 0.0]
    out = fake_quant(v, 4, "per_channel", axis=0)
    assert not np.any(out[0]) and not np.any(out[2])
    assert out[1, 3] == 0.0


def test_contract_errors():
    with pytest.raises(ValueError):
        fake_quant([], 8)
    for b in (1, 17):
        with pytest.raises(ValueError):
            fake_quant([1.0], b)
    with pytest.raises(ShapeError):
        fake_quant(np.ones((2, 6)), 8, "per_group", group_size=4)
    with pytest.raises(ValueError):
        QuantConfig(granularity="per_row")


def test_per_channel_and_group_scales():
    v = np.array([[1.0, 0.5], [100.0, 50.0]])
    out = fake_quant(v, 2, "per_channel", axis=0)
    np.testing.assert_array_equal(out, [[1.0, 1.0], [100.0, 100.0]])
    g = fake_quant(np.array([1.0, 0.4, 10.0, 4.0]), 3, "per_group", group_size=2)
    np.testing.assert_allclose(g, [1.0, 1 / 3, 10.0, 10 / 3], rtol=1e-15)


vals = arrays(np.float64, st.integers(1, 48), elements=st.floats(-1e6, 1e6, allow_nan=False))


@settings(max_examples=200, deadline=None)
@given(vals, st.integers(2, 16))
def test_symmetric_idempotent(v, bits):
    once = fake_quant(v, bits)
    assert np.array_equal(fake_quant(once, bits), once)


@settings(max_examples=200, deadline=None)
@given(vals, st.integers(2, 16))
def test_error_bounded_by_half_step(v, bits):
    qmax = 2 ** (bits - 1) - 1
    scale = np.abs(v).max() / qmax
    err = np.abs(fake_quant(v, bits) - v)
    assert np.all(err <= scale / 2 * (1 + 1e-9) + 1e-300)


@settings(max_examples=100, deadline=None)
@given(vals, st.integers(2, 16))
def test_asymmetric_error_bounded(v, bits):
    lo, hi = min(v.min(), 0.0), max(v.max(), 0.0)
    step = (hi - lo) / (2 ** bits - 1)
    assert np.all(np.abs(fake_quant(v, bits, symmetric=False) - v) <= step * (1 + 1e-9) + 1e-300)


def test_inject_error_examples():
    mu = np.full((4, 2, 2), 2.0)
    assert not np.any(inject_error(ErrorModel("zero"), mu, 5))
    em = ErrorModel("scaled_output", kstar={5: np.full(4, 0.1)})
    np.testing.assert_allclose(inject_error(em, mu, 5), 0.2, rtol=1e-15)
    assert not np.any(inject_error(ErrorModel("gaussian", sigma={5: 0.0}), mu, 5, 0))
    with pytest.raises(MissingRow):
        inject_error(em, mu, 6)
    with pytest.raises(ValueError):
        ErrorModel("gaussian", sigma={5: -1.0})


def test_gaussian_draws_seeded():
    em = ErrorModel("gaussian", sigma={3: 0.5})
    mu = np.zeros((1, 3, 3))
    assert np.array_equal(inject_error(em, mu, 3, 7), inject_error(em, mu, 3, 7))


def test_scaled_output_is_exact(sched, plan, spec):
    qd = QuantizedDenoiser(spec, ErrorModel("scaled_output", kstar=random_kstar(plan, 4, 0.2, 1)))
    x = np.random.default_rng(0).standard_normal(spec.shape)
    mu, mu_q, eps = qd.evaluate(x, 500, sched)
    row = qd.error.kstar_row(500)[:, None, None]
    np.testing.assert_allclose(eps, row * mu_q, rtol=1e-14, atol=1e-16)
    np.testing.assert_allclose(mu_q, mu + eps, rtol=1e-14, atol=1e-16)


def test_high_precision_denoiser_close(sched, mlp):
    qd = quantize_denoiser(mlp, QuantConfig(16, 16))
    rng = np.random.default_rng(4)
    worst, rms = 0.0, []
    for _ in range(64):
        x = rng.standard_normal(mlp.shape)
        mu, mu_q, _ = qd.evaluate(x, 400, sched)
        worst = max(worst, np.abs(mu_q - mu).max())
        rms.append(np.mean(mu * mu))
    assert worst <= 1e-3 * np.sqrt(np.mean(rms))


def test_fewer_activation_bits_more_error(sched, mlp):
    rng = np.random.default_rng(6)
    probes = rng.standard_normal((16,) + mlp.shape)

    def mean_err(abits):
        qd = quantize_denoiser(mlp, QuantConfig(8, abits))
        return np.mean([np.linalg.norm(qd.evaluate(p, 400, sched)[2]) for p in probes])

    assert mean_err(4) > mean_err(8)


@pytest.mark.parametrize("gran", ["per_tensor", "per_channel", "per_group"])
def test_quantized_mlp_granularities(sched, mlp, gran):
    qd = quantize_denoiser(mlp, QuantConfig(8, 8, gran, 16))
    x = np.random.default_rng(0).standard_normal(mlp.shape)
    mu, mu_q, eps = qd.evaluate(x, 100, sched)
    assert np.all(np.isfinite(mu_q)) and np.any(eps)
    np.testing.assert_array_equal(mu, predict(mlp, x, 100, sched))


def test_analytic_activation_quant(sched, spec):
    qd = quantize_denoiser(spec, QuantConfig(8, 4))
    x = np.random.default_rng(0).standard_normal(spec.shape)
    _, mu_q, eps = qd.evaluate(x, 100, sched)
    assert np.any(eps)
    assert len(np.unique(np.round(mu_q, 12))) <= 15


def test_bad_group_size(mlp):
    with pytest.raises(ShapeError):
        quantize_denoiser(mlp, QuantConfig(8, 8, "per_group", 7))
