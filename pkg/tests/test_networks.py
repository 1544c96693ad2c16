import numpy as np
import pytest

from mdemu.config import ModelConfig, small_model_config
from mdemu.errors import DimensionError, NumericError
from mdemu.networks import Model, kl_divergence, model_info, reparameterize, sinusoidal_embedding
from mdemu.tensor import Tensor, check_gradient, no_grad, tsum


@pytest.fixture(scope="module")
def full():
    return Model(ModelConfig())


def test_full_scale_shapes_and_purity(full):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, 42, 121, 240))
    s = rng.standard_normal((4, 121, 240))
    f = rng.standard_normal((1, 3, 121, 240))
    with no_grad():
        c = full.conditioning(f, [5])
        assert c.full.shape == (1, 6, 121, 240)
        mu, lv = full.encode(x, s, c)
        assert mu.shape == lv.shape == (1, 32, 40, 80)
        mu2, _ = full.encode(x, s, c)
        np.testing.assert_array_equal(mu.data, mu2.data)
        xh = full.decode(mu, c)
        assert xh.shape == (1, 42, 121, 240)
        np.testing.assert_array_equal(xh.data, full.decode(mu, c).data)
        v = full.predict_v(mu, mu, c.down, 0.4)
        assert v.shape == (1, 32, 40, 80)
        np.testing.assert_array_equal(v.data, full.predict_v(mu, mu, c.down, 0.4).data)


def test_model_info_ratios():
    info = model_info(ModelConfig())
    assert info["encoder_input_channels"] == 52
    assert info["compression_ratio_vs_input"] == pytest.approx(32 * 40 * 80 / (49 * 121 * 240))
    assert info["compression_ratio_vs_state"] == pytest.approx(32 * 40 * 80 / (42 * 121 * 240))
    p = info["parameters"]
    assert p["total"] == sum(v for k, v in p.items() if k != "total")


def test_reparameterize_cases(rng):
    mu = rng.standard_normal((2, 3))
    np.testing.assert_array_equal(reparameterize(mu, rng.standard_normal((2, 3)), np.zeros((2, 3))).data, mu)
    np.testing.assert_array_equal(reparameterize(mu, np.zeros((2, 3)), np.ones((2, 3))).data, mu + 1)
    with pytest.raises(DimensionError):
        reparameterize(mu, np.zeros((2, 3)), np.zeros((3, 2)))


def test_reparameterize_gradient(rng):
    mu = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    lv = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    eps = rng.standard_normal((2, 3))
    tsum(reparameterize(mu, lv, eps)).backward()
    np.testing.assert_allclose(lv.grad, 0.5 * np.exp(0.5 * lv.data) * eps, rtol=1e-14)
    np.testing.assert_array_equal(mu.grad, 1.0)
    assert check_gradient(lambda: tsum(reparameterize(mu, lv, eps)), [mu, lv]) < 1e-8


def test_kl_closed_cases():
    assert float(kl_divergence(np.zeros((1, 4)), np.zeros((1, 4))).data) == 0.0
    assert float(kl_divergence(np.ones((1, 1)), np.zeros((1, 1))).data) == 0.5
    # averaged over the batch, summed over the rest
    two = kl_divergence(np.ones((2, 3)), np.zeros((2, 3)))
    assert float(two.data) == 1.5


def test_kl_against_monte_carlo():
    rng = np.random.default_rng(7)
    n = 10**6
    for _ in range(20):
        mu, lv = rng.normal(0.0, 1.0, 3), rng.normal(0.0, 0.7, 3)
        sd = np.exp(0.5 * lv)
        z = mu + sd * rng.standard_normal((n, 3))
        log_q = -0.5 * (((z - mu) / sd) ** 2 + lv + np.log(2 * np.pi))
        log_p = -0.5 * (z**2 + np.log(2 * np.pi))
        mc = (log_q - log_p).sum(axis=1).mean()
        exact = float(kl_divergence(mu[None], lv[None]).data)
        assert abs(mc - exact) / exact < 0.01


def test_sinusoidal_embedding():
    e = sinusoidal_embedding([0.0, 0.5], 8)
    assert e.shape == (2, 8)
    np.testing.assert_array_equal(e[0], [0, 0, 0, 0, 1, 1, 1, 1])


def test_small_model_validates_inputs_and_names_failures():
    m = small_model_config()
    model = Model(m)
    rng = np.random.default_rng(0)
    grid = (m.grid_lat, m.grid_lon)
    c = model.conditioning(rng.standard_normal((1, 3) + grid), [1])
    with pytest.raises(DimensionError):
        model.encode(rng.standard_normal((1, len(m.prognostic) + 1) + grid),
                     rng.standard_normal((len(m.static),) + grid), c)
    model.encoder.lift.weight.data[...] = 1e200
    with pytest.raises(NumericError, match="encoder"):
        with np.errstate(all="ignore"):
            model.encode(1e200 * np.ones((1, len(m.prognostic)) + grid),
                         np.ones((len(m.static),) + grid), c)


def test_logvar_is_clamped():
    m = small_model_config()
    model = Model(m)
    model.encoder.head.bias.data[m.latent_channels:] = 50.0
    rng = np.random.default_rng(2)
    grid = (m.grid_lat, m.grid_lon)
    c = model.conditioning(rng.standard_normal((1, 3) + grid), [4])
    _, lv = model.encode(rng.standard_normal((1, len(m.prognostic)) + grid),
                         rng.standard_normal((len(m.static),) + grid), c)
    assert lv.data.max() == m.logvar_clamp


def test_static_fields_optional_in_decoder():
    m = small_model_config()
    m.decoder_static = True
    model = Model(m)
    rng = np.random.default_rng(3)
    grid = (m.grid_lat, m.grid_lon)
    c = model.conditioning(rng.standard_normal((2, 3) + grid), [4, 5])
    z = rng.standard_normal((2, m.latent_channels, m.latent_lat, m.latent_lon))
    out = model.decode(z, c, rng.standard_normal((len(m.static),) + grid))
    assert out.shape == (2, len(m.prognostic)) + grid
