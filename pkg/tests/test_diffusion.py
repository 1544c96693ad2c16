import numpy as np
import pytest

from mdemu.checks import schedule_oracle
from mdemu.diffusion import (
    LatentNormalizer,
    build_cosine_schedule,
    cosine_alpha_bar,
    ddpm_sample,
    noise_and_target,
    v_to_eps,
)
from mdemu.errors import ConfigError, DomainError, NumericError
from mdemu.rng import RngStream
from mdemu.tensor import Tensor


@pytest.fixture(scope="module")
def sched():
    return build_cosine_schedule(15, 0.008)


def test_schedule_against_high_precision(sched):
    betas, ab, post = schedule_oracle(15, 0.008)
    np.testing.assert_allclose(sched.betas, betas, atol=1e-12, rtol=0)
    np.testing.assert_allclose(sched.alpha_bars, ab, atol=1e-12, rtol=0)
    np.testing.assert_allclose(sched.posterior_variance, post, atol=1e-12, rtol=0)
    assert sched.alpha_bars[0] == 1.0
    assert np.all(np.diff(sched.alpha_bars) < 0)
    assert sched.posterior_variance[1] == 0.0


def test_clipping_keeps_terminal_alpha_bar_positive(sched):
    assert abs(cosine_alpha_bar(15, 15, 0.008)) < 1e-30
    assert sched.betas[-1] == 0.999
    assert 0 < sched.alpha_bars[-1] < 1e-4


def test_bad_schedule_arguments():
    with pytest.raises(ConfigError):
        build_cosine_schedule(0)
    with pytest.raises(ConfigError):
        build_cosine_schedule(15, s=0.0)


def test_limits_of_forward_noising(rng, sched):
    y0, eps = rng.standard_normal((2, 3)), rng.standard_normal((2, 3))

    class Fake:
        alpha_bars = np.array([1.0, 1.0, 0.0])

        def check_step(self, k):
            return np.asarray(k)

    y, v = noise_and_target(y0, 1, eps, Fake())
    np.testing.assert_array_equal(y.data, y0)
    np.testing.assert_array_equal(v.data, eps)
    y, v = noise_and_target(y0, 2, eps, Fake())
    np.testing.assert_array_equal(y.data, eps)
    np.testing.assert_array_equal(v.data, -y0)
    with pytest.raises(DomainError):
        noise_and_target(y0, 0, eps, sched)
    with pytest.raises(DomainError):
        noise_and_target(y0, 16, eps, sched)


def test_v_eps_identity_every_step(rng, sched):
    y0, eps = rng.standard_normal((3, 4, 5)), rng.standard_normal((3, 4, 5))
    for k in range(1, 16):
        y, v = noise_and_target(y0, k, eps, sched)
        back = v_to_eps(v, y, sched.alpha_bars[k]).data
        assert np.abs(back - eps).max() <= 1e-12


def test_per_sample_steps(rng, sched):
    y0, eps = rng.standard_normal((3, 2, 2)), rng.standard_normal((3, 2, 2))
    y, _ = noise_and_target(y0, np.array([1, 7, 15]), eps, sched)
    for i, k in enumerate([1, 7, 15]):
        yi, _ = noise_and_target(y0[i:i + 1], k, eps[i:i + 1], sched)
        np.testing.assert_array_equal(y.data[i], yi.data[0])


def _ideal(target, norm, sched):
    def predictor(z_norm, y_k, c_down, t):
        k = int(round(t * sched.T))
        ab = sched.alpha_bars[k]
        y0 = norm.norm(target).data
        eps = (y_k.data - np.sqrt(ab) * y0) / np.sqrt(1 - ab)
        return Tensor(np.sqrt(ab) * eps - np.sqrt(1 - ab) * y0)
    return predictor


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_ideal_denoiser_recovers_target(rng, sched, seed):
    target = rng.standard_normal((2, 3, 4, 5))
    norm = LatentNormalizer(0.3, 1.7)
    rngs = [RngStream(seed, 10), RngStream(seed, 11)]
    out = ddpm_sample(np.zeros_like(target), None, _ideal(target, norm, sched), sched, norm, rngs)
    assert np.abs(out.data - target).max() <= 1e-10


def test_zero_predictor_is_deterministic_affine_in_noise(sched):
    zero = lambda z, y, c, t: Tensor(np.zeros(y.shape))
    norm = LatentNormalizer()
    shape = (2, 3)
    a = ddpm_sample(np.zeros(shape), None, zero, sched, norm, [RngStream(4, 0), RngStream(4, 1)])
    b = ddpm_sample(np.zeros(shape), None, zero, sched, norm, [RngStream(4, 0), RngStream(4, 1)])
    np.testing.assert_array_equal(a.data, b.data)
    # with v = 0 every step is y <- c_k y + noise; replay it by hand
    r = [RngStream(4, 0), RngStream(4, 1)]
    y = np.stack([s.normal(shape[1:]) for s in r])
    for k in range(15, 0, -1):
        ab, al, be = sched.alpha_bars[k], sched.alphas[k], sched.betas[k]
        y = (y - be / np.sqrt(1 - ab) * np.sqrt(1 - ab) * y) / np.sqrt(al)
        if k > 1:
            y = y + np.sqrt(sched.posterior_variance[k]) * np.stack([s.normal(shape[1:]) for s in r])
    np.testing.assert_allclose(a.data, y, rtol=1e-13)


def test_batch_members_use_their_own_streams(sched):
    zero = lambda z, y, c, t: Tensor(0.1 * y.data)
    norm = LatentNormalizer()
    both = ddpm_sample(np.zeros((2, 3)), None, zero, sched, norm, [RngStream(1, 5), RngStream(1, 6)])
    one = ddpm_sample(np.zeros((1, 3)), None, zero, sched, norm, [RngStream(1, 6)])
    np.testing.assert_array_equal(both.data[1], one.data[0])
    with pytest.raises(ConfigError):
        ddpm_sample(np.zeros((2, 3)), None, zero, sched, norm, [RngStream(1, 5)])


def test_sampler_reports_step_of_blowup(sched):
    # the predictor goes bad only at the third reverse step
    bad = lambda z, y, c, t: Tensor._wrap(np.full(y.shape, np.nan if t < 0.9 else 0.0))
    with pytest.raises(NumericError, match="step 13"):
        ddpm_sample(np.zeros((1, 2)), None, bad, sched, LatentNormalizer(), [RngStream(0)])


def test_normalizer(rng):
    z = rng.standard_normal((4, 5))
    ident = LatentNormalizer()
    np.testing.assert_array_equal(ident.norm(z).data, z)
    norm = LatentNormalizer(2.0, 3.0)
    assert np.abs(norm.unnorm(norm.norm(z)).data - z).max() <= 1e-12
    batch = 2.0 + 3.0 * rng.standard_normal(100000)
    n = norm.norm(batch).data
    assert abs(n.mean()) < 0.02 and abs(n.std() - 1) < 0.02
    with pytest.raises(ConfigError):
        LatentNormalizer(0.0, 0.0)
