from collections import OrderedDict

import numpy as np
import pytest

from mdemu.config import LossWeights, OptimConfig, small_model_config, toy_config
from mdemu.data import generate_synthetic, standardize
from mdemu.diffusion import LatentNormalizer, build_cosine_schedule
from mdemu.errors import ConfigError, GradientExplosionError
from mdemu.networks import Conditioning, Model
from mdemu.rng import RngStream
from mdemu.tensor import Tensor
from mdemu.training import (
    COMPONENTS,
    EMA,
    AdamW,
    evaluate,
    load_checkpoint,
    make_batch,
    total_loss,
    train_loop,
    train_step,
)

SCHED = build_cosine_schedule()


def small_cfg(epochs=2):
    cfg = toy_config()
    cfg.model = small_model_config()
    cfg.data.n_val, cfg.data.n_train, cfg.data.n_test = 5, 9, 0
    cfg.train.epochs = epochs
    return cfg


@pytest.fixture(scope="module")
def setup():
    cfg = small_cfg()
    ds = generate_synthetic(cfg.model, cfg.data)
    data = standardize(ds)
    return cfg, ds, data, make_batch(data, ds.pairs("train")[:3])


class StubModel:
    """Perfect reconstruction, mu_t = 0, logvar = 0, perfect v, matched normalizer."""

    def __init__(self, batch, latent=(2, 3, 4)):
        self.batch = batch
        self.normalizer = LatentNormalizer()
        n = int(np.prod(latent))
        z = np.arange(n, dtype=np.float64)
        z = (z - z.mean()) / z.std()
        self.mu_next = np.broadcast_to(z.reshape(latent), (batch.size,) + latent)
        self.latent = latent

    def conditioning(self, f, months):
        return Conditioning(Tensor(np.zeros((len(months), 1, 1, 1))), Tensor(np.zeros((len(months), 1, 1, 1))))

    def encode(self, x, s, cond):
        B = self.batch.size
        mu = np.concatenate([np.zeros((B,) + self.latent), self.mu_next])
        return Tensor(mu), Tensor(np.zeros_like(mu))

    def decode(self, z, cond, s=None):
        return Tensor(self.batch.x_t)

    def predict_v(self, z_norm, y_k, c_down, k_over_T):
        k = np.rint(np.asarray(k_over_T) * SCHED.T).astype(int)
        ab = SCHED.alpha_bars[k].reshape(-1, 1, 1, 1)
        y0 = self.normalizer.norm(self.mu_next).data
        eps = (y_k.data - np.sqrt(ab) * y0) / np.sqrt(1 - ab)
        return Tensor(np.sqrt(ab) * eps - np.sqrt(1 - ab) * y0)


def test_stub_model_has_zero_loss(setup):
    *_, batch = setup
    _, rec = total_loss(batch, StubModel(batch), SCHED, RngStream(0), LossWeights())
    assert rec.total == pytest.approx(0.0, abs=1e-20)
    assert all(abs(v) < 1e-20 for v in rec.components.values())


def test_components_and_weight_isolation(setup):
    cfg, _, _, batch = setup
    model = Model(cfg.model)
    _, a = total_loss(batch, model, SCHED, RngStream(3, 1), LossWeights())
    assert list(a.components) == list(COMPONENTS)
    assert abs(sum(a.weighted.values()) - a.total) <= 1e-12
    _, b = total_loss(batch, model, SCHED, RngStream(3, 1), LossWeights(diff=1.0))
    assert b.weighted["diff"] == 2 * a.weighted["diff"]
    for c in COMPONENTS:
        if c != "diff":
            assert b.weighted[c] == a.weighted[c]
    with pytest.raises(ConfigError):
        LossWeights(kl=-1.0)


def test_every_parameter_group_receives_gradient(setup):
    cfg, _, _, batch = setup
    model = Model(cfg.model)
    model.normalizer.rho.data[...] = 0.3  # L_std is exactly flat otherwise only by accident
    loss, _ = total_loss(batch, model, SCHED, RngStream(1), LossWeights())
    loss.backward()
    groups = {
        "encoder": model.encoder, "decoder": model.decoder, "predictor": model.predictor,
        "normalizer": model.normalizer, "seasonal_embedding": model.season,
        "metadata_embedding": model.encoder.meta,
    }
    for name, mod in groups.items():
        total = sum(float(np.abs(p.grad).sum()) for p in mod.parameters() if p.grad is not None)
        assert total > 0, name


class _Probe:
    """Wrap a model so the encoder outputs are leaves whose gradients can be read."""

    def __init__(self, model):
        self.model = model
        self.normalizer = model.normalizer

    def conditioning(self, *a):
        return self.model.conditioning(*a)

    def encode(self, x, s, cond):
        mu, lv = self.model.encode(x, s, cond)
        self.mu = Tensor(mu.data, requires_grad=True)
        return self.mu, Tensor(lv.data)

    def decode(self, *a, **k):
        return self.model.decode(*a, **k)

    def predict_v(self, *a):
        return self.model.predict_v(*a)


@pytest.mark.parametrize("couple", [False, True])
def test_target_is_detached_but_conditioning_path_is_live(setup, couple):
    cfg, _, _, batch = setup
    probe = _Probe(Model(cfg.model))
    only_diff = LossWeights(rec=0, diff=1, kl=0, std=0, mean=0)
    loss, _ = total_loss(batch, probe, SCHED, RngStream(2), only_diff, couple_target=couple)
    loss.backward()
    B = batch.size
    g = probe.mu.grad
    assert np.abs(g[:B]).sum() > 0
    assert (np.abs(g[B:]).sum() > 0) == couple


def test_adamw_single_step_by_hand():
    cfg = OptimConfig(lr=0.01, weight_decay=0.1, beta1=0.9, beta2=0.999, eps=1e-8)
    p = Tensor(np.array(2.0), requires_grad=True)
    opt = AdamW([p], cfg)
    for g, t in ((0.5, 1), (-0.25, 2)):
        p.grad = np.array(g)
        before = float(p.data)
        if t == 1:
            m, v = 0.1 * g, 0.001 * g * g
        else:
            m, v = 0.9 * m + 0.1 * g, 0.999 * v + 0.001 * g * g
        expect = before * (1 - 0.01 * 0.1) - 0.01 * (m / (1 - 0.9**t)) / (
            np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        opt.step()
        assert abs(float(p.data) - expect) <= 1e-12


def test_adamw_zero_gradient_is_pure_decay():
    cfg = OptimConfig()
    p = Tensor(np.array([1.0, -3.0]), requires_grad=True)
    opt = AdamW([p], cfg)
    opt.step()
    np.testing.assert_array_equal(p.data, np.array([1.0, -3.0]) * (1 - cfg.lr * cfg.weight_decay))


def test_ema_arithmetic_and_convergence():
    p = Tensor(np.array(0.0), requires_grad=True)
    ema = EMA([p], 0.995)
    p.data[...] = 1.0
    ema.update()
    assert ema.shadow[0] == pytest.approx(0.005, abs=1e-15)
    for _ in range(5000):
        ema.update()
    assert abs(ema.shadow[0] - 1.0) < 1e-10
    shadow = float(ema.shadow[0])
    ema.swap()
    assert float(p.data) == shadow and float(ema.shadow[0]) == 1.0


def test_gradient_cap_aborts_step(setup):
    cfg, _, _, batch = setup
    model = Model(cfg.model)
    tight = OptimConfig(grad_cap=1e-12)
    opt = AdamW(model.parameters(), tight)
    before = model.state_dict()
    with pytest.raises(GradientExplosionError, match="exceeds cap"):
        train_step(batch, model, opt, None, SCHED, RngStream(0), LossWeights())
    after = model.state_dict()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_determinism_and_checkpoint_reload(setup, tmp_path):
    cfg, ds, data, _ = setup
    logged = []
    a = train_loop(ds, cfg, checkpoint_dir=tmp_path / "a", callback=logged.append)
    b = train_loop(ds, cfg)
    assert a.history == b.history == logged
    for key in ["train_" + c for c in COMPONENTS] + ["train_total", "val_total"]:
        assert key in a.history[0]
    ck = load_checkpoint(tmp_path / "a")
    assert ck.manifest["best_epoch"] == a.best_epoch
    val = evaluate(ck.use("ema"), data, ds.pairs("val"), SCHED, cfg.loss, cfg.train.seed,
                   cfg.train.batch_size)
    assert abs(val.total - a.best_val) <= 1e-12
    raw = ck.use("raw").state_dict()
    assert all(np.array_equal(raw[k], a.best_raw[k]) for k in raw)
