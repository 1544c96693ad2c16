"""Joint objective, AdamW, EMA weights, the training loop and checkpoints."""

from __future__ import annotations

import json
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .config import Config, LossWeights, OptimConfig
from .data import MonthlyDataset, StandardizedData, VariableSpec, standardize
from .diffusion import DiffusionSchedule, build_cosine_schedule, noise_and_target
from .errors import ConfigError, DataError, GradientExplosionError, NumericError
from .io import load_bundle, read_manifest, save_bundle, write_manifest
from .networks import Model, kl_divergence, reparameterize
from .rng import RngStream
from .tensor import Tensor, no_grad, tmean

log = logging.getLogger(__name__)

COMPONENTS = ("rec", "diff", "kl", "std", "mean")

# stream ids of the counter-based generator
STREAM_TRAIN = 1
STREAM_SHUFFLE = 2
STREAM_VAL = 3


@dataclass
class Batch:
    x_t: np.ndarray
    x_next: np.ndarray
    f_t: np.ndarray
    f_next: np.ndarray
    m_t: np.ndarray
    m_next: np.ndarray
    s: np.ndarray

    @property
    def size(self) -> int:
        return self.x_t.shape[0]


def make_batch(data: StandardizedData, starts) -> Batch:
    t = np.asarray(starts, dtype=int)
    return Batch(data.x[t], data.x[t + 1], data.f[t], data.f[t + 1],
                 data.months[t], data.months[t + 1], data.s)


@dataclass
class LossRecord:
    total: float
    components: "OrderedDict[str, float]"
    weighted: "OrderedDict[str, float]"


def _mse(a: Tensor, b) -> Tensor:
    d = a - b
    return tmean(d * d)


def total_loss(batch: Batch, model, sched: DiffusionSchedule, rng: RngStream,
               weights: LossWeights, couple_target: bool = False) -> tuple[Tensor, LossRecord]:
    """Weighted sum of reconstruction, diffusion, KL and normalizer-tracking terms.

    Both months go through the encoder in one batched call.  The predictor
    sees ``Norm(z_t)``; its target is ``Norm(mu_{t+1})``, detached unless
    ``couple_target`` lets gradient reach the month t+1 encoder.
    """
    B = batch.size
    both = model.conditioning(np.concatenate([batch.f_t, batch.f_next]),
                              np.concatenate([batch.m_t, batch.m_next]))
    cond_t = _half(both, slice(0, B))
    mu, logvar = model.encode(np.concatenate([batch.x_t, batch.x_next]), batch.s, both)
    mu_t, lv_t, mu_next = mu[:B], logvar[:B], mu[B:]

    eps_v = rng.normal(mu_t.shape)
    z_t = reparameterize(mu_t, lv_t, eps_v)
    x_hat = model.decode(z_t, cond_t, batch.s)
    parts = OrderedDict()
    parts["rec"] = _mse(x_hat, batch.x_t)

    norm = model.normalizer
    target = mu_next if couple_target else mu_next.detach()
    y0 = norm.norm(target)
    if not couple_target:
        y0 = y0.detach()
    k = rng.integers(1, sched.T, size=B)
    eps_d = rng.normal(mu_t.shape)
    y_k, v = noise_and_target(y0, k, eps_d, sched)
    v_hat = model.predict_v(norm.norm(z_t), y_k, cond_t.down, k / sched.T)
    parts["diff"] = _mse(v_hat, v)
    parts["kl"] = kl_divergence(mu_t, lv_t)

    stats = mu_next.data
    d_std = norm.sigma_p - float(stats.std())
    d_mean = norm.mu_p - float(stats.mean())
    parts["std"] = d_std * d_std
    parts["mean"] = d_mean * d_mean

    total = None
    weighted = OrderedDict()
    for name in COMPONENTS:
        val = parts[name]
        if not np.isfinite(val.data).all():
            raise NumericError(f"loss component '{name}' is non-finite")
        term = getattr(weights, name) * val
        weighted[name] = float(term.data)
        total = term if total is None else total + term
    rec = LossRecord(float(total.data), OrderedDict((n, float(p.data)) for n, p in parts.items()),
                     weighted)
    return total, rec


def _half(cond, sl):
    from .networks import Conditioning

    return Conditioning(cond.full[sl], cond.down[sl])


class AdamW:
    """Adam with decoupled weight decay, applied before the moment update."""

    def __init__(self, params: list[Tensor], cfg: OptimConfig):
        self.params = list(params)
        self.cfg = cfg
        self.t = 0
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]

    def step(self) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = np.zeros(p.shape) if p.grad is None else p.grad
            p.data *= 1.0 - c.lr * c.weight_decay
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            p.data -= c.lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)

    def state(self) -> dict:
        return {"t": self.t, "m": [a.copy() for a in self.m], "v": [a.copy() for a in self.v]}


class EMA:
    def __init__(self, params: list[Tensor], decay: float):
        self.params = list(params)
        self.decay = decay
        self.shadow = [p.data.copy() for p in self.params]

    def update(self) -> None:
        d = self.decay
        for s, p in zip(self.shadow, self.params):
            s *= d
            s += (1.0 - d) * p.data

    def swap(self) -> None:
        """Exchange shadow and live weights in place."""
        for i, p in enumerate(self.params):
            live = p.data.copy()
            p.data[...] = self.shadow[i]
            self.shadow[i] = live


def grad_norm(params) -> float:
    return float(np.sqrt(sum(float((p.grad ** 2).sum()) for p in params if p.grad is not None)))


def train_step(batch: Batch, model: Model, opt: AdamW, ema: EMA | None, sched: DiffusionSchedule,
               rng: RngStream, weights: LossWeights, couple_target: bool = False) -> LossRecord:
    model.zero_grad()
    loss, rec = total_loss(batch, model, sched, rng, weights, couple_target)
    loss.backward()
    gn = grad_norm(opt.params)
    if not np.isfinite(gn) or gn > opt.cfg.grad_cap:
        model.zero_grad()
        raise GradientExplosionError(
            f"gradient norm {gn:.4g} exceeds cap {opt.cfg.grad_cap:g}; step aborted "
            f"(loss components {dict(rec.components)})"
        )
    opt.step()
    if ema is not None:
        ema.update()
    return rec


def evaluate(model: Model, data: StandardizedData, starts: np.ndarray, sched: DiffusionSchedule,
             weights: LossWeights, seed: int, batch_size: int) -> LossRecord:
    """Mean loss over ``starts`` with a freshly seeded stream, so repeat calls agree."""
    rng = RngStream(seed, STREAM_VAL)
    totals, comps, n = 0.0, OrderedDict((c, 0.0) for c in COMPONENTS), 0
    wsum = OrderedDict((c, 0.0) for c in COMPONENTS)
    with no_grad():
        for i in range(0, len(starts), batch_size):
            idx = starts[i:i + batch_size]
            _, rec = total_loss(make_batch(data, idx), model, sched, rng, weights)
            w = len(idx)
            totals += w * rec.total
            for c in COMPONENTS:
                comps[c] += w * rec.components[c]
                wsum[c] += w * rec.weighted[c]
            n += w
    return LossRecord(totals / n, OrderedDict((c, v / n) for c, v in comps.items()),
                      OrderedDict((c, v / n) for c, v in wsum.items()))


@dataclass
class TrainResult:
    model: Model
    ema: EMA
    history: list = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = float("inf")
    best_raw: dict | None = None
    best_ema: dict | None = None


def train_loop(ds: MonthlyDataset, cfg: Config, checkpoint_dir=None,
               callback: Callable[[dict], None] | None = None) -> TrainResult:
    """Train for ``cfg.train.epochs``; keep the weights with the lowest EMA validation loss."""
    data = standardize(ds)
    val_starts = ds.pairs("val")
    if len(val_starts) == 0:
        raise ConfigError("validation split has no consecutive-month pair")
    train_starts = ds.pairs("train")
    if len(train_starts) == 0:
        raise DataError("training split has no consecutive-month pair")
    sched = build_cosine_schedule(cfg.diffusion.steps, cfg.diffusion.offset, cfg.diffusion.beta_max)
    model = Model(cfg.model)
    params = model.parameters()
    opt = AdamW(params, cfg.optim)
    ema = EMA(params, cfg.optim.ema_decay)
    rng = RngStream(cfg.train.seed, STREAM_TRAIN)
    shuffle = RngStream(cfg.train.seed, STREAM_SHUFFLE)
    result = TrainResult(model, ema)
    bs = cfg.train.batch_size
    for epoch in range(1, cfg.train.epochs + 1):
        order = train_starts[shuffle.permutation(len(train_starts))]
        recs = []
        for i in range(0, len(order), bs):
            recs.append(train_step(make_batch(data, order[i:i + bs]), model, opt, ema, sched, rng,
                                   cfg.loss, cfg.train.couple_target))
        ema.swap()
        val = evaluate(model, data, val_starts, sched, cfg.loss, cfg.train.seed, bs)
        ema.swap()
        entry = {
            "epoch": epoch,
            "train_total": float(np.mean([r.total for r in recs])),
            **{f"train_{c}": float(np.mean([r.components[c] for r in recs])) for c in COMPONENTS},
            "val_total": val.total,
            **{f"val_{c}": val.components[c] for c in COMPONENTS},
        }
        result.history.append(entry)
        if val.total < result.best_val:
            result.best_val, result.best_epoch = val.total, epoch
            result.best_raw = model.state_dict()
            result.best_ema = OrderedDict(zip(model.named_parameters(), (s.copy() for s in ema.shadow)))
            if checkpoint_dir is not None:
                save_checkpoint(checkpoint_dir, result, cfg, data)
        log.info("epoch %d train %.5f val %.5f", epoch, entry["train_total"], val.total)
        if callback is not None:
            callback(entry)
    if checkpoint_dir is not None:
        save_checkpoint(checkpoint_dir, result, cfg, data)
    return result


# -- checkpoints -----------------------------------------------------------

def save_checkpoint(directory, result: TrainResult, cfg: Config, data: StandardizedData) -> None:
    """Best raw and EMA weights in one tensor file, described by a JSON manifest."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    arrays = OrderedDict()
    for k, v in result.best_raw.items():
        arrays[f"raw/{k}"] = v
    for k, v in result.best_ema.items():
        arrays[f"ema/{k}"] = v
    entries = save_bundle(d / "weights.smt", arrays)
    (d / "config.ini").write_text(cfg.to_ini())
    write_manifest(d / "checkpoint.json", {
        "seed": cfg.train.seed,
        "best_epoch": result.best_epoch,
        "best_val_total": result.best_val,
        "parameters": entries,
        "x_specs": [s.to_dict() for s in data.x_specs],
        "f_specs": [s.to_dict() for s in data.f_specs],
        "s_specs": [s.to_dict() for s in data.s_specs],
    })
    (d / "history.json").write_text(json.dumps(result.history, indent=1))


@dataclass
class Checkpoint:
    cfg: Config
    model: Model
    raw: dict
    ema: dict
    x_specs: list
    f_specs: list
    s_specs: list
    manifest: dict

    def use(self, which: str = "ema") -> Model:
        self.model.load_state_dict(self.ema if which == "ema" else self.raw)
        return self.model


def load_checkpoint(directory) -> Checkpoint:
    d = Path(directory)
    if not (d / "checkpoint.json").exists():
        raise DataError(f"no checkpoint manifest in {d}")
    man = read_manifest(d / "checkpoint.json")
    cfg = Config.load(d / "config.ini")
    arrays = load_bundle(d / "weights.smt", man["parameters"])
    raw = OrderedDict((k[4:], v) for k, v in arrays.items() if k.startswith("raw/"))
    ema = OrderedDict((k[4:], v) for k, v in arrays.items() if k.startswith("ema/"))
    model = Model(cfg.model)
    model.load_state_dict(ema)
    specs = [[VariableSpec(**s) for s in man[key]] for key in ("x_specs", "f_specs", "s_specs")]
    return Checkpoint(cfg, model, raw, ema, *specs, man)
