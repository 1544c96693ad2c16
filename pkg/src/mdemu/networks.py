"""Encoder, decoder and diffusion predictor assembled from spectral blocks.

Every network has the same depth::

    lift -> cond-norm block -> compressive spectral residual block -> cond-norm block -> head

A cond-norm block is a gated-residual S2 convolution followed by the
conditional RMS norm and a GELU.  The compressive block carries the grid
change: a learned S2 convolution plus a parameter-free spectral resample of
its input, then a pointwise channel MLP with its own skip connection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .conditioning import ChannelMetadataEmbedding, ConditionalRMSNorm, SeasonalEmbedding, build_conditioning
from .config import ModelConfig, split_name
from .diffusion import LatentNormalizer
from .errors import DimensionError, NumericError
from .nn import MLP, ChannelMix, ChannelMLP, Module
from .sht import GridSpec
from .spectral import S2Conv, S2ConvConfig, resampler
from .tensor import Tensor, as_tensor, broadcast_to, clamp, concat, exp, gelu, tsum


def _checked(name: str, fn, *args) -> Tensor:
    try:
        out = fn(*args)
    except NumericError as exc:
        raise NumericError(f"{name}: {exc}") from exc
    if not np.all(np.isfinite(out.data)):
        raise NumericError(f"{name}: non-finite activations")
    return out


class CondNormBlock(Module):
    def __init__(self, channels: int, grid: GridSpec, cond_channels: int, rank: int,
                 cond_rank: int, cond_hidden: int, rng: np.random.Generator):
        self.conv = S2Conv(S2ConvConfig(grid, grid, channels, channels, rank=rank, residual=True), rng)
        self.norm = ConditionalRMSNorm(channels, grid, cond_channels, cond_rank, cond_hidden, rng)

    def __call__(self, h: Tensor, c: Tensor) -> Tensor:
        return gelu(self.norm(self.conv(h), c))


class CompressiveBlock(Module):
    def __init__(self, channels: int, in_grid: GridSpec, out_grid: GridSpec, rank: int,
                 mixer_width: int, rng: np.random.Generator, separate_synthesis: bool = False):
        self.conv = S2Conv(S2ConvConfig(in_grid, out_grid, channels, channels, rank=rank,
                                        separate_synthesis=separate_synthesis), rng)
        self.skip = resampler(in_grid, out_grid, channels)
        self.mixer = ChannelMLP(channels, mixer_width, rng)

    def __call__(self, h: Tensor) -> Tensor:
        y = self.conv(h) + self.skip(h)
        return y + self.mixer(y)


def _cond_blocks(hidden, g_first, g_second, cond_ch, rank, cond_rank, cond_hidden, m, rng):
    first = CondNormBlock(hidden, g_first, cond_ch, rank, cond_rank, cond_hidden, rng)
    compress = CompressiveBlock(hidden, g_first, g_second, rank, m.mixer_width, rng,
                                m.separate_synthesis)
    second = CondNormBlock(hidden, g_second, cond_ch, rank, cond_rank, cond_hidden, rng)
    return first, compress, second


class Encoder(Module):
    """``(x, s, c)`` on the physical grid -> ``(mu, logvar)`` on the latent grid."""

    def __init__(self, m: ModelConfig, grid: GridSpec, latent: GridSpec, rng: np.random.Generator):
        self.cfg = m
        names = (list(m.prognostic) + list(m.static) + list(m.forcing)
                 + [f"season{i}" for i in range(m.season_channels)])
        self.n_in = len(names)
        self.meta = ChannelMetadataEmbedding([split_name(n) for n in names], rng, dim=m.meta_dim)
        self.lift = ChannelMix(self.n_in, m.hidden_enc, rng)
        self.block1, self.compress, self.block2 = _cond_blocks(
            m.hidden_enc, grid, latent, m.cond_channels, m.rank_enc, m.cond_rank_enc,
            m.cond_hidden_enc, m, rng)
        self.head = ChannelMix(m.hidden_enc, 2 * m.latent_channels, rng)

    def __call__(self, x, s, c, c_down) -> tuple[Tensor, Tensor]:
        x, c = as_tensor(x), as_tensor(c)
        inp = concat([x, _batch(s, x.shape[0]), c], axis=1)
        if inp.shape[1] != self.n_in:
            raise DimensionError(f"encoder expects {self.n_in} input channels, got {inp.shape[1]}")
        h = _checked("encoder.lift", lambda: self.lift(self.meta(inp)))
        h = _checked("encoder.block1", self.block1, h, c)
        h = _checked("encoder.compress", self.compress, h)
        h = _checked("encoder.block2", self.block2, h, c_down)
        out = _checked("encoder.head", self.head, h)
        L = self.cfg.latent_channels
        lim = self.cfg.logvar_clamp
        return out[:, :L], clamp(out[:, L:], -lim, lim)


class Decoder(Module):
    """``(z, c)`` -> standardized prognostic state on the physical grid."""

    def __init__(self, m: ModelConfig, grid: GridSpec, latent: GridSpec, rng: np.random.Generator):
        self.cfg = m
        self.n_in = m.latent_channels + m.cond_channels + (len(m.static) if m.decoder_static else 0)
        self.lift = ChannelMix(self.n_in, m.hidden_dec, rng)
        self.block1, self.compress, self.block2 = _cond_blocks(
            m.hidden_dec, latent, grid, m.cond_channels, m.rank_dec, m.cond_rank_dec,
            m.cond_hidden_dec, m, rng)
        self.head = ChannelMix(m.hidden_dec, len(m.prognostic), rng)

    def __call__(self, z, c, c_down, s_down=None) -> Tensor:
        z = as_tensor(z)
        parts = [z, c_down]
        if self.cfg.decoder_static:
            parts.append(_batch(s_down, z.shape[0]))
        h = _checked("decoder.lift", self.lift, concat(parts, axis=1))
        h = _checked("decoder.block1", self.block1, h, c_down)
        h = _checked("decoder.compress", self.compress, h)
        h = _checked("decoder.block2", self.block2, h, c)
        return _checked("decoder.head", self.head, h)


def sinusoidal_embedding(t, dim: int, max_period: float = 1000.0) -> np.ndarray:
    """Standard transformer-style embedding of ``t`` in [0, 1], scaled by ``max_period``."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64)) * max_period
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / max(half, 1))
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


class Predictor(Module):
    """v-network on the latent grid: ``(Norm(z_t), y_k, c_down, k/T) -> v_hat``."""

    def __init__(self, m: ModelConfig, latent: GridSpec, rng: np.random.Generator):
        self.cfg, self.latent = m, latent
        self.time_mlp = MLP(m.time_embed_dim, m.time_embed_dim, m.time_channels, rng)
        self.n_in = 2 * m.latent_channels + m.cond_channels + m.time_channels
        self.lift = ChannelMix(self.n_in, m.hidden_pred, rng)
        self.block1, self.compress, self.block2 = _cond_blocks(
            m.hidden_pred, latent, latent, m.cond_channels, m.rank_pred, m.cond_rank_pred,
            m.cond_hidden_pred, m, rng)
        self.head = ChannelMix(m.hidden_pred, m.latent_channels, rng)

    def time_channels(self, k_over_T, batch: int) -> Tensor:
        kt = np.broadcast_to(np.atleast_1d(np.asarray(k_over_T, dtype=np.float64)), (batch,))
        emb = self.time_mlp(Tensor._wrap(sinusoidal_embedding(kt, self.cfg.time_embed_dim)))
        shape = (batch, self.cfg.time_channels) + self.latent.shape
        return broadcast_to(emb.reshape(batch, self.cfg.time_channels, 1, 1), shape)

    def __call__(self, z_norm, y_k, c_down, k_over_T) -> Tensor:
        z_norm, y_k = as_tensor(z_norm), as_tensor(y_k)
        b = z_norm.shape[0]
        inp = concat([z_norm, y_k, c_down, self.time_channels(k_over_T, b)], axis=1)
        h = _checked("predictor.lift", self.lift, inp)
        h = _checked("predictor.block1", self.block1, h, c_down)
        h = _checked("predictor.compress", self.compress, h)
        h = _checked("predictor.block2", self.block2, h, c_down)
        return _checked("predictor.head", self.head, h)


def _batch(s, b: int) -> Tensor:
    s = as_tensor(s)
    if s.ndim == 3:
        s = s.reshape(1, *s.shape)
    if s.shape[0] == b:
        return s
    return broadcast_to(s, (b,) + s.shape[1:])


def reparameterize(mu, logvar, eps) -> Tensor:
    mu, logvar = as_tensor(mu), as_tensor(logvar)
    eps = np.asarray(eps.data if isinstance(eps, Tensor) else eps, dtype=np.float64)
    if mu.shape != logvar.shape or mu.shape != eps.shape:
        raise DimensionError(f"reparameterize shapes differ: {mu.shape}, {logvar.shape}, {eps.shape}")
    return mu + exp(0.5 * logvar) * eps


def kl_divergence(mu, logvar) -> Tensor:
    """Closed-form KL to the standard normal, summed over latent dims, averaged over batch."""
    mu, logvar = as_tensor(mu), as_tensor(logvar)
    per = 0.5 * (mu * mu + exp(logvar) - 1.0 - logvar)
    return tsum(per) / mu.shape[0]


@dataclass
class Conditioning:
    full: Tensor
    down: Tensor


class Model(Module):
    """All trainable state: the three networks, seasonal embedding, latent normalizer."""

    def __init__(self, m: ModelConfig):
        self.cfg = m
        self.grid = GridSpec(m.grid_lat, m.grid_lon)
        self.latent_grid = GridSpec(m.latent_lat, m.latent_lon)
        rng = np.random.default_rng(m.init_seed)
        self.season = SeasonalEmbedding(self.grid, rng, hidden=m.season_hidden,
                                        channels=m.season_channels)
        self.encoder = Encoder(m, self.grid, self.latent_grid, rng)
        self.decoder = Decoder(m, self.grid, self.latent_grid, rng)
        self.predictor = Predictor(m, self.latent_grid, rng)
        self.normalizer = LatentNormalizer()
        self._down_cond = resampler(self.grid, self.latent_grid, m.cond_channels)
        self._down_static = resampler(self.grid, self.latent_grid, max(len(m.static), 1))

    def conditioning(self, forcing, months) -> Conditioning:
        c = build_conditioning(forcing, self.season(months))
        return Conditioning(c, self._down_cond(c))

    def encode(self, x, s, cond: Conditioning) -> tuple[Tensor, Tensor]:
        return self.encoder(x, s, cond.full, cond.down)

    def decode(self, z, cond: Conditioning, s=None) -> Tensor:
        s_down = None
        if self.cfg.decoder_static:
            s_down = self._down_static(_batch(s, 1))
        return self.decoder(z, cond.full, cond.down, s_down)

    def predict_v(self, z_norm, y_k, c_down, k_over_T) -> Tensor:
        return self.predictor(z_norm, y_k, c_down, k_over_T)

    def parameter_groups(self) -> dict[str, int]:
        return {
            "encoder": self.encoder.num_parameters(),
            "decoder": self.decoder.num_parameters(),
            "predictor": self.predictor.num_parameters(),
            "seasonal_embedding": self.season.num_parameters(),
            "normalizer": self.normalizer.num_parameters(),
        }


def model_info(m: ModelConfig) -> dict:
    """Parameter counts and shape arithmetic for a configuration."""
    model = Model(m)
    n_prog, n_static, n_forc = len(m.prognostic), len(m.static), len(m.forcing)
    latent = m.latent_channels * m.latent_lat * m.latent_lon
    physical = n_prog + n_static + n_forc
    info = {
        "grid": [m.grid_lat, m.grid_lon],
        "latent": [m.latent_channels, m.latent_lat, m.latent_lon],
        "input_channels_physical": physical,
        "encoder_input_channels": model.encoder.n_in,
        "prognostic_channels": n_prog,
        "compression_ratio_vs_input": latent / (physical * m.grid_lat * m.grid_lon),
        "compression_ratio_vs_state": latent / (n_prog * m.grid_lat * m.grid_lon),
        "parameters": model.parameter_groups(),
    }
    info["parameters"]["total"] = model.num_parameters()
    return info
