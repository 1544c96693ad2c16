"""Conditioning pathways: seasonal embedding, conditional RMS norm, channel metadata."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import ConfigError, DimensionError, DomainError
from .nn import MLP, ChannelMix, Module, parameter
from .sht import GridSpec, SpectralField, sht_inverse
from .spectral import S2Conv, S2ConvConfig
from .tensor import Tensor, as_tensor, concat, contract, gelu, sqrt, tmean

RMS_EPS = 1e-6


def seasonal_features(months) -> np.ndarray:
    """``[sin(2 pi m / 12), cos(2 pi m / 12)]`` for each month, shape ``(B, 2)``."""
    m = np.atleast_1d(np.asarray(months, dtype=np.float64))
    ang = 2.0 * np.pi * m / 12.0
    return np.stack([np.sin(ang), np.cos(ang)], axis=-1)


def smooth_random_fields(n: int, grid: GridSpec, l_cut: int, rng: np.random.Generator,
                         scale: float = 1.0) -> np.ndarray:
    """Unit-variance-ish band-limited random fields ``(n, n_lat, n_lon)``."""
    l_cut = min(l_cut, grid.default_band()[1])
    coef = rng.standard_normal((n, l_cut + 1, l_cut + 1)) + 1j * rng.standard_normal(
        (n, l_cut + 1, l_cut + 1))
    f = sht_inverse(SpectralField.from_complex(coef), grid).data
    return scale * f / f.std(axis=(-2, -1), keepdims=True)


class SeasonalEmbedding(Module):
    """Month-of-year -> coefficients of a learned basis -> spatial embedding.

    The MLP maps ``(B, 2)`` sin/cos features to ``(B, K)`` coefficients which
    contract against the basis ``SB`` of shape ``(K, C, n_lat, n_lon)``.
    """

    def __init__(self, grid: GridSpec, rng: np.random.Generator, hidden: int = 64,
                 n_basis: int = 3, channels: int = 3):
        self.grid = grid
        self.mlp = MLP(2, hidden, n_basis, rng)
        sb = smooth_random_fields(n_basis * channels, grid, 4, rng, scale=0.5)
        self.SB = parameter(sb.reshape(n_basis, channels, *grid.shape))

    def coefficients(self, features) -> Tensor:
        return self.mlp(as_tensor(features))

    def from_features(self, features) -> Tensor:
        return contract("bk,kchw->bchw", self.coefficients(features), self.SB)

    def __call__(self, months) -> Tensor:
        m = np.atleast_1d(np.asarray(months))
        if np.any((m < 1) | (m > 12)) or np.any(m != np.round(m)):
            raise DomainError(f"month index must be an integer in 1..12, got {m.tolist()}")
        return self.from_features(seasonal_features(m))


def seasonal_embedding(months, p: SeasonalEmbedding) -> Tensor:
    return p(months)


def build_conditioning(forcing, season) -> Tensor:
    """``c_t = [SST, SIC, LSM, e1, e2, e3]`` along the channel axis."""
    f, e = as_tensor(forcing), as_tensor(season)
    if f.shape[-2:] != e.shape[-2:] or f.ndim != e.ndim:
        raise DimensionError(f"forcing grid {f.shape} and seasonal grid {e.shape} differ")
    return concat([f, e], axis=-3)


def rms_normalize(h: Tensor, eps: float = RMS_EPS) -> Tensor:
    """Divide by the root-mean-square over the channel axis at each point."""
    return h / sqrt(tmean(h * h, axis=1, keepdims=True) + eps)


class ConditionalRMSNorm(Module):
    """RMS normalisation with spatially varying affine modulation.

    ``out = RMSNorm(h) * (Gamma(c) + a) + (alpha(c) + b)`` where
    ``Gamma`` and ``alpha`` come from a low-rank S2 convolution of the
    conditioning tensor followed by a GELU and a zero-initialised 1x1
    projection, so the layer starts as a plain RMS-affine map.
    """

    def __init__(self, channels: int, grid: GridSpec, cond_channels: int, cond_rank: int,
                 cond_hidden: int, rng: np.random.Generator, eps: float = RMS_EPS):
        self.channels, self.grid, self.eps = channels, grid, eps
        self.cond_conv = S2Conv(S2ConvConfig(grid, grid, cond_channels, cond_hidden,
                                             rank=cond_rank), rng)
        self.cond_proj = ChannelMix(cond_hidden, 2 * channels, rng, zero_init=True)
        self.a = parameter(np.ones((channels, 1, 1)))
        self.b = parameter(np.zeros((channels, 1, 1)))

    def modulation(self, c: Tensor) -> tuple[Tensor, Tensor]:
        out = self.cond_proj(gelu(self.cond_conv(c)))
        return out[:, : self.channels], out[:, self.channels:]

    def __call__(self, h: Tensor, c: Tensor) -> Tensor:
        if h.shape[-2:] != self.grid.shape or c.shape[-2:] != self.grid.shape:
            raise ConfigError(
                f"conditional norm on {self.grid.shape}: activation {h.shape[-2:]}, "
                f"conditioning {c.shape[-2:]}"
            )
        gamma, alpha = self.modulation(c)
        return rms_normalize(h, self.eps) * (gamma + self.a) + (alpha + self.b)


def spatial_cond_rmsnorm(h: Tensor, c: Tensor, p: ConditionalRMSNorm) -> Tensor:
    return p(h, c)


class ChannelMetadataEmbedding(Module):
    """Per-channel additive bias from learned variable and level embeddings.

    Channel ``k`` with identifiers ``(var, level)`` receives the bias
    ``(E_var[var] + E_level[level]) . w``.
    """

    def __init__(self, channels: Sequence[tuple[str, str]], rng: np.random.Generator,
                 dim: int = 8, var_vocab: Sequence[str] | None = None,
                 level_vocab: Sequence[str] | None = None):
        channels = [(str(v), str(l)) for v, l in channels]
        self.var_vocab = list(var_vocab) if var_vocab is not None else sorted({v for v, _ in channels})
        self.level_vocab = (list(level_vocab) if level_vocab is not None
                            else sorted({l for _, l in channels}))
        vindex = {v: i for i, v in enumerate(self.var_vocab)}
        lindex = {l: i for i, l in enumerate(self.level_vocab)}
        self._var_onehot = np.zeros((len(channels), len(self.var_vocab)))
        self._level_onehot = np.zeros((len(channels), len(self.level_vocab)))
        for k, (v, l) in enumerate(channels):
            if v not in vindex:
                raise ConfigError(f"unknown variable id {v!r} for channel {k}")
            if l not in lindex:
                raise ConfigError(f"unknown level id {l!r} for channel {k}")
            self._var_onehot[k, vindex[v]] = 1.0
            self._level_onehot[k, lindex[l]] = 1.0
        self.channels = channels
        self.var_table = parameter(0.1 * rng.standard_normal((len(self.var_vocab), dim)))
        self.level_table = parameter(0.1 * rng.standard_normal((len(self.level_vocab), dim)))
        self.proj = parameter(rng.standard_normal(dim) / np.sqrt(dim))

    def bias(self) -> Tensor:
        emb = (contract("cv,vd->cd", self._var_onehot, self.var_table)
               + contract("cl,ld->cd", self._level_onehot, self.level_table))
        return contract("cd,d->c", emb, self.proj)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] != len(self.channels):
            raise DimensionError(f"metadata for {len(self.channels)} channels, input has {x.shape[1]}")
        return x + self.bias().reshape(1, -1, 1, 1)


def channel_metadata_embedding(x: Tensor, p: ChannelMetadataEmbedding) -> Tensor:
    return p(x)
