"""Learned spectral layers: the low-rank tensor-product operator and S2 convolutions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .nn import Module, parameter
from .sht import GridSpec, SpectralField, sht_forward, sht_inverse, spectral_resample
from .tensor import Tensor, contract


def _triangle(l1: int, m1: int) -> np.ndarray:
    return (np.arange(m1)[None, :] <= np.arange(l1)[:, None]).astype(np.float64)


def _lowpass_factor(n_rank: int, n_modes: int, rng: np.random.Generator) -> np.ndarray:
    """Rows with a decaying mode profile and mild random texture, unit norm."""
    k = np.arange(n_modes)
    width = max(n_modes / 3.0, 1.0)
    prof = np.exp(-0.5 * (k / width) ** 2)
    f = prof * (1.0 + 0.5 * rng.standard_normal((n_rank, n_modes)))
    return f / np.linalg.norm(f, axis=1, keepdims=True)


class TensorProductOperator(Module):
    """Low-rank spectral operator ``(B, C_in, L, M) -> (B, C_out, L, M)``.

    Channels are projected to rank ``R``; each rank component is contracted
    against the rank-1 spectral pattern ``A[r] (x) B[r]`` to one coefficient,
    re-expanded along the same pattern, and projected to the output channels.
    Real factors act identically on the real and imaginary parts.
    """

    def __init__(self, c_in: int, c_out: int, n_l: int, n_m: int, rank: int,
                 rng: np.random.Generator, separate_synthesis: bool = False):
        if rank < 1:
            raise ConfigError(f"operator rank must be positive, got {rank}")
        self.c_in, self.c_out, self.n_l, self.n_m, self.rank = c_in, c_out, n_l, n_m, rank
        self.W_in = parameter(rng.standard_normal((c_in, rank)) / np.sqrt(c_in))
        self.A = parameter(_lowpass_factor(rank, n_l, rng))
        self.B = parameter(_lowpass_factor(rank, n_m, rng))
        self.W_out = parameter(rng.standard_normal((rank, c_out)) / np.sqrt(rank))
        if separate_synthesis:
            self.A_syn = parameter(self.A.data.copy())
            self.B_syn = parameter(self.B.data.copy())
        self._mask = _triangle(n_l, n_m)
        expected = c_in * rank + rank * n_l + rank * n_m + rank * c_out
        if separate_synthesis:
            expected += rank * (n_l + n_m)
        assert self.num_parameters() == expected

    def closed_form_count(self) -> int:
        return self.c_in * self.rank + self.rank * (self.n_l + self.n_m) + self.rank * self.c_out

    def _pattern(self, a: Tensor, b: Tensor) -> Tensor:
        return contract("rl,rm,lm->rlm", a, b, self._mask)

    def __call__(self, x: SpectralField) -> SpectralField:
        c = x.coeffs
        if c.ndim != 5 or c.shape[1:4] != (self.c_in, self.n_l, self.n_m):
            raise ConfigError(
                f"operator expects (B, {self.c_in}, {self.n_l}, {self.n_m}, 2), got {c.shape}"
            )
        analysis = self._pattern(self.A, self.B)
        synthesis = (self._pattern(self.A_syn, self.B_syn) if hasattr(self, "A_syn")
                     else analysis)
        # project onto each rank pattern first, then mix channels: the
        # (B, R, L, M) intermediate is never formed
        p = contract("bclmz,rlm->bcrz", c, analysis)
        s = contract("bcrz,cr->brz", p, self.W_in)
        q = contract("brz,ro->borz", s, self.W_out)
        return SpectralField(contract("borz,rlm->bolmz", q, synthesis))


def tp_operator_apply(x: SpectralField, op: TensorProductOperator) -> SpectralField:
    return op(x)


@dataclass(frozen=True)
class S2ConvConfig:
    in_grid: GridSpec
    out_grid: GridSpec
    c_in: int
    c_out: int
    rank: int | None = None  # None -> resample only
    residual: bool = False
    l_max: int | None = None  # analysis band; defaults to the input grid's limit
    separate_synthesis: bool = False

    def in_band(self) -> tuple[int, int]:
        li, mi = self.in_grid.default_band()
        if self.l_max is None:
            return li, mi
        return self.l_max, min(self.l_max, mi)

    def out_band(self) -> tuple[int, int]:
        return self.out_grid.default_band()


class S2Conv(Module):
    """Grid -> spherical harmonics -> (operator | nothing) -> resample -> grid.

    Analysis runs at the input grid's band limit, the optional learned
    operator acts there, and modes are then truncated or zero-extended to the
    output grid's band limit before synthesis.  With ``residual`` the input
    is added back through a learned scalar gate that starts at zero; this
    needs matching grids and channel counts.
    """

    def __init__(self, cfg: S2ConvConfig, rng: np.random.Generator):
        self.cfg = cfg
        if cfg.rank is None and cfg.c_in != cfg.c_out:
            raise ConfigError("resample-only S2 convolution cannot change channel count")
        if cfg.residual and (cfg.in_grid != cfg.out_grid or cfg.c_in != cfg.c_out):
            raise ConfigError(
                f"residual needs identical shapes: {cfg.c_in}@{cfg.in_grid.shape} vs "
                f"{cfg.c_out}@{cfg.out_grid.shape}"
            )
        self.l_in, self.m_in = cfg.in_band()
        self.l_out, self.m_out = cfg.out_band()
        self.op = None
        if cfg.rank is not None:
            self.op = TensorProductOperator(cfg.c_in, cfg.c_out, self.l_in + 1, self.m_in + 1,
                                            cfg.rank, rng, cfg.separate_synthesis)
        self.gate = parameter(np.zeros(())) if cfg.residual else None

    @property
    def resample_only(self) -> bool:
        return self.op is None

    def __call__(self, x: Tensor) -> Tensor:
        cfg = self.cfg
        if x.ndim != 4 or x.shape[-2:] != cfg.in_grid.shape or x.shape[1] != cfg.c_in:
            raise ConfigError(
                f"S2Conv expects (B, {cfg.c_in}, {cfg.in_grid.n_lat}, {cfg.in_grid.n_lon}), "
                f"got {x.shape}"
            )
        if self.op is None and cfg.in_grid == cfg.out_grid and self.gate is None:
            # analysis at l = n_lat - 1 is not exact, so skip the round trip
            return x
        coeffs = sht_forward(x, cfg.in_grid, self.l_in, self.m_in)
        if self.op is not None:
            coeffs = self.op(coeffs)
        coeffs = spectral_resample(coeffs, self.l_out, self.m_out)
        y = sht_inverse(coeffs, cfg.out_grid)
        if self.gate is not None:
            y = y + self.gate * x
        return y


def s2_conv(x: Tensor, layer: S2Conv) -> Tensor:
    return layer(x)


def resampler(in_grid: GridSpec, out_grid: GridSpec, channels: int) -> S2Conv:
    """Parameter-free spectral resampling between grids."""
    return S2Conv(S2ConvConfig(in_grid, out_grid, channels, channels), np.random.default_rng(0))
