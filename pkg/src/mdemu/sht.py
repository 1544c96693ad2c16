"""Spherical harmonic transforms on equiangular latitude-longitude grids.

Convention: orthonormal harmonics with the Condon-Shortley phase,
``Y_lm = Pbar_lm(cos colat) exp(i m lon)`` and ``int |Y_lm|^2 dOmega = 1``.
A real field ``f`` is represented by its non-negative orders only,

    f = sum_l [ a_l0 Y_l0 + 2 Re sum_{m>0} a_lm Y_lm ],

so the coefficient of a unit constant field is ``sqrt(4 pi)``.

Coefficients are stored as real tensors of shape ``(..., L+1, M+1, 2)``;
the last axis holds real and imaginary parts and entries with ``m > l``
are identically zero.

Two grid layouts are supported:

* pole-inclusive, ``n_lon == 2 (n_lat - 1)`` (e.g. 121 x 240), with
  Clenshaw-Curtis weights;
* cell-centred, ``n_lon == 2 n_lat`` (e.g. 36 x 72, 40 x 80, 18 x 36), with
  Fejer's first rule.

Both integrate polynomials in ``cos colat`` up to degree ``n_lat - 1``
exactly, so analysis followed by synthesis is exact for fields band-limited
to ``l <= (n_lat - 1) / 2``.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .tensor import Tensor, as_tensor, crop_or_pad, primitive


@dataclass(frozen=True)
class GridSpec:
    n_lat: int
    n_lon: int

    def __post_init__(self):
        if self.n_lat < 2 or self.n_lon < 2:
            raise ConfigError(f"grid {self.n_lat}x{self.n_lon} too small")
        if self.n_lon not in (2 * (self.n_lat - 1), 2 * self.n_lat):
            raise ConfigError(
                f"grid {self.n_lat}x{self.n_lon}: need n_lon = 2(n_lat-1) (poles included) "
                "or n_lon = 2 n_lat (cell-centred)"
            )

    @property
    def pole_inclusive(self) -> bool:
        return self.n_lon == 2 * (self.n_lat - 1)

    @property
    def shape(self) -> tuple:
        return (self.n_lat, self.n_lon)

    @functools.cached_property
    def latitudes(self) -> np.ndarray:
        """Degrees, south to north."""
        j = np.arange(self.n_lat)
        if self.pole_inclusive:
            return -90.0 + 180.0 * j / (self.n_lat - 1)
        return -90.0 + 180.0 * (j + 0.5) / self.n_lat

    @functools.cached_property
    def longitudes(self) -> np.ndarray:
        return 360.0 * np.arange(self.n_lon) / self.n_lon

    @functools.cached_property
    def colatitudes(self) -> np.ndarray:
        """Radians, matching the ordering of :attr:`latitudes`."""
        j = np.arange(self.n_lat)[::-1]
        if self.pole_inclusive:
            return np.pi * j / (self.n_lat - 1)
        return np.pi * (j + 0.5) / self.n_lat

    @functools.cached_property
    def quadrature_weights(self) -> np.ndarray:
        """Weights in ``d(cos colat)``; they sum to 2."""
        theta = self.colatitudes
        if self.pole_inclusive:
            n = self.n_lat - 1
            k = np.arange(1, n // 2 + 1)
            b = np.where(2 * k == n, 1.0, 2.0)
            s = (b / (4.0 * k**2 - 1.0)) @ np.cos(2.0 * np.outer(k, theta))
            c = np.full(self.n_lat, 2.0)
            c[0] = c[-1] = 1.0
            return c / n * (1.0 - s)
        n = self.n_lat
        k = np.arange(1, n // 2 + 1)
        s = (1.0 / (4.0 * k**2 - 1.0)) @ np.cos(2.0 * np.outer(k, theta))
        return 2.0 / n * (1.0 - 2.0 * s)

    @functools.cached_property
    def cos_lat(self) -> np.ndarray:
        w = np.cos(np.deg2rad(self.latitudes))
        if self.pole_inclusive:
            w[0] = w[-1] = 0.0
        return w

    def default_band(self) -> tuple[int, int]:
        l_max = self.n_lat - 1
        return l_max, min(l_max, self.n_lon // 2 - 1)


def legendre_table(l_max: int, m_max: int, theta: np.ndarray) -> np.ndarray:
    """Orthonormal associated Legendre values, shape ``(m_max+1, l_max+1, n)``.

    Entries with ``l < m`` are zero.  Sectoral terms are built by the
    normalised product recurrence and tesseral terms by the standard
    three-term recurrence in degree, which stays finite beyond l ~ 150.
    """
    x = np.cos(theta)
    u = np.sin(theta)
    out = np.zeros((m_max + 1, l_max + 1, theta.size))
    pmm = np.full(theta.size, 1.0 / np.sqrt(4.0 * np.pi))
    for m in range(m_max + 1):
        if m > 0:
            pmm = -np.sqrt((2.0 * m + 1.0) / (2.0 * m)) * u * pmm
        if m > l_max:
            break
        out[m, m] = pmm
        if m + 1 <= l_max:
            out[m, m + 1] = np.sqrt(2.0 * m + 3.0) * x * pmm
        for l in range(m + 2, l_max + 1):
            a = np.sqrt((4.0 * l * l - 1.0) / (l * l - m * m))
            b = np.sqrt(((l - 1.0) ** 2 - m * m) / (4.0 * (l - 1.0) ** 2 - 1.0))
            out[m, l] = a * (x * out[m, l - 1] - b * out[m, l - 2])
    return out


class SHTPlan:
    """Precomputed Legendre tables for one grid and band limit; immutable."""

    def __init__(self, grid: GridSpec, l_max: int, m_max: int):
        if l_max > grid.n_lat - 1:
            raise ConfigError(f"l_max={l_max} exceeds grid limit {grid.n_lat - 1}")
        if m_max > l_max or m_max < 0:
            raise ConfigError(f"m_max={m_max} must lie in [0, l_max={l_max}]")
        if m_max >= grid.n_lon // 2:
            raise ConfigError(f"m_max={m_max} reaches longitude Nyquist {grid.n_lon // 2}")
        self.grid, self.l_max, self.m_max = grid, l_max, m_max
        p = legendre_table(l_max, m_max, grid.colatitudes)  # (M, L, H)
        self.synth = np.ascontiguousarray(p)
        self.analysis = np.ascontiguousarray((p * grid.quadrature_weights).transpose(0, 2, 1))
        self.synth.setflags(write=False)
        self.analysis.setflags(write=False)


@functools.lru_cache(maxsize=64)
def get_plan(grid: GridSpec, l_max: int, m_max: int) -> SHTPlan:
    return SHTPlan(grid, l_max, m_max)


@dataclass
class SpectralField:
    """Spherical harmonic coefficients of real fields, ``(..., L+1, M+1, 2)``."""

    coeffs: Tensor

    @property
    def l_max(self) -> int:
        return self.coeffs.shape[-3] - 1

    @property
    def m_max(self) -> int:
        return self.coeffs.shape[-2] - 1

    def to_complex(self) -> np.ndarray:
        c = self.coeffs.data
        return c[..., 0] + 1j * c[..., 1]

    @classmethod
    def from_complex(cls, values: np.ndarray) -> "SpectralField":
        values = np.asarray(values, dtype=complex)
        l_idx = np.arange(values.shape[-2])[:, None]
        m_idx = np.arange(values.shape[-1])[None, :]
        values = np.where(m_idx <= l_idx, values, 0.0)
        values = values.copy()
        values[..., 0] = values[..., 0].real
        return cls(Tensor(np.stack([values.real, values.imag], axis=-1)))


def _to_mnk(a: np.ndarray) -> np.ndarray:
    """``(N0, K, M, 2) -> (M, 2 N0, K)`` for batched matmul over order m."""
    n0, k, m, _ = a.shape
    return a.transpose(2, 0, 3, 1).reshape(m, 2 * n0, k)


def _from_mnk(a: np.ndarray, n0: int) -> np.ndarray:
    m, _, k = a.shape
    return a.reshape(m, n0, 2, k).transpose(1, 3, 0, 2)


def sht_forward(field, grid: GridSpec, l_max: int | None = None,
                m_max: int | None = None) -> SpectralField:
    """Analyse a grid tensor ``(..., n_lat, n_lon)`` into coefficients.

    A longitude FFT is followed by a quadrature-weighted Legendre projection.
    """
    x = as_tensor(field)
    if x.shape[-2:] != grid.shape:
        raise ConfigError(f"field grid {x.shape[-2:]} does not match {grid.shape}")
    dl, dm = grid.default_band()
    l_max = dl if l_max is None else l_max
    m_max = min(l_max, dm) if m_max is None else m_max
    plan = get_plan(grid, l_max, m_max)
    lead = x.shape[:-2]
    n0 = int(np.prod(lead)) if lead else 1
    h, w = grid.shape
    m1, l1 = m_max + 1, l_max + 1
    scale = 2.0 * np.pi / w

    spec = np.fft.rfft(x.data.reshape(n0, h, w), axis=-1)[..., :m1] * scale
    xr = np.stack([spec.real, spec.imag], axis=-1)  # (N0, H, M, 2)
    a = np.matmul(_to_mnk(xr), plan.analysis)  # (M, 2N0, L)
    out = _from_mnk(a, n0).reshape(*lead, l1, m1, 2)

    def back(g):
        g2 = _to_mnk(g.reshape(n0, l1, m1, 2))
        gx = _from_mnk(np.matmul(g2, plan.analysis.transpose(0, 2, 1)), n0)  # (N0,H,M,2)
        z = np.zeros((n0, h, w), dtype=complex)
        z[..., :m1] = gx[..., 0] + 1j * gx[..., 1]
        return ((2.0 * np.pi * np.fft.ifft(z, axis=-1).real).reshape(x.shape),)

    return SpectralField(primitive(np.ascontiguousarray(out), (x,), back, "sht_forward"))


def sht_inverse(coeffs: SpectralField, grid: GridSpec) -> Tensor:
    """Synthesise a real grid tensor ``(..., n_lat, n_lon)``."""
    c = coeffs.coeffs
    l_max, m_max = coeffs.l_max, coeffs.m_max
    plan = get_plan(grid, l_max, m_max)
    lead = c.shape[:-3]
    n0 = int(np.prod(lead)) if lead else 1
    h, w = grid.shape
    m1, l1 = m_max + 1, l_max + 1

    g = _from_mnk(np.matmul(_to_mnk(c.data.reshape(n0, l1, m1, 2)), plan.synth), n0)
    y = np.zeros((n0, h, w // 2 + 1), dtype=complex)
    y[..., :m1] = g[..., 0] + 1j * g[..., 1]
    y[..., 0] = y[..., 0].real
    out = (w * np.fft.irfft(y, n=w, axis=-1)).reshape(*lead, h, w)

    cm = np.full(m1, 2.0)
    cm[0] = 1.0

    def back(gout):
        spec = np.fft.rfft(gout.reshape(n0, h, w), axis=-1)[..., :m1] * cm
        gg = np.stack([spec.real, spec.imag], axis=-1)  # (N0, H, M, 2)
        ga = np.matmul(_to_mnk(gg), plan.synth.transpose(0, 2, 1))
        return (_from_mnk(ga, n0).reshape(c.shape),)

    return primitive(out, (c,), back, "sht_inverse")


def spectral_resample(coeffs: SpectralField, new_l_max: int, new_m_max: int) -> SpectralField:
    """Truncate or zero-extend degree and order modes."""
    if new_m_max > new_l_max:
        raise ConfigError(f"m_max={new_m_max} exceeds l_max={new_l_max}")
    c = coeffs.coeffs
    if (coeffs.l_max, coeffs.m_max) == (new_l_max, new_m_max):
        return coeffs
    shape = c.shape[:-3] + (new_l_max + 1, new_m_max + 1, 2)
    return SpectralField(crop_or_pad(c, shape))


def spectral_energy(coeffs: SpectralField) -> np.ndarray:
    """``int f^2 dOmega`` per leading index, counting both signs of m."""
    c = coeffs.coeffs.data
    e = (c**2).sum(axis=-1)
    e[..., 1:] *= 2.0
    return e.sum(axis=(-2, -1))


def grid_energy(field: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Quadrature estimate of ``int f^2 dOmega``."""
    f2 = np.asarray(field) ** 2
    return (f2.mean(axis=-1) * grid.quadrature_weights).sum(axis=-1) * 2.0 * np.pi
