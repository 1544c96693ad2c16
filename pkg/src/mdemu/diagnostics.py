"""Area-weighted means, climatologies, index regressions and EOF analysis."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, StatsError
from .sht import GridSpec


def _lat_weights(grid: GridSpec, weights: str) -> np.ndarray:
    if weights == "cos":
        return grid.cos_lat
    if weights == "quadrature":
        return grid.quadrature_weights
    raise ConfigError(f"weights must be 'cos' or 'quadrature', got {weights!r}")


def area_weighted_mean(field, grid: GridSpec, weights: str = "cos", mask=None) -> np.ndarray:
    """Weighted mean over the last two axes.

    ``cos`` uses cos(latitude) with zero weight at pole rows; ``quadrature``
    uses the transform's latitude weights, which integrate band-limited
    fields exactly.
    """
    f = np.asarray(field, dtype=np.float64)
    if f.shape[-2:] != grid.shape:
        raise DataError(f"field grid {f.shape[-2:]} does not match {grid.shape}")
    w = np.broadcast_to(_lat_weights(grid, weights)[:, None], grid.shape)
    if mask is not None:
        w = w * mask
    total = w.sum()
    if total <= 0:
        raise ConfigError("averaging region has zero total weight")
    return np.tensordot(f, w, axes=([-2, -1], [0, 1])) / total


def calendar_months(n: int, start_month: int = 1) -> np.ndarray:
    return (np.arange(n) + start_month - 1) % 12 + 1


def climatology_and_anomaly(series, months=None, detrend: bool = False):
    """Per-calendar-month mean and the residual anomalies.

    With ``detrend`` the monthly means and one linear trend in time are
    fitted jointly by least squares, so a series that is exactly
    climatology plus a ramp leaves zero anomalies.
    """
    x = np.asarray(series, dtype=np.float64)
    n = x.shape[0]
    if n < 12 or n % 12:
        raise DataError(f"series of {n} months is not a whole number of years")
    months = calendar_months(n) if months is None else np.asarray(months)
    design = np.zeros((n, 12 + int(detrend)))
    design[np.arange(n), months - 1] = 1.0
    if detrend:
        t = np.arange(n, dtype=np.float64)
        design[:, 12] = (t - t.mean()) / n
    flat = x.reshape(n, -1)
    coef, *_ = np.linalg.lstsq(design, flat, rcond=None)
    anomalies = (flat - design @ coef).reshape(x.shape)
    clim = coef[:12].reshape((12,) + x.shape[1:])
    return clim, anomalies


@dataclass
class IndexSeries:
    values: np.ndarray
    region: dict = field(default_factory=dict)
    base_period: tuple = (0, None)


def standardized(index) -> np.ndarray:
    v = np.asarray(getattr(index, "values", index), dtype=np.float64)
    v = v - v.mean()
    sd = v.std()
    if not sd > 1e-14 * max(1.0, np.abs(v).max()):
        raise StatsError("index has zero variance")
    return v / sd


def regression_map(anomalies, index) -> np.ndarray:
    """Least-squares slope of each point on the standardized index."""
    a = np.asarray(anomalies, dtype=np.float64)
    idx = standardized(index)
    if a.shape[0] != idx.shape[0]:
        raise DataError(f"time axes differ: field {a.shape[0]}, index {idx.shape[0]}")
    a = a - a.mean(axis=0)
    return np.tensordot(idx, a, axes=(0, 0)) / (idx @ idx)


def region_mask(grid: GridSpec, lat: tuple, lon: tuple) -> np.ndarray:
    la = grid.latitudes[:, None]
    lo = grid.longitudes[None, :]
    lon0, lon1 = lon[0] % 360.0, lon[1] % 360.0
    in_lon = (lo >= lon0) & (lo <= lon1) if lon0 <= lon1 else (lo >= lon0) | (lo <= lon1)
    return ((la >= lat[0]) & (la <= lat[1]) & in_lon).astype(np.float64)


NINO34 = {"lat": (-5.0, 5.0), "lon": (190.0, 240.0)}


def nino_index(sst, grid: GridSpec, months=None, region: dict | None = None,
               base_period: tuple = (0, None)) -> IndexSeries:
    """Region-mean SST anomaly, standardized over the base period."""
    region = dict(region or NINO34)
    mask = region_mask(grid, region["lat"], region["lon"])
    if mask.sum() == 0 or (grid.cos_lat[:, None] * mask).sum() == 0:
        raise ConfigError(f"index region {region} contains no grid points")
    series = area_weighted_mean(sst, grid, mask=mask)
    months = calendar_months(len(series)) if months is None else np.asarray(months)
    b0, b1 = base_period
    base = slice(b0, b1)
    clim = np.zeros(12)
    for m in range(1, 13):
        sel = months[base] == m
        if not sel.any():
            raise DataError(f"base period lacks calendar month {m}")
        clim[m - 1] = series[base][sel].mean()
    anom = series - clim[months - 1]
    mu, sd = anom[base].mean(), anom[base].std()
    if not sd > 0:
        return IndexSeries(np.zeros_like(anom), region, base_period)
    return IndexSeries((anom - mu) / sd, region, base_period)


@dataclass
class EofResult:
    patterns: np.ndarray  # (modes, H, W), unit norm under the area-weighted inner product
    pcs: np.ndarray  # (T, modes)
    explained: np.ndarray
    weights: np.ndarray  # (H, W) area weights applied
    warning: str | None = None


def _eof_weights(grid: GridSpec, lat_band) -> np.ndarray:
    w = np.broadcast_to(grid.cos_lat[:, None], grid.shape).copy()
    if lat_band is not None:
        la = grid.latitudes[:, None]
        w *= (la >= lat_band[0]) & (la <= lat_band[1])
    return w


def eof(anomalies, grid: GridSpec, n_modes: int = 1, lat_band=None) -> EofResult:
    """EOFs of the cos-latitude-weighted covariance via an SVD of ``X sqrt(w)``."""
    a = np.asarray(anomalies, dtype=np.float64)
    T = a.shape[0]
    if T < n_modes:
        raise DataError(f"{T} time samples cannot support {n_modes} modes")
    w = _eof_weights(grid, lat_band)
    sw = np.sqrt(w).reshape(-1)
    X = (a - a.mean(axis=0)).reshape(T, -1) * sw
    U, S, Vt = np.linalg.svd(X, full_matrices=False)
    var = S ** 2
    explained = var[:n_modes] / var.sum()
    live = sw > 0
    patterns = np.zeros((n_modes, sw.size))
    patterns[:, live] = Vt[:n_modes, live] / sw[live]
    pcs = U[:, :n_modes] * S[:n_modes]
    patterns = patterns.reshape((n_modes,) + grid.shape)
    north = grid.latitudes[:, None] >= 0
    for k in range(n_modes):
        i, _ = np.unravel_index(np.argmax(np.abs(patterns[k])), grid.shape)
        hemi = north if north[i, 0] else ~north
        hw = w * hemi
        if (patterns[k] * hw).sum() < 0:
            patterns[k] *= -1
            pcs[:, k] *= -1
    msg = None
    if n_modes >= 1 and len(var) > 1 and var[0] > 0:
        # North et al. rule of thumb for sampling error of eigenvalues
        if var[0] - var[1] < var[0] * np.sqrt(2.0 / T):
            msg = "leading eigenvalues are not separated beyond sampling error"
            warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return EofResult(patterns, pcs, explained, w, msg)


def project(fields, pattern, weights) -> np.ndarray:
    """PC series of ``fields`` on a pattern with the weighting used to fit it."""
    f = np.asarray(fields, dtype=np.float64)
    return np.tensordot(f, np.asarray(pattern) * weights, axes=([-2, -1], [0, 1]))


def pattern_correlation(a, b, weights) -> float:
    a = np.asarray(a) - (a * weights).sum() / weights.sum()
    b = np.asarray(b) - (b * weights).sum() / weights.sum()
    return float((a * b * weights).sum() / np.sqrt((a * a * weights).sum() * (b * b * weights).sum()))


def weighted_inner(a, b, weights) -> float:
    return float((np.asarray(a) * np.asarray(b) * weights).sum())


@dataclass
class EnsembleEof:
    eof: EofResult
    pcs: np.ndarray  # (members, T) projections on the leading pattern
    member_pc_std: float
    ensemble_mean_pc_rms: float


def ensemble_eof(field, months, grid: GridSpec, n_modes: int = 2, lat_band=None,
                 detrend: bool = True) -> EnsembleEof:
    """Leading EOF of pooled per-member anomalies and each member's PC on it.

    ``field`` is ``(members, T, H, W)`` with ``T`` a whole number of years.
    Each member is anomalized against its own calendar-month climatology, so
    a forced signal common to all members is removed before pooling.
    """
    f = np.asarray(field, dtype=np.float64)
    M, T = f.shape[:2]
    anoms = np.stack([climatology_and_anomaly(f[m], months, detrend=detrend)[1] for m in range(M)])
    res = eof(anoms.reshape((M * T,) + grid.shape), grid, n_modes, lat_band)
    pcs = np.stack([project(anoms[m], res.patterns[0], res.weights) for m in range(M)])
    return EnsembleEof(res, pcs, float(pcs.std(axis=1).mean()),
                       float(np.sqrt((pcs.mean(axis=0) ** 2).mean())))
