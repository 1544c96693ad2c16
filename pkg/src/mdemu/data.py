"""Variable transforms, standardization, monthly datasets and a synthetic generator."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import DataConfig, ModelConfig, split_name
from .errors import ConfigError, DataError, StatsError
from .io import load_tensor, read_manifest, save_tensor, write_manifest
from .sht import GridSpec

DELTA = 1e-6
KINDS = ("unbounded", "non-negative", "bounded01")

NONNEG_VARS = {"mtpr", "tp", "q"}
BOUNDED_VARS = {"tcc", "sic", "ci"}


def kind_of(name: str) -> str:
    var, _ = split_name(name)
    if var in NONNEG_VARS:
        return "non-negative"
    if var in BOUNDED_VARS:
        return "bounded01"
    return "unbounded"


@dataclass
class VariableSpec:
    name: str
    kind: str = "unbounded"
    mean: float = 0.0
    std: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown variable kind {self.kind!r} for {self.name}")
        if not self.std > 0:
            raise StatsError(f"channel {self.name}: std must be positive, got {self.std}")

    def to_dict(self) -> dict:
        return {"name": self.name, "kind": self.kind, "mean": self.mean, "std": self.std}


def _check_domain(x: np.ndarray, spec: VariableSpec, channel: int) -> None:
    if spec.kind == "non-negative":
        bad = np.argwhere(~(x >= 0))
    elif spec.kind == "bounded01":
        bad = np.argwhere(~((x >= 0) & (x <= 1)))
    else:
        bad = np.argwhere(~np.isfinite(x))
    if bad.size:
        idx = tuple(int(i) for i in bad[0])
        raise DataError(
            f"channel {channel} ({spec.name}, {spec.kind}): value {x[idx]!r} at index {idx} "
            "is outside the variable's domain"
        )


def transform_raw(x: np.ndarray, spec: VariableSpec, channel: int = 0) -> np.ndarray:
    """Kind-specific transform before standardization."""
    x = np.asarray(x, dtype=np.float64)
    _check_domain(x, spec, channel)
    if spec.kind == "non-negative":
        return np.sqrt(x)
    if spec.kind == "bounded01":
        p = np.clip(x, DELTA, 1.0 - DELTA)
        return np.log(p) - np.log1p(-p)
    return x


def untransform_raw(y: np.ndarray, spec: VariableSpec) -> np.ndarray:
    if spec.kind == "non-negative":
        return y * y
    if spec.kind == "bounded01":
        return 0.5 * (1.0 + np.tanh(0.5 * y))
    return y


def forward_transform(x_raw: np.ndarray, specs: list[VariableSpec]) -> np.ndarray:
    """Per-channel transform and standardization; channels on axis -3."""
    x_raw = np.asarray(x_raw, dtype=np.float64)
    if x_raw.shape[-3] != len(specs):
        raise DataError(f"{len(specs)} variable specs for {x_raw.shape[-3]} channels")
    out = np.empty_like(x_raw)
    for k, sp in enumerate(specs):
        out[..., k, :, :] = (transform_raw(x_raw[..., k, :, :], sp, k) - sp.mean) / sp.std
    return out


def inverse_transform(x_std: np.ndarray, specs: list[VariableSpec], clamp: bool = True) -> np.ndarray:
    x_std = np.asarray(x_std, dtype=np.float64)
    if x_std.shape[-3] != len(specs):
        raise DataError(f"{len(specs)} variable specs for {x_std.shape[-3]} channels")
    out = np.empty_like(x_std)
    for k, sp in enumerate(specs):
        v = untransform_raw(x_std[..., k, :, :] * sp.std + sp.mean, sp)
        if clamp and sp.kind == "bounded01":
            v = np.clip(v, 0.0, 1.0)
        out[..., k, :, :] = v
    return out


def compute_stats(x_raw: np.ndarray, names: list[str], kinds: list[str] | None = None) -> list[VariableSpec]:
    """Mean and std in transformed space over axis 0 and the grid, per channel.

    Pass only the training block; nothing else is looked at.
    """
    x_raw = np.asarray(x_raw, dtype=np.float64)
    if x_raw.shape[0] == 0:
        raise StatsError("cannot compute statistics of an empty split")
    kinds = kinds or [kind_of(n) for n in names]
    specs = []
    for k, (name, kind) in enumerate(zip(names, kinds)):
        y = transform_raw(x_raw[:, k], VariableSpec(name, kind), k)
        mean, std = float(y.mean()), float(y.std())
        if not std > 1e-12 * max(1.0, abs(mean)):
            raise StatsError(f"channel {k} ({name}) has zero variance in the training split")
        specs.append(VariableSpec(name, kind, mean, std))
    return specs


def standardize_static(s: np.ndarray, names: list[str]) -> tuple[np.ndarray, list[VariableSpec]]:
    specs = compute_stats(s[None], names)
    return forward_transform(s, specs), specs


@dataclass
class MonthlyDataset:
    """Raw physical fields on a monthly axis.

    ``x`` is ``(T, P, H, W)``, ``f`` is ``(T, 3, H, W)``, ``s`` is ``(S, H, W)``;
    ``months`` holds the calendar month 1..12 of each step.  Splits are
    contiguous: validation, then training, then test.
    """

    grid: GridSpec
    months: np.ndarray
    x: np.ndarray
    f: np.ndarray
    s: np.ndarray
    prognostic: list
    forcing: list
    static: list
    n_val: int
    n_train: int
    n_test: int
    seed: int = 0
    planted: dict = field(default_factory=dict)
    index_region: dict = field(default_factory=dict)

    def __post_init__(self):
        T = self.x.shape[0]
        if self.f.shape[0] != T or len(self.months) != T:
            raise DataError("x, f and months must share the time axis")
        if self.n_val + self.n_train + self.n_test != T:
            raise DataError(f"splits {self.n_val}+{self.n_train}+{self.n_test} != {T} months")
        if min(self.n_train, self.n_val) < 2:
            raise ConfigError("training and validation splits need at least two months each")
        for name, block, names in (("x", self.x, self.prognostic), ("f", self.f, self.forcing)):
            if block.shape[1] != len(names):
                raise DataError(f"block {name} has {block.shape[1]} channels, names {len(names)}")
        for k, name in enumerate(self.prognostic):
            _check_domain(self.x[:, k], VariableSpec(name, kind_of(name)), k)
        for k, name in enumerate(self.forcing):
            _check_domain(self.f[:, k], VariableSpec(name, kind_of(name)), k)
        for arr in (self.months, self.x, self.f, self.s):
            arr.setflags(write=False)

    @property
    def n_months(self) -> int:
        return self.x.shape[0]

    def split(self, name: str) -> slice:
        a, b = self.n_val, self.n_val + self.n_train
        bounds = {"val": slice(0, a), "train": slice(a, b), "test": slice(b, self.n_months)}
        if name not in bounds:
            raise ConfigError(f"unknown split {name!r}")
        return bounds[name]

    def pairs(self, name: str) -> np.ndarray:
        """Start indices t with both t and t+1 inside the split."""
        sl = self.split(name)
        return np.arange(sl.start, sl.stop - 1)

    def x_specs(self) -> list[VariableSpec]:
        return compute_stats(self.x[self.split("train")], self.prognostic)

    def f_specs(self) -> list[VariableSpec]:
        return compute_stats(self.f[self.split("train")], self.forcing)

    def s_specs(self) -> list[VariableSpec]:
        return compute_stats(self.s[None], self.static)


@dataclass
class StandardizedData:
    x: np.ndarray
    f: np.ndarray
    s: np.ndarray
    months: np.ndarray
    x_specs: list
    f_specs: list
    s_specs: list


def standardize(ds: MonthlyDataset, x_specs=None, f_specs=None, s_specs=None) -> StandardizedData:
    x_specs = x_specs or ds.x_specs()
    f_specs = f_specs or ds.f_specs()
    s_specs = s_specs or ds.s_specs()
    return StandardizedData(
        forward_transform(ds.x, x_specs), forward_transform(ds.f, f_specs),
        forward_transform(ds.s, s_specs), np.asarray(ds.months), x_specs, f_specs, s_specs,
    )


# -- synthetic generator ---------------------------------------------------

_UNITS = {
    # mean, unit of the dimensionless structure
    "skt": (288.0, 2.0),
    "t2m": (287.0, 2.0),
    "d2m": (281.0, 2.0),
    "sp": (98500.0, 300.0),
    "u10": (0.5, 2.0),
    "v10": (0.0, 1.5),
    "z": (5.5e4, 150.0),
    "u": (8.0, 4.0),
    "v": (0.0, 2.0),
    "t": (250.0, 2.0),
}
_LEVEL_SCALE = {"1000": 0.1, "850": 0.3, "700": 0.5, "500": 1.0, "250": 1.9, "100": 2.9, "50": 3.7}
MODE_AMPLITUDES = (1.0, 0.6, 0.35)
# surface temperatures are largely slaved to SST: weaker internal variability (K)
_INTERNAL_UNIT = {"skt": 0.5, "t2m": 0.8}


def _smooth_fields(n: int, grid: GridSpec, l_cut: int, rng: np.random.Generator) -> np.ndarray:
    from .conditioning import smooth_random_fields

    return smooth_random_fields(n, grid, l_cut, rng)


def _red_noise(T: int, grid: GridSpec, phi: float, rng: np.random.Generator, l_cut: int = 5) -> np.ndarray:
    eps = _smooth_fields(T, grid, l_cut, rng)
    out = np.empty_like(eps)
    out[0] = eps[0]
    c = np.sqrt(1.0 - phi * phi)
    for t in range(1, T):
        out[t] = phi * out[t - 1] + c * eps[t]
    return out


def _ar1(T: int, phi: float, rng: np.random.Generator) -> np.ndarray:
    e = rng.standard_normal(T)
    out = np.empty(T)
    out[0] = e[0]
    c = np.sqrt(1.0 - phi * phi)
    for t in range(1, T):
        out[t] = phi * out[t - 1] + c * e[t]
    return out


NINO34 = {"lat": [-5.0, 5.0], "lon": [190.0, 240.0]}


def enso_pattern(grid: GridSpec) -> np.ndarray:
    lat = grid.latitudes[:, None]
    lon = grid.longitudes[None, :]
    return np.exp(-0.5 * (lat / 12.0) ** 2 - 0.5 * ((lon - 215.0) / 35.0) ** 2)


def generate_synthetic(model: ModelConfig, data: DataConfig) -> MonthlyDataset:
    """Monthly fields with a planted linear response to SST.

    SST is a meridional climatology with a seasonal cycle, a slow trend, a
    globally coherent AR(1) mode, an oscillatory equatorial mode in the
    Nino-3.4 box and small-scale red noise.

    Every prognostic channel is ``mean + unit * (climatology + seasonal +
    internal)``.  Internal variability is a few AR(1) modes shared by all
    channels (each with its own large-scale loading pattern) plus weaker
    independent red noise, so the state has low-dimensional dynamics an
    autoencoder can capture.  ``skt`` and ``t2m`` also respond to the SST
    departure from its long-term mean field, with coefficients recorded in
    :attr:`MonthlyDataset.planted`.
    """
    grid = GridSpec(model.grid_lat, model.grid_lon)
    T = data.n_val + data.n_train + data.n_test
    rng = np.random.default_rng(data.seed)
    lat = np.deg2rad(grid.latitudes)[:, None] * np.ones((1, grid.n_lon))
    sinlat = np.sin(lat)
    months = (np.arange(T) + data.start_month - 1) % 12 + 1
    season = np.cos(2.0 * np.pi * (months - 1) / 12.0)[:, None, None]
    years = np.arange(T)[:, None, None] / 12.0

    # forcings
    lsm = (_smooth_fields(1, grid, 3, rng)[0] > 0.4).astype(np.float64)
    sst_clim = 301.0 - 30.0 * sinlat ** 2 - 3.0 * season * sinlat
    glob = 0.9 * _ar1(T, 0.9, rng)[:, None, None]
    osc = (1.5 * np.sin(2.0 * np.pi * np.arange(T) / 46.0 + rng.uniform(0, 2 * np.pi))
           * (1.0 + 0.3 * _ar1(T, 0.95, rng)))[:, None, None]
    sst = (sst_clim + 0.02 * years + glob + osc * enso_pattern(grid)
           + 0.3 * _red_noise(T, grid, 0.7, rng))
    sic = 1.0 / (1.0 + np.exp((sst - 271.5) / 1.0))
    sic = np.where(sic < 1e-4, 0.0, sic)
    f = np.stack([sst, sic, np.broadcast_to(lsm, sst.shape)], axis=1)
    sst_anom = sst - sst.mean(axis=0, keepdims=True)

    # shared internal modes
    amps = np.asarray(MODE_AMPLITUDES)
    modes = np.stack([_ar1(T, 0.85, rng) for _ in amps], axis=1)  # (T, K)
    base_patterns = _smooth_fields(len(amps), grid, 3, rng)

    sens = {"skt": data.sensitivity_skt, "t2m": data.sensitivity_t2m}
    xs = []
    for name in model.prognostic:
        var, level = split_name(name)
        own = _smooth_fields(len(amps) + 1, grid, 3, rng)
        loadings = base_patterns + 0.4 * own[:-1]
        loadings /= loadings.std(axis=(-2, -1), keepdims=True)
        phase = rng.uniform(0, 2 * np.pi)
        seas = 0.8 * sinlat * np.cos(2.0 * np.pi * (months - 1) / 12.0 + phase)[:, None, None]
        clim = 2.0 * (np.cos(lat) ** 2 - 0.5) + 0.5 * own[-1]
        internal = (np.einsum("tk,k,khw->thw", modes, amps, loadings)
                    + 0.25 * _red_noise(T, grid, 0.5, rng, l_cut=4))
        if var == "mtpr":
            root = np.maximum(2.0 + 0.3 * clim + 0.3 * seas + 0.35 * internal, 0.0)
            x = 4e-6 * root ** 2
        elif var in BOUNDED_VARS:
            x = 1.0 / (1.0 + np.exp(-(0.3 + 0.6 * clim + 0.5 * seas + 0.8 * internal)))
        elif var == "q":
            root = np.maximum(2.0 + 0.3 * clim + 0.3 * seas + 0.35 * internal, 0.0)
            x = 1e-3 * root ** 2 / _LEVEL_SCALE.get(level, 1.0)
        else:
            m0, unit = _UNITS.get(var, (0.0, 1.0))
            scale = _LEVEL_SCALE.get(level, 1.0) if var in ("z", "u", "v") else 1.0
            u_int = _INTERNAL_UNIT.get(var, unit) if level == "sfc" else unit * scale
            x = m0 * (scale if var == "z" else 1.0) + unit * scale * (clim + seas) + u_int * internal
        if var in sens and level == "sfc":
            x = x + sens[var] * sst_anom
        xs.append(x)
    x = np.stack(xs, axis=1)

    statics = [_smooth_fields(1, grid, 2 + 2 * k, rng)[0] for k in range(len(model.static))]
    s = np.stack(statics) if statics else np.zeros((0,) + grid.shape)

    planted = {name: sens[split_name(name)[0]] for name in model.prognostic
               if split_name(name)[0] in sens and split_name(name)[1] == "sfc"}
    return MonthlyDataset(
        grid, months, x, f, s, list(model.prognostic), list(model.forcing), list(model.static),
        data.n_val, data.n_train, data.n_test, data.seed, planted, dict(NINO34),
    )


# -- disk format -----------------------------------------------------------

def save_dataset(ds: MonthlyDataset, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_tensor(d / "x.smt", ds.x)
    save_tensor(d / "f.smt", ds.f)
    save_tensor(d / "s.smt", ds.s)
    save_tensor(d / "months.smt", ds.months.astype(np.float64))
    write_manifest(d / "dataset.json", {
        "grid": [ds.grid.n_lat, ds.grid.n_lon],
        "prognostic": [{"name": n, "kind": kind_of(n)} for n in ds.prognostic],
        "forcing": list(ds.forcing),
        "static": list(ds.static),
        "splits": {"val": ds.n_val, "train": ds.n_train, "test": ds.n_test},
        "seed": ds.seed,
        "planted_sst_sensitivity": ds.planted,
        "index_region": ds.index_region,
    })


def load_dataset(directory) -> MonthlyDataset:
    d = Path(directory)
    if not (d / "dataset.json").exists():
        raise DataError(f"no dataset manifest in {d}")
    man = read_manifest(d / "dataset.json")
    sp = man["splits"]
    return MonthlyDataset(
        GridSpec(*man["grid"]), load_tensor(d / "months.smt").astype(int),
        load_tensor(d / "x.smt"), load_tensor(d / "f.smt"), load_tensor(d / "s.smt"),
        [p["name"] for p in man["prognostic"]], man["forcing"], man["static"],
        sp["val"], sp["train"], sp["test"], man["seed"], man["planted_sst_sensitivity"],
        man["index_region"],
    )
