"""Run configuration and its plain-text (INI) representation.

Defaults are the full-scale 1.5-degree settings; :func:`toy_config`
gives the desk-scale profile used by the tests and demos.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError

FULL_SURFACE = ["skt", "mtpr", "d2m", "t2m", "sp", "u10", "v10"]
FULL_UPPER = ["u", "v", "q", "t", "z"]
FULL_LEVELS = ["1000", "850", "700", "500", "250", "100", "50"]
FULL_STATIC = ["anor", "isor", "slor", "sdor"]
FORCING = ["sst", "sic", "lsm"]


def full_prognostic_names() -> list[str]:
    return FULL_SURFACE + [f"{v}@{lev}" for v in FULL_UPPER for lev in FULL_LEVELS]


def split_name(name: str) -> tuple[str, str]:
    """``"u@850" -> ("u", "850")``; single-level names get level ``"sfc"``."""
    var, _, level = name.partition("@")
    return var, level or "sfc"


@dataclass
class ModelConfig:
    grid_lat: int = 121
    grid_lon: int = 240
    latent_lat: int = 40
    latent_lon: int = 80
    prognostic: list = field(default_factory=full_prognostic_names)
    static: list = field(default_factory=lambda: list(FULL_STATIC))
    forcing: list = field(default_factory=lambda: list(FORCING))
    latent_channels: int = 32
    season_channels: int = 3
    season_hidden: int = 64
    hidden_enc: int = 32
    hidden_dec: int = 32
    hidden_pred: int = 32
    rank_enc: int = 64
    rank_dec: int = 256
    rank_pred: int = 128
    mixer_width: int = 128
    cond_rank_enc: int = 2
    cond_rank_dec: int = 4
    cond_rank_pred: int = 2
    cond_hidden_enc: int = 4
    cond_hidden_dec: int = 2
    cond_hidden_pred: int = 4
    meta_dim: int = 8
    time_embed_dim: int = 32
    time_channels: int = 5
    logvar_clamp: float = 12.0
    decoder_static: bool = False
    separate_synthesis: bool = False
    init_seed: int = 0

    @property
    def cond_channels(self) -> int:
        return len(self.forcing) + self.season_channels


@dataclass
class DiffusionConfig:
    steps: int = 15
    offset: float = 0.008
    beta_max: float = 0.999


@dataclass
class LossWeights:
    rec: float = 1.0
    diff: float = 0.5
    kl: float = 0.01
    std: float = 1.0
    mean: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"loss weight {f.name} must be nonnegative")


@dataclass
class OptimConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    ema_decay: float = 0.995
    grad_cap: float = 1e3


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 4
    seed: int = 0
    couple_target: bool = False


@dataclass
class DataConfig:
    n_val: int = 72
    n_train: int = 361
    n_test: int = 96
    seed: int = 0
    start_month: int = 1
    sensitivity_skt: float = 0.8
    sensitivity_t2m: float = 0.6


@dataclass
class PathsConfig:
    data: str = "data"
    checkpoint: str = "checkpoint"
    rollout: str = "rollout"


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        for sec in fields(self):
            obj = getattr(self, sec.name)
            cp[sec.name] = {f.name: _fmt(getattr(obj, f.name)) for f in fields(obj)}
        lines = []
        for sec in cp.sections():
            lines.append(f"[{sec}]")
            lines.extend(f"{k} = {v}" for k, v in cp[sec].items())
            lines.append("")
        return "\n".join(lines)

    def save(self, path) -> None:
        Path(path).write_text(self.to_ini())

    @classmethod
    def from_ini(cls, text: str) -> "Config":
        cp = configparser.ConfigParser()
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"unreadable config: {exc}") from exc
        cfg = cls()
        for sec in fields(cfg):
            if not cp.has_section(sec.name):
                continue
            obj = getattr(cfg, sec.name)
            known = {f.name: f for f in fields(obj)}
            for key, raw in cp[sec.name].items():
                if key not in known:
                    raise ConfigError(f"unknown config key [{sec.name}] {key}")
                setattr(obj, key, _parse(raw, getattr(obj, key)))
            if hasattr(obj, "__post_init__"):
                obj.__post_init__()
        return cfg

    @classmethod
    def load(cls, path) -> "Config":
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} not found")
        return cls.from_ini(p.read_text())

    def copy(self) -> "Config":
        return Config.from_ini(self.to_ini())


def _fmt(v) -> str:
    if isinstance(v, list):
        return ", ".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, list):
            return [x.strip() for x in raw.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"cannot parse {raw!r} as {type(default).__name__}") from exc
    return raw


TOY_PROGNOSTIC = ["skt", "t2m", "z@500", "u@250", "mtpr", "tcc"]


def toy_config(seed: int = 0) -> Config:
    """18 x 36 grid, six prognostic channels, 64 training pairs."""
    cfg = Config()
    m = cfg.model
    m.grid_lat, m.grid_lon = 18, 36
    m.latent_lat, m.latent_lon = 6, 12
    m.prognostic = list(TOY_PROGNOSTIC)
    m.latent_channels = 8
    m.hidden_enc = m.hidden_dec = m.hidden_pred = 16
    m.season_hidden = 64
    m.init_seed = seed
    cfg.train.seed = seed
    cfg.data.seed = seed
    cfg.data.n_val, cfg.data.n_train, cfg.data.n_test = 12, 65, 480
    return cfg


def small_model_config() -> ModelConfig:
    """Reduced networks for finite-difference checks (18 x 36 grid, latent 4 x 6 x 12)."""
    m = ModelConfig(grid_lat=18, grid_lon=36, latent_lat=6, latent_lon=12)
    m.prognostic = ["a", "b", "c@500", "d@250"]
    m.static = ["s0"]
    m.latent_channels = 4
    m.hidden_enc = m.hidden_dec = m.hidden_pred = 3
    m.rank_enc = m.rank_dec = m.rank_pred = 2
    m.mixer_width = 3
    m.cond_rank_enc = m.cond_rank_dec = m.cond_rank_pred = 1
    m.cond_hidden_enc = m.cond_hidden_dec = m.cond_hidden_pred = 2
    m.meta_dim = 2
    m.season_hidden = 4
    m.time_embed_dim = 4
    m.time_channels = 2
    return m


def replace(obj, **changes):
    return dataclasses.replace(obj, **changes)
