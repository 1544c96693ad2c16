"""Forcing scenarios and autoregressive ensemble rollouts in latent space."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import VariableSpec, forward_transform, inverse_transform
from .diffusion import DiffusionSchedule, build_cosine_schedule, ddpm_sample
from .errors import ConfigError, DataError, NumericError
from .io import load_tensor, read_manifest, save_tensor, write_manifest
from .networks import Conditioning, Model, reparameterize
from .rng import RngStream
from .tensor import Tensor, no_grad

KINDS = ("historical", "historical_plus", "climatology", "climatology_plus")

# member m draws from stream MEMBER_STREAM0 + m
MEMBER_STREAM0 = 1000


@dataclass
class ForcingScenario:
    kind: str
    delta_sst: float
    f: np.ndarray  # (T, 3, H, W) physical units
    months: np.ndarray

    @property
    def label(self) -> str:
        base = self.kind.replace("_plus", "")
        return base if self.delta_sst == 0 else f"{base}+{self.delta_sst:g}"


def parse_scenario(label: str) -> tuple[str, float]:
    """``"climatology+2" -> ("climatology_plus", 2.0)``."""
    base, _, delta = label.partition("+")
    if base not in ("historical", "climatology"):
        raise ConfigError(f"unknown scenario {label!r}")
    if not delta:
        return base, 0.0
    try:
        d = float(delta)
    except ValueError as exc:
        raise ConfigError(f"bad SST increment in scenario {label!r}") from exc
    return base + "_plus", d


def monthly_climatology(series: np.ndarray, months: np.ndarray) -> np.ndarray:
    """Per-calendar-month mean, shape ``(12,) + series.shape[1:]``."""
    months = np.asarray(months)
    out = np.empty((12,) + series.shape[1:])
    for m in range(1, 13):
        sel = months == m
        if not sel.any():
            raise DataError(f"calendar month {m} missing from the base series")
        out[m - 1] = series[sel].mean(axis=0)
    return out


def build_scenario(base_f: np.ndarray, months: np.ndarray, kind: str, delta_sst: float = 0.0,
                   n_months: int | None = None, forcing_names=("sst", "sic", "lsm")) -> ForcingScenario:
    if kind not in KINDS:
        raise ConfigError(f"scenario kind must be one of {KINDS}, got {kind!r}")
    plus = kind.endswith("_plus")
    if plus != (delta_sst != 0):
        raise ConfigError(f"{kind} scenario with SST increment {delta_sst}")
    base_f = np.asarray(base_f, dtype=np.float64)
    months = np.asarray(months)
    if base_f.shape[0] != len(months):
        raise ConfigError("forcing series and month axis lengths differ")
    if n_months is not None and base_f.shape[0] < n_months:
        raise ConfigError(f"base forcing covers {base_f.shape[0]} months, rollout needs {n_months}")
    if n_months is not None:
        base_f, months = base_f[:n_months], months[:n_months]
    if kind.startswith("climatology"):
        clim = monthly_climatology(base_f, months)
        f = clim[months - 1]
    else:
        f = base_f.copy()
    if plus:
        f[:, list(forcing_names).index("sst")] += delta_sst
    f.setflags(write=False)
    return ForcingScenario(kind, float(delta_sst), f, months.copy())


@dataclass
class EnsembleTrajectory:
    states: np.ndarray  # (members, months, P, H, W) physical units
    months: np.ndarray  # calendar month of each predicted step
    names: list
    scenario: str
    seed: int
    streams: list = field(default_factory=list)

    @property
    def n_members(self) -> int:
        return self.states.shape[0]


class Emulator:
    """Model plus the standardization it was trained with."""

    def __init__(self, model: Model, x_specs: list[VariableSpec], f_specs: list[VariableSpec],
                 s_specs: list[VariableSpec], sched: DiffusionSchedule | None = None):
        self.model = model
        self.x_specs, self.f_specs, self.s_specs = x_specs, f_specs, s_specs
        self.sched = sched or build_cosine_schedule()

    @classmethod
    def from_checkpoint(cls, ckpt, which: str = "ema") -> "Emulator":
        d = ckpt.cfg.diffusion
        return cls(ckpt.use(which), ckpt.x_specs, ckpt.f_specs, ckpt.s_specs,
                   build_cosine_schedule(d.steps, d.offset, d.beta_max))

    def conditioning(self, f_std: np.ndarray, month: int) -> Conditioning:
        return self.model.conditioning(f_std[None], [int(month)])


def _tile(cond: Conditioning, n: int) -> Conditioning:
    return Conditioning(Tensor._wrap(np.repeat(cond.full.data, n, axis=0)),
                        Tensor._wrap(np.repeat(cond.down.data, n, axis=0)))


def _check(arr: np.ndarray, month: int, members) -> None:
    if not np.all(np.isfinite(arr)):
        bad = [members[i] for i in range(arr.shape[0]) if not np.all(np.isfinite(arr[i]))]
        raise NumericError(f"non-finite state at month {month}, member(s) {bad}")


def rollout(emu: Emulator, x0: np.ndarray, s: np.ndarray, scenario: ForcingScenario,
            n_months: int, n_members: int, seed: int, vectorized: bool = True,
            member_offset: int = 0) -> EnsembleTrajectory:
    """Autoregressive ensemble from a shared initial state ``x0`` (physical units).

    Month 0 of ``scenario`` is the month of ``x0``.  Each member owns the
    stream ``MEMBER_STREAM0 + member`` for its encoder draw and every
    diffusion chain, so batching members changes nothing but speed.
    """
    if scenario.f.shape[0] < n_months + 1:
        raise ConfigError(f"scenario covers {scenario.f.shape[0]} months, need {n_months + 1}")
    grid = emu.model.grid
    if tuple(scenario.f.shape[-2:]) != grid.shape or tuple(np.shape(x0)[-2:]) != grid.shape:
        raise ConfigError(f"scenario/initial state grid differs from the model grid {grid.shape}")
    members = list(range(member_offset, member_offset + n_members))
    streams = [MEMBER_STREAM0 + m for m in members]
    f_std = forward_transform(scenario.f[: n_months + 1], emu.f_specs)
    x0_std = forward_transform(np.asarray(x0)[None], emu.x_specs)
    s_std = forward_transform(np.asarray(s), emu.s_specs)
    groups = [members] if vectorized else [[m] for m in members]
    out = np.empty((n_members, n_months, len(emu.x_specs)) + grid.shape)
    with no_grad():
        for g in groups:
            rngs = [RngStream(seed, MEMBER_STREAM0 + m) for m in g]
            rows = [m - member_offset for m in g]
            out[rows] = _run_group(emu, x0_std, s_std, f_std, scenario.months, n_months, rngs, g)
    return EnsembleTrajectory(out, np.asarray(scenario.months[1: n_months + 1]),
                              [sp.name for sp in emu.x_specs], scenario.label, seed, streams)


def _run_group(emu, x0_std, s_std, f_std, months, n_months, rngs, member_ids) -> np.ndarray:
    model, n = emu.model, len(rngs)
    cond = _tile(emu.conditioning(f_std[0], months[0]), n)
    mu, logvar = model.encode(np.repeat(x0_std, n, axis=0), s_std, cond)
    eps = np.stack([r.normal(mu.shape[1:]) for r in rngs])
    z = reparameterize(mu, logvar, eps)
    res = np.empty((n, n_months, len(emu.x_specs)) + model.grid.shape)
    for t in range(n_months):
        try:
            mu_next = ddpm_sample(z, cond.down, model.predict_v, emu.sched, model.normalizer, rngs)
            cond = _tile(emu.conditioning(f_std[t + 1], months[t + 1]), n)
            x_std = model.decode(mu_next, cond, s_std).data
        except NumericError as exc:
            raise NumericError(f"month {t + 1}, member(s) {list(member_ids)}: {exc}") from exc
        _check(x_std, t + 1, member_ids)
        res[:, t] = inverse_transform(x_std, emu.x_specs, clamp=True)
        _check(res[:, t], t + 1, member_ids)
        z = mu_next
    return res


def rollout_vectorized(emu, x0, s, scenario, n_months, n_members, seed) -> EnsembleTrajectory:
    return rollout(emu, x0, s, scenario, n_months, n_members, seed, vectorized=True)


def rollout_looped(emu, x0, s, scenario, n_months, n_members, seed) -> EnsembleTrajectory:
    return rollout(emu, x0, s, scenario, n_months, n_members, seed, vectorized=False)


def _file_name(name: str) -> str:
    return name.replace("@", "_") + ".smt"


def save_trajectory(traj: EnsembleTrajectory, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    files = []
    for k, name in enumerate(traj.names):
        save_tensor(d / _file_name(name), traj.states[:, :, k])
        files.append({"name": name, "file": _file_name(name)})
    write_manifest(d / "trajectory.json", {
        "scenario": traj.scenario,
        "seed": traj.seed,
        "members": traj.n_members,
        "streams": traj.streams,
        "months": [int(m) for m in traj.months],
        "variables": files,
    })


def load_trajectory(directory) -> EnsembleTrajectory:
    d = Path(directory)
    if not (d / "trajectory.json").exists():
        raise DataError(f"no trajectory manifest in {d}")
    man = read_manifest(d / "trajectory.json")
    states = np.stack([load_tensor(d / v["file"]) for v in man["variables"]], axis=2)
    return EnsembleTrajectory(states, np.asarray(man["months"]), [v["name"] for v in man["variables"]],
                              man["scenario"], man["seed"], man["streams"])
