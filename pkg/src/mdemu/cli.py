"""Command-line entry point: ``mdemu <command> [options]``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .config import Config, toy_config
from .errors import ConfigError, DataError, EmulatorError

log = logging.getLogger("mdemu")

SCENARIOS = ("historical", "historical+2", "historical+4", "climatology", "climatology+2",
             "climatology+4")


def _config(args) -> Config:
    cfg = Config.load(args.config) if args.config else toy_config()
    if getattr(args, "seed", None) is not None:
        cfg.train.seed = cfg.data.seed = cfg.model.init_seed = args.seed
    return cfg


def _out(args, default: str) -> Path:
    p = Path(args.out or default)
    p.mkdir(parents=True, exist_ok=True)
    return p


def cmd_gen_data(args) -> int:
    from .data import generate_synthetic, save_dataset

    cfg = _config(args)
    if args.months:
        cfg.data.n_test = args.months - cfg.data.n_val - cfg.data.n_train
        if cfg.data.n_test < 0:
            raise ConfigError("--months is shorter than the validation and training splits")
    out = _out(args, cfg.paths.data)
    ds = generate_synthetic(cfg.model, cfg.data)
    save_dataset(ds, out)
    cfg.save(out / "config.ini")
    print(f"wrote {ds.n_months} months on {ds.grid.n_lat}x{ds.grid.n_lon} to {out}")
    return 0


def cmd_train(args) -> int:
    from .data import load_dataset
    from .training import COMPONENTS, train_loop

    cfg = _config(args)
    if args.epochs:
        cfg.train.epochs = args.epochs
    ds = load_dataset(args.data or cfg.paths.data)
    out = _out(args, cfg.paths.checkpoint)

    def show(entry):
        parts = " ".join(f"{c}={entry['train_' + c]:.4f}" for c in COMPONENTS)
        print(f"epoch {entry['epoch']:3d} total={entry['train_total']:.4f} {parts} "
              f"val={entry['val_total']:.4f}", flush=True)

    res = train_loop(ds, cfg, checkpoint_dir=out, callback=show)
    print(f"best epoch {res.best_epoch} val={res.best_val:.6f}; checkpoint in {out}")
    return 0


def cmd_rollout(args) -> int:
    from .data import load_dataset
    from .rollout import Emulator, build_scenario, parse_scenario, rollout, save_trajectory
    from .training import load_checkpoint

    ckpt = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data or ckpt.cfg.paths.data)
    seed = args.seed if args.seed is not None else ckpt.cfg.train.seed
    n_months = args.months or ds.n_months - 1
    kind, delta = parse_scenario(args.scenario)
    scen = build_scenario(ds.f, ds.months, kind, delta, n_months + 1, ds.forcing)
    emu = Emulator.from_checkpoint(ckpt)
    t0 = time.perf_counter()
    traj = rollout(emu, ds.x[0], ds.s, scen, n_months, args.members, seed,
                   vectorized=not args.looped)
    out = _out(args, ckpt.cfg.paths.rollout)
    save_trajectory(traj, out)
    print(f"{args.members} members x {n_months} months ({scen.label}) in "
          f"{time.perf_counter() - t0:.1f}s -> {out}")
    return 0


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([f"{v:.10g}" if isinstance(v, float) else v for v in r])


def _channel(traj, name: str) -> int:
    if name not in traj.names:
        raise ConfigError(f"variable {name!r} not in trajectory ({traj.names})")
    return traj.names.index(name)


def cmd_diagnose(args) -> int:
    from . import diagnostics as dg
    from .data import load_dataset
    from .io import save_tensor
    from .rollout import load_trajectory

    traj = load_trajectory(args.rollout)
    from .sht import GridSpec

    grid = GridSpec(*traj.states.shape[-2:])
    spin = args.spin_up or 0
    states = traj.states[:, spin:]
    months = traj.months[spin:]
    out = _out(args, "diagnostics")
    what = args.what
    if what == "global-mean":
        gm = dg.area_weighted_mean(states, grid)  # (members, months, channels)
        header = ["step", "month", "member"] + traj.names
        rows = [[t + spin + 1, int(months[t]), m] + [float(v) for v in gm[m, t]]
                for m in range(gm.shape[0]) for t in range(gm.shape[1])]
        rows += [[t + spin + 1, int(months[t]), "mean"] + [float(v) for v in gm[:, t].mean(0)]
                 for t in range(gm.shape[1])]
        _write_csv(out / "global_mean.csv", header, rows)
    elif what in ("climatology", "bias"):
        n = (states.shape[1] // 12) * 12
        if n == 0:
            raise DataError("need at least one full year after spin-up")
        ens = states[:, :n].mean(axis=0)
        clim, _ = dg.climatology_and_anomaly(ens, months[:n])
        if what == "bias":
            ds = load_dataset(args.data)
            sl = ds.split(args.split)
            ref, _ = dg.climatology_and_anomaly(ds.x[sl][: (sl.stop - sl.start) // 12 * 12],
                                                ds.months[sl][: (sl.stop - sl.start) // 12 * 12])
            clim = clim - ref
        save_tensor(out / f"{what}.smt", clim)
        ann = clim.mean(axis=0)
        zonal = ann.mean(axis=-1)
        _write_csv(out / f"{what}_zonal.csv", ["lat"] + traj.names,
                   [[float(grid.latitudes[j])] + [float(zonal[c, j]) for c in range(len(traj.names))]
                    for j in range(grid.n_lat)])
    elif what == "regress":
        if not traj.scenario.startswith("historical"):
            raise ConfigError(f"regression on the dataset SST index needs a historical rollout, "
                              f"got {traj.scenario!r}")
        ds = load_dataset(args.data)
        k = _channel(traj, args.variable)
        sst = ds.f[1 + spin: 1 + spin + states.shape[1], ds.forcing.index("sst")]
        idx = dg.nino_index(sst, grid, months, ds.index_region or None)
        ens = states[:, :, k].mean(axis=0)
        n = (ens.shape[0] // 12) * 12
        _, anom = dg.climatology_and_anomaly(ens[:n], months[:n], detrend=True)
        slope = dg.regression_map(anom, idx.values[:n])
        save_tensor(out / f"regress_{args.variable.replace('@', '_')}.smt", slope)
        _write_csv(out / "index.csv", ["step", "index"],
                   [[t + spin + 1, float(v)] for t, v in enumerate(idx.values)])
    elif what == "eof":
        k = _channel(traj, args.variable)
        n = (states.shape[1] // 12) * 12
        band = tuple(args.lat_band) if args.lat_band else None
        ens = dg.ensemble_eof(states[:, :n, k], months[:n], grid, args.modes, band)
        pcs = ens.pcs
        save_tensor(out / "eof_patterns.smt", ens.eof.patterns)
        _write_csv(out / "eof_pcs.csv", ["step"] + [f"member{m}" for m in range(pcs.shape[0])] + ["mean"],
                   [[t + spin + 1] + [float(v) for v in pcs[:, t]] + [float(pcs[:, t].mean())]
                    for t in range(n)])
        summary = {
            "explained": ens.eof.explained.tolist(),
            "member_pc_std": ens.member_pc_std,
            "ensemble_mean_pc_rms": ens.ensemble_mean_pc_rms,
            "warning": ens.eof.warning,
        }
        (out / "eof_summary.json").write_text(json.dumps(summary, indent=1))
    print(f"diagnose {what} -> {out}")
    return 0


def cmd_model_info(args) -> int:
    from .networks import model_info

    cfg = _config(args)
    info = model_info(cfg.model)
    print(json.dumps(info, indent=1))
    return 0


def cmd_check(args) -> int:
    from . import checks

    result = getattr(checks, args.what.replace("-", "_"))()
    print(json.dumps(result, indent=1))
    return 0 if result["ok"] else 4


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mdemu", description="Desk-scale monthly climate emulator.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="INI configuration file (default: toy profile)")
        if seed:
            sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")

    g = sub.add_parser("gen-data", help="generate a synthetic monthly dataset")
    common(g)
    g.add_argument("--months", type=int, help="total record length")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train encoder, decoder and predictor jointly")
    common(t)
    t.add_argument("--data", help="dataset directory")
    t.add_argument("--epochs", type=int)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("rollout", help="autoregressive ensemble rollout")
    common(r)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--data", help="dataset directory providing forcings and the initial state")
    r.add_argument("--scenario", choices=SCENARIOS, default="historical")
    r.add_argument("--members", type=int, default=4)
    r.add_argument("--months", type=int)
    r.add_argument("--looped", action="store_true", help="run members one at a time")
    r.set_defaults(func=cmd_rollout)

    d = sub.add_parser("diagnose", help="analyse a rollout")
    d.add_argument("what", choices=("global-mean", "climatology", "bias", "regress", "eof"))
    d.add_argument("--rollout", required=True, help="trajectory directory")
    d.add_argument("--data", help="dataset directory (bias, regress)")
    d.add_argument("--split", default="test", choices=("val", "train", "test"))
    d.add_argument("--variable", default="z@500")
    d.add_argument("--modes", type=int, default=2)
    d.add_argument("--lat-band", type=float, nargs=2, metavar=("LO", "HI"))
    d.add_argument("--spin-up", type=int, default=0, help="months dropped before analysis")
    d.add_argument("--out", help="output directory")
    d.set_defaults(func=cmd_diagnose)

    m = sub.add_parser("model-info", help="parameter counts and shape arithmetic")
    common(m)
    m.set_defaults(func=cmd_model_info)

    c = sub.add_parser("check", help="built-in numerical self-checks")
    c.add_argument("what", choices=("gradients", "sht", "schedule"))
    c.set_defaults(func=cmd_check)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except EmulatorError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
