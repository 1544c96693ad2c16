"""Ensemble rollouts from the toy checkpoint: forced response and internal variability.

Run train_toy.py first.
"""

import sys

import numpy as np

from mdemu.data import load_dataset
from mdemu.diagnostics import area_weighted_mean, ensemble_eof
from mdemu.rollout import Emulator, build_scenario, rollout
from mdemu.training import load_checkpoint

run = sys.argv[1] if len(sys.argv) > 1 else "toy-run"
ds = load_dataset(f"{run}/data")
emu = Emulator.from_checkpoint(load_checkpoint(f"{run}/ckpt"))
months, members = 120, 10

trajs = {}
for kind, delta in [("climatology", 0.0), ("climatology_plus", 2.0)]:
    sc = build_scenario(ds.f, ds.months, kind, delta, months + 1)
    trajs[sc.label] = rollout(emu, ds.x[0], ds.s, sc, months, members, seed=0)
    print("ran", sc.label)

# ensemble-mean global-mean response per channel
for k, name in enumerate(ds.prognostic):
    base = area_weighted_mean(trajs["climatology"].states[:, :, k], ds.grid).mean(0)
    warm = area_weighted_mean(trajs["climatology+2"].states[:, :, k], ds.grid).mean(0)
    print(f"{name:8s} response {np.mean(warm - base):+.4g}   higher in {100 * np.mean(warm > base):.0f}% of months")
print("planted skt response", 2.0 * ds.planted["skt"])

# unforced variability: members decorrelate, so their mean PC is small
tr = trajs["climatology"]
k = tr.names.index("z@500")
e = ensemble_eof(tr.states[:, :, k], tr.months, ds.grid, n_modes=2)
print(f"leading EOF explains {100 * e.eof.explained[0]:.0f}%;  member PC std {e.member_pc_std:.3g};  "
      f"ensemble-mean PC rms {e.ensemble_mean_pc_rms:.3g}  (1/sqrt(M) = {1 / np.sqrt(members):.2f})")
