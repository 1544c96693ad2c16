"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

Tolerances are pinned here; the slow criteria (7-11) share one trained toy
model and its rollouts through module-scoped fixtures.
"""

import time
from pathlib import Path

import numpy as np
import pytest

from mdemu import checks
from mdemu.cli import main
from mdemu.config import toy_config
from mdemu.data import forward_transform, generate_synthetic, standardize
from mdemu.diagnostics import area_weighted_mean, ensemble_eof, eof, pattern_correlation
from mdemu.diffusion import LatentNormalizer, build_cosine_schedule, ddpm_sample, noise_and_target, v_to_eps
from mdemu.networks import Model, kl_divergence
from mdemu.rng import RngStream
from mdemu.rollout import Emulator, build_scenario, rollout
from mdemu.sht import GridSpec, SpectralField
from mdemu.spectral import TensorProductOperator, tp_operator_apply
from mdemu.tensor import Tensor
from mdemu.training import evaluate, load_checkpoint, train_loop

from .conftest import ACCEPTANCE
from .test_spectral import loop_apply

SHT_ROUNDTRIP_TOL = 1e-6
PARSEVAL_TOL = 1e-8
SHT_SECONDS = 1.0
GRAD_TOL = 1e-4
GRAD_SECONDS = 120.0
KL_MC_REL = 0.01
KL_MC_SAMPLES = 10**6
KL_POSTERIORS = 20
SCHEDULE_TOL = 1e-12
V_EPS_TOL = 1e-12
IDEAL_TOL = 1e-10
TP_TOL = 1e-12
TRAIN_SECONDS = 600.0
TRAIN_RATIO = 0.5
ROLL_MONTHS, ROLL_MEMBERS, ROLL_SIGMAS, ROLL_SECONDS = 555, 20, 5.0, 300.0
SIGN_FRACTION = 0.95
MAGNITUDE_FACTOR = 2.0
DELTA_SST = 2.0
SCENARIO_MONTHS = 240
EOF_RATIO = 3.0 / np.sqrt(20)
CONGRUENCE = 0.99
VEC_TOL = 1e-12


def report(n, ok, detail):
    ACCEPTANCE[n] = (bool(ok), detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


# -- fast, independent criteria ----------------------------------------------


def test_01_sht_roundtrip_and_parseval():
    r = checks.sht()
    ok = (r["roundtrip_rel_l2"] <= SHT_ROUNDTRIP_TOL and r["parseval_rel"] <= PARSEVAL_TOL
          and r["seconds"] < SHT_SECONDS)
    report(1, ok, f"roundtrip {r['roundtrip_rel_l2']:.2e} parseval {r['parseval_rel']:.2e} "
                  f"in {r['seconds']:.3f}s")


def test_02_gradient_suite():
    r = checks.gradients()
    worst = max(r["max_rel_error"].values())
    report(2, worst <= GRAD_TOL and r["seconds"] < GRAD_SECONDS,
           f"worst finite-difference error {worst:.2e} over {len(r['max_rel_error'])} layers "
           f"in {r['seconds']:.1f}s")


def test_03_kl_against_monte_carlo():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(KL_POSTERIORS):
        mu, lv = rng.normal(0, 1, 4), rng.normal(0, 0.7, 4)
        sd = np.exp(0.5 * lv)
        z = mu + sd * rng.standard_normal((KL_MC_SAMPLES, 4))
        log_ratio = -0.5 * (((z - mu) / sd) ** 2 + lv) + 0.5 * z**2
        mc = log_ratio.sum(axis=1).mean()
        exact = float(kl_divergence(mu[None], lv[None]).data)
        worst = max(worst, abs(mc - exact) / exact)
    zero = float(kl_divergence(np.zeros((1, 8)), np.zeros((1, 8))).data)
    report(3, worst <= KL_MC_REL and zero == 0.0,
           f"max relative MC deviation {worst:.4f} on {KL_POSTERIORS} posteriors; KL(0,0)={zero}")


def test_04_schedule():
    r = checks.schedule()
    ok = r["max_abs_error"] <= SCHEDULE_TOL and r["alpha_bar_decreasing"] and r["posterior_variance_1"] == 0.0
    report(4, ok, f"max error vs 50-digit closed form {r['max_abs_error']:.1e}; "
                  f"decreasing={r['alpha_bar_decreasing']}; posterior var at k=1 {r['posterior_variance_1']}")


def test_05_sampler_exactness():
    sched = build_cosine_schedule()
    rng = np.random.default_rng(5)
    y0, eps = rng.standard_normal((2, 8, 6, 12)), rng.standard_normal((2, 8, 6, 12))
    ident = 0.0
    for k in range(1, sched.T + 1):
        yk, v = noise_and_target(y0, k, eps, sched)
        ident = max(ident, float(np.abs(v_to_eps(v, yk, sched.alpha_bars[k]).data - eps).max()))
    norm = LatentNormalizer(0.4, 2.0)
    target = rng.standard_normal((2, 8, 6, 12))

    def ideal(z, y_k, c, t):
        ab = sched.alpha_bars[int(round(t * sched.T))]
        y_star = norm.norm(target).data
        e = (y_k.data - np.sqrt(ab) * y_star) / np.sqrt(1 - ab)
        return Tensor(np.sqrt(ab) * e - np.sqrt(1 - ab) * y_star)

    worst = 0.0
    for seed in range(5):
        out = ddpm_sample(np.zeros_like(target), None, ideal, sched, norm,
                          [RngStream(seed, 1), RngStream(seed, 2)])
        worst = max(worst, float(np.abs(out.data - target).max()))
    report(5, ident <= V_EPS_TOL and worst <= IDEAL_TOL,
           f"v<->eps identity {ident:.1e}; ideal-denoiser error {worst:.1e} over 5 noise seeds")


def test_06_operator_loop_oracle():
    rng = np.random.default_rng(6)
    op = TensorProductOperator(2, 2, 3, 3, 4, rng)
    x = rng.standard_normal((2, 2, 3, 3, 2))
    err = float(np.abs(tp_operator_apply(SpectralField(Tensor(x)), op).coeffs.data - loop_apply(x, op)).max())
    report(6, err <= TP_TOL, f"max deviation from loop expansion {err:.1e}")


def eof_oracle_congruence() -> float:
    """Rank-1 construction: the leading EOF must be congruent with the planted pattern."""
    grid = GridSpec(18, 36)
    rng = np.random.default_rng(10)
    lat = np.deg2rad(grid.latitudes)[:, None]
    lon = np.deg2rad(grid.longitudes)[None, :]
    P = np.cos(lat) * np.sin(lon) + 0.3 * np.sin(2 * lat)
    X = rng.standard_normal(200)[:, None, None] * P + 0.05 * rng.standard_normal((200,) + grid.shape)
    res = eof(X, grid, 1)
    return abs(pattern_correlation(res.patterns[0], P, res.weights))


# -- trained toy model --------------------------------------------------------


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    cfg = toy_config(seed=0)
    ds = generate_synthetic(cfg.model, cfg.data)
    t0 = time.perf_counter()
    res = train_loop(ds, cfg, checkpoint_dir=root / "ckpt")
    seconds = time.perf_counter() - t0
    return cfg, ds, res, seconds, load_checkpoint(root / "ckpt")


def test_07_toy_training(trained):
    cfg, ds, res, seconds, ck = trained
    h = res.history
    first, last = h[0]["train_total"], h[-1]["train_total"]
    logged = all(f"train_{c}" in e for e in h for c in ("rec", "diff", "kl", "std", "mean"))
    # reconstruction against the untrained model on the training pairs
    sched = build_cosine_schedule()
    data = standardize(ds)
    pairs = ds.pairs("train")
    untrained = evaluate(Model(cfg.model), data, pairs, sched, cfg.loss, 0, 4).components["rec"]
    trained_rec = evaluate(ck.use("ema"), data, pairs, sched, cfg.loss, 0, 4).components["rec"]
    ok = (seconds < TRAIN_SECONDS and last <= TRAIN_RATIO * first and logged and len(h) == 100
          and len(pairs) == 64 and trained_rec < 0.5 * untrained)
    report(7, ok, f"{len(h)} epochs in {seconds:.0f}s; L_total {first:.3f} -> {last:.3f} "
                  f"(ratio {last / first:.3f}); rec {untrained:.3f} -> {trained_rec:.3f}")


@pytest.fixture(scope="module")
def emulator(trained):
    cfg, ds, _, _, ck = trained
    return ds, Emulator.from_checkpoint(ck)


def test_08_rollout_stability(trained, emulator):
    ds, emu = emulator
    sc = build_scenario(ds.f, ds.months, "historical", 0.0, ROLL_MONTHS + 1)
    t0 = time.perf_counter()
    traj = rollout(emu, ds.x[0], ds.s, sc, ROLL_MONTHS, ROLL_MEMBERS, seed=0)
    seconds = time.perf_counter() - t0
    finite = bool(np.isfinite(traj.states).all())
    train_gm = area_weighted_mean(ds.x[ds.split("train")], ds.grid)  # (months, P)
    mu, sd = train_gm.mean(axis=0), train_gm.std(axis=0)
    z = np.abs(area_weighted_mean(traj.states, ds.grid) - mu) / sd
    worst = float(z.max())
    report(8, finite and worst <= ROLL_SIGMAS and seconds < ROLL_SECONDS,
           f"{ROLL_MEMBERS} members x {ROLL_MONTHS} months in {seconds:.0f}s; finite={finite}; "
           f"max |global mean - train mean| = {worst:.2f} sd")


@pytest.fixture(scope="module")
def scenarios(emulator):
    ds, emu = emulator
    out = {}
    for kind, delta in (("climatology", 0.0), ("climatology_plus", DELTA_SST)):
        sc = build_scenario(ds.f, ds.months, kind, delta, SCENARIO_MONTHS + 1)
        out[kind] = rollout(emu, ds.x[0], ds.s, sc, SCENARIO_MONTHS, ROLL_MEMBERS, seed=1)
    return out


def test_09_forced_response(emulator, scenarios):
    ds, _ = emulator
    k = ds.prognostic.index("skt")
    base = area_weighted_mean(scenarios["climatology"].states[:, :, k], ds.grid).mean(axis=0)
    warm = area_weighted_mean(scenarios["climatology_plus"].states[:, :, k], ds.grid).mean(axis=0)
    frac = float((warm > base).mean())
    response = float((warm - base).mean())
    predicted = ds.planted["skt"] * DELTA_SST
    ratio = response / predicted
    ok = frac >= SIGN_FRACTION and 1 / MAGNITUDE_FACTOR <= ratio <= MAGNITUDE_FACTOR
    report(9, ok, f"skt warmer in {100 * frac:.1f}% of months; response {response:.3f} K vs "
                  f"planted {predicted:.2f} K (ratio {ratio:.2f})")


def test_10_internal_variability(emulator, scenarios):
    ds, _ = emulator
    traj = scenarios["climatology"]
    k = traj.names.index("z@500")
    res = ensemble_eof(traj.states[:, :, k], traj.months, ds.grid, n_modes=2)
    congruence = eof_oracle_congruence()
    ratio = res.ensemble_mean_pc_rms / res.member_pc_std
    ok = res.member_pc_std > 0 and ratio <= EOF_RATIO and congruence >= CONGRUENCE
    report(10, ok, f"member PC std {res.member_pc_std:.3g}, ensemble-mean PC rms "
                   f"{res.ensemble_mean_pc_rms:.3g} (ratio {ratio:.3f} <= {EOF_RATIO:.3f}); "
                   f"rank-1 oracle congruence {congruence:.4f}")


def test_11_vectorization(emulator):
    ds, emu = emulator
    sc = build_scenario(ds.f, ds.months, "historical", 0.0, 5)
    v = rollout(emu, ds.x[0], ds.s, sc, 4, 3, seed=3, vectorized=True)
    lo = rollout(emu, ds.x[0], ds.s, sc, 4, 3, seed=3, vectorized=False)
    # compared in the standardized space the networks work in: one ulp of
    # z@500 (~5.5e4 m) is already 7e-12 in physical units
    err = float(np.abs(forward_transform(v.states, emu.x_specs)
                       - forward_transform(lo.states, emu.x_specs)).max())
    phys = float(np.max(np.abs(v.states - lo.states) / np.maximum(np.abs(lo.states), 1e-300)))
    report(11, err <= VEC_TOL, f"max standardized difference {err:.1e}; max relative "
                               f"physical difference {phys:.1e}")


# -- determinism ---------------------------------------------------------------


def _pipeline(root: Path, ini: str) -> dict:
    assert main(["gen-data", "--config", ini, "--out", str(root / "data")]) == 0
    assert main(["train", "--config", ini, "--data", str(root / "data"), "--out", str(root / "ckpt")]) == 0
    assert main(["rollout", "--checkpoint", str(root / "ckpt"), "--data", str(root / "data"),
                 "--members", "3", "--months", "24", "--out", str(root / "roll")]) == 0
    for what in ("global-mean", "climatology", "regress", "eof"):
        assert main(["diagnose", what, "--rollout", str(root / "roll"), "--data", str(root / "data"),
                     "--out", str(root / "diag")]) == 0
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_12_pipeline_determinism(tmp_path, capsys):
    cfg = toy_config(seed=4)
    cfg.train.epochs = 3
    cfg.data.n_test = 60
    ini = tmp_path / "run.ini"
    cfg.save(ini)
    a = _pipeline(tmp_path / "a", str(ini))
    b = _pipeline(tmp_path / "b", str(ini))
    capsys.readouterr()
    same = a.keys() == b.keys() and all(a[k] == b[k] for k in a)
    diff = [k for k in a if a.get(k) != b.get(k)]
    report(12, same, f"{len(a)} output files (data, checkpoint, rollout, diagnostics) "
                     f"byte-identical across two runs" if same else f"differing files: {diff}")
