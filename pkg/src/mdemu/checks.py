"""Numerical self-checks behind ``mdemu check``; each returns a JSON-able report."""

from __future__ import annotations

import time

import mpmath
import numpy as np

from .config import small_model_config
from .diffusion import build_cosine_schedule
from .sht import GridSpec, SpectralField, grid_energy, spectral_energy, sht_forward, sht_inverse
from .tensor import Tensor, check_gradient, tsum

GRAD_TOL = 1e-4


def random_bandlimited(n: int, grid: GridSpec, l_max: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Grid fields synthesised from random coefficients with ``l <= l_max``."""
    c = rng.standard_normal((n, l_max + 1, l_max + 1)) + 1j * rng.standard_normal((n, l_max + 1, l_max + 1))
    c[..., 0].imag = 0.0
    c = np.tril(c)
    field = sht_inverse(SpectralField.from_complex(c), grid).data
    return field, c


def sht(seed: int = 0) -> dict:
    grid = GridSpec(36, 72)
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    f, _ = random_bandlimited(8, grid, 17, rng)
    coeffs = sht_forward(f, grid, 17, 17)
    back = sht_inverse(coeffs, grid).data
    rel = float(np.linalg.norm(back - f) / np.linalg.norm(f))
    e_spec = spectral_energy(coeffs)
    e_grid = grid_energy(f, grid)
    pars = float(np.max(np.abs(e_spec - e_grid) / e_grid))
    dt = time.perf_counter() - t0
    return {"roundtrip_rel_l2": rel, "parseval_rel": pars, "seconds": dt,
            "ok": bool(rel <= 1e-6 and pars <= 1e-8 and dt < 1.0)}


def schedule_oracle(T: int, s: float, beta_max: float = 0.999, dps: int = 50):
    """Closed-form cosine schedule in arbitrary precision."""
    with mpmath.workdps(dps):
        s_m = mpmath.mpf(s)
        f = [mpmath.cos(((mpmath.mpf(k) / T + s_m) / (1 + s_m)) * mpmath.pi / 2) ** 2 for k in range(T + 1)]
        betas = [mpmath.mpf(0)] + [min(1 - f[k] / f[k - 1], mpmath.mpf(beta_max)) for k in range(1, T + 1)]
        ab = [mpmath.mpf(1)]
        for k in range(1, T + 1):
            ab.append(ab[-1] * (1 - betas[k]))
        post = [mpmath.mpf(0)] + [(1 - ab[k - 1]) / (1 - ab[k]) * betas[k] for k in range(1, T + 1)]
        return tuple(np.array([float(v) for v in arr]) for arr in (betas, ab, post))


def schedule(T: int = 15, s: float = 0.008) -> dict:
    sched = build_cosine_schedule(T, s)
    betas, ab, post = schedule_oracle(T, s)
    err = max(float(np.max(np.abs(sched.betas - betas))), float(np.max(np.abs(sched.alpha_bars - ab))),
              float(np.max(np.abs(sched.posterior_variance - post))))
    decreasing = bool(np.all(np.diff(sched.alpha_bars) < 0))
    return {"T": T, "s": s, "max_abs_error": err, "alpha_bar_decreasing": decreasing,
            "posterior_variance_1": float(sched.posterior_variance[1]),
            "ok": bool(err <= 1e-12 and decreasing and sched.posterior_variance[1] == 0.0)}


def gradient_cases(seed: int = 0):
    """Named objectives over reduced-size layers and networks, with their parameters."""
    from .conditioning import ChannelMetadataEmbedding, ConditionalRMSNorm, SeasonalEmbedding
    from .networks import Model
    from .spectral import S2Conv, S2ConvConfig, TensorProductOperator

    rng = np.random.default_rng(seed)
    g, lat = GridSpec(18, 36), GridSpec(6, 12)
    cases = []

    def probe(shape):
        return rng.standard_normal(shape)

    x = Tensor(probe((2, 3, 18, 36)), requires_grad=True)
    conv = S2Conv(S2ConvConfig(g, lat, 3, 2, rank=2), rng)
    w1 = probe((2, 2, 6, 12))
    cases.append(("s2_conv", lambda: tsum(conv(x) * w1), conv.parameters() + [x]))

    conv_r = S2Conv(S2ConvConfig(g, g, 3, 3, rank=2, residual=True), rng)
    conv_r.gate.data[...] = 0.3
    w1r = probe((2, 3, 18, 36))
    cases.append(("s2_conv_residual", lambda: tsum(conv_r(x) * w1r), conv_r.parameters() + [x]))

    c_in = Tensor(probe((2, 3, 5, 5, 2)), requires_grad=True)
    op = TensorProductOperator(3, 2, 5, 5, 2, rng, separate_synthesis=True)
    w2 = probe((2, 2, 5, 5, 2))
    cases.append(("tp_operator", lambda: tsum(op(SpectralField(c_in)).coeffs * w2),
                  op.parameters() + [c_in]))

    h = Tensor(probe((2, 3, 6, 12)), requires_grad=True)
    cc = Tensor(probe((2, 2, 6, 12)), requires_grad=True)
    norm = ConditionalRMSNorm(3, lat, 2, 1, 2, rng)
    norm.cond_proj.weight.data[...] = 0.3 * probe(norm.cond_proj.weight.shape)
    w3 = probe((2, 3, 6, 12))
    cases.append(("cond_rmsnorm", lambda: tsum(norm(h, cc) * w3), norm.parameters() + [h, cc]))

    season = SeasonalEmbedding(lat, rng, hidden=4)
    w4 = probe((3, 3, 6, 12))
    cases.append(("seasonal_embedding", lambda: tsum(season([1, 6, 11]) * w4), season.parameters()))

    meta = ChannelMetadataEmbedding([("u", "850"), ("u", "500"), ("t", "850")], rng, dim=2)
    w5 = probe((2, 3, 6, 12))
    cases.append(("metadata_embedding", lambda: tsum(meta(h) * w5), meta.parameters() + [h]))

    m = small_model_config()
    model = Model(m)
    xs = Tensor(probe((2, len(m.prognostic), 18, 36)), requires_grad=True)
    st = probe((len(m.static), 18, 36))
    fz = probe((2, 3, 18, 36))
    months = [2, 9]
    wm, wl = probe((2, m.latent_channels, 6, 12)), probe((2, m.latent_channels, 6, 12))

    def enc():
        mu, lv = model.encode(xs, st, model.conditioning(fz, months))
        return tsum(mu * wm) + tsum(lv * wl)

    cases.append(("encoder", enc, model.encoder.parameters() + [xs]))

    z = Tensor(probe((2, m.latent_channels, 6, 12)), requires_grad=True)
    wd = probe((2, len(m.prognostic), 18, 36))

    def dec():
        return tsum(model.decode(z, model.conditioning(fz, months)) * wd)

    cases.append(("decoder", dec, model.decoder.parameters() + [z]))

    yk = Tensor(probe((2, m.latent_channels, 6, 12)), requires_grad=True)
    cdown = Tensor(probe((2, m.cond_channels, 6, 12)))

    def pred():
        return tsum(model.predict_v(z, yk, cdown, np.array([0.2, 0.8])) * wm)

    cases.append(("predictor", pred, model.predictor.parameters() + [z, yk]))
    return cases


def gradients(max_entries: int = 3, seed: int = 0) -> dict:
    t0 = time.perf_counter()
    errs = {}
    for name, fn, params in gradient_cases(seed):
        errs[name] = check_gradient(fn, params, max_entries=max_entries, seed=seed)
    worst = max(errs.values())
    return {"max_rel_error": errs, "tolerance": GRAD_TOL, "seconds": time.perf_counter() - t0,
            "ok": bool(worst <= GRAD_TOL)}
