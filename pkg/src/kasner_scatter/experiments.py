"""Experiment drivers shared by the command line and the acceptance run.

Each driver returns plain dicts and row lists so callers can serialize them.
"""

from __future__ import annotations

import math

import numpy as np

from . import einstein as ein
from . import kasner as kc
from . import wave
from .fields import sample_band_limited
from .integrator import IntegratorConfig, integrate_path
from .kasner import KasnerBackground


# --- mode selections --------------------------------------------------------


def shell_modes(R: float, D: int = 3, n_random: int = 5, seed: int = 0) -> np.ndarray:
    """Integer modes with |lam| close to R: axes, two diagonals and seeded random directions."""
    rng = np.random.default_rng(seed)
    out = [R * np.eye(D)[i] for i in range(D)]
    d2 = np.zeros(D)
    d2[:2] = 1.0
    out.append(np.round(R / math.sqrt(2) * d2))
    out.append(np.round(R / math.sqrt(D) * np.ones(D)))
    for _ in range(n_random):
        v = rng.standard_normal(D)
        out.append(np.round(R * v / np.linalg.norm(v)))
    return np.unique(np.array(out, dtype=float), axis=0)


def power_law_modes(bg: KasnerBackground, max_norm: int) -> np.ndarray:
    """Single-axis modes up to max_norm, plus multi-axis ones when all exponents agree."""
    D = bg.D
    out = [k * np.eye(D)[i] for i in range(D) for k in range(1, max_norm + 1)]
    if np.ptp(bg.exponents) < 1e-14:
        for k in range(1, max_norm + 1):
            for m in range(2, D + 1):
                v = np.zeros(D)
                v[:m] = k
                if np.linalg.norm(v) <= max_norm:
                    out.append(v)
    return np.array(out, dtype=float).reshape(-1, D)


# --- backgrounds --------------------------------------------------------------


def background_on_sphere(u: np.ndarray, p_phi: float) -> KasnerBackground:
    """Exponents 1/D + r u for a unit vector u orthogonal to (1, ..., 1)."""
    D = u.size
    r2 = 1.0 - 2.0 * p_phi * p_phi - 1.0 / D
    p = 1.0 / D + math.sqrt(max(r2, 0.0)) * u
    p = p + (1.0 - p.sum()) / D  # restore the sum exactly after rounding
    return kc.make_background(p, p_phi)


def _sum_free_direction(rng, D: int) -> np.ndarray:
    v = rng.standard_normal(D)
    v -= v.mean()
    return v / np.linalg.norm(v)


def random_backgrounds(n: int, D: int = 3, seed: int = 0, subcritical: bool = True) -> list[KasnerBackground]:
    """Seeded backgrounds with a scalar field; rejection keeps only subcritical ones when asked."""
    rng = np.random.default_rng(seed)
    out = []
    p_phi_max = math.sqrt((1.0 - 1.0 / D) / 2.0)
    while len(out) < n:
        p_phi = p_phi_max * rng.uniform(0.05, 1.0)
        bg = background_on_sphere(_sum_free_direction(rng, D), p_phi)
        if bg.non_degenerate and (bg.subcritical or not subcritical):
            out.append(bg)
    return out


def subcritical_scan(D: int = 3, samples: int = 10_000, seed: int = 0, p_phi: float = 0.0) -> dict:
    """Largest subcriticality margin over seeded exponents on the Kasner sphere."""
    rng = np.random.default_rng(seed)
    best = -math.inf
    best_p = None
    for _ in range(samples):
        bg = background_on_sphere(_sum_free_direction(rng, D), p_phi)
        if bg.delta > best:
            best, best_p = bg.delta, bg.p
    return {"D": D, "samples": samples, "p_phi": p_phi, "max_margin": best, "argmax_p": list(best_p)}


# --- wave experiments -----------------------------------------------------------


def bessel_validate(bg: KasnerBackground, modes, coeffs, n_t: int = 64, rel_tol: float = 1e-10, abs_tol: float = 1e-14) -> list[dict]:
    """Integrate oracle data from t = 1 to t* and compare with the oracle on a log grid."""
    modes = np.asarray(modes, dtype=float).reshape(-1, bg.D)
    if modes.size == 0:
        return []
    cfg = IntegratorConfig(rel_tol=rel_tol, abs_tol=abs_tol)
    rows = [(lam, cJ, cY) for lam in modes for cJ, cY in coeffs]
    lams = np.array([r[0] for r in rows])
    cJ = np.array([r[1] for r in rows], dtype=complex)
    cY = np.array([r[2] for r in rows], dtype=complex)
    for lam in modes:
        wave.power_law_exponent(bg, lam)
    ts = kc.t_star(bg, lams)
    grid = np.exp(np.log(ts)[:, None] * np.linspace(0.0, 1.0, n_t)[None, :])

    def oracle(t):
        out = np.empty((len(rows), 2), dtype=complex)
        for k, (lam, a, b) in enumerate(rows):
            s = wave.bessel_oracle(bg, lam, a, b, t[k])
            out[k] = (s.phi, s.psi)
        return out

    y0 = oracle(grid[:, 0])
    path = integrate_path(wave.physical_system(bg, lams), y0, grid, cfg)
    err = np.zeros(len(rows))
    for j in range(n_t):
        ref = oracle(grid[:, j])
        rel = np.linalg.norm(path[:, j] - ref, axis=-1) / np.linalg.norm(ref, axis=-1)
        err = np.maximum(err, rel)
    return [
        {
            "lambda": [int(x) for x in lams[k]],
            "c_J": float(cJ[k].real),
            "c_Y": float(cY[k].real),
            "t_star": float(ts[k]),
            "phi_1": float(y0[k, 0].real),
            "psi_1": float(y0[k, 1].real),
            "max_rel_err": float(err[k]),
        }
        for k in range(len(rows))
    ]


def wave_roundtrip(bg: KasnerBackground, Lambda: int, seed: int, sigma: float, s: float, tol: wave.WaveTolerances, threads=None, zero: bool = False) -> dict:
    D = bg.D
    sig = math.inf if zero else sigma
    phi = sample_band_limited(seed, Lambda, sig + 1.0, "scalar", True, D)
    psi = sample_band_limited(seed + 1, Lambda, sig, "scalar", True, D)
    data = wave.WaveCauchyData(phi, psi)
    asym = wave.scatter_down(bg, data, tol, threads)
    back = wave.scatter_up(bg, asym, tol, threads)
    c_norm, _ = wave.wave_hilbert_norms(data, s, bg)
    _, a_norm = wave.wave_hilbert_norms(asym, s, bg)
    err = wave.cauchy_difference_norm(data, back, s)
    return {
        "rel_error": err / c_norm if c_norm > 0 else err,
        "cauchy_norm": c_norm,
        "asymptotic_norm": a_norm,
        "norm_ratio": a_norm / c_norm if c_norm > 0 else float("nan"),
        "data": data,
        "asym": asym,
        "back": back,
    }


def wave_energy_sweep(bg: KasnerBackground, radii, n_random: int = 5, n_t: int = 64, tol: wave.WaveTolerances | None = None) -> list[dict]:
    rows = []
    for R in radii:
        lams = shell_modes(R, bg.D, n_random)
        e = wave.energy_constants(bg, lams, n_t, tol)
        g = wave.gain_window(bg, lams, tol)
        c = wave.tail_rate_constants(bg, lams, tol=tol)
        for k, lam in enumerate(lams):
            rows.append(
                {
                    "radius": R,
                    "lambda": [int(x) for x in lam],
                    "t_star": float(e["t_star"][k]),
                    "C_high": float(e["C_high"][k]),
                    "C_low": float(e["C_low"][k]),
                    "seam_min": float(e["seam_min"][k]),
                    "seam_max": float(e["seam_max"][k]),
                    "gain_min": float(g["ratio_min"][k]),
                    "gain_max": float(g["ratio_max"][k]),
                    "tail_C": float(c["C"][k]),
                }
            )
    return rows


def einstein_energy_sweep(bg: KasnerBackground, radii, n_random: int = 5, n_t: int = 48, tol: ein.EinsteinTolerances | None = None) -> list[dict]:
    rows = []
    for R in radii:
        lams = shell_modes(R, bg.D, n_random)
        w = ein.energy_windows(bg, lams, n_t, tol)
        for k, lam in enumerate(lams):
            rows.append(
                {"radius": R, "lambda": [int(x) for x in lam], "t_star": float(w["t_star"][k])}
                | {key: float(w[key][k]) for key in ("C_high", "C_mid", "C_low", "seam_1", "seam_ring")}
            )
    return rows


def growth_factors(rows: list[dict], keys) -> dict:
    """Per key: max over the largest radius divided by max over the smallest radius."""
    radii = sorted({r["radius"] for r in rows})
    out = {}
    for key in keys:
        lo = max(r[key] for r in rows if r["radius"] == radii[0])
        hi = max(r[key] for r in rows if r["radius"] == radii[-1])
        out[key] = hi / lo
    return out


# --- Einstein experiments -----------------------------------------------------


def einstein_constraint_series(bg: KasnerBackground, data: ein.EinsteinCauchyData, n_t: int = 32, tol: ein.EinsteinTolerances | None = None, threads=None) -> list[dict]:
    """Max relative constraint residual over modes at fractions of each mode's path 1 -> t*."""
    from .parallel import map_chunks

    tol = tol or ein.EinsteinTolerances()
    ms = data.modeset
    nz = np.flatnonzero(np.arange(len(ms)) != ms.zero_index)
    lams = ms.modes[nz].astype(float)
    y = data.vectors()[nz]
    ts = kc.t_star(bg, lams)
    frac = np.linspace(0.0, 1.0, n_t)
    grid = np.exp(np.log(ts)[:, None] * frac[None, :])

    def work(rows):
        path = integrate_path(ein.cmcsh_system(bg, lams[rows]), y[rows], grid[rows], tol.integrator)
        res = np.zeros(n_t)
        for j in range(n_t):
            M = ein._cauchy_matrix(bg, lams[rows], grid[rows, j], sh=True)
            res[j] = ein.relative_residuals(M, path[:, j]).max(initial=0.0)
        return res

    res = np.max(np.array(map_chunks(work, np.arange(len(nz)), threads)), axis=0) if len(nz) else np.zeros(n_t)
    return [{"fraction": float(f), "max_rel_residual": float(r)} for f, r in zip(frac, res)]


def einstein_roundtrip(bg: KasnerBackground, Lambda: int, seed: int, sigma: float, s: float, tol: ein.EinsteinTolerances, threads=None, zero: bool = False) -> dict:
    data = ein.random_constrained_data(bg, Lambda, seed, math.inf if zero else sigma)
    asym = ein.einstein_scatter_down(bg, data, tol, threads)
    back = ein.einstein_scatter_up(bg, asym, tol, threads)
    c_norm = ein.einstein_hilbert_norms(data, s, bg)[0]
    err = ein.cauchy_difference(data, back, s, bg)
    return {
        "rel_error": err / c_norm if c_norm > 0 else err,
        "cauchy_norm": c_norm,
        "asymptotic_norm": ein.einstein_hilbert_norms(asym, s, bg)[1],
        "asym_residual": float(ein.asymptotic_residuals(bg, asym, cmcfa=True).max(initial=0.0)),
        "data_residual": float(ein.cauchy_residuals(bg, data).max(initial=0.0)),
        "back_residual": float(ein.cauchy_residuals(bg, back).max(initial=0.0)),
        "data": data,
        "asym": asym,
        "back": back,
    }


def bounds_battery(n_backgrounds: int = 50, n_modes: int = 20, n_times: int = 64, D: int = 3, seed: int = 0) -> dict:
    """check_bounds over seeded subcritical backgrounds, random modes and log-spaced times."""
    rng = np.random.default_rng(seed + 1)
    total = passed = 0
    failures = []
    for bg in random_backgrounds(n_backgrounds, D, seed):
        for _ in range(n_modes):
            lam = rng.integers(-40, 41, size=D)
            if not lam.any():
                lam[0] = 1
            ts = float(kc.t_star(bg, lam))
            t_grid = np.exp(np.linspace(math.log(ts) - 6.0, 0.0, n_times))
            rep = kc.check_bounds(bg, lam, t_grid)
            total += 1
            if rep.all_passed:
                passed += 1
            else:
                failures.append({"p": list(bg.p), "lambda": lam.tolist(), "failed": [c.name for c in rep.failures()]})
    return {"total": total, "passed": passed, "failures": failures[:20]}
