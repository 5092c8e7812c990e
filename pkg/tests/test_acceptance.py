"""Acceptance run: one PASS/FAIL line per criterion, printed with capture disabled.

Run with `pytest tests/test_acceptance.py -v` or `python tests/test_acceptance.py`.
Criterion 4 is a known failure under the supremum-over-data reading; it is marked
strict xfail so a silent change in either direction is noticed.
"""

import math
import sys
import time

import numpy as np
import pytest

from kasner_scatter import einstein as E
from kasner_scatter import experiments as ex
from kasner_scatter import kasner as kc
from kasner_scatter import wave
from kasner_scatter.fields import ModeSet, sample_band_limited
from kasner_scatter.integrator import integrate

THREADS = None  # SCATTER_THREADS or 1

BESSEL_TOL = 1e-8
GROWTH_MAX = 2.0
WAVE_ROUNDTRIP_TOL = 1e-6
GAIN_WINDOW_MAX = 4.0
TAIL_SPREAD_MAX = 2.0
CONSTRAINT_TOL = 1e-7
EIN_ROUNDTRIP_TOL = 1e-5
EIN_ASYM_TOL = 1e-6
GAUGE_TOL = 1e-8
ISO_MARGIN_TOL = 1e-12


def iso():
    return kc.isotropic(3)


def aniso():
    return kc.make_background((0.5, 0.25, 0.25), math.sqrt(0.3125))


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
        return ok

    return emit


def test_c01_bessel_oracle(report):
    t0 = time.perf_counter()
    coeffs = [(1.0, 0.0), (0.0, 1.0), (1.0, 1.0)]
    worst = 0.0
    for bg in (iso(), aniso()):
        rows = ex.bessel_validate(bg, ex.power_law_modes(bg, 32), coeffs, n_t=64, rel_tol=1e-10, abs_tol=1e-14)
        worst = max(worst, max(r["max_rel_err"] for r in rows))
    dt = time.perf_counter() - t0
    ok = worst <= BESSEL_TOL and dt < 30
    report(1, ok, f"max rel err {worst:.3e} <= {BESSEL_TOL:g}, runtime {dt:.1f}s < 30s")
    assert ok


def test_c02_wave_energy_uniformity(report):
    t0 = time.perf_counter()
    parts, ok = [], True
    for name, bg in (("iso", iso()), ("aniso", aniso())):
        lo = wave.energy_constants(bg, ex.shell_modes(4), 48)
        hi = wave.energy_constants(bg, ex.shell_modes(128), 48)
        for key in ("C_high", "C_low"):
            finite = np.all(np.isfinite(lo[key])) and np.all(np.isfinite(hi[key]))
            g = hi[key].max() / lo[key].max()
            ok &= bool(finite and g <= GROWTH_MAX)
            parts.append(f"{name} {key} {lo[key].max():.3f}->{hi[key].max():.3f} (x{g:.2f})")
    dt = time.perf_counter() - t0
    ok &= dt < 60
    report(2, ok, "; ".join(parts) + f"; growth <= {GROWTH_MAX:g}; runtime {dt:.1f}s")
    assert ok


def test_c03_wave_roundtrip(report):
    tol = wave.WaveTolerances(rel_tol=1e-10, tail_tol=1e-8)
    parts, ok = [], True
    for name, bg in (("iso", iso()), ("aniso", aniso())):
        res = ex.wave_roundtrip(bg, 16, seed=1, sigma=2.0, s=1.0, tol=tol, threads=THREADS)
        ok &= res["rel_error"] <= WAVE_ROUNDTRIP_TOL
        parts.append(f"{name} {res['rel_error']:.3e}")
    report(3, ok, "H^1 relative round-trip error " + ", ".join(parts) + f" <= {WAVE_ROUNDTRIP_TOL:g}")
    assert ok


@pytest.mark.xfail(strict=True, reason="gain window max/min exceeds 4 for the supremum over data; see README")
def test_c04_half_derivative_gain(report):
    parts, ok = [], True
    for name, bg in (("iso", iso()), ("aniso", aniso())):
        lo_all, hi_all, per_scale = [], [], []
        for R in (4, 8, 16, 32, 64, 128, 256):
            g = wave.gain_window(bg, ex.shell_modes(R))
            lo_all.append(g["ratio_min"].min())
            hi_all.append(g["ratio_max"].max())
            per_scale.append(g["ratio_max"].max() / g["ratio_min"].min())
        w = max(hi_all) / min(lo_all)
        ok &= w <= GAIN_WINDOW_MAX
        drift = (max(lo_all) / min(lo_all), max(hi_all) / min(hi_all))
        parts.append(
            f"{name} window [{min(lo_all):.3f}, {max(hi_all):.3f}] max/min {w:.2f}"
            f" (per-scale max/min {min(per_scale):.2f}..{max(per_scale):.2f}, endpoint drift x{drift[0]:.2f}/x{drift[1]:.2f})"
        )
    report(4, ok, "; ".join(parts) + f"; required max/min <= {GAIN_WINDOW_MAX:g}")
    assert ok


def test_c05_tail_rate(report):
    parts, ok = [], True
    lams = np.concatenate([ex.shell_modes(R) for R in (4, 16, 64, 128)])
    for name, bg in (("iso", iso()), ("aniso", aniso())):
        C = wave.tail_rate_constants(bg, lams)["C"]
        spread = C.max() / C.min()
        ok &= bool(np.all(np.isfinite(C)) and spread <= TAIL_SPREAD_MAX)
        parts.append(f"{name} fitted C {C.max():.3f} (spread x{spread:.2f})")
    report(5, ok, "; ".join(parts) + f"; spread <= {TAIL_SPREAD_MAX:g}")
    assert ok


@pytest.fixture(scope="module")
def ein_data():
    return E.random_constrained_data(aniso(), 8, seed=2)


def test_c06_constraint_propagation(report, ein_data):
    series = ex.einstein_constraint_series(aniso(), ein_data, n_t=16, threads=THREADS)
    worst = max(s["max_rel_residual"] for s in series)
    ok = worst <= CONSTRAINT_TOL
    report(6, ok, f"max relative residual along CMCSH {worst:.3e} <= {CONSTRAINT_TOL:g} (Lambda=8)")
    assert ok


def test_c07_einstein_roundtrip(report, ein_data):
    bg = aniso()
    tol = E.EinsteinTolerances(rel_tol=1e-10)
    asym = E.einstein_scatter_down(bg, ein_data, tol, THREADS)
    back = E.einstein_scatter_up(bg, asym, tol, THREADS)
    rel = E.cauchy_difference(ein_data, back, 1.0, bg) / E.einstein_hilbert_norms(ein_data, 1.0, bg)[0]
    res = E.asymptotic_residuals(bg, asym, cmcfa=True).max()
    ok = rel <= EIN_ROUNDTRIP_TOL and res <= EIN_ASYM_TOL
    report(7, ok, f"round trip {rel:.3e} <= {EIN_ROUNDTRIP_TOL:g}; asymptotic constraints {res:.3e} <= {EIN_ASYM_TOL:g}")
    assert ok


def test_c08_einstein_energy_windows(report):
    parts, ok = [], True
    for name, bg in (("iso", iso()), ("aniso", aniso())):
        lo = E.energy_windows(bg, ex.shell_modes(4), 32)
        hi = E.energy_windows(bg, ex.shell_modes(128), 32)
        for key in ("C_high", "C_mid", "C_low", "seam_1", "seam_ring"):
            finite = np.all(np.isfinite(lo[key])) and np.all(np.isfinite(hi[key]))
            g = hi[key].max() / lo[key].max()
            ok &= bool(finite and g <= GROWTH_MAX)
            if key in ("C_high", "C_low", "seam_1"):
                parts.append(f"{name} {key} {lo[key].max():.2f}->{hi[key].max():.2f}")
    report(8, ok, "; ".join(parts) + f"; growth <= {GROWTH_MAX:g}, seam windows finite")
    assert ok


def test_c09_zero_mode(report):
    bg = aniso()
    phi = sample_band_limited(3, 2, math.inf, "scalar", True, 3)
    psi = sample_band_limited(4, 2, math.inf, "scalar", True, 3)
    data = wave.WaveCauchyData(phi, psi)
    asym = wave.scatter_down(bg, data)
    back = wave.scatter_up(bg, asym)
    z = phi.modeset.zero_index
    ok = (
        asym.psi_inf.coeffs[z] == psi.coeffs[z]
        and asym.phi_tilde_inf.coeffs[z] == phi.coeffs[z]
        and np.array_equal(back.phi_C.coeffs, phi.coeffs)
        and np.array_equal(back.psi_C.coeffs, psi.coeffs)
    )
    ed = E.random_constrained_data(bg, 2, 5, math.inf)
    ea = E.einstein_scatter_down(bg, ed)
    eb = E.einstein_scatter_up(bg, ea)
    ok &= bool(np.array_equal(ea.vectors()[z], ed.vectors()[z]) and np.array_equal(eb.vectors(), ed.vectors()))
    ok &= not ea.xi_inf.coeffs[z].any()
    report(9, ok, "zero-mode constants bit-identical through both directions (wave and Einstein)")
    assert ok


def test_c10_gauge_covariance(report):
    bg = aniso()
    rng = np.random.default_rng(10)
    worst = 0.0
    for lam in ([3, 1, -2], [0, 5, 0], [7, -4, 6]):
        lam = np.array([lam], float)
        M = E._cauchy_matrix(bg, lam, 1.0, sh=False)
        n = E.state_dim(3)
        y = E.nullspace_projector(M)[0] @ (rng.standard_normal(n) + 1j * rng.standard_normal(n))
        xi = rng.standard_normal(3) + 1j * rng.standard_normal(3)
        t1 = float(kc.t_star(bg, lam[0])) * 0.5
        s = E.EinsteinModeState.from_vector(y, 3, 1.0, E.CMCTC)
        cfg = E.EinsteinTolerances(rel_tol=1e-10).integrator
        a, _ = integrate(E.cmctc_system(bg, lam), E.gauge_transform(s, xi, bg, lam[0]).vector(), 1.0, t1, cfg)
        b, _ = integrate(E.cmctc_system(bg, lam), y, 1.0, t1, cfg)
        b = E.gauge_transform(E.EinsteinModeState.from_vector(b, 3, t1, E.CMCTC), xi, bg, lam[0]).vector()
        worst = max(worst, np.linalg.norm(a - b) / np.linalg.norm(b))
    ok = worst <= GAUGE_TOL
    report(10, ok, f"static gauge change commutes with evolution, rel {worst:.3e} <= {GAUGE_TOL:g}")
    assert ok


def test_c11_subcritical_variety(report):
    scan = ex.subcritical_scan(3, 10_000, seed=0, p_phi=0.0)
    margin = kc.subcriticality_margin(kc.isotropic(3))
    ok = scan["max_margin"] <= 0 and abs(margin - 2 / 3) <= ISO_MARGIN_TOL
    report(11, ok, f"vacuum D=3 max margin {scan['max_margin']:.3e} <= 0 over 1e4 samples; isotropic margin {margin!r}")
    assert ok


def test_c12_bounds_battery(report):
    t0 = time.perf_counter()
    res = ex.bounds_battery(50, 20, 64, 3, seed=0)
    dt = time.perf_counter() - t0
    ok = res["passed"] == res["total"] and dt < 60
    report(12, ok, f"{res['passed']}/{res['total']} bound reports pass, runtime {dt:.1f}s < 60s")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-rxX"]))
