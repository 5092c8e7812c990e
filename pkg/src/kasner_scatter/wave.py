"""Scalar wave equation on Kasner: per-mode systems, energies and the scattering maps.

Physical variables are (phi, psi = t d/dt phi). Below t_star each mode switches to
(psi, phi_tilde) with phi_tilde = phi + log(t_star/t) psi, which converges as t -> 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from . import kasner as kc
from .errors import NotPowerLawMode, ZeroModeError
from .fields import Field, ModeSet, SymbolSpec, sobolev_norm, symbol_apply
from .integrator import IntegratorConfig, OdeSystem, find_launch_time, integrate, integrate_path, picard_tail
from .kasner import KasnerBackground
from .parallel import map_chunks


@dataclass
class WaveModeState:
    phi: complex
    psi: complex
    t: float


@dataclass
class WaveRenormState:
    psi: complex
    phi_tilde: complex
    t: float


def to_renorm(state: WaveModeState, t_star: float) -> WaveRenormState:
    return WaveRenormState(state.psi, state.phi + math.log(t_star / state.t) * state.psi, state.t)


def to_physical(state: WaveRenormState, t_star: float) -> WaveModeState:
    return WaveModeState(state.phi_tilde - math.log(t_star / state.t) * state.psi, state.psi, state.t)


def _require_nonzero(lam) -> np.ndarray:
    lam = np.asarray(lam)
    if np.any(np.all(lam == 0, axis=-1)):
        raise ZeroModeError("the zero mode is handled in closed form")
    return lam


def wave_rhs(bg: KasnerBackground, lam, t: float, state: WaveModeState) -> tuple[complex, complex]:
    """(t d/dt phi, t d/dt psi) = (psi, -tau^2 phi)."""
    _require_nonzero(lam)
    tau2 = kc.tau(bg, lam, t) ** 2
    return state.psi, -tau2 * state.phi


def wave_rhs_renorm(bg: KasnerBackground, lam, t: float, state: WaveRenormState) -> tuple[complex, complex]:
    """(t d/dt psi, t d/dt phi_tilde) in the renormalized variables."""
    _require_nonzero(lam)
    tau2 = kc.tau(bg, lam, t) ** 2
    L = math.log(kc.t_star(bg, lam) / t)
    dpsi = -tau2 * state.phi_tilde + tau2 * L * state.psi
    dphi = -tau2 * L * state.phi_tilde + tau2 * L * L * state.psi
    return dpsi, dphi


def energy_high(bg: KasnerBackground, lam, t, state: WaveModeState) -> float:
    """zeta^2|psi|^2/tau + zeta Re(psi conj phi)/tau + |phi|^2/(2 tau) + zeta^2 tau |phi|^2."""
    return high_energy_values(bg, lam, t, state.phi, state.psi)


def energy_low(bg: KasnerBackground, lam, t, state: WaveRenormState) -> float:
    return low_energy_values(state.psi, state.phi_tilde)


def high_energy_values(bg: KasnerBackground, lam, t, phi, psi):
    """Array form of energy_high; lam may carry a batch axis."""
    _require_nonzero(lam)
    tt = np.asarray(kc.tau(bg, lam, t))
    z = np.asarray(kc.zeta(bg, lam, t))
    phi, psi = np.asarray(phi), np.asarray(psi)
    e = (
        z**2 * np.abs(psi) ** 2 / tt
        + z * np.real(psi * np.conj(phi)) / tt
        + np.abs(phi) ** 2 / (2 * tt)
        + z**2 * tt * np.abs(phi) ** 2
    )
    return e if e.ndim else float(e)


def low_energy_values(psi, phi_tilde):
    e = np.abs(np.asarray(psi)) ** 2 + np.abs(np.asarray(phi_tilde)) ** 2
    return e if e.ndim else float(e)


def power_law_exponent(bg: KasnerBackground, lam) -> float:
    """Common exponent p of the active axes, or NotPowerLawMode if they differ."""
    lam = np.asarray(lam)
    active = bg.exponents[lam != 0]
    if active.size == 0:
        raise ZeroModeError("bessel oracle needs lambda != 0")
    if np.ptp(active) > 1e-14:
        raise NotPowerLawMode(f"mode {tuple(int(x) for x in lam)} mixes exponents {tuple(active)}")
    return float(active[0])


def bessel_oracle(bg: KasnerBackground, lam, c_J: complex, c_Y: complex, t) -> WaveModeState:
    """Exact mode solution when tau^2 = a^2 t^(2 beta): phi = c_J J0(x) + c_Y Y0(x), x = tau/beta."""
    p = power_law_exponent(bg, lam)
    tt = kc.tau(bg, lam, t)
    x = np.asarray(tt) / (1.0 - p)
    phi = c_J * special.j0(x) + (c_Y * special.y0(x) if c_Y != 0 else 0.0)
    psi = -np.asarray(tt) * (c_J * special.j1(x) + (c_Y * special.y1(x) if c_Y != 0 else 0.0))
    return WaveModeState(phi, psi, t)


# --- batched systems --------------------------------------------------------


def physical_system(bg: KasnerBackground, lams: np.ndarray) -> OdeSystem:
    """Rows hold (phi, psi)."""
    lams = np.asarray(lams, dtype=float)

    def rhs(t, y):
        tau2 = (t[:, None] ** (2.0 - 2.0 * bg.exponents) * lams**2).sum(axis=-1)
        return np.stack([y[:, 1], -tau2 * y[:, 0]], axis=-1)

    return OdeSystem(rhs, 2, restrict=lambda rows: physical_system(bg, lams[rows]))


def renorm_system(bg: KasnerBackground, lams: np.ndarray, tstars: np.ndarray) -> OdeSystem:
    """Rows hold (psi, phi_tilde)."""
    lams = np.asarray(lams, dtype=float)
    tstars = np.asarray(tstars, dtype=float)

    def rhs(t, y):
        tau2 = (np.asarray(t)[..., None] ** (2.0 - 2.0 * bg.exponents) * lams**2).sum(axis=-1)
        L = np.log(tstars / t)
        psi, pt = y[:, 0], y[:, 1]
        return np.stack([tau2 * (L * psi - pt), tau2 * L * (L * psi - pt)], axis=-1)

    return OdeSystem(rhs, 2, restrict=lambda rows: renorm_system(bg, lams[rows], tstars[rows]))


def tail_constant(bg: KasnerBackground) -> float:
    """Guaranteed C with |X(t) - X_inf| <= C tau^2 (1 + L^2) |X(t_star)| for t <= t_star.

    From |t d/dt X| <= tau^2 (1 + L^2) |X|, the integral bound K of that majorant and
    Gronwall, C = K e^K.
    """
    K = kc.down_integral_constant(bg)
    return K * math.exp(K)


def tail_majorant(bg: KasnerBackground, lams, tstars, t) -> np.ndarray:
    tau2 = (np.asarray(t)[..., None] ** (2.0 - 2.0 * bg.exponents) * np.asarray(lams, float) ** 2).sum(axis=-1)
    return tau2 * (1.0 + np.log(tstars / t) ** 2)


# --- data containers --------------------------------------------------------


@dataclass
class WaveTolerances:
    rel_tol: float = 1e-10
    abs_tol: float = 1e-13
    tail_tol: float = 1e-8

    @property
    def integrator(self) -> IntegratorConfig:
        return IntegratorConfig(rel_tol=self.rel_tol, abs_tol=self.abs_tol)


@dataclass
class WaveCauchyData:
    phi_C: Field
    psi_C: Field


@dataclass
class WaveAsymptotics:
    """Limits per mode; the zero-mode entries hold the constants (psi_0, varphi_0)."""

    psi_inf: Field
    phi_tilde_inf: Field
    diagnostics: dict = field(default_factory=dict, repr=False)

    def phi_inf(self, bg: KasnerBackground) -> Field:
        """phi_inf = phi_tilde_inf - psi_inf log t_star, mode by mode."""
        log_ts = np.log(kc.t_star(bg, self.psi_inf.modeset.modes))
        return self.phi_tilde_inf.with_coeffs(self.phi_tilde_inf.coeffs - self.psi_inf.coeffs * log_ts)


def _normalize_rows(y: np.ndarray):
    scale = np.sqrt((np.abs(y) ** 2).sum(axis=-1))
    scale = np.where(scale > 0, scale, 1.0)
    return y / scale[:, None], scale


def _down_rows(bg, lams, y1, tol: WaveTolerances):
    """Per-mode S-down for a chunk of nonzero modes; y1 rows are (phi, psi) at t=1."""
    cfg = tol.integrator
    y, scale = _normalize_rows(y1)
    ts = kc.t_star(bg, lams)
    e1 = high_energy_values(bg, lams, 1.0, y[:, 0], y[:, 1])
    y_star, _ = integrate(physical_system(bg, lams), y, 1.0, ts, cfg)
    r = np.stack([y_star[:, 1], y_star[:, 0]], axis=-1)  # L = 0 at t_star
    e_star = low_energy_values(r[:, 0], r[:, 1])
    C = tail_constant(bg)
    t_end = find_launch_time(lambda t: C * tail_majorant(bg, lams, ts, t), tol.tail_tol, ts)
    r_end, _ = integrate(renorm_system(bg, lams, ts), r, ts, t_end, cfg)
    bound = C * tail_majorant(bg, lams, ts, t_end) * np.sqrt(e_star)
    diag = {
        "t_star": ts,
        "t_end": t_end,
        "E1": e1 * scale**2,
        "E_tstar": e_star * scale**2,
        "E_low_end": low_energy_values(r_end[:, 0], r_end[:, 1]) * scale**2,
        "tail_bound": bound * scale,
    }
    return r_end * scale[:, None], diag


def scatter_down(bg: KasnerBackground, data: WaveCauchyData, tol: WaveTolerances | None = None, threads=None) -> WaveAsymptotics:
    bg.require_non_degenerate()
    tol = tol or WaveTolerances()
    ms = data.phi_C.modeset
    z = ms.zero_index
    nz = np.flatnonzero(np.arange(len(ms)) != z)
    y1 = np.stack([data.phi_C.coeffs[nz], data.psi_C.coeffs[nz]], axis=-1)

    def work(rows):
        return _down_rows(bg, ms.modes[nz[rows]], y1[rows], tol)

    parts = map_chunks(work, np.arange(nz.size), threads)
    lim = np.concatenate([p[0] for p in parts])
    psi = np.zeros(len(ms), dtype=complex)
    pt = np.zeros(len(ms), dtype=complex)
    psi[nz], pt[nz] = lim[:, 0], lim[:, 1]
    psi[z] = data.psi_C.coeffs[z]
    pt[z] = data.phi_C.coeffs[z]
    diag = {k: np.concatenate([p[1][k] for p in parts]) for k in parts[0][1]}
    diag["modes"] = ms.modes[nz]
    real = data.phi_C.real and data.psi_C.real
    return WaveAsymptotics(Field(ms, psi, real), Field(ms, pt, real), diag)


def _up_rows(bg, lams, v, tol: WaveTolerances):
    cfg = tol.integrator
    v, scale = _normalize_rows(v)
    ts = kc.t_star(bg, lams)
    C = tail_constant(bg)
    system = renorm_system(bg, lams, ts)
    t0 = find_launch_time(lambda t: C * tail_majorant(bg, lams, ts, t), tol.tail_tol, ts)
    r0 = v + picard_tail(system, v, t0)
    r_star, _ = integrate(system, r0, t0, ts, cfg)
    y = np.stack([r_star[:, 1], r_star[:, 0]], axis=-1)
    y1, _ = integrate(physical_system(bg, lams), y, ts, 1.0, cfg)
    return y1 * scale[:, None]


def scatter_up(bg: KasnerBackground, asym: WaveAsymptotics, tol: WaveTolerances | None = None, threads=None) -> WaveCauchyData:
    bg.require_non_degenerate()
    tol = tol or WaveTolerances()
    ms = asym.psi_inf.modeset
    z = ms.zero_index
    nz = np.flatnonzero(np.arange(len(ms)) != z)
    v = np.stack([asym.psi_inf.coeffs[nz], asym.phi_tilde_inf.coeffs[nz]], axis=-1)

    def work(rows):
        return _up_rows(bg, ms.modes[nz[rows]], v[rows], tol)

    y1 = np.concatenate(map_chunks(work, np.arange(nz.size), threads))
    phi = np.zeros(len(ms), dtype=complex)
    psi = np.zeros(len(ms), dtype=complex)
    phi[nz], psi[nz] = y1[:, 0], y1[:, 1]
    phi[z] = asym.phi_tilde_inf.coeffs[z]
    psi[z] = asym.psi_inf.coeffs[z]
    real = asym.psi_inf.real and asym.phi_tilde_inf.real
    return WaveCauchyData(Field(ms, phi, real), Field(ms, psi, real))


def wave_hilbert_norms(obj, s: float, bg: KasnerBackground) -> tuple[float, float]:
    """Both norms of the pair (phi, psi).

    Returns (sqrt(|phi|_{s+1}^2 + |psi|_s^2), sqrt(|psi|_{s+1/2}^2 + |phi + log(T*) psi|_{s+1/2}^2)).
    Cauchy data is read as (phi_C, psi_C); asymptotic data as (phi_inf, psi_inf).
    """
    if isinstance(obj, WaveCauchyData):
        phi, psi = obj.phi_C, obj.psi_C
    elif isinstance(obj, WaveAsymptotics):
        phi, psi = obj.phi_inf(bg), obj.psi_inf
    else:
        phi, psi = obj
    cauchy = math.hypot(sobolev_norm(phi, s + 1), sobolev_norm(psi, s))
    corrected = phi + symbol_apply(psi, SymbolSpec.log_tstar(), bg)
    asymptotic = math.hypot(sobolev_norm(psi, s + 0.5), sobolev_norm(corrected, s + 0.5))
    return cauchy, asymptotic


def cauchy_difference_norm(a: WaveCauchyData, b: WaveCauchyData, s: float) -> float:
    return math.hypot(sobolev_norm(a.phi_C - b.phi_C, s + 1), sobolev_norm(a.psi_C - b.psi_C, s))


def modeset_of(data: WaveCauchyData) -> ModeSet:
    return data.phi_C.modeset


# --- measured constants -----------------------------------------------------
# All sweeps propagate the two basis vectors per mode, so every reported ratio is
# the supremum over all data of that mode rather than a sample.


def high_energy_form(bg: KasnerBackground, lams, t) -> np.ndarray:
    """Hermitian Q with E_high = y^H Q y for y = (phi, psi); shape (B, 2, 2)."""
    tt = np.asarray(kc.tau(bg, lams, t), dtype=float).reshape(-1)
    z = np.asarray(kc.zeta(bg, lams, t), dtype=float).reshape(-1)
    Q = np.empty((tt.size, 2, 2))
    Q[:, 0, 0] = 1.0 / (2 * tt) + z**2 * tt
    Q[:, 0, 1] = Q[:, 1, 0] = z / (2 * tt)
    Q[:, 1, 1] = z**2 / tt
    return Q


def _gen_eigs(A: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """Eigenvalues of A relative to the positive form Q, batched over the leading axis."""
    Li = np.linalg.inv(np.linalg.cholesky(Q))
    M = Li @ A @ np.conj(np.swapaxes(Li, -1, -2))
    return np.linalg.eigvalsh(0.5 * (M + np.conj(np.swapaxes(M, -1, -2))))


def _basis_paths(system_for, lams, t_samples, cfg):
    """Propagator samples Phi[b, k] (2x2) along per-mode sample times (B, K)."""
    B = len(lams)
    rows = np.repeat(np.arange(B), 2)
    y0 = np.tile(np.eye(2, dtype=complex), (B, 1))
    out = integrate_path(system_for(rows), y0, t_samples[rows], cfg)  # (2B, K, 2)
    return out.reshape(B, 2, -1, 2).transpose(0, 2, 3, 1)  # [b, k, component, basis]


def energy_constants(bg: KasnerBackground, lams, n_t: int = 64, tol: WaveTolerances | None = None) -> dict:
    """Two-sided constants C_high on [t*, 1] and C_low on [t_end, t*], per mode."""
    tol = tol or WaveTolerances()
    lams = np.atleast_2d(np.asarray(lams, dtype=float))
    ts = kc.t_star(bg, lams)
    grid = np.linspace(0.0, 1.0, n_t)
    t_hi = np.exp(np.log(ts)[:, None] * grid[None, :])  # 1 -> t*
    Phi = _basis_paths(lambda r: physical_system(bg, lams[r]), lams, t_hi, tol.integrator)
    Q1 = high_energy_form(bg, lams, 1.0)
    c_high = np.ones(len(lams))
    for k in range(n_t):
        Qk = high_energy_form(bg, lams, t_hi[:, k])
        A = np.conj(np.swapaxes(Phi[:, k], -1, -2)) @ Qk @ Phi[:, k]
        e = _gen_eigs(A, Q1)
        c_high = np.maximum(c_high, np.maximum(e[:, -1], 1.0 / e[:, 0]))
    # comparability at t*: E_high(t*) against E_low(t*) = |phi|^2 + |psi|^2
    e_seam = _gen_eigs(np.broadcast_to(np.eye(2), Q1.shape).copy(), high_energy_form(bg, lams, ts))
    C = tail_constant(bg)
    t_end = find_launch_time(lambda t: C * tail_majorant(bg, lams, ts, t), tol.tail_tol, ts)
    t_lo = np.exp(np.log(ts)[:, None] + (np.log(t_end) - np.log(ts))[:, None] * grid[None, :])
    Psi = _basis_paths(lambda r: renorm_system(bg, lams[r], ts[r]), lams, t_lo, tol.integrator)
    sv = np.linalg.svd(Psi, compute_uv=False)  # E_low is the plain norm, so singular values
    c_low = np.maximum(sv[..., 0] ** 2, 1.0 / sv[..., -1] ** 2).max(axis=1)
    return {
        "t_star": ts,
        "C_high": c_high,
        "C_low": c_low,
        "seam_min": e_seam[:, 0],
        "seam_max": e_seam[:, -1],
    }


def _down_propagator(bg, lams, tol: WaveTolerances):
    """Linear map (phi, psi)(1) -> (psi_inf, phi_tilde_inf) per mode, shape (B, 2, 2)."""
    B = len(lams)
    rows = np.repeat(np.arange(B), 2)
    y0 = np.tile(np.eye(2, dtype=complex), (B, 1))
    lim, _ = _down_rows(bg, lams[rows], y0, tol)
    return lim.reshape(B, 2, 2).transpose(0, 2, 1)


def gain_window(bg: KasnerBackground, lams, tol: WaveTolerances | None = None) -> dict:
    """Range of (|psi_inf|^2 + |phi_tilde_inf|^2) / E_high(1) over all data, per mode."""
    tol = tol or WaveTolerances()
    lams = np.atleast_2d(np.asarray(lams, dtype=float))
    S = _down_propagator(bg, lams, tol)
    e = _gen_eigs(np.conj(np.swapaxes(S, -1, -2)) @ S, high_energy_form(bg, lams, 1.0))
    return {"ratio_min": e[:, 0], "ratio_max": e[:, -1]}


def tail_rate_constants(bg: KasnerBackground, lams, n_t: int = 32, floor: float = 1e-5, tol: WaveTolerances | None = None) -> dict:
    """Fitted C in |psi(t) - psi_inf| <= C tau^2 (1 + L^2) E_low(t*)^(1/2), per mode.

    Samples t log-spaced from t* down to where the majorant reaches floor, so the
    measured differences stay well above the tail tolerance.
    """
    tol = tol or WaveTolerances()
    lams = np.atleast_2d(np.asarray(lams, dtype=float))
    ts = kc.t_star(bg, lams)
    C = tail_constant(bg)
    t_end = find_launch_time(lambda t: C * tail_majorant(bg, lams, ts, t), tol.tail_tol, ts)
    t_floor = find_launch_time(lambda t: tail_majorant(bg, lams, ts, t), floor, ts)
    grid = np.linspace(0.0, 1.0, n_t + 1)
    t_lo = np.exp(np.log(ts)[:, None] + (np.log(t_floor) - np.log(ts))[:, None] * grid[None, :])
    t_all = np.concatenate([t_lo, t_end[:, None]], axis=1)
    Psi = _basis_paths(lambda r: renorm_system(bg, lams[r], ts[r]), lams, t_all, tol.integrator)
    X_inf = Psi[:, -1]
    diff = Psi[:, 1:-1, 0, :] - X_inf[:, None, 0, :]  # psi row, basis data has E_low(t*) = 1
    maj = tail_majorant(bg, lams[:, None, :], ts[:, None], t_lo[:, 1:])
    ratio = np.sqrt((np.abs(diff) ** 2).sum(axis=-1)) / maj
    return {"t_star": ts, "C": ratio.max(axis=1)}
