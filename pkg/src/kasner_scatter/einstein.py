"""Linearized Einstein-scalar field system on Kasner, mode by mode.

Per mode the state is (eta, kappa, phi, psi) with eta[i, j] the (1,1) tensor
component with lower index i and upper index j. Fourier multipliers use the
convention d_k -> +i lam_k, under which every constraint has real coefficients.

All array kernels take a batch of modes: lam (B, D), t (B,), tensors (B, D, D).
The packed state vector of a mode is [eta.ravel(), kappa.ravel(), phi, psi]; the
renormalized vector is [upsilon_tilde.ravel(), kappa.ravel(), phi_tilde, psi].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kasner as kc
from .errors import ConstraintViolation, NotSubcritical, RegimeMismatch, ZeroModeError
from .fields import Field, ModeSet, freq_adapted_norm, sample_band_limited, sobolev_norm
from .integrator import IntegratorConfig, OdeSystem, find_launch_time, integrate, integrate_path, picard_tail
from .kasner import KasnerBackground
from .parallel import map_chunks

CMCTC = "CMCTC"
CMCSH = "CMCSH"
SH_TOL = 1e-10


# --- packing ----------------------------------------------------------------


def state_dim(D: int) -> int:
    return 2 * D * D + 2


def pack(a, b, c, d) -> np.ndarray:
    a, b = np.asarray(a, dtype=complex), np.asarray(b, dtype=complex)
    lead = a.shape[:-2]
    D = a.shape[-1]
    return np.concatenate(
        [a.reshape(lead + (D * D,)), b.reshape(lead + (D * D,)), np.asarray(c)[..., None], np.asarray(d)[..., None]],
        axis=-1,
    ).astype(complex)


def unpack(y: np.ndarray, D: int):
    lead = y.shape[:-1]
    n = D * D
    return (
        y[..., :n].reshape(lead + (D, D)),
        y[..., n : 2 * n].reshape(lead + (D, D)),
        y[..., 2 * n],
        y[..., 2 * n + 1],
    )


# --- background weights -----------------------------------------------------


def _w(bg: KasnerBackground, t) -> np.ndarray:
    """t^2 g^aa = t^(2 - 2 p_a), shape (..., D)."""
    return np.asarray(t, dtype=float)[..., None] ** (2.0 - 2.0 * bg.exponents)


def _ginv(bg: KasnerBackground, t) -> np.ndarray:
    """g^aa = t^(-2 p_a)."""
    return np.asarray(t, dtype=float)[..., None] ** (-2.0 * bg.exponents)


def _gg(bg: KasnerBackground, t) -> np.ndarray:
    """g_ii g^jj = t^(2 p_i - 2 p_j), shape (..., D, D)."""
    p = bg.exponents
    return np.asarray(t, dtype=float)[..., None, None] ** (2.0 * (p[:, None] - p[None, :]))


def _tr(a: np.ndarray) -> np.ndarray:
    return np.einsum("...ii->...", a)


def _diag(v: np.ndarray, D: int) -> np.ndarray:
    return np.asarray(v)[..., None, None] * np.eye(D)


# --- elliptic solves and curvature ------------------------------------------


def lapse_values(bg, lam, t, eta, sh: bool = False) -> np.ndarray:
    w = _w(bg, t)
    tau2 = (w * lam**2).sum(-1)
    tr = _tr(eta)
    if sh:
        return tau2 * tr / (1.0 + tau2)
    cross = np.einsum("...a,...a,...i,...ai->...", w, lam, lam, eta)
    return (2.0 * tau2 * tr - 2.0 * cross) / (1.0 + tau2)


def shift_values(bg, lam, t, eta, nu, phi) -> np.ndarray:
    """Shift chi^j keeping the spatially harmonic condition; requires lam != 0."""
    p = bg.exponents
    w = _w(bg, t)
    tau2 = (w * lam**2).sum(-1)
    bracket = -np.einsum("a,...aa->...", p, eta) + 2.0 * bg.p_phi * phi
    rhs = (
        -1j * w * lam * nu[..., None]
        + 2j * w * p * lam * nu[..., None]
        + 4j * np.einsum("...p,p,...p,...pj->...j", w, p, lam, eta)
        + 2j * w * lam * bracket[..., None]
    )
    return rhs / tau2[..., None]


def ricci_values(bg, lam, t, eta) -> np.ndarray:
    """t^2 Ric_i^j for a general (not necessarily harmonic) eta."""
    w = _w(bg, t)
    tau2 = (w * lam**2).sum(-1)
    tr = _tr(eta)
    out = -tau2[..., None, None] * eta
    out = out - (lam[..., :, None] * (w * lam)[..., None, :]) * tr[..., None, None]
    out = out + lam[..., :, None] * np.einsum("...a,...aj->...j", w * lam, eta)[..., None, :]
    out = out + (w * lam)[..., None, :] * np.einsum("...b,...ib->...i", lam, eta)[..., :, None]
    return out


def sh_values(lam, eta) -> np.ndarray:
    """2 lam_j eta_i^j - lam_i tr eta."""
    return 2.0 * np.einsum("...j,...ij->...i", lam, eta) - lam * _tr(eta)[..., None]


# --- evolution kernels ------------------------------------------------------


def cmcsh_derivs(bg, lam, t, eta, kappa, phi, psi):
    """t d/dt of (eta, kappa, phi, psi) in CMCSH gauge, plus the shift chi."""
    D = bg.D
    p = bg.exponents
    w = _w(bg, t)
    tau2 = (w * lam**2).sum(-1)
    nu = lapse_values(bg, lam, t, eta, sh=True)
    chi = shift_values(bg, lam, t, eta, nu, phi)
    dp = p[:, None] - p[None, :]
    gg = _gg(bg, t)
    deta = (
        kappa
        + 2.0 * dp * eta
        - _diag(nu, D) * p[:, None]
        - 0.5j * lam[..., :, None] * chi[..., None, :]
        - 0.5j * gg * lam[..., None, :] * chi[..., :, None]
    )
    dkappa = (
        -tau2[..., None, None] * eta
        + lam[..., :, None] * (w * lam)[..., None, :] * nu[..., None, None]
        + _diag(nu, D) * p[:, None]
        + 1j * dp * lam[..., :, None] * chi[..., None, :]
    )
    dphi = psi + bg.p_phi * nu
    dpsi = -tau2 * phi - bg.p_phi * nu
    return deta, dkappa, dphi, dpsi, chi


def cmctc_derivs(bg, lam, t, eta, kappa, phi, psi):
    """t d/dt of (eta, kappa, phi, psi) with zero shift and the general curvature."""
    D = bg.D
    p = bg.exponents
    w = _w(bg, t)
    tau2 = (w * lam**2).sum(-1)
    nu = lapse_values(bg, lam, t, eta)
    deta = kappa + 2.0 * (p[:, None] - p[None, :]) * eta - _diag(nu, D) * p[:, None]
    dkappa = (
        ricci_values(bg, lam, t, eta)
        + lam[..., :, None] * (w * lam)[..., None, :] * nu[..., None, None]
        + _diag(nu, D) * p[:, None]
    )
    return deta, dkappa, psi + bg.p_phi * nu, -tau2 * phi - bg.p_phi * nu


def renorm_derivs(bg, lam, t, tstar, ups, kappa, phit, psi):
    """t d/dt of (upsilon_tilde, kappa, phi_tilde, psi) in CMCTC gauge below t*."""
    D = bg.D
    p = bg.exponents
    G = kc.g_tensor(bg, t, tstar)
    eta = ups - G * np.swapaxes(kappa, -1, -2)
    w = _w(bg, t)
    tau2 = (w * lam**2).sum(-1)
    nu = lapse_values(bg, lam, t, eta)
    dkappa = (
        ricci_values(bg, lam, t, eta)
        + lam[..., :, None] * (w * lam)[..., None, :] * nu[..., None, None]
        + _diag(nu, D) * p[:, None]
    )
    dups = G * np.swapaxes(dkappa, -1, -2) - _diag(nu, D) * p[:, None]
    L = np.log(tstar / t)
    dpsi = -tau2 * (phit - L * psi) - bg.p_phi * nu
    dphit = L * dpsi + bg.p_phi * nu
    return dups, dkappa, dphit, dpsi


# --- batched systems --------------------------------------------------------


def cmcsh_system(bg: KasnerBackground, lams, with_xi: bool = False) -> OdeSystem:
    """CMCSH evolution; with_xi appends xi (t d/dt xi = chi) to each row."""
    lams = np.asarray(lams, dtype=float)
    D = bg.D
    n = state_dim(D)

    def rhs(t, y):
        eta, kappa, phi, psi = unpack(y[:, :n], D)
        de, dk, dph, dps, chi = cmcsh_derivs(bg, lams, t, eta, kappa, phi, psi)
        out = pack(de, dk, dph, dps)
        return np.concatenate([out, chi], axis=-1) if with_xi else out

    return OdeSystem(rhs, n + (D if with_xi else 0), restrict=lambda rows: cmcsh_system(bg, lams[rows], with_xi))


def cmctc_system(bg: KasnerBackground, lams) -> OdeSystem:
    lams = np.asarray(lams, dtype=float)
    D = bg.D

    def rhs(t, y):
        return pack(*cmctc_derivs(bg, lams, t, *unpack(y, D)))

    return OdeSystem(rhs, state_dim(D), restrict=lambda rows: cmctc_system(bg, lams[rows]))


def renorm_system(bg: KasnerBackground, lams, tstars) -> OdeSystem:
    lams = np.asarray(lams, dtype=float)
    tstars = np.asarray(tstars, dtype=float)
    D = bg.D

    def rhs(t, y):
        ups, kappa, phit, psi = unpack(y, D)
        return pack(*renorm_derivs(bg, lams, np.asarray(t), tstars, ups, kappa, phit, psi))

    return OdeSystem(rhs, state_dim(D), restrict=lambda rows: renorm_system(bg, lams[rows], tstars[rows]))


# --- constraints ------------------------------------------------------------


def constraint_names(D: int, sh: bool = True) -> list[str]:
    names = ["hamiltonian"]
    names += [f"momentum1[{i}]" for i in range(D)]
    names += [f"momentum2[{i}]" for i in range(D)]
    pairs = [(a, c) for a in range(D) for c in range(a + 1, D)]
    names += [f"sym_eta[{a},{c}]" for a, c in pairs]
    names += [f"sym_kappa[{a},{c}]" for a, c in pairs]
    names += ["cmc"]
    if sh:
        names += [f"harmonic[{i}]" for i in range(D)]
    return names


def _constraint_rows(bg, lam, ginv, eta, kappa, phi, psi, ham_geom, sh: bool):
    D = bg.D
    p = bg.exponents
    tr = _tr(eta)
    S = -np.einsum("a,...aa->...", p, eta) + 2.0 * bg.p_phi * phi
    ham = ham_geom - 2.0 * np.einsum("a,...aa->...", p, kappa) + 4.0 * bg.p_phi * psi
    m1 = np.einsum("...j,...ij->...i", lam, kappa) + lam * S[..., None] + p * lam * tr[..., None]
    m2 = (
        np.einsum("...a,...a,...ac->...c", ginv, lam, kappa)
        + ginv * lam * S[..., None]
        + 2.0 * np.einsum("...a,a,...a,...ac->...c", ginv, p, lam, eta)
    )
    ge = ginv[..., :, None] * eta
    gk = ginv[..., :, None] * (kappa + 2.0 * p[:, None] * eta)
    iu, ju = np.triu_indices(D, 1)
    sym_e = (ge - np.swapaxes(ge, -1, -2))[..., iu, ju]
    sym_k = (gk - np.swapaxes(gk, -1, -2))[..., iu, ju]
    parts = [ham[..., None], m1, m2, sym_e, sym_k, _tr(kappa)[..., None]]
    if sh:
        parts.append(sh_values(lam, eta))
    return np.concatenate(parts, axis=-1)


def constraint_values(bg, lam, t, eta, kappa, phi, psi, sh: bool = True) -> np.ndarray:
    """All constraint expressions at time t, shape (..., m); zero for admissible data."""
    w = _w(bg, t)
    tau2 = (w * lam**2).sum(-1)
    cross = np.einsum("...a,...a,...i,...ai->...", w, lam, lam, eta)
    ham_geom = 2.0 * tau2 * _tr(eta) - 2.0 * cross
    return _constraint_rows(bg, lam, _ginv(bg, t), eta, kappa, phi, psi, ham_geom, sh)


def asymptotic_constraint_values(bg, lam, tstar, ups, kappa, phit, psi, cmcfa: bool = False) -> np.ndarray:
    """Constraints on limits (upsilon_tilde, kappa, phi_tilde, psi) with g(t*) weights.

    The Hamiltonian row is -sum p_a kappa_a^a + 2 p_phi psi (scaled by 2 to share
    code with the Cauchy version); cmcfa adds the frequency adapted gauge rows.
    """
    zero = np.zeros(np.shape(phit))
    return _constraint_rows(bg, lam, _ginv(bg, tstar), ups, kappa, phit, psi, zero, cmcfa)


def constraint_matrix(func, lam, D: int) -> np.ndarray:
    """Matrix of a linear per-mode map func(lam, y) -> (B, m), shape (B, m, n)."""
    lam = np.atleast_2d(lam)
    B = lam.shape[0]
    n = state_dim(D)
    basis = np.broadcast_to(np.eye(n, dtype=complex), (B, n, n)).reshape(B * n, n)
    lam_rep = np.repeat(lam, n, axis=0)
    cols = func(lam_rep, basis, np.repeat(np.arange(B), n))
    return cols.reshape(B, n, -1).transpose(0, 2, 1)


def _cauchy_matrix(bg, lam, t, sh=True):
    t = np.broadcast_to(np.asarray(t, dtype=float), (np.atleast_2d(lam).shape[0],))
    return constraint_matrix(
        lambda l, y, rows: constraint_values(bg, l, t[rows], *unpack(y, bg.D), sh=sh), lam, bg.D
    )


def _asym_matrix(bg, lam, tstar, cmcfa=False):
    tstar = np.broadcast_to(np.asarray(tstar, dtype=float), (np.atleast_2d(lam).shape[0],))
    return constraint_matrix(
        lambda l, y, rows: asymptotic_constraint_values(bg, l, tstar[rows], *unpack(y, bg.D), cmcfa=cmcfa),
        lam,
        bg.D,
    )


def relative_residuals(M: np.ndarray, y: np.ndarray) -> np.ndarray:
    """|M y| per row over (row norm * |y|); rows with zero norm report 0."""
    r = np.abs(np.einsum("...mn,...n->...m", M, y))
    scale = np.linalg.norm(M, axis=-1) * np.linalg.norm(y, axis=-1)[..., None]
    return np.where(scale > 0, r / np.where(scale > 0, scale, 1.0), 0.0)


def nullspace_projector(M: np.ndarray, rtol: float = 1e-10) -> np.ndarray:
    """Orthogonal projector onto ker M per mode, rows of M normalized first."""
    rn = np.linalg.norm(M, axis=-1, keepdims=True)
    Mn = M / np.where(rn > 0, rn, 1.0)
    _, s, vh = np.linalg.svd(Mn, full_matrices=False)
    keep = s > rtol * np.maximum(s[..., :1], 1e-300)
    V = np.conj(np.swapaxes(vh, -1, -2)) * keep[..., None, :]
    n = M.shape[-1]
    return np.eye(n) - V @ np.conj(np.swapaxes(V, -1, -2))


def nullspace_basis(M: np.ndarray, rtol: float = 1e-10) -> list[np.ndarray]:
    """Orthonormal kernel basis per mode (list, since dimensions can differ)."""
    out = []
    for Mb in M:
        rn = np.linalg.norm(Mb, axis=-1, keepdims=True)
        Mn = Mb / np.where(rn > 0, rn, 1.0)
        _, s, vh = np.linalg.svd(Mn, full_matrices=True)
        rank = int((s > rtol * max(s[0], 1e-300)).sum()) if s.size else 0
        out.append(np.conj(vh[rank:].T))
    return out


# --- gauge ------------------------------------------------------------------


def gauge_deltas(bg, lam, weight_gg, xi):
    """Changes of (eta or upsilon_tilde, kappa) under a static xi with weights g_ii g^jj."""
    p = bg.exponents
    d_eta = 0.5j * (lam[..., :, None] * xi[..., None, :] + weight_gg * lam[..., None, :] * xi[..., :, None])
    d_kappa = 1j * (p[None, :] - p[:, None]) * lam[..., :, None] * xi[..., None, :]
    return d_eta, d_kappa


def harmonic_xi(bg, lam, t, eta) -> np.ndarray:
    """xi making eta + (gauge change) spatially harmonic at time t; lam != 0."""
    w = _w(bg, t)
    tau2 = (w * lam**2).sum(-1)
    return 1j * w * sh_values(lam, eta) / tau2[..., None]


# --- single-mode public operations -------------------------------------------


@dataclass
class EinsteinModeState:
    eta: np.ndarray
    kappa: np.ndarray
    phi: complex
    psi: complex
    t: float
    gauge: str = CMCSH

    def vector(self) -> np.ndarray:
        return pack(self.eta, self.kappa, self.phi, self.psi)

    @classmethod
    def from_vector(cls, y, D, t, gauge=CMCSH) -> "EinsteinModeState":
        e, k, ph, ps = unpack(np.asarray(y), D)
        return cls(e.copy(), k.copy(), complex(ph), complex(ps), t, gauge)


@dataclass
class EinsteinRenormState:
    kappa: np.ndarray
    upsilon_tilde: np.ndarray
    psi: complex
    phi_tilde: complex
    t: float

    def vector(self) -> np.ndarray:
        return pack(self.upsilon_tilde, self.kappa, self.phi_tilde, self.psi)

    @classmethod
    def from_vector(cls, y, D, t) -> "EinsteinRenormState":
        u, k, pt, ps = unpack(np.asarray(y), D)
        return cls(k.copy(), u.copy(), complex(ps), complex(pt), t)


def to_renorm(bg: KasnerBackground, lam, state: EinsteinModeState) -> EinsteinRenormState:
    ts = kc.t_star(bg, lam)
    G = kc.g_tensor(bg, state.t, ts)
    ups = state.eta + G * state.kappa.T
    return EinsteinRenormState(state.kappa.copy(), ups, state.psi, state.phi + math.log(ts / state.t) * state.psi, state.t)


def from_renorm(bg: KasnerBackground, lam, state: EinsteinRenormState) -> EinsteinModeState:
    ts = kc.t_star(bg, lam)
    G = kc.g_tensor(bg, state.t, ts)
    eta = state.upsilon_tilde - G * state.kappa.T
    return EinsteinModeState(eta, state.kappa.copy(), state.phi_tilde - math.log(ts / state.t) * state.psi, state.psi, state.t, CMCTC)


def _lam(lam) -> np.ndarray:
    return np.asarray(lam, dtype=float)


def _nonzero(lam) -> np.ndarray:
    lam = _lam(lam)
    if not np.any(lam):
        raise ZeroModeError("this operation needs lambda != 0")
    return lam


def lapse_solve(bg: KasnerBackground, lam, t: float, eta, gauge: str = CMCTC, shortcut: bool | None = None) -> complex:
    """Lapse of the mode.

    By default the harmonic shortcut is used when gauge is CMCSH and eta is harmonic;
    shortcut=True or False forces the choice.
    """
    lam = _lam(lam)
    eta = np.asarray(eta, dtype=complex)
    if shortcut is not None:
        return complex(lapse_values(bg, lam, t, eta, sh=shortcut))
    sh = gauge == CMCSH and np.abs(sh_values(lam, eta)).max() <= SH_TOL * max(1.0, np.abs(lam).max() * np.abs(eta).max())
    return complex(lapse_values(bg, lam, t, eta, sh=sh))


def shift_solve_cmcsh(bg: KasnerBackground, lam, t: float, eta_hat, nu, phi) -> np.ndarray:
    lam = _nonzero(lam)
    return shift_values(bg, lam, t, np.asarray(eta_hat, dtype=complex), np.asarray(nu, dtype=complex), np.asarray(phi, dtype=complex))


def einstein_rhs_cmcsh(bg: KasnerBackground, lam, t: float, state: EinsteinModeState) -> EinsteinModeState:
    lam = _nonzero(lam)
    de, dk, dph, dps, _ = cmcsh_derivs(bg, lam, t, state.eta, state.kappa, state.phi, state.psi)
    return EinsteinModeState(de, dk, complex(dph), complex(dps), t, CMCSH)


def einstein_rhs_cmctc_renorm(bg: KasnerBackground, lam, t: float, state: EinsteinRenormState) -> EinsteinRenormState:
    lam = _nonzero(lam)
    ts = kc.t_star(bg, lam)
    du, dk, dpt, dps = renorm_derivs(bg, lam, t, ts, state.upsilon_tilde, state.kappa, state.phi_tilde, state.psi)
    return EinsteinRenormState(dk, du, complex(dps), complex(dpt), t)


@dataclass
class ConstraintReport:
    residuals: dict
    relative: dict
    scale: float

    @property
    def max_relative(self) -> float:
        return max(self.relative.values(), default=0.0)


def _report(names, vals, rel, y) -> ConstraintReport:
    return ConstraintReport(
        {k: float(abs(v)) for k, v in zip(names, vals)},
        {k: float(r) for k, r in zip(names, rel)},
        float(np.linalg.norm(y)),
    )


def constraints_residual(bg: KasnerBackground, lam, t: float, state: EinsteinModeState, sh: bool | None = None) -> ConstraintReport:
    """Absolute and relative residual of every constraint; sh defaults to the state's gauge."""
    lam = _lam(lam)
    sh = state.gauge == CMCSH if sh is None else sh
    y = state.vector()
    vals = constraint_values(bg, lam, t, state.eta, state.kappa, state.phi, state.psi, sh=sh)
    M = _cauchy_matrix(bg, lam, t, sh=sh)[0]
    return _report(constraint_names(bg.D, sh), vals, relative_residuals(M, y), y)


def asymptotic_constraints_residual(bg: KasnerBackground, lam, asym: EinsteinRenormState) -> ConstraintReport:
    lam = _lam(lam)
    ts = kc.t_star(bg, lam) if np.any(lam) else 1.0
    y = asym.vector()
    vals = asymptotic_constraint_values(bg, lam, ts, asym.upsilon_tilde, asym.kappa, asym.phi_tilde, asym.psi)
    M = _asym_matrix(bg, lam, ts)[0]
    return _report(constraint_names(bg.D, False), vals, relative_residuals(M, y), y)


def gauge_transform(obj, xi, bg: KasnerBackground, lam, t: float | None = None, xi_rate=None):
    """Apply a gauge change to a mode.

    Physical states use g(t) weights (t defaults to state.t); renormalized states or
    limits use g(T) with T = t* of the mode. xi_rate (t d/dt xi) is returned as the
    shift change -xi_rate alongside the state when given.
    """
    lam = _lam(lam)
    xi = np.asarray(xi, dtype=complex)
    if isinstance(obj, EinsteinRenormState):
        T = kc.t_star(bg, lam) if np.any(lam) else 1.0
        du, dk = gauge_deltas(bg, lam, _gg(bg, T), xi)
        out = EinsteinRenormState(obj.kappa + dk, obj.upsilon_tilde + du, obj.psi, obj.phi_tilde, obj.t)
    else:
        tt = obj.t if t is None else t
        de, dk = gauge_deltas(bg, lam, _gg(bg, tt), xi)
        out = EinsteinModeState(obj.eta + de, obj.kappa + dk, obj.phi, obj.psi, obj.t, obj.gauge)
    if xi_rate is None:
        return out
    return out, -np.asarray(xi_rate, dtype=complex)


def to_cmcsh(bg: KasnerBackground, t: float, state: EinsteinModeState, lam):
    lam = _nonzero(lam)
    xi = harmonic_xi(bg, lam, t, state.eta)
    out = gauge_transform(state, xi, bg, lam, t)
    out.gauge = CMCSH
    return out, xi


def cmcfa_xi(bg: KasnerBackground, lam, upsilon_tilde) -> np.ndarray:
    """Static xi making the limit tensor satisfy the frequency adapted gauge condition."""
    lam = _nonzero(lam)
    ts = kc.t_star(bg, lam)
    return harmonic_xi(bg, lam, ts, np.asarray(upsilon_tilde, dtype=complex))


# --- energies ---------------------------------------------------------------


def _transpose_perm(D: int) -> np.ndarray:
    P = np.zeros((D * D, D * D))
    for i in range(D):
        for j in range(D):
            P[i * D + j, j * D + i] = 1.0
    return P


def high_form(bg: KasnerBackground, lams, t) -> np.ndarray:
    """Hermitian Q(t) with E_high = Re(y^H Q y) on packed physical states, (B, n, n)."""
    lams = np.atleast_2d(_lam(lams))
    D = bg.D
    tt = np.atleast_1d(np.asarray(kc.tau(bg, lams, t), dtype=float))
    z = np.atleast_1d(np.asarray(kc.zeta(bg, lams, t), dtype=float))
    P = _transpose_perm(D)
    n = state_dim(D)
    nn = D * D
    a = 1.0 / (2 * tt) + z**2 * tt
    b = z**2 / tt
    c = z / (2 * tt)
    Q = np.zeros((tt.size, n, n))
    Q[:, :nn, :nn] = a[:, None, None] * P
    Q[:, nn : 2 * nn, nn : 2 * nn] = b[:, None, None] * P
    Q[:, :nn, nn : 2 * nn] = c[:, None, None] * P
    Q[:, nn : 2 * nn, :nn] = c[:, None, None] * P
    Q[:, 2 * nn, 2 * nn] = a
    Q[:, 2 * nn + 1, 2 * nn + 1] = b
    Q[:, 2 * nn, 2 * nn + 1] = Q[:, 2 * nn + 1, 2 * nn] = c
    return Q


def weighted_form(bg: KasnerBackground, T) -> np.ndarray:
    """Diagonal form sum g^ii g_jj(T) (|A_i^j|^2 + |B_i^j|^2) + |c|^2 + |d|^2, (B, n, n)."""
    T = np.atleast_1d(np.asarray(T, dtype=float))
    W = (1.0 / _gg(bg, T)).reshape(T.size, -1)
    d = np.concatenate([W, W, np.ones((T.size, 2))], axis=1)
    return d[:, :, None] * np.eye(d.shape[1])


def quad(Q: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.real(np.einsum("...m,...mn,...n->...", np.conj(y), Q, y))


def einstein_energy(bg: KasnerBackground, lam, t: float, state, regime: str) -> float:
    lam = _nonzero(lam)
    tau_t = float(kc.tau(bg, lam, t))
    eps = 1e-12
    if regime == "high":
        if tau_t < bg.tau_ringed * (1 - eps):
            raise RegimeMismatch(f"high regime needs tau >= {bg.tau_ringed}, got {tau_t}")
        return float(quad(high_form(bg, lam, t)[0], state.vector()))
    if regime == "mid":
        if not (1 - eps <= tau_t <= bg.tau_ringed * (1 + eps)):
            raise RegimeMismatch(f"mid regime needs 1 <= tau <= {bg.tau_ringed}, got {tau_t}")
        return float(quad(weighted_form(bg, t)[0], state.vector()))
    if regime == "low":
        if tau_t > 1 + eps or not isinstance(state, EinsteinRenormState):
            raise RegimeMismatch("low regime needs tau <= 1 and a renormalized state")
        return float(quad(weighted_form(bg, kc.t_star(bg, lam))[0], state.vector()))
    raise ValueError(f"unknown regime {regime!r}")


# --- data containers ----------------------------------------------------------


@dataclass
class EinsteinTolerances:
    rel_tol: float = 1e-10
    abs_tol: float = 1e-14
    tail_tol: float = 1e-9
    constraint_tol: float = 1e-8

    @property
    def integrator(self) -> IntegratorConfig:
        return IntegratorConfig(rel_tol=self.rel_tol, abs_tol=self.abs_tol)


@dataclass
class EinsteinCauchyData:
    eta: Field
    kappa: Field
    phi: Field
    psi: Field

    @property
    def modeset(self) -> ModeSet:
        return self.eta.modeset

    def vectors(self) -> np.ndarray:
        return pack(self.eta.coeffs, self.kappa.coeffs, self.phi.coeffs, self.psi.coeffs)

    @classmethod
    def from_vectors(cls, ms: ModeSet, y: np.ndarray, real: bool) -> "EinsteinCauchyData":
        e, k, ph, ps = unpack(y, ms.D)
        return cls(Field(ms, e.copy(), real), Field(ms, k.copy(), real), Field(ms, ph.copy(), real), Field(ms, ps.copy(), real))


@dataclass
class EinsteinAsymptotics:
    kappa_inf: Field
    upsilon_tilde_inf: Field
    psi_inf: Field
    phi_tilde_inf: Field
    xi_inf: Field
    diagnostics: dict = field(default_factory=dict, repr=False)

    @property
    def modeset(self) -> ModeSet:
        return self.kappa_inf.modeset

    def vectors(self) -> np.ndarray:
        return pack(self.upsilon_tilde_inf.coeffs, self.kappa_inf.coeffs, self.phi_tilde_inf.coeffs, self.psi_inf.coeffs)


def _mode_tstars(bg, ms: ModeSet) -> np.ndarray:
    ts = np.ones(len(ms))
    nz = np.arange(len(ms)) != ms.zero_index
    ts[nz] = kc.t_star(bg, ms.modes[nz])
    return ts


def random_constrained_data(bg: KasnerBackground, Lambda: int, seed: int, sigma: float = 2.0, real: bool = True) -> EinsteinCauchyData:
    """Seeded band-limited data projected onto the constraints and the harmonic condition at t = 1."""
    D = bg.D
    ms = ModeSet(D, Lambda)
    e = sample_band_limited(seed, Lambda, sigma, "tensor", False, D).coeffs
    k = sample_band_limited(seed + 1, Lambda, sigma, "tensor", False, D).coeffs
    ph = sample_band_limited(seed + 2, Lambda, sigma, "scalar", False, D).coeffs
    ps = sample_band_limited(seed + 3, Lambda, sigma, "scalar", False, D).coeffs
    y = pack(e, k, ph, ps)
    lams = ms.modes.astype(float)
    P = nullspace_projector(_cauchy_matrix(bg, lams, 1.0, sh=True))
    y = np.einsum("bmn,bn->bm", P, y)
    if real:
        y = 0.5 * (y + np.conj(y[ms.negation()]))
    return EinsteinCauchyData.from_vectors(ms, y, real)


def cauchy_residuals(bg: KasnerBackground, data: EinsteinCauchyData, sh: bool = True) -> np.ndarray:
    """Max relative constraint residual per mode at t = 1."""
    lams = data.modeset.modes.astype(float)
    return relative_residuals(_cauchy_matrix(bg, lams, 1.0, sh=sh), data.vectors()).max(axis=-1)


def asymptotic_residuals(bg: KasnerBackground, asym: EinsteinAsymptotics, cmcfa: bool = True) -> np.ndarray:
    ms = asym.modeset
    lams = ms.modes.astype(float)
    return relative_residuals(_asym_matrix(bg, lams, _mode_tstars(bg, ms), cmcfa=cmcfa), asym.vectors()).max(axis=-1)


# --- scattering pipelines -------------------------------------------------------


def tail_majorant(bg: KasnerBackground, tstars, t) -> np.ndarray:
    """(t/t*)^delta (1 + log(t*/t))^2 / delta: integrated derivative bound below t*."""
    d = bg.delta
    L = np.log(tstars / t)
    return np.exp(-d * L) * (1.0 + L) ** 2 / d


def _require_subcritical(bg: KasnerBackground) -> None:
    bg.require_non_degenerate()
    if not bg.subcritical:
        raise NotSubcritical(f"subcriticality margin {kc.subcriticality_margin(bg)!r} is not positive")


def _normalize_rows(y):
    scale = np.linalg.norm(y, axis=-1)
    scale = np.where(scale > 0, scale, 1.0)
    return y / scale[:, None], scale


def _down_rows(bg, lams, y1, tol: EinsteinTolerances):
    D = bg.D
    n = state_dim(D)
    cfg = tol.integrator
    y, scale = _normalize_rows(y1)
    ts = kc.t_star(bg, lams)
    aug = np.concatenate([y, np.zeros((len(y), D), dtype=complex)], axis=1)
    e1 = quad(high_form(bg, lams, 1.0), y)
    ys, _ = integrate(cmcsh_system(bg, lams, with_xi=True), aug, 1.0, ts, cfg)
    y_star, xi_sh = ys[:, :n], ys[:, n:]
    e_high_star = quad(high_form(bg, lams, ts), y_star)
    e_low_star = quad(weighted_form(bg, ts), y_star)  # G = 0 and phi_tilde = phi at t*
    t_end = find_launch_time(lambda t: tail_majorant(bg, ts, t), tol.tail_tol, ts)
    r_end, _ = integrate(renorm_system(bg, lams, ts), y_star, ts, t_end, cfg)
    ups, kappa, phit, psi = unpack(r_end, D)
    xi_a = harmonic_xi(bg, lams, ts, ups)
    du, dk = gauge_deltas(bg, lams, _gg(bg, ts), xi_a)
    lim = pack(ups + du, kappa + dk, phit, psi)
    diag = {
        "t_star": ts,
        "t_end": t_end,
        "E_high_1": e1 * scale**2,
        "E_high_tstar": e_high_star * scale**2,
        "E_low_tstar": e_low_star * scale**2,
        "E_low_end": quad(weighted_form(bg, ts), r_end) * scale**2,
        "tail_bound": tail_majorant(bg, ts, t_end) * np.sqrt(e_low_star) * scale,
    }
    return lim * scale[:, None], (xi_sh - xi_a) * scale[:, None], diag


def einstein_scatter_down(bg: KasnerBackground, data: EinsteinCauchyData, tol: EinsteinTolerances | None = None, threads=None) -> EinsteinAsymptotics:
    """Cauchy data at t = 1 (constraints and harmonic condition) to limits at t = 0."""
    _require_subcritical(bg)
    tol = tol or EinsteinTolerances()
    res = cauchy_residuals(bg, data, sh=True)
    if res.max(initial=0.0) > tol.constraint_tol:
        raise ConstraintViolation(f"data constraint residual {res.max():.3e} exceeds {tol.constraint_tol:.1e}")
    ms = data.modeset
    D = bg.D
    z = ms.zero_index
    nz = np.flatnonzero(np.arange(len(ms)) != z)
    y1 = data.vectors()

    def work(rows):
        return _down_rows(bg, ms.modes[nz[rows]].astype(float), y1[nz[rows]], tol)

    parts = map_chunks(work, np.arange(nz.size), threads)
    lim = np.zeros_like(y1)
    xi = np.zeros((len(ms), D), dtype=complex)
    lim[nz] = np.concatenate([p[0] for p in parts])
    xi[nz] = np.concatenate([p[1] for p in parts])
    lim[z] = y1[z]  # zero mode: kappa, upsilon, psi and phi are constant
    diag = {k: np.concatenate([p[2][k] for p in parts]) for k in parts[0][2]}
    diag["modes"] = ms.modes[nz]
    real = data.eta.real
    u, k, pt, ps = unpack(lim, D)
    return EinsteinAsymptotics(
        Field(ms, k.copy(), real), Field(ms, u.copy(), real), Field(ms, ps.copy(), real), Field(ms, pt.copy(), real), Field(ms, xi, real), diag
    )


def _up_rows(bg, lams, v, tol: EinsteinTolerances):
    D = bg.D
    cfg = tol.integrator
    v, scale = _normalize_rows(v)
    ts = kc.t_star(bg, lams)
    system = renorm_system(bg, lams, ts)
    t0 = find_launch_time(lambda t: tail_majorant(bg, ts, t), tol.tail_tol, ts)
    r0 = v + picard_tail(system, v, t0)
    r_star, _ = integrate(system, r0, t0, ts, cfg)
    eta, kappa, phi, psi = unpack(r_star, D)
    xi = harmonic_xi(bg, lams, ts, eta)
    de, dk = gauge_deltas(bg, lams, _gg(bg, ts), xi)
    y_star = pack(eta + de, kappa + dk, phi, psi)
    y1, _ = integrate(cmcsh_system(bg, lams), y_star, ts, 1.0, cfg)
    return y1 * scale[:, None]


def einstein_scatter_up(bg: KasnerBackground, asym: EinsteinAsymptotics, tol: EinsteinTolerances | None = None, threads=None) -> EinsteinCauchyData:
    """Limits at t = 0 (asymptotic constraints) back to Cauchy data at t = 1."""
    _require_subcritical(bg)
    tol = tol or EinsteinTolerances()
    res = asymptotic_residuals(bg, asym, cmcfa=False)
    if res.max(initial=0.0) > tol.constraint_tol:
        raise ConstraintViolation(f"asymptotic constraint residual {res.max():.3e} exceeds {tol.constraint_tol:.1e}")
    ms = asym.modeset
    z = ms.zero_index
    nz = np.flatnonzero(np.arange(len(ms)) != z)
    v = asym.vectors()

    def work(rows):
        return _up_rows(bg, ms.modes[nz[rows]].astype(float), v[nz[rows]], tol)

    out = np.zeros_like(v)
    out[nz] = np.concatenate(map_chunks(work, np.arange(nz.size), threads))
    out[z] = v[z]
    return EinsteinCauchyData.from_vectors(ms, out, asym.kappa_inf.real)


def einstein_hilbert_norms(obj, s: float, bg: KasnerBackground) -> tuple[float, float]:
    """(Cauchy norm, frequency adapted asymptotic norm) of data or limits."""
    if isinstance(obj, EinsteinCauchyData):
        c = math.sqrt(
            sobolev_norm(obj.eta, s + 1) ** 2 + sobolev_norm(obj.kappa, s) ** 2 + sobolev_norm(obj.phi, s + 1) ** 2 + sobolev_norm(obj.psi, s) ** 2
        )
        return c, float("nan")
    a = math.sqrt(
        freq_adapted_norm(obj.kappa_inf, s + 0.5, bg) ** 2
        + freq_adapted_norm(obj.upsilon_tilde_inf, s + 0.5, bg) ** 2
        + sobolev_norm(obj.psi_inf, s + 0.5) ** 2
        + sobolev_norm(obj.phi_tilde_inf, s + 0.5) ** 2
    )
    return float("nan"), a


def cauchy_difference(a: EinsteinCauchyData, b: EinsteinCauchyData, s: float, bg: KasnerBackground) -> float:
    diff = EinsteinCauchyData(a.eta - b.eta, a.kappa - b.kappa, a.phi - b.phi, a.psi - b.psi)
    return einstein_hilbert_norms(diff, s, bg)[0]


# --- elliptic estimates ---------------------------------------------------------


@dataclass
class EllipticReport:
    regime: str
    ratios: dict
    constants: dict
    slack: dict

    @property
    def passed(self) -> bool:
        return all(v >= 0 for v in self.slack.values())


def _elliptic_functionals(bg, lam, t, regime):
    """Linear maps state -> (tr eta, nu, g-weighted chi) and the majorant at t."""
    lam = np.atleast_2d(lam)
    D = bg.D
    n = state_dim(D)
    basis = np.eye(n, dtype=complex)
    lam_rep = np.repeat(lam, n, axis=0)
    tt = np.full(n * lam.shape[0], float(t))
    if regime == "high":
        eta, kappa, phi, psi = unpack(basis, D)
        eta = np.tile(eta, (lam.shape[0], 1, 1))
        phi = np.tile(phi, lam.shape[0])
        nu = lapse_values(bg, lam_rep, tt, eta, sh=True)
        chi = shift_values(bg, lam_rep, tt, eta, nu, phi)
        chi_g = chi * np.sqrt(tt[:, None] ** (2 * bg.exponents))
        tau_t = float(kc.tau(bg, lam[0], t))
        maj = {"tr_eta": tau_t**-1.5, "nu": tau_t**-1.5, "chi": t * tau_t**-1.5}
        f = {"tr_eta": _tr(eta), "nu": nu, "chi": chi_g}
    else:
        ts = float(kc.t_star(bg, lam[0]))
        ups, kappa, phit, psi = unpack(basis, D)
        G = kc.g_tensor(bg, t, ts)
        eta = np.tile(ups - G * np.swapaxes(kappa, -1, -2), (lam.shape[0], 1, 1))
        nu = lapse_values(bg, lam_rep, tt, eta)
        L = math.log(ts / t)
        maj = {"nu": max((t / ts) ** (2 - 2 * p) for p in bg.exponents) * (1 + L)}
        f = {"nu": nu}
    return f, maj


def elliptic_sup_constants(bg: KasnerBackground, lam, t: float, regime: str) -> dict:
    """Exact sup over admissible states of |quantity| / (majorant * E^(1/2)) for one mode."""
    lam = _nonzero(lam)
    f, maj = _elliptic_functionals(bg, lam, t, regime)
    if regime == "high":
        M = _cauchy_matrix(bg, lam, t, sh=True)
        Q = high_form(bg, lam, t)[0]
    else:
        ts = kc.t_star(bg, lam)
        G = kc.g_tensor(bg, t, ts)
        # admissible renormalized states: constraints of the reconstructed physical state
        def cons(l, y, rows):
            u, k, pt, ps = unpack(y, bg.D)
            eta = u - G * np.swapaxes(k, -1, -2)
            return constraint_values(bg, l, np.full(len(y), t), eta, k, pt - math.log(ts / t) * ps, ps, sh=False)

        M = constraint_matrix(cons, lam, bg.D)
        Q = weighted_form(bg, ts)[0]
    V = nullspace_basis(M)[0]
    Qv = np.conj(V.T) @ Q @ V
    Qv = 0.5 * (Qv + np.conj(Qv.T))
    Li = np.linalg.inv(np.linalg.cholesky(Qv))
    out = {}
    for name, vals in f.items():
        F = np.asarray(vals).reshape(state_dim(bg.D), -1).T @ V  # rows: components
        A = F @ np.conj(Li.T)
        out[name] = float(np.linalg.norm(A, 2)) / maj[name]
    return out


def elliptic_estimates_check(bg: KasnerBackground, lam, t: float, state, constants: dict | None = None) -> EllipticReport:
    """Compare |tr eta|, |nu|, |chi|_g with majorant * E^(1/2); constants default to the mode's exact sup."""
    lam = _nonzero(lam)
    tau_t = float(kc.tau(bg, lam, t))
    regime = "high" if tau_t >= bg.tau_ringed else ("low" if tau_t <= 1.0 else None)
    if regime is None:
        raise RegimeMismatch("elliptic estimates are stated for tau >= tau_ringed or tau <= 1")
    if regime == "low" and not isinstance(state, EinsteinRenormState):
        raise RegimeMismatch("low regime needs a renormalized state")
    y = state.vector()
    f, maj = _elliptic_functionals(bg, lam, t, regime)
    E = einstein_energy(bg, lam, t, state, regime)
    ratios = {}
    for name, vals in f.items():
        F = np.asarray(vals).reshape(state_dim(bg.D), -1).T
        size = float(np.linalg.norm(F @ y))
        ratios[name] = size / (maj[name] * math.sqrt(E)) if E > 0 else 0.0
    if constants is None:
        constants = elliptic_sup_constants(bg, lam, t, regime) if E > 0 else {k: 0.0 for k in ratios}
    slack = {k: constants[k] * (1 + 1e-9) - ratios[k] for k in ratios}
    return EllipticReport(regime, ratios, constants, slack)


# --- measured energy windows ------------------------------------------------------
# Each mode's admissible data form a subspace (constraints plus the harmonic
# condition at t = 1); its basis is propagated, so every window below is the exact
# supremum over admissible data of that mode.


def _gen_eigs(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    Li = np.linalg.inv(np.linalg.cholesky(0.5 * (B + np.conj(B.T))))
    M = Li @ A @ np.conj(Li.T)
    return np.linalg.eigvalsh(0.5 * (M + np.conj(M.T)))


def _sandwich(Q, Phi):
    return np.conj(Phi.T) @ Q @ Phi


def energy_windows(bg: KasnerBackground, lams, n_t: int = 48, tol: EinsteinTolerances | None = None) -> dict:
    """Two-sided constants per mode.

    C_high: E_high(t) against E_high(1) on [t_ring, 1] where tau(t_ring) = tau_ringed.
    C_mid:  E_mid(t) against E_mid(t_ring) on [t*, t_ring] (1 when the band is empty).
    C_low:  E_low(t) against E_low(t*) on [t_end, t*].
    seam_1: E_high(t*) against E_low(t*); seam_ring: E_high(t_ring) against E_low(t*).
    Each constant is max(largest eigenvalue, 1 / smallest eigenvalue) of the pair.
    """
    _require_subcritical(bg)
    tol = tol or EinsteinTolerances()
    cfg = tol.integrator
    lams = np.atleast_2d(_lam(lams))
    D = bg.D
    ts = kc.t_star(bg, lams)
    t_ring = kc.t_star(bg, lams / bg.tau_ringed)
    t_end = find_launch_time(lambda t: tail_majorant(bg, ts, t), tol.tail_tol, ts)
    bases = nullspace_basis(_cauchy_matrix(bg, lams, 1.0, sh=True))
    grid = np.linspace(0.0, 1.0, n_t)
    out = {k: np.ones(len(lams)) for k in ("C_high", "C_mid", "C_low", "seam_1", "seam_ring")}
    out["t_star"] = ts
    out["dim"] = np.array([V.shape[1] for V in bases])
    rows = np.concatenate([np.full(V.shape[1], b) for b, V in enumerate(bases)])
    y0 = np.concatenate([V.T for V in bases])
    offsets = np.concatenate([[0], np.cumsum(out["dim"])])

    def cols(path, b, j):
        return path[offsets[b] : offsets[b + 1], j].T

    hi_t = np.exp(np.log(t_ring)[:, None] * grid[None, :])
    hpath = integrate_path(cmcsh_system(bg, lams[rows]), y0, hi_t[rows], cfg)
    has_mid = t_ring > ts * (1 + 1e-12)
    mid_t = np.exp(np.log(t_ring)[:, None] + (np.log(ts) - np.log(t_ring))[:, None] * grid[None, :])
    mpath = integrate_path(cmcsh_system(bg, lams[rows]), hpath[:, -1], mid_t[rows], cfg)
    lo_t = np.exp(np.log(ts)[:, None] + (np.log(t_end) - np.log(ts))[:, None] * grid[None, :])
    lpath = integrate_path(renorm_system(bg, lams[rows], ts[rows]), mpath[:, -1], lo_t[rows], cfg)
    for b, (lam, V) in enumerate(zip(lams, bases)):
        Q1 = _sandwich(high_form(bg, lam, 1.0)[0], V)
        c = 1.0
        for j, t in enumerate(hi_t[b]):
            e = _gen_eigs(_sandwich(high_form(bg, lam, t)[0], cols(hpath, b, j)), Q1)
            c = max(c, e[-1], 1.0 / e[0])
        out["C_high"][b] = c
        Phi_ring = cols(hpath, b, -1)
        if has_mid[b]:
            Qr = _sandwich(weighted_form(bg, t_ring[b])[0], Phi_ring)
            c = 1.0
            for j, t in enumerate(mid_t[b]):
                e = _gen_eigs(_sandwich(weighted_form(bg, t)[0], cols(mpath, b, j)), Qr)
                c = max(c, e[-1], 1.0 / e[0])
            out["C_mid"][b] = c
        Phi_star = cols(mpath, b, -1)
        Qlow_star = _sandwich(weighted_form(bg, ts[b])[0], Phi_star)
        e = _gen_eigs(_sandwich(high_form(bg, lam, ts[b])[0], Phi_star), Qlow_star)
        out["seam_1"][b] = max(e[-1], 1.0 / e[0])
        e = _gen_eigs(_sandwich(high_form(bg, lam, t_ring[b])[0], Phi_ring), Qlow_star)
        out["seam_ring"][b] = max(e[-1], 1.0 / e[0])
        c = 1.0
        for j in range(lo_t.shape[1]):
            e = _gen_eigs(_sandwich(weighted_form(bg, ts[b])[0], cols(lpath, b, j)), Qlow_star)
            c = max(c, e[-1], 1.0 / e[0])
        out["C_low"][b] = c
    return out
