"""Kasner background geometry and the per-mode scalar functions tau, zeta, t_star.

Every per-mode function accepts a single integer vector ``lam`` of length D or a
stack of them with shape ``(..., D)``; times broadcast against the leading axes.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import integrate

from .errors import DegenerateBackground, KasnerRelationViolation, ZeroModeError

RELATION_TOL = 1e-10
SUBCRITICAL_TOL = 1e-9
TAU_RINGED_CANDIDATES = (1.0, 1.5, 2.0, 3.0, 4.0, 8.0)


@dataclass(frozen=True)
class KasnerBackground:
    p: tuple[float, ...]
    p_phi: float
    delta: float = field(default=float("nan"), compare=False)

    @property
    def D(self) -> int:
        return len(self.p)

    @cached_property
    def exponents(self) -> np.ndarray:
        return np.asarray(self.p, dtype=float)

    @property
    def non_degenerate(self) -> bool:
        return max(self.p) < 1.0

    @property
    def subcritical(self) -> bool:
        return self.delta > SUBCRITICAL_TOL

    @property
    def zeta_bounds(self) -> tuple[float, float]:
        w = 1.0 / (1.0 - self.exponents)
        return float(w.min()), float(w.max())

    @cached_property
    def tau_ringed(self) -> float:
        return _select_tau_ringed(self)

    def require_non_degenerate(self) -> None:
        if not self.non_degenerate:
            raise DegenerateBackground(f"max exponent {max(self.p)!r} is not < 1")


@dataclass(frozen=True)
class MetricSample:
    t: float
    g_diag: np.ndarray
    g_inv_diag: np.ndarray
    weingarten_diag: np.ndarray


def make_background(p, p_phi: float) -> KasnerBackground:
    p = tuple(float(x) for x in p)
    if len(p) < 2:
        raise ValueError("need at least two spatial dimensions")
    s1 = math.fsum(p)
    s2 = math.fsum(x * x for x in p) + 2.0 * p_phi * p_phi
    if abs(s1 - 1.0) > RELATION_TOL:
        raise KasnerRelationViolation(f"sum of exponents is {s1!r}, expected 1")
    if abs(s2 - 1.0) > RELATION_TOL:
        raise KasnerRelationViolation(f"sum of squares plus 2 p_phi^2 is {s2!r}, expected 1")
    return KasnerBackground(p=p, p_phi=float(p_phi), delta=_margin(p))


def _margin(p) -> float:
    D = len(p)
    return min(
        1.0 + p[i] - p[j] - p[k]
        for i in range(D)
        for j, k in itertools.permutations(range(D), 2)
    )


def subcriticality_margin(bg: KasnerBackground) -> float:
    """min over i and j != k of 1 + p_i - p_j - p_k; positive iff subcritical."""
    return _margin(bg.p)


def isotropic(D: int, p_phi_sign: float = 1.0) -> KasnerBackground:
    """Isotropic background p_i = 1/D with the scalar field fixed by the relations."""
    p_phi = p_phi_sign * math.sqrt(max(0.0, (1.0 - 1.0 / D) / 2.0))
    return make_background([1.0 / D] * D, p_phi)


def metric(bg: KasnerBackground, t: float) -> MetricSample:
    p = bg.exponents
    return MetricSample(
        t=float(t),
        g_diag=t ** (2.0 * p),
        g_inv_diag=t ** (-2.0 * p),
        weingarten_diag=-p.copy(),
    )


def _weights(bg: KasnerBackground, lam, t) -> np.ndarray:
    """Per-axis terms t^(2-2p_i) lam_i^2 with shape (..., D)."""
    lam = np.asarray(lam, dtype=float)
    t = np.asarray(t, dtype=float)[..., None]
    return t ** (2.0 - 2.0 * bg.exponents) * lam**2


def tau(bg: KasnerBackground, lam, t) -> np.ndarray | float:
    out = np.sqrt(_weights(bg, lam, t).sum(axis=-1))
    return out if out.ndim else float(out)


def zeta(bg: KasnerBackground, lam, t) -> np.ndarray | float:
    lam = np.asarray(lam)
    if np.any(np.all(lam == 0, axis=-1)):
        raise ZeroModeError("zeta is undefined at lambda = 0")
    w = _weights(bg, lam, t)
    out = 2.0 * w.sum(axis=-1) / (w * (2.0 - 2.0 * bg.exponents)).sum(axis=-1)
    return out if out.ndim else float(out)


def t_star(bg: KasnerBackground, lam) -> np.ndarray | float:
    """Time where tau = 1; equals 1 for the zero mode.

    Bisection on log t inside the bracket
    min_i (sqrt(D) |lam_i|)^(-q_i) <= t* <= min_i |lam_i|^(-q_i), q_i = 1/(1-p_i),
    taken over the nonzero components, then Newton steps using
    d log(tau^2)/d log t = 2/zeta.
    """
    bg.require_non_degenerate()
    lam = np.asarray(lam, dtype=float)
    scalar = lam.ndim == 1
    lam = np.atleast_2d(lam)
    zero = np.all(lam == 0, axis=-1)
    safe = np.where(zero[:, None], 1.0, lam)

    q = 1.0 / (1.0 - bg.exponents)
    nz = safe != 0
    with np.errstate(divide="ignore"):
        hi = np.where(nz, -q * np.log(np.abs(safe)), np.inf).min(axis=-1)
        lo = np.where(nz, -q * np.log(math.sqrt(bg.D) * np.abs(safe)), np.inf).min(axis=-1)
    hi = np.minimum(hi, 0.0)

    def log_tau2(s):
        return np.log(_weights(bg, safe, np.exp(s)).sum(axis=-1))

    for _ in range(60):
        mid = 0.5 * (lo + hi)
        above = log_tau2(mid) > 0.0
        hi = np.where(above, mid, hi)
        lo = np.where(above, lo, mid)
    s = 0.5 * (lo + hi)
    for _ in range(3):
        w = _weights(bg, safe, np.exp(s))
        f = np.log(w.sum(axis=-1))
        df = (w * (2.0 - 2.0 * bg.exponents)).sum(axis=-1) / w.sum(axis=-1)
        s = np.minimum(s - f / df, 0.0)
    out = np.where(zero, 1.0, np.exp(s))
    return float(out[0]) if scalar else out


def g_tensor(bg: KasnerBackground, t, T) -> np.ndarray:
    """Closed-form integral of g_ii(s) g^jj(s) ds/s over [t, T].

    The rank-4 table G_{ip}^{jq} is diagonal in (i,p) and (j,q); the returned
    D x D array holds its nonzero entries G[i, j]. Extra leading axes of t and T
    broadcast.
    """
    p = bg.exponents
    d = 2.0 * (p[:, None] - p[None, :])
    t = np.asarray(t, dtype=float)[..., None, None]
    T = np.asarray(T, dtype=float)[..., None, None]
    same = np.abs(d) < 1e-15
    d_safe = np.where(same, 1.0, d)
    # (T^d - t^d)/d computed as T^d * expm1(d log(t... )) to keep accuracy for small d
    lt, lT = np.log(t), np.log(T)
    power = -np.exp(d_safe * lT) * np.expm1(d_safe * (lt - lT)) / d_safe
    return np.where(same, lT - lt, power)


def _select_tau_ringed(bg: KasnerBackground) -> float:
    """Smallest candidate threshold making the high-frequency form positive definite.

    For each (i, j) the form couples kappa and eta through
    [[z^2/tau, c/2], [c/2, 1/(2 tau) + z^2 tau]] with c = z (1 + d z)/tau; it is
    definite iff 1/2 + z^2 tau^2 > (1 + d z)^2 / 4, which only improves as tau grows.
    A one percent margin guards against rounding at the boundary.
    """
    zlo, zhi = bg.zeta_bounds
    z = np.linspace(zlo, zhi, 257)
    d = np.unique(2.0 * (bg.exponents[:, None] - bg.exponents[None, :]))
    for cand in TAU_RINGED_CANDIDATES:
        lhs = 0.5 + (z[None, :] * cand) ** 2
        rhs = 1.01 * (1.0 + d[:, None] * z[None, :]) ** 2 / 4.0
        if np.all(lhs > rhs):
            return cand
    return TAU_RINGED_CANDIDATES[-1]


# --- analytic bound battery -------------------------------------------------


@dataclass
class BoundCheck:
    name: str
    passed: bool
    slack: float


@dataclass
class BoundsReport:
    lam: tuple[int, ...]
    checks: list[BoundCheck]

    @property
    def all_passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self) -> list[BoundCheck]:
        return [c for c in self.checks if not c.passed]


def down_integral_constant(bg: KasnerBackground) -> float:
    """Explicit constant K with int_0^t tau^2 (1 + L^2) ds/s <= K tau^2(t) (1 + L(t)^2).

    Uses tau^2(s) <= tau^2(t) (s/t)^(2/zeta_max) and 2L <= 1 + L^2; with c = zeta_max/2
    the integral is bounded by (c + c^2 + 2 c^3) times the majorant.
    """
    c = bg.zeta_bounds[1] / 2.0
    return c + c * c + 2.0 * c**3


def check_bounds(bg: KasnerBackground, lam, t_grid, alphas=(0.5, 1.0, 2.0)) -> BoundsReport:
    """Evaluate the closed-form per-mode bounds numerically on a grid of times."""
    bg.require_non_degenerate()
    lam = np.asarray(lam, dtype=float)
    if np.all(lam == 0):
        raise ZeroModeError("check_bounds needs lambda != 0")
    t = np.sort(np.asarray(t_grid, dtype=float))
    zlo, zhi = bg.zeta_bounds
    checks: list[BoundCheck] = []
    rtol = 1e-12

    z = np.asarray(zeta(bg, lam, t))
    slack = min(float(np.min(z - zlo)), float(np.min(zhi - z)))
    checks.append(BoundCheck("zeta_range", slack >= -rtol * zhi, slack))

    dz = np.diff(z)  # t increasing, so zeta should not increase
    slack = float(-dz.max()) if dz.size else 0.0
    checks.append(BoundCheck("zeta_monotone", slack >= -1e-10, slack))
    tv = float(np.abs(dz).sum())
    checks.append(BoundCheck("zeta_variation", tv <= (zhi - zlo) * (1 + rtol) + 1e-14, (zhi - zlo) - tv))

    # |lam|_g(t) computed from the inverse metric against tau / t
    ginv = t[:, None] ** (-2.0 * bg.exponents)
    norm_g = np.sqrt((ginv * lam**2).sum(axis=-1))
    tt = np.asarray(tau(bg, lam, t))
    rel = float(np.max(np.abs(norm_g - tt / t) / (tt / t)))
    checks.append(BoundCheck("g_norm_identity", rel <= 1e-12, 1e-12 - rel))

    ts = t_star(bg, lam)

    # integral of tau^-alpha over [t*, 1] against zeta_max / alpha
    for a in alphas:
        if ts < 1.0:
            val, _ = integrate.quad(
                lambda s: tau(bg, lam, math.exp(s)) ** (-a), math.log(ts), 0.0, epsabs=1e-13, epsrel=1e-11
            )
        else:
            val = 0.0
        bound = zhi / a
        checks.append(BoundCheck(f"tau_integral_up[{a:g}]", val <= bound, bound - val))

    # integral of tau^2 (1 + L^2) over (0, t] for grid times below t*
    low = t[t <= ts]
    if low.size:
        K = down_integral_constant(bg)

        rate = 2.0 - 2.0 * float(bg.exponents.max())
        log_low = np.log(low)

        def integrand(v):
            L = math.log(ts) - log_low + v
            tau2 = (np.exp(np.outer(log_low - v, 2.0 - 2.0 * bg.exponents)) * lam**2).sum(axis=-1)
            return tau2 * (1.0 + L**2)

        # beyond v = 80/rate the integrand is below e^-80 relative to its start
        val, _ = integrate.quad_vec(integrand, 0.0, 80.0 / rate, epsrel=1e-10, epsabs=1e-300)
        L = np.log(ts / low)
        maj = np.asarray(tau(bg, lam, low)) ** 2 * (1.0 + L**2)
        ratio = val / maj
        worst = float(ratio.max())
        checks.append(BoundCheck("tau_integral_down", worst <= K, K - worst))

        # G(t; t*) against max{(t/t*)^d, 1} t*^d log(t*/t)
        G = g_tensor(bg, low, ts)
        d = 2.0 * (bg.exponents[:, None] - bg.exponents[None, :])
        lg = np.log(ts / low)[:, None, None]
        scale = np.maximum((low[:, None, None] / ts) ** d, 1.0) * ts**d
        bound = scale * lg
        # log(t*/t) near t = t* cancels; allow a few ulps of |log t| + |log t*|
        cancel = 16 * np.finfo(float).eps * (np.abs(np.log(low)) + abs(math.log(ts)))[:, None, None]
        excess = float(np.max(np.abs(G) - bound * (1 + rtol) - scale * cancel))
        checks.append(BoundCheck("g_tensor_bound", excess <= 1e-300, -excess))

    # growth windows of the t_star symbol
    nz = lam != 0
    q = 1.0 / (1.0 - bg.exponents)
    upper = float(np.min(np.abs(lam[nz]) ** (-q[nz])))
    lower = float(np.min((math.sqrt(bg.D) * np.abs(lam[nz])) ** (-q[nz])))
    checks.append(BoundCheck("t_star_upper", ts <= upper * (1 + rtol), upper - ts))
    checks.append(BoundCheck("t_star_lower", ts >= lower * (1 - rtol), ts - lower))
    bracket = math.sqrt(bg.D * (1.0 + float(lam @ lam))) ** float(q.max())
    checks.append(BoundCheck("inverse_t_star_growth", 1.0 / ts <= bracket * (1 + rtol), bracket - 1.0 / ts))
    checks.append(BoundCheck("tau_at_t_star", abs(tau(bg, lam, ts) - 1.0) <= 1e-12, 1e-12 - abs(tau(bg, lam, ts) - 1.0)))

    return BoundsReport(lam=tuple(int(x) for x in lam), checks=checks)


# --- serialization ----------------------------------------------------------


def background_to_text(bg: KasnerBackground) -> str:
    lines = [f"D {bg.D}", "p " + " ".join(format(x, ".17g") for x in bg.p), f"p_phi {bg.p_phi:.17g}"]
    return "\n".join(lines) + "\n"


def background_from_text(text: str) -> KasnerBackground:
    rec: dict[str, list[str]] = {}
    for line in text.splitlines():
        if line.strip():
            key, *vals = line.split()
            rec[key] = vals
    p = [float(x) for x in rec["p"]]
    if int(rec["D"][0]) != len(p):
        raise ValueError("dimension does not match the number of exponents")
    return make_background(p, float(rec["p_phi"][0]))
