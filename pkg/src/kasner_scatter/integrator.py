"""Adaptive Dormand-Prince 5(4) evolution in s = log t, batched over modes.

Systems are written as t d/dt y = rhs(t, y). A batch is a stack of independent
states with shape (B, n), each with its own start and end time and its own step
size; rhs receives the per-row times as an array of shape (B,).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import integrate as sp_integrate

from .errors import NonFiniteState, StepLimitExceeded, TailUnreachable

# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_E = _B - np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])


@dataclass
class OdeSystem:
    """Linear system t dy/dt = rhs(t, y) over a batch of modes.

    restrict(rows) returns the same system limited to a subset of batch rows; the
    integrator uses it to drop finished modes. Systems without per-row data can
    leave it unset.
    """

    rhs: Callable[[np.ndarray, np.ndarray], np.ndarray]
    dim: int
    restrict: Callable[[np.ndarray], "OdeSystem"] | None = None
    stiff: bool = False

    def subset(self, rows: np.ndarray) -> "OdeSystem":
        return self if self.restrict is None else self.restrict(rows)


@dataclass(frozen=True)
class IntegratorConfig:
    rel_tol: float = 1e-10
    abs_tol: float = 1e-14
    max_steps: int = 200_000
    method: str = "DP54"

    def __post_init__(self):
        for name in ("rel_tol", "abs_tol"):
            v = getattr(self, name)
            if not 0.0 < v <= 1e-2:
                raise ValueError(f"{name}={v!r} outside (0, 1e-2]")
        if self.method != "DP54":
            raise ValueError(f"unsupported method {self.method!r}")


@dataclass
class IntegrationStats:
    steps: np.ndarray
    rejected: np.ndarray
    rhs_evals: int = 0
    samples: np.ndarray | None = field(default=None, repr=False)


def _rms(x: np.ndarray) -> np.ndarray:
    return np.sqrt(np.mean(np.abs(x) ** 2, axis=-1))


def _initial_step(system, t, y, f0, direction, span, cfg):
    scale = cfg.abs_tol + cfg.rel_tol * np.abs(y)
    d0 = _rms(y / scale)
    d1 = _rms(f0 / scale)
    with np.errstate(over="ignore"):  # the discarded branch may overflow when d1 is tiny
        h0 = np.where((d0 < 1e-5) | (d1 < 1e-5), 1e-6, 0.01 * d0 / np.maximum(d1, 1e-300))
    h0 = np.minimum(h0, span)
    y1 = y + (direction * h0)[:, None] * f0
    f1 = system.rhs(t * np.exp(direction * h0), y1)
    d2 = _rms((f1 - f0) / scale) / h0
    dm = np.maximum(d1, d2)
    h1 = np.where(dm <= 1e-15, np.maximum(1e-6, h0 * 1e-3), (0.01 / np.maximum(dm, 1e-300)) ** 0.2)
    return np.minimum(np.minimum(100 * h0, h1), span)


def _solve(system, y0, s_targets, cfg, trace=None):
    """Core loop: advance each row through its increasing or decreasing target list.

    s_targets has shape (B, K); the states reached at every target are returned as
    an array of shape (B, K, n).
    """
    y = np.array(y0, dtype=complex)
    B, n = y.shape
    K = s_targets.shape[1]
    out = np.empty((B, K, n), dtype=complex)
    steps = np.zeros(B, dtype=np.int64)
    rejected = np.zeros(B, dtype=np.int64)
    evals = 0

    s = s_targets[:, 0].copy()
    out[:, 0] = y
    k_next = np.ones(B, dtype=np.int64)
    active = np.flatnonzero(k_next < K)
    # rows whose consecutive targets coincide are advanced without stepping
    if active.size == 0:
        return out, IntegrationStats(steps, rejected, evals)

    sys_a = system.subset(active)
    direction = np.sign(s_targets[active, -1] - s_targets[active, 0])
    direction[direction == 0] = 1.0
    ya = y[active]
    sa = s[active]
    ka = k_next[active]
    f = sys_a.rhs(np.exp(sa), ya)
    evals += 1
    span = np.abs(s_targets[active, -1] - sa)
    h = _initial_step(sys_a, np.exp(sa), ya, f, direction, np.maximum(span, 1e-300), cfg)
    evals += 1
    safety, min_fac, max_fac = 0.9, 0.2, 5.0

    while active.size:
        target = s_targets[active, ka]
        remaining = np.abs(target - sa)
        done_here = remaining <= 1e-15 * np.maximum(1.0, np.abs(target))
        if np.any(done_here):
            rows = np.flatnonzero(done_here)
            out[active[rows], ka[rows]] = ya[rows]
            ka[rows] += 1
            fin = ka >= K
            if np.any(fin):
                keep = np.flatnonzero(~fin)
                y[active[fin]] = ya[fin]
                active, ya, sa, ka, h, f, direction = (
                    active[keep], ya[keep], sa[keep], ka[keep], h[keep], f[keep], direction[keep]
                )
                if active.size == 0:
                    break
                sys_a = system.subset(active)
            continue

        step = np.minimum(h, remaining)
        last = step >= remaining
        hs = direction * step
        ks = [f]
        for i in range(1, 7):
            yi = ya + hs[:, None] * sum(a * k for a, k in zip(_A[i], ks) if a != 0.0)
            ks.append(sys_a.rhs(np.exp(sa + _C[i] * hs), yi))
        evals += 6
        y_new = ya + hs[:, None] * sum(b * k for b, k in zip(_B, ks) if b != 0.0)
        err = hs[:, None] * sum(e * k for e, k in zip(_E, ks) if e != 0.0)
        scale = cfg.abs_tol + cfg.rel_tol * np.maximum(np.abs(ya), np.abs(y_new))
        en = _rms(err / scale)
        if not np.all(np.isfinite(y_new)):
            bad = ~np.all(np.isfinite(y_new), axis=-1)
            if np.any(bad & (en <= 1.0)) or np.any(step[bad] < 1e-14):
                raise NonFiniteState("non-finite state during integration")
            en = np.where(bad, np.inf, en)
        ok = en <= 1.0
        fac = np.where(en == 0, max_fac, safety * np.where(en > 0, en, 1.0) ** -0.2)
        fac = np.clip(fac, min_fac, max_fac)
        fac = np.where(ok, fac, np.minimum(fac, 1.0))
        if trace is not None:
            for r in np.flatnonzero(ok):
                trace.writerow(
                    [active[r], math.exp(sa[r] + hs[r])]
                    + [f"{v.real!r}" for v in y_new[r]]
                    + [f"{v.imag!r}" for v in y_new[r]]
                    + [abs(hs[r]), en[r]]
                )
        sa = np.where(ok, np.where(last, target, sa + hs), sa)
        ya = np.where(ok[:, None], y_new, ya)
        f = np.where(ok[:, None], ks[6], f)
        h = np.where(ok & last, np.maximum(h, step * fac), step * fac)
        steps[active] += ok
        rejected[active] += ~ok
        if np.any(steps[active] + rejected[active] > cfg.max_steps):
            raise StepLimitExceeded(f"more than {cfg.max_steps} steps for some mode")
        if np.any(h < 1e-14 * np.maximum(1.0, np.abs(sa))):
            raise StepLimitExceeded("step size underflow")

    return out, IntegrationStats(steps, rejected, evals)


def _as_batch(state0, t_from, t_to):
    y = np.asarray(state0, dtype=complex)
    single = y.ndim == 1
    y = np.atleast_2d(y)
    B = y.shape[0]
    tf = np.broadcast_to(np.asarray(t_from, dtype=float), (B,))
    tt = np.broadcast_to(np.asarray(t_to, dtype=float), (B,))
    return y, tf, tt, single


def integrate(system: OdeSystem, state0, t_from, t_to, config: IntegratorConfig | None = None, trace_path=None):
    """Evolve from t_from to t_to (either direction); returns (state, stats)."""
    cfg = config or IntegratorConfig()
    y, tf, tt, single = _as_batch(state0, t_from, t_to)
    if np.any(tf <= 0) or np.any(tt <= 0):
        raise ValueError("times must be positive")
    targets = np.stack([np.log(tf), np.log(tt)], axis=-1)
    fh = open(trace_path, "w", newline="") if trace_path else None
    try:
        writer = None
        if fh is not None:
            writer = csv.writer(fh)
            n = y.shape[1]
            writer.writerow(["row", "t"] + [f"re{i}" for i in range(n)] + [f"im{i}" for i in range(n)] + ["h", "err"])
        out, stats = _solve(system, y, targets, cfg, writer)
    finally:
        if fh is not None:
            fh.close()
    end = out[:, -1]
    return (end[0] if single else end), stats


def integrate_path(system: OdeSystem, state0, t_samples, config: IntegratorConfig | None = None):
    """States at each of the monotone sample times; t_samples has shape (K,) or (B, K).

    The first sample is the start time. Returns an array of shape (B, K, n), or
    (K, n) for a single unbatched state.
    """
    cfg = config or IntegratorConfig()
    y = np.asarray(state0, dtype=complex)
    single = y.ndim == 1
    y = np.atleast_2d(y)
    ts = np.asarray(t_samples, dtype=float)
    ts = np.broadcast_to(ts, (y.shape[0], ts.shape[-1]))
    out, _ = _solve(system, y, np.log(ts), cfg)
    return out[0] if single else out


# --- Fuchsian launch ------------------------------------------------------------


def find_launch_time(tail_bound, tail_tol: float, t_max, t_min: float = 1e-300) -> np.ndarray:
    """Largest t0 <= t_max with tail_bound(t0) <= tail_tol, per batch row.

    tail_bound must be nondecreasing in t on (0, t_max].
    """
    t_max = np.atleast_1d(np.asarray(t_max, dtype=float))
    lo = np.full_like(t_max, math.log(t_min))
    hi = np.log(t_max)
    if np.any(np.asarray(tail_bound(np.exp(lo))) > tail_tol):
        raise TailUnreachable(f"tail bound exceeds {tail_tol!r} even at t = {t_min!r}")
    ok_hi = np.asarray(tail_bound(np.exp(hi))) <= tail_tol
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        good = np.asarray(tail_bound(np.exp(mid))) <= tail_tol
        lo = np.where(good, mid, lo)
        hi = np.where(good, hi, mid)
    return np.where(ok_hi, t_max, np.exp(lo))


def picard_tail(system: OdeSystem, v, t0, epsrel: float = 1e-12) -> np.ndarray:
    """One Picard correction: integral over (0, t0] of rhs(s, v) ds/s, row by row.

    Computed in u = log(s/t0) on (-inf, 0] with adaptive vector quadrature.
    """
    v = np.atleast_2d(np.asarray(v, dtype=complex))
    t0 = np.broadcast_to(np.asarray(t0, dtype=float), (v.shape[0],))

    def integrand(u):
        # the Fuchsian rhs vanishes at t = 0; avoid evaluating log(0) there
        if math.exp(u) == 0.0:
            return np.zeros(2 * v.size)
        r = system.rhs(t0 * math.exp(u), v)
        return np.concatenate([r.real.ravel(), r.imag.ravel()])

    scale = max(float(np.abs(v).max(initial=0.0)), 1e-300)
    val, _ = sp_integrate.quad_vec(integrand, -np.inf, 0.0, epsrel=epsrel, epsabs=1e-15 * scale, norm="max")
    half = val.size // 2
    return (val[:half] + 1j * val[half:]).reshape(v.shape)


def fuchsian_launch(
    system: OdeSystem,
    v,
    epsilon: float,
    tail_tol: float,
    config: IntegratorConfig | None = None,
    tail_bound=None,
    t_max=1.0,
):
    """Start the solution with limit v at t = 0 from a time t0 > 0.

    t0 is the largest time with tail_bound(t0) <= tail_tol (default bound t^epsilon);
    the returned state is v plus one Picard correction. Returns (state, t0).
    """
    bound = tail_bound if tail_bound is not None else (lambda t: np.asarray(t) ** epsilon)
    y = np.asarray(v, dtype=complex)
    single = y.ndim == 1
    y = np.atleast_2d(y)
    t0 = find_launch_time(bound, tail_tol, np.broadcast_to(np.asarray(t_max, dtype=float), (y.shape[0],)))
    corr = picard_tail(system, y, t0)
    state = y + corr
    if single:
        return state[0], float(t0[0])
    return state, t0
