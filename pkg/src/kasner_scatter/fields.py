"""Truncated Fourier fields on the D-torus: mode sets, norms, symbols, file format."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Callable

import numpy as np

from .kasner import KasnerBackground, t_star

REALITY_TOL = 1e-12


@dataclass(frozen=True)
class ModeSet:
    """All lam in Z^D with max_i |lam_i| <= Lambda, in lexicographic order.

    The ordering makes lam -> -lam the index reversal i -> N-1-i.
    """

    D: int
    Lambda: int

    @cached_property
    def modes(self) -> np.ndarray:
        r = np.arange(-self.Lambda, self.Lambda + 1)
        grids = np.meshgrid(*([r] * self.D), indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=-1)

    def __len__(self) -> int:
        return (2 * self.Lambda + 1) ** self.D

    @property
    def zero_index(self) -> int:
        return len(self) // 2

    def index(self, lam) -> int:
        lam = np.asarray(lam, dtype=int)
        if lam.shape != (self.D,) or np.abs(lam).max(initial=0) > self.Lambda:
            raise KeyError(tuple(lam))
        n = 2 * self.Lambda + 1
        idx = 0
        for x in lam:
            idx = idx * n + int(x) + self.Lambda
        return idx

    def negation(self) -> np.ndarray:
        return np.arange(len(self))[::-1]

    @cached_property
    def bracket(self) -> np.ndarray:
        """<lam> = sqrt(1 + |lam|^2) per mode."""
        return np.sqrt(1.0 + (self.modes.astype(float) ** 2).sum(axis=-1))


@dataclass(frozen=True)
class Field:
    """Complex coefficients on a ModeSet; shape (N,) scalar, (N, D) vector, (N, D, D) tensor.

    Tensor entries are indexed [mode, i, j] with i the lower and j the upper index.
    """

    modeset: ModeSet
    coeffs: np.ndarray
    real: bool = False

    @property
    def kind(self) -> str:
        return _KINDS[self.coeffs.ndim]

    @property
    def D(self) -> int:
        return self.modeset.D

    @property
    def Lambda(self) -> int:
        return self.modeset.Lambda

    def __getitem__(self, lam):
        return self.coeffs[self.modeset.index(lam)]

    def with_coeffs(self, coeffs: np.ndarray) -> "Field":
        return Field(self.modeset, np.asarray(coeffs, dtype=complex), self.real)

    def __add__(self, other: "Field") -> "Field":
        return Field(self.modeset, self.coeffs + other.coeffs, self.real and other.real)

    def __sub__(self, other: "Field") -> "Field":
        return Field(self.modeset, self.coeffs - other.coeffs, self.real and other.real)

    def hermitian_defect(self) -> float:
        mirrored = np.conj(self.coeffs[self.modeset.negation()])
        return float(np.abs(self.coeffs - mirrored).max(initial=0.0))

    def check_reality(self) -> None:
        if self.real and self.hermitian_defect() > REALITY_TOL:
            raise ValueError("real-flagged field violates f(-lam) = conj(f(lam))")


ScalarField = Field
TensorField = Field
VectorField = Field

_KINDS = {1: "scalar", 2: "vector", 3: "tensor"}


def _shape(kind: str, n: int, D: int) -> tuple:
    return {"scalar": (n,), "vector": (n, D), "tensor": (n, D, D)}[kind]


def zeros(modeset: ModeSet, kind: str = "scalar", real: bool = True) -> Field:
    return Field(modeset, np.zeros(_shape(kind, len(modeset), modeset.D), dtype=complex), real)


def single_mode(modeset: ModeSet, lam, value, kind: str = "scalar") -> Field:
    f = zeros(modeset, kind, real=False)
    f.coeffs[modeset.index(lam)] = value
    return f


def _sq_magnitude(f: Field) -> np.ndarray:
    a = np.abs(f.coeffs) ** 2
    return a.reshape(len(f.modeset), -1).sum(axis=-1)


def sobolev_norm(f: Field, s: float) -> float:
    w = f.modeset.bracket ** (2.0 * s)
    return math.sqrt(float(np.dot(w, _sq_magnitude(f))))


def tstar_weights(bg: KasnerBackground, modeset: ModeSet) -> np.ndarray:
    """Entry weights t*^(-p_i + p_j) per mode, shape (N, D, D)."""
    ts = t_star(bg, modeset.modes)
    p = bg.exponents
    return ts[:, None, None] ** (-p[:, None] + p[None, :])


def freq_adapted_norm(A: Field, s: float, bg: KasnerBackground) -> float:
    w = tstar_weights(bg, A.modeset)
    weighted = A.with_coeffs(A.coeffs * w)
    return sobolev_norm(weighted, s)


@dataclass(frozen=True)
class SymbolSpec:
    """Multiplier F(t*) applied mode by mode.

    kind is one of "log_tstar", "tstar_power", "g_weight", "custom".
    """

    kind: str
    alpha: float = 0.0
    ij: tuple[int, int] | None = None
    func: Callable[[np.ndarray], np.ndarray] | None = None

    @classmethod
    def log_tstar(cls) -> "SymbolSpec":
        return cls("log_tstar")

    @classmethod
    def tstar_power(cls, alpha: float) -> "SymbolSpec":
        return cls("tstar_power", alpha=alpha)

    @classmethod
    def g_weight(cls, i: int | None = None, j: int | None = None) -> "SymbolSpec":
        return cls("g_weight", ij=None if i is None else (i, j))

    @classmethod
    def custom(cls, func: Callable[[np.ndarray], np.ndarray]) -> "SymbolSpec":
        return cls("custom", func=func)


def symbol_apply(f: Field, sym: SymbolSpec, bg: KasnerBackground) -> Field:
    """Multiply each lam != 0 coefficient by F(t*_lam); the zero mode is set to 0."""
    ms = f.modeset
    ts = t_star(bg, ms.modes)
    if sym.kind == "log_tstar":
        m = np.log(ts)
    elif sym.kind == "tstar_power":
        m = ts**sym.alpha
    elif sym.kind == "custom":
        m = np.asarray(sym.func(ts), dtype=float)
    elif sym.kind == "g_weight":
        p = bg.exponents
        if sym.ij is None:
            m = ts[:, None, None] ** (-p[:, None] + p[None, :])
        else:
            i, j = sym.ij
            m = ts ** (-p[i] + p[j])
    else:
        raise ValueError(f"unknown symbol kind {sym.kind!r}")
    m = np.array(m, dtype=float)
    m[ms.zero_index] = 0.0
    if m.ndim == 1:
        m = m.reshape((-1,) + (1,) * (f.coeffs.ndim - 1))
    return f.with_coeffs(f.coeffs * m)


def sample_band_limited(
    seed: int,
    Lambda: int,
    sigma: float,
    kind: str = "scalar",
    real: bool = True,
    D: int = 3,
) -> Field:
    """Deterministic random coefficients with |f_lam| ~ <lam>^-sigma.

    sigma = inf populates only the zero mode.
    """
    if not sigma > 0:
        raise ValueError("decay rate must be positive")
    ms = ModeSet(D, Lambda)
    rng = np.random.default_rng(seed)
    shape = _shape(kind, len(ms), D)
    c = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / math.sqrt(2.0)
    if math.isinf(sigma):
        amp = np.zeros(len(ms))
        amp[ms.zero_index] = 1.0
    else:
        amp = ms.bracket ** (-sigma)
    c *= amp.reshape((-1,) + (1,) * (c.ndim - 1))
    if real:
        c = 0.5 * (c + np.conj(c[ms.negation()]))
    return Field(ms, c, real)


# --- file format ------------------------------------------------------------


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_field(f: Field, path) -> None:
    ms = f.modeset
    flat = f.coeffs.reshape(len(ms), -1)
    with open(path, "w") as fh:
        fh.write(f"D {ms.D}\nLambda {ms.Lambda}\nkind {f.kind}\nreal {int(f.real)}\n")
        for lam, row in zip(ms.modes, flat):
            parts = [str(int(x)) for x in lam]
            for z in row:
                parts += [_fmt(z.real), _fmt(z.imag)]
            fh.write(" ".join(parts) + "\n")


def read_field(path) -> Field:
    with open(path) as fh:
        header = {}
        for _ in range(4):
            key, val = fh.readline().split()
            header[key] = val
        D, Lambda = int(header["D"]), int(header["Lambda"])
        ms = ModeSet(D, Lambda)
        shape = _shape(header["kind"], len(ms), D)
        width = int(np.prod(shape[1:]))
        coeffs = np.zeros((len(ms), width), dtype=complex)
        for line in fh:
            if not line.strip():
                continue
            tok = line.split()
            idx = ms.index([int(x) for x in tok[:D]])
            vals = [float(x) for x in tok[D:]]
            if len(vals) != 2 * width:
                raise ValueError(f"mode record has {len(vals)} values, expected {2 * width}")
            coeffs[idx] = np.array(vals[0::2]) + 1j * np.array(vals[1::2])
    return Field(ms, coeffs.reshape(shape), bool(int(header["real"])))
