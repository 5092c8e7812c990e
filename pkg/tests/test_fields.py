import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kasner_scatter import kasner as kc
from kasner_scatter.fields import (
    Field,
    ModeSet,
    SymbolSpec,
    freq_adapted_norm,
    read_field,
    sample_band_limited,
    single_mode,
    sobolev_norm,
    symbol_apply,
    write_field,
    zeros,
)

GOLDEN = Path(__file__).parent / "golden" / "sample_seed1_L4_s3.txt"


def test_modeset_layout():
    ms = ModeSet(3, 2)
    assert len(ms) == 125
    assert not ms.modes[ms.zero_index].any()
    neg = ms.negation()
    np.testing.assert_array_equal(ms.modes[neg], -ms.modes)
    for i in (0, 17, 99):
        assert ms.index(ms.modes[i]) == i
    with pytest.raises(KeyError):
        ms.index([3, 0, 0])


def test_sobolev_examples():
    ms = ModeSet(3, 4)
    const = single_mode(ms, [0, 0, 0], 2.5)
    for s in (0.0, 1.0, 3.5):
        assert sobolev_norm(const, s) == pytest.approx(2.5, rel=1e-15)
    f = single_mode(ms, [3, 4, 0], 2.0)
    assert sobolev_norm(f, 1.0) == pytest.approx(math.sqrt(26 * 4), rel=1e-14)
    assert sobolev_norm(zeros(ms), 2.0) == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 3.0), st.floats(0.0, 3.0))
def test_sobolev_monotone_in_s(seed, s1, s2):
    f = sample_band_limited(seed, 3, 1.5, "scalar", True, 2)
    lo, hi = sorted((s1, s2))
    assert sobolev_norm(f, lo) <= sobolev_norm(f, hi) * (1 + 1e-14)


def test_freq_adapted_examples(aniso, iso3):
    ms = ModeSet(3, 2)
    A = Field(ms, np.zeros((len(ms), 3, 3), dtype=complex))
    A.coeffs[ms.index([0, 2, 0]), 0, 1] = 1.0
    ts = 4 ** (-2 / 3)
    assert freq_adapted_norm(A, 0.0, aniso) == pytest.approx(ts**-0.25, rel=1e-13)
    assert freq_adapted_norm(A, 0.0, aniso) == pytest.approx(2 ** (1 / 3), rel=1e-13)
    D = Field(ms, np.zeros((len(ms), 3, 3), dtype=complex))
    rng = np.random.default_rng(3)
    for k in range(3):
        D.coeffs[:, k, k] = rng.standard_normal(len(ms))
    assert freq_adapted_norm(D, 1.0, aniso) == pytest.approx(sobolev_norm(D, 1.0), rel=1e-14)
    T = sample_band_limited(4, 2, 1.0, "tensor", False, 3)
    assert freq_adapted_norm(T, 0.5, iso3) == pytest.approx(sobolev_norm(T, 0.5), rel=1e-14)
    assert freq_adapted_norm(zeros(ms, "tensor"), 1.0, aniso) == 0.0


def test_symbol_examples(iso3, aniso):
    ms = ModeSet(3, 2)
    f = single_mode(ms, [2, 0, 0], 1.0)
    g = symbol_apply(f, SymbolSpec.log_tstar(), iso3)
    assert g[[2, 0, 0]] == pytest.approx(-1.5 * math.log(2), rel=1e-14)
    z = single_mode(ms, [0, 0, 0], 3.0, "tensor")
    for spec in (SymbolSpec.log_tstar(), SymbolSpec.tstar_power(-2.0), SymbolSpec.g_weight()):
        assert not symbol_apply(z, spec, aniso).coeffs.any()
    h = sample_band_limited(9, 2, 1.0, "scalar", False, 3)
    out = symbol_apply(h, SymbolSpec.tstar_power(0.0), aniso)
    nz = np.arange(len(ms)) != ms.zero_index
    np.testing.assert_array_equal(out.coeffs[nz], h.coeffs[nz])


def test_sample_semantics():
    f = sample_band_limited(5, 3, math.inf, "tensor", True, 3)
    nz = np.arange(len(f.modeset)) != f.modeset.zero_index
    assert not f.coeffs[nz].any() and f.coeffs[f.modeset.zero_index].any()
    a = sample_band_limited(7, 3, 2.0, "scalar", True, 3)
    b = sample_band_limited(7, 3, 2.0, "scalar", True, 3)
    np.testing.assert_array_equal(a.coeffs, b.coeffs)
    assert a.hermitian_defect() == 0.0
    a.check_reality()


def test_sample_matches_golden_file():
    f = sample_band_limited(1, 4, 3.0, "scalar", True, 3)
    g = read_field(GOLDEN)
    np.testing.assert_array_equal(f.coeffs, g.coeffs)
    assert sobolev_norm(f, 1.0) == sobolev_norm(g, 1.0)


@pytest.mark.parametrize("kind", ["scalar", "vector", "tensor"])
def test_file_roundtrip(tmp_path, kind):
    f = sample_band_limited(2, 2, 1.0, kind, False, 3)
    write_field(f, tmp_path / "f.txt")
    g = read_field(tmp_path / "f.txt")
    assert g.kind == kind
    np.testing.assert_array_equal(f.coeffs, g.coeffs)
