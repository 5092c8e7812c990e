"""`scatter <command> --config <path> [--out <dir>] [--threads N] [--seed S]`.

Configs are INI files. Every section and key is declared in SCHEMA; anything else is
rejected. Each command writes `<command>.json` (deterministic for a fixed config),
`<command>.meta.json` (timestamps, wall time, threads) and CSV tables for plotting.
Exit status: 0 when every asserted property passes, 1 when one fails, 2 for config
errors, 3 when the library refuses the input.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import math
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import einstein as ein
from . import experiments as ex
from . import kasner as kc
from . import wave
from .errors import ConfigError, ScatterError
from .parallel import resolve_threads


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.replace(",", " ").split()]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.replace(",", " ").split()]


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _rows(parse):
    """Semicolon separated groups, e.g. '1 0 0; 0 2 0'."""

    def f(text: str):
        return [parse(g) for g in text.split(";") if g.strip()]

    return f


def _opt(parse):
    def f(text: str):
        return None if text.strip().lower() in ("", "none", "auto") else parse(text)

    return f


def _mode_list(text: str):
    """'auto' selects every power-law mode up to max_norm; '' or 'none' is an empty list."""
    low = text.strip().lower()
    if low == "auto":
        return None
    if low in ("", "none"):
        return []
    return _rows(_ints)(text)


def _positive(parse):
    def f(text: str):
        v = parse(text)
        if not v > 0:
            raise ValueError("must be positive")
        return v

    return f


# section -> key -> (parser, default)
SCHEMA: dict[str, dict[str, tuple]] = {
    "background": {
        "p": (_opt(_floats), None),
        "p_phi": (_opt(float), None),
        "isotropic": (_opt(int), None),
        "generator_seed": (_opt(int), None),
        "D": (int, 3),
    },
    "run": {
        "sector": (str, "wave"),
        "Lambda": (int, 8),
        "seed": (int, 1),
        "sigma": (_positive(float), 2.0),
        "s": (float, 1.0),
        "zero_data": (_bool, False),
        "out": (str, "scatter-out"),
    },
    "tolerances": {
        "rel_tol": (_positive(float), 1e-10),
        "abs_tol": (_opt(_positive(float)), None),
        "tail_tol": (_opt(_positive(float)), None),
        "constraint_tol": (_positive(float), 1e-8),
    },
    "wave-roundtrip": {"threshold": (_positive(float), 1e-6)},
    "bessel-validate": {
        "modes": (_mode_list, None),
        "max_norm": (int, 32),
        "coefficients": (_rows(_floats), [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]),
        "n_t": (int, 64),
        "threshold": (_positive(float), 1e-8),
    },
    "energy-sweep": {
        "radii": (_floats, [4.0, 8.0, 16.0, 32.0, 64.0, 128.0]),
        "n_random": (int, 5),
        "n_t": (int, 48),
        "growth_threshold": (_positive(float), 2.0),
    },
    "einstein-roundtrip": {
        "threshold": (_positive(float), 1e-5),
        "residual_threshold": (_positive(float), 1e-6),
    },
    "einstein-constraints": {"n_t": (int, 32), "threshold": (_positive(float), 1e-7)},
    "subcritical-scan": {"samples": (int, 10_000), "D": (int, 3), "p_phi": (float, 0.0)},
    "norms": {"s_values": (_floats, [0.0, 1.0, 2.0])},
    "bounds-check": {"backgrounds": (int, 50), "modes": (int, 20), "times": (int, 64)},
}


def load_config(path) -> dict:
    """Parse and resolve a config file; unknown sections or keys raise ConfigError."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str  # keep key case (Lambda, D)
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return resolve_config({s: dict(cp[s]) for s in cp.sections()})


def resolve_config(raw: dict) -> dict:
    out: dict = {}
    for sec in raw:
        if sec not in SCHEMA:
            raise ConfigError(f"unknown section [{sec}]")
    for sec, keys in SCHEMA.items():
        given = raw.get(sec, {})
        for key in given:
            if key not in keys:
                raise ConfigError(f"unknown key {key!r} in [{sec}]")
        out[sec] = {}
        for key, (parse, default) in keys.items():
            if key in given:
                val = given[key]
                try:
                    out[sec][key] = parse(val) if isinstance(val, str) else val
                except ValueError as exc:
                    raise ConfigError(f"[{sec}] {key}: {exc}") from exc
            else:
                out[sec][key] = default
    if out["run"]["sector"] not in ("wave", "einstein"):
        raise ConfigError("[run] sector must be wave or einstein")
    return out


def background_from_config(cfg: dict) -> kc.KasnerBackground:
    b = cfg["background"]
    if b["generator_seed"] is not None:
        return ex.random_backgrounds(1, b["D"], b["generator_seed"])[0]
    if b["isotropic"] is not None:
        return kc.isotropic(b["isotropic"])
    if b["p"] is None:
        raise ConfigError("[background] needs p, isotropic or generator_seed")
    p = np.asarray(b["p"])
    p_phi = b["p_phi"]
    if p_phi is None:  # nonnegative root of the quadratic relation
        p_phi = math.sqrt(max(0.0, (1.0 - float(p @ p)) / 2.0))
    bg = kc.make_background(p, p_phi)
    bg.require_non_degenerate()
    return bg


def _wave_tol(cfg) -> wave.WaveTolerances:
    t = cfg["tolerances"]
    d = wave.WaveTolerances()
    return wave.WaveTolerances(t["rel_tol"], t["abs_tol"] or d.abs_tol, t["tail_tol"] or d.tail_tol)


def _ein_tol(cfg) -> ein.EinsteinTolerances:
    t = cfg["tolerances"]
    d = ein.EinsteinTolerances()
    return ein.EinsteinTolerances(t["rel_tol"], t["abs_tol"] or d.abs_tol, t["tail_tol"] or d.tail_tol, t["constraint_tol"])


def _check(name: str, value: float, threshold: float, op: str = "<=") -> dict:
    ok = bool(value <= threshold) if op == "<=" else bool(value > threshold)
    return {"name": name, "value": value, "threshold": threshold, "op": op, "passed": ok}


# --- commands: each returns (results, checks, tables) --------------------------------


def cmd_wave_roundtrip(cfg, threads):
    bg = background_from_config(cfg)
    r = cfg["run"]
    res = ex.wave_roundtrip(bg, r["Lambda"], r["seed"], r["sigma"], r["s"], _wave_tol(cfg), threads, r["zero_data"])
    keys = ("rel_error", "cauchy_norm", "asymptotic_norm", "norm_ratio")
    results = {k: res[k] for k in keys}
    ms = res["data"].phi_C.modeset
    d0, d1 = res["data"], res["back"]
    table = [
        {
            "lambda": " ".join(str(int(x)) for x in ms.modes[i]),
            "abs_err_phi": abs(d0.phi_C.coeffs[i] - d1.phi_C.coeffs[i]),
            "abs_err_psi": abs(d0.psi_C.coeffs[i] - d1.psi_C.coeffs[i]),
            "psi_inf_re": res["asym"].psi_inf.coeffs[i].real,
            "psi_inf_im": res["asym"].psi_inf.coeffs[i].imag,
        }
        for i in range(len(ms))
    ]
    checks = [_check("roundtrip_rel_error", res["rel_error"], cfg["wave-roundtrip"]["threshold"])]
    return results, checks, {"modes": table}


def cmd_bessel_validate(cfg, threads):
    bg = background_from_config(cfg)
    c = cfg["bessel-validate"]
    modes = ex.power_law_modes(bg, c["max_norm"]) if c["modes"] is None else np.array(c["modes"], dtype=float).reshape(-1, bg.D)
    t = cfg["tolerances"]
    rows = ex.bessel_validate(bg, modes, [tuple(x) for x in c["coefficients"]], c["n_t"], t["rel_tol"], t["abs_tol"] or 1e-14)
    worst = max((r["max_rel_err"] for r in rows), default=0.0)
    flat = [dict(r, **{"lambda": " ".join(map(str, r["lambda"]))}) for r in rows]
    return {"n_rows": len(rows), "max_rel_err": worst}, [_check("bessel_max_rel_err", worst, c["threshold"])], {"modes": flat}


def cmd_energy_sweep(cfg, threads):
    bg = background_from_config(cfg)
    c = cfg["energy-sweep"]
    if cfg["run"]["sector"] == "einstein":
        rows = ex.einstein_energy_sweep(bg, c["radii"], c["n_random"], c["n_t"], _ein_tol(cfg))
        keys = ("C_high", "C_mid", "C_low", "seam_1", "seam_ring")
    else:
        rows = ex.wave_energy_sweep(bg, c["radii"], c["n_random"], c["n_t"], _wave_tol(cfg))
        keys = ("C_high", "C_low", "tail_C")
    radii = sorted({r["radius"] for r in rows})
    plot = [{"radius": R} | {f"max_{k}": max(r[k] for r in rows if r["radius"] == R) for k in keys} for R in radii]
    results = {"radii": radii}
    checks = []
    if len(radii) > 1:
        growth = ex.growth_factors(rows, keys)
        results["growth"] = growth
        checks = [_check(f"growth_{k}", v, c["growth_threshold"]) for k, v in growth.items()]
    if cfg["run"]["sector"] == "wave":
        lo = min(r["gain_min"] for r in rows)
        hi = max(r["gain_max"] for r in rows)
        results["gain_window"] = {"min": lo, "max": hi, "max_over_min": hi / lo}
    flat = [dict(r, **{"lambda": " ".join(map(str, r["lambda"]))}) for r in rows]
    return results, checks, {"modes": flat, "plot": plot}


def cmd_einstein_roundtrip(cfg, threads):
    bg = background_from_config(cfg)
    r = cfg["run"]
    res = ex.einstein_roundtrip(bg, r["Lambda"], r["seed"], r["sigma"], r["s"], _ein_tol(cfg), threads, r["zero_data"])
    keys = ("rel_error", "cauchy_norm", "asymptotic_norm", "asym_residual", "data_residual", "back_residual")
    results = {k: res[k] for k in keys}
    c = cfg["einstein-roundtrip"]
    checks = [
        _check("roundtrip_rel_error", res["rel_error"], c["threshold"]),
        _check("asymptotic_constraint_residual", res["asym_residual"], c["residual_threshold"]),
    ]
    ms = res["data"].modeset
    y0, y1 = res["data"].vectors(), res["back"].vectors()
    table = [
        {"lambda": " ".join(str(int(x)) for x in ms.modes[i]), "abs_err": float(np.linalg.norm(y0[i] - y1[i])), "norm": float(np.linalg.norm(y0[i]))}
        for i in range(len(ms))
    ]
    return results, checks, {"modes": table}


def cmd_einstein_constraints(cfg, threads):
    bg = background_from_config(cfg)
    r = cfg["run"]
    c = cfg["einstein-constraints"]
    data = ein.random_constrained_data(bg, r["Lambda"], r["seed"], math.inf if r["zero_data"] else r["sigma"])
    series = ex.einstein_constraint_series(bg, data, c["n_t"], _ein_tol(cfg), threads)
    worst = max(s["max_rel_residual"] for s in series)
    return {"max_rel_residual": worst}, [_check("constraint_propagation", worst, c["threshold"])], {"series": series}


def cmd_subcritical_scan(cfg, threads):
    c = cfg["subcritical-scan"]
    scan = ex.subcritical_scan(c["D"], c["samples"], cfg["run"]["seed"], c["p_phi"])
    iso = kc.isotropic(c["D"])
    scan["isotropic_margin"] = iso.delta
    checks = [_check("isotropic_scalar_field_subcritical", iso.delta, 0.0, ">")]
    if c["p_phi"] == 0.0 and c["D"] == 3:
        checks.append(_check("vacuum_D3_max_margin", scan["max_margin"], 0.0))
    return scan, checks, {}


def cmd_norms(cfg, threads):
    bg = background_from_config(cfg)
    r = cfg["run"]
    sig = math.inf if r["zero_data"] else r["sigma"]
    rows = []
    if r["sector"] == "einstein":
        data = ein.random_constrained_data(bg, r["Lambda"], r["seed"], sig)
        asym = ein.einstein_scatter_down(bg, data, _ein_tol(cfg), threads)
        norm = ein.einstein_hilbert_norms
    else:
        from .fields import sample_band_limited

        D = bg.D
        data = wave.WaveCauchyData(
            sample_band_limited(r["seed"], r["Lambda"], sig + 1.0, "scalar", True, D),
            sample_band_limited(r["seed"] + 1, r["Lambda"], sig, "scalar", True, D),
        )
        asym = wave.scatter_down(bg, data, _wave_tol(cfg), threads)
        norm = wave.wave_hilbert_norms
    for s in cfg["norms"]["s_values"]:
        c = norm(data, s, bg)[0]
        a = norm(asym, s, bg)[1]
        rows.append({"s": s, "cauchy_norm": c, "asymptotic_norm": a, "ratio": a / c if c > 0 else float("nan")})
    finite = all(math.isfinite(x["cauchy_norm"]) and math.isfinite(x["asymptotic_norm"]) for x in rows)
    return {"rows": rows}, [_check("norms_finite", 0.0 if finite else 1.0, 0.0)], {"norms": rows}


def cmd_bounds_check(cfg, threads):
    c = cfg["bounds-check"]
    t0 = time.perf_counter()
    res = ex.bounds_battery(c["backgrounds"], c["modes"], c["times"], cfg["background"]["D"], cfg["run"]["seed"])
    elapsed = time.perf_counter() - t0
    checks = [_check("bounds_failures", float(res["total"] - res["passed"]), 0.0)]
    return res, checks, {"_elapsed": elapsed}


COMMANDS = {
    "wave-roundtrip": cmd_wave_roundtrip,
    "bessel-validate": cmd_bessel_validate,
    "energy-sweep": cmd_energy_sweep,
    "einstein-roundtrip": cmd_einstein_roundtrip,
    "einstein-constraints": cmd_einstein_constraints,
    "subcritical-scan": cmd_subcritical_scan,
    "norms": cmd_norms,
    "bounds-check": cmd_bounds_check,
}


# --- output -------------------------------------------------------------------------


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else repr(x)
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    return obj


def _write_csv(path: Path, rows: list[dict]) -> None:
    if not rows:
        path.write_text("")
        return
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (format(float(v), ".17g") if isinstance(v, (float, np.floating)) else v) for k, v in r.items()})


def run(command: str, cfg: dict, out_dir: Path, threads: int) -> dict:
    t0 = time.perf_counter()
    started = datetime.now(timezone.utc).isoformat()
    results, checks, tables = COMMANDS[command](cfg, threads)
    extra = {k: tables.pop(k) for k in [k for k in tables if k.startswith("_")]}
    report = {
        "command": command,
        "library_version": __version__,
        "config": cfg,
        "results": results,
        "checks": checks,
        "passed": all(c["passed"] for c in checks),
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = command.replace("-", "_")
    (out_dir / f"{stem}.json").write_text(json.dumps(_clean(report), indent=2, sort_keys=True) + "\n")
    meta = {"started": started, "wall_seconds": time.perf_counter() - t0, "threads": threads} | extra
    (out_dir / f"{stem}.meta.json").write_text(json.dumps(_clean(meta), indent=2, sort_keys=True) + "\n")
    for name, rows in tables.items():
        _write_csv(out_dir / f"{stem}_{name}.csv", rows)
    return report


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="scatter", description="Scattering experiments on Kasner backgrounds.")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", required=True, help="INI config file")
    ap.add_argument("--out", help="output directory (overrides [run] out)")
    ap.add_argument("--threads", type=int, help="worker threads (default: SCATTER_THREADS or 1)")
    ap.add_argument("--seed", type=int, help="overrides [run] seed")
    args = ap.parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg["run"]["seed"] = args.seed
        if args.out is not None:
            cfg["run"]["out"] = args.out
        threads = resolve_threads(args.threads)
        report = run(args.command, cfg, Path(cfg["run"]["out"]), threads)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ScatterError as exc:
        print(f"refused: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    for c in report["checks"]:
        print(f"{'PASS' if c['passed'] else 'FAIL'} {c['name']}: {c['value']:.6g} {c['op']} {c['threshold']:.6g}")
    return 0 if report["passed"] else 1


if __name__ == "__main__":
    sys.exit(main())
