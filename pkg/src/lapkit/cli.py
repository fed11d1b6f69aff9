"""Batch driver: ``lapkit <kind> --config path [--out dir] [--workers k] [--seed s]``.

Configuration is flat INI text whose values are JSON. Every key must exist
in the packaged defaults file; anything else is rejected before work starts.
Science records go to ``<out>/<kind>.jsonl``; wall times, versions and the
defaults text go to ``<out>/manifest.json``.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import math
import os
import platform
import sys
import time
from importlib import resources
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .grid import Field, GridSpec, SingularSymbolError, gaussian, load_field, save_field
from .perturb import NotAdmissibleError, ScalarPotential, catalog_potential

log = logging.getLogger("lapkit")

KINDS = ("kernel", "norms", "admissible", "lap-sweep", "scan", "eigen", "weighted", "trace",
         "commutation", "evolve", "smoothing", "waveop", "verify")
SHARED = ("run", "grid", "potential")
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
UNTRACKED = {"runtime", "wall_time", "timestamp"}


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


class ContractError(RuntimeError):
    """A numerical contract failed; ``record`` identifies the offending cell."""

    def __init__(self, message: str, record: dict | None = None):
        super().__init__(message)
        self.record = record or {}


# ------------------------------------------------------------ config

def defaults_text() -> str:
    return resources.files("lapkit").joinpath("defaults.cfg").read_text()


def _parse(text: str, origin: str) -> dict[str, dict[str, Any]]:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    cp.optionxform = str
    try:
        cp.read_string(text, source=origin)
    except configparser.Error as exc:
        raise ConfigError(origin, f"unreadable config ({exc.message if hasattr(exc, 'message') else exc})")
    out: dict[str, dict[str, Any]] = {}
    for sec in cp.sections():
        out[sec] = {}
        for key, raw in cp.items(sec):
            try:
                out[sec][key] = json.loads(raw)
            except json.JSONDecodeError:
                raise ConfigError(f"{sec}.{key}", f"value is not JSON: {raw!r}")
    return out


def _compatible(default, value) -> bool:
    if isinstance(default, bool) or isinstance(value, bool):
        return isinstance(default, bool) and isinstance(value, bool)
    if isinstance(default, (int, float)):
        return isinstance(value, (int, float))
    if isinstance(default, dict) and not default:
        return isinstance(value, dict)
    if isinstance(default, (list, dict)):
        return isinstance(value, (list, dict))
    return isinstance(value, type(default))


def load_config(kind: str, text: str = "", origin: str = "<config>") -> dict[str, dict[str, Any]]:
    """Merge user text over the defaults for ``kind``; unknown sections or keys are errors."""
    if kind not in KINDS:
        raise ConfigError("kind", f"unknown experiment kind {kind!r}")
    base = _parse(defaults_text(), "defaults.cfg")
    user = _parse(text, origin) if text else {}
    merged = {sec: dict(base[sec]) for sec in (*SHARED, kind)}
    for sec, items in user.items():
        if sec not in base:
            raise ConfigError(sec, "unknown section")
        if sec not in merged:
            raise ConfigError(sec, f"section does not apply to kind {kind!r}")
        for key, value in items.items():
            if key not in base[sec]:
                raise ConfigError(f"{sec}.{key}", "unknown key")
            if not _compatible(base[sec][key], value):
                raise ConfigError(f"{sec}.{key}", f"expected a value like {base[sec][key]!r}")
            merged[sec][key] = value
    return merged


def ladder(cfg: dict, sec: str, key: str) -> list[float]:
    """Explicit list or geometric {start, stop, count} with both endpoints."""
    v = cfg[sec][key]
    where = f"{sec}.{key}"
    if isinstance(v, list):
        if not v or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v):
            raise ConfigError(where, "ladder must be a non-empty list of numbers")
        return [float(x) for x in v]
    if set(v) != {"start", "stop", "count"}:
        raise ConfigError(where, "geometric ladder needs exactly start, stop, count")
    a, b, k = v["start"], v["stop"], v["count"]
    if not isinstance(k, int) or k < 1:
        raise ConfigError(where, "count must be a positive integer")
    if k == 1:
        return [float(a)]
    if a == 0 or b == 0 or (a > 0) != (b > 0):
        if a == 0 or b == 0:
            return [float(x) for x in np.linspace(a, b, k)]
        raise ConfigError(where, "geometric endpoints must share a sign")
    return [float(x) for x in np.geomspace(a, b, k)]


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def _grid(cfg: dict) -> GridSpec:
    g = cfg["grid"]
    try:
        return GridSpec(int(g["d"]), int(g["n"]), float(g["box"]))
    except (ValueError, TypeError) as exc:
        raise ConfigError("grid", str(exc))


def _potential(cfg: dict, spec: GridSpec):
    p = cfg["potential"]
    if p["path"]:
        try:
            V = load_field(p["path"])
        except (OSError, ValueError) as exc:
            raise ConfigError("potential.path", str(exc))
        if V.spec != spec:
            raise ConfigError("potential.path", "field grid differs from [grid]")
        return ScalarPotential(Field(spec, V.values.real))
    try:
        return catalog_potential(p["name"], spec, p["params"])
    except (KeyError, ValueError) as exc:
        raise ConfigError("potential", str(exc.args[0] if exc.args else exc))


def _side(cfg: dict, kind: str) -> str:
    s = cfg[kind].get("side", "+")
    if s not in ("+", "-", ""):
        raise ConfigError(f"{kind}.side", "side must be '+', '-' or empty")
    return s


# ----------------------------------------------------------- records

def _clean(x):
    """JSON-safe copy: numpy scalars to Python, complex to [re, im], non-finite to strings."""
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items() if k not in UNTRACKED}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.ndarray):
        return _clean(x.tolist())
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer, int)):
        return int(x)
    if isinstance(x, (complex, np.complexfloating)):
        return [_clean(float(x.real)), _clean(float(x.imag))]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else repr(x)
    if isinstance(x, Field):
        return None
    return x


class Collector:
    """Serialises records to one JSON-lines file, in submission order."""

    def __init__(self, path: Path, chash: str, kind: str):
        self.path = path
        self.chash = chash
        self.kind = kind
        self.count = 0
        self._fh = open(path, "w")

    def add(self, rec: dict) -> dict:
        rec = _clean(dict(rec))
        rec["config_hash"] = self.chash
        rec["kind"] = self.kind
        self._fh.write(json.dumps(rec, sort_keys=True) + "\n")
        self.count += 1
        return rec

    def close(self):
        self._fh.close()


# ------------------------------------------------------------- kinds

def run_kernel(cfg, spec, P, out, emit, workers):
    from .special import KernelParams, kernel_bound_constants, radial_kernel

    c = cfg["kernel"]
    side = _side(cfg, "kernel") or "+"
    r = np.asarray(ladder(cfg, "kernel", "r_ladder"))
    for z in c["z_values"]:
        vals = radial_kernel(r, KernelParams(complex(z), spec.d, side=side))
        rec = {"z": float(z), "d": spec.d, "side": side, "r": r, "value": [complex(v) for v in vals]}
        if spec.d == 3:
            k = np.sqrt(complex(z)) * (1 if side == "+" else -1)
            ref = np.exp(1j * k * r) / (4 * math.pi * r)
            rec["closed_form_error"] = float(np.max(np.abs(vals - ref) / np.abs(ref)))
        emit(rec)
    emit({"bound_constants": kernel_bound_constants(spec.d, float(c["delta"]))})


def run_norms(cfg, spec, P, out, emit, workers):
    from .spaces import norm_report

    c = cfg["norms"]
    if c["probe"] == "gaussian":
        f = gaussian(spec, float(c["width"]))
    elif c["probe"] == "potential":
        f = Field(spec, P.multiplication if P.multiplication is not None else P.a.values)
    else:
        raise ConfigError("norms.probe", "probe must be 'gaussian' or 'potential'")
    rep = norm_report(f, (float(c["alpha"]), float(c["p"])), (float(c["lam"]),))
    emit(rep.to_dict())


def run_admissible(cfg, spec, P, out, emit, workers):
    from .perturb import approximation_residuals

    rep = P.report
    emit(rep.to_dict())
    V = P.V if isinstance(P, ScalarPotential) else getattr(P, "a", None)
    if V is None:
        return
    for name, crit in rep.criteria.items():
        if crit.finite:
            emit(approximation_residuals(V, name, tuple(cfg["admissible"]["ns"])))


def run_lap_sweep(cfg, spec, P, out, emit, workers):
    from .harness import lap_sweep
    from .perturb import ZeroPerturbation

    c = cfg["lap-sweep"]
    eps = ladder(cfg, "lap-sweep", "eps_ladder")
    side = _side(cfg, "lap-sweep")
    if any(e == 0 for e in eps) and not side:
        raise ConfigError("lap-sweep.eps_ladder", "contains eps = 0 but lap-sweep.side is not set")
    if any(e == 0 for e in eps):
        raise ConfigError("lap-sweep.eps_ladder", "boundary values (eps = 0) belong to the trace kind")
    if side:
        eps = [abs(e) * (1 if side == "+" else -1) for e in eps]
    lams = np.linspace(float(c["lam_min"]), float(c["lam_max"]), int(c["lam_count"]))
    if lams.min() <= 0 <= lams.max():
        raise ConfigError("lap-sweep.lam_min", "the lambda interval must not contain 0")
    pert = None if isinstance(P, ZeroPerturbation) else P
    recs = lap_sweep(spec, lams, eps, pert, components=bool(c["components"]), workers=workers,
                     seed=cfg["run"]["seed"])
    for r in recs:
        emit(r.to_dict())
    bad = [r for r in recs if r.error]
    if bad:
        raise ContractError("sweep cell failed", {"lambda": bad[0].lam, "eps": bad[0].eps,
                                                   "error": bad[0].error})


def run_scan(cfg, spec, P, out, emit, workers):
    from .resolvent import scan_exceptional

    c = cfg["scan"]
    sc = scan_exceptional((float(c["lam_min"]), float(c["lam_max"])), P, float(c["resolution"]),
                          ladder(cfg, "scan", "eps_ladder"), _side(cfg, "scan") or "+",
                          float(c["threshold"]))
    for r in sc.records():
        emit(r)
    for k, dip in enumerate(sc.dips):
        emit({"dip": k, "lambda": dip.lam, "smin": dip.smin, "multiplicity": dip.multiplicity,
              "values": dip.values})
        if dip.kernel is not None:
            save_field(out / f"scan_kernel_{k}.lapf", dip.kernel)


def run_eigen(cfg, spec, P, out, emit, workers):
    from .resolvent import eigen_decay_check, eigensolve_direct

    c = cfg["eigen"]
    res = eigensolve_direct(P, count=int(c["count"]))
    for k, (lam, u, resid) in enumerate(zip(res.values, res.vectors, res.residuals)):
        u = u if isinstance(u, Field) else Field(spec, np.asarray(u).reshape(spec.shape))
        rec = {"index": k, "lambda": float(lam), "residual": float(resid), "method": res.method}
        if lam < 0:
            rec["decay"] = eigen_decay_check(u, float(lam), tuple(c["N_list"]), P, float(resid),
                                             representation="kernel").to_dict()
        emit(rec)
        if c["save_vectors"]:
            save_field(out / f"eigenvector_{k}.lapf", u)


def run_weighted(cfg, spec, P, out, emit, workers):
    from .harness import schwartz_pairs, sup_ratio_variation, weighted_estimate_check
    from .special import herglotz_wave

    c = cfg["weighted"]
    lam = float(c["lam"])
    gammas = ladder(cfg, "weighted", "gamma_ladder")
    pairs = schwartz_pairs(spec, int(c["pairs"]), cfg["run"]["seed"] + 1)
    for N in c["N_list"]:
        reps = [weighted_estimate_check(u, lam, float(N), gammas) for u in pairs]
        for k, rep in enumerate(reps):
            emit({"pair": k, **rep.to_dict()})
        emit({"N": N, "lam": lam, "sup_variation": sup_ratio_variation(reps)})
    if c["herglotz"] and lam > 0:
        u = herglotz_wave(spec, lam)
        for N in c["N_list"]:
            emit({"probe": "herglotz", **weighted_estimate_check(u, lam, float(N), gammas).to_dict()})


def run_trace(cfg, spec, P, out, emit, workers):
    from .harness import sphere_null_probe, trace_identity_check

    c = cfg["trace"]
    side = _side(cfg, "trace") or "+"
    eps = ladder(cfg, "trace", "eps_ladder")
    for lam in c["lam_values"]:
        g = gaussian(spec, float(c["width"]))
        emit({"probe": "gaussian", **trace_identity_check(g, float(lam), side, eps).to_dict()})
        null = sphere_null_probe(spec, float(lam), float(c["width"]))
        emit({"probe": "sphere-null", **trace_identity_check(null, float(lam), side, eps).to_dict()})


def run_commutation(cfg, spec, P, out, emit, workers):
    from .harness import commutation_check

    c = cfg["commutation"]
    rep = commutation_check(spec, [float(a) for a in c["alphas"]], float(c["N"]),
                            ladder(cfg, "commutation", "gamma_ladder"), factor=float(c["factor"]))
    emit(rep.to_dict())


def _window(cfg, kind: str, P):
    from .dynamics import SpectralWindow, WindowError

    c = cfg[kind]
    try:
        a, b = (float(x) for x in c["window"])
        return SpectralWindow(a, b, degree=int(c["degree"]) or None)
    except (ValueError, TypeError, WindowError) as exc:
        raise ConfigError(f"{kind}.window", str(exc))


def run_evolve(cfg, spec, P, out, emit, workers):
    from .dynamics import EvolutionConfig, evolve, free_gaussian
    from .grid import pairing
    from .resolvent import apply_hamiltonian
    from .spaces import l2_norm

    c = cfg["evolve"]
    try:
        ecfg = EvolutionConfig(dt=float(c["dt"]), method=c["method"])
    except ValueError as exc:
        raise ConfigError("evolve.method", str(exc))
    f = gaussian(spec, float(c["width"]))
    e0 = pairing(apply_hamiltonian(f, P), f).real
    u, t_prev = f, 0.0
    for t in sorted(float(x) for x in c["t_values"]):
        u = evolve(u, t - t_prev, P, ecfg)
        t_prev = t
        rec = {"t": t, "norm": l2_norm(u), "norm0": l2_norm(f),
               "energy": pairing(apply_hamiltonian(u, P), u).real, "energy0": e0}
        if P.kind == "zero":
            rec["closed_form_error"] = l2_norm(u - free_gaussian(spec, float(c["width"]), t, 1))
        emit(rec)
        if c["checkpoint"]:
            save_field(out / f"evolve_t{t:g}.lapf", u)


def run_smoothing(cfg, spec, P, out, emit, workers):
    from .dynamics import random_packets, smoothing_comparison

    c = cfg["smoothing"]
    w = _window(cfg, "smoothing", P)
    fs = random_packets(spec, int(c["packets"]), w, seed=cfg["run"]["seed"] + 1)
    rep = smoothing_comparison(fs, w, P, ladder(cfg, "smoothing", "T_ladder"), float(c["dt"]))
    emit(rep.to_dict())


def run_waveop(cfg, spec, P, out, emit, workers):
    from .dynamics import EvolutionConfig, wave_operator

    c = cfg["waveop"]
    w = _window(cfg, "waveop", P)
    side = _side(cfg, "waveop") or "+"
    rep = wave_operator(gaussian(spec, float(c["width"])), w, P, ladder(cfg, "waveop", "t_ladder"),
                        side, EvolutionConfig(dt=float(c["dt"])))
    emit(rep.to_dict())


def run_verify(cfg, spec, P, out, emit, workers):
    from .verify import verify_suite

    c = cfg["verify"]
    checks = verify_suite(int(c["n"]), float(c["box"]), 2, int(c["fields"]), cfg["run"]["seed"])
    for ch in checks:
        emit(ch.to_dict())
    failed = [ch.name for ch in checks if not ch.passed]
    if failed:
        raise ContractError("invariants failed", {"failed": failed})


RUNNERS: dict[str, Callable] = {
    "kernel": run_kernel, "norms": run_norms, "admissible": run_admissible,
    "lap-sweep": run_lap_sweep, "scan": run_scan, "eigen": run_eigen, "weighted": run_weighted,
    "trace": run_trace, "commutation": run_commutation, "evolve": run_evolve,
    "smoothing": run_smoothing, "waveop": run_waveop, "verify": run_verify,
}


# --------------------------------------------------------------- run

def _numeric_errors() -> tuple:
    from .dynamics import EvolutionError
    from .resolvent import BoundaryValueError, ExtrapolationError, SolverError
    return (SolverError, ExtrapolationError, EvolutionError, BoundaryValueError,
            SingularSymbolError, NotAdmissibleError, ContractError)


def _versions() -> dict:
    import scipy
    from . import __version__
    return {"lapkit": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__}


def run(kind: str, config_text: str = "", out: str | Path | None = None, workers: int | None = None,
        seed: int | None = None, origin: str = "<config>") -> int:
    """Validate, execute, write records and manifest; returns the exit status."""
    t0 = time.time()
    try:
        cfg = load_config(kind, config_text, origin)
        if seed is not None:
            cfg["run"]["seed"] = int(seed)
        if out is not None:
            cfg["run"]["out"] = str(out)
        spec = _grid(cfg)
        P = _potential(cfg, spec)
    except ConfigError as exc:
        print(f"lapkit: config error at {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if workers is None:
        workers = int(os.environ.get("LAPKIT_WORKERS", cfg["run"]["workers"]))
    outdir = Path(cfg["run"]["out"])
    outdir.mkdir(parents=True, exist_ok=True)
    science = {k: v for k, v in cfg.items() if k != "run"} | {"seed": cfg["run"]["seed"]}
    chash = config_hash(science)
    col = Collector(outdir / f"{kind}.jsonl", chash, kind)
    status, failure = EXIT_OK, None
    try:
        RUNNERS[kind](cfg, spec, P, outdir, col.add, workers)
    except ConfigError as exc:
        print(f"lapkit: config error at {exc}", file=sys.stderr)
        status, failure = EXIT_CONFIG, {"key": exc.key, "message": str(exc)}
    except _numeric_errors() as exc:
        rec = dict(getattr(exc, "record", {}) or getattr(exc, "diagnostics", {}) or {})
        failure = {"error": type(exc).__name__, "message": str(exc), "record": _clean(rec),
                   "records_written": col.count}
        print(f"lapkit: numerical contract violated: {exc} {json.dumps(failure['record'])}",
              file=sys.stderr)
        status = EXIT_NUMERIC
    finally:
        col.close()
    manifest = {"kind": kind, "config_hash": chash, "config": cfg, "versions": _versions(),
                "defaults": defaults_text(), "wall_time": time.time() - t0,
                "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"), "records": col.count,
                "records_file": col.path.name, "exit_status": status, "failure": failure,
                "workers": workers}
    if kind == "verify":
        manifest["invariants"] = [
            {"name": r["name"], "passed": r["passed"]}
            for r in map(json.loads, col.path.read_text().splitlines())]
    (outdir / "manifest.json").write_text(json.dumps(_clean(manifest), indent=2, sort_keys=True))
    return status


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(prog="lapkit", description="Limiting-absorption experiments on periodic grids.")
    ap.add_argument("kind", choices=KINDS)
    ap.add_argument("--config", help="INI file with JSON values; defaults apply to missing keys")
    ap.add_argument("--out", help="output directory")
    ap.add_argument("--workers", type=int)
    ap.add_argument("--seed", type=int)
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    text, origin = "", "<defaults>"
    if args.config:
        try:
            text, origin = Path(args.config).read_text(), args.config
        except OSError as exc:
            print(f"lapkit: config error at --config: {exc}", file=sys.stderr)
            return EXIT_CONFIG
    return run(args.kind, text, args.out, args.workers, args.seed, origin)


if __name__ == "__main__":
    sys.exit(main())
