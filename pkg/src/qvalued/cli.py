"""Command-line front end: ``qval generate | frequency | minimize | decay | selftest``.

Settings resolve in three layers: built-in defaults, then a YAML/JSON
``--config`` file, then explicit flags. Every report starts with a header
line naming the package version, the grid spacing and the tolerances used.
Exit codes: 0 success, 1 usage error, 2 numerical or diagnostic failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from . import __version__
from .aq_space import AqError
from .blowup import BlowupError, decay_report
from .cylindrical import CylindricalError, DiagnosticError, evaluator_from_record
from .frequency import EXTRAP_SUB, H_FLOOR, D_of, H_of, assemble_profile
from .minimizer import SolveError, SolveParams, minimize, optimal_omega
from .qfield import MAGIC, FieldError, QField, box_grid, load_field, loads_field, sample_field, save_field
from .selftest import run_checks

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2

NUMERIC_ERRORS = (FieldError, BlowupError, DiagnosticError, SolveError, AqError, FloatingPointError)

DEFAULTS = {
    "generate": {"record": None, "h": 1.0 / 128, "box": "-1,1", "dim": 2, "out": None},
    "frequency": {"field": None, "center": None, "radii": "0.1:0.5:9", "alpha": None, "out": None},
    "minimize": {
        "boundary": None,
        "init": None,
        "h": 1.0 / 64,
        "box": "-1,1",
        "dim": 2,
        "max_sweeps": 20000,
        "energy_tol": 1e-10,
        "restarts": 5,
        "omega": None,
        "seed": 0,
        "out": None,
        "log": None,
    },
    "decay": {
        "field": None,
        "center": None,
        "theta": 0.5,
        "scales": 4,
        "rho0": None,
        "k0": None,
        "q0": None,
        "seed": 0,
        "out": None,
    },
    "selftest": {"seed": 0, "out": None},
}


class UsageError(Exception):
    """Bad flags, missing files or malformed records."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# Parsing helpers
# ---------------------------------------------------------------------------


def _floats(text, what: str) -> list[float]:
    if isinstance(text, (int, float)):
        return [float(text)]
    if isinstance(text, (list, tuple)):
        vals = text
    else:
        vals = [t for t in str(text).replace(" ", "").split(",") if t]
    try:
        return [float(v) for v in vals]
    except ValueError:
        raise UsageError(f"{what}: expected comma-separated numbers, got {text!r}") from None


def parse_radii(text) -> list[float]:
    """``"a,b,c"`` or ``"start:stop:count"`` (inclusive, evenly spaced)."""
    if isinstance(text, str) and ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise UsageError(f"radii range must be start:stop:count, got {text!r}")
        try:
            a, b, k = float(parts[0]), float(parts[1]), int(parts[2])
        except ValueError:
            raise UsageError(f"bad radii range {text!r}") from None
        if k < 1:
            raise UsageError("radii count must be positive")
        return [float(x) for x in np.linspace(a, b, k)]
    return _floats(text, "radii")


def load_record(spec: str) -> dict:
    """A generator record given inline (JSON/YAML) or as a file path."""
    text = spec
    if not spec.lstrip().startswith("{") and Path(spec).exists():
        text = Path(spec).read_text()
    try:
        rec = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise UsageError(f"cannot parse record: {exc}") from None
    if not isinstance(rec, dict):
        raise UsageError(f"record must be a mapping, got {type(rec).__name__}")
    return rec


def build_evaluator(rec: dict):
    try:
        return evaluator_from_record(rec)
    except (CylindricalError, KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"bad generator record: {exc}") from None


def read_field(path: str) -> QField:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"field file not found: {path}")
    return load_field(p)


def _grid_from(cfg: dict):
    box = _floats(cfg["box"], "box")
    if len(box) != 2 or not box[1] > box[0]:
        raise UsageError(f"box must be 'lo,hi' with lo < hi, got {cfg['box']!r}")
    h, dim = float(cfg["h"]), int(cfg["dim"])
    if not h > 0 or dim < 2:
        raise UsageError("need h > 0 and dim >= 2")
    try:
        return box_grid(box[0], box[1], h, dim)
    except FieldError as exc:
        raise UsageError(str(exc)) from None


def _center(cfg: dict, u: QField) -> list[float]:
    if cfg["center"] is None:
        return [0.0] * u.n
    c = _floats(cfg["center"], "center")
    if len(c) != u.n:
        raise UsageError(f"center has {len(c)} coordinates, field has dimension {u.n}")
    return c


def header(command: str, h: float | None, **tols) -> str:
    parts = [f"qvalued {__version__}", f"command={command}"]
    if h is not None:
        parts.append(f"h={h:.12g}")
    for k, v in tols.items():
        parts.append(f"{k}={v}")
    return " ".join(parts)


def _write_text(path: str | None, text: str) -> None:
    if path is None:
        sys.stdout.write(text)
        return
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise UsageError(f"cannot write {path}: {exc.strerror}") from None


def _write_field(path: str | None, u: QField) -> None:
    if path is None:
        raise UsageError("--out is required for field output")
    try:
        save_field(u, path)
    except OSError as exc:
        raise UsageError(f"cannot write {path}: {exc.strerror}") from None


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_generate(cfg: dict, threads: int) -> int:
    if not cfg["record"]:
        raise UsageError("generate needs --record")
    rec = load_record(cfg["record"])
    f = build_evaluator(rec)
    g = _grid_from(cfg)
    u = sample_field(f, g)
    _write_field(cfg["out"], u)
    meta = {"type": rec.get("type"), "n": u.n, "q": u.q, "m": u.m, "dims": list(g.dims), "origin": list(g.origin), "h": g.h}
    sys.stdout.write(f"# {header('generate', g.h)}\n{json.dumps(meta, sort_keys=True)}\n")
    return EXIT_OK


def cmd_frequency(cfg: dict, threads: int) -> int:
    if not cfg["field"]:
        raise UsageError("frequency needs --field")
    u = read_field(cfg["field"])
    Y = _center(cfg, u)
    rs = parse_radii(cfg["radii"])
    alpha = None if cfg["alpha"] is None else float(cfg["alpha"])
    if not rs or any(b <= a for a, b in zip(rs, rs[1:])):
        raise UsageError("radii must be a nonempty strictly increasing list")
    # radii are independent; the pool only changes scheduling, map keeps order
    with ThreadPoolExecutor(max_workers=threads) as pool:
        D = list(pool.map(lambda r: D_of(u, Y, r), rs))
        H = list(pool.map(lambda r: H_of(u, Y, r), rs))
    prof = assemble_profile(u, Y, rs, D, H, alpha)
    head = header("frequency", u.h, alpha=f"{prof.alpha:.12g}", H_floor=H_FLOOR, sub=EXTRAP_SUB, center=",".join(f"{y:g}" for y in Y))
    _write_text(cfg["out"], prof.to_csv(head))
    return EXIT_OK


def _load_boundary(cfg: dict) -> QField:
    spec = cfg["boundary"]
    if not spec:
        raise UsageError("minimize needs --boundary (a record or a QFLD1 file)")
    p = Path(spec)
    if not spec.lstrip().startswith("{") and p.is_file():
        blob = p.read_bytes()
        if blob.startswith(MAGIC):
            return loads_field(blob)
    rec = load_record(spec)
    return sample_field(build_evaluator(rec), _grid_from(cfg))


def cmd_minimize(cfg: dict, threads: int) -> int:
    boundary = _load_boundary(cfg)
    init = read_field(cfg["init"]) if cfg["init"] else None
    omega = optimal_omega(boundary.grid.dims) if cfg["omega"] in (None, "optimal") else float(cfg["omega"])
    try:
        params = SolveParams(
            max_sweeps=int(cfg["max_sweeps"]),
            energy_tol=float(cfg["energy_tol"]),
            restarts=int(cfg["restarts"]),
            seed=int(cfg["seed"]),
            omega=omega,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    res = minimize(boundary, init=init, params=params)
    _write_field(cfg["out"], res.field)
    head = header(
        "minimize", boundary.h, energy_tol=params.energy_tol, omega=f"{omega:.12g}", restarts=params.restarts, seed=params.seed
    )
    log = f"# {head}\n" + res.log_csv()
    if cfg["log"]:
        _write_text(cfg["log"], log)
    sys.stdout.write(f"# {head}\nstatus: {res.status}\nenergy: {res.energy!r}\nsweeps: {len(res.log)}\n")
    return EXIT_OK


def cmd_decay(cfg: dict, threads: int) -> int:
    if not cfg["field"]:
        raise UsageError("decay needs --field")
    u = read_field(cfg["field"])
    Y = _center(cfg, u)
    k0 = None if cfg["k0"] is None else int(cfg["k0"])
    q0 = None if cfg["q0"] is None else int(cfg["q0"])
    if (k0 is None) != (q0 is None):
        raise UsageError("give both --k0 and --q0 or neither")
    rho0 = None if cfg["rho0"] is None else float(cfg["rho0"])
    rep = decay_report(u, Y, theta=float(cfg["theta"]), J=int(cfg["scales"]), k0=k0, q0=q0, rho0=rho0, seed=int(cfg["seed"]))
    head = header("decay", u.h, theta=f"{float(cfg['theta']):.12g}", scales=int(cfg["scales"]), seed=int(cfg["seed"]))
    _write_text(cfg["out"], rep.to_text(head))
    return EXIT_OK


def cmd_selftest(cfg: dict, threads: int) -> int:
    results = run_checks(seed=int(cfg["seed"]), threads=threads)
    failed = sum(not r.passed for r in results)
    lines = [f"# {header('selftest', None, seed=int(cfg['seed']))}"]
    lines += [r.line() for r in results]
    lines.append(f"summary: {len(results) - failed} passed, {failed} failed")
    _write_text(cfg["out"], "\n".join(lines) + "\n")
    return EXIT_OK if failed == 0 else EXIT_NUMERIC


COMMANDS = {
    "generate": cmd_generate,
    "frequency": cmd_frequency,
    "minimize": cmd_minimize,
    "decay": cmd_decay,
    "selftest": cmd_selftest,
}


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="qval", description="Numerical toolkit for q-valued harmonic maps.")
    p.add_argument("--version", action="version", version=f"qvalued {__version__}")
    p.add_argument("--threads", type=int, default=None, help="worker threads (fallback: QVAL_THREADS, else 1)")
    p.add_argument("--config", default=None, help="YAML or JSON file of settings; flags override it")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("generate", help="sample a generator record onto a grid and write a QFLD1 file")
    g.add_argument("--record", help="record as inline JSON/YAML or a file path")
    g.add_argument("--h", type=float)
    g.add_argument("--box", help="lo,hi of the cube [lo, hi]^n")
    g.add_argument("--dim", type=int)
    g.add_argument("--out")

    f = sub.add_parser("frequency", help="tabulate D, H, N, W over radii as CSV")
    f.add_argument("--field")
    f.add_argument("--center", help="comma-separated coordinates (default: origin)")
    f.add_argument("--radii", help="r1,r2,... or start:stop:count")
    f.add_argument("--alpha", type=float, help="degree used by W (default: N at the smallest radius)")
    f.add_argument("--out")

    m = sub.add_parser("minimize", help="relax a boundary field to a discrete minimizer")
    m.add_argument("--boundary", help="record (inline or file) or QFLD1 file")
    m.add_argument("--init", help="QFLD1 starting field")
    m.add_argument("--h", type=float)
    m.add_argument("--box")
    m.add_argument("--dim", type=int)
    m.add_argument("--max-sweeps", dest="max_sweeps", type=int)
    m.add_argument("--energy-tol", dest="energy_tol", type=float)
    m.add_argument("--restarts", type=int)
    m.add_argument("--omega", help="SOR factor in (0, 2) or 'optimal' (default)")
    m.add_argument("--seed", type=int)
    m.add_argument("--out")
    m.add_argument("--log", help="CSV path for the energy log")

    d = sub.add_parser("decay", help="excess decay against fitted cylindrical tangents")
    d.add_argument("--field")
    d.add_argument("--center")
    d.add_argument("--theta", type=float)
    d.add_argument("--scales", type=int, help="J: scales rho0 theta^j for j = 0..J")
    d.add_argument("--rho0", type=float)
    d.add_argument("--k0", type=int)
    d.add_argument("--q0", type=int)
    d.add_argument("--seed", type=int)
    d.add_argument("--out")

    s = sub.add_parser("selftest", help="run the invariant checks")
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    return p


def resolve(args: argparse.Namespace) -> dict:
    """Defaults < config file < explicit flags."""
    cfg = dict(DEFAULTS[args.command])
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {args.config}")
        try:
            loaded = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise UsageError(f"cannot parse config: {exc}") from None
        if not isinstance(loaded, dict):
            raise UsageError("config must be a mapping")
        section = loaded.get(args.command, loaded)
        for k, v in section.items():
            key = str(k).replace("-", "_")
            if key in cfg:
                cfg[key] = v
            elif key not in COMMANDS and key != "threads":
                raise UsageError(f"unknown config key {k!r} for {args.command}")
        if args.threads is None and "threads" in loaded:
            args.threads = loaded["threads"]
    for k in cfg:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    return cfg


def thread_count(flag) -> int:
    raw = flag if flag is not None else os.environ.get("QVAL_THREADS", "1")
    try:
        n = int(raw)
    except (TypeError, ValueError):
        raise UsageError(f"thread count must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("thread count must be positive")
    return n


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required: " + ", ".join(COMMANDS))
        cfg = resolve(args)
        threads = thread_count(args.threads)
        return COMMANDS[args.command](cfg, threads)
    except UsageError as exc:
        sys.stderr.write(f"qval: error: {exc}\n")
        return EXIT_USAGE
    except NUMERIC_ERRORS as exc:
        sys.stderr.write(f"qval: numerical failure: {exc}\n")
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
