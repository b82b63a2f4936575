"""Command line entry point: ``polybous {mesh,run,verify,sweep} --config FILE --out DIR``.

Configuration is a line-oriented ``key = value`` file with ``[section]``
headers and ``#`` comments::

    [domain]
    preset = unit_square          # or: vertices = (0,0), (1,0), (0,1)
    [mesh]
    divisions = 64                # or: target_h = 0.02
    [physics]
    nu = 0
    t_end = 1
    dt_max = 0.015625
    [data]
    omega0 = sin(2*pi*x)*sin(2*pi*y)
    theta0 = sin(pi*x)*sin(pi*y)

Exit status: 0 success, 1 a check or sweep criterion failed, 2 bad
configuration or usage, 3 solver failure.
"""

from __future__ import annotations

import argparse
import io
import json
import logging
import math
import os
import re
import sys
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .boussinesq import FULL, TRANSPORT_ONLY, SimParams, SimulationError, run
from .domain import (
    InadmissibleDomainError,
    Polygon,
    PolygonError,
    compute_apertures,
    mesh_polygon,
    preset,
    write_vtk,
)
from .elliptic import biot_savart, leray_project, SolverError
from .estimates import (
    ENERGY_C_RES,
    THERMAL_C_RES,
    TRANSPORT_TOL_FACTOR,
    check_energy_identity,
    check_thermal_identity,
    check_vorticity_transport_bound,
    gronwall_envelope_check,
    regularity_series,
    stability_sweep,
    viscosity_sweep,
)
from .expr import ExpressionError, parse_expression
from .norms import orlicz_holder_check

log = logging.getLogger("polybous")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_SOLVER = 0, 1, 2, 3

ALL_CHECKS = ("transport", "energy", "thermal", "gronwall", "regularity", "orlicz", "leray")
PRESETS = ("unit_square", "right_triangle")


class ConfigError(ValueError):
    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class Config:
    # [domain]
    preset: str | None = "unit_square"
    vertices: tuple | None = None
    # [mesh]
    target_h: float | None = None
    divisions: int | None = None
    refinements: int = 0
    # [physics]
    nu: float = 0.0
    t_end: float = 1.0
    dt_max: float = 0.01
    cfl: float = 0.5
    kappa: float = 1.0
    coupling: str = FULL
    # [data]
    omega0: str = "0"
    theta0: str | None = None
    T0: str | None = None
    eta: str | None = None
    S: str | None = None
    # [output]
    directory: str = "out"
    snapshot_times: tuple = ()
    vtk: bool = False
    # [verify]
    checks: tuple = ALL_CHECKS
    p_list: tuple = (2.0, 4.0, 8.0, math.inf)
    transport_tol: float = TRANSPORT_TOL_FACTOR
    energy_c_res: float = ENERGY_C_RES
    thermal_c_res: float = THERMAL_C_RES
    gronwall_C: float = 1.0
    samples: int = 20
    seed: int = 12345
    # [sweep]
    kind: str | None = None
    values: tuple = ()
    profile: str = "sin(pi*x)*sin(pi*y)"
    jobs: int | None = None

    def polygon(self) -> Polygon:
        if self.vertices is not None:
            return Polygon(np.array(self.vertices, dtype=float))
        return preset(self.preset)

    def sim_params(self) -> SimParams:
        return SimParams(nu=self.nu, t_end=self.t_end, dt_max=self.dt_max, cfl=self.cfl,
                         kappa=self.kappa, omega0=self.omega0, theta0=self.theta0, T0=self.T0,
                         eta=self.eta if self.eta is not None else 0.0, S=self.S,
                         coupling=self.coupling, output_times=self.snapshot_times)


# section -> key -> Config field
_SCHEMA = {
    "domain": {"preset": "preset", "vertices": "vertices"},
    "mesh": {"target_h": "target_h", "divisions": "divisions", "refinements": "refinements"},
    "physics": {"nu": "nu", "t_end": "t_end", "dt_max": "dt_max", "cfl": "cfl",
                "kappa": "kappa", "coupling": "coupling"},
    "data": {"omega0": "omega0", "theta0": "theta0", "T0": "T0", "eta": "eta", "S": "S"},
    "output": {"directory": "directory", "snapshot_times": "snapshot_times", "vtk": "vtk"},
    "verify": {"checks": "checks", "p_list": "p_list", "transport_tol": "transport_tol",
               "energy_c_res": "energy_c_res", "thermal_c_res": "thermal_c_res",
               "gronwall_C": "gronwall_C", "samples": "samples", "seed": "seed"},
    "sweep": {"kind": "kind", "values": "values", "profile": "profile", "jobs": "jobs"},
}
_FLOATS = {"target_h", "nu", "t_end", "dt_max", "cfl", "kappa", "transport_tol",
           "energy_c_res", "thermal_c_res", "gronwall_C"}
_INTS = {"divisions", "refinements", "samples", "seed", "jobs"}
_EXPRS = {"omega0", "theta0", "T0", "eta", "S", "profile"}
_FLOAT_LISTS = {"snapshot_times", "values"}


def _number(text, line, integer=False):
    try:
        v = int(text) if integer else float(text)
    except ValueError:
        raise ConfigError(f"expected {'an integer' if integer else 'a number'}, got {text!r}",
                          line) from None
    if not math.isfinite(v):
        raise ConfigError(f"non-finite number {text!r}", line)
    return v


def _split_list(text):
    return [t.strip() for t in text.split(",") if t.strip()]


def _parse_value(name, text, line):
    if name in _FLOATS:
        return _number(text, line)
    if name in _INTS:
        return _number(text, line, integer=True)
    if name in _FLOAT_LISTS:
        return tuple(_number(t, line) for t in _split_list(text))
    if name in _EXPRS:
        try:
            parse_expression(text)
        except ExpressionError as exc:
            raise ConfigError(str(exc), line) from None
        return text
    if name == "vertices":
        pairs = re.findall(r"\(([^()]*)\)", text)
        if not pairs or re.sub(r"\([^()]*\)|[\s,]", "", text):
            raise ConfigError("vertices must look like (x0, y0), (x1, y1), ...", line)
        pts = []
        for p in pairs:
            xy = _split_list(p)
            if len(xy) != 2:
                raise ConfigError(f"vertex ({p}) must have two coordinates", line)
            pts.append((_number(xy[0], line), _number(xy[1], line)))
        return tuple(pts)
    if name == "p_list":
        out = []
        for t in _split_list(text):
            if t.lower() in ("inf", "infinity"):
                out.append(math.inf)
                continue
            try:
                v = float(t)
            except ValueError:
                raise ConfigError(f"bad p value {t!r}", line) from None
            if not (math.isfinite(v) and v >= 2):
                raise ConfigError(f"p values must be >= 2 or inf, got {t!r}", line)
            out.append(v)
        return tuple(out)
    if name == "checks":
        items = tuple(_split_list(text))
        if items == ("all",):
            return ALL_CHECKS
        bad = [c for c in items if c not in ALL_CHECKS]
        if bad:
            raise ConfigError(f"unknown check(s) {bad}; known: {', '.join(ALL_CHECKS)}", line)
        return items
    if name == "vtk":
        low = text.lower()
        if low not in ("on", "off", "true", "false", "yes", "no"):
            raise ConfigError(f"vtk must be on or off, got {text!r}", line)
        return low in ("on", "true", "yes")
    if name == "preset":
        if text not in PRESETS:
            raise ConfigError(f"unknown preset {text!r}; known: {', '.join(PRESETS)}", line)
        return text
    if name == "coupling":
        if text not in (FULL, TRANSPORT_ONLY):
            raise ConfigError(f"coupling must be {FULL} or {TRANSPORT_ONLY}", line)
        return text
    if name == "kind":
        if text not in ("viscosity", "stability"):
            raise ConfigError("sweep kind must be viscosity or stability", line)
        return text
    return text


def _validate(values: dict, lines: dict):
    def fail(msg, *keys):
        line = next((lines[k] for k in keys if k in lines), None)
        raise ConfigError(msg, line)

    if not 0.0 <= values.get("nu", 0.0) <= 1.0:
        fail(f"nu = {values['nu']:g} violates 0 <= nu <= 1", "nu")
    if values.get("kappa", 1.0) != 1.0:
        fail("kappa is fixed to 1", "kappa")
    for k in ("dt_max", "cfl", "target_h"):
        if k in values and not values[k] > 0:
            fail(f"{k} must be positive", k)
    if values.get("t_end", 1.0) < 0:
        fail("t_end must be nonnegative", "t_end")
    if "divisions" in values and values["divisions"] < 1:
        fail("divisions must be >= 1", "divisions")
    if "target_h" in values and "divisions" in values:
        fail("give target_h or divisions, not both", "divisions")
    if values.get("refinements", 0) < 0:
        fail("refinements must be >= 0", "refinements")
    if "vertices" in values and "preset" in values:
        fail("give preset or vertices, not both", "vertices")
    if "theta0" in values and "T0" in values:
        fail("give theta0 or T0, not both", "T0")
    if "eta" in values and "S" in values:
        fail("give eta or S, not both", "S")
    t_end = values.get("t_end", 1.0)
    for t in values.get("snapshot_times", ()):
        if not 0 <= t <= t_end:
            fail(f"snapshot time {t:g} outside [0, t_end]", "snapshot_times")
    if values.get("samples", 1) < 1:
        fail("samples must be >= 1", "samples")
    if values.get("jobs", 1) < 1:
        fail("jobs must be >= 1", "jobs")
    if "values" in values and values["values"]:
        v = values["values"]
        if any(x <= 0 for x in v) or any(a <= b for a, b in zip(v, v[1:])):
            fail("sweep values must be strictly descending positive numbers", "values")
    for k in ("transport_tol", "energy_c_res", "thermal_c_res", "gronwall_C"):
        if k in values and values[k] < 0:
            fail(f"{k} must be nonnegative", k)


def parse_config(text: str) -> Config:
    """Parse and validate a configuration text; errors carry the line number."""
    section = None
    values: dict = {}
    lines: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = re.fullmatch(r"\[\s*([A-Za-z_]+)\s*\]", line)
        if m:
            section = m.group(1)
            if section not in _SCHEMA:
                raise ConfigError(f"unknown section [{section}]", lineno)
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", lineno)
        if section is None:
            raise ConfigError("key outside of any section", lineno)
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in _SCHEMA[section]:
            raise ConfigError(f"unknown key {key!r} in [{section}]", lineno)
        name = _SCHEMA[section][key]
        if name in values:
            raise ConfigError(f"duplicate key {key!r}", lineno)
        if not val:
            raise ConfigError(f"empty value for {key!r}", lineno)
        values[name] = _parse_value(name, val, lineno)
        lines[name] = lineno
    _validate(values, lines)
    if "vertices" in values:
        values.setdefault("preset", None)
    return Config(**values)


def _fmt(v):
    if isinstance(v, bool):
        return "on" if v else "off"
    if isinstance(v, float):
        return "inf" if v == math.inf else repr(v)
    return str(v)


def serialize_config(cfg: Config) -> str:
    """Inverse of :func:`parse_config` (explicit values for every set key)."""
    default = Config()
    out = []
    for section, keys in _SCHEMA.items():
        body = []
        for key, name in keys.items():
            v = getattr(cfg, name)
            if v is None:
                continue
            if name == "preset" and cfg.vertices is not None:
                continue
            if name == "vertices":
                text = ", ".join(f"({x!r}, {y!r})" for x, y in v)
            elif isinstance(v, tuple):
                if not v and v == getattr(default, name):
                    continue
                text = ", ".join(_fmt(x) for x in v)
            else:
                text = _fmt(v)
            body.append(f"{key} = {text}")
        if body:
            out.append(f"[{section}]")
            out += body
            out.append("")
    return "\n".join(out)


# file output ----------------------------------------------------------------

def _atomic_write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="\n") as fh:
            fh.write(text)
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Outputs:
    def __init__(self, root: Path):
        self.root = root
        self.files: list[Path] = []
        self.phases: dict[str, float] = {}

    def write(self, name: str, text: str):
        p = self.root / name
        _atomic_write(p, text)
        self.files.append(p)

    def timed(self, phase):
        outer = self

        class _T:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                outer.phases[phase] = outer.phases.get(phase, 0.0) + time.perf_counter() - self.t0

        return _T()

    def manifest(self, cfg: Config, mesh, command: str, extra=None):
        data = {
            "command": command,
            "version": __version__,
            "config": serialize_config(cfg),
            "mesh": mesh.summary() if mesh is not None else None,
            "wall_clock_s": self.phases,
            "files": [{"name": p.name, "bytes": p.stat().st_size} for p in self.files],
        }
        if extra:
            data.update(extra)
        _atomic_write(self.root / "manifest.json", json.dumps(data, indent=2, default=_jsonable) + "\n")


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    return str(v)


def _build_mesh(cfg: Config):
    poly = cfg.polygon()
    if cfg.divisions is None and cfg.target_h is None:
        return mesh_polygon(poly, divisions=16, refinements=cfg.refinements)
    return mesh_polygon(poly, cfg.target_h, divisions=cfg.divisions, refinements=cfg.refinements)


def _snapshot_vtk(mesh, state, S):
    u, psi, _ = biot_savart(mesh, state.omega, return_psi=True)
    buf = io.StringIO()
    write_vtk(buf, mesh, {"omega": state.omega, "theta": state.theta, "T": state.theta + S,
                          "psi": psi}, {"u": u}, title=f"t = {state.t!r}")
    return buf.getvalue()


def _simulate(cfg, out: _Outputs, mesh):
    with out.timed("run"):
        traj = run(mesh, cfg.sim_params())
    with out.timed("write"):
        out.write("diagnostics.csv", traj.diagnostics.to_csv())
        if cfg.vtk:
            for k, s in enumerate(traj.snapshots):
                out.write(f"snapshot_{k:04d}.vtk", _snapshot_vtk(mesh, s, traj.S))
    return traj


def cmd_mesh(cfg: Config, out_dir: Path) -> int:
    out = _Outputs(out_dir)
    poly = cfg.polygon()
    rep = compute_apertures(poly)
    with out.timed("mesh"):
        mesh = _build_mesh(cfg)
    buf = io.StringIO()
    write_vtk(buf, mesh, title="mesh")
    out.write("mesh.vtk", buf.getvalue())
    out.manifest(cfg, mesh, "mesh", {"max_aperture": rep.max_aperture,
                                     "apertures": list(rep.apertures)})
    s = mesh.summary()
    print(f"mesh: {s['nodes']} nodes, {s['elements']} elements, h = {s['h']:.6g}, "
          f"max aperture = {rep.max_aperture:.6g}")
    return EXIT_OK


def cmd_run(cfg: Config, out_dir: Path) -> int:
    out = _Outputs(out_dir)
    with out.timed("mesh"):
        mesh = _build_mesh(cfg)
    traj = _simulate(cfg, out, mesh)
    out.manifest(cfg, mesh, "run", {"steps": len(traj.diagnostics) - 1})
    print(f"run: {len(traj.diagnostics) - 1} steps to t = {traj.snapshots[-1].t:g}")
    return EXIT_OK


def _random_fields(mesh, rng, n):
    for _ in range(n):
        k = rng.integers(1, 4, size=2)
        a = rng.normal(size=2)
        x, y = mesh.nodes[:, 0], mesh.nodes[:, 1]
        yield a[0] * np.sin(k[0] * np.pi * x + a[1]) * np.cos(k[1] * np.pi * y) \
            + rng.normal(scale=0.1, size=mesh.n_nodes)


def _verify_checks(cfg, mesh, traj):
    """(name, passed, summary) per requested check."""
    results = []
    for check in cfg.checks:
        if check == "transport":
            for p in cfg.p_list:
                tol = lambda t, scale: cfg.transport_tol * (1.0 + scale) * (1.0 + t)  # noqa: E731
                r = check_vorticity_transport_bound(traj, p, tol)
                results.append((f"transport bound p={_fmt(float(p))}", r.passed,
                                f"min margin {r.worst:.3e}"))
        elif check == "energy":
            r = check_energy_identity(traj, cfg.energy_c_res)
            results.append(("energy identity", r.passed,
                            f"average residual {r.average:.3e} vs bound {r.bound:.3e}"))
        elif check == "thermal":
            r = check_thermal_identity(traj, cfg.thermal_c_res)
            results.append(("thermal identity", r.passed,
                            f"average residual {r.average:.3e} vs bound {r.bound:.3e}"))
        elif check == "gronwall":
            r = gronwall_envelope_check(traj, cfg.gronwall_C)
            where = "" if r.first_violation is None else f", first violation t={r.first_violation:g}"
            results.append((f"Gronwall envelope C={cfg.gronwall_C:g}", r.passed,
                            f"calibrated C {r.calibrated_C:.4g}{where}"))
        elif check == "regularity":
            if len(traj.diagnostics) < 2:
                results.append(("regularity series", False, "needs at least one step"))
                continue
            r = regularity_series(traj)
            tops = ", ".join(f"{k} max {v.max():.3e}" for k, v in r.series.items())
            results.append(("regularity series", r.passed, tops))
        elif check == "orlicz":
            rng = np.random.default_rng(cfg.seed)
            fs = list(_random_fields(mesh, rng, 2 * cfg.samples))
            rs = [orlicz_holder_check(mesh, f, g) for f, g in zip(fs[::2], fs[1::2])]
            results.append(("Orlicz-Holder inequality", all(r.passed for r in rs),
                            f"min margin {min(r.margin for r in rs):.3e} over {len(rs)} pairs"))
        elif check == "leray":
            rng = np.random.default_rng(cfg.seed)
            worst = 0.0
            for _ in range(cfg.samples):
                v = rng.normal(size=(mesh.n_elements, 2))
                pv, _, _ = leray_project(mesh, v)
                ppv, _, _ = leray_project(mesh, pv)
                scale = float(np.sqrt(mesh.areas @ (v**2).sum(axis=1)))
                err = float(np.sqrt(mesh.areas @ ((ppv - pv) ** 2).sum(axis=1)))
                worst = max(worst, err / (1e-10 * scale))
            results.append(("Leray idempotence", worst <= 10.0,
                            f"max ||PPv - Pv|| / (tol ||v||) = {worst:.3g}"))
    return results


def cmd_verify(cfg: Config, out_dir: Path) -> int:
    out = _Outputs(out_dir)
    with out.timed("mesh"):
        mesh = _build_mesh(cfg)
    traj = _simulate(cfg, out, mesh)
    with out.timed("verify"):
        results = _verify_checks(cfg, mesh, traj)
    lines = [f"{'PASS' if ok else 'FAIL'} {name}: {msg}" for name, ok, msg in results]
    report = "\n".join(lines) + "\n"
    out.write("verify_report.txt", report)
    ok = all(r[1] for r in results)
    out.manifest(cfg, mesh, "verify", {"passed": ok})
    sys.stdout.write(report)
    return EXIT_OK if ok else EXIT_FAIL


def cmd_sweep(cfg: Config, out_dir: Path, jobs: int | None = None) -> int:
    if cfg.kind is None or not cfg.values:
        raise ConfigError("the sweep command needs [sweep] kind and values")
    out = _Outputs(out_dir)
    with out.timed("mesh"):
        mesh = _build_mesh(cfg)
    jobs = jobs or cfg.jobs or os.cpu_count() or 1
    params = cfg.sim_params()
    with out.timed("sweep"):
        if cfg.kind == "viscosity":
            rep = viscosity_sweep(mesh, params, cfg.values, jobs=jobs)
        else:
            rep = stability_sweep(mesh, params, cfg.values, profile=cfg.profile, jobs=jobs)
    out.write("sweep.csv", rep.to_csv())
    summary = rep.summary()
    out.write("sweep_summary.txt", summary)
    out.manifest(cfg, mesh, "sweep", {"passed": rep.passed})
    sys.stdout.write(summary)
    return EXIT_OK if rep.passed else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="polybous", description=__doc__.split("\n")[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, help_ in (("mesh", "mesh the domain and write mesh.vtk"),
                        ("run", "run a simulation and write diagnostics"),
                        ("verify", "run and apply the estimate checks"),
                        ("sweep", "viscosity or stability sweep")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, type=Path)
        p.add_argument("--out", type=Path, default=None,
                       help="output directory (default: [output] directory)")
        if name == "sweep":
            p.add_argument("--jobs", type=int, default=None)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        text = args.config.read_text()
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = parse_config(text)
        out_dir = args.out if args.out is not None else Path(cfg.directory)
        if args.command == "mesh":
            return cmd_mesh(cfg, out_dir)
        if args.command == "run":
            return cmd_run(cfg, out_dir)
        if args.command == "verify":
            return cmd_verify(cfg, out_dir)
        if getattr(args, "jobs", None) is not None and args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        return cmd_sweep(cfg, out_dir, getattr(args, "jobs", None))
    except (ConfigError, PolygonError, InadmissibleDomainError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SimulationError, SolverError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
