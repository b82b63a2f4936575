"""Runtime checks of the a-priori estimates, energy identities and limit
studies, all evaluated on recorded trajectories.

Every check is a pure function of a :class:`Trajectory` (or of the runs a
sweep performs), so repeating it gives identical output.
"""

from __future__ import annotations

import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .boussinesq import SimParams, Trajectory, run
from .domain import TriMesh
from .elliptic import biot_savart
from .expr import Expression, as_field_function
from .norms import h1_seminorm, lp_norm, w2p_norm

__all__ = [
    "ENERGY_C_RES",
    "THERMAL_C_RES",
    "TransportReport",
    "IdentityReport",
    "GronwallReport",
    "RegularityReport",
    "SweepReport",
    "check_vorticity_transport_bound",
    "check_energy_identity",
    "check_thermal_identity",
    "gronwall_envelope_check",
    "lift_h2_norm_sq",
    "regularity_series",
    "viscosity_sweep",
    "stability_sweep",
]

# Regression constants for the identity checks, frozen from the benchmark
# (unit square, h = 1/32 and 1/64, dt = 1/n): observed ratios
# average / (dt + h) were 1.83e-3 / 1.77e-3 (kinetic) and 1.65 / 1.60
# (thermal); 25% headroom on the larger one.
ENERGY_C_RES = 2.3e-3
THERMAL_C_RES = 2.1

TRANSPORT_TOL_FACTOR = 0.02
BETA_TOL = 0.05
DEFAULT_PROFILE = "sin(pi*x)*sin(pi*y)"


def _pname(p):
    return "inf" if p == np.inf or p == "inf" else str(int(p))


def _require(traj: Trajectory):
    d = getattr(traj, "diagnostics", None)
    if d is None or len(d) == 0:
        raise ValueError("trajectory carries no diagnostics")
    return d


@dataclass(frozen=True)
class TransportReport:
    p: float
    times: np.ndarray
    margins: np.ndarray
    tolerances: np.ndarray

    @property
    def passed(self) -> bool:
        return bool(np.all(self.margins >= -self.tolerances))

    @property
    def worst(self) -> float:
        return float(self.margins.min())


def check_vorticity_transport_bound(traj: Trajectory, p=np.inf, tol=None) -> TransportReport:
    """margin(t) = ||w0||_p + sum dt ||curl f||_p - ||w(t)||_p, left endpoint rule.

    ``tol`` is a callable tol(t, scale) or a number; the default is
    0.02 (1 + ||w0||_p)(1 + t).
    """
    if p != np.inf and p < 2:
        raise ValueError("p must be >= 2")
    d = _require(traj)
    name = _pname(p)
    w = d[f"omega_L{name}"]
    f = d[f"curl_f_L{name}"]
    t = d["t"]
    dt = d["dt"]
    forcing = np.concatenate([[0.0], np.cumsum(dt[1:] * f[:-1])])
    margins = w[0] + forcing - w
    scale = w[0]
    if tol is None:
        tols = TRANSPORT_TOL_FACTOR * (1.0 + scale) * (1.0 + t)
    elif callable(tol):
        tols = np.asarray([tol(ti, scale) for ti in t], dtype=float)
    else:
        tols = np.full_like(t, float(tol))
    return TransportReport(float(p), t, margins, tols)


@dataclass(frozen=True)
class IdentityReport:
    name: str
    times: np.ndarray
    residuals: np.ndarray
    average: float
    bound: float

    @property
    def passed(self) -> bool:
        return bool(self.average <= self.bound)


def _identity(traj, column, c_res, name):
    d = _require(traj)
    t, dt, r = d["t"], d["dt"], d[column]
    span = t[-1] - t[0]
    avg = float(np.sum(dt * np.abs(r)) / span) if span > 0 else 0.0
    dt_max = float(dt.max(initial=0.0))
    return IdentityReport(name, t[1:], r[1:], avg, c_res * (dt_max + traj.mesh.h))


def check_energy_identity(traj: Trajectory, c_res: float = ENERGY_C_RES) -> IdentityReport:
    """Residual of d/dt 1/2||u||^2 + nu ||grad u||^2 = <theta + S, u_2>.

    Passes when its L1-in-time average is at most c_res (max dt + h).
    """
    return _identity(traj, "kinetic_residual", c_res, "energy")


def check_thermal_identity(traj: Trajectory, c_res: float = THERMAL_C_RES) -> IdentityReport:
    """Residual of d/dt 1/2||theta||^2 + ||grad theta||^2 = -<u.grad S, theta> + <lap S, theta>."""
    return _identity(traj, "thermal_residual", c_res, "thermal")


def lift_h2_norm_sq(traj: Trajectory) -> float:
    """Discrete ||S||_{H^2}^2 with recovered derivatives."""
    return w2p_norm(traj.mesh, traj.S, 2) ** 2


@dataclass(frozen=True)
class GronwallReport:
    passed: bool
    first_violation: float | None
    calibrated_C: float
    C: float


def _energy(traj):
    d = _require(traj)
    return d["t"], d["u_L2"] ** 2 + d["theta_L2"] ** 2


def _envelope(t, e0, s, C):
    with np.errstate(over="ignore"):
        return np.exp(C * t * (s + 1.0)) * (e0 + C * t * s)


def gronwall_envelope_check(traj: Trajectory, C: float, rtol: float = 1e-12,
                            s_sq: float | None = None) -> GronwallReport:
    """||u||^2 + ||theta||^2 <= exp(C t (s + 1)) (E0 + C t s), s = ||S||_{H^2}^2.

    ``rtol`` absorbs rounding in the comparison.  The calibrated constant is
    the smallest C (found by bisection) for which the run passes; it is 0
    when the energy never exceeds its initial value.
    """
    if C < 0:
        raise ValueError("C must be nonnegative")
    t, e = _energy(traj)
    s = lift_h2_norm_sq(traj) if s_sq is None else s_sq
    e0 = e[0]
    slack = rtol * max(e0, float(e.max()), 1e-300)

    def ok(c):
        return e <= _envelope(t, e0, s, c) + slack

    good = ok(C)
    first = None if good.all() else float(t[np.argmin(good)])
    if ok(0.0).all():
        cal = 0.0
    else:
        lo, hi = 0.0, 1.0
        while not ok(hi).all():
            lo, hi = hi, 2.0 * hi
            if hi > 1e12:
                hi = math.inf
                break
        while math.isfinite(hi) and hi - lo > 1e-10 * hi:
            mid = 0.5 * (lo + hi)
            if ok(mid).all():
                hi = mid
            else:
                lo = mid
        cal = hi
    return GronwallReport(bool(good.all()), first, cal, float(C))


@dataclass(frozen=True)
class RegularityReport:
    times: np.ndarray
    series: dict

    def bounded(self, name) -> bool:
        t, v = self.times, self.series[name]
        half = t[-1] / 2.0
        k = int(np.searchsorted(t, half - 1e-12 * max(1.0, half)))
        k = min(k, len(t) - 1)
        return bool(v[k:].max() <= 2.0 * v[k])

    @property
    def passed(self) -> bool:
        return all(self.bounded(n) for n in self.series)


def regularity_series(traj: Trajectory) -> RegularityReport:
    """||theta_t||, int ||grad theta_t||^2, ||lap theta|| and int ||grad lap theta||^2.

    theta_t is the backward difference over each step; integrals accumulate
    step by step.
    """
    d = _require(traj)
    if len(d) < 2:
        raise ValueError("regularity series need at least two recorded steps")
    dt = d["dt"]
    gtt = d["grad_theta_t_L2"]
    gl = d["grad_lap_theta_L2"]
    series = {
        "theta_t_L2": d["theta_t_L2"],
        "int_grad_theta_t_sq": np.cumsum(dt * gtt**2),
        "lap_theta_L2": d["lap_theta_L2"],
        "int_grad_lap_theta_sq": np.concatenate([[0.0], np.cumsum(dt[1:] * gl[:-1] ** 2)]),
    }
    return RegularityReport(d["t"], series)


# sweeps -------------------------------------------------------------------

@dataclass
class SweepReport:
    kind: str
    grid: tuple
    columns: tuple
    rows: list
    rates: dict = field(default_factory=dict)
    checks: dict = field(default_factory=dict)
    failed: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return not self.failed and all(self.checks.values())

    def column(self, name) -> np.ndarray:
        k = self.columns.index(name)
        return np.array([r[k] for r in self.rows], dtype=float)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(self.columns) + "\n")
        for r in self.rows:
            buf.write(",".join(f"{v:.16e}" for v in r) + "\n")
        return buf.getvalue()

    def summary(self) -> str:
        lines = [f"{self.kind} sweep over {', '.join(f'{g:g}' for g in self.grid)}"]
        for k, v in self.rates.items():
            if np.ndim(v):
                v = " ".join(f"{x:.4g}" for x in v)
            else:
                v = f"{v:.4g}"
            lines.append(f"  {k}: {v}")
        for k, ok in self.checks.items():
            lines.append(f"{'PASS' if ok else 'FAIL'} {k}")
        for g, msg in self.failed.items():
            lines.append(f"FAIL member {g:g}: {msg}")
        return "\n".join(lines) + "\n"


def _with_times(params: SimParams, n_out=10) -> SimParams:
    if params.output_times:
        return params
    times = tuple(float(t) for t in np.linspace(0.0, params.t_end, n_out + 1)[1:])
    return replace(params, output_times=times)


def _run_member(args):
    mesh, params = args
    try:
        return run(mesh, params)
    except Exception as exc:  # reported, the sweep continues
        return exc


def _run_all(mesh, plist, jobs):
    tasks = [(mesh, p) for p in plist]
    if jobs and jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_run_member, tasks))
    return [_run_member(t) for t in tasks]


def _diff_norms(a: Trajectory, b: Trajectory):
    """Per snapshot ||u_a - u_b||_{L2}, ||theta_a - theta_b||_{L2}, ||grad(theta_a - theta_b)||_{L2}."""
    mesh = a.mesh
    out = []
    for sa, sb in zip(a.snapshots, b.snapshots):
        du = biot_savart(mesh, sa.omega - sb.omega)
        dth = sa.theta - sb.theta
        out.append((float(np.sqrt(mesh.areas @ (du**2).sum(axis=1))),
                    lp_norm(mesh, dth, 2), h1_seminorm(mesh, dth)))
    return np.array(out).reshape(-1, 3)


def _loglog_slope(x, y):
    x, y = np.asarray(x, float), np.asarray(y, float)
    if np.any(x <= 0) or np.any(y <= 0):
        return float("nan")
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


def _check_descending(values, what):
    v = [float(x) for x in values]
    if not v or any(x <= 0 for x in v) or any(a <= b for a, b in zip(v, v[1:])):
        raise ValueError(f"{what} must be strictly descending positive values")
    return tuple(v)


def viscosity_sweep(mesh: TriMesh, params_base: SimParams, nu_list, jobs: int = 1,
                    gronwall_C: float | None = None) -> SweepReport:
    """Compare runs at each nu with the nu = 0 run at shared output times.

    e(nu) = sup_t sqrt(||u_nu - u_0||^2 + ||theta_nu - theta_0||^2); both parts
    are reported.  Passes when e is strictly decreasing along ``nu_list`` with
    log-log slope > 0.3, and, when ``gronwall_C`` is given, when every member
    satisfies that Gronwall envelope.
    """
    grid = _check_descending(nu_list, "nu_list")
    base = _with_times(params_base)
    runs = _run_all(mesh, [replace(base, nu=0.0)] + [replace(base, nu=nu) for nu in grid], jobs)
    ref = runs[0]
    columns = ("nu", "e", "e_u", "e_theta", "calibrated_C")
    rep = SweepReport("viscosity", grid, columns, [])
    if isinstance(ref, Exception):
        rep.failed[0.0] = str(ref)
        rep.checks["reference run"] = False
        return rep
    members = [(0.0, ref)] + list(zip(grid, runs[1:]))
    env_ok = []
    e_vals = []
    for nu, tr in members:
        if isinstance(tr, Exception):
            rep.failed[nu] = str(tr)
            continue
        dn = _diff_norms(tr, ref)
        e = float(np.sqrt(dn[:, 0] ** 2 + dn[:, 1] ** 2).max())
        g = gronwall_envelope_check(tr, gronwall_C or 0.0)
        if gronwall_C is not None:
            env_ok.append(g.passed)
        rep.rows.append((nu, e, float(dn[:, 0].max()), float(dn[:, 1].max()), g.calibrated_C))
        if nu > 0:
            e_vals.append((nu, e))
    if len(e_vals) == len(grid):
        es = np.array([e for _, e in e_vals])
        rep.rates["slope"] = _loglog_slope(grid, es) if np.all(es > 0) else float("nan")
        rep.checks["e strictly decreasing"] = bool(np.all(np.diff(es) < 0)) or bool(np.all(es == 0))
        rep.checks["log-log slope > 0.3"] = bool(rep.rates["slope"] > 0.3) or bool(np.all(es == 0))
    if gronwall_C is not None:
        rep.checks[f"Gronwall envelope C = {gronwall_C:.4g}"] = all(env_ok)
    return rep


def _perturbed(omega0, delta, profile):
    base = as_field_function(omega0)
    prof = as_field_function(profile)
    if delta == 0.0:
        return omega0
    if isinstance(base, Expression) and isinstance(prof, Expression):
        return f"({base.text}) + ({delta!r})*({prof.text})"
    return lambda x, y: base(x, y) + delta * prof(x, y)


def stability_sweep(mesh: TriMesh, params_base: SimParams, delta_list, profile=DEFAULT_PROFILE,
                    jobs: int = 1) -> SweepReport:
    """Perturb omega0 by delta * profile and track Y = ||du||^2 + ||grad dtheta||^2.

    Checks: Y at delta = 0 is identically 0; at every output time Y decreases
    with delta; sup_t Y drops by at least 2x per halving of delta; the fitted
    exponents beta(t) in log Y(t) ~ beta log Y(0) lie in (0, 1 + 0.05].
    """
    grid = _check_descending(delta_list, "delta_list")
    base = _with_times(params_base)
    plist = [base, replace(base, omega0=_perturbed(base.omega0, 0.0, profile))]
    plist += [replace(base, omega0=_perturbed(base.omega0, d, profile)) for d in grid]
    runs = _run_all(mesh, plist, jobs)
    rep = SweepReport("stability", grid, ("delta", "Y0", "sup_Y"), [])
    ref = runs[0]
    if isinstance(ref, Exception):
        rep.failed[0.0] = str(ref)
        rep.checks["reference run"] = False
        return rep
    times = np.array([s.t for s in ref.snapshots])
    rep.columns = rep.columns + tuple(f"Y(t={t:g})" for t in times)
    ys = {}
    for d, tr in zip((0.0,) + grid, runs[1:]):
        if isinstance(tr, Exception):
            rep.failed[d] = str(tr)
            continue
        dn = _diff_norms(tr, ref)
        y = dn[:, 0] ** 2 + dn[:, 2] ** 2
        ys[d] = y
        rep.rows.append((d, float(y[0]), float(y.max()), *map(float, y)))
    if 0.0 in ys:
        rep.checks["Y = 0 at delta = 0"] = bool(np.all(ys[0.0] == 0.0))
    if len(ys) == len(grid) + 1:
        Y = np.array([ys[d] for d in grid])  # rows: descending delta
        sup = Y.max(axis=1)
        rep.checks["Y decreasing in delta at every time"] = bool(np.all(np.diff(Y, axis=0) <= 0))
        rep.checks["sup Y drops >= 2x per halving"] = bool(np.all(sup[1:] * 2.0 <= sup[:-1]))
        betas = np.array([_loglog_slope(Y[:, 0], Y[:, k]) for k in range(len(times))])
        rep.rates["beta(t)"] = betas
        rep.rates["sup ratio per halving"] = sup[:-1] / sup[1:]
        rep.checks["beta(t) in (0, 1 + 0.05]"] = bool(np.all((betas > 0) & (betas <= 1 + BETA_TOL)))
    return rep
