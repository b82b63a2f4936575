"""Vorticity-temperature time stepping for the perturbative Boussinesq system.

State variables are the vorticity ``omega`` and the perturbative temperature
``theta = T - S``, both with homogeneous Dirichlet data.  One step is a
first-order Lie splitting: Biot-Savart velocity, semi-Lagrangian transport,
then implicit diffusion with the coupling sources on the right-hand side.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .domain import TriMesh, locate_points
from .elliptic import (
    CG_TOL,
    SolveStats,
    SolverError,
    biot_savart,
    element_gradient,
    gradient_recover,
    harmonic_lift,
    nodal_average,
    nodal_laplacian,
    pcg,
)
from .expr import Expression, ExpressionError, as_field_function
from .norms import h1_seminorm, lp_norm

__all__ = [
    "FlowState",
    "SimParams",
    "Trajectory",
    "DiagnosticsSeries",
    "SimulationError",
    "DIAGNOSTIC_COLUMNS",
    "initialize",
    "lift_laplacian",
    "velocity_of",
    "cfl_dt",
    "advect_semilagrangian",
    "diffuse_implicit",
    "step",
    "run",
    "reconstruct_temperature",
]

log = logging.getLogger(__name__)

FULL = "full"
TRANSPORT_ONLY = "transport_only"
P_SET = (2, 4, 8, np.inf)


class SimulationError(RuntimeError):
    def __init__(self, message, step_index=None):
        where = "" if step_index is None else f" at step {step_index}"
        super().__init__(f"{message}{where}")
        self.step_index = step_index


@dataclass(frozen=True)
class FlowState:
    t: float
    omega: np.ndarray
    theta: np.ndarray


@dataclass(frozen=True)
class SimParams:
    """Physical and numerical parameters plus closed-form data.

    Data entries (``omega0``, ``theta0``, ``T0``, ``eta``, ``S``) accept a
    number, an expression string, an :class:`Expression` or a callable
    f(x, y).  ``T0`` is converted with theta0 = T0 - S.  Giving ``S`` selects
    the analytic lifting mode (its Laplacian enters the heat equation);
    otherwise S is the discrete harmonic extension of ``eta``.
    """

    nu: float = 0.0
    t_end: float = 1.0
    dt_max: float = 0.01
    cfl: float = 0.5
    kappa: float = 1.0
    omega0: object = 0.0
    theta0: object = None
    T0: object = None
    eta: object = 0.0
    S: object = None
    coupling: str = FULL
    output_times: tuple = ()

    def __post_init__(self):
        if not 0.0 <= self.nu <= 1.0:
            raise ValueError(f"nu = {self.nu} violates 0 <= nu <= 1")
        if self.kappa != 1.0:
            raise ValueError("the diffusivity is fixed to kappa = 1")
        if not self.dt_max > 0.0:
            raise ValueError("dt_max must be positive")
        if not self.t_end >= 0.0:
            raise ValueError("t_end must be nonnegative")
        if not self.cfl > 0.0:
            raise ValueError("cfl must be positive")
        if self.coupling not in (FULL, TRANSPORT_ONLY):
            raise ValueError(f"coupling must be {FULL!r} or {TRANSPORT_ONLY!r}")
        if self.theta0 is not None and self.T0 is not None:
            raise ValueError("give theta0 or T0, not both")
        times = tuple(sorted({float(t) for t in self.output_times}))
        if any(t < 0 or t > self.t_end for t in times):
            raise ValueError("output times must lie in [0, t_end]")
        object.__setattr__(self, "output_times", times)

    @property
    def lifting(self) -> str:
        return "analytic" if self.S is not None else "harmonic"

    def snapshot_times(self) -> tuple:
        return tuple(sorted({0.0, float(self.t_end), *self.output_times}))


def _sample(mesh, data, name):
    fn = as_field_function(data)
    if fn is None:
        return np.zeros(mesh.n_nodes)
    try:
        vals = np.asarray(fn(mesh.nodes[:, 0], mesh.nodes[:, 1]), dtype=float)
        vals = np.broadcast_to(vals, (mesh.n_nodes,)).copy()
    except ExpressionError as exc:
        raise ValueError(f"cannot evaluate {name}: {exc}") from None
    except Exception as exc:  # user callables
        raise ValueError(f"cannot evaluate {name}: {exc}") from exc
    if not np.all(np.isfinite(vals)):
        raise ValueError(f"{name} is not finite on the mesh")
    return vals


def initialize(mesh: TriMesh, params: SimParams):
    """Initial state (boundary values forced to 0) and the lifting S."""
    if params.S is not None:
        S = _sample(mesh, params.S, "S")
    else:
        eta = _sample(mesh, params.eta, "eta")
        S = harmonic_lift(mesh, eta)
    omega = _sample(mesh, params.omega0, "omega0")
    if params.T0 is not None:
        theta = _sample(mesh, params.T0, "T0") - S
    else:
        theta = _sample(mesh, params.theta0, "theta0")
    omega[mesh.boundary_nodes] = 0.0
    theta[mesh.boundary_nodes] = 0.0
    return FlowState(0.0, omega, theta), S


def lift_laplacian(mesh: TriMesh, params: SimParams) -> np.ndarray:
    """Nodal Delta S: identically 0 for the harmonic lift, exact for analytic S."""
    if params.S is None:
        return np.zeros(mesh.n_nodes)
    fn = as_field_function(params.S)
    if not isinstance(fn, Expression):
        raise ValueError("analytic lifting needs S as an expression to form its Laplacian")
    return _sample(mesh, fn.laplacian(), "lap S")


def velocity_of(mesh: TriMesh, state: FlowState) -> np.ndarray:
    return biot_savart(mesh, state.omega)


def cfl_dt(mesh: TriMesh, u, params: SimParams, t: float = 0.0, t_stop: float | None = None):
    """min(dt_max, cfl h / (max |u| + 1e-12)), clipped to the next stop time."""
    u = np.asarray(u, dtype=float)
    umax = float(np.sqrt((u**2).sum(axis=1)).max(initial=0.0))
    dt = min(params.dt_max, params.cfl * mesh.h / (umax + 1e-12))
    stop = params.t_end if t_stop is None else min(t_stop, params.t_end)
    return min(dt, stop - t)


def advect_semilagrangian(mesh: TriMesh, f, u, dt, outside_value: float | None = 0.0):
    """One-step backtracking transport of a nodal field.

    The foot of node x is x - dt u_e with e the lowest-index element
    containing x.  Feet outside the domain take ``outside_value``; with
    ``outside_value=None`` they are moved to the nearest boundary point and
    interpolated there.  Boundary nodes are reset to ``outside_value`` (or
    keep their value when it is None).
    """
    f = np.asarray(f, dtype=float)
    if dt == 0.0 or not np.any(u):
        return f.copy()
    owner = mesh.node_owner
    feet = mesh.nodes - dt * np.asarray(u)[owner]
    elems, w = locate_points(mesh, feet, start=owner)
    out = np.empty(mesh.n_nodes)
    hit = elems >= 0
    out[hit] = np.einsum("ni,ni->n", w[hit], f[mesh.elements[elems[hit]]])
    miss = ~hit
    if np.any(miss):
        if outside_value is None:
            proj = mesh.polygon.nearest_boundary_point(feet[miss])
            e2, w2 = locate_points(mesh, proj, start=owner[miss])
            out[miss] = np.einsum("ni,ni->n", w2, f[mesh.elements[e2]])
        else:
            out[miss] = outside_value
    if outside_value is not None:
        out[mesh.boundary_nodes] = outside_value
    else:
        out[mesh.boundary_nodes] = f[mesh.boundary_nodes]
    return out


_DIFFUSION_CACHE: dict = {}


def _diffusion_matrix(mesh: TriMesh, c: float):
    key = (id(mesh), c)
    hit = _DIFFUSION_CACHE.get(key)
    if hit is not None and hit[0] is mesh:
        return hit[1]
    inner = mesh.interior_nodes
    k = mesh.stiffness[inner][:, inner]
    a = (k * c).tocsr()
    a.setdiag(a.diagonal() + mesh.lumped_mass[inner])
    if len(_DIFFUSION_CACHE) > 32:
        _DIFFUSION_CACHE.clear()
    _DIFFUSION_CACHE[key] = (mesh, a)
    return a


def diffuse_implicit(mesh: TriMesh, f, coeff, dt, source=None, tol=CG_TOL,
                     return_stats=False):
    """Backward Euler (M + dt coeff K) f_new = M (f + dt source), f_new = 0 on the boundary."""
    if coeff < 0:
        raise ValueError("diffusion coefficient must be nonnegative")
    f = np.asarray(f, dtype=float)
    rhs = f if source is None else f + dt * np.asarray(source, dtype=float)
    out = np.zeros(mesh.n_nodes)
    inner = mesh.interior_nodes
    if coeff == 0.0 or dt == 0.0:
        out[inner] = rhs[inner]
        stats = SolveStats(0, 0.0)
    else:
        a = _diffusion_matrix(mesh, dt * coeff)
        out[inner], stats = pcg(a, mesh.lumped_mass[inner] * rhs[inner], tol=tol)
    return (out, stats) if return_stats else out


def _vorticity_source(mesh, theta, S, params):
    if params.coupling == TRANSPORT_ONLY:
        return np.zeros(mesh.n_nodes)
    return gradient_recover(mesh, theta + S)[:, 0]


def _heat_source(mesh, u, S, lap_S):
    u_nodes = nodal_average(mesh, u)
    grad_S = gradient_recover(mesh, S)
    return -(u_nodes * grad_S).sum(axis=1) + lap_S


def _advance(mesh, state, u, dt, S, lap_S, params):
    w_src = _vorticity_source(mesh, state.theta, S, params)
    omega = advect_semilagrangian(mesh, state.omega, u, dt)
    omega = diffuse_implicit(mesh, omega, params.nu, dt, w_src)
    theta = advect_semilagrangian(mesh, state.theta, u, dt)
    theta = diffuse_implicit(mesh, theta, 1.0, dt, _heat_source(mesh, u, S, lap_S))
    omega[mesh.boundary_nodes] = 0.0
    theta[mesh.boundary_nodes] = 0.0
    return FlowState(state.t + dt, omega, theta)


def step(mesh: TriMesh, state: FlowState, S, params: SimParams, lap_S=None,
         t_stop: float | None = None) -> FlowState:
    """Advance one CFL-limited step."""
    lap_S = lift_laplacian(mesh, params) if lap_S is None else lap_S
    u = velocity_of(mesh, state)
    dt = cfl_dt(mesh, u, params, state.t, t_stop)
    new = _advance(mesh, state, u, dt, np.asarray(S, dtype=float), lap_S, params)
    if not (np.all(np.isfinite(new.omega)) and np.all(np.isfinite(new.theta))):
        raise SimulationError("non-finite values")
    return new


def reconstruct_temperature(state: FlowState, S) -> np.ndarray:
    S = np.asarray(S, dtype=float)
    if S.shape != state.theta.shape:
        raise ValueError("theta and S live on different meshes")
    return state.theta + S


def _pname(p):
    return "inf" if p == np.inf else str(int(p))


DIAGNOSTIC_COLUMNS = (
    ("t", "dt", "u_L2", "grad_u_L2")
    + tuple(f"omega_L{_pname(p)}" for p in P_SET)
    + ("theta_L2", "grad_theta_L2", "lap_theta_L2")
    + tuple(f"curl_f_L{_pname(p)}" for p in P_SET)
    + ("kinetic_residual", "thermal_residual", "transport_margin")
    + ("buoyancy_work", "heat_work", "theta_t_L2", "grad_theta_t_L2", "grad_lap_theta_L2")
)


class DiagnosticsSeries:
    """Per-step table of norms, energy residuals and inequality margins."""

    columns = DIAGNOSTIC_COLUMNS

    def __init__(self, rows=None):
        self._rows = [] if rows is None else [tuple(map(float, r)) for r in rows]

    def append(self, row: dict):
        self._rows.append(tuple(float(row[c]) for c in self.columns))

    def __len__(self):
        return len(self._rows)

    @property
    def data(self) -> np.ndarray:
        return np.array(self._rows, dtype=float).reshape(len(self._rows), len(self.columns))

    def __getitem__(self, name) -> np.ndarray:
        return self.data[:, self.columns.index(name)]

    def to_csv(self, fh=None) -> str:
        lines = [",".join(self.columns)]
        lines += [",".join(f"{v:.16e}" for v in row) for row in self._rows]
        text = "\n".join(lines) + "\n"
        if fh is not None:
            fh.write(text)
        return text

    @classmethod
    def from_csv(cls, text: str) -> "DiagnosticsSeries":
        lines = [ln for ln in text.strip().splitlines() if ln]
        header = tuple(lines[0].split(","))
        if header != cls.columns:
            raise ValueError("unexpected diagnostics header")
        return cls([[float(v) for v in ln.split(",")] for ln in lines[1:]])


@dataclass(frozen=True)
class Trajectory:
    mesh: TriMesh
    params: SimParams
    S: np.ndarray
    lap_S: np.ndarray
    snapshots: tuple
    diagnostics: DiagnosticsSeries = field(repr=False)

    @property
    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.snapshots])


class _Recorder:
    """Computes one diagnostics row per state; residual columns refer to the
    interval ending at that state, evaluated with left-endpoint quantities."""

    def __init__(self, mesh, params, S, lap_S):
        self.mesh, self.params, self.S, self.lap_S = mesh, params, S, lap_S
        self.series = DiagnosticsSeries()
        self.prev = None
        self.forcing_sum = 0.0
        self.omega0_inf = None

    def record(self, state, u):
        mesh, S = self.mesh, self.S
        m = mesh.lumped_mass
        row = {"t": state.t}
        row["u_L2"] = float(np.sqrt(mesh.areas @ (u**2).sum(axis=1)))
        u_nodes = nodal_average(mesh, u)
        gu = np.concatenate([element_gradient(mesh, u_nodes[:, 0]),
                             element_gradient(mesh, u_nodes[:, 1])], axis=1)
        row["grad_u_L2"] = float(np.sqrt(mesh.areas @ (gu**2).sum(axis=1)))
        for p in P_SET:
            row[f"omega_L{_pname(p)}"] = lp_norm(mesh, state.omega, p)
        row["theta_L2"] = lp_norm(mesh, state.theta, 2)
        row["grad_theta_L2"] = h1_seminorm(mesh, state.theta)
        lap = nodal_laplacian(mesh, state.theta)
        row["lap_theta_L2"] = lp_norm(mesh, lap, 2)
        row["grad_lap_theta_L2"] = h1_seminorm(mesh, lap)
        src = _vorticity_source(mesh, state.theta, S, self.params)
        for p in P_SET:
            row[f"curl_f_L{_pname(p)}"] = lp_norm(mesh, src, p)
        tS = (state.theta + S)[mesh.elements].mean(axis=1)
        row["buoyancy_work"] = float(mesh.areas @ (tS * u[:, 1]))
        heat = _heat_source(mesh, u, S, self.lap_S)
        row["heat_work"] = float(m @ (heat * state.theta))

        if self.prev is None:
            self.omega0_inf = row["omega_Linf"]
            row.update(dt=0.0, kinetic_residual=0.0, thermal_residual=0.0,
                       theta_t_L2=0.0, grad_theta_t_L2=0.0)
        else:
            prow, ptheta = self.prev
            dt = state.t - prow["t"]
            row["dt"] = dt
            row["kinetic_residual"] = (
                (0.5 * row["u_L2"] ** 2 - 0.5 * prow["u_L2"] ** 2) / dt
                + self.params.nu * prow["grad_u_L2"] ** 2 - prow["buoyancy_work"])
            row["thermal_residual"] = (
                (0.5 * row["theta_L2"] ** 2 - 0.5 * prow["theta_L2"] ** 2) / dt
                + prow["grad_theta_L2"] ** 2 - prow["heat_work"])
            dtheta = (state.theta - ptheta) / dt
            row["theta_t_L2"] = lp_norm(mesh, dtheta, 2)
            row["grad_theta_t_L2"] = h1_seminorm(mesh, dtheta)
            self.forcing_sum += dt * prow["curl_f_Linf"]
        row["transport_margin"] = self.omega0_inf + self.forcing_sum - row["omega_Linf"]
        self.series.append(row)
        self.prev = (row, state.theta)


def run(mesh: TriMesh, params: SimParams) -> Trajectory:
    """Integrate from t = 0 to t_end; snapshots at the output times, diagnostics every step."""
    state, S = initialize(mesh, params)
    lap_S = lift_laplacian(mesh, params)
    stops = params.snapshot_times()
    snapshots = [state]
    rec = _Recorder(mesh, params, S, lap_S)
    k = 0
    nxt = 1
    while True:
        try:
            u = velocity_of(mesh, state)
        except SolverError as exc:
            raise SimulationError(f"Biot-Savart solve failed: {exc}", k) from exc
        rec.record(state, u)
        if nxt >= len(stops):
            break
        target = stops[nxt]
        dt = cfl_dt(mesh, u, params, state.t, target)
        try:
            state = _advance(mesh, state, u, dt, S, lap_S, params)
        except SolverError as exc:
            raise SimulationError(f"diffusion solve failed: {exc}", k + 1) from exc
        k += 1
        if not (np.all(np.isfinite(state.omega)) and np.all(np.isfinite(state.theta))):
            raise SimulationError("non-finite values", k)
        if state.t >= target - 1e-14 * max(1.0, target):
            state = replace(state, t=target)
            snapshots.append(state)
            nxt += 1
    log.debug("run finished: %d steps, t = %g", k, state.t)
    return Trajectory(mesh, params, S, lap_S, tuple(snapshots), rec.series)
