"""P1 Galerkin realisations of the Dirichlet solution operator, the
Biot-Savart law u = grad^perp(psi), the boundary lifting, the Leray
projection, and nodal derivative recovery.

Fields are plain numpy arrays: nodal scalars ``(n_nodes,)``, per-element
vectors ``(n_elements, 2)``, nodal tensors ``(n_nodes, 2, 2)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .domain import TriMesh

__all__ = [
    "SolveStats",
    "SolverError",
    "pcg",
    "dirichlet_poisson_solve",
    "biot_savart",
    "streamfunction",
    "harmonic_lift",
    "leray_project",
    "element_gradient",
    "gradient_recover",
    "hessian_recover",
    "discrete_divergence",
    "boundary_normal_flux",
    "nodal_laplacian",
    "nodal_average",
    "boundary_values",
]

CG_TOL = 1e-10


@dataclass(frozen=True)
class SolveStats:
    iterations: int
    residual: float


class SolverError(RuntimeError):
    def __init__(self, message, stats: SolveStats):
        super().__init__(f"{message} (iterations={stats.iterations}, residual={stats.residual:.3e})")
        self.stats = stats


def pcg(A, b, x0=None, tol=CG_TOL, maxiter=None, project_constants=False):
    """Jacobi-preconditioned conjugate gradients to relative residual ``tol``.

    With ``project_constants`` the constant vector is removed from the
    residual and search directions every sweep, which solves singular
    Neumann systems whose right-hand side sums to zero.
    """
    n = len(b)
    maxiter = 10 * n if maxiter is None else maxiter
    dinv = 1.0 / A.diagonal()

    def proj(v):
        return v - v.mean() if project_constants else v

    b = proj(np.asarray(b, dtype=float))
    bnorm = np.linalg.norm(b)
    if not np.isfinite(bnorm):
        raise SolverError("right-hand side is not finite", SolveStats(0, math.inf))
    if bnorm == 0.0:
        return np.zeros(n), SolveStats(0, 0.0)
    x = np.zeros(n) if x0 is None else proj(np.array(x0, dtype=float))
    r = proj(b - A @ x)
    z = proj(dinv * r)
    p = z.copy()
    rz = r @ z
    res = np.linalg.norm(r) / bnorm
    it = 0
    while res > tol:
        if it >= maxiter:
            raise SolverError("conjugate gradients did not converge", SolveStats(it, res))
        Ap = A @ p
        alpha = rz / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        r = proj(r)
        z = proj(dinv * r)
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
        it += 1
        res = np.linalg.norm(r) / bnorm
        if not np.isfinite(res):
            raise SolverError("conjugate gradients broke down", SolveStats(it, res))
    return proj(x), SolveStats(it, float(res))


@lru_cache(maxsize=16)
def _dirichlet_blocks(mesh: TriMesh):
    k = mesh.stiffness
    inner = mesh.interior_nodes
    bnd = np.nonzero(mesh.boundary_nodes)[0]
    kii = k[inner][:, inner].tocsr()
    kib = k[inner][:, bnd].tocsr()
    return inner, bnd, kii, kib


def boundary_values(mesh: TriMesh, g) -> np.ndarray:
    """Nodal array that is ``g`` on boundary nodes and 0 inside.

    ``g`` may be a scalar, a full nodal array or a callable f(x, y).
    """
    out = np.zeros(mesh.n_nodes)
    bnd = mesh.boundary_nodes
    if g is None:
        return out
    if callable(g):
        out[bnd] = g(mesh.nodes[bnd, 0], mesh.nodes[bnd, 1])
    else:
        g = np.asarray(g, dtype=float)
        out[bnd] = g if g.ndim == 0 else g[bnd]
    if not np.all(np.isfinite(out)):
        raise ValueError("boundary data must be finite")
    return out


def dirichlet_poisson_solve(mesh: TriMesh, f, g=None, tol=CG_TOL, maxiter=None, x0=None):
    """Solve -lap F = f, F = g on the boundary; returns ``(F, SolveStats)``.

    The load uses the lumped mass, consistent with nodal quadrature.
    """
    f = np.broadcast_to(np.asarray(f, dtype=float), (mesh.n_nodes,))
    if not np.all(np.isfinite(f)):
        raise ValueError("source must be finite")
    inner, bnd, kii, kib = _dirichlet_blocks(mesh)
    gb = boundary_values(mesh, g)
    rhs = (mesh.lumped_mass * f)[inner] - kib @ gb[bnd]
    x, stats = pcg(kii, rhs, x0=None if x0 is None else np.asarray(x0)[inner],
                   tol=tol, maxiter=maxiter)
    F = gb.copy()
    F[inner] = x
    return F, stats


def element_gradient(mesh: TriMesh, F) -> np.ndarray:
    """Exact gradient of the P1 interpolant, one 2-vector per element."""
    F = np.asarray(F, dtype=float)
    return np.einsum("eid,ei->ed", mesh.basis_gradients, F[mesh.elements])


def streamfunction(mesh: TriMesh, omega, tol=CG_TOL):
    return dirichlet_poisson_solve(mesh, omega, None, tol=tol)


def biot_savart(mesh: TriMesh, omega, tol=CG_TOL, return_psi=False):
    """Velocity u = (d_y psi, -d_x psi) with -lap psi = omega, psi = 0 on the boundary."""
    psi, stats = streamfunction(mesh, omega, tol=tol)
    g = element_gradient(mesh, psi)
    u = np.stack([g[:, 1], -g[:, 0]], axis=1)
    return (u, psi, stats) if return_psi else u


def harmonic_lift(mesh: TriMesh, eta, tol=CG_TOL) -> np.ndarray:
    """Discrete harmonic extension S of boundary data ``eta``."""
    S, _ = dirichlet_poisson_solve(mesh, 0.0, eta, tol=tol)
    return S


def discrete_divergence(mesh: TriMesh, v) -> np.ndarray:
    """Weak divergence per node: -(v, grad phi_i), i.e. the outward patch flux."""
    v = np.asarray(v, dtype=float)
    contrib = np.einsum("eid,ed->ei", mesh.basis_gradients, v) * mesh.areas[:, None]
    out = np.zeros(mesh.n_nodes)
    np.add.at(out, mesh.elements.ravel(), contrib.ravel())
    return -out


def boundary_normal_flux(mesh: TriMesh, v) -> np.ndarray:
    """u . n on every boundary edge, using the owning element's value."""
    v = np.asarray(v, dtype=float)
    return np.einsum("bd,bd->b", v[mesh.boundary_edge_elements], mesh.boundary_normals)


def leray_project(mesh: TriMesh, v, tol=CG_TOL, maxiter=None):
    """Split v = P v + grad(pi) with (grad pi, grad phi) = (v, grad phi) for all phi.

    Returns ``(P v, pi, SolveStats)``; pi has zero mean.
    """
    v = np.asarray(v, dtype=float)
    if v.shape != (mesh.n_elements, 2) or not np.all(np.isfinite(v)):
        raise ValueError("v must be a finite (n_elements, 2) array")
    rhs = -discrete_divergence(mesh, v)
    pi, stats = pcg(mesh.stiffness, rhs, tol=tol, maxiter=maxiter, project_constants=True)
    m = mesh.lumped_mass
    pi = pi - (m @ pi) / m.sum()
    return v - element_gradient(mesh, pi), pi, stats


def nodal_average(mesh: TriMesh, elem_values) -> np.ndarray:
    """Area-weighted average of per-element values at each node."""
    ev = np.asarray(elem_values, dtype=float)
    w = mesh.areas
    shape = (mesh.n_nodes,) + ev.shape[1:]
    acc = np.zeros(shape)
    weighted = ev * w.reshape((-1,) + (1,) * (ev.ndim - 1))
    for i in range(3):
        np.add.at(acc, mesh.elements[:, i], weighted)
    return acc / (3.0 * mesh.lumped_mass).reshape((-1,) + (1,) * (ev.ndim - 1))


def gradient_recover(mesh: TriMesh, F) -> np.ndarray:
    """Nodal gradient: area-weighted mean of incident element gradients."""
    return nodal_average(mesh, element_gradient(mesh, F))


def hessian_recover(mesh: TriMesh, F) -> np.ndarray:
    """Nodal Hessian by recovering the recovered gradient, then symmetrising."""
    g = gradient_recover(mesh, F)
    hx = gradient_recover(mesh, g[:, 0])
    hy = gradient_recover(mesh, g[:, 1])
    H = np.stack([hx, hy], axis=1)
    return 0.5 * (H + H.transpose(0, 2, 1))


def nodal_laplacian(mesh: TriMesh, F) -> np.ndarray:
    """-M^{-1} K F at interior nodes (0 on the boundary)."""
    out = np.zeros(mesh.n_nodes)
    inner = mesh.interior_nodes
    out[inner] = -(mesh.stiffness @ np.asarray(F, dtype=float))[inner] / mesh.lumped_mass[inner]
    return out
