"""Discrete Lebesgue, Sobolev and Orlicz (Luxemburg) norms on a TriMesh.

All integrals use vertex quadrature, i.e. the lumped mass weights
sum_e |e|/3 at each node, so every inequality that holds for a positive
measure holds exactly for the discrete quantities as well.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .domain import TriMesh
from .elliptic import dirichlet_poisson_solve, element_gradient, gradient_recover, hessian_recover

__all__ = [
    "YoungFunction",
    "NormReport",
    "CheckResult",
    "POWER",
    "EXP",
    "EXP_CONJUGATE",
    "lp_norm",
    "h1_seminorm",
    "integrate",
    "luxemburg_norm",
    "orlicz_holder_check",
    "gamma_star_embedding_check",
    "w2p_norm",
    "w2p_ratio",
    "orlicz_endpoint_ratio",
]

POWER = "power"
EXP = "exp_minus_one"
EXP_CONJUGATE = "exp_conjugate"

LUX_RTOL = 1e-10
LUX_LOWER = 1e-14


@dataclass(frozen=True)
class YoungFunction:
    kind: str
    p: float | None = None

    def __post_init__(self):
        if self.kind not in (POWER, EXP, EXP_CONJUGATE):
            raise ValueError(f"unknown Young function {self.kind!r}")
        if self.kind == POWER and not (self.p is not None and self.p > 1):
            raise ValueError("power Young function needs p > 1")

    @classmethod
    def power(cls, p):
        return cls(POWER, float(p))

    @classmethod
    def exp(cls):
        return cls(EXP)

    @classmethod
    def exp_conjugate(cls):
        return cls(EXP_CONJUGATE)

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            if self.kind == POWER:
                return s**self.p
            if self.kind == EXP:
                return np.expm1(s)
            big = s > 1.0
            t = np.where(big, s, 1.0)
            return np.where(big, t * np.log(t) - t + 1.0, 0.0)


@dataclass(frozen=True)
class NormReport:
    value: float
    iterations: int
    quadrature: str = "vertex"


@dataclass(frozen=True)
class CheckResult:
    """An inequality check: passes when margin >= -tolerance."""

    margin: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.margin >= -self.tolerance)


def _nodal(mesh, f):
    f = np.asarray(f, dtype=float)
    if f.shape[0] != mesh.n_nodes:
        raise ValueError(f"field has {f.shape[0]} values, mesh has {mesh.n_nodes} nodes")
    if not np.all(np.isfinite(f)):
        raise ValueError("field values must be finite")
    return f


def integrate(mesh: TriMesh, f) -> float:
    return float(mesh.lumped_mass @ _nodal(mesh, f))


def lp_norm(mesh: TriMesh, f, p) -> float:
    f = np.abs(_nodal(mesh, f))
    if p == np.inf or p == "inf":
        return float(f.max(initial=0.0))
    p = float(p)
    if p < 1:
        raise ValueError("p must be >= 1")
    top = f.max(initial=0.0)
    if top == 0.0:
        return 0.0
    # scaled to avoid overflow for large p
    return float(top * (mesh.lumped_mass @ (f / top) ** p) ** (1.0 / p))


def h1_seminorm(mesh: TriMesh, f) -> float:
    g = element_gradient(mesh, _nodal(mesh, f))
    return float(np.sqrt(mesh.areas @ (g**2).sum(axis=1)))


def luxemburg_norm(mesh: TriMesh, f, gamma: YoungFunction, full_output=False):
    """inf{lam > 0 : int gamma(|f| / lam) <= 1} by bisection on lam."""
    a = np.abs(_nodal(mesh, f))
    m = mesh.lumped_mass
    scale = float(a.max(initial=0.0))
    if scale == 0.0:
        return NormReport(0.0, 0) if full_output else 0.0
    # Luxemburg norms are absolutely homogeneous: bisect for g = a / scale
    g = a / scale

    def feasible(lam):
        return float(m @ gamma(g / lam)) <= 1.0

    lo, hi = LUX_LOWER, 1.0
    while not feasible(hi):
        lo, hi = hi, 2.0 * hi
    it = 0
    while hi - lo > LUX_RTOL * hi:
        mid = 0.5 * (lo + hi)
        if feasible(mid):
            hi = mid
        else:
            lo = mid
        it += 1
    value = scale * hi
    return NormReport(value, it) if full_output else value


def orlicz_holder_check(mesh: TriMesh, f, g) -> CheckResult:
    """2 ||f||_{exp} ||g||_{exp*} - int |f g|."""
    nf = luxemburg_norm(mesh, f, YoungFunction.exp())
    ng = luxemburg_norm(mesh, g, YoungFunction.exp_conjugate())
    lhs = integrate(mesh, np.abs(np.asarray(f) * np.asarray(g)))
    return CheckResult(2.0 * nf * ng - lhs, 1e-8 * (1.0 + nf + ng))


def gamma_star_embedding_check(mesh: TriMesh, f, eps) -> CheckResult:
    """eps^{-1/(1+eps)} ||f||_{L^{1+eps}} - ||f||_{exp*}, for 0 < eps <= 1."""
    if not 0.0 < eps <= 1.0:
        raise ValueError("eps must lie in (0, 1]")
    lp = lp_norm(mesh, f, 1.0 + eps)
    lux = luxemburg_norm(mesh, f, YoungFunction.exp_conjugate())
    bound = eps ** (-1.0 / (1.0 + eps)) * lp
    return CheckResult(bound - lux, 1e-8 * (1.0 + bound + lux))


def w2p_norm(mesh: TriMesh, F, p) -> float:
    """(||F||_p^p + || |grad F| ||_p^p + || |D^2 F|_Frobenius ||_p^p)^{1/p}.

    Derivatives come from nodal recovery.
    """
    grad = gradient_recover(mesh, F)
    hess = hessian_recover(mesh, F)
    parts = [
        lp_norm(mesh, F, p),
        lp_norm(mesh, np.hypot(grad[:, 0], grad[:, 1]), p),
        lp_norm(mesh, np.sqrt((hess**2).sum(axis=(1, 2))), p),
    ]
    if p == np.inf:
        return max(parts)
    return float(np.sum(np.array(parts) ** p) ** (1.0 / p))


def _dirichlet(mesh, f):
    F, _ = dirichlet_poisson_solve(mesh, f)
    return F


def w2p_ratio(mesh: TriMesh, f, p) -> float:
    """||G f||_{W^{2,p}} / (p ||f||_{L^p}) for the Dirichlet solution G f."""
    f = _nodal(mesh, f)
    if p < 2:
        raise ValueError("p must be >= 2")
    fp = lp_norm(mesh, f, p)
    if fp == 0.0:
        raise ValueError("f must not vanish identically")
    return w2p_norm(mesh, _dirichlet(mesh, f), p) / (p * fp)


def orlicz_endpoint_ratio(mesh: TriMesh, f) -> float:
    """|| |D^2 G f|_Frobenius ||_{L^exp} / ||f||_{L^inf}."""
    f = _nodal(mesh, f)
    finf = lp_norm(mesh, f, np.inf)
    if finf == 0.0:
        raise ValueError("f must not vanish identically")
    hess = hessian_recover(mesh, _dirichlet(mesh, f))
    mag = np.sqrt((hess**2).sum(axis=(1, 2)))
    return luxemburg_norm(mesh, mag, YoungFunction.exp()) / finf

