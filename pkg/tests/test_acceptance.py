"""Acceptance suite: one test and one PASS/FAIL line per criterion.

Benchmark scenario B: unit square, omega0 = sin(2 pi x) sin(2 pi y) (max 1 at
the nodes), theta0 = sin(pi x) sin(pi y), eta = 0, nu = 0, t_end = 1,
cfl = 0.5, dt_max = h_grid = 1/n.  Tolerances are pinned below.
"""

import math
import time

import numpy as np
import pytest
import sympy as sp

from conftest import record_criterion, scenario_b, square_mesh
from polybous.boussinesq import SimParams, run
from polybous.elliptic import (
    biot_savart,
    boundary_normal_flux,
    dirichlet_poisson_solve,
    discrete_divergence,
    element_gradient,
    leray_project,
)
from polybous.estimates import (
    check_energy_identity,
    check_thermal_identity,
    check_vorticity_transport_bound,
    gronwall_envelope_check,
    stability_sweep,
    viscosity_sweep,
)
from polybous.norms import (
    YoungFunction,
    gamma_star_embedding_check,
    luxemburg_norm,
    orlicz_endpoint_ratio,
    orlicz_holder_check,
    w2p_ratio,
)

P_SET = (2, 4, 8, np.inf)
SEED = 20240611
CG_TOL = 1e-10

# criterion 5 regression values (unit square, corner bump exp(-(x^2+y^2)/0.05))
CORNER_W2P_AT_64 = {4: 0.22955, 8: 0.13528, 16: 0.077720}


def _pn(p):
    return "inf" if p == np.inf else str(p)


@pytest.fixture(scope="module")
def runs():
    out = {}
    for n in (32, 64):
        m = square_mesh(n)
        out[n, "full"] = run(m, scenario_b(n))
        out[n, "transport_only"] = run(m, scenario_b(n, coupling="transport_only"))
    return out


def test_c01_elliptic_manufactured_order():
    x, y = sp.symbols("x y")
    F = x * (1 - x) * y * (1 - y) * sp.exp(x + y)
    Fn = sp.lambdify((x, y), F, "numpy")
    fn = sp.lambdify((x, y), -(sp.diff(F, x, 2) + sp.diff(F, y, 2)), "numpy")
    t0 = time.perf_counter()
    errs = []
    for n in (16, 32, 64):
        m = square_mesh(n)
        X, Y = m.nodes.T
        sol, _ = dirichlet_poisson_solve(m, fn(X, Y))
        errs.append(math.sqrt(m.lumped_mass @ (sol - Fn(X, Y)) ** 2))
    elapsed = time.perf_counter() - t0
    orders = np.log2(np.array(errs[:-1]) / errs[1:])
    ok = bool(np.all(orders >= 1.9) and elapsed < 30)
    record_criterion(1, ok, f"L2 errors {', '.join(f'{e:.3e}' for e in errs)}; orders "
                            f"{', '.join(f'{o:.4f}' for o in orders)} (need >= 1.9); "
                            f"{elapsed:.2f} s (need < 30 s)")
    assert ok


def test_c02_biot_savart_invariants():
    m = square_mesh(32)
    rng = np.random.default_rng(SEED)
    tang = sol = 0.0
    inner = ~m.boundary_nodes
    for _ in range(20):
        u = biot_savart(m, rng.normal(size=m.n_nodes))
        tang = max(tang, np.abs(boundary_normal_flux(m, u)).max())
        sol = max(sol, np.abs(discrete_divergence(m, u)[inner]).max())
    ok = tang <= 1e-12 and sol <= 1e-10
    record_criterion(2, ok, f"max |u.n| = {tang:.2e} (need <= 1e-12); max interior patch flux "
                            f"= {sol:.2e} (need <= 1e-10); 20 fields, h = 1/32")
    assert ok


def test_c03_leray_projection():
    m = square_mesh(32)
    rng = np.random.default_rng(SEED + 1)

    def l2(v):
        return math.sqrt(m.areas @ (v**2).sum(axis=1))

    idem = orth = 0.0
    for _ in range(20):
        v = rng.normal(size=(m.n_elements, 2))
        pv, pi, _ = leray_project(m, v)
        ppv, _, _ = leray_project(m, pv)
        gp = element_gradient(m, pi)
        idem = max(idem, l2(ppv - pv) / (CG_TOL * l2(v)))
        orth = max(orth, abs(m.areas @ (pv * gp).sum(axis=1)) / (CG_TOL * l2(pv) * l2(gp)))
    ok = idem <= 10 and orth <= 10
    record_criterion(3, ok, f"||PPv - Pv|| / (tol ||v||) max {idem:.3f}; |(Pv, grad pi)| / "
                            f"(tol ||Pv|| ||grad pi||) max {orth:.3f} (need <= 10, tol = 1e-10)")
    assert ok


def test_c04_orlicz_suite():
    m = square_mesh(16)
    rng = np.random.default_rng(SEED + 2)
    t0 = time.perf_counter()
    c = 2.5
    lux = luxemburg_norm(m, np.full(m.n_nodes, c), YoungFunction.exp())
    rel = abs(lux / (c / math.log(2)) - 1)
    worst_h = worst_e = math.inf
    for _ in range(100):
        sf, sg = np.exp(rng.normal(scale=2.0, size=2))
        f = sf * rng.standard_t(3, size=m.n_nodes)
        g = sg * rng.standard_t(3, size=m.n_nodes)
        h = orlicz_holder_check(m, f, g)
        worst_h = min(worst_h, h.margin / h.tolerance)
        e = gamma_star_embedding_check(m, f, float(rng.uniform(1e-3, 1.0)))
        worst_e = min(worst_e, e.margin / e.tolerance)
    elapsed = time.perf_counter() - t0
    ok = rel <= 1e-8 and worst_h >= -1 and worst_e >= -1 and elapsed < 60
    record_criterion(4, ok, f"constant-field Luxemburg rel. error {rel:.1e} (need <= 1e-8); "
                            f"min margin/(1e-8 scale): Holder {worst_h:.3g}, embedding "
                            f"{worst_e:.3g} (need >= -1); 100 pairs; {elapsed:.1f} s (need < 60 s)")
    assert ok


def _corner_bump(m):
    x, y = m.nodes.T
    return np.exp(-(x**2 + y**2) / 0.05)


def test_c05_elliptic_regularity_trends():
    m = square_mesh(64)
    ps = (4, 8, 16)
    w = [w2p_ratio(m, _corner_bump(m), p) for p in ps]
    w2p_ok = bool(np.all(np.diff(w) <= 0))
    ends = [orlicz_endpoint_ratio(square_mesh(n), _corner_bump(square_mesh(n))) for n in (16, 32, 64)]
    growth = np.array(ends[1:]) / ends[:-1] - 1
    end_ok = bool(np.all(growth < 0.20))
    reg_ok = all(abs(v / CORNER_W2P_AT_64[p] - 1) < 1e-3 for p, v in zip(ps, w))
    ok = w2p_ok and end_ok
    record_criterion(5, ok, f"corner bump, w2p_ratio at h=1/64 for p=4,8,16: "
                            f"{', '.join(f'{v:.4f}' for v in w)} (nonincreasing: {w2p_ok}); "
                            f"endpoint ratio at h=1/16,1/32,1/64: {', '.join(f'{v:.4f}' for v in ends)}"
                            f", growth {', '.join(f'{100 * g:.1f}%' for g in growth)} (need < 20%)")
    assert reg_ok, "w2p regression values changed"
    assert ok


def test_c06_transport_bound(runs):
    parts = []
    ok = True
    tr = runs[64, "transport_only"]
    for p in P_SET:
        r = check_vorticity_transport_bound(tr, p, tol=0.0)
        scale = r.margins.max(initial=0.0) + tr.diagnostics[f"omega_L{_pn(p)}"][0]
        need = 0.0 if p == np.inf else 1e-10 * scale
        ok &= r.worst >= -need
        parts.append(f"p={_pn(p)} {r.worst:.2e}")
    full = runs[64, "full"]
    for p in P_SET:
        r = check_vorticity_transport_bound(full, p)
        ok &= r.passed
        parts.append(f"full p={_pn(p)} {np.min(r.margins + r.tolerances):.3e}")
    record_criterion(6, ok, "transport_only min margins (need >= 0 for inf, >= -1e-10 scale "
                            "else): " + ", ".join(parts[:4]) + "; full run min (margin + "
                            "0.02(1+|w0|_p)(1+t)) (need >= 0): " + ", ".join(parts[4:]))
    assert ok


def test_c07_energy_identities(runs):
    kin = [check_energy_identity(runs[n, "full"]).average for n in (32, 64)]
    th = [check_thermal_identity(runs[n, "full"]).average for n in (32, 64)]
    zero = run(square_mesh(16), SimParams(t_end=0.5, dt_max=1 / 16))
    zr = [check_energy_identity(zero).residuals, check_thermal_identity(zero).residuals]
    zero_ok = all(np.all(r == 0) for r in zr)
    ok = kin[0] / kin[1] >= 1.5 and th[0] / th[1] >= 1.5 and zero_ok
    record_criterion(7, ok, f"average residual h=1/32 -> 1/64: kinetic {kin[0]:.3e} -> {kin[1]:.3e} "
                            f"(x{kin[0] / kin[1]:.2f}), thermal {th[0]:.3e} -> {th[1]:.3e} "
                            f"(x{th[0] / th[1]:.2f}) (need >= 1.5); zero run residuals exactly 0: "
                            f"{zero_ok}")
    assert ok


def test_c08_gronwall_envelope(runs):
    cs = [gronwall_envelope_check(runs[n, "full"], 1.0).calibrated_C for n in (32, 64)]
    top = max(cs)
    stable = abs(cs[0] - cs[1]) <= 0.2 * top
    m = square_mesh(64)
    rep = viscosity_sweep(m, scenario_b(64), [1e-1, 5e-2, 2.5e-2], gronwall_C=top)
    members = rep.checks[f"Gronwall envelope C = {top:.4g}"]
    ok = stable and members and not rep.failed
    note = " (energy never exceeds its initial value, so C = 0 at both levels)" if top == 0 else ""
    record_criterion(8, ok, f"calibrated C at h=1/32, 1/64: {cs[0]:.4g}, {cs[1]:.4g}{note} "
                            f"(need within +-20%); viscosity-sweep members inside envelope with "
                            f"C = {top:.4g}: {members}")
    assert ok


def test_c09_vanishing_viscosity():
    m = square_mesh(64)
    t0 = time.perf_counter()
    rep = viscosity_sweep(m, scenario_b(64), [1e-1, 5e-2, 2.5e-2])
    elapsed = time.perf_counter() - t0
    e = rep.column("e")[1:]
    dec = bool(np.all(np.diff(e) < 0))
    slope = rep.rates["slope"]
    ok = dec and slope > 0.3 and elapsed < 600 and not rep.failed
    record_criterion(9, ok, f"e(nu) for nu = 0.1, 0.05, 0.025: {', '.join(f'{v:.4e}' for v in e)} "
                            f"(strictly decreasing: {dec}); log-log slope {slope:.4f} (need > 0.3); "
                            f"{elapsed:.1f} s (need < 600 s)")
    assert ok


def test_c10_continuous_dependence():
    m = square_mesh(64)
    rep = stability_sweep(m, scenario_b(64), [1e-2, 5e-3, 2.5e-3])
    sup = rep.column("sup_Y")
    zero = sup[0]
    ratios = sup[1:-1] / sup[2:]
    ok = bool(zero == 0.0 and np.all(ratios >= 2.0) and not rep.failed)
    record_criterion(10, ok, f"sup_t Y for delta = 1e-2, 5e-3, 2.5e-3: "
                             f"{', '.join(f'{v:.4e}' for v in sup[1:])}; ratio per halving "
                             f"{', '.join(f'{r:.3f}' for r in ratios)} (need >= 2); delta = 0 sup Y "
                             f"= {zero:.1e} (need 0)")
    assert ok


def test_c11_determinism(runs):
    m = square_mesh(64)
    a = runs[64, "full"].diagnostics.to_csv().encode()
    b = run(m, scenario_b(64)).diagnostics.to_csv().encode()
    ok = a == b
    record_criterion(11, ok, f"scenario B diagnostics CSV ({len(a)} bytes) identical on rerun: {ok}")
    assert ok
