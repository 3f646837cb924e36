"""Acceptance suite: one test per structural guarantee of the solver.

Each test prints a single ``PASS``/``FAIL`` line with the measured value
next to its threshold before asserting.
"""
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.optimize import root

from crossflux.cli import convergence_study
from crossflux.diagnostics import check_entropy_inequality, entropy, entropy_tolerance, relative_entropy
from crossflux.mesh import build_structured_mesh
from crossflux.model import BoundaryData, State, initial_state
from crossflux.scenario import load_scenario
from crossflux.scheme import (Discretization, coupled_residual, simplified_flux, solve_poisson, species_flux,
                              species_flux_sqrt_form)
from crossflux.solver import NewtonOptions, TimeLoopOptions, run, solve_step, solve_time_step

from conftest import ALL_NEUMANN, make_config, random_simplex

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
SIDES = ["D", "N"]


@pytest.fixture
def verdict(capsys):
    def report(label, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} {label}: {detail}")
        assert ok, f"{label}: {detail}"
    return report


def _degenerate(rng, points):
    """Zero out random entries and push some points onto the face u0 = 0."""
    points = points.copy()
    points[rng.uniform(size=points.shape) < 0.3] = 0.0
    full = rng.uniform(size=len(points)) < 0.3
    sums = points[full].sum(axis=1, keepdims=True)
    points[full] = np.where(sums > 0, points[full] / np.where(sums > 0, sums, 1.0), points[full])
    return points


def _random_scenario(rng, nx, ny, drift, neumann=False, n=None, equal_D=True, degenerate=False):
    """Random mesh markers, charges, parameters, boundary and initial data."""
    n = n or int(rng.integers(1, 4))
    if neumann:
        markers = ALL_NEUMANN
    else:
        markers = {side: str(rng.choice(SIDES)) for side in ("left", "right", "bottom", "top")}
        markers["left"] = "D"
    m = build_structured_mesh(nx, ny, (0.0, float(rng.uniform(1, 3)), 0.0, 1.0), markers=markers)
    z = rng.choice([-2.0, -1.0, 1.0, 2.0], size=n)
    D = np.full(n, float(rng.uniform(0.2, 2.0))) if equal_D else rng.uniform(0.2, 2.0, n)
    cfg = make_config(m, z, D=D, beta=float(rng.uniform(0.5, 3.0)), lambda2=float(10 ** rng.uniform(-2, 0)),
                      background=float(rng.uniform(-0.1, 0.1)), drift=drift)
    bc = None
    if m.n_dirichlet:
        traces = random_simplex(rng, 1, n, low=0.0, total=0.95)
        traces = (_degenerate(rng, traces) if degenerate else traces)[0]
        c0, c1 = rng.normal(0, 1.0, 2)   # boundary potential: random linear function of x
        bc = BoundaryData(np.tile(traces, (m.n_dirichlet, 1)), c0 + c1 * m.edge_midpoints[m.dirichlet, 0])
    # smooth random initial data: random linear profiles inside the simplex
    ends = random_simplex(rng, 2, n, low=0.0, total=0.95)
    if degenerate:
        ends = _degenerate(rng, ends)
    state = initial_state(m, cfg, [("linear", ends[0, i], ends[1, i]) for i in range(n)], bc)
    return m, cfg, bc, state


# -- 1 ----------------------------------------------------------------------------------

def test_bounds_preservation(rng, verdict):
    t0 = time.perf_counter()
    worst_u = worst_u0 = np.inf
    steps = 0
    for k in range(20):
        m, cfg, bc, s = _random_scenario(rng, 24, 20, drift=bool(k % 2), degenerate=True)
        res = run(s, m, cfg, bc, TimeLoopOptions(dt=float(10 ** rng.uniform(-3, -1)), max_steps=20))
        worst_u = min(worst_u, min(i.min_u for i in res.infos))
        worst_u0 = min(worst_u0, min(i.min_u0 for i in res.infos))
        steps += res.steps
        assert m.n_cells == 480
    elapsed = time.perf_counter() - t0
    ok = worst_u >= -1e-9 and worst_u0 >= -1e-9 and elapsed < 120
    verdict("1 bounds preservation", ok, f"min u_i={worst_u:.3e}, min u0={worst_u0:.3e} over {steps} steps "
                                          f"(>= -1e-9), {elapsed:.1f}s (< 120s)")


# -- 2 ----------------------------------------------------------------------------------

def test_entropy_inequality(rng, verdict):
    worst = -np.inf
    for _ in range(10):
        m, cfg, bc, s = _random_scenario(rng, 8, 6, drift=False, neumann=True)
        disc = Discretization(m, cfg, bc)
        dt = float(10 ** rng.uniform(-3, -1))
        for _ in range(200):
            new, _ = solve_time_step(disc, s, dt)
            defect = check_entropy_inequality(new, s, dt, m, cfg)
            worst = max(worst, defect / entropy_tolerance(entropy(s, m), dt))
            s = new
    verdict("2 discrete entropy inequality", worst <= 1.0,
            f"max defect / tolerance = {worst:.3e} (<= 1) over 2000 steps")


# -- 3 ----------------------------------------------------------------------------------

def test_flux_form_equivalence(rng, verdict):
    mesh = build_structured_mesh(2, 1, (0.0, 2.0, 0.0, 1.0), markers=ALL_NEUMANN)
    edge = int(mesh.interior[0])
    tau = mesh.transmissibility[edge]
    worst = 0.0
    for _ in range(10_000):
        n = int(rng.integers(1, 5))
        u = random_simplex(rng, 2, n, low=0.0, total=1.0)
        # occasionally place states on the simplex faces
        if rng.uniform() < 0.1:
            u[rng.integers(2), rng.integers(n)] = 0.0
        s = State(u, rng.normal(size=2))
        cfg = make_config(mesh, rng.normal(size=n), D=np.full(n, 0.7), drift=False)
        i = int(rng.integers(n))
        a = species_flux(s, mesh, edge, i, cfg)
        b = float(simplified_flux(tau, 0.7, u[0, i], u[1, i], s.u0[0], s.u0[1]))
        c = species_flux_sqrt_form(s, mesh, edge, i, cfg)
        ref = max(abs(a), abs(b), abs(c))
        if ref > 0:
            worst = max(worst, abs(a - b) / ref, abs(a - c) / ref)
    verdict("3 flux-form equivalence", worst <= 1e-12, f"max relative deviation {worst:.3e} (<= 1e-12)")


# -- 4 ----------------------------------------------------------------------------------

def test_mass_conservation(rng, verdict):
    m, cfg, bc, s = _random_scenario(rng, 10, 8, drift=True, neumann=True, n=3)
    m0 = s.masses(m)
    drift = []
    run(s, m, cfg, bc, TimeLoopOptions(dt=1e-3, max_steps=1000),
        callbacks=[lambda st, info: drift.append(np.abs(st.masses(m) - m0) / m0)])
    worst = float(np.max(drift))
    verdict("4 mass conservation", len(drift) == 1000 and worst <= 1e-9,
            f"max relative mass drift {worst:.3e} over {len(drift)} steps (<= 1e-9)")


# -- 5 ----------------------------------------------------------------------------------

def _fd_jacobian(disc, u, phi, u_old, dt, h=1e-6):
    n, nc = disc.n, disc.nc
    x = np.column_stack([u, phi]).ravel()
    J = np.empty((x.size, x.size))
    for k in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[k] += h
        xm[k] -= h
        Xp, Xm = xp.reshape(nc, n + 1), xm.reshape(nc, n + 1)
        J[:, k] = (disc.residual(Xp[:, :n], Xp[:, n], u_old, dt)
                   - disc.residual(Xm[:, :n], Xm[:, n], u_old, dt)).ravel() / (2 * h)
    return J


def _branch_gap(disc, u, phi):
    ff, w = disc._fluxes(u, phi)
    u0 = 1.0 - u.sum(axis=1) - disc.config.immobile
    u0O = np.concatenate([u0[disc.L], disc.bc.u0])
    gaps = [np.abs(ff.V).min(), np.abs(u0[disc.K] - u0O).min()]
    if disc.config.drift_enabled:
        gaps.append(np.abs(w["zd"]).min())
    return min(gaps)


def test_jacobian_exactness(rng, verdict):
    worst = 0.0
    count = 0
    while count < 50:
        m, cfg, bc, _ = _random_scenario(rng, 3, 3, drift=bool(count % 5), equal_D=False)
        disc = Discretization(m, cfg, bc)
        u, phi = random_simplex(rng, m.n_cells, cfg.n), rng.normal(size=m.n_cells)
        if _branch_gap(disc, u, phi) < 1e-3:   # a finite difference would straddle an upwind switch
            continue
        u_old = random_simplex(rng, m.n_cells, cfg.n)
        dt = float(10 ** rng.uniform(-3, -1))
        J = disc.jacobian(u, phi, dt).toarray()
        Jfd = _fd_jacobian(disc, u, phi, u_old, dt)
        worst = max(worst, np.abs(J - Jfd).max() / np.abs(J).max())
        count += 1
    verdict("5 Jacobian exactness", worst <= 1e-5, f"max relative deviation {worst:.3e} at 50 states (<= 1e-5)")


# -- 6 ----------------------------------------------------------------------------------

def test_poisson_exactness(rng, verdict):
    worst = 0.0
    for nx, ny in [(4, 4), (10, 3), (16, 12), (33, 17)]:
        for markers in ({"left": "D", "right": "D", "bottom": "N", "top": "N"},
                        {"left": "D", "right": "D", "bottom": "D", "top": "D"}):
            a, b, c = rng.normal(size=3)
            if markers["bottom"] == "N":
                b = 0.0  # no normal gradient through Neumann sides
            m = build_structured_mesh(nx, ny, (0.0, 2.0, -0.5, 1.0), markers=markers)
            cfg = make_config(m, [1.0, -1.0], lambda2=float(rng.uniform(0.01, 2)))
            lin = lambda p: a * p[:, 0] + b * p[:, 1] + c
            bc = BoundaryData(np.full((m.n_dirichlet, 2), 0.2), lin(m.edge_midpoints[m.dirichlet]))
            phi = solve_poisson(m, cfg, bc, np.full((m.n_cells, 2), 0.2))
            worst = max(worst, np.abs(phi - lin(m.centers)).max())
    verdict("6 Poisson exactness", worst <= 1e-10, f"max nodal error {worst:.3e} (<= 1e-10)")


# -- 7 ----------------------------------------------------------------------------------

STUDY_LEVELS, STUDY_REF = [1, 2, 3], 4


@pytest.mark.slow
def test_first_order_convergence(verdict):
    t0 = time.perf_counter()
    table = convergence_study(CONFIGS / "channel.json", STUDY_LEVELS, STUDY_REF, steps=(50, 1400))
    elapsed = time.perf_counter() - t0
    cells = sorted({r["cells"] for r in table["rows"]})
    slopes = table["slopes"]
    detail = ", ".join(f"{k}={v:.3f}" for k, v in slopes.items())
    successive = ", ".join(f"{k}={v:.3f}" for k, v in table["successive_slopes"].items())
    ok = all(0.75 <= v <= 1.25 for v in slopes.values()) and elapsed <= 1800
    verdict("7 first-order spatial convergence", ok,
            f"cells {cells} vs {table['ref_cells']}; slopes {detail} (in [0.75, 1.25]); {elapsed:.0f}s (<= 1800s); "
            f"supplementary consecutive-level slopes {successive}")


# -- 8 ----------------------------------------------------------------------------------

def test_relative_entropy_decay(rng, verdict):
    worst_rise, worst_ratio = -np.inf, np.inf
    steps = []
    for _ in range(3):
        m, cfg, bc, s = _random_scenario(rng, 12, 6, drift=False, neumann=True)
        zero = np.zeros(m.n_cells)   # no drift: the potential plays no role
        mean = s.masses(m) / m.measure
        steady = State(np.tile(mean, (m.n_cells, 1)), zero)
        E = [relative_entropy(State(s.u, zero), steady, m, cfg)]
        res = run(s, m, cfg, bc, TimeLoopOptions(dt=1e-2, max_steps=5000),
                  callbacks=[lambda st, info: E.append(relative_entropy(State(st.u, zero), steady, m, cfg))])
        steps.append(f"{res.steps} ({res.reason})")
        E = np.array(E)
        worst_rise = max(worst_rise, float(np.max(np.diff(E))))
        worst_ratio = min(worst_ratio, E[0] / max(E[-1], 1e-300))
    ok = worst_rise <= 1e-10 and worst_ratio >= 10
    verdict("8 relative entropy decay", ok,
            f"max increase {worst_rise:.3e} (<= 1e-10), min decay factor {worst_ratio:.3e} (>= 10); "
            f"steps {', '.join(steps)}")


# -- 9 ----------------------------------------------------------------------------------

def test_empirical_uniqueness(rng, verdict):
    worst = 0.0
    for _ in range(5):
        m, cfg, bc, s = _random_scenario(rng, 8, 5, drift=False, neumann=True, equal_D=False)
        disc = Discretization(m, cfg, bc)
        dt = float(10 ** rng.uniform(-3, -1))
        for _ in range(20):
            u1, p1, _, _ = solve_step(disc, s, dt)
            g = s.u + rng.uniform(-1e-3, 1e-3, s.u.shape)
            g = np.maximum(g, 0.0)
            g /= np.maximum(1.0, g.sum(axis=1) / (1.0 - 1e-12))[:, None]
            u2, p2, _, _ = solve_step(disc, s, dt, guess=(g, s.phi))
            d = u1 - u2
            worst = max(worst, float(np.sqrt(m.cell_measure @ (d * d).sum(axis=1))))
            s = s.evolve(u1, p1)
    verdict("9 empirical uniqueness", worst <= 1e-8, f"max L2 distance {worst:.3e} over 100 steps (<= 1e-8)")


# -- 10 + selectivity -------------------------------------------------------------------

@pytest.fixture(scope="module")
def channel_run():
    sc = load_scenario(CONFIGS / "channel.json")
    states = [sc.initial]
    t0 = time.perf_counter()
    result = run(sc.initial, sc.mesh, sc.config, sc.bc, sc.time, sc.newton,
                 callbacks=[lambda st, info: states.append(st)])
    elapsed = time.perf_counter() - t0
    E = np.array([relative_entropy(st, result.state, sc.mesh, sc.config, sc.bc) for st in states])
    return sc, result, elapsed, E


@pytest.mark.slow
def test_steady_state_termination(channel_run, verdict, capsys):
    sc, result, elapsed, E = channel_run
    rises = int(np.count_nonzero(np.diff(E) > 1e-10))
    with capsys.disabled():   # soft check: decay is not guaranteed for the full model
        print(f"\nINFO channel relative entropy: {E[0]:.3e} -> {E[-2]:.3e}, "
              f"{rises} increases above 1e-10 in {len(E) - 1} steps (logged, not asserted)")
    R = coupled_residual(result.state, result.state, sc.time.dt, sc.mesh, sc.config, sc.bc)
    r = float(np.abs(R).max())
    ok = result.reason == "steady" and r <= 1e-8
    verdict("10 steady-state termination", ok,
            f"reason={result.reason} after {result.steps} steps ({elapsed:.0f}s), "
            f"stationary residual {r:.3e} (<= 1e-8)")


@pytest.mark.slow
def test_channel_selectivity(channel_run, verdict):
    sc, result, _, _ = channel_run
    x = sc.mesh.centers[:, 0]
    x0, x1 = sc.mesh.vertices[:, 0].min(), sc.mesh.vertices[:, 0].max()
    s = (x - x0) / (x1 - x0)
    inside = (s > 0.45) & (s < 0.55)
    w = sc.mesh.cell_measure[inside]
    ca, na = (w @ result.state.u[inside][:, :2]) / w.sum()
    names = sc.config.names
    bath = sc.bc.u.max(axis=0)
    favor_na = bath[names.index("Na")] > bath[names.index("Ca")]
    verdict("selectivity", favor_na and ca > na,
            f"channel-interior mean Ca={ca:.4f} > Na={na:.4f} with bath maxima Ca={bath[0]:.2f} < Na={bath[1]:.2f}")


# -- 11 ---------------------------------------------------------------------------------

def _brute_residual(x, u_old, dt, h, beta, z, D, lam2, f, left, right):
    """Independent 1D-chain residual for one species on cells of width h and unit height."""
    nc = len(u_old)
    u, phi = x[:nc], x[nc:]
    u0 = 1.0 - u
    flux = np.zeros(nc)

    def edge_flux(uK, uL, phiK, phiL, tau):
        a0K, a0L = 1.0 - uK, 1.0 - uL
        dphi = phiL - phiK
        hat = a0K if z * dphi >= 0 else a0L
        V = (a0L - a0K) - hat * beta * z * dphi
        up = uK if V >= 0 else uL
        return -tau * D * (max(a0K, a0L) * (uL - uK) - up * V)

    pot = np.zeros(nc)
    for k in range(nc - 1):
        F = edge_flux(u[k], u[k + 1], phi[k], phi[k + 1], 1.0 / h)
        flux[k] += F
        flux[k + 1] -= F
        g = lam2 * (phi[k + 1] - phi[k]) / h
        pot[k] -= g
        pot[k + 1] += g
    for cell, trace in ((0, left), (nc - 1, right)):
        if trace is not None:
            ub, pb = trace
            flux[cell] += edge_flux(u[cell], ub, phi[cell], pb, 2.0 / h)
            pot[cell] -= lam2 * (pb - phi[cell]) * 2.0 / h
    species = h * (u - u_old) / dt + flux
    poisson = pot - h * (z * u + f)
    if left is None and right is None:
        poisson[0] = phi.mean()
    return np.concatenate([species, poisson])


def test_tiny_instances_match_brute_force(rng, verdict):
    worst = 0.0
    cases = 0
    for nc in (2, 3):
        for dirichlet in (False, True):
            for drift in (False, True):
                for _ in range(3):
                    markers = dict(ALL_NEUMANN)
                    if dirichlet:
                        markers.update(left="D", right="D")
                    m = build_structured_mesh(nc, 1, (0.0, nc * 0.5, 0.0, 1.0), markers=markers)
                    z, beta, lam2, f = float(rng.choice([-2, -1, 1, 2])), float(rng.uniform(0.5, 2)), \
                        float(rng.uniform(0.1, 1)), float(rng.uniform(-0.2, 0.2))
                    cfg = make_config(m, [z], D=[0.8], beta=beta, lambda2=lam2, background=f, drift=drift)
                    bc, left, right = None, None, None
                    if dirichlet:
                        ub, pb = rng.uniform(0.05, 0.9, 2), rng.normal(size=2)
                        left_first = m.edge_midpoints[m.dirichlet[0], 0] < 0.1
                        order = [0, 1] if left_first else [1, 0]
                        bc = BoundaryData(ub[order][:, None], pb[order])
                        left, right = (ub[0], pb[0]), (ub[1], pb[1])
                    u_old = rng.uniform(0.05, 0.9, nc)
                    s = State(u_old[:, None], rng.normal(size=nc) if dirichlet else np.zeros(nc))
                    dt = float(rng.uniform(0.01, 0.2))
                    new, _ = solve_time_step(Discretization(m, cfg, bc), s, dt, NewtonOptions(abs_tol=1e-13))
                    bz = beta if drift else 0.0
                    args = (u_old, dt, 0.5, bz, z, 0.8, lam2, f, left, right)
                    sol = root(_brute_residual, np.concatenate([u_old, s.phi]), args=args, method="hybr",
                               options=dict(xtol=1e-15))
                    assert np.abs(_brute_residual(sol.x, *args)).max() < 1e-12
                    ours = np.concatenate([new.u[:, 0], new.phi])
                    worst = max(worst, np.abs(ours - sol.x).max())
                    cases += 1
    verdict("11 tiny-instance oracle", worst <= 1e-10,
            f"max deviation {worst:.3e} over {cases} two- and three-cell steps (<= 1e-10)")
