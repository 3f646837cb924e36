"""Structural diagnostics: entropy, entropy production, relative entropy, norms.

All functions are pure; none of them modifies or corrects a state.
Concentration arrays include the solvent in column 0 where noted.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg as spla

from .mesh import discrete_h1_norm, discrete_hminus1_norm, h1_matrix
from .model import DomainError

logger = logging.getLogger(__name__)


def _xlogx(u):
    """``u log u`` with ``0 log 0 = 0``."""
    u = np.asarray(u, dtype=float)
    out = np.zeros_like(u)
    pos = u > 0
    out[pos] = u[pos] * np.log(u[pos])
    return out


def _all_species(state, tol=0.0):
    U = state.all_species()
    if np.any(U < -tol):
        k, i = np.unravel_index(np.argmin(U), U.shape)
        raise DomainError(f"negative concentration {U[k, i]:.3e} (species {i}, cell {k})")
    return np.maximum(U, 0.0)


def entropy(state, mesh):
    """``H = sum_K m(K) sum_{i=0}^n (u log u - u + 1)``."""
    U = _all_species(state)
    return float(mesh.cell_measure @ (_xlogx(U) - U + 1.0).sum(axis=1))


def entropy_production(state, mesh, config):
    """Discrete entropy production of the drift-free, equal-diffusivity scheme.

    ``D sum_int tau [4 sum_i u0_sigma (sqrt u_iK - sqrt u_iL)^2
    + 4 (sqrt u0K - sqrt u0L)^2 + (u0K - u0L)^2]`` with ``D = D_1``.
    """
    U = _all_species(state)
    K, L = mesh.edge_cells[mesh.interior].T
    tau = mesh.transmissibility[mesh.interior]
    u0K, u0L = U[K, 0], U[L, 0]
    s = np.sqrt(U)
    species = (np.maximum(u0K, u0L)[:, None] * (s[K, 1:] - s[L, 1:]) ** 2).sum(axis=1)
    terms = 4.0 * species + 4.0 * (s[K, 0] - s[L, 0]) ** 2 + (u0K - u0L) ** 2
    return float(config.D[0] * np.dot(tau, terms))


def check_entropy_inequality(state_new, state_old, dt, mesh, config):
    """Entropy defect ``(H^k - H^{k-1})/dt + I^k`` (nonpositive for exact steps)."""
    return (entropy(state_new, mesh) - entropy(state_old, mesh)) / dt \
        + entropy_production(state_new, mesh, config)


def entropy_tolerance(H_old, dt):
    """Acceptance bound ``1e-8 (1 + |H_old| / dt)`` for the entropy defect."""
    return 1e-8 * (1.0 + abs(H_old) / dt)


def relative_entropy(state, steady, mesh, config, bc=None):
    """``sum m(K) sum_i u_i log(u_i / u_i^inf) + lambda^2/2 sum tau D(phi - phi^inf)^2``.

    Dirichlet edges use the difference of the traces, which vanishes when
    both potentials share the boundary data; Neumann edges contribute zero.
    """
    U, W = _all_species(state), _all_species(steady)
    pos = U > 0
    if np.any(pos & (W <= 0)):
        k, i = np.argwhere(pos & (W <= 0))[0]
        raise DomainError(f"steady state vanishes where the state is positive (species {i}, cell {k})")
    ratio = np.zeros_like(U)
    ratio[pos] = U[pos] * np.log(U[pos] / W[pos])
    E = float(mesh.cell_measure @ ratio.sum(axis=1))
    d = state.phi - steady.phi
    K, L = mesh.edge_cells[mesh.interior].T
    grad = np.dot(mesh.transmissibility[mesh.interior], (d[L] - d[K]) ** 2)
    Kd = mesh.edge_cells[mesh.dirichlet, 0]
    grad += np.dot(mesh.transmissibility[mesh.dirichlet], d[Kd] ** 2)  # traces coincide
    return E + 0.5 * config.lambda2 * float(grad)


def _h_eps(z, eps):
    z = z + eps
    return z * (np.log(z) - 1.0) + 1.0


def gajewski_semimetric(u, v, eps, mesh):
    """``sum m(K) sum_{i>=1} [h(u) + h(v) - 2 h((u+v)/2)]`` with ``h(z) = (z+e)(log(z+e)-1)+1``."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    a, b = np.asarray(u.u, float), np.asarray(v.u, float)
    gap = _h_eps(a, eps) + _h_eps(b, eps) - 2.0 * _h_eps(0.5 * (a + b), eps)
    return float(mesh.cell_measure @ gap.sum(axis=1))


def l2_distance(u, v, mesh):
    """``sqrt(sum_K m(K) sum_i (u_iK - v_iK)^2)``."""
    d = np.asarray(u.u) - np.asarray(v.u)
    return float(np.sqrt(mesh.cell_measure @ (d * d).sum(axis=1)))


def apriori_norms(states, mesh, dt):
    """Space-time norms of a trajectory window ``states[0..k]``.

    Returns ``(||sqrt u0||, [||sqrt(u0) u_i||], [sum dt ||d_t u_i||_{-1}^2])``
    where the first two are discrete ``L2(0,T; H1)`` norms over levels 1..k.
    """
    if len(states) < 2:
        raise ValueError("at least two consecutive states are required")
    n = states[0].n
    lu = spla.splu(h1_matrix(mesh))
    s0 = 0.0
    si = np.zeros(n)
    dtime = np.zeros(n)
    for prev, cur in zip(states[:-1], states[1:]):
        r = np.sqrt(np.maximum(cur.u0, 0.0))
        s0 += dt * discrete_h1_norm(r, mesh) ** 2
        for i in range(n):
            si[i] += dt * discrete_h1_norm(r * cur.u[:, i], mesh) ** 2
            dv = (cur.u[:, i] - prev.u[:, i]) / dt
            mv = mesh.cell_measure * dv
            dtime[i] += dt * max(float(mv @ lu.solve(mv)), 0.0)
    return float(np.sqrt(s0)), np.sqrt(si), dtime


# -- per-step reporting ---------------------------------------------------

@dataclass
class DiagnosticsReport:
    """Time series of structural quantities, one row per time level."""

    names: tuple
    rows: list = field(default_factory=list)
    _lu: tuple = field(default=None, repr=False)

    @property
    def header(self):
        n = len(self.names)
        return (["step", "time", "H", "I", "entropy_defect", "E_rel"]
                + [f"mass_{i + 1}" for i in range(n)]
                + ["min_u0", "max_u0"] + [f"min_u{i + 1}" for i in range(n)]
                + [f"max_u{i + 1}" for i in range(n)]
                + ["h1_sqrt_u0"] + [f"h1_sqrt_u0_u{i + 1}" for i in range(n)]
                + [f"hm1_dt_u{i + 1}" for i in range(n)])

    def record(self, step, time, state, mesh, config, previous=None, dt=None, steady=None, bc=None):
        H = entropy(state, mesh) if np.all(state.all_species() >= 0) else float("nan")
        try:
            I = entropy_production(state, mesh, config)
        except DomainError:
            I = float("nan")
        defect = float("nan")
        if previous is not None and dt:
            defect = (H - entropy(previous, mesh)) / dt + I
        E = relative_entropy(state, steady, mesh, config, bc) if steady is not None else float("nan")
        r = np.sqrt(np.maximum(state.u0, 0.0))
        h1 = [discrete_h1_norm(r, mesh)] + [discrete_h1_norm(r * state.u[:, i], mesh) for i in range(state.n)]
        if previous is not None and dt:
            if self._lu is None or self._lu[0] is not mesh:
                self._lu = (mesh, spla.splu(h1_matrix(mesh)))
            hm1 = [discrete_hminus1_norm((state.u[:, i] - previous.u[:, i]) / dt, mesh, _lu=self._lu[1])
                   for i in range(state.n)]
        else:
            hm1 = [float("nan")] * state.n
        row = ([step, time, H, I, defect, E] + list(state.masses(mesh))
               + [state.u0.min(), state.u0.max()] + list(state.u.min(axis=0)) + list(state.u.max(axis=0))
               + h1 + hm1)
        self.rows.append([float(x) if i > 0 else int(x) for i, x in enumerate(row)])
        return self.rows[-1]

    def column(self, name):
        j = self.header.index(name)
        return np.array([r[j] for r in self.rows])

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(self.header)
            for r in self.rows:
                w.writerow([r[0]] + [repr(float(x)) for x in r[1:]])


__all__ = [
    "entropy", "entropy_production", "check_entropy_inequality", "entropy_tolerance",
    "relative_entropy", "gajewski_semimetric", "l2_distance", "apriori_norms", "DiagnosticsReport",
]
