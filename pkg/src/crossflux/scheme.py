"""Finite-volume discretization: upwind fluxes, Poisson operator, implicit residual.

For an edge ``sigma`` seen from its first cell ``K`` the flux of species
``i`` is::

    F = -tau D_i (u0_sigma D(u_i) - u_i_sigma V_i)
    V_i = D(u0) - u0_hat_i beta z_i D(phi)

where ``D(v) = v_other - v_K``.  ``u0_sigma`` is the larger solvent value,
``u0_hat_i`` the solvent value upwinded on the sign of ``z_i D(phi)`` and
``u_i_sigma`` the species value upwinded on the sign of ``V_i``.  On
Dirichlet edges the "other" values are the boundary traces; Neumann edges
carry no flux.

Unknowns are ordered cell by cell as ``(u_1, ..., u_n, phi)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from decimal import Decimal, localcontext

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .model import BoundaryData, DomainError, State


@dataclass(frozen=True, eq=False)
class FluxField:
    """Fluxes on interior and Dirichlet edges, oriented out of the first cell.

    Arrays of shape (n_flux_edges, n) except ``u0_sigma`` (n_flux_edges,).
    ``edges`` holds the mesh edge ids (interior edges first).
    """

    edges: np.ndarray
    F: np.ndarray
    V: np.ndarray
    u_sigma: np.ndarray
    u0_sigma: np.ndarray
    u0_hat: np.ndarray

    def on_all_edges(self, mesh):
        """Fluxes on every mesh edge; Neumann rows are zero."""
        out = np.zeros((mesh.n_edges, self.F.shape[1]))
        out[self.edges] = self.F
        return out


class Discretization:
    """Precomputed edge connectivity for one mesh, model and boundary data.

    The methods are pure functions of the states passed in.
    """

    def __init__(self, mesh, config, bc=None):
        if config.n_cells != mesh.n_cells:
            raise ValueError(f"config has {config.n_cells} cells, mesh has {mesh.n_cells}")
        if bc is None:
            bc = BoundaryData.empty(config.n)
        if bc.u.shape != (mesh.n_dirichlet, config.n):
            raise ValueError(f"boundary data shape {bc.u.shape} does not match "
                             f"{mesh.n_dirichlet} Dirichlet edges and {config.n} species")
        self.mesh, self.config, self.bc = mesh, config, bc
        self.n = config.n
        self.nc = mesh.n_cells
        self.edges = np.concatenate([mesh.interior, mesh.dirichlet])
        self.n_int = len(mesh.interior)
        self.K = mesh.edge_cells[self.edges, 0]
        self.L = mesh.edge_cells[mesh.interior, 1]
        self.tau = mesh.transmissibility[self.edges]
        self.measure = mesh.cell_measure
        self.gauge = mesh.n_dirichlet == 0
        self._poisson = None

    # -- helpers ----------------------------------------------------------
    def _other(self, cell_values, traces):
        return np.concatenate([cell_values[self.L], traces])

    def fluxes(self, u, phi):
        """FluxField for cell concentrations ``u`` (nc, n) and potential ``phi``."""
        return self._fluxes(u, phi)[0]

    def _fluxes(self, u, phi):
        cfg, bc = self.config, self.bc
        imm = cfg.immobile
        uK, uO = u[self.K], self._other(u, bc.u)
        u0 = 1.0 - u.sum(axis=1) - imm
        u0K, u0O = u0[self.K], self._other(u0, bc.u0)
        dphi = self._other(phi, bc.phi) - phi[self.K]
        u0s = np.maximum(u0K, u0O)
        sK = u0K >= u0O
        bz = cfg.beta * cfg.z if cfg.drift_enabled else np.zeros(self.n)
        zd = bz[None, :] * dphi[:, None]
        r = zd >= 0.0
        u0hat = np.where(r, u0K[:, None], u0O[:, None])
        V = (u0O - u0K)[:, None] - u0hat * zd
        t = V >= 0.0
        us = np.where(t, uK, uO)
        coef = self.tau[:, None] * cfg.D[None, :]
        F = -coef * (u0s[:, None] * (uO - uK) - us * V)
        ff = FluxField(self.edges, F, V, us, u0s, u0hat)
        return ff, dict(uK=uK, uO=uO, sK=sK, r=r, t=t, zd=zd, bz=bz, coef=coef, dui=uO - uK)

    def divergence(self, F):
        """Sum of outgoing edge fluxes per cell, shape (nc, n)."""
        out = np.empty((self.nc, F.shape[1]))
        for i in range(F.shape[1]):
            out[:, i] = (np.bincount(self.K, F[:, i], minlength=self.nc)
                         - np.bincount(self.L, F[:self.n_int, i], minlength=self.nc))
        return out

    def poisson_matrix(self):
        """``lambda^2`` times the two-point Laplacian with Dirichlet diagonal."""
        if self._poisson is None:
            self._poisson = (self.config.lambda2 * self.mesh.laplacian(dirichlet=True)).tocsr()
        return self._poisson

    def poisson_rhs_traces(self):
        """Dirichlet contribution ``lambda^2 sum tau phi_bar`` per cell."""
        d = self.mesh.dirichlet
        out = np.bincount(self.mesh.edge_cells[d, 0], self.mesh.transmissibility[d] * self.bc.phi,
                          minlength=self.nc)
        return self.config.lambda2 * out

    def charge(self, u):
        return u @ self.config.z + self.config.background

    def poisson_residual(self, u, phi):
        return (self.poisson_matrix() @ phi - self.poisson_rhs_traces()
                - self.measure * self.charge(u))

    def residual(self, u, phi, u_old, dt):
        """Implicit Euler residual as an (nc, n+1) array (potential in the last column).

        With no Dirichlet edge the potential row of cell 0 is replaced by
        the zero-mean condition ``sum_K m(K) phi_K / m(Omega) = 0``.
        """
        ff = self.fluxes(u, phi)
        R = np.empty((self.nc, self.n + 1))
        R[:, :self.n] = self.measure[:, None] * (u - u_old) / dt + self.divergence(ff.F)
        R[:, self.n] = self.poisson_residual(u, phi)
        if self.gauge:
            R[0, self.n] = np.dot(self.measure, phi) / self.mesh.measure
        return R

    def jacobian(self, u, phi, dt):
        """Jacobian of :meth:`residual` with upwind branches frozen (CSR)."""
        n, nc, ni = self.n, self.nc, self.n_int
        m1 = n + 1
        _, w = self._fluxes(u, phi)
        ff = self.fluxes(u, phi)
        sK, r, t, zd, bz, coef, dui = w["sK"], w["r"], w["t"], w["zd"], w["bz"], w["coef"], w["dui"]
        a, b, V = ff.u0_sigma, ff.u_sigma, ff.V
        eye = np.eye(n)

        # derivative of F_i w.r.t. u_j on side K and on the other side
        da_K = -sK.astype(float)
        da_O = -(~sK).astype(float)
        dV_K = 1.0 + r * zd                # (ne, n), independent of j
        dV_O = -1.0 + (~r) * zd
        db_K = t.astype(float)
        db_O = 1.0 - db_K
        # dF[e, i, j]
        JK = -coef[:, :, None] * (da_K[:, None, None] * dui[:, :, None] - a[:, None, None] * eye
                                  - (db_K[:, :, None] * eye) * V[:, :, None]
                                  - b[:, :, None] * dV_K[:, :, None])
        JO = -coef[:, :, None] * (da_O[:, None, None] * dui[:, :, None] + a[:, None, None] * eye
                                  - (db_O[:, :, None] * eye) * V[:, :, None]
                                  - b[:, :, None] * dV_O[:, :, None])
        # derivative w.r.t. phi_K (phi_O is the negative)
        PK = coef * b * ff.u0_hat * bz[None, :]     # (ne, n)

        K, L = self.K, self.L
        rows, cols, vals = [], [], []
        ii = np.arange(n)

        def add(r_cell, r_comp, c_cell, c_comp, v):
            rr, cc, vv = np.broadcast_arrays(r_cell * m1 + r_comp, c_cell * m1 + c_comp, v)
            rows.append(rr.ravel())
            cols.append(cc.ravel())
            vals.append(vv.ravel())

        # species-species blocks; rows of K get +F, rows of L get -F
        add(K[:, None, None], ii[None, :, None], K[:, None, None], ii[None, None, :], JK)
        Ki, Li = K[:ni, None, None], L[:, None, None]
        add(Ki, ii[None, :, None], Li, ii[None, None, :], JO[:ni])
        add(Li, ii[None, :, None], Ki, ii[None, None, :], -JK[:ni])
        add(Li, ii[None, :, None], Li, ii[None, None, :], -JO[:ni])
        # species-potential blocks
        phi_c = n
        add(K[:, None], ii[None, :], K[:, None], phi_c, PK)
        add(K[:ni, None], ii[None, :], L[:, None], phi_c, -PK[:ni])
        add(L[:, None], ii[None, :], K[:ni, None], phi_c, -PK[:ni])
        add(L[:, None], ii[None, :], L[:, None], phi_c, PK[:ni])
        # time derivative
        cells = np.arange(nc)
        add(cells[:, None], ii[None, :], cells[:, None], ii[None, :],
            np.repeat((self.measure / dt)[:, None], n, axis=1))
        # Poisson rows
        P = self.poisson_matrix().tocoo()
        add(P.row, phi_c, P.col, phi_c, P.data)
        add(cells[:, None], phi_c, cells[:, None], ii[None, :], -self.measure[:, None] * self.config.z[None, :])

        rows, cols, vals = map(np.concatenate, (rows, cols, vals))
        if self.gauge:
            keep = rows != phi_c
            rows, cols, vals = rows[keep], cols[keep], vals[keep]
            rows = np.concatenate([rows, np.full(nc, phi_c)])
            cols = np.concatenate([cols, cells * m1 + phi_c])
            vals = np.concatenate([vals, self.measure / self.mesh.measure])
        N = nc * m1
        J = sp.csr_matrix((vals, (rows, cols)), shape=(N, N))
        J.sum_duplicates()
        return J


# -- scalar formulas ------------------------------------------------------
#
# The scalar edge functions below return the correctly rounded value of
# their formula for the given floating-point inputs: they evaluate in
# 50-digit decimal arithmetic and round once.  Near-cancelling fluxes
# (|F| much smaller than its two terms) are therefore reproduced to full
# relative precision, independent of the algebraic form used.  The
# vectorized assembly in :class:`Discretization` uses plain doubles.

_DIGITS = 50


def _rounded(fn, args):
    with localcontext() as ctx:
        ctx.prec = _DIGITS
        return float(fn(*(Decimal(float(a)) for a in args)))


def _elementwise(fn, *args):
    arrays = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in args))
    out = np.array([_rounded(fn, vals) for vals in zip(*(a.ravel() for a in arrays))]).reshape(arrays[0].shape)
    return float(out) if out.ndim == 0 else out


def _edge_terms(uK, uO, u0K, u0O, bzdphi):
    """``(F / (-tau D), V)`` of the double-upwind flux in the current decimal context."""
    hat = u0K if bzdphi >= 0 else u0O
    V = (u0O - u0K) - hat * bzdphi
    us = uK if V >= 0 else uO
    return max(u0K, u0O) * (uO - uK) - us * V, V


def _simplified(tau, D, uK, uL, u0K, u0L):
    return -tau * D * _edge_terms(uK, uL, u0K, u0L, 0)[0]


def _sqrt_form(tau, D, uK, uL, u0K, u0L):
    sK, sL = u0K.sqrt(), u0L.sqrt()
    ss = max(u0K, u0L).sqrt()
    us = uK if u0L - u0K >= 0 else uL
    return tau * D * (ss * (sK * uK - sL * uL) - us * (sK - sL) * (ss + sK + sL))


def simplified_flux(tau, D, uK, uL, u0K, u0L):
    """Flux without drift: ``-tau D (u0_sigma (u_L - u_K) - u_sigma (u0_L - u0_K))``.

    ``u_sigma`` is upwinded on the sign of ``u0_L - u0_K`` (K side on ties).
    Works elementwise on arrays; each value is correctly rounded.
    """
    return _elementwise(_simplified, tau, D, uK, uL, u0K, u0L)


def sqrt_form_flux(tau, D, uK, uL, u0K, u0L):
    """The same flux written with square roots of the solvent values.

    Raises
    ------
    DomainError
        If a solvent value is negative.
    """
    if np.any(np.asarray(u0K, float) < 0) or np.any(np.asarray(u0L, float) < 0):
        raise DomainError("the square-root flux form needs nonnegative solvent values")
    return _elementwise(_sqrt_form, tau, D, uK, uL, u0K, u0L)


# -- state-level operations -----------------------------------------------

def _edge_values(state, mesh, edge, i, config, bc, cell):
    """Values seen from ``cell`` (default: the first cell) on an interior or Dirichlet edge.

    Returns ``(uK, uO, u0K, u0O, beta z_i D(phi))`` or ``None`` on Neumann edges.
    """
    K, L = (int(c) for c in mesh.edge_cells[edge])
    if cell is not None and cell not in (K, L):
        raise ValueError(f"cell {cell} is not adjacent to edge {edge}")
    u, phi = state.u[:, i], state.phi
    u0 = 1.0 - state.u.sum(axis=1) - config.immobile
    bz = config.beta * config.z[i] if config.drift_enabled else 0.0
    if L >= 0:
        A, B = (K, L) if cell in (None, K) else (L, K)
        return u[A], u[B], u0[A], u0[B], bz * (phi[B] - phi[A])
    pos = np.flatnonzero(mesh.dirichlet == edge)
    if not len(pos):
        return None
    if bc is None:
        raise ValueError(f"Dirichlet edge {edge} requires boundary data")
    p = int(pos[0])
    return u[K], bc.u[p, i], u0[K], bc.u0[p], bz * (bc.phi[p] - phi[K])


def flux_field(state, mesh, config, bc=None):
    """FluxField of ``state`` on all interior and Dirichlet edges."""
    return Discretization(mesh, config, bc).fluxes(state.u, state.phi)


def drift_part(state, mesh, edge, i, config, bc=None, cell=None):
    """Drift part ``V_{i,K,sigma}``; Neumann edges give ``D(u0) = 0`` and no drift."""
    vals = _edge_values(state, mesh, edge, i, config, bc, cell)
    if vals is None:
        return 0.0
    return _rounded(lambda *a: _edge_terms(*a)[1], vals)


def species_flux(state, mesh, edge, i, config, bc=None, cell=None):
    """Numerical flux ``F_{i,K,sigma}`` out of ``cell`` (default: the first cell)."""
    vals = _edge_values(state, mesh, edge, i, config, bc, cell)
    if vals is None:
        return 0.0
    tau, D = mesh.transmissibility[edge], config.D[i]
    return _rounded(lambda t, d, *a: -t * d * _edge_terms(*a)[0], (tau, D, *vals))


def species_flux_sqrt_form(state, mesh, edge, i, config):
    """Square-root form of the drift-free flux on an interior edge."""
    K, L = mesh.edge_cells[edge]
    if L < 0:
        raise ValueError("the square-root form is defined on interior edges")
    u0 = state.u0
    return float(sqrt_form_flux(mesh.transmissibility[edge], config.D[i], state.u[K, i], state.u[L, i],
                                u0[K], u0[L]))


def poisson_residual(state, mesh, config, bc=None):
    """``-lambda^2 sum tau D(phi) - m(K)(sum_i z_i u_i + f)`` per cell."""
    return Discretization(mesh, config, bc).poisson_residual(state.u, state.phi)


def coupled_residual(state_new, state_old, dt, mesh, config, bc=None):
    """Implicit Euler residual, shape (n_cells, n+1); see :meth:`Discretization.residual`."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    return Discretization(mesh, config, bc).residual(state_new.u, state_new.phi, state_old.u, dt)


def assemble_jacobian(state_new, state_old, dt, mesh, config, bc=None):
    """CSR Jacobian of :func:`coupled_residual` with respect to ``(u, phi)``."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    return Discretization(mesh, config, bc).jacobian(state_new.u, state_new.phi, dt)


def solve_poisson(mesh, config, bc, u):
    """Potential for fixed concentrations ``u`` (gauge-fixed without Dirichlet edges)."""
    disc = Discretization(mesh, config, bc)
    A = disc.poisson_matrix().tolil()
    rhs = disc.poisson_rhs_traces() + disc.measure * disc.charge(np.asarray(u, float))
    if disc.gauge:
        A[0, :] = disc.measure / mesh.measure
        rhs[0] = 0.0
    return spla.spsolve(A.tocsc(), rhs) if mesh.n_cells > 1 or not disc.gauge else np.zeros(1)


__all__ = [
    "FluxField", "Discretization", "simplified_flux", "sqrt_form_flux", "flux_field",
    "drift_part", "species_flux", "species_flux_sqrt_form", "poisson_residual",
    "coupled_residual", "assemble_jacobian", "solve_poisson", "State",
]
