"""Physical model: species data, boundary data, states, entropy variables.

Concentrations are volume fractions.  The solvent fills what the mobile
ions and an optional immobile species leave free,
``u_0 = 1 - sum_i u_i - u_imm``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

logger = logging.getLogger(__name__)

AVOGADRO = 6.022e23          # 1/mol
TYPICAL_CONCENTRATION = 3.7037e25  # 1/L
OXYGEN_MOLARITY = 52.0       # mol/L
#: Scaled maximal concentration of the confined oxygen ions, about 0.845.
OXYGEN_MAX = AVOGADRO / TYPICAL_CONCENTRATION * OXYGEN_MOLARITY
#: Charge carried by one unit of oxygen volume fraction (O^{1/2-}).
OXYGEN_CHARGE = -0.5


class InvalidDataError(ValueError):
    """Model data outside the admissible set (negative or non-simplex values)."""


class DomainError(ValueError):
    """Argument outside the domain of a nonlinear map (log of nonpositive value)."""


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ModelConfig:
    """Species and field parameters.

    Parameters
    ----------
    z, D : array_like, shape (n,)
        Charges and diffusion coefficients of the mobile species.
    beta : float
        Scaled inverse thermal voltage.
    lambda2 : float
        Scaled permittivity.
    background : array_like, shape (nc,)
        Cell means ``f_K`` of the permanent charge, immobile species
        included.
    immobile : array_like, shape (nc,)
        Immobile volume fraction per cell, ``0 <= u_imm < 1``.
    drift_enabled : bool
        If false, the potential does not enter the fluxes.
    """

    z: np.ndarray
    D: np.ndarray
    beta: float
    lambda2: float
    background: np.ndarray
    immobile: np.ndarray
    drift_enabled: bool = True
    names: tuple = ()

    def __post_init__(self):
        z, D = _frozen(self.z).reshape(-1), _frozen(self.D).reshape(-1)
        if z.shape != D.shape or len(z) == 0:
            raise InvalidDataError("z and D must be nonempty and of equal length")
        if np.any(D <= 0) or not np.all(np.isfinite(D)):
            raise InvalidDataError("diffusion coefficients must be positive")
        if not np.all(np.isfinite(z)):
            raise InvalidDataError("charges must be finite")
        if not self.beta > 0 or not self.lambda2 > 0:
            raise InvalidDataError("beta and lambda2 must be positive")
        imm = _frozen(self.immobile).reshape(-1)
        f = _frozen(self.background).reshape(-1)
        if imm.shape != f.shape:
            raise InvalidDataError("background and immobile need one value per cell")
        if np.any(imm < 0) or np.any(imm >= 1):
            k = int(np.flatnonzero((imm < 0) | (imm >= 1))[0])
            raise InvalidDataError(f"immobile fraction {imm[k]} outside [0, 1) in cell {k}")
        names = tuple(self.names) or tuple(f"u{i + 1}" for i in range(len(z)))
        if len(names) != len(z):
            raise InvalidDataError("one name per species is required")
        for k, v in (("z", z), ("D", D), ("background", f), ("immobile", imm), ("names", names)):
            object.__setattr__(self, k, v)

    @classmethod
    def uniform(cls, n_cells, z, D, beta=1.0, lambda2=1.0, background=0.0, immobile=0.0, **kw):
        """Config with spatially constant background charge and immobile fraction."""
        return cls(z=z, D=D, beta=beta, lambda2=lambda2,
                   background=np.full(n_cells, float(background)),
                   immobile=np.full(n_cells, float(immobile)), **kw)

    @property
    def n(self):
        return len(self.z)

    @property
    def n_cells(self):
        return len(self.background)

    @property
    def equal_D(self):
        return bool(np.all(self.D == self.D[0]))

    def with_drift(self, enabled):
        return replace(self, drift_enabled=bool(enabled))


@dataclass(frozen=True, eq=False)
class BoundaryData:
    """Dirichlet traces, one row per Dirichlet edge (``mesh.dirichlet`` order).

    ``immobile`` is the immobile fraction on the edge; it enters the
    solvent trace ``u0_bar = 1 - sum_i u_bar_i - immobile``.
    """

    u: np.ndarray
    phi: np.ndarray
    immobile: np.ndarray = None

    def __post_init__(self):
        u = _frozen(self.u)
        if u.ndim != 2:
            raise InvalidDataError("boundary concentrations must have shape (n_dirichlet, n)")
        phi = _frozen(self.phi).reshape(-1)
        imm = np.zeros(len(u)) if self.immobile is None else np.asarray(self.immobile, float).reshape(-1)
        imm = _frozen(imm)
        if phi.shape != (len(u),) or imm.shape != (len(u),):
            raise InvalidDataError("one potential and immobile trace per Dirichlet edge")
        if np.any(u < 0):
            raise InvalidDataError("boundary concentrations must be nonnegative")
        if np.any(u.sum(axis=1) + imm > 1.0 + 1e-14):
            e = int(np.argmax(u.sum(axis=1) + imm))
            raise InvalidDataError(f"boundary traces on Dirichlet edge {e} exceed the simplex")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "immobile", imm)

    @classmethod
    def empty(cls, n):
        return cls(np.zeros((0, n)), np.zeros(0))

    @property
    def u0(self):
        return 1.0 - self.u.sum(axis=1) - self.immobile


@dataclass(frozen=True, eq=False)
class State:
    """Concentrations ``u`` (cells x species) and potential ``phi`` at one time level."""

    u: np.ndarray
    phi: np.ndarray
    immobile: np.ndarray = None
    step: int = 0

    def __post_init__(self):
        u = _frozen(self.u)
        if u.ndim != 2:
            raise InvalidDataError("u must have shape (n_cells, n)")
        phi = _frozen(self.phi).reshape(-1)
        imm = np.zeros(len(u)) if self.immobile is None else self.immobile
        imm = _frozen(imm).reshape(-1)
        if phi.shape != (len(u),) or imm.shape != (len(u),):
            raise InvalidDataError("phi and immobile need one value per cell")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "immobile", imm)

    @property
    def u0(self):
        return 1.0 - self.u.sum(axis=1) - self.immobile

    @property
    def n(self):
        return self.u.shape[1]

    def all_species(self):
        """Array (cells x (n+1)) with the solvent in column 0."""
        return np.column_stack([self.u0, self.u])

    def evolve(self, u, phi, step=None):
        return State(u, phi, self.immobile, self.step + 1 if step is None else step)

    def masses(self, mesh):
        return mesh.cell_measure @ self.u


def oxygen_profile(x, u_max=OXYGEN_MAX):
    """Confined oxygen fraction along the channel axis (scaled ``x`` in [0, 1]).

    Plateau ``u_max`` on [0.45, 0.55], linear ramps on [0.35, 0.45] and
    [0.55, 0.65], zero elsewhere.  ``x`` may be a scalar, an array of
    abscissae, or an array of points (..., 2); the ordinate is ignored.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim >= 1 and x.shape[-1] == 2 and x.ndim == 2:
        x = x[:, 0]
    ramp = np.clip(np.minimum(10.0 * (x - 0.35), 10.0 * (0.65 - x)), 0.0, 1.0)
    out = u_max * ramp
    return float(out) if out.ndim == 0 else out


def entropy_variables(u, phi, config, immobile=0.0):
    """``w_i = log(u_i / u_0) + beta z_i phi`` for states strictly inside the simplex."""
    u = np.asarray(u, dtype=float)
    u0 = 1.0 - u.sum(axis=-1) - immobile
    if np.any(u <= 0) or np.any(u0 <= 0):
        raise DomainError("entropy variables need all concentrations, solvent included, positive")
    phi = np.asarray(phi, dtype=float)
    return np.log(u / np.expand_dims(u0, -1)) + config.beta * config.z * np.expand_dims(phi, -1)


def invert_entropy_variables(w, phi, config):
    """Concentrations from entropy variables; the result lies in the open simplex.

    Uses a shifted log-sum-exp.  Under rounding, results that would touch
    the simplex boundary are pulled inside by the smallest representable
    amount, so the output is always strictly admissible.
    """
    w = np.asarray(w, dtype=float)
    a = w - config.beta * config.z * np.expand_dims(np.asarray(phi, dtype=float), -1)
    m = np.maximum(a.max(axis=-1, keepdims=True), 0.0)
    e = np.exp(a - m)
    u = e / (np.exp(-m) + e.sum(axis=-1, keepdims=True))
    u = np.maximum(u, np.finfo(float).tiny)
    s = u.sum(axis=-1, keepdims=True)
    while np.any(s >= 1.0):
        u = np.where(s >= 1.0, u * (1.0 - 2.0 * np.finfo(float).eps), u)
        s = u.sum(axis=-1, keepdims=True)
    return u


# -- initial data ---------------------------------------------------------

def _cell_means(descriptor, mesh, bbox):
    """Cell means of a constant, ``("linear", left, right)``, callable, or per-cell table."""
    nc = mesh.n_cells
    if np.isscalar(descriptor):
        return np.full(nc, float(descriptor))
    if isinstance(descriptor, dict):
        kind = descriptor.get("type", "constant")
        if kind == "constant":
            return np.full(nc, float(descriptor["value"]))
        if kind == "linear":
            descriptor = ("linear", descriptor["left"], descriptor["right"])
        elif kind == "cells":
            descriptor = descriptor["values"]
        else:
            raise InvalidDataError(f"unknown initial descriptor type {kind!r}")
    if isinstance(descriptor, tuple) and descriptor and descriptor[0] == "linear":
        _, left, right = descriptor
        x0, x1 = bbox
        # the mean of a linear function is its value at the centroid
        s = (cell_centroids(mesh)[:, 0] - x0) / (x1 - x0)
        return float(left) + s * (float(right) - float(left))
    if callable(descriptor):
        c = cell_centroids(mesh)
        return np.asarray(descriptor(c[:, 0], c[:, 1]), dtype=float) * np.ones(nc)
    arr = np.asarray(descriptor, dtype=float)
    if arr.shape != (nc,):
        raise InvalidDataError(f"tabulated descriptor has {arr.shape} values for {nc} cells")
    return arr


def cell_centroids(mesh):
    """Polygon centroids (not the admissibility centers)."""
    out = np.empty((mesh.n_cells, 2))
    V = mesh.vertices
    for k, cell in enumerate(mesh.cells):
        p = V[list(cell)]
        q = np.roll(p, -1, axis=0)
        cr = p[:, 0] * q[:, 1] - q[:, 0] * p[:, 1]
        a = cr.sum() / 2.0
        out[k] = ((p + q) * cr[:, None]).sum(axis=0) / (6.0 * a)
    return out


def initial_state(mesh, config, descriptors, bc=None):
    """Initial cell means and the potential from one Poisson solve.

    Parameters
    ----------
    descriptors : sequence
        One descriptor per species: a number, ``("linear", left, right)``
        (linear in x across the mesh bounding box), a callable ``f(x, y)``,
        or a per-cell array.
    bc : BoundaryData, optional
        Needed when the mesh has Dirichlet edges.

    Raises
    ------
    InvalidDataError
        If a cell violates ``u_i >= 0`` or ``sum_i u_i <= 1 - u_imm``.
    """
    from .scheme import solve_poisson

    if len(descriptors) != config.n:
        raise InvalidDataError(f"{len(descriptors)} initial descriptors for {config.n} species")
    xs = mesh.vertices[:, 0]
    bbox = (xs.min(), xs.max())
    u = np.column_stack([_cell_means(d, mesh, bbox) for d in descriptors])
    bad = np.flatnonzero(np.any(u < 0, axis=1) | (u.sum(axis=1) + config.immobile > 1.0 + 1e-14))
    if len(bad):
        k = int(bad[0])
        raise InvalidDataError(f"initial data outside the simplex in cell {k}: u={u[k].tolist()}, "
                               f"immobile={config.immobile[k]}")
    if bc is None:
        bc = BoundaryData.empty(config.n)
    phi = solve_poisson(mesh, config, bc, u)
    return State(u, phi, config.immobile, 0)


def boundary_from_functions(mesh, config, u_funcs, phi_func, immobile_func=None):
    """Edge-mean boundary traces from callables of the edge midpoint.

    ``u_funcs`` holds one callable (or number) per species.
    """
    mid = mesh.edge_midpoints[mesh.dirichlet]

    def ev(f):
        if callable(f):
            return np.asarray(f(mid[:, 0], mid[:, 1]), dtype=float) * np.ones(len(mid))
        return np.full(len(mid), float(f))

    u = np.column_stack([ev(f) for f in u_funcs]) if len(mid) else np.zeros((0, config.n))
    imm = ev(immobile_func) if immobile_func is not None else np.zeros(len(mid))
    return BoundaryData(u, ev(phi_func), imm)


__all__ = [
    "ModelConfig", "BoundaryData", "State", "InvalidDataError", "DomainError",
    "OXYGEN_MAX", "OXYGEN_CHARGE", "oxygen_profile", "entropy_variables",
    "invert_entropy_variables", "initial_state", "cell_centroids", "boundary_from_functions",
]
