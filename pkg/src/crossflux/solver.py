"""Damped Newton for the implicit Euler system and the time loop."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .model import BoundaryData, State
from .scheme import Discretization

logger = logging.getLogger(__name__)


class LinearSolveError(RuntimeError):
    """Sparse factorization failed or produced an inaccurate solution."""


class NewtonError(RuntimeError):
    """Newton did not converge; carries the best iterate and residual history."""

    def __init__(self, message, best=None, history=()):
        super().__init__(message)
        self.best = best
        self.history = list(history)


class StructureViolation(RuntimeError):
    """A converged step left the admissible set by more than roundoff."""


@dataclass(frozen=True)
class NewtonOptions:
    abs_tol: float = 1e-10
    max_iter: int = 50
    damping: float = 0.5
    min_step: float = 2.0 ** -20
    projection_enabled: bool = False
    #: keep the Jacobian factorization across iterations and time steps and
    #: refactor only when the residual contracts by less than ``refactor_ratio``
    reuse_jacobian: bool = False
    refactor_ratio: float = 0.5

    def __post_init__(self):
        if not self.abs_tol > 0:
            raise ValueError("abs_tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if not 0 < self.damping < 1 or not 0 < self.min_step <= 1:
            raise ValueError("damping must lie in (0, 1) and min_step in (0, 1]")


@dataclass(frozen=True)
class TimeLoopOptions:
    dt: float = 1e-3
    t_end: float | None = None
    max_steps: int | None = None
    steady_tol: float = 1e-12
    clip_tol: float = 1e-9

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")

    @property
    def step_limit(self):
        limits = []
        if self.max_steps is not None:
            limits.append(int(self.max_steps))
        if self.t_end is not None:
            limits.append(int(round(self.t_end / self.dt)))
        return min(limits) if limits else None


@dataclass
class StepInfo:
    """Per-step solver record."""

    step: int
    iterations: int
    residual: float
    min_u: float
    min_u0: float
    clipped: float
    change: float


@dataclass
class RunResult:
    state: State
    steps: int
    reason: str
    time: float
    infos: list = field(default_factory=list)


# -- linear algebra -------------------------------------------------------

class Factorization:
    """Sparse LU of a square matrix with iterative refinement.

    The first attempt uses a minimum-degree ordering of ``A + A^T`` with
    diagonal pivots, which keeps fill low for the cell-block structure of
    the discrete system; if that yields a zero or non-finite pivot it falls
    back to column ordering with partial pivoting.
    """

    def __init__(self, A):
        self.A = sp.csc_matrix(A)
        n = self.A.shape[0]
        if self.A.shape != (n, n):
            raise ValueError(f"matrix must be square, got {self.A.shape}")
        self.lu = None
        errors = []
        for kw in (dict(permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                        options=dict(SymmetricMode=True)),
                   dict(permc_spec="COLAMD")):
            try:
                lu = spla.splu(self.A, **kw)
            except RuntimeError as exc:
                errors.append(str(exc))
                continue
            piv = np.abs(lu.U.diagonal())
            if piv.size and piv.min() > 0.0 and np.all(np.isfinite(piv)):
                self.lu, self.pivots = lu, piv
                break
            errors.append(f"smallest pivot {piv.min():.3e} at position {int(np.argmin(piv))}")
        if self.lu is None:
            raise LinearSolveError(f"factorization of {n}x{n} matrix failed: {'; '.join(errors)}")

    def solve(self, b, tol=1e-12, refinements=3, strict=True):
        """Solve with refinement until ``||Ax - b||_inf <= tol (1 + ||b||_inf)``."""
        b = np.asarray(b, dtype=float)
        x = self.lu.solve(b)
        bound = tol * (1.0 + np.abs(b).max(initial=0.0))
        for _ in range(refinements + 1):
            res = b - self.A @ x
            err = np.abs(res).max(initial=0.0)
            if err <= bound:
                return x
            x = x + self.lu.solve(res)
        if strict:
            raise LinearSolveError(f"residual {np.abs(b - self.A @ x).max():.3e} above {bound:.3e}; "
                                   f"pivot range [{self.pivots.min():.3e}, {self.pivots.max():.3e}]")
        return x


def solve_linear(A, b, tol=1e-12, refinements=3):
    """Sparse LU solve with iterative refinement.

    Guarantees ``||Ax - b||_inf <= tol (1 + ||b||_inf)``.

    Raises
    ------
    LinearSolveError
        On a singular matrix or if refinement cannot reach the tolerance;
        the message reports the pivot range.
    """
    b = np.asarray(b, dtype=float)
    if A.shape[0] != len(b):
        raise ValueError(f"incompatible shapes {A.shape} and {b.shape}")
    return Factorization(A).solve(b, tol, refinements)


# -- Newton ---------------------------------------------------------------

def _pack(u, phi):
    return np.column_stack([u, phi]).ravel()


def _unpack(x, n):
    X = x.reshape(-1, n + 1)
    return X[:, :n], X[:, n]


def _project(u, immobile):
    """Clip to ``u_i >= 0`` and ``sum_i u_i <= 1 - u_imm``."""
    u = np.maximum(u, 0.0)
    s = u.sum(axis=1)
    cap = 1.0 - immobile
    over = s > cap
    if np.any(over):
        u[over] *= (cap[over] / s[over])[:, None]
    return u


def newton_step(disc, u, phi, u_old, dt, opts=NewtonOptions(), _R=None):
    """One damped Newton iteration.

    Returns ``(u, phi, residual_norm)`` after the update.

    Raises
    ------
    NewtonError
        If backtracking reaches ``min_step`` without decreasing the residual.
    """
    n = disc.n
    R = disc.residual(u, phi, u_old, dt) if _R is None else _R
    r0 = np.abs(R).max()
    J = disc.jacobian(u, phi, dt)
    delta = Factorization(J).solve(-R.ravel(), strict=False)
    return _line_search(disc, u, phi, u_old, dt, opts, delta, r0)


def _line_search(disc, u, phi, u_old, dt, opts, delta, r0):
    n = disc.n
    x = _pack(u, phi)
    lam = 1.0
    while True:
        un, pn = _unpack(x + lam * delta, n)
        if opts.projection_enabled:
            un = _project(un.copy(), disc.config.immobile)
        rn = np.abs(disc.residual(un, pn, u_old, dt)).max()
        if np.isfinite(rn) and (rn < r0 or r0 <= opts.abs_tol or rn <= opts.abs_tol):
            return un.copy(), pn.copy(), float(rn)
        lam *= opts.damping
        if lam < opts.min_step:
            raise NewtonError(f"line search failed (residual {r0:.3e})", best=(u, phi), history=[r0])


class JacobianCache:
    """Factorized Jacobian shared between iterations when reuse is enabled."""

    def __init__(self):
        self.lu = None
        self.dt = None
        self.fresh = False
        self.factorizations = 0

    def refresh(self, disc, u, phi, dt):
        self.lu = Factorization(disc.jacobian(u, phi, dt))
        self.dt, self.fresh = dt, True
        self.factorizations += 1


def _chord_step(disc, u, phi, u_old, dt, opts, cache):
    """Newton iteration with a possibly outdated factorized Jacobian."""
    R = disc.residual(u, phi, u_old, dt)
    r0 = np.abs(R).max()
    if cache.lu is None or cache.dt != dt:
        cache.refresh(disc, u, phi, dt)
    while True:
        delta = cache.lu.solve(-R.ravel(), strict=False)
        try:
            un, pn, rn = _line_search(disc, u, phi, u_old, dt, opts, delta, r0)
        except NewtonError:
            if cache.fresh:
                raise
            cache.refresh(disc, u, phi, dt)
            continue
        slow = rn > opts.refactor_ratio * r0 and rn > opts.abs_tol
        if slow and not cache.fresh:
            # reject nothing, but use a current Jacobian from here on
            cache.refresh(disc, un, pn, dt)
        else:
            cache.fresh = False
        return un, pn, rn


def solve_step(disc, state_old, dt, opts=NewtonOptions(), guess=None, cache=None):
    """Newton iteration for one implicit Euler step; returns ``(u, phi, iterations, history)``."""
    u, phi = (state_old.u, state_old.phi) if guess is None else guess
    u, phi = np.array(u, dtype=float), np.array(phi, dtype=float)
    history = [float(np.abs(disc.residual(u, phi, state_old.u, dt)).max())]
    if opts.reuse_jacobian and cache is None:
        cache = JacobianCache()
    for it in range(1, opts.max_iter + 1):
        try:
            if opts.reuse_jacobian:
                u, phi, r = _chord_step(disc, u, phi, state_old.u, dt, opts, cache)
            else:
                u, phi, r = newton_step(disc, u, phi, state_old.u, dt, opts)
        except NewtonError as exc:
            raise NewtonError(f"step {state_old.step + 1}: {exc}", best=(u, phi), history=history) from exc
        history.append(r)
        if r <= opts.abs_tol:
            return u, phi, it, history
    raise NewtonError(f"step {state_old.step + 1}: no convergence in {opts.max_iter} iterations "
                      f"(residual {history[-1]:.3e})", best=(u, phi), history=history)


def _accept(disc, state_old, u, phi, it, history, clip_tol):
    cfg = disc.config
    min_u = float(u.min())
    u0 = 1.0 - u.sum(axis=1) - cfg.immobile
    min_u0 = float(u0.min())
    if min_u < -clip_tol:
        k = int(np.unravel_index(np.argmin(u), u.shape)[0])
        raise StructureViolation(f"step {state_old.step + 1}: concentration {min_u:.3e} in cell {k}")
    if min_u0 < -clip_tol:
        msg = f"step {state_old.step + 1}: solvent {min_u0:.3e} in cell {int(np.argmin(u0))}"
        if cfg.equal_D and not np.any(cfg.immobile):
            raise StructureViolation(msg)
        # no sign guarantee for the solvent here: report, do not correct
        logger.warning("%s (not covered by the bounds theory, left unclipped)", msg)
    clipped = 0.0
    if min_u < 0 or -clip_tol <= min_u0 < 0:
        v = _project(u.copy(), cfg.immobile)
        clipped = float(np.abs(v - u).max())
        logger.debug("step %d: clipped by %.3e", state_old.step + 1, clipped)
        u = v
    du = u - state_old.u
    change = float(np.sqrt(np.dot(disc.measure, (du * du).sum(axis=1))))
    new = State(u, phi, cfg.immobile, state_old.step + 1)
    return new, StepInfo(new.step, it, history[-1], min_u, min_u0, clipped, change)


def solve_time_step(disc, state_old, dt, opts=NewtonOptions(), clip_tol=1e-9, guess=None, cache=None):
    """One implicit Euler step on a prepared :class:`Discretization`; returns ``(State, StepInfo)``."""
    u, phi, it, history = solve_step(disc, state_old, dt, opts, guess, cache)
    return _accept(disc, state_old, u, phi, it, history, clip_tol)


def advance_time_step(state_old, dt, mesh, config, bc=None, opts=NewtonOptions(), clip_tol=1e-9):
    """Solve the implicit Euler system for the next time level.

    Raises
    ------
    NewtonError
        On nonconvergence.
    StructureViolation
        If the converged solution violates the bounds by more than ``clip_tol``.
    """
    disc = Discretization(mesh, config, bc if bc is not None else BoundaryData.empty(config.n))
    return solve_time_step(disc, state_old, dt, opts, clip_tol)[0]


def run(initial, mesh, config, bc=None, time_opts=TimeLoopOptions(), newton_opts=NewtonOptions(),
        callbacks=()):
    """Advance until the step limit or until the L2 change drops below ``steady_tol``.

    Each callback is called as ``cb(state, info)`` after every accepted step.
    """
    disc = Discretization(mesh, config, bc)
    cache = JacobianCache() if newton_opts.reuse_jacobian else None
    limit = time_opts.step_limit
    state = initial
    infos = []
    reason = "max_steps"
    while limit is None or len(infos) < limit:
        state, info = solve_time_step(disc, state, time_opts.dt, newton_opts, time_opts.clip_tol, cache=cache)
        infos.append(info)
        for cb in callbacks:
            cb(state, info)
        if info.change < time_opts.steady_tol:
            reason = "steady"
            break
    else:
        reason = "t_end" if time_opts.t_end is not None and (
            time_opts.max_steps is None or limit < time_opts.max_steps) else "max_steps"
    steps = len(infos)
    logger.info("run finished after %d steps (%s)", steps, reason)
    return RunResult(state, steps, reason, steps * time_opts.dt, infos)


__all__ = [
    "NewtonOptions", "TimeLoopOptions", "StepInfo", "RunResult", "LinearSolveError", "NewtonError",
    "StructureViolation", "Factorization", "JacobianCache", "solve_linear", "newton_step", "solve_step", "solve_time_step",
    "advance_time_step", "run",
]
