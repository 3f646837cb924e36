"""Scenario files: JSON description of mesh, species, data and run options.

Example::

    {
      "name": "channel",
      "species": [
        {"name": "Ca", "z": 2, "D": 1.0, "init": "connect", "bc": {"left": 0.05, "right": 0.02}},
        ...
      ],
      "beta": 4.0, "lambda2": 1e-3, "background_charge": 0.0,
      "immobile": {"type": "oxygen_ramp", "u_max": 0.845},
      "potential_bc": {"left": 0.0, "right": 0.0},
      "time": {"dt": 1e-3, "max_steps": 4000, "steady_tol": 1e-12},
      "newton": {"abs_tol": 1e-10, "max_iter": 50},
      "mesh": {"channel": {"level": 0, "base_cells": 256}},
      "flags": {"drift_enabled": true, "entropy_check": false},
      "output": {"snapshot_steps": [50, 1400], "snapshot_stride": 0}
    }

Boundary values are given per side: Dirichlet edges whose midpoint lies
left of the domain's middle abscissa take ``left``, the others ``right``.
A plain number applies to both sides.

Initial descriptors: a number, ``{"type": "linear", "left": a, "right": b}``,
``{"type": "cells", "values": [...]}`` or ``"connect"``, which joins the
two boundary values linearly in x and scales by the free volume
``1 - u_imm`` so that the initial data respect the simplex next to the
immobile species.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .channel import channel_mesh
from .mesh import build_structured_mesh, load_mesh, refine
from .model import (OXYGEN_CHARGE, OXYGEN_MAX, BoundaryData, ModelConfig, cell_centroids,
                    initial_state, oxygen_profile)
from .solver import NewtonOptions, TimeLoopOptions


class ConfigError(ValueError):
    """Invalid scenario file; the message names the offending field."""


@dataclass
class Scenario:
    name: str
    mesh: object
    config: ModelConfig
    bc: BoundaryData
    initial: object
    time: TimeLoopOptions
    newton: NewtonOptions
    snapshot_steps: tuple = ()
    snapshot_stride: int = 0
    entropy_check: bool = False
    raw: dict = field(default_factory=dict)
    digest: str = ""
    level: int = 0
    parents: list = field(default_factory=list)


# -- validation helpers ---------------------------------------------------

def _get(d, key, kind, where, default=...):
    if key not in d:
        if default is ...:
            raise ConfigError(f"{where}.{key}: missing required field")
        return default
    v = d[key]
    if kind is float:
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            raise ConfigError(f"{where}.{key}: expected a number, got {json.dumps(v)}")
        return float(v)
    if kind is int:
        if isinstance(v, bool) or not isinstance(v, int):
            raise ConfigError(f"{where}.{key}: expected an integer, got {json.dumps(v)}")
        return v
    if kind is bool:
        if not isinstance(v, bool):
            raise ConfigError(f"{where}.{key}: expected true/false, got {json.dumps(v)}")
        return v
    if kind is str:
        if not isinstance(v, str):
            raise ConfigError(f"{where}.{key}: expected a string, got {json.dumps(v)}")
        return v
    if not isinstance(v, kind):
        raise ConfigError(f"{where}.{key}: expected {kind.__name__}, got {json.dumps(v)}")
    return v


def _sided(value, where):
    """``(left, right)`` from a number or ``{"left": a, "right": b}``."""
    if isinstance(value, dict):
        return _get(value, "left", float, where), _get(value, "right", float, where)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{where}: expected a number or {{left, right}}, got {json.dumps(value)}")
    return float(value), float(value)


def parse_json(text, source="<config>"):
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be an object")
    return data


# -- building ---------------------------------------------------------------

def build_mesh(desc, base_dir=Path("."), level=None):
    """Mesh from the ``mesh`` block, refined ``level`` extra times (parent maps returned)."""
    if not isinstance(desc, dict) or len(desc) != 1:
        raise ConfigError("mesh: expected exactly one of 'file', 'structured', 'channel'")
    (kind, opts), = desc.items()
    where = f"mesh.{kind}"
    if kind == "file":
        if not isinstance(opts, str):
            raise ConfigError(f"{where}: expected a path")
        mesh, base_level = load_mesh(Path(base_dir) / opts), 0
    elif kind == "structured":
        nx = _get(opts, "nx", int, where)
        ny = _get(opts, "ny", int, where)
        rect = tuple(float(x) for x in _get(opts, "rect", list, where, [0.0, 1.0, 0.0, 1.0]))
        markers = _get(opts, "markers", dict, where, None)
        if nx < 1 or ny < 1 or len(rect) != 4:
            raise ConfigError(f"{where}: need nx, ny >= 1 and rect [x0, x1, y0, y1]")
        mesh, base_level = build_structured_mesh(nx, ny, rect, markers), 0
    elif kind == "channel":
        base_level = _get(opts, "level", int, where, 0)
        mesh = channel_mesh(0, _get(opts, "base_cells", int, where, 256))
    else:
        raise ConfigError(f"mesh: unknown source {kind!r}")
    total = base_level if level is None else level
    parents = []
    for _ in range(total):
        mesh, p = refine(mesh)
        parents.append(p)
    return mesh, parents, total


def build_scenario(data, base_dir=Path("."), level=None, mesh=None, parents=None):
    """Scenario from parsed JSON; ``level`` overrides the refinement level."""
    where = "config"
    name = _get(data, "name", str, where, "scenario")
    species = _get(data, "species", list, where)
    if not species:
        raise ConfigError("species: at least one species is required")
    names, z, D, inits, bcs = [], [], [], [], []
    for k, sp in enumerate(species):
        w = f"species[{k}]"
        if not isinstance(sp, dict):
            raise ConfigError(f"{w}: expected an object")
        names.append(_get(sp, "name", str, w, f"u{k + 1}"))
        z.append(_get(sp, "z", float, w))
        D.append(_get(sp, "D", float, w))
        if D[-1] <= 0:
            raise ConfigError(f"{w}.D: must be positive")
        bcs.append(_sided(sp.get("bc", 0.0), f"{w}.bc"))
        inits.append(sp.get("init", "connect"))
    beta = _get(data, "beta", float, where)
    lambda2 = _get(data, "lambda2", float, where)
    if beta <= 0 or lambda2 <= 0:
        raise ConfigError("beta and lambda2 must be positive")
    f0 = _get(data, "background_charge", float, where, 0.0)
    flags = _get(data, "flags", dict, where, {})
    drift = _get(flags, "drift_enabled", bool, "flags", True)
    entropy_check = _get(flags, "entropy_check", bool, "flags", False)

    if mesh is None:
        mesh, parents, level = build_mesh(_get(data, "mesh", dict, where), base_dir, level)
    parents = parents or []
    cent = cell_centroids(mesh)
    xs = mesh.vertices[:, 0]
    x0, x1 = float(xs.min()), float(xs.max())
    imm_desc = data.get("immobile")
    if imm_desc is None:
        imm_cells = np.zeros(mesh.n_cells)
        imm_fn = None
        charge = 0.0
    else:
        if not isinstance(imm_desc, dict) or imm_desc.get("type") != "oxygen_ramp":
            raise ConfigError("immobile: only {'type': 'oxygen_ramp'} is supported")
        u_max = _get(imm_desc, "u_max", float, "immobile", OXYGEN_MAX)
        if not 0 <= u_max < 1:
            raise ConfigError("immobile.u_max: must lie in [0, 1)")
        charge = _get(imm_desc, "charge", float, "immobile", OXYGEN_CHARGE)
        imm_fn = lambda x, y=None: oxygen_profile((np.asarray(x) - x0) / (x1 - x0), u_max)  # noqa: E731
        imm_cells = _cell_average_1d(imm_fn, mesh)
    config = ModelConfig(z=z, D=D, beta=beta, lambda2=lambda2,
                         background=f0 + charge * imm_cells, immobile=imm_cells,
                         drift_enabled=drift, names=tuple(names))

    mid = mesh.edge_midpoints[mesh.dirichlet]
    left = mid[:, 0] < 0.5 * (x0 + x1)
    ubar = np.column_stack([np.where(left, a, b) for a, b in bcs]) if len(mid) else np.zeros((0, len(z)))
    pl, pr = _sided(data.get("potential_bc", 0.0), "potential_bc")
    imm_bar = imm_fn(mid[:, 0]) if imm_fn is not None and len(mid) else np.zeros(len(mid))
    try:
        bc = BoundaryData(ubar, np.where(left, pl, pr), imm_bar)
    except ValueError as exc:
        raise ConfigError(f"species[*].bc: {exc}") from exc

    descriptors = []
    for k, (init, (a, b)) in enumerate(zip(inits, bcs)):
        if init == "connect":
            free = 1.0 - imm_cells
            s = (cent[:, 0] - x0) / (x1 - x0)
            descriptors.append((a + s * (b - a)) * free)
        elif isinstance(init, (int, float)) and not isinstance(init, bool):
            descriptors.append(float(init))
        elif isinstance(init, dict) and init.get("type") in ("constant", "linear", "cells"):
            descriptors.append(init)
        else:
            raise ConfigError(f"species[{k}].init: unsupported descriptor {json.dumps(init)}")
    try:
        initial = initial_state(mesh, config, descriptors, bc)
    except ValueError as exc:
        raise ConfigError(f"species[*].init: {exc}") from exc

    t = _get(data, "time", dict, where, {})
    time = TimeLoopOptions(dt=_get(t, "dt", float, "time", 1e-3),
                           t_end=_get(t, "t_end", float, "time", None),
                           max_steps=_get(t, "max_steps", int, "time", None),
                           steady_tol=_get(t, "steady_tol", float, "time", 1e-12))
    nw = _get(data, "newton", dict, where, {})
    newton = NewtonOptions(abs_tol=_get(nw, "abs_tol", float, "newton", 1e-10),
                           max_iter=_get(nw, "max_iter", int, "newton", 50),
                           projection_enabled=_get(nw, "projection_enabled", bool, "newton", False),
                           reuse_jacobian=_get(nw, "reuse_jacobian", bool, "newton", False))
    out = _get(data, "output", dict, where, {})
    snaps = tuple(int(s) for s in _get(out, "snapshot_steps", list, "output", []))
    stride = _get(out, "snapshot_stride", int, "output", 0)
    digest = hashlib.sha256(json.dumps(data, sort_keys=True).encode()).hexdigest()
    return Scenario(name, mesh, config, bc, initial, time, newton, snaps, stride, entropy_check,
                    data, digest, level or 0, parents)


def _cell_average_1d(fn, mesh, order=8):
    """Cell means of a function of x only, by Gauss quadrature on each triangle fan."""
    gx, gw = np.polynomial.legendre.leggauss(order)
    out = np.empty(mesh.n_cells)
    V = mesh.vertices
    for k, cell in enumerate(mesh.cells):
        p = V[list(cell)]
        c = p.mean(axis=0)
        total = 0.0
        for a, b in zip(p, np.roll(p, -1, axis=0)):
            area = 0.5 * abs((a[0] - c[0]) * (b[1] - c[1]) - (a[1] - c[1]) * (b[0] - c[0]))
            # collapsed (Duffy) Gauss rule on the triangle (c, a, b)
            s = 0.5 * (gx + 1.0)
            S, T = np.meshgrid(s, s, indexing="ij")
            W = np.outer(gw, gw) * 0.25 * (1.0 - S)
            x = c[0] + S * (a[0] - c[0]) + T * (1.0 - S) * (b[0] - c[0])
            total += 2.0 * area * float(np.sum(W * fn(x)))
        out[k] = total / mesh.cell_measure[k]
    return out


def load_scenario(path, level=None):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from exc
    return build_scenario(parse_json(text, str(path)), path.parent, level)


__all__ = ["ConfigError", "Scenario", "parse_json", "build_mesh", "build_scenario", "load_scenario"]
