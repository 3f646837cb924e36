"""Output writers: legacy VTK snapshots, final-state tables, run manifests."""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np


def _fmt(x):
    return repr(float(x))


def vtk_text(state, mesh, title="crossflux snapshot"):
    """Legacy VTK unstructured grid with cell arrays u0, u1..un, Phi, u_imm."""
    lines = ["# vtk DataFile Version 3.0", title[:255], "ASCII", "DATASET UNSTRUCTURED_GRID",
             f"POINTS {len(mesh.vertices)} double"]
    lines += [f"{_fmt(x)} {_fmt(y)} 0.0" for x, y in mesh.vertices]
    size = sum(len(c) + 1 for c in mesh.cells)
    lines.append(f"CELLS {mesh.n_cells} {size}")
    lines += [" ".join(str(v) for v in (len(c), *c)) for c in mesh.cells]
    lines.append(f"CELL_TYPES {mesh.n_cells}")
    lines += ["5" if len(c) == 3 else "9" if len(c) == 4 else "7" for c in mesh.cells]
    arrays = [("u0", state.u0)] + [(f"u{i + 1}", state.u[:, i]) for i in range(state.n)]
    arrays += [("Phi", state.phi), ("u_imm", state.immobile)]
    lines.append(f"CELL_DATA {mesh.n_cells}")
    for name, values in arrays:
        lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
        lines += [_fmt(v) for v in values]
    return "\n".join(lines) + "\n"


def write_vtk_snapshot(state, mesh, path):
    Path(path).write_text(vtk_text(state, mesh, f"crossflux step {state.step}"), encoding="utf-8")


def read_vtk_cell_data(path):
    """Cell arrays of a file written by :func:`write_vtk_snapshot` (name -> array)."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    out = {}
    i = next(k for k, line in enumerate(lines) if line.startswith("CELL_DATA"))
    n = int(lines[i].split()[1])
    i += 1
    while i < len(lines):
        name = lines[i].split()[1]
        out[name] = np.array([float(v) for v in lines[i + 2:i + 2 + n]])
        i += 2 + n
    return out


def write_state_csv(state, mesh, names, path):
    """One row per cell: centers, solvent, species, potential, immobile fraction."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["cell", "x", "y", "u0", *names, "phi", "u_imm"])
        for k in range(mesh.n_cells):
            w.writerow([k, _fmt(mesh.centers[k, 0]), _fmt(mesh.centers[k, 1]), _fmt(state.u0[k]),
                        *(_fmt(v) for v in state.u[k]), _fmt(state.phi[k]), _fmt(state.immobile[k])])


def write_manifest(path, **fields):
    Path(path).write_text(json.dumps(fields, indent=2, sort_keys=True) + "\n", encoding="utf-8")


__all__ = ["vtk_text", "write_vtk_snapshot", "read_vtk_cell_data", "write_state_csv", "write_manifest"]
