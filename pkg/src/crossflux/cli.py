"""Command-line front end.

Commands::

    crossflux run <config.json> [-o DIR]
    crossflux check-mesh <mesh> [--tol TOL]
    crossflux converge <config.json> --levels 0,1,2 --ref 3 [--steps 50,1400]
    crossflux make-channel-mesh --level L -o <file> [--base-cells N]

Exit codes: 0 success, 2 configuration error, 3 mesh error, 4 solver
nonconvergence, 5 structure violation.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .channel import channel_mesh
from .diagnostics import DiagnosticsReport, entropy_tolerance, relative_entropy
from .mesh import MeshError, check_admissibility, load_mesh, refine, save_mesh
from .output import write_manifest, write_state_csv, write_vtk_snapshot
from .scenario import ConfigError, build_mesh, build_scenario, load_scenario, parse_json
from .solver import LinearSolveError, NewtonError, StructureViolation, TimeLoopOptions, run

logger = logging.getLogger("crossflux")

EXIT_OK, EXIT_CONFIG, EXIT_MESH, EXIT_SOLVER, EXIT_STRUCTURE = 0, 2, 3, 4, 5
#: Keep every state for the relative entropy only below this many stored values.
_HISTORY_BUDGET = 3e7


class StudyError(ValueError):
    """Inconsistent convergence-study request (e.g. non-nested levels)."""


# -- run ----------------------------------------------------------------------

def run_scenario(config_path, outdir="out", scenario=None):
    """Run a scenario and write diagnostics, snapshots, final state and manifest.

    Returns the process exit code.
    """
    outdir = Path(outdir)
    try:
        sc = scenario or load_scenario(config_path)
    except ConfigError as exc:
        logger.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except MeshError as exc:
        logger.error("mesh error: %s", exc)
        return EXIT_MESH
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "snapshots").mkdir(exist_ok=True)
    mesh, cfg, dt = sc.mesh, sc.config, sc.time.dt
    report = DiagnosticsReport(cfg.names)
    report.record(0, 0.0, sc.initial, mesh, cfg)
    limit = sc.time.step_limit or 100000
    keep = mesh.n_cells * cfg.n * limit <= _HISTORY_BUDGET
    history = [sc.initial] if keep else None
    previous = [sc.initial]

    def snapshot(state):
        if state.step in sc.snapshot_steps or (sc.snapshot_stride and state.step % sc.snapshot_stride == 0):
            write_vtk_snapshot(state, mesh, outdir / "snapshots" / f"step_{state.step:06d}.vtk")

    def on_step(state, info):
        row = report.record(state.step, state.step * dt, state, mesh, cfg, previous[0], dt)
        if sc.entropy_check:
            defect = row[4]
            tol = entropy_tolerance(report.rows[-2][2], dt)
            if not defect <= tol:
                raise StructureViolation(f"step {state.step}: entropy defect {defect:.3e} above {tol:.3e}")
        previous[0] = state
        if history is not None:
            history.append(state)
        snapshot(state)

    snapshot(sc.initial)
    code, reason, steps, final = EXIT_OK, "error", 0, sc.initial
    try:
        result = run(sc.initial, mesh, cfg, sc.bc, sc.time, sc.newton, callbacks=[on_step])
        reason, steps, final = result.reason, result.steps, result.state
    except (NewtonError, LinearSolveError) as exc:
        logger.error("solver failure: %s", exc)
        code, final = EXIT_SOLVER, previous[0]
    except StructureViolation as exc:
        logger.error("structure violation: %s", exc)
        code, final = EXIT_STRUCTURE, previous[0]
    steps = final.step
    if history is not None and reason == "steady":
        j = report.header.index("E_rel")
        for row, st in zip(report.rows, history):
            row[j] = relative_entropy(st, final, mesh, cfg, sc.bc)
        E = [r[j] for r in report.rows]
        if any(b > a + 1e-10 for a, b in zip(E, E[1:])):
            logger.info("relative entropy is not monotone along this run")
    report.write_csv(outdir / "diagnostics.csv")
    write_state_csv(final, mesh, cfg.names, outdir / "final_state.csv")
    write_vtk_snapshot(final, mesh, outdir / "final_state.vtk")
    write_manifest(outdir / "manifest.json", name=sc.name, version=__version__,
                   mesh_sha256=mesh.digest(), config_sha256=sc.digest, stop_reason=reason,
                   steps=steps, exit_code=code, cells=mesh.n_cells,
                   threads=os.environ.get("CROSSFLUX_THREADS"))
    logger.info("%s: %s after %d steps, outputs in %s", sc.name, reason, steps, outdir)
    return code


# -- convergence study ----------------------------------------------------------

def aggregate(values, fine_measure, coarse_measure, index):
    """Cell means of a fine field on coarse cells; ``index`` maps fine to coarse cells."""
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    out = np.column_stack([np.bincount(index, fine_measure * values[:, i], minlength=len(coarse_measure))
                           for i in range(values.shape[1])])
    return out / coarse_measure[:, None]


def _level_snapshots(args):
    data, base_dir, mesh, steps = args
    sc = build_scenario(data, base_dir, mesh=mesh)
    last = max(steps)
    opts = TimeLoopOptions(sc.time.dt, None, last, sc.time.steady_tol, sc.time.clip_tol)
    snaps = {}

    def grab(state, info):
        if state.step in steps:
            snaps[state.step] = state.u.copy()

    result = run(sc.initial, mesh, sc.config, sc.bc, opts, sc.newton, callbacks=[grab])
    for s in steps:  # a run that became steady early keeps its final state
        snaps.setdefault(s, result.state.u.copy())
    return snaps


def convergence_study(config_path, levels, ref, steps=(50, 1400), jobs=1):
    """L1 errors of nested levels against a finer reference and fitted slopes.

    Returns a dict with per-level rows and per-(step, species) slopes.
    """
    levels = sorted(int(x) for x in levels)
    if not levels or ref <= levels[-1] or levels[0] < 0:
        raise StudyError("the reference level must be finer than all study levels")
    config_path = Path(config_path)
    data = parse_json(config_path.read_text(encoding="utf-8"), str(config_path))
    base, _, _ = build_mesh(data.get("mesh", {}), config_path.parent, level=0)
    meshes, parents = [base], []
    for _ in range(ref):
        m, p = refine(meshes[-1])
        meshes.append(m)
        parents.append(p)
    for lv in levels:
        if meshes[ref].n_cells != 4 ** (ref - lv) * meshes[lv].n_cells:
            raise StudyError(f"level {lv} is not nested in the reference")
    todo = levels + [ref]
    tasks = [(data, config_path.parent, meshes[lv], tuple(steps)) for lv in todo]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_level_snapshots, tasks))
    else:
        results = [_level_snapshots(t) for t in tasks]
    snaps = dict(zip(todo, results))
    names = build_scenario(data, config_path.parent, mesh=meshes[levels[0]]).config.names
    rows = []
    mref = meshes[ref].cell_measure
    for lv in levels:
        index = np.arange(meshes[ref].n_cells)
        for j in range(ref - 1, lv - 1, -1):
            index = parents[j][index]
        m = meshes[lv].cell_measure
        for s in steps:
            agg = aggregate(snaps[ref][s], mref, m, index)
            err = (m[:, None] * np.abs(snaps[lv][s] - agg)).sum(axis=0)
            rows.append({"level": lv, "cells": meshes[lv].n_cells, "h": meshes[lv].h, "step": s,
                         "errors": dict(zip(names, map(float, err)))})
    slopes = {}
    for s in steps:
        sel = [r for r in rows if r["step"] == s]
        h = np.log([r["h"] for r in sel])
        for name in names:
            e = np.array([r["errors"][name] for r in sel])
            slopes[f"{s}:{name}"] = float(np.polyfit(h, np.log(e), 1)[0]) if np.all(e > 0) and len(sel) > 1 \
                else float("nan")
    # supplementary: slopes of differences between consecutive levels
    successive = {}
    chain = levels + [ref]
    for s in steps:
        for i, name in enumerate(names):
            diffs, hs = [], []
            for a, b in zip(chain[:-1], chain[1:]):
                if b != a + 1:
                    continue
                agg = aggregate(snaps[b][s][:, i], meshes[b].cell_measure, meshes[a].cell_measure, parents[a])
                diffs.append(float(meshes[a].cell_measure @ np.abs(snaps[a][s][:, i] - agg[:, 0])))
                hs.append(meshes[a].h)
            if len(diffs) > 1 and all(d > 0 for d in diffs):
                successive[f"{s}:{name}"] = float(np.polyfit(np.log(hs), np.log(diffs), 1)[0])
    return {"levels": levels, "ref": ref, "ref_cells": meshes[ref].n_cells, "steps": list(steps),
            "rows": rows, "slopes": slopes, "successive_slopes": successive}


# -- argument parsing --------------------------------------------------------------

def _int_list(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser():
    p = argparse.ArgumentParser(prog="crossflux", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a scenario")
    r.add_argument("config")
    r.add_argument("-o", "--output", default="out")

    c = sub.add_parser("check-mesh", help="check mesh admissibility")
    c.add_argument("mesh")
    c.add_argument("--tol", type=float, default=1e-10)

    v = sub.add_parser("converge", help="grid refinement study")
    v.add_argument("config")
    v.add_argument("--levels", type=_int_list, required=True)
    v.add_argument("--ref", type=int, required=True)
    v.add_argument("--steps", type=_int_list, default=[50, 1400])
    v.add_argument("--jobs", type=int, default=1)
    v.add_argument("-o", "--output", default=None, help="write the table as JSON")

    m = sub.add_parser("make-channel-mesh", help="write a channel mesh file")
    m.add_argument("--level", type=int, default=0)
    m.add_argument("--base-cells", type=int, default=256)
    m.add_argument("-o", "--output", required=True)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "run":
        return run_scenario(args.config, args.output)
    if args.command == "check-mesh":
        try:
            mesh = load_mesh(args.mesh, tol=None)
        except (MeshError, OSError) as exc:
            print(f"mesh error: {exc}", file=sys.stderr)
            return EXIT_MESH
        report = check_admissibility(mesh, args.tol)
        print(report.summary())
        return EXIT_OK if report.passed else EXIT_MESH
    if args.command == "converge":
        try:
            table = convergence_study(args.config, args.levels, args.ref, args.steps, args.jobs)
        except (ConfigError, StudyError) as exc:
            print(f"configuration error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        except MeshError as exc:
            print(f"mesh error: {exc}", file=sys.stderr)
            return EXIT_MESH
        except (NewtonError, LinearSolveError) as exc:
            print(f"solver failure: {exc}", file=sys.stderr)
            return EXIT_SOLVER
        print(f"{'level':>5} {'cells':>7} {'h':>10} {'step':>5}  errors")
        for row in table["rows"]:
            errs = " ".join(f"{k}={v:.3e}" for k, v in row["errors"].items())
            print(f"{row['level']:>5} {row['cells']:>7} {row['h']:>10.4e} {row['step']:>5}  {errs}")
        for key, s in table["slopes"].items():
            print(f"slope {key}: {s:.3f}")
        if args.output:
            Path(args.output).write_text(json.dumps(table, indent=2) + "\n", encoding="utf-8")
        return EXIT_OK
    if args.command == "make-channel-mesh":
        try:
            mesh = channel_mesh(args.level, args.base_cells)
        except MeshError as exc:
            print(f"mesh error: {exc}", file=sys.stderr)
            return EXIT_MESH
        save_mesh(mesh, args.output)
        print(f"{mesh.n_cells} cells written to {args.output}")
        return EXIT_OK
    return EXIT_CONFIG  # pragma: no cover


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
