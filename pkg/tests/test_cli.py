import json

import numpy as np
import pytest

from crossflux.channel import channel_mesh
from crossflux.cli import StudyError, aggregate, convergence_study, main, run_scenario
from crossflux.mesh import DIRICHLET, NEUMANN, build_structured_mesh, refine, save_mesh
from crossflux.output import read_vtk_cell_data


def _write(tmp_path, data, name="config.json"):
    p = tmp_path / name
    p.write_text(json.dumps(data))
    return p


def _diffusion(nx=4, ny=2, steps=20, **extra):
    data = {
        "name": "diffusion",
        "species": [{"name": "A", "z": 1, "D": 1.0, "init": {"type": "linear", "left": 0.6, "right": 0.1}}],
        "beta": 1.0, "lambda2": 1.0,
        "time": {"dt": 0.01, "max_steps": steps},
        "mesh": {"structured": {"nx": nx, "ny": ny}},
        "flags": {"drift_enabled": False, "entropy_check": True},
        "output": {"snapshot_steps": [2]},
    }
    data.update(extra)
    return data


def test_run_writes_outputs(tmp_path):
    cfg = _write(tmp_path, _diffusion())
    out = tmp_path / "out"
    assert main(["run", str(cfg), "-o", str(out)]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["exit_code"] == 0 and manifest["steps"] == 20 and manifest["stop_reason"] == "max_steps"
    assert len(manifest["mesh_sha256"]) == 64 and len(manifest["config_sha256"]) == 64
    rows = (out / "diagnostics.csv").read_text().strip().splitlines()
    assert len(rows) == 1 + 21                            # header, initial level, one row per step
    assert (out / "snapshots" / "step_000002.vtk").exists()
    final = np.genfromtxt(out / "final_state.csv", delimiter=",", names=True)
    data = read_vtk_cell_data(out / "final_state.vtk")
    np.testing.assert_array_equal(data["u1"], final["A"])
    np.testing.assert_array_equal(data["u0"], final["u0"])


def test_diagnostics_columns_are_consistent(tmp_path):
    out = tmp_path / "out"
    assert run_scenario(_write(tmp_path, _diffusion()), out) == 0
    table = np.genfromtxt(out / "diagnostics.csv", delimiter=",", names=True)
    np.testing.assert_allclose(table["mass_1"], table["mass_1"][0], rtol=1e-12)
    assert np.all(table["entropy_defect"][1:] <= 1e-8 * (1 + np.abs(table["H"][:-1]) / 0.01))
    assert np.all(np.diff(table["H"]) <= 0)


@pytest.mark.parametrize("text", ["{not json", json.dumps({"species": []}),
                                  json.dumps(_diffusion(species=[{"name": "A", "z": "one", "D": 1}]))])
def test_config_errors_exit_2(tmp_path, text, capsys):
    p = tmp_path / "bad.json"
    p.write_text(text)
    assert main(["run", str(p), "-o", str(tmp_path / "o")]) == 2


def test_config_error_message_names_field(tmp_path, caplog):
    p = _write(tmp_path, _diffusion(species=[{"name": "A", "z": "one", "D": 1}]))
    run_scenario(p, tmp_path / "o")
    assert "species[0].z" in caplog.text


def test_mesh_errors_exit_3(tmp_path):
    mesh = build_structured_mesh(2, 2)
    good = tmp_path / "good.mesh"
    save_mesh(mesh, good)
    assert main(["check-mesh", str(good)]) == 0
    text = good.read_text()
    bad = tmp_path / "bad.mesh"
    # move one center off the perpendicular bisectors
    lines = text.splitlines()
    i = next(k for k, line in enumerate(lines) if line.startswith("cells")) + 1
    parts = lines[i].split()
    parts[-2] = repr(float(parts[-2]) + 0.05)
    lines[i] = " ".join(parts)
    bad.write_text("\n".join(lines) + "\n")
    assert main(["check-mesh", str(bad)]) == 3
    assert main(["check-mesh", str(tmp_path / "missing.mesh")]) == 3
    cfg = _write(tmp_path, _diffusion(mesh={"file": "bad.mesh"}))
    assert main(["run", str(cfg), "-o", str(tmp_path / "o")]) == 3


def test_make_channel_mesh(tmp_path):
    out = tmp_path / "c.mesh"
    assert main(["make-channel-mesh", "--level", "0", "--base-cells", "128", "-o", str(out)]) == 0
    assert main(["check-mesh", str(out)]) == 0


def test_channel_mesh_levels_and_markers():
    coarse = channel_mesh(0, 128)
    fine = channel_mesh(1, 128)
    assert fine.n_cells == 4 * coarse.n_cells
    assert fine.measure == pytest.approx(coarse.measure, rel=1e-12)
    for m in (coarse, fine):
        mids = m.edge_midpoints[m.dirichlet]
        x0, x1 = m.vertices[:, 0].min(), m.vertices[:, 0].max()
        assert np.all(np.isclose(mids[:, 0], x0) | np.isclose(mids[:, 0], x1))
        assert np.count_nonzero(m.edge_kind == NEUMANN) > 0 and np.count_nonzero(m.edge_kind == DIRICHLET) > 0


def test_aggregate_preserves_mass(rng):
    coarse = build_structured_mesh(3, 2)
    fine, parent = refine(coarse)
    v = rng.uniform(size=fine.n_cells)
    agg = aggregate(v, fine.cell_measure, coarse.cell_measure, parent)
    assert coarse.cell_measure @ agg[:, 0] == pytest.approx(fine.cell_measure @ v, rel=1e-14)
    same = aggregate(np.repeat(2.0, fine.n_cells), fine.cell_measure, coarse.cell_measure, parent)
    np.testing.assert_allclose(same, 2.0, rtol=1e-14)


def test_study_of_level_against_itself_vanishes(tmp_path):
    cfg = _write(tmp_path, _diffusion(nx=2, ny=1))
    table = convergence_study(cfg, [0, 1], 2, steps=(3, 6))
    assert all(r["cells"] in (2, 8) for r in table["rows"])
    with pytest.raises(StudyError):
        convergence_study(cfg, [0, 2], 2, steps=(3,))
    # the error of the reference restricted to itself is zero
    from crossflux.cli import _level_snapshots
    from crossflux.scenario import parse_json
    mesh, _ = refine(build_structured_mesh(2, 1))
    snaps = _level_snapshots((parse_json(cfg.read_text()), tmp_path, mesh, (3,)))
    agg = aggregate(snaps[3], mesh.cell_measure, mesh.cell_measure, np.arange(mesh.n_cells))
    assert np.abs(agg - snaps[3]).max() == 0.0


def test_diffusion_errors_decrease_with_h(tmp_path):
    cfg = _write(tmp_path, _diffusion(nx=2, ny=1, steps=10, time={"dt": 0.002, "max_steps": 10}))
    table = convergence_study(cfg, [0, 1, 2], 4, steps=(5, 10))
    for s in (5, 10):
        e = [r["errors"]["A"] for r in table["rows"] if r["step"] == s]
        assert e[0] > e[1] > e[2] > 0
    assert main(["converge", str(cfg), "--levels", "0,1", "--ref", "2", "--steps", "2",
                 "-o", str(tmp_path / "conv.json")]) == 0
    assert "slopes" in json.loads((tmp_path / "conv.json").read_text())


def test_vtk_two_cell_snapshot(tmp_path, two_cells):
    from crossflux.model import State
    from crossflux.output import write_vtk_snapshot
    s = State(np.array([[0.1 + 1e-17, 0.2], [1 / 3, 0.25]]), np.array([np.pi, -np.e]), np.array([0.0, 0.1]))
    p = tmp_path / "s.vtk"
    write_vtk_snapshot(s, two_cells, p)
    text = p.read_text()
    assert "CELLS 2 " in text and "CELL_DATA 2" in text
    data = read_vtk_cell_data(p)
    assert list(data) == ["u0", "u1", "u2", "Phi", "u_imm"]          # n + 3 arrays, fixed order
    np.testing.assert_array_equal(data["u1"], s.u[:, 0])
    np.testing.assert_array_equal(data["Phi"], s.phi)
    np.testing.assert_allclose(data["u0"], s.u0, rtol=0, atol=1e-15)
    write_vtk_snapshot(s, two_cells, tmp_path / "t.vtk")
    assert (tmp_path / "t.vtk").read_bytes() == p.read_bytes()


def test_equilibrium_scenario_stops_at_first_step(tmp_path):
    from pathlib import Path
    cfg = Path(__file__).resolve().parents[1] / "configs" / "equilibrium.json"
    out = tmp_path / "eq"
    assert run_scenario(cfg, out) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert (manifest["stop_reason"], manifest["steps"]) == ("steady", 1)
    table = np.genfromtxt(out / "diagnostics.csv", delimiter=",", names=True)
    for col in ("H", "mass_1", "mass_2", "min_u1", "max_u2"):
        assert np.ptp(table[col]) <= 1e-12
    assert np.all(table["I"] == 0.0)


def test_bit_reproducible_outputs(tmp_path):
    cfg = _write(tmp_path, _diffusion(steps=5))
    run_scenario(cfg, tmp_path / "a")
    run_scenario(cfg, tmp_path / "b")
    for name in ("diagnostics.csv", "final_state.csv", "final_state.vtk", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
