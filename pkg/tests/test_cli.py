from __future__ import annotations

import json

import numpy as np
import pytest

from layerhom.cli import main
from layerhom.config import ConfigError, config_hash, load_config, parse_config
from layerhom.vtk import read_structured_points, write_structured_points

CYL = {"type": "cylinder", "center": [0.5, 0.5, 0.0], "radius": 0.3, "height": 1.2, "axis": "z"}


def write(tmp_path, doc, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return str(p)


def test_config_hash_is_canonical():
    assert config_hash({"b": 1, "a": [1.0, 2]}) == config_hash({"a": [1.0, 2], "b": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})


def test_schema_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="geometry"):
        parse_config({"geometry": {"resolution": 8, "colour": "red"}})
    with pytest.raises(ConfigError):
        parse_config({"geometry": {"resolution": 2}})


def test_t_must_be_multiple_of_dt():
    with pytest.raises(ConfigError):
        parse_config({"geometry": {"resolution": 8}, "numerics": {"dt": 0.3, "T": 1.0}})


def test_initial_solid_shape_checked():
    doc = {"geometry": {"resolution": 8}, "numerics": {"n_sigma": 4}, "initial": {"c_s": [[0.0] * 3] * 3}}
    with pytest.raises(ConfigError, match="shape"):
        parse_config(doc)
    doc["physics"] = {"gamma_regime": "one"}
    doc["initial"] = {"c_s": [[0.0] * 4] * 4}
    with pytest.raises(ConfigError, match="scalar"):
        parse_config(doc)


def test_inputs_resolved_relative_to_config(tmp_path):
    (tmp_path / "t.json").write_text("{}")
    cfg = load_config(write(tmp_path, {"geometry": {"resolution": 8}, "inputs": {"tensors": "t.json"}}))
    assert cfg.input_path("tensors") == tmp_path / "t.json"
    with pytest.raises(ConfigError, match="not found"):
        load_config(write(tmp_path, {"geometry": {"resolution": 8}, "inputs": {"dstar": "nope.json"}}))


def test_malformed_json_exit_code(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text('{\n  "geometry": {"resolution": 8,}\n}')
    assert main(["validate", "--config", str(p)]) == 2
    err = capsys.readouterr().err
    assert "line 2" in err and "column" in err


def test_validate_modes(tmp_path, capsys):
    assert main(["validate", "--config", write(tmp_path, {"geometry": {"resolution": 8, "solids": [CYL]}})]) == 0
    assert "COUPLED eligible" in capsys.readouterr().out
    col = {"type": "box", "lo": [0.25, 0.25, -1], "hi": [0.75, 0.75, 1]}
    assert main(["validate", "--config", write(tmp_path, {"geometry": {"resolution": 8, "clearance_check": False, "solids": [col]}})]) == 0
    assert "IMPERMEABLE mode (|S_s^±|>0)" in capsys.readouterr().out
    slab = {"type": "box", "lo": [0, 0, -0.25], "hi": [1, 1, 0.25]}
    assert main(["validate", "--config", write(tmp_path, {"geometry": {"resolution": 8, "solids": [slab]}})]) == 2
    assert "fluid phase has 2" in capsys.readouterr().err


def test_cell_flow_empty_and_cylinder(tmp_path):
    out = tmp_path / "empty"
    assert main(["cell-flow", "--config", write(tmp_path, {"geometry": {"resolution": 8}}), "--out", str(out)]) == 0
    doc = json.loads((out / "tensors.json").read_text())
    assert doc["K_plus"][0][0] == pytest.approx(0.25, abs=1e-10)
    assert len(doc["config_hash"]) == 64
    assert set(doc["provenance"]["modes"]) == {"TANGENTIAL_PLUS_1", "TANGENTIAL_PLUS_2", "TANGENTIAL_MINUS_1",
                                               "TANGENTIAL_MINUS_2", "NORMAL"}
    out = tmp_path / "cyl"
    cfg = write(tmp_path, {"geometry": {"resolution": 8, "solids": [CYL]}, "outputs": {"formats": ["json", "vtk"]}}, "c.json")
    assert main(["cell-flow", "--config", cfg, "--out", str(out), "--threads", "2"]) == 0
    doc = json.loads((out / "tensors.json").read_text())
    assert doc["provenance"]["coercivity_margin"] > 0
    vtk = read_structured_points(out / "cell_normal.vtk")
    assert vtk["dimensions"] == (9, 9, 17) and vtk["vectors"]["velocity"].shape == (8 * 8 * 16, 3)


def test_cell_diffusion(tmp_path):
    slab = {"type": "box", "lo": [0, 0, -0.25], "hi": [1, 1, 0.25]}
    cfg = write(tmp_path, {"geometry": {"resolution": 8, "solids": [slab]}, "physics": {"D_s": 2.0}})
    assert main(["cell-diffusion", "--config", cfg, "--out", str(tmp_path)]) == 0
    D = np.array(json.loads((tmp_path / "dstar.json").read_text())["D_star"])
    np.testing.assert_allclose(D, np.eye(2), atol=1e-10)
    assert main(["cell-diffusion", "--config", write(tmp_path, {"geometry": {"resolution": 8}}, "e.json")]) == 2


def _demo(tmp_path, **physics):
    d = tmp_path / "cell"
    main(["cell-flow", "--config", write(tmp_path, {"geometry": {"resolution": 8, "solids": [CYL]}}, "g.json"), "--out", str(d)])
    main(["cell-diffusion", "--config", write(tmp_path, {"geometry": {"resolution": 8, "solids": [CYL]}}, "g.json"), "--out", str(d)])
    return {
        "geometry": {"resolution": 8, "solids": [CYL]},
        "physics": {"gamma_regime": "minus_one", "kinetics": {"variant": "linear", "k": 1.0},
                    "forcing": {"f_plus": [1.0, 0.0, 0.0]}, **physics},
        "numerics": {"dt": 0.01, "T": 0.1, "n_sigma": 8, "nz": 4},
        "initial": {"c_f": {"type": "gaussian", "center": [0.5, 0.5, 0.2], "width": 0.2}, "c_s": 0.0},
        "inputs": {"tensors": "cell/tensors.json", "dstar": "cell/dstar.json"},
        "outputs": {"directory": "run", "cadence": 5, "formats": ["csv", "json", "vtk"]},
    }


def test_macro_run_outputs_and_determinism(tmp_path, capsys):
    cfg = write(tmp_path, _demo(tmp_path), "run.json")
    assert main(["macro-run", "--config", cfg]) == 0
    out = capsys.readouterr().out
    assert "conservation_drift=" in out and "energy_trend=" in out
    run = tmp_path / "run"
    summary = json.loads((run / "summary.json").read_text())
    assert summary["conservation_drift"] < 1e-10 and summary["completed"]
    first = {p.name: p.read_bytes() for p in run.iterdir()}
    h = summary["config_hash"]
    assert first["transport.csv"].decode().startswith(f"# config_hash={h}\n")
    assert main(["macro-run", "--config", cfg]) == 0
    assert first == {p.name: p.read_bytes() for p in run.iterdir()}


def test_macro_run_zero_forcing_flat_ledgers(tmp_path):
    doc = _demo(tmp_path)
    doc["physics"] = {"gamma_regime": "intermediate", "kinetics": {"variant": "zero"}}
    doc["initial"] = {"c_f": 1.0, "c_s": 0.5}
    del doc["inputs"]["dstar"]
    assert main(["macro-run", "--config", write(tmp_path, doc, "z.json")]) == 0
    rows = [l.split(",") for l in (tmp_path / "run" / "transport.csv").read_text().splitlines()[2:]]
    assert len({r[3] for r in rows}) == 1
    flows = [l.split(",") for l in (tmp_path / "run" / "flow.csv").read_text().splitlines()[2:]]
    assert all(float(r[1]) == 0.0 for r in flows)


def test_macro_run_missing_tensors(tmp_path):
    doc = _demo(tmp_path)
    del doc["inputs"]["tensors"]
    assert main(["macro-run", "--config", write(tmp_path, doc, "m.json")]) == 2
    assert main(["macro-run", "--config", write(tmp_path, _demo(tmp_path), "m2.json"), "--tensors", "/nonexistent.json"]) == 2


def test_macro_run_failure_flushes_snapshot(tmp_path, capsys):
    doc = _demo(tmp_path)
    doc["physics"]["forcing"] = {"f_plus": [3000.0, 0.0, 0.0]}
    assert main(["macro-run", "--config", write(tmp_path, doc, "f.json")]) == 3
    run = tmp_path / "run"
    assert (run / "last_good_fluid.vtk").exists()
    assert json.loads((run / "summary.json").read_text())["completed"] is False
    assert "CFL" in capsys.readouterr().err


def test_threads_env(tmp_path, monkeypatch):
    monkeypatch.setenv("LAYERHOM_THREADS", "x")
    assert main(["cell-flow", "--config", write(tmp_path, {"geometry": {"resolution": 4}}), "--out", str(tmp_path)]) == 2
    monkeypatch.setenv("LAYERHOM_THREADS", "3")
    assert main(["cell-flow", "--config", write(tmp_path, {"geometry": {"resolution": 4}}), "--out", str(tmp_path)]) == 0


def test_vtk_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    s = rng.random((3, 4, 5))
    v = rng.random((3, 4, 5, 3))
    p = write_structured_points(tmp_path / "a.vtk", (3, 4, 5), (0.1, 0.2, 0.3), scalars={"s": s}, vectors={"v": v})
    d = read_structured_points(p)
    np.testing.assert_array_equal(d["scalars"]["s"], s.ravel(order="F"))
    np.testing.assert_array_equal(d["vectors"]["v"][:, 1], v[..., 1].ravel(order="F"))
    assert d["spacing"] == (0.1, 0.2, 0.3) and d["ncell"] == 60
    with pytest.raises(ValueError):
        write_structured_points(tmp_path / "b.vtk", (3, 4, 5), (1, 1, 1), scalars={"s": s[:2]})
