import csv
import json
import shutil

import numpy as np
import pytest
import yaml

from splashmhd.cli import (EXIT_INVALID, EXIT_OK, ScenarioConfig, cmd_norms, config_from_dict,
                           load_config, main)
from splashmhd.conformal import ConformalMap
from splashmhd.errors import MissingCheckpoint, ValidationError
from splashmhd.geometry import arclength_normalize, circle, write_curve
from splashmhd.mesh_fields import build_mesh
from splashmhd.picard import PicardConfig, reference_from_nodal, run_picard

# one short slab per member keeps an end-to-end run at a few seconds
QUICK = {"discretization": {"dt": 0.0025, "slab": 0.01, "norm": "l2h1"},
         "experiment": {"epsilons": [0.01], "t_bar": 0.01}}


def _write(tmp_path, data, name="scenario.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(data))
    return p


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# --- configuration ---------------------------------------------------------------

def test_config_round_trip():
    cfg = config_from_dict({"norms": {"s": 2.3, "gamma": 1.2}, "experiment": {"epsilons": [0.02]}})
    again = config_from_dict(yaml.safe_load(cfg.dump()))
    assert again == cfg
    assert config_from_dict(None) == ScenarioConfig()


@pytest.mark.parametrize("data", [{"solver": {}}, {"norms": {"order": 2}}, {"norms": 3},
                                  {"norms": {"s": "high"}}, [1, 2]])
def test_malformed_config_rejected(data):
    with pytest.raises(ValidationError):
        config_from_dict(data)


@pytest.mark.parametrize("section,kw", [
    ("norms", {"s": 2.0}), ("norms", {"gamma": 1.3}), ("discretization", {"dt": 0.0}),
    ("discretization", {"h_target": -0.1}), ("discretization", {"slab": 0.01, "dt": 0.005}),
    ("experiment", {"epsilons": [0.01, -0.01]}), ("experiment", {"epsilons": []}),
    ("domain", {"preset": "square"}), ("domain", {"preset": None}),
    ("outputs", {"cadence": 0})])
def test_range_checks(section, kw):
    with pytest.raises(ValidationError):
        config_from_dict({section: kw})


def test_sobolev_index_out_of_range_exits_invalid(tmp_path, capsys):
    p = _write(tmp_path, {"norms": {"s": 3.0}})
    assert main(["check", str(p)]) == EXIT_INVALID
    assert main(["run", str(p)]) == EXIT_INVALID
    err = capsys.readouterr().err
    assert "2 < s < 5/2" in err


def test_unreadable_config_exits_invalid(tmp_path, capsys):
    assert main(["check", str(tmp_path / "missing.yaml")]) == EXIT_INVALID
    bad = tmp_path / "bad.yaml"
    bad.write_text("norms: [unclosed")
    assert main(["check", str(bad)]) == EXIT_INVALID


def test_thread_variable_must_be_integer(tmp_path, monkeypatch):
    monkeypatch.setenv("SPLASHMHD_THREADS", "many")
    assert main(["run", str(_write(tmp_path, QUICK))]) == EXIT_INVALID


# --- check ----------------------------------------------------------------------------

def test_check_of_preset_passes(tmp_path, capsys):
    assert main(["check", str(_write(tmp_path, {}))]) == EXIT_OK
    out = capsys.readouterr().out.splitlines()
    assert out and all(line.startswith("PASS") for line in out)
    assert any("Q2 = det J" in line for line in out)


def test_check_flags_sign_changing_flux(tmp_path, capsys):
    # a single slow cosine: the flux changes sign and is negative on one aimed arc
    p = _write(tmp_path, {"initial": {"psi0": {"a": [0.0, 1.0], "b": [0.0, 0.0]}}})
    assert main(["check", str(p)]) == EXIT_INVALID
    out = capsys.readouterr().out
    assert "FAIL" in out and "psi0' > 0" in out


def test_check_reports_curve_on_branch_cut(tmp_path, capsys):
    # physical circle crossing the default cut (downward ray from alpha = 0)
    write_curve(circle(64, 0.5, (0.0, -1.0)), tmp_path / "dom.csv")
    p = _write(tmp_path, {"domain": {"preset": None, "file": "dom.csv", "plane": "physical"},
                          "experiment": {"b": [1.0, 0.0]}})
    assert main(["check", str(p)]) == EXIT_INVALID
    out = capsys.readouterr().out
    msg = out.split("PointOnBranchCut", 1)[1]
    # the message carries the offending point
    assert "-0.5j" in msg and "branch cut" in msg


# --- run --------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def quick_run(tmp_path_factory):
    d = tmp_path_factory.mktemp("quick")
    p = _write(d, {**QUICK, "outputs": {"directory": "out"}})
    assert main(["run", str(p)]) == EXIT_OK
    return p, d / "out"


def test_run_writes_artifacts(quick_run):
    _, out = quick_run
    for name in ("config.yaml", "report.json", "distances.csv", "norms.csv", "stability.csv"):
        assert (out / name).exists(), name
    rep = json.loads((out / "report.json").read_text())
    assert set(rep["per_epsilon"]) == {"0.0", "0.01"}
    assert len(list(out.glob("curves_eps_*.csv"))) == 2
    rows = _rows(out / "norms.csv")
    assert {r["eps"] for r in rows} == {"0.0", "0.01"}
    for r in rows:
        assert float(r["energy"]) == pytest.approx(float(r["kinetic"]) + float(r["magnetic"]),
                                                   rel=1e-12)
    # the written config reloads to the same scenario
    assert load_config(out / "config.yaml").to_dict() == load_config(quick_run[0]).to_dict()


def test_run_is_bitwise_reproducible(quick_run, tmp_path):
    p, out = quick_run
    assert main(["run", str(p), "-o", str(tmp_path / "again")]) == EXIT_OK
    for f in sorted(out.glob("*.csv")) + [out / "report.json"]:
        assert (tmp_path / "again" / f.name).read_bytes() == f.read_bytes(), f.name


def test_zero_magnetic_field_run(tmp_path):
    data = {**QUICK, "initial": {"h0_stream": []}}
    assert main(["run", str(_write(tmp_path, data)), "-o", str(tmp_path / "o")]) == EXIT_OK
    rows = _rows(tmp_path / "o" / "norms.csv")
    assert all(float(r["magnetic"]) == 0.0 for r in rows)
    assert all(float(r["kinetic"]) > 0.0 for r in rows)


@pytest.mark.slow
def test_preset_defaults_detect_a_splash(tmp_path):
    assert main(["run", str(_write(tmp_path, {})), "-o", str(tmp_path / "o")]) == EXIT_OK
    rep = json.loads((tmp_path / "o" / "report.json").read_text())
    detected = [m["t_star"] for e, m in rep["per_epsilon"].items()
                if e != "0.0" and m["t_star"] is not None]
    assert detected


# --- norms ------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def disk():
    return build_mesh(arclength_normalize(circle(64, 0.5, (1.5, 0.5))), 0.2)


def _checkpoint(mesh, root, v0, G0):
    ref = reference_from_nodal(mesh, ConformalMap(0j), v0, G0)
    cfg = PicardConfig(T=0.05, n_steps=4, max_halvings=0, compute_ball=False)
    run_picard(None, ref.cmap, config=cfg, reference=ref, checkpoint_dir=root)


def test_norms_of_zero_data_checkpoints(tmp_path, disk):
    z = np.zeros((disk.n_nodes, 2))
    _checkpoint(disk, tmp_path / "ck", z, z)
    assert cmd_norms(tmp_path / "ck") == EXIT_OK
    rows = _rows(tmp_path / "ck" / "norms.csv")
    assert len(rows) == 2
    for r in rows:
        assert all(float(r[k]) == 0.0 for k in ("w_K", "q_Kpr", "G_A", "ball_N"))
    # X stays the label map, so its norm is that of omega in every iteration
    assert rows[0]["X_A"] == rows[1]["X_A"] and float(rows[0]["X_A"]) > 0
    assert float(rows[1]["diff_total"]) == 0.0


@pytest.fixture(scope="module")
def converged_checkpoints(tmp_path_factory, disk):
    root = tmp_path_factory.mktemp("conv") / "ck"
    x, y = disk.nodes.T
    v0 = 0.1 * np.stack([-(y - 0.5), x - 1.5], -1)
    _checkpoint(disk, root, v0, np.stack([0.1 + 0 * x, 0.05 * x], -1))
    return root


def test_norm_diffs_decrease_over_iterations(converged_checkpoints, tmp_path):
    out = tmp_path / "n.csv"
    assert main(["norms", str(converged_checkpoints), "-o", str(out)]) == EXIT_OK
    rows = _rows(out)
    diffs = [float(r["diff_total"]) for r in rows[1:]]
    assert len(diffs) >= 3
    assert all(b < a for a, b in zip(diffs, diffs[1:]))
    assert float(rows[0]["ball_N"]) > 0


def test_norms_independent_of_checkpoint_write_order(converged_checkpoints, tmp_path):
    # copy the iteration folders newest first: values come from the folder names only
    copy = tmp_path / "ck"
    copy.mkdir()
    for f in converged_checkpoints.iterdir():
        if f.is_file():
            shutil.copy(f, copy / f.name)
    for d in sorted(converged_checkpoints.glob("iter_*"), reverse=True):
        shutil.copytree(d, copy / d.name)
    for d in sorted(converged_checkpoints.glob("ref_*")):
        if d.is_dir():
            shutil.copytree(d, copy / d.name)
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    cmd_norms(converged_checkpoints, out=a)
    cmd_norms(copy, out=b)
    assert a.read_bytes() == b.read_bytes()


def test_norms_without_checkpoints(tmp_path, capsys):
    with pytest.raises(MissingCheckpoint):
        cmd_norms(tmp_path)
    assert main(["norms", str(tmp_path)]) == EXIT_INVALID
