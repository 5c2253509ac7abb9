import json

import numpy as np
import pytest

from fiberflow.cli import main
from fiberflow.config import (ConfigError, RunConfig, parse_beta, parse_manifold,
                              parse_points, parse_potential, parse_section,
                              read_config_file)
from fiberflow.geometry import Circle, Euclidean, OpenSubdomain, Sphere2


def run_cli(args, capsys):
    code = main(args)
    out = capsys.readouterr().out
    return code, (json.loads(out) if out.strip() else None)


# -- grammar -------------------------------------------------------------


def test_parse_manifolds():
    assert isinstance(parse_manifold("euclidean(m=3)"), Euclidean)
    assert isinstance(parse_manifold("sphere2(r=1.0)"), Sphere2)
    assert isinstance(parse_manifold("circle(r=2.0)"), Circle)
    dom = parse_manifold("ball(euclidean(m=2), r=1.0)")
    assert isinstance(dom, OpenSubdomain) and dom.base.dim == 2
    with pytest.raises(ConfigError, match="manifold"):
        parse_manifold("donut(r=1)")


def test_parse_potential_scalar_sum():
    e1 = Euclidean(1)
    V = parse_potential(e1, "harmonic(1.0) + 0.5*constant(2.0)")
    assert V.is_scalar
    assert V.scalar_values(np.array([[2.0]]))[0] == pytest.approx(2.0 + 1.0)


def test_parse_potential_matrix():
    e2 = Euclidean(2)
    V = parse_potential(e2, "matrix(rank=2, const=diag(0.2,0.5), harmonic(1.0) @ pauli_x)")
    assert V.rank == 2
    M = V.matrix(np.array([[1.0, 0.0]]))[0]
    assert M[0, 0] == pytest.approx(0.2)
    assert M[0, 1] == pytest.approx(0.5)  # harmonic(1) at |x| = 1 -> 1/2
    with pytest.raises(ConfigError, match="rank"):
        parse_potential(e2, "matrix(const=diag(1,1))")


def test_parse_section_and_beta():
    e1 = Euclidean(1)
    s = parse_section(e1, "harmonic_ground(1.0)")
    assert s.l2_norm == 1.0
    c = Circle(1.0)
    b = parse_beta(c, "dtheta(0.5)")
    assert b.pair(np.array([[0.0]]), np.array([[2.0]]))[0] == pytest.approx(1.0)
    with pytest.raises(ConfigError, match="beta"):
        parse_beta(c, "vortex(1)")


def test_parse_points_and_auto_grid():
    e2 = Euclidean(2)
    pts = parse_points(e2, "0,0; 1,2")
    assert pts.shape == (2, 2)
    grid = parse_points(e2, "auto:32")
    assert grid.shape == (32, 2)
    with pytest.raises(ConfigError, match="coords"):
        parse_points(e2, "1,2,3")


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="frobnicate"):
        RunConfig.from_mapping({"frobnicate": "1"})


def test_config_round_trip(tmp_path):
    cfgfile = tmp_path / "run.cfg"
    cfgfile.write_text("manifold = euclidean(m=1)\npotential = harmonic(1.0)\n"
                       "t = 0.5  # comment\nseed = 9\n")
    mapping = read_config_file(str(cfgfile))
    cfg = RunConfig.from_mapping(mapping)
    echo = cfg.echo()
    cfg2 = RunConfig.from_mapping(echo)
    assert cfg2.echo() == echo
    assert cfg2.number("t") == 0.5


# -- CLI dispatch --------------------------------------------------------


BASE = ["--manifold", "euclidean(m=1)", "--potential", "harmonic(1.0)",
        "--section", "harmonic_ground(1.0)", "--x", "0"]


def test_semigroup_command(capsys):
    code, doc = run_cli(["semigroup", *BASE, "--t", "0.5", "--h", "1e-3",
                         "--n", "2000", "--seed", "5"], capsys)
    assert code == 0
    assert doc["schema"] == 1 and doc["estimator"] == "scalar"
    assert 0.5 < doc["value"] < 0.8


def test_missing_required_flag_names_key(capsys):
    code = main(["semigroup", *BASE, "--n", "100"])
    err = capsys.readouterr().err
    assert code == 1
    assert "'t'" in err


def test_bad_grammar_exit_code(capsys):
    code = main(["semigroup", "--manifold", "moebius()", "--potential", "harmonic(1.0)",
                 "--section", "constant(1)", "--x", "0", "--t", "0.1"])
    assert code == 1
    assert "manifold" in capsys.readouterr().err


def test_determinism_identical_json(capsys):
    args = ["semigroup", *BASE, "--t", "0.3", "--h", "1e-3", "--n", "1500",
            "--seed", "21"]
    _, doc1 = run_cli(args, capsys)
    _, doc2 = run_cli(args, capsys)
    doc1.pop("wallTimeMs")
    doc2.pop("wallTimeMs")
    assert doc1 == doc2


def test_workers_do_not_change_values(capsys):
    args = ["semigroup", *BASE, "--t", "0.3", "--h", "1e-3", "--n", "3000",
            "--seed", "33"]
    _, d1 = run_cli(args + ["--workers", "1"], capsys)
    _, d4 = run_cli(args + ["--workers", "4"], capsys)
    assert d1["value"] == d4["value"] and d1["stderr"] == d4["stderr"]


def test_env_seed_default(capsys, monkeypatch):
    monkeypatch.setenv("FIBERFLOW_SEED", "777")
    _, doc = run_cli(["semigroup", *BASE, "--t", "0.2", "--n", "500"], capsys)
    assert doc["seed"] == 777


def test_validate_appendix_c(capsys):
    code, doc = run_cli(["validate", "appendix-c", "--trials", "25", "--seed", "7"],
                        capsys)
    assert code == 0
    assert doc["passed"] and not doc["violations"]


def test_exit_time_command(capsys):
    code, doc = run_cli(["exit-time", "--manifold", "euclidean(m=1)", "--x", "0",
                         "--r", "1.0", "--t", "0.2", "--h", "5e-4", "--n", "1000",
                         "--seed", "2"], capsys)
    assert code == 0
    assert 0.9 < doc["infOverStarts"][-1] <= 1.0


def test_kato_check_command(capsys):
    code, doc = run_cli(["kato-check", "--manifold", "euclidean(m=3)",
                         "--potential", "coulomb(0.5)", "--seed", "3"], capsys)
    assert code == 0
    assert doc["verdict"] == "katoConsistent"
    assert abs(doc["fittedDecayExponent"] - 0.5) < 0.1


def test_kato_check_negative_control_exit_code(capsys):
    code, doc = run_cli(["kato-check", "--manifold", "euclidean(m=3)",
                         "--potential", "inverse_square(0.5)", "--seed", "3"], capsys)
    # failsDecay on a declared non-Kato field is the expected verdict, not a
    # failure of the artifact
    assert code == 0
    assert doc["verdict"] == "failsDecay"


def test_identity_check_command(capsys):
    code, doc = run_cli(["identity-check", *BASE, "--s", "0.25", "--t", "0.25",
                         "--h", "1e-3", "--n", "2500", "--seed", "12"], capsys)
    assert code == 0
    assert doc["semigroup_identity"]["passed"]
    assert doc["perturbation_formula"]["passed"]


def test_ground_energy_command(capsys):
    code, doc = run_cli(["ground-energy", "--manifold", "euclidean(m=1)",
                         "--potential", "harmonic(1.0)", "--section",
                         "harmonic_ground(1.0)", "--t-grid", "0.5,1,1.5,2,2.5,3",
                         "--h", "2e-3", "--n", "20000", "--radius", "8",
                         "--seed", "4"], capsys)
    assert code == 0
    assert abs(doc["energy"] - 0.5) < 0.08


def test_dump_paths_csv(tmp_path, capsys):
    out = tmp_path / "paths.csv"
    code, _ = run_cli(["semigroup", *BASE, "--t", "0.05", "--h", "1e-3", "--n", "50",
                       "--seed", "5", "--dump-paths", str(out)], capsys)
    assert code == 0
    lines = out.read_text().strip().splitlines()
    assert lines[0].startswith("path,step,time,coord0,alive,transport")
    assert len(lines) > 100


def test_out_flag_writes_file(tmp_path, capsys):
    out = tmp_path / "res.json"
    code = main(["semigroup", *BASE, "--t", "0.1", "--n", "200", "--seed", "1",
                 "--out", str(out)])
    assert code == 0
    doc = json.loads(out.read_text())
    assert doc["command"] == "semigroup"
