import json

import pytest

from qbsde.cli import ExperimentConfig, main
from qbsde.errors import ConfigError

INDICATOR = {"kind": "indicator_halfline", "threshold": 0, "left": 0, "right": 1}
HALF = {"kind": "constant", "c": 0.5}
SQUARE = {"kind": "polynomial", "coeffs": [0, 0, 1]}


def run_cli(tmp_path, cfg, *extra):
    path = tmp_path / "cfg.json"
    out = tmp_path / "out"
    path.write_text(json.dumps(cfg))
    code = main(["--config", str(path), "--out-dir", str(out), *extra])
    report = (out / "report.txt").read_text() if (out / "report.txt").exists() else ""
    return code, report, out


def test_transform_check(tmp_path):
    code, report, out = run_cli(tmp_path, {"experiment": "transform-check",
                                           "scenario": {"f": INDICATOR}})
    assert code == 0
    assert "u(1)=3.19453" in report
    assert "ODE residual u" in report
    assert (out / "transform.csv").read_text().startswith("x,u,du\n")
    manifest = (out / "manifest.csv").read_text()
    assert "version.numpy" in manifest and "timestamp" in manifest


def test_pure_quadratic_three_methods(tmp_path):
    cfg = {"experiment": "pure-quadratic",
           "scenario": {"f": HALF, "g": {"kind": "identity"}, "T": 1, "expected_y0": 0.5},
           "numerics": {"M": 20000, "N": 25}}
    code, report, out = run_cli(tmp_path, cfg)
    assert code == 0
    for tag in ("Y0 quadrature", "Y0 pde", "Y0 lsmc"):
        assert tag in report
    assert "|delta|" in report
    assert (out / "lattice.csv").read_text().startswith("t,x,Y,Z,L,U\n")


def test_assumptions_flag_divergence(tmp_path):
    cfg = {"experiment": "assumptions", "scenario": {"f": HALF, "g": SQUARE, "T": 1}}
    code, report, _ = run_cli(tmp_path, cfg)
    assert code == 2
    assert "divergence_flag=true" in report
    assert "(A2) violated (heuristic)" in report


def test_assumptions_pass_for_identity(tmp_path):
    cfg = {"experiment": "assumptions",
           "scenario": {"f": HALF, "g": {"kind": "identity"}, "T": 1, "theta": 0.5},
           "numerics": {"M": 20000}}
    code, report, out = run_cli(tmp_path, cfg)
    assert code == 0
    assert "divergence_flag=false" in report
    assert "(A4)" in report
    assert (out / "assumptions.csv").exists()


def test_integrability_error_exits_one(tmp_path):
    cfg = {"experiment": "pure-quadratic", "scenario": {"f": HALF, "g": SQUARE, "T": 1}}
    code, report, _ = run_cli(tmp_path, cfg)
    assert code == 1
    assert "(A2)" in report


@pytest.mark.parametrize("cfg", [
    {"experiment": "nope", "scenario": {}},
    {"experiment": "pure-quadratic", "scenario": {"f": HALF}},
    {"experiment": "transform-check", "scenario": {"f": HALF}, "numerics": {"R": -1}},
    {"experiment": "transform-check", "scenario": {"f": HALF}, "numerics": {"bogus": 1}},
    {"experiment": "transform-check", "scenario": {"f": HALF}, "numerics": {"n": 10.5}},
    {"experiment": "transform-check", "scenario": {"f": {"kind": "mystery"}}},
])
def test_invalid_configs_exit_one(tmp_path, cfg):
    code, _, _ = run_cli(tmp_path, cfg)
    assert code == 1


def test_config_validation_happens_before_work():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"experiment": "comparison", "scenario": {"f": HALF, "g": HALF}})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"experiment": "convergence", "scenario": {"g": HALF}, "seed": -1})


def test_flag_overrides(tmp_path):
    cfg = {"experiment": "transform-check", "scenario": {"f": HALF}}
    code, report, _ = run_cli(tmp_path, cfg, "--seed", "42", "--experiment", "transform-check")
    assert code == 0 and "seed: 42" in report


def test_missing_config_file(tmp_path):
    assert main(["--config", str(tmp_path / "missing.json")]) == 1


@pytest.mark.parametrize("experiment,scenario", [
    ("comparison", {"f": {"kind": "constant", "c": 0.2}, "f2": HALF, "g": {"kind": "cos"},
                    "g2": {"kind": "sum", "terms": [{"kind": "cos"}, 0.5]}}),
    ("log-equivalence", {"gamma": 1, "alpha": 0.2, "beta": 0.3, "g": {"kind": "cos"}}),
    ("convergence", {"g": {"kind": "cos"}}),
    ("theta-linear", {"theta": 0.5, "g": {"kind": "polynomial", "coeffs": [5, 1]}}),
])
def test_other_experiments_pass(tmp_path, experiment, scenario):
    cfg = {"experiment": experiment, "scenario": scenario, "numerics": {"M": 50000}}
    code, report, _ = run_cli(tmp_path, cfg)
    assert code == 0, report
    assert "verdict: PASS" in report


def test_domination_solve(tmp_path):
    gen = {"terms": [{"kind": "alpha", "coef": 0.3}, {"kind": "beta_y", "coef": 0.2},
                     {"kind": "f_zsq", "f": {"kind": "constant", "c": 0.3}}]}
    cfg = {"experiment": "domination-solve",
           "scenario": {"generator": gen, "f": {"kind": "constant", "c": 0.4}, "alpha": 0.3,
                        "beta": 0.2, "g": {"kind": "sinusoid"}},
           "numerics": {"M": 20000, "N": 25}}
    code, report, _ = run_cli(tmp_path, cfg)
    assert code == 0, report
    assert "envelope containment" in report
