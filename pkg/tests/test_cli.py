import json

import pandas as pd
import pytest

from fusion import io
from fusion.cli import run
from fusion.core import AxisSet, FinitePmf, RealTable, axis_values
from fusion.frameworks import create_framework
from fusion.model import FusedLaw
from tests.conftest import random_pmf

pytestmark = pytest.mark.integration


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    """Empty working directory without a .env file or FUSION_ overrides."""
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("FUSION_SEED", raising=False)
    return tmp_path


@pytest.fixture
def model_file(workdir, prevalence_case):
    fw, Q, P = prevalence_case
    path = workdir / "model.json"
    io.write_json(path, io.model_to_dict(Q, fw.alignment(), P, {"kind": "Prevalence"}))
    return path


@pytest.fixture
def psi_file(workdir, prevalence_case):
    """Centered outcome indicator as an ideal influence function."""
    _, Q, _ = prevalence_case
    y = axis_values(Q.space, "Y")
    path = workdir / "psi.json"
    io.write_json(path, io.table_to_dict(RealTable(Q.space, y - Q.mass @ y)))
    return path


def test_validate_aligned(model_file, workdir):
    """Test an aligned model validates with exit code 0."""
    report = workdir / "validate.json"
    assert run(["validate", str(model_file), "--out", str(report)]) == 0
    data = json.loads(report.read_text())
    assert data["aligned"] is True
    assert data["positive"] is True


def test_validate_misaligned(workdir, prevalence_case, rng):
    """Test a law outside the model exits with the validation code."""
    fw, Q, P = prevalence_case
    noisy = FusedLaw.from_weights(P.weights, [random_pmf(P.laws[0].space, rng), P.laws[1]])
    path = workdir / "noisy.json"
    io.write_json(path, io.model_to_dict(Q, fw.alignment(), noisy))
    assert run(["validate", str(path)]) == 2


def test_malformed_model_file(workdir):
    path = workdir / "broken.json"
    path.write_text("{", encoding="utf-8")
    assert run(["validate", str(path)]) == 64


def test_usage_errors(workdir):
    """Test unknown subcommands and missing arguments exit with the usage code."""
    assert run(["nonsense"]) == 64
    assert run(["operator"]) == 64
    assert run(["--help"]) == 0


def test_framework_phi(model_file, workdir):
    """Test the framework subcommand reports phi(P) = psi(Q)."""
    report = workdir / "phi.json"
    assert run(["framework", "Prevalence", str(model_file), "--compute", "phi", "--report", str(report)]) == 0
    data = json.loads(report.read_text())
    assert data["phi"] == pytest.approx(data["psi"], abs=1e-10)
    assert data["identification_gap"] < 1e-10
    assert data["framework"]["kind"] == "Prevalence"


def test_framework_eif(model_file, workdir):
    out = workdir / "eif.csv"
    report = workdir / "eif.json"
    code = run(["framework", "Prevalence", str(model_file), "--compute", "eif", "--out", str(out), "--report", str(report)])
    assert code == 0
    frame = pd.read_csv(out)
    assert list(frame.columns) == ["source", "cell", "influence", "efficient"]
    data = json.loads(report.read_text())
    assert data["projection_agreement"] < 1e-8
    assert data["efficient_gradient_residual"] < 1e-8


def test_demo_needs_full_ub_framework(model_file):
    report = model_file.parent / "demo.json"
    assert run(["framework", "Prevalence", str(model_file), "--compute", "demo", "--report", str(report)]) == 2
    data = json.loads(report.read_text())
    assert data["success"] is False
    assert "GenericUBFull" in data["error"]


def test_operator_dump(model_file, workdir):
    """Test the information matrix is written with labeled rows and columns."""
    out = workdir / "info.csv"
    checks = workdir / "ranks.json"
    assert run(["operator", str(model_file), "--dump", "info", "--out", str(out), "--report", str(checks)]) == 0
    frame = pd.read_csv(out)
    assert frame.columns[0] == "row"
    assert frame.shape[0] == frame.shape[1] - 1
    ranks = json.loads(checks.read_text())
    assert ranks["obs_split_ok"] is True
    assert ranks["h_split_ok"] is True
    assert ranks["adjoint_ok"] is True


def test_influence_and_eif(model_file, psi_file, workdir):
    """Test the lifted and solved efficient influence functions agree."""
    lifted = workdir / "lifted.csv"
    solved = workdir / "solved.csv"
    assert run(["influence", str(model_file), "--psi", str(psi_file), "--eif", "--out", str(lifted)]) == 0
    assert run(["eif", str(model_file), "--psi", str(psi_file), "--out", str(solved)]) == 0
    a = pd.read_csv(lifted)["efficient"].to_numpy()
    b = pd.read_csv(solved)["efficient"].to_numpy()
    assert a == pytest.approx(b, abs=1e-8)


def test_decompose(model_file, psi_file, workdir):
    out = workdir / "dec.csv"
    report = workdir / "dec.json"
    assert run(["decompose", str(model_file), "--psi", str(psi_file), "--out", str(out), "--report", str(report)]) == 0
    assert json.loads(report.read_text())["max_reconstruction_error"] < 1e-8
    assert "m_2_2" in pd.read_csv(out).columns


def test_figure(workdir):
    """Test the efficiency curves come out on the default 19-point grid."""
    out = workdir / "are.csv"
    assert run(["figure", "--dgp", "appendix-c", "--out", str(out)]) == 0
    frame = pd.read_csv(out)
    assert list(frame.columns) == ["p_s1", "var_iiia", "var_ii", "var_iiib", "are_ii", "are_iiib"]
    assert len(frame) == 19
    assert (frame["var_iiia"] <= frame[["var_ii", "var_iiib"]].min(axis=1) + 1e-10).all()


def test_figure_design_alias(workdir):
    """Test the case-control alias and the default design write the same curves."""
    alias = workdir / "alias.csv"
    default = workdir / "default.csv"
    assert run(["figure", "--dgp", "case-control", "--grid", "0.3,0.6", "--out", str(alias)]) == 0
    assert run(["figure", "--grid", "0.3,0.6", "--out", str(default)]) == 0
    assert alias.read_text() == default.read_text()
    assert run(["figure", "--dgp", "other"]) == 64


def test_simulate_seed_from_environment(model_file, workdir, monkeypatch):
    """Test FUSION_SEED overrides --seed and reruns are identical."""
    args = ["simulate", str(model_file), "--framework", "Prevalence", "--n", "400", "--reps", "4", "--min-reps", "2"]
    first = workdir / "first.csv"
    second = workdir / "second.csv"
    monkeypatch.setenv("FUSION_SEED", "123")
    assert run(args + ["--seed", "1", "--out", str(first)]) == 0
    assert run(args + ["--seed", "2", "--out", str(second)]) == 0
    assert first.read_text() == second.read_text()
    frame = pd.read_csv(first)
    assert frame["framework"].iloc[0] == "Prevalence"
    assert frame["n"].iloc[0] == 400


def test_simulate_rejects_too_few_replications(model_file):
    code = run(["simulate", str(model_file), "--framework", "Prevalence", "--n", "400", "--reps", "4"])
    assert code == 2


def test_derived_model_validates(workdir):
    """Test a model file without source laws takes them from the ideal law."""
    space = AxisSet.of(X=(0, 1), Y=(0, 1), V=(0, 1))
    fw = create_framework("Prevalence", space)
    Q = FinitePmf.from_weights(space, [1, 2, 3, 4, 5, 6, 7, 8])
    path = workdir / "derived.json"
    io.write_json(path, io.model_to_dict(Q, fw.alignment()))
    assert run(["validate", str(path)]) == 0


def test_unexpected_error_exit_code(model_file, mocker):
    """Test errors outside the fusion hierarchy exit with code 1."""
    mocker.patch("fusion.io.load_model", side_effect=RuntimeError("disk gone"))
    assert run(["validate", str(model_file)]) == 1
