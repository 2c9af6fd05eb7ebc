import json

import numpy as np
import pandas as pd
import pytest

from fusion import io
from fusion.core import AxisSet, RealTable
from fusion.exceptions import FileFormatError, FrameworkMismatchError, ModelFileError
from fusion.frameworks import create_framework


@pytest.fixture
def model_path(tmp_path, prevalence_case):
    """Prevalence model file with explicit source laws."""
    fw, Q, P = prevalence_case
    path = tmp_path / "model.json"
    io.write_json(path, io.model_to_dict(Q, fw.alignment(), P, {"kind": "Prevalence"}))
    return path


def test_model_file_round_trip(model_path, prevalence_case):
    """Test a written model file loads back to the same laws and binds."""
    fw, Q, P = prevalence_case
    model_file = io.load_model(model_path)
    assert model_file.Q.mass == pytest.approx(Q.mass, abs=0)
    assert model_file.C == fw.alignment()
    assert model_file.framework_kind == "Prevalence"
    model = model_file.bind(fw=model_file.framework())
    assert model.P.obs_weights() == pytest.approx(P.obs_weights(), abs=1e-15)


def test_derive_from_ideal(tmp_path, prevalence_case):
    """Test source laws default to the marginals of Q with equal weights."""
    fw, Q, _ = prevalence_case
    path = tmp_path / "derived.json"
    io.write_json(path, io.model_to_dict(Q, fw.alignment()))
    model_file = io.load_model(path)
    assert model_file.source_laws is None
    P = model_file.observed_law(model_file.C)
    assert P.weights == pytest.approx([0.5, 0.5])
    model = model_file.bind()
    assert model.n_sources == 2


def test_missing_and_malformed_files(tmp_path):
    """Test unreadable files raise the file-format error."""
    with pytest.raises(FileFormatError) as excinfo:
        io.load_model(tmp_path / "absent.json")
    assert excinfo.value.exit_code == 64
    broken = tmp_path / "broken.json"
    broken.write_text("{not json", encoding="utf-8")
    with pytest.raises(FileFormatError):
        io.load_model(broken)


def test_schema_violation(tmp_path):
    """Test documents missing required keys are rejected."""
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"ideal": {"axes": [{"name": "X", "levels": [0, 1]}], "mass": [0.5, 0.5]}}))
    with pytest.raises(ModelFileError):
        io.load_model(path)


def test_framework_mismatch(model_path):
    """Test a framework whose alignments differ from the file's is refused."""
    model_file = io.load_model(model_path)
    other = create_framework("Prevalence", model_file.space, covariates=("V",), outcome="Y", proxy="X")
    with pytest.raises(FrameworkMismatchError):
        model_file.alignment(other)


def test_load_table_broadcasts(tmp_path):
    """Test a table on a subset of the axes is read at every cell."""
    space = AxisSet.of(X=(0, 1), Y=(0, 1, 2))
    path = tmp_path / "psi.json"
    io.write_json(path, io.table_to_dict(RealTable(space.sub(("Y",)), np.array([1.0, -1.0, 0.5]))))
    values = io.load_table(path, space)
    assert values.shape == (6,)
    assert values[space.flat_index((1, 2))] == 0.5


def test_source_codec_keeps_regions(prevalence_case):
    fw, Q, _ = prevalence_case
    for spec in fw.alignment().sources:
        assert io.source_from_dict(io.source_to_dict(spec), Q.space) == spec


def test_dumps_is_deterministic():
    """Test keys are sorted and floats survive the text form exactly."""
    value = 0.1 + 0.2
    text = io.dumps({"b": np.float64(value), "a": np.arange(2), "c": np.bool_(True), "d": float("nan")})
    assert text.endswith("\n")
    assert text.index('"a"') < text.index('"b"')
    data = json.loads(text)
    assert data["b"] == value
    assert data["a"] == [0, 1]
    assert data["c"] is True
    assert data["d"] == "nan"


def test_frame_to_csv_precision():
    frame = pd.DataFrame({"x": [1.0 / 3.0]})
    text = io.frame_to_csv(frame)
    assert text.splitlines()[0] == "x"
    assert float(text.splitlines()[1]) == 1.0 / 3.0
    assert "\r" not in text


def test_atomic_write_leaves_no_temp_files(tmp_path):
    """Test writers leave only the target file behind."""
    target = tmp_path / "out" / "curves.csv"
    io.write_csv(target, pd.DataFrame({"p": [0.5]}))
    io.write_json(tmp_path / "out" / "report.json", {"ok": True})
    assert sorted(p.name for p in target.parent.iterdir()) == ["curves.csv", "report.json"]


def test_obs_frame_labels(prevalence_case):
    _, _, P = prevalence_case
    frame = io.obs_frame(P, {"influence": np.zeros(P.n_cells)})
    assert list(frame.columns) == ["source", "cell", "influence"]
    assert set(frame["source"]) == {1, 2}
    assert len(frame) == P.n_cells
