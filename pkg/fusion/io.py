"""
Model and table files, JSON codec and atomic artifact writers.
"""

import json
import logging
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd
from jsonschema import ValidationError, validate

from fusion.core import AxisSet, FinitePmf, RealTable, marginal
from fusion.exceptions import FileFormatError, FrameworkMismatchError, ModelFileError
from fusion.frameworks.base import BaseFramework, all_cells, create_framework
from fusion.model import AlignmentSpec, FusedLaw, MarginalFlag, Region, SourceSpec
from fusion.operator import FusedModel

logger = logging.getLogger("Fusion.IO")

SCHEMA_DIR = Path(__file__).resolve().parent.parent / "config"
MODEL_SCHEMA_PATH = os.getenv("FUSION_MODEL_SCHEMA_PATH", str(SCHEMA_DIR / "model_schema.json"))
TABLE_SCHEMA_PATH = os.getenv("FUSION_TABLE_SCHEMA_PATH", str(SCHEMA_DIR / "table_schema.json"))
FLOAT_FORMAT = "%.17g"

PathLike = Union[str, Path]


# ----- codec -----

def space_to_list(space: AxisSet) -> List[Dict[str, Any]]:
    return [{"name": name, "levels": list(levels)} for name, levels in space.axes]


def space_from_list(axes: Sequence[Mapping[str, Any]]) -> AxisSet:
    return AxisSet(tuple((axis["name"], tuple(axis["levels"])) for axis in axes))


def pmf_to_dict(p: FinitePmf) -> Dict[str, Any]:
    return {"axes": space_to_list(p.space), "mass": [float(m) for m in p.mass]}


def pmf_from_dict(data: Mapping[str, Any]) -> FinitePmf:
    return FinitePmf(space_from_list(data["axes"]), np.asarray(data["mass"], dtype=float))


def table_to_dict(t: RealTable) -> Dict[str, Any]:
    return {"axes": space_to_list(t.space), "values": [float(v) for v in t.values]}


def table_from_dict(data: Mapping[str, Any]) -> RealTable:
    return RealTable(space_from_list(data["axes"]), np.asarray(data["values"], dtype=float))


def _region_to_json(region: Region) -> Any:
    if isinstance(region, MarginalFlag):
        return region.value
    return sorted(list(cell) for cell in region)


def _region_from_json(value: Any, space: AxisSet, history: Sequence[str]) -> Region:
    if value in (MarginalFlag.STAR.value, MarginalFlag.EMPTY.value):
        return MarginalFlag(value)
    if value == "all":
        return all_cells(space, history)
    if value == "none":
        return frozenset()
    return frozenset(tuple(cell) for cell in value)


def source_to_dict(spec: SourceSpec) -> Dict[str, Any]:
    return {
        "id": spec.source_id,
        "blocks": [list(block) for block in spec.blocks],
        "regions": [_region_to_json(r) for r in spec.regions],
    }


def source_from_dict(data: Mapping[str, Any], space: AxisSet) -> SourceSpec:
    blocks = tuple(tuple(block) for block in data["blocks"])
    observed = tuple(axis for block in blocks for axis in block)
    regions = []
    for k, value in enumerate(data["regions"]):
        history = tuple(axis for block in blocks[:k] for axis in block)
        regions.append(_region_from_json(value, space, history))
    return SourceSpec(int(data["id"]), observed, blocks, tuple(regions))


def to_jsonable(value: Any) -> Any:
    """Plain JSON types for numpy scalars and arrays, tuples and dataclass dicts."""
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [to_jsonable(v) for v in value.tolist()]
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if np.isfinite(value) else str(value)
    return value


def dumps(data: Any) -> str:
    """Deterministic JSON text; floats use the shortest exact decimal form."""
    return json.dumps(to_jsonable(data), indent=2, sort_keys=True) + "\n"


# ----- reading -----

def load_json(path: PathLike) -> Any:
    """Read a JSON document.

    Raises:
        FileFormatError: If the file is missing or not valid JSON.
    """
    path = Path(path)
    if not path.exists():
        raise FileFormatError(f"File not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise FileFormatError(f"Invalid JSON in {path}: {e}") from e
    except OSError as e:
        raise FileFormatError(f"Cannot read {path}: {e}") from e


def validate_document(document: Any, schema_path: PathLike, name: str) -> None:
    """Validate a document against a JSON schema.

    Raises:
        ModelFileError: If the document does not match the schema.
    """
    schema = load_json(schema_path)
    try:
        validate(instance=document, schema=schema)
    except ValidationError as e:
        raise ModelFileError(f"Validation failed for {name}: {e.message}") from e
    logger.debug(f"Validation successful for {name}")


@dataclass(frozen=True, eq=False)
class ModelFile:
    """Contents of a model file, before binding."""
    Q: FinitePmf
    C: Optional[AlignmentSpec]
    lam: np.ndarray
    source_laws: Optional[List[FinitePmf]]
    tangent_basis: Optional[np.ndarray] = None
    framework_kind: Optional[str] = None
    framework_params: Optional[Dict[str, Any]] = None

    @property
    def space(self) -> AxisSet:
        return self.Q.space

    def alignment(self, fw: Optional[BaseFramework] = None) -> AlignmentSpec:
        """The file's alignments, checked against a framework's when both exist."""
        if fw is None:
            if self.C is None:
                raise ModelFileError("The model file has neither sources nor a framework")
            return self.C
        expected = fw.alignment()
        if self.C is not None and self.C != expected:
            raise FrameworkMismatchError(f"The file's sources do not carry the {fw.kind} alignments")
        return expected

    def observed_law(self, C: AlignmentSpec) -> FusedLaw:
        if len(self.lam) != C.n_sources:
            raise ModelFileError(f"lambda has {len(self.lam)} entries for {C.n_sources} sources")
        if self.source_laws is None:
            laws = [marginal(self.Q, spec.observed) for spec in C.sources]
        else:
            laws = list(self.source_laws)
            if len(laws) != C.n_sources:
                raise ModelFileError(f"{len(laws)} source laws for {C.n_sources} sources")
            for j, (law, spec) in enumerate(zip(laws, C.sources)):
                if law.space != C.source_space(self.space, j):
                    raise ModelFileError(f"Source law {j + 1} is not on axes {spec.observed}")
        return FusedLaw.from_weights(self.lam, laws)

    def framework(self, kind: Optional[str] = None, strict: bool = True) -> BaseFramework:
        kind = kind or self.framework_kind
        if not kind:
            raise ModelFileError("No framework kind given on the command line or in the file")
        params = dict(self.framework_params or {}) if kind == self.framework_kind else {}
        return create_framework(kind, self.space, strict=strict, **params)

    def bind(self, strict: bool = True, fw: Optional[BaseFramework] = None) -> FusedModel:
        """Bind (Q, C, P); the file's Q is the ideal law, P its source laws."""
        C = self.alignment(fw)
        basis = self.tangent_basis
        if basis is None and fw is not None:
            basis = fw.tangent_basis(self.Q)
        return FusedModel.bind(self.Q, C, P=self.observed_law(C), tangent_basis=basis, strict=strict)


def parse_model(document: Mapping[str, Any]) -> ModelFile:
    """Build a ModelFile from a schema-valid document."""
    Q = pmf_from_dict(document["ideal"])
    C = None
    if "sources" in document:
        C = AlignmentSpec(tuple(source_from_dict(s, Q.space) for s in document["sources"]))
    laws = None
    if not document.get("derive_from_ideal", False):
        if "source_laws" not in document:
            raise ModelFileError("Either source_laws or derive_from_ideal: true is required")
        laws = [pmf_from_dict(p) for p in document["source_laws"]]
    basis = document.get("tangent_basis")
    framework = document.get("framework", {})
    return ModelFile(
        Q=Q,
        C=C,
        lam=np.asarray(document["lambda"], dtype=float),
        source_laws=laws,
        tangent_basis=None if basis is None else np.asarray(basis, dtype=float).T,
        framework_kind=framework.get("kind"),
        framework_params=framework.get("params"),
    )


def load_model(path: PathLike) -> ModelFile:
    """Read, schema-validate and parse a model file."""
    document = load_json(path)
    validate_document(document, MODEL_SCHEMA_PATH, str(path))
    model = parse_model(document)
    logger.info(f"Loaded model {path}: W axes {model.space.names}")
    return model


def load_table(path: PathLike, space: AxisSet) -> np.ndarray:
    """Read a real table and broadcast it to every cell of ``space``."""
    document = load_json(path)
    validate_document(document, TABLE_SCHEMA_PATH, str(path))
    return table_from_dict(document).at(space)


def model_to_dict(
    Q: FinitePmf,
    C: AlignmentSpec,
    P: Optional[FusedLaw] = None,
    framework: Optional[Mapping[str, Any]] = None,
) -> Dict[str, Any]:
    """Model-file document; without P the source laws are derived from Q."""
    document: Dict[str, Any] = {
        "ideal": pmf_to_dict(Q),
        "sources": [source_to_dict(s) for s in C.sources],
    }
    if P is None:
        document["lambda"] = [1.0 / C.n_sources] * C.n_sources
        document["derive_from_ideal"] = True
    else:
        document["lambda"] = [float(w) for w in P.weights]
        document["source_laws"] = [pmf_to_dict(law) for law in P.laws]
    if framework:
        document["framework"] = dict(framework)
    return document


# ----- writing -----

def _atomic_write(path: PathLike, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path: PathLike, data: Any) -> None:
    _atomic_write(path, dumps(data))
    logger.info(f"Wrote {path}")


def frame_to_csv(frame: pd.DataFrame) -> str:
    return frame.to_csv(index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


def write_csv(path: PathLike, frame: pd.DataFrame) -> None:
    _atomic_write(path, frame_to_csv(frame))
    logger.info(f"Wrote {path} ({len(frame)} rows)")


def obs_frame(P: FusedLaw, columns: Mapping[str, np.ndarray]) -> pd.DataFrame:
    """One row per observed cell: source, cell label and the given functions."""
    frame = pd.DataFrame({
        "source": P.source_labels() + 1,
        "cell": [label.split("|", 1)[1] for label in P.cell_labels()],
    })
    for name, values in columns.items():
        frame[name] = np.asarray(values, dtype=float)
    return frame


def matrix_frame(matrix: np.ndarray, row_labels: Sequence[str], col_labels: Sequence[str]) -> pd.DataFrame:
    """Matrix with a leading row-label column and a header naming the columns."""
    frame = pd.DataFrame(np.asarray(matrix, dtype=float), columns=list(col_labels))
    frame.insert(0, "row", list(row_labels))
    return frame
