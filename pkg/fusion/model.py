"""
Alignment collections, observed (fused) laws and their validation.

A source observes a permutation of a subset of the ideal axes, split into
consecutive blocks Z_1, ..., Z_K. For block k the conditional law of Z_k given
the history Z_1..Z_{k-1} is aligned with the ideal law on a region of
histories. For k = 1 the history is trivial and the region is a MarginalFlag.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, FrozenSet, List, Optional, Sequence, Tuple, Union

import numpy as np

from fusion.core import (
    AxisSet,
    FinitePmf,
    cell_index,
    marginal,
)
from fusion.exceptions import (
    AlignmentError,
    PositivityError,
    SpaceMismatchError,
    StrongAlignmentError,
    ZeroMassError,
)

logger = logging.getLogger("Fusion.Model")

ALIGNMENT_TOLERANCE = 1e-9


class MarginalFlag(Enum):
    """Region convention for the first block."""
    STAR = "star"    # marginal of Z_1 aligned
    EMPTY = "empty"  # marginal of Z_1 not aligned


Region = Union[MarginalFlag, FrozenSet[Tuple[Any, ...]]]


@dataclass(frozen=True)
class SourceSpec:
    """One source: observed axes in factorization order, blocks and regions."""
    source_id: int
    observed: Tuple[str, ...]
    blocks: Tuple[Tuple[str, ...], ...]
    regions: Tuple[Region, ...]

    def __post_init__(self):
        object.__setattr__(self, "observed", tuple(self.observed))
        object.__setattr__(self, "blocks", tuple(tuple(b) for b in self.blocks))
        regions = tuple(
            r if isinstance(r, MarginalFlag) else frozenset(tuple(c) for c in r)
            for r in self.regions
        )
        object.__setattr__(self, "regions", regions)
        flat = tuple(axis for block in self.blocks for axis in block)
        if flat != self.observed or any(not block for block in self.blocks):
            raise SpaceMismatchError(
                f"Blocks {self.blocks} do not partition observed axes {self.observed}"
            )
        if len(self.regions) != len(self.blocks):
            raise SpaceMismatchError(f"Source {self.source_id}: one region per block required")
        if not isinstance(self.regions[0], MarginalFlag):
            raise SpaceMismatchError(f"Source {self.source_id}: first region must be star or empty")
        for k, region in enumerate(self.regions[1:], start=1):
            if isinstance(region, MarginalFlag):
                raise SpaceMismatchError(f"Source {self.source_id}: block {k + 1} needs a level set")
            width = len(self.history(k))
            if any(len(cell) != width for cell in region):
                raise SpaceMismatchError(
                    f"Source {self.source_id}: region of block {k + 1} needs {width}-tuples"
                )

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    def history(self, k: int) -> Tuple[str, ...]:
        """Axes of Z_1..Z_k (0-based k: axes before block k)."""
        return tuple(axis for block in self.blocks[:k] for axis in block)

    def through(self, k: int) -> Tuple[str, ...]:
        """Axes of Z_1..Z_{k+1} (0-based k: up to and including block k)."""
        return self.history(k + 1)

    def is_aligned(self, k: int) -> bool:
        region = self.regions[k]
        if isinstance(region, MarginalFlag):
            return region is MarginalFlag.STAR
        return bool(region)


@dataclass(frozen=True)
class AlignmentSpec:
    """The alignment collection C."""
    sources: Tuple[SourceSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "sources", tuple(self.sources))
        if not self.sources:
            raise SpaceMismatchError("At least one source is required")
        ids = [s.source_id for s in self.sources]
        if ids != list(range(1, len(ids) + 1)):
            raise SpaceMismatchError(f"Source ids must be 1..J, got {ids}")

    @property
    def n_sources(self) -> int:
        return len(self.sources)

    def source_space(self, ideal: AxisSet, j: int) -> AxisSet:
        """Space of Z^(j) (0-based j) in factorization order."""
        return ideal.sub(self.sources[j].observed)


def region_mask(space: AxisSet, spec: SourceSpec, k: int) -> np.ndarray:
    """Whether the block-k history of each cell of ``space`` lies in the region."""
    region = spec.regions[k]
    if isinstance(region, MarginalFlag):
        return np.full(space.size, region is MarginalFlag.STAR)
    history = spec.history(k)
    sub = space.sub(history)
    inside = np.zeros(sub.size, dtype=bool)
    for cell in region:
        inside[sub.flat_index(cell)] = True
    return inside[cell_index(space, history)]


def block_conditional(law: FinitePmf, spec: SourceSpec, k: int) -> Tuple[np.ndarray, np.ndarray]:
    """law(Z_k | history) at each cell of ``law.space`` and the history mass.

    ``law`` lives on a space containing the source's observed axes; undefined
    conditionals (zero history mass) are 0.
    """
    space = law.space
    through = spec.through(k)
    history = spec.history(k)
    num = np.bincount(cell_index(space, through), weights=law.mass, minlength=space.sub(through).size)
    den = np.bincount(cell_index(space, history), weights=law.mass, minlength=space.sub(history).size)
    num_cells = num[cell_index(space, through)]
    den_cells = den[cell_index(space, history)]
    values = np.divide(num_cells, den_cells, out=np.zeros_like(den_cells), where=den_cells > 0)
    return values, den_cells


@dataclass(frozen=True, eq=False)
class FusedLaw:
    """Observed-data law: source weights and one law per source."""
    lam: FinitePmf
    laws: Tuple[FinitePmf, ...]
    floored: int = 0

    def __post_init__(self):
        object.__setattr__(self, "laws", tuple(self.laws))
        if self.lam.space.size != len(self.laws):
            raise SpaceMismatchError("One source law per level of S is required")
        if np.any(self.lam.mass <= 0):
            raise PositivityError("Every source needs positive weight")

    @classmethod
    def from_weights(cls, weights: Sequence[float], laws: Sequence[FinitePmf], floored: int = 0) -> "FusedLaw":
        space = AxisSet((("S", tuple(range(1, len(laws) + 1))),))
        return cls(FinitePmf.from_weights(space, weights), tuple(laws), floored)

    @property
    def n_sources(self) -> int:
        return len(self.laws)

    @property
    def weights(self) -> np.ndarray:
        return self.lam.mass

    @property
    def sizes(self) -> Tuple[int, ...]:
        return tuple(law.space.size for law in self.laws)

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.sizes)])

    @property
    def n_cells(self) -> int:
        return int(sum(self.sizes))

    def obs_weights(self) -> np.ndarray:
        """P mass of every observed cell (source blocks concatenated)."""
        return np.concatenate([w * law.mass for w, law in zip(self.weights, self.laws)])

    def source_labels(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_sources), self.sizes)

    def cell_labels(self) -> List[str]:
        return [
            f"S={j + 1}|{label}"
            for j, law in enumerate(self.laws)
            for label in law.space.labels()
        ]

    def split(self, values: np.ndarray) -> List[np.ndarray]:
        """Split an observed-space vector into per-source pieces."""
        off = self.offsets
        return [values[off[j]:off[j + 1]] for j in range(self.n_sources)]


@dataclass
class AlignmentReport:
    """Outcome of an alignment check."""
    aligned: bool
    discrepancies: Dict[Tuple[int, int], float] = field(default_factory=dict)
    violations: List[str] = field(default_factory=list)
    strong: Optional[Tuple[float, float]] = None
    tolerance: float = ALIGNMENT_TOLERANCE

    @property
    def flagged(self) -> List[Tuple[int, int]]:
        return [key for key, value in self.discrepancies.items() if value > self.tolerance]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "aligned": self.aligned,
            "tolerance": self.tolerance,
            "discrepancies": [
                {"source": j, "block": k, "max_abs_diff": value}
                for (j, k), value in sorted(self.discrepancies.items())
            ],
            "flagged": [{"source": j, "block": k} for j, k in self.flagged],
            "violations": list(self.violations),
            "strong": None if self.strong is None else {"delta": self.strong[0], "epsilon": self.strong[1]},
        }


def _check_spaces(P: FusedLaw, Q: FinitePmf, C: AlignmentSpec) -> None:
    if P.n_sources != C.n_sources:
        raise SpaceMismatchError(f"Law has {P.n_sources} sources, alignment spec {C.n_sources}")
    for j, law in enumerate(P.laws):
        expected = C.source_space(Q.space, j)
        if law.space != expected:
            raise SpaceMismatchError(
                f"Source {j + 1} law on {law.space.names}, expected {expected.names}"
            )


def check_alignment(
    P: FusedLaw, Q: FinitePmf, C: AlignmentSpec, tolerance: float = ALIGNMENT_TOLERANCE
) -> AlignmentReport:
    """Compare aligned conditionals of every source with Q on their regions."""
    _check_spaces(P, Q, C)
    report = AlignmentReport(aligned=True, tolerance=tolerance)
    for j, spec in enumerate(C.sources):
        q_j = marginal(Q, spec.observed)
        p_j = P.laws[j]
        for k in range(spec.n_blocks):
            if not spec.is_aligned(k):
                continue
            mask = region_mask(p_j.space, spec, k)
            q_cond, q_hist = block_conditional(q_j, spec, k)
            p_cond, p_hist = block_conditional(p_j, spec, k)
            # region histories carry mass under both laws
            q_missing = mask & (q_hist <= 0)
            p_missing = mask & (p_hist <= 0) & (q_hist > 0)
            if np.any(q_missing):
                report.violations.append(f"source {j + 1} block {k + 1}: region history with zero Q mass")
            if np.any(p_missing):
                report.violations.append(f"source {j + 1} block {k + 1}: region history with zero P mass")
            check = mask & (q_hist > 0) & (p_hist > 0)
            diff = float(np.max(np.abs(q_cond - p_cond)[check], initial=0.0))
            report.discrepancies[(j + 1, k + 1)] = diff
    report.aligned = not report.flagged and not report.violations
    if not report.aligned:
        logger.info(f"Alignment failed: flagged={report.flagged} violations={report.violations}")
    return report


def check_strong_alignment(
    P: FusedLaw,
    Q: FinitePmf,
    U: Sequence[FinitePmf],
    C: AlignmentSpec,
    tolerance: float = ALIGNMENT_TOLERANCE,
) -> Tuple[float, float]:
    """Tightest two-sided bounds (delta, epsilon) on history density ratios.

    delta bounds dP(.|S=j)/dQ on aligned regions, epsilon bounds
    dP(.|S=j)/dU^(j) off them; each bound is max(r, 1/r) over cells.
    """
    report = check_alignment(P, Q, C, tolerance)
    if not report.aligned:
        raise AlignmentError("Strong alignment requires alignment", report)
    delta, epsilon = 1.0, 1.0
    for j, spec in enumerate(C.sources):
        q_j = marginal(Q, spec.observed)
        p_j = P.laws[j]
        u_j = U[j]
        if u_j.space != p_j.space:
            raise SpaceMismatchError(f"U^({j + 1}) lives on {u_j.space.names}")
        for k in range(1, spec.n_blocks):
            history = spec.history(k)
            index = cell_index(p_j.space, history)
            p_hist = marginal(p_j, history).mass[index]
            q_hist = marginal(q_j, history).mass[index]
            u_hist = marginal(u_j, history).mass[index]
            mask = region_mask(p_j.space, spec, k)
            on = mask & (p_hist > 0)
            off = ~mask & (p_hist > 0)
            if np.any(q_hist[on] <= 0):
                raise StrongAlignmentError(f"dP/dQ undefined for source {j + 1} block {k + 1}")
            if np.any(u_hist[off] <= 0):
                raise StrongAlignmentError(f"dP/dU undefined for source {j + 1} block {k + 1}")
            if np.any(on):
                r = p_hist[on] / q_hist[on]
                delta = max(delta, float(np.max(np.maximum(r, 1.0 / r))))
            if np.any(off):
                r = p_hist[off] / u_hist[off]
                epsilon = max(epsilon, float(np.max(np.maximum(r, 1.0 / r))))
    return delta, epsilon


def assemble_observed_law(
    Q: FinitePmf, U: Sequence[FinitePmf], lam: Union[FinitePmf, Sequence[float]], C: AlignmentSpec
) -> FusedLaw:
    """P_{Q,U,lambda}: chain Q conditionals on regions and U conditionals elsewhere."""
    laws = []
    for j, spec in enumerate(C.sources):
        space = C.source_space(Q.space, j)
        u_j = U[j]
        if u_j.space != space:
            raise SpaceMismatchError(f"U^({j + 1}) on {u_j.space.names}, expected {space.names}")
        q_j = marginal(Q, spec.observed)
        mass = np.ones(space.size)
        for k in range(spec.n_blocks):
            mask = region_mask(space, spec, k)
            q_cond, q_hist = block_conditional(q_j, spec, k)
            u_cond, u_hist = block_conditional(u_j, spec, k)
            undefined = np.where(mask, q_hist <= 0, u_hist <= 0)
            if np.any(undefined & (mass > 0)):
                raise ZeroMassError(
                    f"Conditional of block {k + 1} for source {j + 1} undefined on a positive-mass history"
                )
            mass = mass * np.where(mask, q_cond, u_cond)
        laws.append(FinitePmf.from_weights(space, mass))
    weights = lam.mass if isinstance(lam, FinitePmf) else np.asarray(lam, dtype=float)
    return FusedLaw.from_weights(weights, laws)


def canonical_u(P: FusedLaw) -> Tuple[FinitePmf, ...]:
    """U^(j) := P(. | S = j)."""
    return tuple(P.laws)


def c_equivalent(
    Q: FinitePmf, Q_prime: FinitePmf, C: AlignmentSpec, tolerance: float = ALIGNMENT_TOLERANCE
) -> bool:
    """Whether two ideal laws share every aligned conditional on its region."""
    if Q.space != Q_prime.space:
        return False
    for spec in C.sources:
        a = marginal(Q, spec.observed)
        b = marginal(Q_prime, spec.observed)
        for k in range(spec.n_blocks):
            if not spec.is_aligned(k):
                continue
            mask = region_mask(a.space, spec, k)
            a_cond, a_hist = block_conditional(a, spec, k)
            b_cond, b_hist = block_conditional(b, spec, k)
            if np.any(mask & ((a_hist > 0) != (b_hist > 0))):
                return False
            check = mask & (a_hist > 0)
            if np.any(np.abs(a_cond - b_cond)[check] > tolerance):
                return False
    return True
