"""
Exact probability arithmetic on finite product spaces.

Cells are enumerated row-major over the declared axis order. Tables, laws and
operators are immutable numpy-backed values.
"""

import itertools
import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Any, Iterable, List, Sequence, Tuple, Union

import numpy as np

from fusion.exceptions import InvalidPmfError, SpaceMismatchError, ZeroMassError

logger = logging.getLogger("Fusion.Core")

NORMALIZATION_TOLERANCE = 1e-12


@dataclass(frozen=True)
class AxisSet:
    """Ordered named categorical axes."""
    axes: Tuple[Tuple[str, Tuple[Any, ...]], ...]

    def __post_init__(self):
        axes = tuple((str(name), tuple(levels)) for name, levels in self.axes)
        object.__setattr__(self, "axes", axes)
        names = [name for name, _ in axes]
        if len(set(names)) != len(names):
            raise SpaceMismatchError(f"Duplicate axis names: {names}")
        for name, levels in axes:
            if not levels:
                raise SpaceMismatchError(f"Axis '{name}' has no levels")
            if len(set(levels)) != len(levels):
                raise SpaceMismatchError(f"Axis '{name}' has duplicate levels")

    @classmethod
    def of(cls, **levels: Sequence[Any]) -> "AxisSet":
        return cls(tuple((name, tuple(values)) for name, values in levels.items()))

    @property
    def names(self) -> Tuple[str, ...]:
        return tuple(name for name, _ in self.axes)

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(len(levels) for _, levels in self.axes)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=int)) if self.axes else 1

    def __contains__(self, name: str) -> bool:
        return name in self.names

    def position(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise SpaceMismatchError(f"Unknown axis '{name}' in {self.names}") from None

    def levels(self, name: str) -> Tuple[Any, ...]:
        return self.axes[self.position(name)][1]

    def sub(self, names: Iterable[str]) -> "AxisSet":
        """Sub-product over ``names`` in the given order."""
        return AxisSet(tuple((name, self.levels(name)) for name in names))

    def cells(self) -> List[Tuple[Any, ...]]:
        return list(itertools.product(*(levels for _, levels in self.axes)))

    def labels(self) -> List[str]:
        names = self.names
        return ["|".join(f"{n}={v}" for n, v in zip(names, cell)) for cell in self.cells()]

    def flat_index(self, cell: Sequence[Any]) -> int:
        if len(cell) != len(self.axes):
            raise SpaceMismatchError(f"Cell {cell} does not match axes {self.names}")
        try:
            coords = [levels.index(value) for (_, levels), value in zip(self.axes, cell)]
        except ValueError:
            raise SpaceMismatchError(f"Cell {cell} outside range of {self.names}") from None
        return int(np.ravel_multi_index(coords, self.shape)) if coords else 0


@lru_cache(maxsize=4096)
def cell_index(space: AxisSet, names: Tuple[str, ...]) -> np.ndarray:
    """Flat index into ``space.sub(names)`` for every cell of ``space``."""
    names = tuple(names)
    if not names or not space.axes:
        index = np.zeros(space.size, dtype=np.intp)
    else:
        coords = np.indices(space.shape).reshape(len(space.axes), -1)
        sub = space.sub(names)
        index = np.ravel_multi_index(tuple(coords[space.position(n)] for n in names), sub.shape)
    index.setflags(write=False)
    return index


def axis_values(space: AxisSet, name: str) -> np.ndarray:
    """Numeric level value of axis ``name`` at every cell."""
    try:
        levels = np.array([float(v) for v in space.levels(name)])
    except (TypeError, ValueError):
        raise SpaceMismatchError(f"Axis '{name}' has non-numeric levels") from None
    return levels[cell_index(space, (name,))]


def _check_subset(space: AxisSet, names: Sequence[str]) -> None:
    for name in names:
        space.position(name)


@dataclass(frozen=True, eq=False)
class FinitePmf:
    """Probability table over an AxisSet."""
    space: AxisSet
    mass: np.ndarray

    def __post_init__(self):
        mass = np.array(self.mass, dtype=float).reshape(-1)
        if mass.size != self.space.size:
            raise SpaceMismatchError(
                f"Mass has {mass.size} cells, space {self.space.names} has {self.space.size}"
            )
        if not np.all(np.isfinite(mass)) or np.any(mass < 0):
            raise InvalidPmfError("Probability mass must be finite and nonnegative")
        total = mass.sum()
        if abs(total - 1.0) > NORMALIZATION_TOLERANCE:
            raise InvalidPmfError(f"Probability mass sums to {total!r}, not 1")
        mass.setflags(write=False)
        object.__setattr__(self, "mass", mass)

    @classmethod
    def from_weights(cls, space: AxisSet, weights: Union[Sequence[float], np.ndarray]) -> "FinitePmf":
        weights = np.asarray(weights, dtype=float).reshape(-1)
        total = weights.sum()
        if not total > 0:
            raise InvalidPmfError("Weights must have positive total")
        return cls(space, weights / total)

    @property
    def support(self) -> np.ndarray:
        return self.mass > 0

    def is_positive(self) -> bool:
        return bool(np.all(self.mass > 0))

    def table(self) -> np.ndarray:
        return self.mass.reshape(self.space.shape)


@dataclass(frozen=True, eq=False)
class RealTable:
    """Real-valued function on the cells of an AxisSet."""
    space: AxisSet
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float).reshape(-1)
        if values.size != self.space.size:
            raise SpaceMismatchError(
                f"Table has {values.size} cells, space {self.space.names} has {self.space.size}"
            )
        if not np.all(np.isfinite(values)):
            raise SpaceMismatchError("Table values must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def at(self, space: AxisSet) -> np.ndarray:
        """Values broadcast to every cell of a space containing this table's axes."""
        for name in self.space.names:
            if space.levels(name) != self.space.levels(name):
                raise SpaceMismatchError(f"Axis '{name}' levels differ")
        return self.values[cell_index(space, self.space.names)]

    def value(self, cell: Sequence[Any]) -> float:
        return float(self.values[self.space.flat_index(cell)])


@dataclass(frozen=True, eq=False)
class LinearOpMatrix:
    """Dense matrix with labelled domain and codomain coordinates."""
    domain: Tuple[str, ...]
    codomain: Tuple[str, ...]
    entries: np.ndarray

    def __post_init__(self):
        entries = np.array(self.entries, dtype=float)
        if entries.shape != (len(self.codomain), len(self.domain)):
            raise SpaceMismatchError(
                f"Matrix shape {entries.shape} does not match "
                f"({len(self.codomain)}, {len(self.domain)})"
            )
        entries.setflags(write=False)
        object.__setattr__(self, "domain", tuple(self.domain))
        object.__setattr__(self, "codomain", tuple(self.codomain))
        object.__setattr__(self, "entries", entries)

    def apply(self, values: np.ndarray) -> np.ndarray:
        return self.entries @ values

    def compose(self, other: "LinearOpMatrix") -> "LinearOpMatrix":
        if other.codomain != self.domain:
            raise SpaceMismatchError("Operator composition with mismatched spaces")
        return LinearOpMatrix(other.domain, self.codomain, self.entries @ other.entries)


def _sub_weights(mass: np.ndarray, index: np.ndarray, size: int) -> np.ndarray:
    return np.bincount(index, weights=mass, minlength=size)


def marginal(p: FinitePmf, keep: Sequence[str]) -> FinitePmf:
    """Marginal law over ``keep`` (in the given order)."""
    keep = tuple(keep)
    sub = p.space.sub(keep)
    mass = _sub_weights(p.mass, cell_index(p.space, keep), sub.size)
    return FinitePmf(sub, mass / mass.sum())


def conditional(
    p: FinitePmf, target: Sequence[str], given: Sequence[str], strict: bool = True
) -> RealTable:
    """Conditional table p(target | given) over the axes ``given + target``.

    Cells whose conditioning slice has zero mass are undefined; they raise in
    strict mode and are set to 0 otherwise.
    """
    target, given = tuple(target), tuple(given)
    if set(target) & set(given):
        raise SpaceMismatchError("Target and conditioning axes must be disjoint")
    joint = marginal(p, given + target)
    den_table = _sub_weights(p.mass, cell_index(p.space, given), p.space.sub(given).size)
    den = den_table[cell_index(joint.space, given)]
    undefined = den <= 0
    if np.any(undefined):
        if strict:
            raise ZeroMassError(f"Zero-mass conditioning cell for {given}")
        logger.debug(f"{int(undefined.sum())} undefined conditional cells set to 0")
    values = np.divide(joint.mass, den, out=np.zeros_like(den), where=~undefined)
    return RealTable(joint.space, values)


def rn_ratio(num: FinitePmf, den: FinitePmf, axes: Sequence[str]) -> RealTable:
    """Ratio of marginal masses over ``axes``; 0 off the support of ``den``."""
    axes = tuple(axes)
    nm, dm = marginal(num, axes), marginal(den, axes)
    if nm.space != dm.space:
        raise SpaceMismatchError(f"Axes {axes} differ between the two laws")
    positive = dm.mass > 0
    values = np.divide(nm.mass, dm.mass, out=np.zeros_like(dm.mass), where=positive)
    return RealTable(dm.space, values)


def cond_exp_operator(
    p: FinitePmf, from_axes: Sequence[str], to_axes: Sequence[str], strict: bool = True
) -> LinearOpMatrix:
    """Matrix M with (M f)(to-cell) = E_p[f | to-cell] for f on the from-axes."""
    from_axes, to_axes = tuple(from_axes), tuple(to_axes)
    if not set(to_axes) <= set(from_axes):
        raise SpaceMismatchError(f"{to_axes} is not a subset of {from_axes}")
    pf = marginal(p, from_axes)
    to_space = p.space.sub(to_axes)
    index = cell_index(pf.space, to_axes)
    den = _sub_weights(pf.mass, index, to_space.size)
    if strict and np.any(den <= 0):
        raise ZeroMassError(f"Zero-mass cell in {to_axes}")
    weights = np.divide(pf.mass, den[index], out=np.zeros_like(pf.mass), where=den[index] > 0)
    entries = np.zeros((to_space.size, pf.space.size))
    entries[index, np.arange(pf.space.size)] = weights
    return LinearOpMatrix(tuple(pf.space.labels()), tuple(to_space.labels()), entries)


def lift_operator(space: AxisSet, axes: Sequence[str]) -> LinearOpMatrix:
    """Broadcast from functions of ``axes`` to functions on ``space``."""
    axes = tuple(axes)
    sub = space.sub(axes)
    entries = np.zeros((space.size, sub.size))
    entries[np.arange(space.size), cell_index(space, axes)] = 1.0
    return LinearOpMatrix(tuple(sub.labels()), tuple(space.labels()), entries)


def projection_matrix(p: FinitePmf, axes: Sequence[str], strict: bool = False) -> np.ndarray:
    """Square matrix of f -> E_p[f | axes] on p's cells (idempotent, self-adjoint in L2(p))."""
    down = cond_exp_operator(p, p.space.names, axes, strict=strict)
    return lift_operator(p.space, axes).compose(down).entries


def conditional_mean(
    p: FinitePmf, values: np.ndarray, given: Sequence[str], strict: bool = False
) -> np.ndarray:
    """E_p[f | given] as a table over ``p.space.sub(given)``."""
    given = tuple(given)
    index = cell_index(p.space, given)
    size = p.space.sub(given).size
    num = _sub_weights(p.mass * values, index, size)
    den = _sub_weights(p.mass, index, size)
    if strict and np.any(den <= 0):
        raise ZeroMassError(f"Zero-mass cell in {given}")
    return np.divide(num, den, out=np.zeros_like(den), where=den > 0)


def expectation_given(
    p: FinitePmf, values: np.ndarray, given: Sequence[str], strict: bool = False
) -> np.ndarray:
    """E_p[f | given] evaluated at every cell of p's space."""
    given = tuple(given)
    return conditional_mean(p, values, given, strict)[cell_index(p.space, given)]


def l2_inner(
    p: FinitePmf, f: Union[RealTable, np.ndarray], g: Union[RealTable, np.ndarray]
) -> float:
    """<f, g> in L2(p)."""
    return float(np.sum(_on_space(p, f) * _on_space(p, g) * p.mass))


def _on_space(p: FinitePmf, f: Union[RealTable, np.ndarray]) -> np.ndarray:
    if isinstance(f, RealTable):
        if f.space != p.space:
            raise SpaceMismatchError(f"Table on {f.space.names}, law on {p.space.names}")
        return f.values
    values = np.asarray(f, dtype=float)
    if values.shape != (p.space.size,):
        raise SpaceMismatchError(f"Array of shape {values.shape} on a {p.space.size}-cell space")
    return values


def mutually_abs_continuous(p: FinitePmf, q: FinitePmf) -> bool:
    if p.space != q.space:
        return False
    return bool(np.array_equal(p.support, q.support))


def floor_pmf(p: FinitePmf, floor: float) -> Tuple[FinitePmf, int]:
    """Raise zero cells to ``floor`` and renormalize; returns the floored-cell count."""
    zero = p.mass <= 0
    count = int(zero.sum())
    if not count:
        return p, 0
    mass = np.where(zero, floor, p.mass)
    return FinitePmf(p.space, mass / mass.sum()), count


def product_pmf(*laws: FinitePmf) -> FinitePmf:
    """Independent product law over the concatenated axes."""
    space = AxisSet(tuple(axis for law in laws for axis in law.space.axes))
    mass = np.ones(1)
    for law in laws:
        mass = np.outer(mass, law.mass).reshape(-1)
    return FinitePmf(space, mass / mass.sum())


def reorder(p: FinitePmf, names: Sequence[str]) -> FinitePmf:
    """Same law with axes permuted to ``names``."""
    names = tuple(names)
    if set(names) != set(p.space.names) or len(names) != len(p.space.names):
        raise SpaceMismatchError(f"{names} is not a permutation of {p.space.names}")
    return marginal(p, names)
