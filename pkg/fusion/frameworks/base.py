import logging
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass
from datetime import datetime
from typing import Any, Callable, Dict, FrozenSet, List, Optional, Sequence, Tuple, Type

import numpy as np

from fusion.core import AxisSet, FinitePmf, cell_index, marginal
from fusion.exceptions import FrameworkMismatchError, FusionError, SpaceMismatchError
from fusion.influence import (
    decompose_algorithm,
    eif_project,
    gradient_residual,
    lift_to_observed,
    two_source_solve,
    variance,
)
from fusion.model import AlignmentSpec, FusedLaw
from fusion.operator import FusedModel, IdealFunction, ObsFunction

logger = logging.getLogger("Fusion.Frameworks")

QMap = Callable[[FusedLaw], FinitePmf]


@dataclass
class FrameworkConfig:
    """Configuration for a framework instance."""
    kind: str
    space: AxisSet
    params: Dict[str, Any] = None
    strict: bool = True
    check: bool = True

    def __post_init__(self):
        if self.params is None:
            self.params = {}


@dataclass
class FrameworkResult:
    """Result from a framework computation."""
    kind: str
    success: bool
    data: Dict[str, Any] = None
    error: Optional[str] = None
    exit_code: int = 0
    execution_time: float = 0.0
    timestamp: datetime = None

    def __post_init__(self):
        if self.data is None:
            self.data = {}
        if self.timestamp is None:
            self.timestamp = datetime.now()

    def arrays(self) -> Dict[str, np.ndarray]:
        """Observed functions in the result, keyed by name."""
        return {k: v for k, v in self.data.items() if isinstance(v, np.ndarray)}

    def to_dict(self) -> Dict[str, Any]:
        scalars = {k: v for k, v in self.data.items() if not isinstance(v, np.ndarray)}
        return {
            "success": self.success,
            "error": self.error,
            "execution_time": self.execution_time,
            "timestamp": self.timestamp.isoformat(),
            **scalars,
        }


class BaseFramework(ABC):
    """Base class for fused-data frameworks (Q-model, alignments, psi, phi)."""

    kind: str = ""

    def __init__(self, config: FrameworkConfig):
        """Initialize the framework.

        Args:
            config: Framework configuration; ``space`` is the ideal space W.
        """
        self.config = config
        self.space = config.space
        self.params = dict(config.params)
        self.logger = logging.getLogger(f"Fusion.Frameworks.{self.kind}")
        self.validate_config()

    @abstractmethod
    def validate_config(self) -> None:
        """Check the axes and parameters against the ideal space.

        Raises:
            FrameworkMismatchError: If the space cannot carry this framework.
        """
        pass

    @abstractmethod
    def alignment(self) -> AlignmentSpec:
        pass

    @abstractmethod
    def ideal_functional(self, Q: FinitePmf) -> float:
        pass

    @abstractmethod
    def ideal_influence(self, Q: FinitePmf) -> IdealFunction:
        pass

    @abstractmethod
    def phi(self, P: FusedLaw) -> float:
        """Identification functional evaluated at an observed law."""
        pass

    @abstractmethod
    def influence(self, P: FusedLaw) -> ObsFunction:
        """Closed-form observed influence function."""
        pass

    @abstractmethod
    def ideal_from_observed(self, P: FusedLaw) -> FinitePmf:
        """One ideal law in the C-equivalence class identified by P."""
        pass

    def q_maps(self) -> List[QMap]:
        """Maps P -> Q used by the obedient projection."""
        return [self.ideal_from_observed]

    def tangent_basis(self, Q: FinitePmf) -> Optional[np.ndarray]:
        """Columns spanning T(Q,Q); None for a nonparametric ideal model."""
        return None

    def bind(self, P: FusedLaw, Q: Optional[FinitePmf] = None) -> FusedModel:
        Q = self.ideal_from_observed(P) if Q is None else Q
        if not self.config.check:
            return FusedModel.unchecked(Q, self.alignment(), P, self.tangent_basis(Q))
        return FusedModel.bind(
            Q, self.alignment(), P=P, tangent_basis=self.tangent_basis(Q), strict=self.config.strict
        )

    def relaxed(self) -> "BaseFramework":
        """Same framework with alignment and positivity checks switched off."""
        config = FrameworkConfig(self.kind, self.space, dict(self.params), strict=False, check=False)
        return type(self)(config)

    def efficient_influence(self, P: FusedLaw) -> ObsFunction:
        return eif_project(self.bind(P), self.influence(P))

    def pipeline_influence(self, P: FusedLaw) -> ObsFunction:
        """Observed influence function through DECOMPOSE (or the two-source solver) and the lift."""
        model = self.bind(P)
        psi = self.ideal_influence(model.Q)
        if model.n_sources == 2:
            dec = two_source_solve(model, psi)
        else:
            dec = decompose_algorithm(model.d_bases, psi)
        return lift_to_observed(model, dec)

    def compute(self, P: FusedLaw, what: str, Q: Optional[FinitePmf] = None) -> Dict[str, Any]:
        """Named computation used by the CLI: phi, if, eif or demo.

        Array entries are observed functions; every other entry is a scalar.
        """
        if what == "demo":
            return self.demo(P, Q)
        if what not in ("phi", "if", "eif"):
            raise FrameworkMismatchError(f"{self.kind} cannot compute '{what}'")
        model = self.bind(P, Q)
        if what == "phi":
            phi = self.phi(P)
            psi = self.ideal_functional(model.Q)
            return {"phi": phi, "psi": psi, "identification_gap": abs(phi - psi)}
        psi1 = self.ideal_influence(model.Q)
        phi1 = self.influence(P)
        data: Dict[str, Any] = {
            "influence": phi1,
            "variance": variance(P, phi1),
            "gradient_residual": gradient_residual(model, phi1, psi1),
            "pipeline_agreement": None,
        }
        try:
            data["pipeline_agreement"] = float(np.max(np.abs(self.pipeline_influence(P) - phi1)))
        except FusionError as e:
            self.logger.info(f"Generic pipeline unavailable for {self.kind}: {e}")
        if what == "eif":
            eff = self.efficient_influence(P)
            data["efficient"] = eff
            data["efficient_variance"] = variance(P, eff)
            data["projection_agreement"] = float(np.max(np.abs(eif_project(model, phi1) - eff)))
            data["efficient_gradient_residual"] = gradient_residual(model, eff, psi1)
        return data

    def demo(self, P: FusedLaw, Q: Optional[FinitePmf] = None) -> Dict[str, Any]:
        raise FrameworkMismatchError("The naive-versus-efficient comparison needs GenericUBFull")

    def run(self, P: FusedLaw, what: str, Q: Optional[FinitePmf] = None) -> FrameworkResult:
        """Run a computation and wrap the outcome.

        Returns:
            FrameworkResult with the computed data, or the error and its exit code.
        """
        start_time = time.time()
        try:
            data = self.compute(P, what, Q)
            execution_time = time.time() - start_time
            self.logger.info(f"{self.kind} computed '{what}' in {execution_time:.2f}s")
            return FrameworkResult(self.kind, True, data, execution_time=execution_time)
        except FusionError as e:
            execution_time = time.time() - start_time
            self.logger.error(f"{self.kind} failed to compute '{what}': {e}")
            return FrameworkResult(
                self.kind, False, error=str(e), exit_code=e.exit_code, execution_time=execution_time
            )

    def get_status(self) -> Dict[str, Any]:
        return {
            "kind": self.kind,
            "axes": list(self.space.names),
            "params": {k: _plain(v) for k, v in self.params.items()},
            "strict": self.config.strict,
        }

    # ----- helpers shared by the frameworks -----

    def require_axes(self, names: Sequence[str]) -> None:
        missing = [n for n in names if n not in self.space]
        if missing:
            raise FrameworkMismatchError(f"{self.kind} needs axes {missing} in {self.space.names}")

    def require_binary(self, name: str) -> None:
        levels = tuple(self.space.levels(name))
        if levels != (0, 1):
            raise FrameworkMismatchError(f"{self.kind} needs axis '{name}' with levels (0, 1), got {levels}")


def _plain(value: Any) -> Any:
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    return value


FRAMEWORKS: Dict[str, Type[BaseFramework]] = {}


def register_framework(cls: Type[BaseFramework]) -> Type[BaseFramework]:
    FRAMEWORKS[cls.kind] = cls
    return cls


def create_framework(kind: str, space: AxisSet, strict: bool = True, **params: Any) -> BaseFramework:
    """Instantiate a registered framework by kind name."""
    try:
        cls = FRAMEWORKS[kind]
    except KeyError:
        raise FrameworkMismatchError(
            f"Unknown framework kind '{kind}'; expected one of {sorted(FRAMEWORKS)}"
        ) from None
    return cls(FrameworkConfig(kind, space, params, strict))


def all_cells(space: AxisSet, axes: Sequence[str]) -> FrozenSet[Tuple[Any, ...]]:
    """Every level combination of ``axes`` (an always-aligned region)."""
    return frozenset(space.sub(tuple(axes)).cells())


def indicator(space: AxisSet, axes: Sequence[str], cell: Sequence[Any]) -> np.ndarray:
    """1(axes == cell) at every cell of ``space``."""
    axes = tuple(axes)
    target = space.sub(axes).flat_index(tuple(cell))
    return (cell_index(space, axes) == target).astype(float)


def marginal_at(law: FinitePmf, axes: Sequence[str], space: AxisSet) -> np.ndarray:
    """Marginal mass of ``law`` over ``axes`` read at every cell of ``space``."""
    axes = tuple(axes)
    return marginal(law, axes).mass[cell_index(space, axes)]


def on_sources(space: AxisSet, C: AlignmentSpec, pieces: Sequence[np.ndarray]) -> ObsFunction:
    """Concatenate per-source functions given on W cells into an observed function.

    Each piece must depend on W only through the source's observed axes.
    """
    if len(pieces) != C.n_sources:
        raise SpaceMismatchError("One piece per source is required")
    out = []
    for spec, piece in zip(C.sources, pieces):
        index = cell_index(space, spec.observed)
        representative = np.zeros(space.sub(spec.observed).size, dtype=np.intp)
        representative[index] = np.arange(space.size)
        out.append(np.asarray(piece, dtype=float)[representative])
    return np.concatenate(out)


def source_at_ideal(space: AxisSet, C: AlignmentSpec, P: FusedLaw, j: int) -> np.ndarray:
    """p(. | S=j) of the observed part of each W cell (0-based j)."""
    return P.laws[j].mass[cell_index(space, C.sources[j].observed)]
