"""
Sampling, empirical laws, model-obedient projection and one-step estimation.
"""

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.stats import norm

from fusion.core import AxisSet, FinitePmf, floor_pmf
from fusion.exceptions import FusionError, FusionValidationError, ZeroMassError
from fusion.frameworks.base import BaseFramework, QMap
from fusion.influence import variance
from fusion.model import AlignmentSpec, FusedLaw, assemble_observed_law, canonical_u, check_alignment
from fusion.settings import settings

logger = logging.getLogger("Fusion.Estimation")

WALD_LEVEL = 0.95


@dataclass(frozen=True, eq=False)
class Dataset:
    """n records (s, z): 0-based source index and flat cell index within the source space."""
    sources: np.ndarray
    cells: np.ndarray
    spaces: Tuple[AxisSet, ...]
    seed: Optional[int] = None

    def __post_init__(self):
        if self.sources.shape != self.cells.shape:
            raise FusionValidationError("Source labels and cells must have equal length")
        for j, space in enumerate(self.spaces):
            cells = self.cells[self.sources == j]
            if cells.size and (cells.min() < 0 or cells.max() >= space.size):
                raise FusionValidationError(f"Record outside the range of source {j + 1}")

    @property
    def n(self) -> int:
        return int(self.sources.shape[0])

    @property
    def records(self) -> List[Tuple[int, Tuple[Any, ...]]]:
        """(source id, level tuple) per record."""
        cells = [space.cells() for space in self.spaces]
        return [(int(s) + 1, cells[s][c]) for s, c in zip(self.sources, self.cells)]

    def counts(self, j: int) -> np.ndarray:
        return np.bincount(self.cells[self.sources == j], minlength=self.spaces[j].size)

    def observed_index(self) -> np.ndarray:
        """Index of every record into the concatenated observed cells."""
        offsets = np.concatenate([[0], np.cumsum([s.size for s in self.spaces])])
        return offsets[self.sources] + self.cells


def sample(
    P: FusedLaw,
    n: int,
    seed: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> Dataset:
    """Draw n i.i.d. records: S from lambda, then Z from P(.|S).

    Raises:
        FusionValidationError: If n < 1.
    """
    if n < 1:
        raise FusionValidationError(f"Sample size must be at least 1, got {n}")
    rng = np.random.default_rng(seed) if rng is None else rng
    sources = rng.choice(P.n_sources, size=n, p=P.weights)
    cells = np.zeros(n, dtype=np.intp)
    for j, law in enumerate(P.laws):
        chosen = np.flatnonzero(sources == j)
        if chosen.size:
            cells[chosen] = rng.choice(law.space.size, size=chosen.size, p=law.mass)
    return Dataset(sources.astype(np.intp), cells, tuple(law.space for law in P.laws), seed)


def empirical_law(d: Dataset, floor: Optional[float] = None) -> FusedLaw:
    """Frequency tables with zero cells raised to ``floor``.

    The result ignores the model's constraints; ``floored`` counts raised cells.

    Raises:
        ZeroMassError: If some source has no records.
    """
    floor = settings.empirical_floor if floor is None else floor
    laws = []
    total = 0
    weights = np.bincount(d.sources, minlength=len(d.spaces)).astype(float)
    for j, space in enumerate(d.spaces):
        counts = d.counts(j).astype(float)
        if counts.sum() == 0:
            raise ZeroMassError(f"Source {j + 1} has no records")
        law, floored = floor_pmf(FinitePmf(space, counts / counts.sum()), floor)
        total += floored
        laws.append(law)
    if total:
        logger.debug(f"Empirical law: floored {total} empty cells at {floor:g}")
    return FusedLaw.from_weights(weights / d.n, laws, floored=total)


def average_ideal(P: FusedLaw, q_maps: Sequence[QMap]) -> FinitePmf:
    """Q = mean of q(P) over the maps."""
    if not q_maps:
        raise FusionValidationError("At least one map P -> Q is required")
    laws = [q(P) for q in q_maps]
    return FinitePmf.from_weights(laws[0].space, np.mean([law.mass for law in laws], axis=0))


@dataclass(frozen=True, eq=False)
class ProjectionResult:
    """Observed law inside the model and the ideal law it was rebuilt from."""
    law: FusedLaw
    ideal: FinitePmf
    discrepancy: float = 0.0
    parameter: Optional[np.ndarray] = None


def obedient_projection(P_tilde: FusedLaw, C: AlignmentSpec, q_maps: Sequence[QMap]) -> ProjectionResult:
    """Rebuild P from the averaged ideal law: aligned blocks from Q, the rest and lambda from P_tilde.

    Raises:
        PositivityError: If some map is undefined at P_tilde.
    """
    Q = average_ideal(P_tilde, q_maps)
    law = assemble_observed_law(Q, canonical_u(P_tilde), P_tilde.lam, C)
    law = FusedLaw(law.lam, law.laws, P_tilde.floored)
    report = check_alignment(law, Q, C)
    if not report.aligned:
        logger.warning(f"Projected law failed the alignment check: {report.flagged}")
    return ProjectionResult(law, Q, kl_divergence(P_tilde, law))


def kl_divergence(P: FusedLaw, R: FusedLaw) -> float:
    """KL(P || R) over the observed cells."""
    p = P.obs_weights()
    r = R.obs_weights()
    support = p > 0
    if np.any(r[support] <= 0):
        return math.inf
    return float(np.sum(p[support] * np.log(p[support] / r[support])))


Discrepancy = Callable[[FusedLaw, FusedLaw], float]


def restricted_projection(
    P_tilde: FusedLaw,
    C: AlignmentSpec,
    family: Callable[[np.ndarray], FinitePmf],
    grid: Sequence[Sequence[float]],
    discrepancy: Discrepancy = kl_divergence,
) -> ProjectionResult:
    """Minimize d(P_tilde, P_theta) over a parameter grid of a restricted ideal model.

    P_theta keeps the non-aligned blocks and lambda of P_tilde.
    """
    best: Optional[ProjectionResult] = None
    for theta in grid:
        theta = np.asarray(theta, dtype=float)
        Q = family(theta)
        try:
            law = assemble_observed_law(Q, canonical_u(P_tilde), P_tilde.lam, C)
        except ZeroMassError:
            continue
        value = discrepancy(P_tilde, law)
        if best is None or value < best.discrepancy:
            best = ProjectionResult(law, Q, value, theta)
    if best is None:
        raise ZeroMassError("No grid point yields a valid observed law")
    logger.debug(f"Restricted projection: theta={best.parameter}, d={best.discrepancy:.3e}")
    return best


@dataclass(frozen=True)
class OneStep:
    """One-step estimate phi(P_hat) + mean of phi1_{P_hat}(O_i)."""
    estimate: float
    se: float
    plug_in: float
    correction: float
    floored: int = 0

    def covers(self, target: float, level: float = WALD_LEVEL) -> bool:
        z = float(norm.ppf(0.5 + level / 2))
        return abs(self.estimate - target) <= z * self.se


def one_step(
    d: Dataset,
    fw: BaseFramework,
    obedient: bool = True,
    efficient: bool = True,
    floor: Optional[float] = None,
) -> OneStep:
    """One-step estimator at the (projected) empirical law.

    Args:
        d: Dataset.
        fw: Framework supplying phi and the influence function.
        obedient: Project the empirical law into the model first.
        efficient: Correct with the efficient influence function.
        floor: Empirical floor; settings.empirical_floor when omitted.

    Raises:
        FusionError: If the framework cannot be evaluated at the estimated law.
    """
    P_tilde = empirical_law(d, floor)
    if obedient:
        P_hat = obedient_projection(P_tilde, fw.alignment(), fw.q_maps()).law
        evaluator = fw
    else:
        P_hat = P_tilde
        evaluator = fw.relaxed()
    plug_in = evaluator.phi(P_hat)
    influence = evaluator.efficient_influence(P_hat) if efficient else evaluator.influence(P_hat)
    values = influence[d.observed_index()]
    correction = float(values.mean())
    se = float(values.std(ddof=1) / math.sqrt(d.n)) if d.n > 1 else math.inf
    return OneStep(plug_in + correction, se, plug_in, correction, P_tilde.floored)


@dataclass
class MonteCarloRow:
    n: int
    reps: int
    failures: int
    mean_estimate: float
    empirical_sd: float
    mean_se: float
    root_n_bias: float
    coverage: float
    target_sd: float
    plug_in_bias: float
    floored: int = 0


@dataclass
class MonteCarloReport:
    """Per sample size summaries of repeated one-step estimation."""
    kind: str
    target: float
    efficient_variance: float
    seed: Optional[int]
    rows: List[MonteCarloRow] = field(default_factory=list)
    execution_time: float = 0.0

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame([vars(row) for row in self.rows])
        frame.insert(0, "framework", self.kind)
        frame["target"] = self.target
        return frame

    def to_dict(self) -> Dict[str, Any]:
        return {
            "framework": self.kind,
            "target": self.target,
            "efficient_variance": self.efficient_variance,
            "seed": self.seed,
            "rows": [vars(row) for row in self.rows],
        }


def replication_rng(seed: Optional[int], n_index: int, rep: int) -> np.random.Generator:
    """Independent stream for replication ``rep`` at grid position ``n_index``."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(n_index, rep)))


def monte_carlo(
    fw: BaseFramework,
    P: FusedLaw,
    n_grid: Sequence[int],
    reps: int,
    seed: Optional[int] = None,
    threads: int = 1,
    obedient: bool = True,
    efficient: bool = True,
    min_reps: int = 100,
) -> MonteCarloReport:
    """Repeated sampling and one-step estimation at each n.

    Replications run on a thread pool; results are aggregated in replication
    order so the report does not depend on ``threads``.

    Raises:
        FusionValidationError: If reps < min_reps.
    """
    if reps < min_reps:
        raise FusionValidationError(f"At least {min_reps} replications are required, got {reps}")
    start_time = time.time()
    target = fw.phi(P)
    eff_var = variance(P, fw.efficient_influence(P))
    report = MonteCarloReport(fw.kind, target, eff_var, seed)
    for n_index, n in enumerate(n_grid):

        def replicate(rep: int, n=n, n_index=n_index) -> Optional[OneStep]:
            d = sample(P, n, rng=replication_rng(seed, n_index, rep))
            try:
                return one_step(d, fw, obedient, efficient)
            except FusionError as e:
                logger.debug(f"Replication {rep} at n={n} failed: {e}")
                return None

        with ThreadPoolExecutor(max_workers=threads) as executor:
            results = list(executor.map(replicate, range(reps)))
        done = [r for r in results if r is not None]
        if not done:
            raise FusionValidationError(f"Every replication failed at n={n}")
        estimates = np.array([r.estimate for r in done])
        ses = np.array([r.se for r in done])
        plug_ins = np.array([r.plug_in for r in done])
        covered = np.array([r.covers(target) for r in done])
        row = MonteCarloRow(
            n=int(n),
            reps=reps,
            failures=reps - len(done),
            mean_estimate=float(estimates.mean()),
            empirical_sd=float(estimates.std(ddof=1)) if len(done) > 1 else 0.0,
            mean_se=float(ses.mean()),
            root_n_bias=float(math.sqrt(n) * (estimates.mean() - target)),
            coverage=float(covered.mean()),
            target_sd=float(math.sqrt(eff_var / n)),
            plug_in_bias=float(plug_ins.mean() - target),
            floored=int(sum(r.floored for r in done)),
        )
        logger.info(
            f"n={n}: mean={row.mean_estimate:.6g} sd={row.empirical_sd:.3e} "
            f"coverage={row.coverage:.3f} failures={row.failures}"
        )
        report.rows.append(row)
    report.execution_time = time.time() - start_time
    return report
