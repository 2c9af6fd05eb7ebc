"""
Numerical oracles for the score operator and the frameworks.

Pathwise derivatives are checked by finite differences along multiplicative
tilts of (Q, U, lambda); nothing here calls into the influence module.
"""

import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from fusion.core import AxisSet, FinitePmf, axis_values, expectation_given
from fusion.exceptions import ConstructionError, FusionValidationError, PositivityError
from fusion.frameworks.base import BaseFramework, all_cells, create_framework, marginal_at, source_at_ideal
from fusion.frameworks.transport import case_control_design
from fusion.influence import variance
from fusion.linalg import RANK_TOLERANCE, numerical_rank
from fusion.model import AlignmentSpec, FusedLaw, MarginalFlag, SourceSpec, assemble_observed_law
from fusion.operator import (
    FusedModel,
    HVector,
    ObsFunction,
    apply_A,
    apply_A_star,
    centered_basis,
    information_blocks,
    information_operator,
    null_space_of_adjoint,
)
from fusion.settings import settings

logger = logging.getLogger("Fusion.Verify")

TILT_MARGIN = 0.5
RICHARDSON_TRIGGER = 1e-6
SPLIT_TOLERANCE = 1e-8
S1_GRID = tuple(round(0.05 * i, 2) for i in range(1, 20))
# "case-control" names the same design
DESIGNS = ("appendix-c", "case-control")


@dataclass(frozen=True, eq=False)
class Submodel:
    """Regular parametric submodel t -> (Q_t, U_t, lambda_t) with score h at t=0."""
    model: FusedModel
    h: HVector

    @property
    def t_max(self) -> float:
        largest = self.h.max_abs()
        return np.inf if largest == 0 else TILT_MARGIN / largest

    def at(self, t: float) -> FusedLaw:
        Q_t, U_t, lam_t = tilt(self.model, self.h, t)
        return assemble_observed_law(Q_t, U_t, lam_t, self.model.C)


def tilt(model: FusedModel, h: HVector, t: float) -> Tuple[FinitePmf, Tuple[FinitePmf, ...], np.ndarray]:
    """(Q, U, lambda) with every mass multiplied by 1 + t h.

    Raises:
        PositivityError: If |t| exceeds 0.5 / max|h|.
    """
    largest = h.max_abs()
    if largest > 0 and abs(t) > TILT_MARGIN / largest + 1e-15:
        raise PositivityError(f"|t|={abs(t):.3g} exceeds the tilt bound {TILT_MARGIN / largest:.3g}")
    Q_t = FinitePmf.from_weights(model.Q.space, model.Q.mass * (1.0 + t * h.h_Q))
    U_t = tuple(
        FinitePmf.from_weights(u.space, u.mass * (1.0 + t * h_u)) for u, h_u in zip(model.U, h.h_U)
    )
    lam_t = model.lam * (1.0 + t * h.h_lambda)
    return Q_t, U_t, lam_t / lam_t.sum()


def random_direction(model: FusedModel, rng: np.random.Generator) -> HVector:
    """Unit-norm direction in H with Gaussian coordinates."""
    coords = rng.standard_normal(model.basis_H.shape[1])
    norm = np.linalg.norm(coords)
    return model.h_from_coordinates(coords / norm if norm > 0 else coords)


def _central(f, step: float) -> np.ndarray:
    return (f(step) - f(-step)) / (2.0 * step)


def _richardson(f, step: float) -> np.ndarray:
    return (4.0 * _central(f, step / 2.0) - _central(f, step)) / 3.0


def numerical_score(model: FusedModel, h: HVector, step: Optional[float] = None) -> ObsFunction:
    """Richardson-extrapolated d/dt log p_t(o) at t=0 (zero on null cells)."""
    step = settings.fd_step if step is None else step
    sub = Submodel(model, h)
    base = model.obs_weights
    positive = base > 0

    def log_mass(t: float) -> np.ndarray:
        mass = sub.at(t).obs_weights()
        out = np.zeros_like(mass)
        out[positive] = np.log(mass[positive])
        return out

    return _richardson(log_mass, step)


def score_residual(model: FusedModel, h: HVector, step: Optional[float] = None) -> float:
    """max |numerical score - A h| over positive cells."""
    diff = numerical_score(model, h, step) - apply_A(model, h)
    return float(np.max(np.abs(diff[model.obs_weights > 0]), initial=0.0))


@dataclass(frozen=True)
class PathwiseCheck:
    derivative: float
    inner: float
    residual: float
    richardson: bool


def pathwise_check(
    fw: BaseFramework,
    model: FusedModel,
    h: HVector,
    step: Optional[float] = None,
    phi1: Optional[ObsFunction] = None,
) -> PathwiseCheck:
    """Compare [phi(P_s) - phi(P_-s)] / 2s with <phi1, A h>_P.

    Falls back to Richardson extrapolation when the central difference misses
    by more than 1e-6.
    """
    step = settings.fd_step if step is None else step
    phi1 = fw.influence(model.P) if phi1 is None else np.asarray(phi1, dtype=float)
    sub = Submodel(model, h)
    if h.max_abs() == 0:
        return PathwiseCheck(0.0, 0.0, 0.0, False)
    if step > sub.t_max:
        step = sub.t_max / 2.0

    def value(t: float) -> float:
        return fw.phi(sub.at(t))

    inner = model.obs_inner(phi1, apply_A(model, h))
    derivative = float(_central(value, step))
    residual = abs(derivative - inner)
    richardson = False
    if residual > RICHARDSON_TRIGGER:
        refined = float(_richardson(value, step))
        if abs(refined - inner) < residual:
            derivative, residual, richardson = refined, abs(refined - inner), True
    return PathwiseCheck(derivative, inner, residual, richardson)


@dataclass
class ContractionReport:
    """The non-contraction example: binary Y, X | Y aligned in source 1, Y aligned in source 2."""
    ratio: float
    factor: float
    norm_ratio: float
    operator_norm: float
    condition_number: float
    inverse_residual: float

    @property
    def contraction(self) -> bool:
        return self.factor < 1.0

    @property
    def boundary(self) -> bool:
        return abs(self.factor - 1.0) <= 1e-12

    def to_dict(self) -> Dict[str, Any]:
        return {
            "ratio": self.ratio,
            "factor": self.factor,
            "norm_ratio": self.norm_ratio,
            "operator_norm": self.operator_norm,
            "condition_number": self.condition_number,
            "inverse_residual": self.inverse_residual,
            "contraction": self.contraction,
            "boundary": self.boundary,
        }


def _counterexample_model(ratio: float) -> FusedModel:
    """c = P(Y=1|S=1) / P(Y=1|S=2) * P(S=1) equal to ``ratio``."""
    if not np.isfinite(ratio) or ratio <= 0:
        raise ConstructionError(f"The ratio must be positive and finite, got {ratio}")
    lam1 = 0.9
    if ratio > 0.81:
        p1, q1 = 0.9, 0.81 / ratio
    else:
        p1, q1 = ratio * 0.5 / lam1, 0.5
    if not (0 < p1 < 1 and 0 < q1 < 1):
        raise ConstructionError(f"No positive tables reach ratio {ratio}")
    space = AxisSet.of(X=(0, 1, 2), Y=(0, 1))
    x_given_y = np.array([[0.5, 0.3, 0.2], [0.2, 0.3, 0.5]])
    q_y = np.array([1.0 - q1, q1])
    Q = FinitePmf.from_weights(space, (x_given_y * q_y[:, None]).T.reshape(-1))
    C = AlignmentSpec((
        SourceSpec(1, ("Y", "X"), (("Y",), ("X",)), (MarginalFlag.EMPTY, all_cells(space, ("Y",)))),
        SourceSpec(2, ("Y",), (("Y",),), (MarginalFlag.STAR,)),
    ))
    first = FinitePmf.from_weights(space.sub(("Y", "X")), (x_given_y * np.array([1.0 - p1, p1])[:, None]).reshape(-1))
    second = FinitePmf.from_weights(space.sub(("Y",)), q_y)
    P = FusedLaw.from_weights([lam1, 1.0 - lam1], [first, second])
    return FusedModel.bind(Q, C, P=P)


def contraction_counterexample(ratio_target: float = 2.5, seed: int = 0) -> ContractionReport:
    """Build the model with c = ratio_target and measure ||(I - A*A) h|| / ||h||.

    Along h(x, y) = 1(y=1){f - E_Q[f|y]} the operator I - A*A scales by |1 - c|.
    The report also carries the spectral norm of I - A*A, the condition number
    of A*A off its null space and the residual of the closed-form inverse
    applied to a random direction.
    """
    model = _counterexample_model(ratio_target)
    Q = model.Q
    space = Q.space
    lam = model.lam
    w = Q.mass
    x = axis_values(space, "X")
    y = axis_values(space, "Y")
    h_Q = (y == 1) * (x - expectation_given(Q, x, ("Y",)))
    residual_vec = h_Q - information_blocks(model, model.ideal_direction(h_Q)).h_Q
    norm_ratio = float(np.sqrt(w @ residual_vec**2) / np.sqrt(w @ h_Q**2))

    q_y = marginal_at(Q, ("Y",), space)
    p1_y = marginal_at(FinitePmf(space, source_at_ideal(space, model.C, model.P, 0)), ("Y",), space)
    factor = abs(1.0 - p1_y[y == 1][0] / q_y[y == 1][0] * lam[0])

    info = information_operator(model).entries
    dim = info.shape[0]
    operator_norm = float(np.linalg.norm(np.eye(dim) - info, 2))
    eigen = np.linalg.eigvalsh(info)
    kept = eigen[eigen > RANK_TOLERANCE * eigen.max()]
    condition = float(kept.max() / kept.min())

    rng = np.random.default_rng(seed)
    target = model.h_from_coordinates(rng.standard_normal(dim))
    mean_y = expectation_given(Q, target.h_Q, ("Y",))
    inverse = HVector(
        q_y / (p1_y * lam[0]) * (target.h_Q - mean_y) + mean_y / lam[1],
        tuple(h_u / l for h_u, l in zip(target.h_U, lam)),
        target.h_lambda.copy(),
    )
    inverse_residual = float(np.max(np.abs(information_blocks(model, inverse).flat() - target.flat())))
    report = ContractionReport(ratio_target, factor, norm_ratio, operator_norm, condition, inverse_residual)
    logger.info(f"|1 - c| = {factor:.6g}, measured {norm_ratio:.6g}, cond = {condition:.3g}")
    return report


def are_curves(dgp: str = "appendix-c", s1_grid: Sequence[float] = S1_GRID) -> pd.DataFrame:
    """Efficient variances of scenarios ii, iii.a and iii.b over P(S=1), and their ratios to iii.a.

    Raises:
        FusionValidationError: If the design is unknown or a grid value is outside (0, 1).
    """
    if dgp not in DESIGNS:
        raise FusionValidationError(f"Unknown design '{dgp}'; expected one of {DESIGNS}")
    grid = sorted(float(p) for p in s1_grid)
    if any(not 0 < p < 1 for p in grid):
        raise FusionValidationError("Every P(S=1) must lie strictly between 0 and 1")
    rows = []
    for p in grid:
        design = case_control_design(p)
        variances = {}
        for key, kind in (("var_iiia", "TransportIIIa"), ("var_ii", "TransportII"), ("var_iiib", "TransportIIIb")):
            fw = create_framework(kind, design.space, l0=design.l0)
            eff = fw.efficient_influence(design.P)
            variances[key] = variance(design.P, eff)
        rows.append({
            "p_s1": p,
            **variances,
            "are_ii": variances["var_ii"] / variances["var_iiia"],
            "are_iiib": variances["var_iiib"] / variances["var_iiia"],
        })
        logger.debug(f"P(S=1)={p:.2f}: {variances}")
    return pd.DataFrame(rows, columns=["p_s1", "var_iiia", "var_ii", "var_iiib", "are_ii", "are_iiib"])


def adjoint_residual(model: FusedModel, rng: np.random.Generator, draws: int = 20) -> float:
    """Largest gap |<A h, g>_P - <h, A* g>_H| over random unit h and centered g, relative to |g|_P."""
    worst = 0.0
    for _ in range(draws):
        h = random_direction(model, rng)
        g = rng.standard_normal(model.n_obs)
        g = g - model.obs_weights @ g
        left = model.obs_inner(apply_A(model, h), g)
        right = model.h_inner(h, apply_A_star(model, g))
        worst = max(worst, abs(left - right) / max(1.0, math.sqrt(model.obs_inner(g, g))))
    return worst


def operator_range_checks(
    model: FusedModel, rtol: float = RANK_TOLERANCE, adjoint_tol: Optional[float] = None
) -> Dict[str, Any]:
    """Numerical checks of H = Range(A*) + Null(A) and L2_0(P) = Range(A) + Null(A*).

    Range(A*) is built by applying the decomposition-based adjoint to an
    orthonormal basis of L2_0(P); Null(A) comes from the SVD of A. Both live in
    orthonormal H coordinates, where the H inner product is the dot product.
    """
    adjoint_tol = settings.adjoint_tolerance if adjoint_tol is None else adjoint_tol
    a = model.a_tilde
    rank = numerical_rank(a, rtol)
    dim_h = a.shape[1]
    w = model.obs_weights
    positive = int(np.sum(w > 0))

    _, _, vt = np.linalg.svd(a, full_matrices=True)
    null_a = vt[rank:].T
    obs_basis = centered_basis(w)
    if obs_basis.shape[1]:
        adjoint_coords = np.column_stack(
            [model.h_coordinates(apply_A_star(model, b)) for b in obs_basis.T]
        )
    else:
        adjoint_coords = np.zeros((dim_h, 0))
    expected = model.a_coordinates.T @ (w[:, None] * obs_basis)
    adjoint_gap = float(np.max(np.abs(adjoint_coords - expected), initial=0.0))
    adjoint_scale = max(1.0, float(np.max(np.abs(expected), initial=0.0)))
    range_rank = numerical_rank(adjoint_coords, rtol)
    if range_rank and null_a.shape[1]:
        u, _, _ = np.linalg.svd(adjoint_coords, full_matrices=False)
        h_overlap = float(np.max(np.abs(u[:, :range_rank].T @ null_a)))
    else:
        h_overlap = 0.0

    null_adjoint = null_space_of_adjoint(model, rtol)
    tangent = model.tangent
    if tangent.dim and null_adjoint.dim:
        overlap = float(np.max(np.abs(tangent.vectors.T @ (w[:, None] * null_adjoint.vectors))))
    else:
        overlap = 0.0
    return {
        "dim_H": dim_h,
        "rank_A": rank,
        "dim_null_A": int(null_a.shape[1]),
        "dim_range_A_star": range_rank,
        "dim_L2_0_P": positive - 1,
        "dim_null_A_star": null_adjoint.dim,
        "adjoint_residual": adjoint_gap,
        "adjoint_ok": adjoint_gap <= adjoint_tol * adjoint_scale,
        "h_overlap": h_overlap,
        "h_split_ok": (
            range_rank == rank
            and range_rank + null_a.shape[1] == dim_h
            and h_overlap <= SPLIT_TOLERANCE
        ),
        "obs_split_ok": rank + null_adjoint.dim == positive - 1,
        "max_overlap": overlap,
    }
