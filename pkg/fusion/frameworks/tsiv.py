"""
Two-sample instrumental variables on W = (L, X, Y).

Source 1 observes (L, Y) and source 2 observes (L, X); each aligns its
outcome given the instrument, neither aligns the instrument marginal. The
moment model is E_Q[Y - alpha - psi X | L] = 0.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from fusion.core import (
    AxisSet,
    FinitePmf,
    axis_values,
    cell_index,
    conditional_mean,
    marginal,
)
from fusion.exceptions import (
    DegenerateInstrumentError,
    FrameworkMismatchError,
    PositivityError,
    SingularMatrixError,
)
from fusion.frameworks.base import BaseFramework, all_cells, register_framework
from fusion.linalg import RANK_TOLERANCE, min_norm_lstsq, numerical_rank
from fusion.model import AlignmentSpec, FusedLaw, MarginalFlag, SourceSpec
from fusion.operator import IdealFunction, ObsFunction, centered_basis

logger = logging.getLogger("Fusion.Frameworks.TSIV")

CONDITION_LIMIT = 1e8
VARIANCE_FLOOR = 1e-12
COMPONENTS = ("tau", "phi")


@dataclass(frozen=True)
class TsivAxes:
    instrument: Tuple[str, ...] = ("L",)
    exposure: str = "X"
    outcome: str = "Y"

    def __post_init__(self):
        object.__setattr__(self, "instrument", tuple(self.instrument))

    @property
    def ideal(self) -> Tuple[str, ...]:
        return self.instrument + (self.exposure, self.outcome)


@dataclass(frozen=True, eq=False)
class TsivInfluence:
    """Influence functions of (tau, phi) for one instrument function t."""
    tau: ObsFunction
    phi: ObsFunction
    t: np.ndarray

    def component(self, name: str) -> ObsFunction:
        return getattr(self, name)


def tsiv_alignment(space: AxisSet, axes: TsivAxes = TsivAxes()) -> AlignmentSpec:
    inst = axes.instrument
    region = all_cells(space, inst)
    first = SourceSpec(1, inst + (axes.outcome,), (inst, (axes.outcome,)), (MarginalFlag.EMPTY, region))
    second = SourceSpec(2, inst + (axes.exposure,), (inst, (axes.exposure,)), (MarginalFlag.EMPTY, region))
    return AlignmentSpec((first, second))


def _means(law: FinitePmf, axes: TsivAxes, name: str) -> np.ndarray:
    """E_law[name | L] over the instrument cells."""
    return conditional_mean(law, axis_values(law.space, name), axes.instrument)


def _moment_fit(e_y: np.ndarray, e_x: np.ndarray, weights: np.ndarray) -> Tuple[float, float, float]:
    """Weighted least squares of e_y on (1, e_x); returns (intercept, slope, max residual)."""
    total = weights.sum()
    center = float(weights @ e_x) / total
    spread = float(weights @ (e_x - center) ** 2) / total
    if spread < VARIANCE_FLOOR:
        raise DegenerateInstrumentError(
            f"E[X|L] is constant across instrument levels (weighted variance {spread:.3e})"
        )
    design = np.column_stack([np.ones_like(e_x), e_x])
    coef, _ = min_norm_lstsq(design, e_y, weights)
    residual = float(np.max(np.abs(e_y - design @ coef)))
    return float(coef[0]), float(coef[1]), residual


def tsiv_solve(P: FusedLaw, axes: TsivAxes = TsivAxes()) -> Tuple[float, float]:
    """(tau, phi) solving E_P[Y|L,S=1] - tau - phi E_P[X|L,S=2] = 0.

    Least squares over instrument cells with weights p(l|S=1); exact for a
    binary instrument. A nonzero residual means P violates the moment model.

    Raises:
        DegenerateInstrumentError: If E_P[X|L,S=2] does not vary with L.
    """
    first, second = P.laws
    weights = marginal(first, axes.instrument).mass
    tau, phi, residual = _moment_fit(_means(first, axes, axes.outcome), _means(second, axes, axes.exposure), weights)
    if residual > 1e-9:
        logger.debug(f"Moment equation residual {residual:.3e} at the least-squares solution")
    return tau, phi


def tsiv_moment_residual(P: FusedLaw, axes: TsivAxes = TsivAxes()) -> float:
    """max_l |E_P[Y|l,S=1] - tau - phi E_P[X|l,S=2]| at the solution."""
    first, second = P.laws
    weights = marginal(first, axes.instrument).mass
    return _moment_fit(_means(first, axes, axes.outcome), _means(second, axes, axes.exposure), weights)[2]


def tsiv_ideal(Q: FinitePmf, axes: TsivAxes = TsivAxes()) -> Tuple[float, float]:
    """(alpha, psi) of the ideal moment model, weighted by q(l)."""
    weights = marginal(Q, axes.instrument).mass
    alpha, psi, _ = _moment_fit(_means(Q, axes, axes.outcome), _means(Q, axes, axes.exposure), weights)
    return alpha, psi


def b_matrix(weights: np.ndarray, t: np.ndarray, e_x: np.ndarray) -> np.ndarray:
    """B(t) = sum_l w(l) t(l) (1, e_x(l))'.

    Raises:
        SingularMatrixError: If the condition number reaches 1e8.
    """
    t = np.asarray(t, dtype=float).reshape(-1, 2)
    design = np.column_stack([np.ones_like(e_x), e_x])
    matrix = (weights[:, None] * t).T @ design
    if not np.all(np.isfinite(matrix)) or np.linalg.cond(matrix) >= CONDITION_LIMIT:
        raise SingularMatrixError("B(t) is singular or badly conditioned")
    return matrix


def default_g(Q: FinitePmf, axes: TsivAxes = TsivAxes()) -> np.ndarray:
    """g(l) = (1, E_Q[X|l]) over the instrument cells."""
    e_x = _means(Q, axes, axes.exposure)
    return np.column_stack([np.ones_like(e_x), e_x])


def tsiv_ideal_if(
    Q: FinitePmf, axes: TsivAxes = TsivAxes(), g: Optional[np.ndarray] = None
) -> np.ndarray:
    """B_Q(g)^{-1} g(l) (y - alpha - psi x) as an (n_W, 2) array of (alpha, psi) influences."""
    space = Q.space
    alpha, psi = tsiv_ideal(Q, axes)
    g = default_g(Q, axes) if g is None else np.asarray(g, dtype=float).reshape(-1, 2)
    q_l = marginal(Q, axes.instrument).mass
    matrix = b_matrix(q_l, g, _means(Q, axes, axes.exposure))
    v = np.linalg.solve(matrix, g.T).T
    residual = axis_values(space, axes.outcome) - alpha - psi * axis_values(space, axes.exposure)
    return v[cell_index(space, axes.instrument)] * residual[:, None]


def t_from_g(P: FusedLaw, Q: FinitePmf, g: np.ndarray, axes: TsivAxes = TsivAxes()) -> np.ndarray:
    """t(l) = g(l) q(l) / p(l|S=2), the observed instrument function of an ideal one."""
    p2 = marginal(P.laws[1], axes.instrument).mass
    if np.any(p2 <= 0):
        raise PositivityError("p(l|S=2) must be positive at every instrument level")
    q_l = marginal(Q, axes.instrument).mass
    return np.asarray(g, dtype=float).reshape(-1, 2) * (q_l / p2)[:, None]


def tsiv_epsilon(P: FusedLaw, axes: TsivAxes = TsivAxes()) -> ObsFunction:
    """eps(o) = 1(s=1)/lam_1 p_2(l)/p_1(l) (y - e_y(l)) + 1(s=2)/lam_2 (e_y(l) - tau - phi x)."""
    first, second = P.laws
    lam = P.weights
    tau, phi = tsiv_solve(P, axes)
    p1 = marginal(first, axes.instrument).mass
    p2 = marginal(second, axes.instrument).mass
    if np.any(p1 <= 0):
        raise PositivityError("p(l|S=1) must be positive at every instrument level")
    e_y = _means(first, axes, axes.outcome)
    i1 = cell_index(first.space, axes.instrument)
    i2 = cell_index(second.space, axes.instrument)
    y = axis_values(first.space, axes.outcome)
    x = axis_values(second.space, axes.exposure)
    eps1 = (p2 / p1)[i1] * (y - e_y[i1]) / lam[0]
    eps2 = (e_y[i2] - tau - phi * x) / lam[1]
    return np.concatenate([eps1, eps2])


def tsiv_if(P: FusedLaw, t: np.ndarray, axes: TsivAxes = TsivAxes()) -> TsivInfluence:
    """nu(o) = B(t)^{-1} t(l) eps(o) with B(t) = E_{P(.|S=2)}[t(L) (1, e_x(L))'].

    Args:
        P: Observed law.
        t: Instrument function as an (n_L, 2) array.
        axes: Axis names.

    Raises:
        SingularMatrixError: If B(t) is singular.
    """
    t = np.asarray(t, dtype=float).reshape(-1, 2)
    second = P.laws[1]
    p2 = marginal(second, axes.instrument).mass
    matrix = b_matrix(p2, t, _means(second, axes, axes.exposure))
    v = np.linalg.solve(matrix, t.T).T
    eps = tsiv_epsilon(P, axes)
    index = np.concatenate([cell_index(law.space, axes.instrument) for law in P.laws])
    nu = v[index] * eps[:, None]
    return TsivInfluence(nu[:, 0], nu[:, 1], t)


def conditional_variance(P: FusedLaw, axes: TsivAxes = TsivAxes()) -> np.ndarray:
    """sigma^2(l) = var_P(eps | L = l) under the pooled observed law."""
    eps = P.split(tsiv_epsilon(P, axes))
    lam = P.weights
    num = np.zeros(P.laws[0].space.sub(axes.instrument).size)
    den = np.zeros_like(num)
    for j, (law, piece) in enumerate(zip(P.laws, eps)):
        p_l = marginal(law, axes.instrument).mass
        num += lam[j] * p_l * conditional_mean(law, piece * piece, axes.instrument)
        den += lam[j] * p_l
    return num / den


def tsiv_eif(P: FusedLaw, axes: TsivAxes = TsivAxes()) -> TsivInfluence:
    """Efficient member: t(l) = E_P[U|l] / sigma^2(l), U = 1(s=2)/lam_2 (1, X)'.

    Raises:
        PositivityError: If sigma^2 vanishes at some instrument level.
    """
    sigma2 = conditional_variance(P, axes)
    if np.any(sigma2 <= VARIANCE_FLOOR):
        raise PositivityError("var_P(eps | L) must be positive at every instrument level")
    lam = P.weights
    p1 = marginal(P.laws[0], axes.instrument).mass
    p2 = marginal(P.laws[1], axes.instrument).mass
    share = lam[1] * p2 / (lam[0] * p1 + lam[1] * p2)
    e_u = (share / lam[1])[:, None] * np.column_stack([np.ones_like(p2), _means(P.laws[1], axes, axes.exposure)])
    return tsiv_if(P, e_u / sigma2[:, None], axes)


def tsiv_ideal_from_observed(P: FusedLaw, space: AxisSet, axes: TsivAxes = TsivAxes()) -> FinitePmf:
    """q(l) = p(l|S=1), q(y|l) = p(y|l,S=1), q(x|l) = p(x|l,S=2), X independent of Y given L."""
    first, second = P.laws
    p2_l = marginal(second, axes.instrument).mass
    if np.any(p2_l <= 0):
        raise PositivityError("p(l|S=2) must be positive at every instrument level")
    joint1 = first.mass[cell_index(space, first.space.names)]
    joint2 = second.mass[cell_index(space, second.space.names)]
    return FinitePmf.from_weights(space, joint1 * joint2 / p2_l[cell_index(space, axes.instrument)])


def tsiv_restricted_tangent(Q: FinitePmf, axes: TsivAxes = TsivAxes()) -> Optional[np.ndarray]:
    """Basis of {h in L2_0(Q): E_Q[eps h | L] in span(1, E_Q[X|L])}; None when saturated."""
    space = Q.space
    q_l = marginal(Q, axes.instrument).mass
    n_l = q_l.shape[0]
    if n_l <= 2:
        return None
    alpha, psi = tsiv_ideal(Q, axes)
    eps = axis_values(space, axes.outcome) - alpha - psi * axis_values(space, axes.exposure)
    il = cell_index(space, axes.instrument)
    moment = np.zeros((n_l, space.size))
    moment[il, np.arange(space.size)] = Q.mass / q_l[il] * eps
    g = default_g(Q, axes)
    gram = g.T @ (q_l[:, None] * g)
    perp = np.eye(n_l) - g @ np.linalg.solve(gram, g.T * q_l[None, :])
    centered = centered_basis(Q.mass)
    constraint = perp @ moment @ centered
    rank = numerical_rank(constraint, RANK_TOLERANCE)
    _, _, vt = np.linalg.svd(constraint, full_matrices=True)
    logger.debug(f"Moment restriction removes {rank} tangent directions")
    return centered @ vt[rank:].T


@register_framework
class TsivFramework(BaseFramework):
    """Causal slope (or intercept) identified from two instrument samples."""

    kind = "TSIV"

    def validate_config(self) -> None:
        self.axes = TsivAxes(
            tuple(self.params.get("instrument", ("L",))),
            self.params.get("exposure", "X"),
            self.params.get("outcome", "Y"),
        )
        self.require_axes(self.axes.ideal)
        if set(self.axes.ideal) != set(self.space.names):
            raise FrameworkMismatchError(f"W must be exactly {self.axes.ideal}")
        axis_values(self.space, self.axes.exposure)
        axis_values(self.space, self.axes.outcome)
        self.component = self.params.get("component", "phi")
        if self.component not in COMPONENTS:
            raise FrameworkMismatchError(f"component must be one of {COMPONENTS}")
        self.index = COMPONENTS.index(self.component)

    def alignment(self) -> AlignmentSpec:
        return tsiv_alignment(self.space, self.axes)

    def ideal_functional(self, Q: FinitePmf) -> float:
        return tsiv_ideal(Q, self.axes)[self.index]

    def ideal_influence(self, Q: FinitePmf) -> IdealFunction:
        return tsiv_ideal_if(Q, self.axes)[:, self.index]

    def phi(self, P: FusedLaw) -> float:
        return tsiv_solve(P, self.axes)[self.index]

    def influence(self, P: FusedLaw) -> ObsFunction:
        Q = self.ideal_from_observed(P)
        t = t_from_g(P, Q, default_g(Q, self.axes), self.axes)
        return tsiv_if(P, t, self.axes).component(self.component)

    def ideal_from_observed(self, P: FusedLaw) -> FinitePmf:
        return tsiv_ideal_from_observed(P, self.space, self.axes)

    def tangent_basis(self, Q: FinitePmf) -> Optional[np.ndarray]:
        return tsiv_restricted_tangent(Q, self.axes)

    def efficient_influence(self, P: FusedLaw) -> ObsFunction:
        return tsiv_eif(P, self.axes).component(self.component)
