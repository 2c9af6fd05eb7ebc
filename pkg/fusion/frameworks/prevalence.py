"""
Disease prevalence with a surrogate V.

Source 1 observes (X, V) with the joint law aligned; source 2 observes
(X, Y, V) and only the law of V given (X, Y) is aligned. Y and V are binary.
"""

import logging
from typing import Optional, Sequence, Tuple

import numpy as np

from fusion.core import (
    AxisSet,
    FinitePmf,
    RealTable,
    axis_values,
    cell_index,
    conditional_mean,
    expectation_given,
    marginal,
)
from fusion.exceptions import DegenerateInstrumentError, PositivityError
from fusion.frameworks.base import (
    BaseFramework,
    all_cells,
    marginal_at,
    on_sources,
    register_framework,
)
from fusion.model import AlignmentSpec, FusedLaw, MarginalFlag, SourceSpec
from fusion.operator import IdealFunction, ObsFunction

logger = logging.getLogger("Fusion.Frameworks.Prevalence")

INSTRUMENT_TOLERANCE = 1e-6


def _proxy_means(law: FinitePmf, covariates: Tuple[str, ...], outcome: str, proxy: str) -> np.ndarray:
    """E[V | Y=y, x] as an (n_x, 2) array."""
    v = axis_values(law.space, proxy)
    means = conditional_mean(law, v, covariates + (outcome,))
    return means.reshape(-1, 2)


def mq(
    Q: FinitePmf,
    covariates: Sequence[str] = ("X",),
    outcome: str = "Y",
    proxy: str = "V",
) -> RealTable:
    """m(x, v) = (v - E[V|Y=0,x]) / (E[V|Y=1,x] - E[V|Y=0,x]) over (X, V).

    Raises:
        DegenerateInstrumentError: If the proxy does not separate Y at some x.
    """
    covariates = tuple(covariates)
    e = _proxy_means(Q, covariates, outcome, proxy)
    gap = e[:, 1] - e[:, 0]
    if np.any(np.abs(gap) <= INSTRUMENT_TOLERANCE):
        raise DegenerateInstrumentError(
            f"|E[{proxy}|{outcome}=1,x] - E[{proxy}|{outcome}=0,x]| <= {INSTRUMENT_TOLERANCE} at some x"
        )
    space = Q.space.sub(covariates + (proxy,))
    ix = cell_index(space, covariates)
    v = axis_values(space, proxy)
    return RealTable(space, (v - e[ix, 0]) / gap[ix])


def prevalence_alignment(
    space: AxisSet, covariates: Sequence[str] = ("X",), outcome: str = "Y", proxy: str = "V"
) -> AlignmentSpec:
    covariates = tuple(covariates)
    first = SourceSpec(1, covariates + (proxy,), (covariates + (proxy,),), (MarginalFlag.STAR,))
    second = SourceSpec(
        2,
        covariates + (outcome, proxy),
        (covariates + (outcome,), (proxy,)),
        (MarginalFlag.EMPTY, all_cells(space, covariates + (outcome,))),
    )
    return AlignmentSpec((first, second))


def phi_prevalence(
    P: FusedLaw, covariates: Sequence[str] = ("X",), outcome: str = "Y", proxy: str = "V"
) -> float:
    """E_{P(.|S=1)}[m_{P(.|S=2)}(X, V)]."""
    m = mq(P.laws[1], covariates, outcome, proxy)
    return float(P.laws[0].mass @ m.at(P.laws[0].space))


def prevalence_ideal(
    P: FusedLaw,
    space: AxisSet,
    covariates: Sequence[str] = ("X",),
    outcome: str = "Y",
    proxy: str = "V",
) -> FinitePmf:
    """The ideal law identified by P: q(x) p2(v|x,y) E_{P1}[m|x] over W.

    Raises:
        PositivityError: If the implied prevalence q(Y=1|x) leaves (0, 1).
    """
    covariates = tuple(covariates)
    m = mq(P.laws[1], covariates, outcome, proxy)
    first = P.laws[0]
    q_y1 = conditional_mean(first, m.at(first.space), covariates)
    if np.any(q_y1 < 0) or np.any(q_y1 > 1):
        raise PositivityError("Implied prevalence Q(Y=1|x) outside [0, 1]; P is not in the model")
    q_x = marginal(first, covariates).mass
    ix = cell_index(space, covariates)
    y = axis_values(space, outcome)
    q_y = np.where(y == 1, q_y1[ix], 1.0 - q_y1[ix])
    second = P.laws[1]
    v_given = conditional_mean(second, axis_values(second.space, proxy), covariates + (outcome,))
    e_v = v_given[cell_index(space, covariates + (outcome,))]
    v = axis_values(space, proxy)
    q_v = np.where(v == 1, e_v, 1.0 - e_v)
    return FinitePmf.from_weights(space, q_x[ix] * q_y * q_v)


def _coefficients(
    space: AxisSet, psi: IdealFunction, covariates: Tuple[str, ...], outcome: str, proxy: str
) -> Tuple[np.ndarray, ...]:
    """psi = a(x) + b(x) v + c(x) y + d(x) v y, each coefficient read at W cells."""
    ix = cell_index(space, covariates)
    iy = cell_index(space, (outcome,))
    iv = cell_index(space, (proxy,))
    table = np.zeros((space.sub(covariates).size, 2, 2))
    table[ix, iy, iv] = psi
    a = table[:, 0, 0]
    b = table[:, 0, 1] - a
    c = table[:, 1, 0] - a
    d = table[:, 1, 1] - table[:, 1, 0] - table[:, 0, 1] + a
    return a[ix], b[ix], c[ix], d[ix]


def if_prevalence(
    P: FusedLaw,
    space: AxisSet,
    covariates: Sequence[str] = ("X",),
    outcome: str = "Y",
    proxy: str = "V",
    psi1_Q: Optional[IdealFunction] = None,
    Q: Optional[FinitePmf] = None,
) -> ObsFunction:
    """Unique observed influence function for a general ideal influence function.

    With ``psi1_Q`` omitted the target is E_Q[Y] with psi1 = y - E_Q[Y].
    """
    covariates = tuple(covariates)
    if Q is None:
        Q = prevalence_ideal(P, space, covariates, outcome, proxy)
    y = axis_values(space, outcome)
    v = axis_values(space, proxy)
    if psi1_Q is None:
        psi1_Q = y - float(Q.mass @ y)
    psi = np.asarray(psi1_Q, dtype=float)
    a, b, c, d = _coefficients(space, psi, covariates, outcome, proxy)
    m = mq(Q, covariates, outcome, proxy).at(space)
    e1 = _proxy_means(Q, covariates, outcome, proxy)[cell_index(space, covariates), 1]
    m1 = a + b * v + c * m + d * m * e1
    m2 = psi - m1
    lam = P.weights
    C = prevalence_alignment(space, covariates, outcome, proxy)
    ratio = marginal_at(Q, covariates + (outcome,), space) / marginal_at(
        P.laws[1], covariates + (outcome,), space
    )
    return on_sources(space, C, [m1 / lam[0], ratio * m2 / lam[1]])


@register_framework
class PrevalenceFramework(BaseFramework):
    """Prevalence E_Q[Y] identified through a surrogate measured in both sources."""

    kind = "Prevalence"

    def validate_config(self) -> None:
        self.covariates = tuple(self.params.get("covariates", ("X",)))
        self.outcome = self.params.get("outcome", "Y")
        self.proxy = self.params.get("proxy", "V")
        self.require_axes(self.covariates + (self.outcome, self.proxy))
        self.require_binary(self.outcome)
        self.require_binary(self.proxy)

    def alignment(self) -> AlignmentSpec:
        return prevalence_alignment(self.space, self.covariates, self.outcome, self.proxy)

    def ideal_functional(self, Q: FinitePmf) -> float:
        return float(Q.mass @ axis_values(Q.space, self.outcome))

    def ideal_influence(self, Q: FinitePmf) -> IdealFunction:
        y = axis_values(Q.space, self.outcome)
        return y - float(Q.mass @ y)

    def phi(self, P: FusedLaw) -> float:
        return phi_prevalence(P, self.covariates, self.outcome, self.proxy)

    def influence(self, P: FusedLaw) -> ObsFunction:
        return if_prevalence(P, self.space, self.covariates, self.outcome, self.proxy)

    def ideal_from_observed(self, P: FusedLaw) -> FinitePmf:
        return prevalence_ideal(P, self.space, self.covariates, self.outcome, self.proxy)

    def efficient_influence(self, P: FusedLaw) -> ObsFunction:
        # nonparametric observed model: the influence function is unique
        return self.influence(P)


def mq_residual(Q: FinitePmf, covariates: Sequence[str] = ("X",), outcome: str = "Y", proxy: str = "V") -> float:
    """max |E_Q[m_Q | X, Y] - Y| over cells."""
    covariates = tuple(covariates)
    m = mq(Q, covariates, outcome, proxy).at(Q.space)
    fitted = expectation_given(Q, m, covariates + (outcome,))
    return float(np.max(np.abs(fitted - axis_values(Q.space, outcome))))
