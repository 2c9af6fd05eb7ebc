"""
Transporting an average treatment effect from a cohort (source 1) to a
target population (source 2) with W = (L, A, Y).

Scenario i: source 2 is a random sample of L.
Scenario ii: source 2 samples (L, A) among cases Y=1.
Scenario iii.a: source 2 is a case-control sample with (L, A) | Y aligned
  for both outcome levels and Y | (L, A) aligned in source 1.
Scenario iii.b: as iii.a but the cohort only aligns Y | L=l0, A=0.
"""

import logging
from dataclasses import dataclass
from typing import Any, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from fusion.core import (
    AxisSet,
    FinitePmf,
    axis_values,
    cell_index,
    conditional_mean,
    expectation_given,
    marginal,
)
from fusion.exceptions import FrameworkMismatchError, PositivityError
from fusion.frameworks.base import (
    BaseFramework,
    QMap,
    all_cells,
    marginal_at,
    on_sources,
    register_framework,
)
from fusion.frameworks.generic_ub import (
    UBLayout,
    double_centered,
    full_family_shift,
    generic_ub_eif_discrete,
    generic_ub_full_if,
    generic_ub_if,
    ub_alignment,
    ub_ideal_from_observed,
)
from fusion.model import AlignmentSpec, FusedLaw, MarginalFlag, SourceSpec
from fusion.operator import FusedModel, IdealFunction, ObsFunction

logger = logging.getLogger("Fusion.Frameworks.Transport")

SCENARIOS = ("i", "ii", "iii.a", "iii.b")


@dataclass(frozen=True)
class TransportAxes:
    """Covariates L, binary treatment A and binary outcome Y."""
    covariates: Tuple[str, ...]
    treatment: str = "A"
    outcome: str = "Y"

    @property
    def exposure(self) -> Tuple[str, ...]:
        return tuple(self.covariates) + (self.treatment,)

    @property
    def ideal(self) -> Tuple[str, ...]:
        return self.exposure + (self.outcome,)


def _arm_means(law: FinitePmf, axes: TransportAxes, space: AxisSet) -> Tuple[np.ndarray, np.ndarray]:
    """E_law[Y | l, A=0] and E_law[Y | l, A=1] read at the cells of ``space``."""
    y = axis_values(law.space, axes.outcome)
    means = conditional_mean(law, y, axes.exposure).reshape(-1, 2)
    il = cell_index(space, tuple(axes.covariates))
    return means[il, 0], means[il, 1]


def ate(Q: FinitePmf, axes: TransportAxes) -> float:
    """psi(Q) = E_Q[E_Q(Y|L,A=1) - E_Q(Y|L,A=0)]."""
    mu0, mu1 = _arm_means(Q, axes, Q.space)
    return float(Q.mass @ (mu1 - mu0))


def aipw_ideal_if(Q: FinitePmf, axes: TransportAxes) -> IdealFunction:
    """(2a-1)/q(a|l) (y - mu(l,a)) + mu(l,1) - mu(l,0) - psi(Q).

    Raises:
        PositivityError: If q(a|l) is not strictly inside (0, 1).
    """
    space = Q.space
    a = axis_values(space, axes.treatment)
    y = axis_values(space, axes.outcome)
    propensity = expectation_given(Q, a, tuple(axes.covariates))
    if np.any(propensity <= 0) or np.any(propensity >= 1):
        raise PositivityError("Treatment positivity 0 < q(A=1|l) < 1 fails")
    q_a = np.where(a == 1, propensity, 1.0 - propensity)
    mu = expectation_given(Q, y, axes.exposure)
    mu0, mu1 = _arm_means(Q, axes, space)
    psi = float(Q.mass @ (mu1 - mu0))
    return (2 * a - 1) / q_a * (y - mu) + mu1 - mu0 - psi


def transport_alignment(
    space: AxisSet, scenario: str, axes: TransportAxes, l0: Optional[Sequence[Any]] = None
) -> AlignmentSpec:
    if scenario == "i":
        cov = tuple(axes.covariates)
        first = SourceSpec(
            1,
            axes.ideal,
            (axes.exposure, (axes.outcome,)),
            (MarginalFlag.EMPTY, all_cells(space, axes.exposure)),
        )
        second = SourceSpec(2, cov, (cov,), (MarginalFlag.STAR,))
        return AlignmentSpec((first, second))
    if scenario == "ii":
        return ub_alignment(space, UBLayout((axes.outcome,), axes.exposure), (1,), 1)
    if scenario == "iii.a":
        return ub_alignment(space, UBLayout((axes.outcome,), axes.exposure))
    if scenario == "iii.b":
        return ub_alignment(space, UBLayout(axes.exposure, (axes.outcome,)), tuple(l0) + (0,), 2)
    raise FrameworkMismatchError(f"Unknown transport scenario '{scenario}'; expected {SCENARIOS}")


def _case_weights(P: FusedLaw, axes: TransportAxes, space: AxisSet) -> np.ndarray:
    """w(l; P) = sum_a p(l,a|Y=1,S=2)/p(Y=1|l,a,S=1), normalized, as a table over L."""
    first, second = P.laws
    y1 = axis_values(first.space, axes.outcome)
    prevalence = conditional_mean(first, y1, axes.exposure)
    cases = second.mass * axis_values(second.space, axes.outcome)
    exposure_space = first.space.sub(axes.exposure)
    case_mass = np.bincount(
        cell_index(second.space, axes.exposure), weights=cases, minlength=exposure_space.size
    )
    if np.any((case_mass > 0) & (prevalence <= 0)):
        raise PositivityError("P(Y=1|l,a,S=1) must be positive where cases are observed")
    ratio = np.divide(case_mass, prevalence, out=np.zeros_like(case_mass), where=prevalence > 0)
    w = ratio.reshape(-1, 2).sum(axis=1)
    return w / w.sum()


def _case_control_alpha(
    P: FusedLaw, axes: TransportAxes, l0: Sequence[Any]
) -> Tuple[float, np.ndarray, np.ndarray]:
    """alpha(P) = Q(Y=1) from the (l0, a=0) anchor and p(l, a | Y=y, S=2) tables."""
    first, second = P.laws
    anchor = tuple(l0) + (0,)
    exposure_space = first.space.sub(axes.exposure)
    k = exposure_space.flat_index(anchor)
    prevalence = conditional_mean(first, axis_values(first.space, axes.outcome), axes.exposure)
    pi0 = prevalence[k]
    if not 0 < pi0 < 1:
        raise PositivityError("0 < P(Y=1|l0, A=0, S=1) < 1 is required")
    y = axis_values(second.space, axes.outcome)
    index = cell_index(second.space, axes.exposure)
    given = []
    for level in (0, 1):
        mass = np.bincount(index, weights=second.mass * (y == level), minlength=exposure_space.size)
        if mass.sum() <= 0:
            raise PositivityError(f"Source 2 has no mass at {axes.outcome}={level}")
        given.append(mass / mass.sum())
    odds = (given[1][k] / pi0) / (given[0][k] / (1.0 - pi0))
    return 1.0 / (1.0 + odds), given[0], given[1]


def ate_transport_phi(
    P: FusedLaw, scenario: str, axes: TransportAxes, l0: Optional[Sequence[Any]] = None
) -> float:
    """Identification formula of the scenario evaluated at P."""
    first, second = P.laws
    y = axis_values(first.space, axes.outcome)
    arms = conditional_mean(first, y, axes.exposure).reshape(-1, 2)
    effect = arms[:, 1] - arms[:, 0]
    if scenario == "i":
        return float(marginal(second, tuple(axes.covariates)).mass @ effect)
    if scenario in ("ii", "iii.a"):
        return float(_case_weights(P, axes, first.space) @ effect)
    if scenario == "iii.b":
        alpha, given0, given1 = _case_control_alpha(P, axes, l0)
        mixture = given1 * alpha + given0 * (1.0 - alpha)
        omega = np.divide(given1, mixture, out=np.zeros_like(given1), where=mixture > 0)
        l_mass = mixture.reshape(-1, 2).sum(axis=1)
        signed = omega.reshape(-1, 2) * np.array([-1.0, 1.0])
        return float(alpha * np.sum(signed * l_mass[:, None]))
    raise FrameworkMismatchError(f"Unknown transport scenario '{scenario}'")


def transport_ideal(
    P: FusedLaw,
    space: AxisSet,
    scenario: str,
    axes: TransportAxes,
    l0: Optional[Sequence[Any]] = None,
) -> FinitePmf:
    """An ideal law identified by P; in scenario i the propensity is taken from source 1."""
    if scenario == "i":
        first, second = P.laws
        q_l = marginal_at(second, tuple(axes.covariates), space)
        index = cell_index(space, axes.ideal)
        in_first = first.mass[index]
        p_l = marginal_at(first, tuple(axes.covariates), space)
        if np.any(p_l <= 0):
            raise PositivityError("Source 1 must cover every covariate level")
        return FinitePmf.from_weights(space, q_l * in_first / p_l)
    if scenario == "ii":
        return ub_ideal_from_observed(P, space, UBLayout((axes.outcome,), axes.exposure), (1,), 1)
    if scenario == "iii.a":
        return ub_ideal_from_observed(P, space, UBLayout((axes.outcome,), axes.exposure), (1,), 1)
    if scenario == "iii.b":
        return ub_ideal_from_observed(
            P, space, UBLayout(axes.exposure, (axes.outcome,)), tuple(l0) + (0,), 2
        )
    raise FrameworkMismatchError(f"Unknown transport scenario '{scenario}'")


def transport_if(
    P: FusedLaw,
    space: AxisSet,
    scenario: str,
    axes: TransportAxes,
    l0: Optional[Sequence[Any]] = None,
    Q: Optional[FinitePmf] = None,
    check: bool = True,
) -> ObsFunction:
    """Closed-form observed influence function of the scenario (the anchor one for iii.a).

    With ``check`` off the model is bound without alignment checks.
    """
    C = transport_alignment(space, scenario, axes, l0)
    lam = P.weights
    if scenario == "i":
        first, second = P.laws
        cov = tuple(axes.covariates)
        a = axis_values(space, axes.treatment)
        y = axis_values(space, axes.outcome)
        first_at = first.mass[cell_index(space, axes.ideal)]
        mu = expectation_given(FinitePmf.from_weights(space, first_at), y, axes.exposure)
        propensity = expectation_given(FinitePmf.from_weights(space, first_at), a, cov)
        if np.any(propensity <= 0) or np.any(propensity >= 1):
            raise PositivityError("0 < P(A=1|l,S=1) < 1 is required")
        p_a = np.where(a == 1, propensity, 1.0 - propensity)
        ratio = marginal_at(second, cov, space) / marginal_at(first, cov, space)
        mu0, mu1 = _arm_means(first, axes, space)
        phi = ate_transport_phi(P, "i", axes)
        return on_sources(
            space,
            C,
            [ratio * (2 * a - 1) / p_a * (y - mu) / lam[0], (mu1 - mu0 - phi) / lam[1]],
        )
    if Q is None:
        Q = transport_ideal(P, space, scenario, axes, l0)
    model = FusedModel.bind(Q, C, P=P, strict=False) if check else FusedModel.unchecked(Q, C, P)
    psi = aipw_ideal_if(Q, axes)
    if scenario == "ii":
        a = axis_values(space, axes.treatment)
        y = axis_values(space, axes.outcome)
        mu = expectation_given(Q, y, axes.exposure)
        mu0, mu1 = _arm_means(Q, axes, space)
        propensity = expectation_given(Q, a, tuple(axes.covariates))
        q_a = np.where(a == 1, propensity, 1.0 - propensity)
        effect = mu1 - mu0 - ate(Q, axes)
        first, second = P.laws
        ratio1 = marginal_at(Q, axes.exposure, space) / marginal_at(first, axes.exposure, space)
        q_cases = float(Q.mass @ y)
        p_cases = float(second.mass @ axis_values(second.space, axes.outcome))
        s1 = ratio1 * (y - mu) * ((2 * a - 1) / q_a - effect / mu)
        s2 = q_cases / p_cases * y / mu * effect
        return on_sources(space, C, [s1 / lam[0], s2 / lam[1]])
    if scenario == "iii.a":
        return generic_ub_full_if(model, psi)
    return generic_ub_if(model, tuple(l0) + (0,), psi, 2)


class TransportFramework(BaseFramework):
    """Average treatment effect in the target population."""

    scenario = ""

    def validate_config(self) -> None:
        treatment = self.params.get("treatment", "A")
        outcome = self.params.get("outcome", "Y")
        default_cov = tuple(n for n in self.space.names if n not in (treatment, outcome))
        covariates = tuple(self.params.get("covariates", default_cov))
        self.axes = TransportAxes(covariates, treatment, outcome)
        self.require_axes(self.axes.ideal)
        if set(self.axes.ideal) != set(self.space.names):
            raise FrameworkMismatchError(f"W must be exactly {self.axes.ideal}")
        self.require_binary(treatment)
        self.require_binary(outcome)
        cov_space = self.space.sub(covariates)
        self.l0 = tuple(self.params.get("l0", cov_space.cells()[0]))
        cov_space.flat_index(self.l0)

    def alignment(self) -> AlignmentSpec:
        return transport_alignment(self.space, self.scenario, self.axes, self.l0)

    def ideal_functional(self, Q: FinitePmf) -> float:
        return ate(Q, self.axes)

    def ideal_influence(self, Q: FinitePmf) -> IdealFunction:
        return aipw_ideal_if(Q, self.axes)

    def phi(self, P: FusedLaw) -> float:
        return ate_transport_phi(P, self.scenario, self.axes, self.l0)

    def influence(self, P: FusedLaw) -> ObsFunction:
        return transport_if(P, self.space, self.scenario, self.axes, self.l0, check=self.config.check)

    def ideal_from_observed(self, P: FusedLaw) -> FinitePmf:
        return transport_ideal(P, self.space, self.scenario, self.axes, self.l0)

    def efficient_influence(self, P: FusedLaw) -> ObsFunction:
        return self.influence(P)


@register_framework
class TransportI(TransportFramework):
    kind = "TransportI"
    scenario = "i"


@register_framework
class TransportII(TransportFramework):
    kind = "TransportII"
    scenario = "ii"


@register_framework
class TransportIIIa(TransportFramework):
    kind = "TransportIIIa"
    scenario = "iii.a"

    def q_maps(self) -> List[QMap]:
        layout = UBLayout((self.axes.outcome,), self.axes.exposure)

        def make(level):
            return lambda P: ub_ideal_from_observed(P, self.space, layout, (level,), 1)

        return [make(level) for level in self.space.levels(self.axes.outcome)]

    def efficient_influence(self, P: FusedLaw) -> ObsFunction:
        model = self.bind(P)
        return generic_ub_eif_discrete(model, self.ideal_influence(model.Q))

    def family_shift(self, model: FusedModel, t: IdealFunction) -> ObsFunction:
        """Shift of the anchor influence function indexed by t in L2_0(Q)."""
        return full_family_shift(model, double_centered(model, t))


@register_framework
class TransportIIIb(TransportFramework):
    kind = "TransportIIIb"
    scenario = "iii.b"


@dataclass(frozen=True, eq=False)
class CaseControlDesign:
    """Ideal law and observed law shared by scenarios ii, iii.a and iii.b."""
    space: AxisSet
    Q: FinitePmf
    P: FusedLaw
    axes: TransportAxes
    l0: Tuple[int, ...]


def case_control_design(p_s1: float = 0.5) -> CaseControlDesign:
    """Case-control transport design with L = (L1, L2), L1 in {1,2}, L2 in {1,2,3}.

    Q: L1, L2 independent uniform; logit Q(Y=1|A,L) = 0.5 + 0.5A + 0.25L1 - 0.25L2;
    logit Q(A=1|L) = -0.2 - 0.15L1 + 0.25L2.
    Source 1: P(L1) = (0.4, 0.6), P(L2) = (0.3, 0.33, 0.37) independent,
    logit P(A=1|L) = 0.1 - 0.2L1 + 0.2L2 and Y | A, L from Q.
    Source 2: P(Y=1) = 0.4 and (L, A) | Y from Q.
    """
    if not 0 < p_s1 < 1:
        raise FrameworkMismatchError(f"P(S=1) must lie in (0, 1), got {p_s1}")
    space = AxisSet.of(L1=(1, 2), L2=(1, 2, 3), A=(0, 1), Y=(0, 1))
    axes = TransportAxes(("L1", "L2"), "A", "Y")
    l1 = axis_values(space, "L1")
    l2 = axis_values(space, "L2")
    a = axis_values(space, "A")
    y = axis_values(space, "Y")
    outcome = expit(0.5 + 0.5 * a + 0.25 * l1 - 0.25 * l2)
    p_y = np.where(y == 1, outcome, 1.0 - outcome)
    treat_q = expit(-0.2 - 0.15 * l1 + 0.25 * l2)
    q_a = np.where(a == 1, treat_q, 1.0 - treat_q)
    Q = FinitePmf.from_weights(space, (1.0 / 6.0) * q_a * p_y)

    l1_mass = np.array([0.4, 0.6])[(l1 - 1).astype(int)]
    l2_mass = np.array([0.3, 0.33, 0.37])[(l2 - 1).astype(int)]
    treat_p = expit(0.1 - 0.2 * l1 + 0.2 * l2)
    p_a = np.where(a == 1, treat_p, 1.0 - treat_p)
    first = FinitePmf.from_weights(space, l1_mass * l2_mass * p_a * p_y)

    second_space = space.sub(("Y", "L1", "L2", "A"))
    q_y = marginal_at(Q, ("Y",), space)
    cases = np.where(y == 1, 0.4, 0.6)
    second_on_w = Q.mass / q_y * cases
    index = cell_index(space, second_space.names)
    second_mass = np.zeros(second_space.size)
    second_mass[index] = second_on_w
    second = FinitePmf.from_weights(second_space, second_mass)
    P = FusedLaw.from_weights([p_s1, 1.0 - p_s1], [first, second])
    return CaseControlDesign(space, Q, P, axes, (1, 1))
