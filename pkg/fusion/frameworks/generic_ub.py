"""
Fused-data models on W = (U, B) with cross-conditional alignments.

Point models align U | B in one source and B | U = u0 in the other; full
models align both conditionals completely, which constrains the observed
law. The joint law is recovered from the conditionals through an anchor u0.
"""

import logging
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from fusion.core import (
    AxisSet,
    FinitePmf,
    RealTable,
    cell_index,
    conditional,
    expectation_given,
    reorder,
)
from fusion.exceptions import (
    FrameworkMismatchError,
    NotInRangeError,
    PositivityError,
    SingularMatrixError,
    SpaceMismatchError,
)
from fusion.frameworks.base import (
    BaseFramework,
    QMap,
    all_cells,
    indicator,
    marginal_at,
    on_sources,
    register_framework,
    source_at_ideal,
)
from fusion.linalg import pinv_solve
from fusion.model import AlignmentSpec, FusedLaw, MarginalFlag, SourceSpec
from fusion.operator import FusedModel, IdealFunction, ObsFunction

logger = logging.getLogger("Fusion.Frameworks.GenericUB")

CONDITION_LIMIT = 1e8


@dataclass(frozen=True)
class UBLayout:
    """Split of the ideal axes into U and B."""
    u_axes: Tuple[str, ...]
    b_axes: Tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "u_axes", tuple(self.u_axes))
        object.__setattr__(self, "b_axes", tuple(self.b_axes))
        if not self.u_axes or not self.b_axes or set(self.u_axes) & set(self.b_axes):
            raise SpaceMismatchError("U and B must be nonempty and disjoint")


def ub_alignment(
    space: AxisSet,
    layout: UBLayout,
    u0: Optional[Sequence[Any]] = None,
    conditional_source: int = 1,
) -> AlignmentSpec:
    """Alignments of a (U, B) model.

    The conditional source observes (B, U) with U | B aligned everywhere; the
    other source observes (U, B) with B | U aligned at u0, or everywhere when
    ``u0`` is None.
    """
    if conditional_source not in (1, 2):
        raise SpaceMismatchError("conditional_source must be 1 or 2")
    if set(layout.u_axes) | set(layout.b_axes) != set(space.names):
        raise SpaceMismatchError(f"U and B must cover {space.names}")
    u, b = layout.u_axes, layout.b_axes
    if u0 is None:
        anchor_region = all_cells(space, u)
    else:
        anchor_region = frozenset({tuple(u0)})
        space.sub(u).flat_index(tuple(u0))
    other = 3 - conditional_source
    specs = {
        conditional_source: SourceSpec(
            conditional_source, b + u, (b, u), (MarginalFlag.EMPTY, all_cells(space, b))
        ),
        other: SourceSpec(other, u + b, (u, b), (MarginalFlag.EMPTY, anchor_region)),
    }
    return AlignmentSpec((specs[1], specs[2]))


def reconstruct_joint(
    u_given_b: RealTable, b_given_u0: RealTable, u0: Sequence[Any]
) -> FinitePmf:
    """q(u, b) proportional to q(u|b) q(b|u0) / q(u0|b).

    Args:
        u_given_b: Conditional table of U given B over the axes (B, U).
        b_given_u0: Conditional law of B given U = u0, over B.
        u0: Anchor level of U.

    Returns:
        Joint law over (U, B).

    Raises:
        PositivityError: If q(u0|b) vanishes where B given u0 has mass.
    """
    b_space = b_given_u0.space
    n_b = len(b_space.names)
    if u_given_b.space.names[:n_b] != b_space.names:
        raise SpaceMismatchError("U-given-B table must list the B axes first")
    u_names = u_given_b.space.names[n_b:]
    u_space = u_given_b.space.sub(u_names)
    table = u_given_b.values.reshape(b_space.size, u_space.size)
    anchor = table[:, u_space.flat_index(tuple(u0))]
    pb = b_given_u0.values
    if np.any((pb > 0) & (anchor <= 0)):
        raise PositivityError(f"q(u0={tuple(u0)}|b) is zero where B given u0 has mass")
    scale = np.divide(pb, anchor, out=np.zeros_like(pb), where=anchor > 0)
    joint = table * scale[:, None]
    space = AxisSet(u_space.axes + b_space.axes)
    return FinitePmf.from_weights(space, joint.T.reshape(-1))


def spec_layout(model: FusedModel, conditional_source: int) -> UBLayout:
    spec = model.C.sources[conditional_source - 1]
    if spec.n_blocks != 2:
        raise FrameworkMismatchError("A (U, B) source needs exactly two blocks")
    return UBLayout(spec.blocks[1], spec.blocks[0])


def ub_ideal_from_observed(
    P: FusedLaw,
    space: AxisSet,
    layout: UBLayout,
    u0: Sequence[Any],
    conditional_source: int = 1,
) -> FinitePmf:
    """Ideal law over W reconstructed from the aligned conditionals of P."""
    u, b = layout.u_axes, layout.b_axes
    cond_law = P.laws[conditional_source - 1]
    anchor_law = P.laws[2 - conditional_source]
    u_given_b = conditional(cond_law, u, b, strict=False)
    b_given_u = conditional(anchor_law, b, u, strict=False)
    u_space = anchor_law.space.sub(u)
    rows = b_given_u.values.reshape(u_space.size, -1)
    b_given_u0 = RealTable(anchor_law.space.sub(b), rows[u_space.flat_index(tuple(u0))])
    joint = reconstruct_joint(u_given_b, b_given_u0, u0)
    return reorder(joint, space.names)


def best_anchor(P: FusedLaw, layout: UBLayout, conditional_source: int = 1) -> Tuple[Any, ...]:
    """Level of U with the largest minimum of p(u0|b) in the conditional source."""
    law = P.laws[conditional_source - 1]
    table = conditional(law, layout.u_axes, layout.b_axes, strict=False).values
    u_space = law.space.sub(layout.u_axes)
    b_size = law.space.sub(layout.b_axes).size
    worst = table.reshape(b_size, u_space.size).min(axis=0)
    return u_space.cells()[int(np.argmax(worst))]


def _quantities(model: FusedModel, layout: UBLayout):
    Q = model.Q
    space = Q.space
    q_b = marginal_at(Q, layout.b_axes, space)
    q_u = marginal_at(Q, layout.u_axes, space)
    return space, q_b, q_u


def generic_ub_if(
    model: FusedModel,
    u0: Sequence[Any],
    psi1_Q: IdealFunction,
    conditional_source: int = 1,
) -> ObsFunction:
    """Unique observed influence function of a point-anchored (U, B) model.

    phi = 1(s=c)/lam_c q(b)/p_c(b) {psi - 1(u=u0)/q(u0|b) E_Q[psi|b]}
        + 1(s=a)/lam_a q(u0)/p_a(u0) 1(u=u0)/q(u0|b) E_Q[psi|b]
    with c the conditional source and a the anchor source.

    Raises:
        PositivityError: If q(u0|b) vanishes at a cell with mass.
    """
    layout = spec_layout(model, conditional_source)
    space, q_b, _ = _quantities(model, layout)
    c, a = conditional_source - 1, 2 - conditional_source
    psi = np.asarray(psi1_Q, dtype=float)
    at_u0 = indicator(space, layout.u_axes, u0)
    q_u0_b = expectation_given(model.Q, at_u0, layout.b_axes)
    if np.any((q_b > 0) & (q_u0_b <= 0)):
        raise PositivityError(f"q(u0={tuple(u0)}|b) must be positive")
    e_psi = expectation_given(model.Q, psi, layout.b_axes)
    weight = np.divide(at_u0, q_u0_b, out=np.zeros_like(at_u0), where=q_u0_b > 0) * e_psi
    lam = model.lam
    p_b = marginal_at(model.P.laws[c], layout.b_axes, space)
    q_u0 = float(model.Q.mass @ at_u0)
    p_u0 = float(model.P.laws[a].mass @ indicator(model.source_space(a), layout.u_axes, u0))
    pieces: List[np.ndarray] = [None, None]
    pieces[c] = q_b / p_b * (psi - weight) / lam[c]
    pieces[a] = q_u0 / p_u0 * weight / lam[a]
    return on_sources(space, model.C, pieces)


def _omega(model: FusedModel, layout: UBLayout) -> np.ndarray:
    space, q_b, q_u = _quantities(model, layout)
    q = model.Q.mass
    return np.divide(q_u * q_b, q, out=np.zeros_like(q), where=q > 0)


def generic_ub_full_if(model: FusedModel, psi1_Q: IdealFunction) -> ObsFunction:
    """Anchor influence function of the fully aligned (U, B) model.

    phi = 1(s=1)/lam_1 q(b)/p_1(b) {psi - w E_Q[psi|b]} + 1(s=2)/lam_2 q(u)/p_2(u) w E_Q[psi|b]
    with w = q(u) q(b) / q(u, b).
    """
    layout = spec_layout(model, 1)
    space, q_b, q_u = _quantities(model, layout)
    psi = np.asarray(psi1_Q, dtype=float)
    weighted = _omega(model, layout) * expectation_given(model.Q, psi, layout.b_axes)
    lam = model.lam
    p_b = marginal_at(model.P.laws[0], layout.b_axes, space)
    p_u = marginal_at(model.P.laws[1], layout.u_axes, space)
    return on_sources(
        space,
        model.C,
        [q_b / p_b * (psi - weighted) / lam[0], q_u / p_u * weighted / lam[1]],
    )


def double_centered(model: FusedModel, t: IdealFunction) -> IdealFunction:
    """f = w {t - E*[t|b] - E*[t|u] + E*[t]} under the product law q(u) q(b).

    Every such f has E_Q[f|U] = E_Q[f|B] = 0.
    """
    layout = spec_layout(model, 1)
    space, q_b, q_u = _quantities(model, layout)
    t = np.asarray(t, dtype=float)
    product = FinitePmf.from_weights(space, q_u * q_b)
    centered = (
        t
        - expectation_given(product, t, layout.b_axes)
        - expectation_given(product, t, layout.u_axes)
        + float(product.mass @ t)
    )
    return _omega(model, layout) * centered


def full_family_shift(model: FusedModel, f: IdealFunction) -> ObsFunction:
    """[1(s=1)/lam_1 q(b)/p_1(b) - 1(s=2)/lam_2 q(u)/p_2(u)] f for f in the double-null space."""
    layout = spec_layout(model, 1)
    space, q_b, q_u = _quantities(model, layout)
    f = np.asarray(f, dtype=float)
    lam = model.lam
    p_b = marginal_at(model.P.laws[0], layout.b_axes, space)
    p_u = marginal_at(model.P.laws[1], layout.u_axes, space)
    return on_sources(space, model.C, [q_b / p_b * f / lam[0], -q_u / p_u * f / lam[1]])


def ub_grid(space: AxisSet, layout: UBLayout, values: np.ndarray) -> np.ndarray:
    """Arrange a W function as an (n_b, n_u) array."""
    ib = cell_index(space, layout.b_axes)
    iu = cell_index(space, layout.u_axes)
    out = np.zeros((space.sub(layout.b_axes).size, space.sub(layout.u_axes).size))
    out[ib, iu] = values
    return out


def generic_ub_eif_discrete(
    model: FusedModel, psi1_Q: IdealFunction, tol: float = 1e-8
) -> ObsFunction:
    """Efficient influence function of the fully aligned model with finite U.

    Solves rho (h - E[h|b]) + (1 - rho)(h - E[h|u]) = r with r = (q/p) psi,
    p the pooled observed law and rho = p(S=1|u,b). Per b this is
    (I - rho beta') h(b) = r(b) + (1 - rho) c with c(u) = E_Q[h|u] solving
    c = a + K c. Returns 1(s=1){h - E_P[h|b,S=1]} + 1(s=2){h - E_P[h|u,S=2]}.

    Raises:
        SingularMatrixError: If some I - rho beta' is singular.
        NotInRangeError: If c = a + K c has no solution within ``tol``.
    """
    layout = spec_layout(model, 1)
    space = model.Q.space
    lam = model.lam
    p1 = lam[0] * source_at_ideal(space, model.C, model.P, 0)
    p2 = lam[1] * source_at_ideal(space, model.C, model.P, 1)
    pooled = p1 + p2
    if np.any(pooled <= 0):
        raise PositivityError("Pooled observed law must be positive on W")
    psi = np.asarray(psi1_Q, dtype=float)
    r = ub_grid(space, layout, model.Q.mass / pooled * psi)
    rho = ub_grid(space, layout, p1 / pooled)
    law1, law2 = model.P.laws
    beta = ub_grid(space, layout, _conditional_at(law1, space, layout.b_axes))
    g = ub_grid(space, layout, _conditional_at(law2, space, layout.u_axes))
    n_b, n_u = r.shape
    identity = np.eye(n_u)
    solved_r = np.zeros_like(r)
    solved_d = np.zeros((n_b, n_u, n_u))
    for i in range(n_b):
        pencil = identity - np.outer(rho[i], beta[i])
        if np.linalg.cond(pencil) > CONDITION_LIMIT:
            raise SingularMatrixError(f"I - rho beta' is singular at B cell {i}")
        solved_r[i] = np.linalg.solve(pencil, r[i])
        solved_d[i] = np.linalg.solve(pencil, np.diag(1.0 - rho[i]))
    a = np.einsum("bt,bt->t", g, solved_r)
    k = np.einsum("bt,bts->ts", g, solved_d)
    c, residual, truncated = pinv_solve(identity - k, a)
    if residual > tol * max(1.0, float(np.linalg.norm(a))):
        raise NotInRangeError(f"Discrete information equation residual {residual:.3e}", residual)
    if truncated:
        logger.debug(f"Discrete information equation truncated {truncated} singular values")
    h = solved_r + np.einsum("bts,s->bt", solved_d, c)
    first = h - np.sum(beta * h, axis=1, keepdims=True)
    second = h - np.sum(g * h, axis=0, keepdims=True)
    ib = cell_index(space, layout.b_axes)
    iu = cell_index(space, layout.u_axes)
    return on_sources(space, model.C, [first[ib, iu], second[ib, iu]])


def _conditional_at(law: FinitePmf, space: AxisSet, given: Tuple[str, ...]) -> np.ndarray:
    """law(other axes | given) read at the W cells."""
    joint = law.mass[cell_index(space, law.space.names)]
    index = cell_index(space, given)
    den = np.bincount(index, weights=joint, minlength=space.sub(given).size)[index]
    return np.divide(joint, den, out=np.zeros_like(joint), where=den > 0)


def point_conditional_functional(
    Q: FinitePmf, layout: UBLayout, u_star: Sequence[Any], b_star: Sequence[Any]
) -> Tuple[float, IdealFunction]:
    """psi(Q) = Q(U=u*|B=b*) and its nonparametric influence function."""
    at_u = indicator(Q.space, layout.u_axes, u_star)
    at_b = indicator(Q.space, layout.b_axes, b_star)
    q_b = float(Q.mass @ at_b)
    if q_b <= 0:
        raise PositivityError(f"Q(B={tuple(b_star)}) must be positive")
    value = float(Q.mass @ (at_u * at_b)) / q_b
    return value, at_b / q_b * (at_u - value)


class _UBFramework(BaseFramework):
    """Shared configuration of the (U, B) frameworks."""

    def validate_config(self) -> None:
        self.layout = UBLayout(self.params.get("u_axes", ()), self.params.get("b_axes", ()))
        self.require_axes(self.layout.u_axes + self.layout.b_axes)
        u_space = self.space.sub(self.layout.u_axes)
        b_space = self.space.sub(self.layout.b_axes)
        if u_space.size < 2:
            raise FrameworkMismatchError("U must take at least two values")
        self.u_star = tuple(self.params.get("u_star", u_space.cells()[0]))
        self.b_star = tuple(self.params.get("b_star", b_space.cells()[0]))
        u_space.flat_index(self.u_star)
        b_space.flat_index(self.b_star)
        self.functional: Optional[Callable[[FinitePmf], float]] = self.params.get("functional")
        self.ideal_if: Optional[Callable[[FinitePmf], IdealFunction]] = self.params.get("ideal_if")

    def ideal_functional(self, Q: FinitePmf) -> float:
        if self.functional is not None:
            return float(self.functional(Q))
        return point_conditional_functional(Q, self.layout, self.u_star, self.b_star)[0]

    def ideal_influence(self, Q: FinitePmf) -> IdealFunction:
        if self.ideal_if is not None:
            return np.asarray(self.ideal_if(Q), dtype=float)
        return point_conditional_functional(Q, self.layout, self.u_star, self.b_star)[1]

    def phi(self, P: FusedLaw) -> float:
        return self.ideal_functional(self.ideal_from_observed(P))


@register_framework
class GenericUBPointFramework(_UBFramework):
    """U | B aligned in one source, B | U = u0 aligned in the other."""

    kind = "GenericUBPoint"

    def validate_config(self) -> None:
        super().validate_config()
        u_space = self.space.sub(self.layout.u_axes)
        self.u0 = tuple(self.params.get("u0", u_space.cells()[-1]))
        u_space.flat_index(self.u0)
        self.conditional_source = int(self.params.get("conditional_source", 1))

    def alignment(self) -> AlignmentSpec:
        return ub_alignment(self.space, self.layout, self.u0, self.conditional_source)

    def ideal_from_observed(self, P: FusedLaw) -> FinitePmf:
        return ub_ideal_from_observed(P, self.space, self.layout, self.u0, self.conditional_source)

    def influence(self, P: FusedLaw) -> ObsFunction:
        model = self.bind(P)
        return generic_ub_if(model, self.u0, self.ideal_influence(model.Q), self.conditional_source)

    def efficient_influence(self, P: FusedLaw) -> ObsFunction:
        return self.influence(P)


@register_framework
class GenericUBFullFramework(_UBFramework):
    """U | B aligned in source 1 and B | U aligned in source 2."""

    kind = "GenericUBFull"

    def alignment(self) -> AlignmentSpec:
        return ub_alignment(self.space, self.layout)

    def ideal_from_observed(self, P: FusedLaw) -> FinitePmf:
        anchor = best_anchor(P, self.layout)
        return ub_ideal_from_observed(P, self.space, self.layout, anchor)

    def q_maps(self) -> List[QMap]:
        u_space = self.space.sub(self.layout.u_axes)

        def make(u0):
            return lambda P: ub_ideal_from_observed(P, self.space, self.layout, u0)

        return [make(u0) for u0 in u_space.cells()]

    def influence(self, P: FusedLaw) -> ObsFunction:
        model = self.bind(P)
        return generic_ub_full_if(model, self.ideal_influence(model.Q))

    def efficient_influence(self, P: FusedLaw) -> ObsFunction:
        model = self.bind(P)
        return generic_ub_eif_discrete(model, self.ideal_influence(model.Q))

    def demo(self, P: FusedLaw, Q: Optional[FinitePmf] = None) -> Dict[str, Any]:
        # demo.py builds on this module
        from fusion.frameworks.demo import naive_vs_obedient_demo

        report = naive_vs_obedient_demo(self.bind(P, Q), self.u_star, self.b_star)
        return {**report.to_dict(), "naive": report.naive, "efficient": report.efficient}

    def family_shift(self, model: FusedModel, t: IdealFunction) -> ObsFunction:
        return full_family_shift(model, double_centered(model, t))

    def constraint_residual(self, P: FusedLaw) -> float:
        """Spread of the ideal laws implied by different anchors; 0 when P is in the model."""
        laws = [q(P).mass for q in self.q_maps()]
        return float(max(np.max(np.abs(m - laws[0])) for m in laws))
