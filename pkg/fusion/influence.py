"""
Observed-data influence functions from ideal ones.

Ideal influence functions are decomposed into components in the aligned
spaces D_k^(j)(Q), lifted to the observed data by density-ratio weighting,
and projected or solved for the efficient influence function.
"""

import logging
from dataclasses import dataclass
from typing import Iterator, Optional, Sequence, Tuple

import numpy as np

from fusion.exceptions import DecompositionFailed, NotInRangeError, SpaceMismatchError
from fusion.linalg import (
    RANK_TOLERANCE,
    min_norm_lstsq,
    pinv_solve,
    project,
    subspace_intersection,
    weighted_gram_schmidt,
    weighted_norm,
)
from fusion.model import FusedLaw
from fusion.operator import (
    FusedModel,
    IdealFunction,
    ObsFunction,
    SubspaceBasis,
    apply_A,
    apply_A_star,
    ideal_tangent_complement,
    information_blocks,
    information_operator,
)

logger = logging.getLogger("Fusion.Influence")

DECOMPOSE_TOLERANCE = 1e-8
EIF_TOLERANCE = 1e-9


@dataclass(frozen=True, eq=False)
class IFDecomposition:
    """psi = sum_j sum_k m_k^(j) with m_k^(j) in D_k^(j)(Q)."""
    components: Tuple[Tuple[np.ndarray, ...], ...]
    psi: np.ndarray
    corrections: Tuple[np.ndarray, ...] = ()

    @property
    def n_sources(self) -> int:
        return len(self.components)

    def source_total(self, j: int) -> np.ndarray:
        """m^(j) = sum_k m_k^(j) (0-based j)."""
        return np.sum(self.components[j], axis=0) if self.components[j] else np.zeros_like(self.psi)

    def total(self) -> np.ndarray:
        return sum(self.source_total(j) for j in range(self.n_sources))


def _stack(bases: Sequence[SubspaceBasis], n: int) -> np.ndarray:
    blocks = [b.vectors for b in bases]
    return np.hstack(blocks) if blocks else np.zeros((n, 0))


def decompose_algorithm(
    spacesD: Sequence[Sequence[SubspaceBasis]],
    psi1_Q: IdealFunction,
    tol: float = DECOMPOSE_TOLERANCE,
) -> IFDecomposition:
    """DECOMPOSE: split an ideal influence function over the aligned spaces.

    At step j the correction f^(j) in the sum of the later sources' spaces
    solves Pi[f | D^(j) perp] = Pi[psi - sum_{l<j} m^(l) | D^(j) perp] by
    minimum-norm least squares; then m_k^(j) = Pi[psi - sum_{l<j} m^(l) - f^(j) | D_k^(j)].

    Args:
        spacesD: spacesD[j][k] is an orthonormal basis of D_k^(j)(Q).
        psi1_Q: Ideal influence function on the cells of W.
        tol: Relative least-squares residual above which the step fails.

    Returns:
        IFDecomposition with the components and the corrections f^(j).

    Raises:
        DecompositionFailed: If a step has no solution.
    """
    if not spacesD or not spacesD[0]:
        raise SpaceMismatchError("DECOMPOSE needs at least one source with one block")
    weights = spacesD[0][0].weights
    psi = np.asarray(psi1_Q, dtype=float)
    n = psi.shape[0]
    scale = weighted_norm(psi, weights)
    n_sources = len(spacesD)
    if scale == 0.0:
        zero = tuple(tuple(np.zeros(n) for _ in row) for row in spacesD)
        return IFDecomposition(zero, psi, tuple(np.zeros(n) for _ in range(n_sources)))

    sums = [_stack(row, n) for row in spacesD]
    previous = np.zeros(n)
    components, corrections = [], []
    for j in range(n_sources):
        target = psi - previous
        own = sums[j]
        perp_target = target - project(own, weights, target)
        if j < n_sources - 1:
            later = weighted_gram_schmidt(np.hstack(sums[j + 1:]), weights)
            design = later - own @ (own.T @ (weights[:, None] * later))
            coef, residual = min_norm_lstsq(design, perp_target, weights)
            correction = later @ coef if later.shape[1] else np.zeros(n)
        else:
            correction = np.zeros(n)
            residual = weighted_norm(perp_target, weights)
        relative = residual / scale
        if relative > tol:
            logger.info(f"DECOMPOSE failed at source {j + 1} (relative residual {relative:.3e})")
            raise DecompositionFailed(j + 1, relative)
        pieces = tuple(b.project(target - correction) for b in spacesD[j])
        components.append(pieces)
        corrections.append(correction)
        previous = previous + sum(pieces)
    return IFDecomposition(tuple(components), psi, tuple(corrections))


def two_source_solve(
    model: FusedModel, psi1_Q: IdealFunction, tol: float = DECOMPOSE_TOLERANCE
) -> IFDecomposition:
    """Solve Pi[m2 | D^(1) perp] = Pi[psi | D^(1) perp] for m2 in D^(2); m1 = psi - m2.

    Raises:
        DecompositionFailed: If the linear system has no solution.
    """
    if model.n_sources != 2:
        raise SpaceMismatchError(f"two_source_solve needs J=2, model has J={model.n_sources}")
    weights = model.Q.mass
    psi = np.asarray(psi1_Q, dtype=float)
    scale = weighted_norm(psi, weights)
    first, second = model.d_sum_basis(0), model.d_sum_basis(1)
    rhs = psi - project(first, weights, psi)
    design = second - first @ (first.T @ (weights[:, None] * second))
    coef, residual = min_norm_lstsq(design, rhs, weights)
    relative = residual / scale if scale > 0 else residual
    if relative > tol:
        raise DecompositionFailed(2, relative)
    m2 = second @ coef if second.shape[1] else np.zeros_like(psi)
    m1 = psi - m2
    components = (
        tuple(b.project(m1) for b in model.d_bases[0]),
        tuple(b.project(m2) for b in model.d_bases[1]),
    )
    return IFDecomposition(components, psi)


def lift_to_observed(model: FusedModel, dec: IFDecomposition) -> ObsFunction:
    """phi(o) = sum_j 1(s=j)/lambda_j sum_k (dQ/dP(.|S=j))(history) m_k^(j)."""
    if dec.n_sources != model.n_sources:
        raise SpaceMismatchError("Decomposition and model have different source counts")
    lam = model.lam
    pieces = []
    for j, spec in enumerate(model.C.sources):
        total = np.zeros(model.source_space(j).size)
        for k in range(spec.n_blocks):
            m_on_source = model.ideal_on_source(j, dec.components[j][k])
            total += model.q_over_p[j][k] * m_on_source
        pieces.append(total / lam[j])
    return np.concatenate(pieces)


def gradient_residual(model: FusedModel, phi: ObsFunction, psi1_Q: IdealFunction) -> float:
    """Sup-norm residual of A* phi = (Pi[psi | T(Q,Q)], 0, 0)."""
    h = apply_A_star(model, phi)
    target = model.project_tangent_Q(np.asarray(psi1_Q, dtype=float))
    parts = [np.abs(h.h_Q - target), *(np.abs(u) for u in h.h_U), np.abs(h.h_lambda)]
    return float(max(np.max(p, initial=0.0) for p in parts))


@dataclass(frozen=True, eq=False)
class IFFamily:
    """All observed influence functions phi + lift(+Pi_D1 f, -Pi_D2 f), f in D^(1) cap D^(2)."""
    model: FusedModel
    phi: ObsFunction
    basis: np.ndarray

    @property
    def dim(self) -> int:
        return int(self.basis.shape[1])

    def member(self, f: IdealFunction) -> ObsFunction:
        bases = self.model.d_bases
        first = tuple(b.project(f) for b in bases[0])
        second = tuple(-b.project(f) for b in bases[1])
        shift = lift_to_observed(self.model, IFDecomposition((first, second), np.zeros_like(f)))
        return self.phi + shift

    def member_from_coefficients(self, coefficients: np.ndarray) -> ObsFunction:
        return self.member(self.basis @ np.asarray(coefficients, dtype=float))

    def sample(self, rng: np.random.Generator, count: int) -> Iterator[ObsFunction]:
        """Lazily yield members with standard normal coefficients."""
        for _ in range(count):
            yield self.member_from_coefficients(rng.standard_normal(self.dim))


def if_family(model: FusedModel, phi1_P: ObsFunction, Q=None) -> IFFamily:
    """Enumerate the influence-function family of a two-source model."""
    if model.n_sources != 2:
        raise SpaceMismatchError("The influence-function family is defined for J=2")
    if Q is not None and Q is not model.Q:
        logger.debug("Ignoring explicit Q; the bound model's ideal law is used")
    weights = model.Q.mass
    basis = subspace_intersection(model.d_sum_basis(0), model.d_sum_basis(1), weights)
    logger.debug(f"Influence-function family has dimension {basis.shape[1]}")
    return IFFamily(model, np.asarray(phi1_P, dtype=float), basis)


def eif_project(model: FusedModel, phi1_P: ObsFunction) -> ObsFunction:
    """Projection of an influence function onto T(P,P)."""
    return model.tangent.project(np.asarray(phi1_P, dtype=float))


@dataclass(frozen=True, eq=False)
class EifSolution:
    """Solution of the information equation."""
    h_Q: IdealFunction
    phi: ObsFunction
    residual: float
    truncated: int


def eif_solve(
    model: FusedModel,
    psi1_eff: IdealFunction,
    tol: float = EIF_TOLERANCE,
    rtol: float = RANK_TOLERANCE,
) -> EifSolution:
    """Solve A*A h = (psi, 0, 0) by pseudoinverse and return h_Q and A h.

    Raises:
        NotInRangeError: If (psi, 0, 0) is outside the numerical range.
    """
    target = model.ideal_direction(model.project_tangent_Q(np.asarray(psi1_eff, dtype=float)))
    rhs = model.h_coordinates(target)
    info = information_operator(model).entries
    coords, residual, truncated = pinv_solve(info, rhs, rtol)
    if residual > tol * max(1.0, float(np.linalg.norm(rhs))):
        raise NotInRangeError(
            f"Right-hand side outside the information operator's range (residual {residual:.3e})",
            residual,
        )
    h_Q = model.h_from_coordinates(coords).h_Q
    direction = model.ideal_direction(h_Q)
    check = information_blocks(model, direction).h_Q - target.h_Q
    check_residual = float(np.max(np.abs(check), initial=0.0))
    if check_residual > tol * max(1.0, target.max_abs()):
        raise NotInRangeError(
            f"Information equation residual {check_residual:.3e} exceeds {tol:.1e}", check_residual
        )
    if truncated:
        logger.warning(f"Information operator solve truncated {truncated} singular values")
    return EifSolution(h_Q, apply_A(model, direction), check_residual, truncated)


def variance(P, f: ObsFunction) -> float:
    """sum f^2 * mass under an observed law (or a bound model's law)."""
    law: FusedLaw = P.P if isinstance(P, FusedModel) else P
    values = np.asarray(f, dtype=float)
    return float(np.sum(law.obs_weights() * values * values))


@dataclass(frozen=True, eq=False)
class PathwiseReport:
    """Outcome of a pathwise-differentiability check."""
    differentiable: bool
    witness: Optional[IdealFunction]
    residual: float


def check_pathwise_differentiable(
    model: FusedModel,
    psi1_eff: IdealFunction,
    directions: Optional[np.ndarray] = None,
    tol: float = DECOMPOSE_TOLERANCE,
) -> PathwiseReport:
    """Search the affine family psi + span(directions) for a decomposable member.

    ``directions`` defaults to a basis of the complement of T(Q,Q); the
    search is a least-squares fit onto the sum of all aligned spaces and the
    witness is confirmed by DECOMPOSE.
    """
    weights = model.Q.mass
    psi = np.asarray(psi1_eff, dtype=float)
    if directions is None:
        directions = ideal_tangent_complement(model)
    directions = np.asarray(directions, dtype=float).reshape(psi.shape[0], -1)
    all_d = weighted_gram_schmidt(
        np.hstack([model.d_sum_basis(j) for j in range(model.n_sources)]), weights
    )

    def perp(x: np.ndarray) -> np.ndarray:
        if all_d.shape[1] == 0:
            return x
        return x - all_d @ (all_d.T @ (weights[:, None] * x if x.ndim == 2 else weights * x))

    scale = max(weighted_norm(psi, weights), 1e-300)
    coef, residual = min_norm_lstsq(perp(directions), -perp(psi), weights)
    relative = residual / scale
    if relative > tol:
        return PathwiseReport(False, None, relative)
    witness = psi + (directions @ coef if directions.shape[1] else 0.0)
    try:
        decompose_algorithm(model.d_bases, witness, tol)
    except DecompositionFailed as exc:
        return PathwiseReport(False, None, exc.residual)
    return PathwiseReport(True, witness, relative)
