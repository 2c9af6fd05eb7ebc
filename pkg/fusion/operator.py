"""
Matrix realization of the score operator of a fused-data model.

H = T(Q,Q) x prod_j L2_0(U^(j)) x L2_0(lambda) is represented in raw function
coordinates (W cells, then each source's cells, then the J source labels) and,
for the information operator and the tangent space, in an orthonormal basis.
Observed functions are vectors over the concatenated source cells.
"""

import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Optional, Sequence, Tuple

import numpy as np

from fusion.core import (
    AxisSet,
    FinitePmf,
    LinearOpMatrix,
    cell_index,
    cond_exp_operator,
    marginal,
)
from fusion.exceptions import PositivityError, SpaceMismatchError
from fusion.linalg import (
    RANK_TOLERANCE,
    orthogonal_complement,
    project,
    weighted_gram_schmidt,
)
from fusion.model import (
    ALIGNMENT_TOLERANCE,
    AlignmentSpec,
    FusedLaw,
    SourceSpec,
    assemble_observed_law,
    canonical_u,
    check_strong_alignment,
    region_mask,
)

logger = logging.getLogger("Fusion.Operator")

# Observed-data functions: values on the concatenated source cells.
ObsFunction = np.ndarray
# Ideal-data functions: values on the cells of W.
IdealFunction = np.ndarray


def centered_basis(weights: np.ndarray) -> np.ndarray:
    """Orthonormal basis of L2_0 under ``weights``."""
    n = weights.shape[0]
    return weighted_gram_schmidt(np.eye(n) - weights[None, :], weights)


def increment_operator(
    law: FinitePmf, spec: SourceSpec, k: int, target: AxisSet
) -> np.ndarray:
    """Rows f -> E_law[f | Z_1..Z_k] - E_law[f | Z_1..Z_{k-1}] at each target cell."""
    through, history = spec.through(k), spec.history(k)
    names = law.space.names
    e_through = cond_exp_operator(law, names, through, strict=False).entries
    e_history = cond_exp_operator(law, names, history, strict=False).entries
    return e_through[cell_index(target, through)] - e_history[cell_index(target, history)]


@dataclass(frozen=True, eq=False)
class SubspaceBasis:
    """Orthonormal columns under a weighted L2 inner product."""
    ambient: str
    weights: np.ndarray
    vectors: np.ndarray

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def project(self, f: np.ndarray) -> np.ndarray:
        return project(self.vectors, self.weights, f)

    def gram(self) -> np.ndarray:
        return self.vectors.T @ (self.weights[:, None] * self.vectors)


def basis_D(Q: FinitePmf, C: AlignmentSpec, j: int, k: int) -> SubspaceBasis:
    """D_k^(j)(Q) as functions on W (1-based j and k)."""
    spec = C.sources[j - 1]
    matrix = _d_projection(Q, spec, k - 1)
    return SubspaceBasis(f"D[{j},{k}]", Q.mass, weighted_gram_schmidt(matrix, Q.mass))


def basis_R(law: FinitePmf, C: AlignmentSpec, j: int, k: int) -> SubspaceBasis:
    """R_k^(j) under a source law (1-based j and k)."""
    spec = C.sources[j - 1]
    matrix = _r_projection(law, spec, k - 1)
    return SubspaceBasis(f"R[{j},{k}]", law.mass, weighted_gram_schmidt(matrix, law.mass))


def _d_projection(Q: FinitePmf, spec: SourceSpec, k: int, target: Optional[AxisSet] = None) -> np.ndarray:
    target = Q.space if target is None else target
    if not spec.is_aligned(k):
        return np.zeros((target.size, Q.space.size))
    mask = region_mask(target, spec, k)
    return mask[:, None] * increment_operator(Q, spec, k, target)


def _r_projection(law: FinitePmf, spec: SourceSpec, k: int) -> np.ndarray:
    mask = ~region_mask(law.space, spec, k)
    return mask[:, None] * increment_operator(law, spec, k, law.space)


@dataclass(frozen=True, eq=False)
class HVector:
    """Direction (h_Q, h_U^(1..J), h_lambda) in H, in raw function coordinates."""
    h_Q: np.ndarray
    h_U: Tuple[np.ndarray, ...]
    h_lambda: np.ndarray

    def flat(self) -> np.ndarray:
        return np.concatenate([self.h_Q, *self.h_U, self.h_lambda])

    def scaled(self, c: float) -> "HVector":
        return HVector(c * self.h_Q, tuple(c * u for u in self.h_U), c * self.h_lambda)

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.flat()), initial=0.0))


@dataclass(frozen=True, eq=False)
class ObsDecomposition:
    """g = sum_j 1(s=j) sum_k (m_k^(j) + n_k^(j)) + gamma(s), pieces on source cells."""
    m: Tuple[Tuple[np.ndarray, ...], ...]
    n: Tuple[Tuple[np.ndarray, ...], ...]
    gamma: np.ndarray


@dataclass(frozen=True, eq=False)
class FusedModel:
    """A bound fused-data model (Q, U, lambda) under an alignment collection C."""
    Q: FinitePmf
    C: AlignmentSpec
    P: FusedLaw
    U: Tuple[FinitePmf, ...]
    tangent_basis: Optional[np.ndarray] = None
    strict: bool = True
    delta: float = 1.0
    epsilon: float = 1.0

    @classmethod
    def bind(
        cls,
        Q: FinitePmf,
        C: AlignmentSpec,
        P: Optional[FusedLaw] = None,
        U: Optional[Sequence[FinitePmf]] = None,
        lam: Optional[Sequence[float]] = None,
        tangent_basis: Optional[np.ndarray] = None,
        strict: bool = True,
        tolerance: float = ALIGNMENT_TOLERANCE,
    ) -> "FusedModel":
        """Validate and bind a model.

        Args:
            Q: Ideal law on W.
            C: Alignment collection.
            P: Observed law; assembled from (Q, U, lam) when omitted.
            U: Reference laws; P's source laws when omitted.
            lam: Source weights, used only when P is assembled.
            tangent_basis: Columns spanning T(Q,Q) for a restricted ideal model.
            strict: Require strictly positive tables.
            tolerance: Alignment tolerance.

        Raises:
            AlignmentError: If P is not aligned with Q.
            PositivityError: If strict and a table has zero cells.
        """
        if P is None:
            if U is None or lam is None:
                raise SpaceMismatchError("Either P or both U and lam are required")
            P = assemble_observed_law(Q, U, lam, C)
        U = canonical_u(P) if U is None else tuple(U)
        if strict:
            tables = [("Q", Q)] + [(f"P{j + 1}", law) for j, law in enumerate(P.laws)]
            tables += [(f"U{j + 1}", u) for j, u in enumerate(U)]
            for name, table in tables:
                if not table.is_positive():
                    raise PositivityError(f"{name} has zero-mass cells (strict mode)")
        delta, epsilon = check_strong_alignment(P, Q, U, C, tolerance)
        if tangent_basis is not None:
            tangent_basis = np.asarray(tangent_basis, dtype=float)
            if tangent_basis.ndim != 2 or tangent_basis.shape[0] != Q.space.size:
                raise SpaceMismatchError("Tangent basis columns must live on the cells of W")
        logger.debug(f"Bound model with J={C.n_sources}, |W|={Q.space.size}, delta={delta:.4g}")
        return cls(Q, C, P, U, tangent_basis, strict, delta, epsilon)

    @classmethod
    def unchecked(
        cls,
        Q: FinitePmf,
        C: AlignmentSpec,
        P: FusedLaw,
        tangent_basis: Optional[np.ndarray] = None,
    ) -> "FusedModel":
        """Bind without alignment or positivity checks, e.g. at a disobedient empirical law."""
        logger.debug("Binding a model without alignment checks")
        return cls(Q, C, P, canonical_u(P), tangent_basis, strict=False)

    # ----- dimensions -----

    @property
    def n_sources(self) -> int:
        return self.C.n_sources

    @property
    def n_ideal(self) -> int:
        return self.Q.space.size

    @property
    def n_obs(self) -> int:
        return self.P.n_cells

    @property
    def lam(self) -> np.ndarray:
        return self.P.weights

    @cached_property
    def obs_weights(self) -> np.ndarray:
        return self.P.obs_weights()

    @cached_property
    def h_weights(self) -> np.ndarray:
        return np.concatenate([self.Q.mass, *(u.mass for u in self.U), self.lam])

    @cached_property
    def h_offsets(self) -> np.ndarray:
        sizes = [self.n_ideal, *(u.space.size for u in self.U), self.n_sources]
        return np.concatenate([[0], np.cumsum(sizes)])

    def source_space(self, j: int) -> AxisSet:
        return self.P.laws[j].space

    def obs_index(self, j: int) -> np.ndarray:
        """Source-j cell of every W cell."""
        return cell_index(self.Q.space, self.C.sources[j].observed)

    def ideal_on_source(self, j: int, f: IdealFunction) -> np.ndarray:
        """A function of the observed axes of source j, read off at source cells."""
        spec = self.C.sources[j]
        return cond_exp_operator(self.Q, self.Q.space.names, spec.observed, strict=False).entries @ f

    # ----- projections -----

    @cached_property
    def d_projections(self) -> Tuple[Tuple[np.ndarray, ...], ...]:
        """Pi[. | D_k^(j)] as n_W x n_W matrices."""
        return tuple(
            tuple(_d_projection(self.Q, spec, k) for k in range(spec.n_blocks))
            for spec in self.C.sources
        )

    @cached_property
    def d_to_source(self) -> Tuple[Tuple[np.ndarray, ...], ...]:
        """Pi[. | D_k^(j)] read off at source-j cells (n_j x n_W)."""
        return tuple(
            tuple(
                _d_projection(self.Q, spec, k, self.source_space(j))
                for k in range(spec.n_blocks)
            )
            for j, spec in enumerate(self.C.sources)
        )

    @cached_property
    def r_projections(self) -> Tuple[Tuple[np.ndarray, ...], ...]:
        """Pi[. | R_k^(j)] in L2(U^(j)) (n_j x n_j)."""
        return tuple(
            tuple(_r_projection(self.U[j], spec, k) for k in range(spec.n_blocks))
            for j, spec in enumerate(self.C.sources)
        )

    def _history_ratio(self, j: int, k: int, den: FinitePmf) -> np.ndarray:
        spec = self.C.sources[j]
        history = spec.history(k)
        space = self.source_space(j)
        num = marginal(self.P.laws[j], history).mass
        den_mass = marginal(den, history).mass
        ratio = np.divide(num, den_mass, out=np.zeros_like(num), where=den_mass > 0)
        return ratio[cell_index(space, history)]

    @cached_property
    def p_over_q(self) -> Tuple[Tuple[np.ndarray, ...], ...]:
        """dP(.|S=j)/dQ at the block-k history of each source-j cell."""
        return tuple(
            tuple(
                self._history_ratio(j, k, marginal(self.Q, spec.observed))
                for k in range(spec.n_blocks)
            )
            for j, spec in enumerate(self.C.sources)
        )

    @cached_property
    def p_over_u(self) -> Tuple[Tuple[np.ndarray, ...], ...]:
        return tuple(
            tuple(self._history_ratio(j, k, self.U[j]) for k in range(spec.n_blocks))
            for j, spec in enumerate(self.C.sources)
        )

    @cached_property
    def d_bases(self) -> Tuple[Tuple[SubspaceBasis, ...], ...]:
        return tuple(
            tuple(
                SubspaceBasis(
                    f"D[{j + 1},{k + 1}]",
                    self.Q.mass,
                    weighted_gram_schmidt(matrix, self.Q.mass),
                )
                for k, matrix in enumerate(row)
            )
            for j, row in enumerate(self.d_projections)
        )

    def d_sum_basis(self, j: int) -> np.ndarray:
        """Orthonormal basis of the direct sum over k of D_k^(j) (0-based j)."""
        blocks = [b.vectors for b in self.d_bases[j]]
        return np.hstack(blocks) if blocks else np.zeros((self.n_ideal, 0))

    # ----- H bases -----

    @cached_property
    def basis_Q(self) -> np.ndarray:
        """Orthonormal basis of T(Q,Q)."""
        if self.tangent_basis is None:
            return centered_basis(self.Q.mass)
        centered = self.tangent_basis - self.Q.mass @ self.tangent_basis
        return weighted_gram_schmidt(centered, self.Q.mass)

    @cached_property
    def basis_U(self) -> Tuple[np.ndarray, ...]:
        return tuple(centered_basis(u.mass) for u in self.U)

    @cached_property
    def basis_lambda(self) -> np.ndarray:
        return centered_basis(self.lam)

    @cached_property
    def basis_H(self) -> np.ndarray:
        blocks = [self.basis_Q, *self.basis_U, self.basis_lambda]
        rows = sum(b.shape[0] for b in blocks)
        cols = sum(b.shape[1] for b in blocks)
        out = np.zeros((rows, cols))
        r = c = 0
        for b in blocks:
            out[r:r + b.shape[0], c:c + b.shape[1]] = b
            r += b.shape[0]
            c += b.shape[1]
        return out

    @cached_property
    def h_block_sizes(self) -> Tuple[int, ...]:
        return (self.basis_Q.shape[1], *(b.shape[1] for b in self.basis_U), self.basis_lambda.shape[1])

    def project_tangent_Q(self, f: IdealFunction) -> IdealFunction:
        """Pi[f | T(Q,Q)]."""
        if self.tangent_basis is None:
            return f - self.Q.mass @ f
        return project(self.basis_Q, self.Q.mass, f)

    # ----- score operator -----

    @cached_property
    def a_matrix(self) -> np.ndarray:
        """A in raw coordinates: n_obs x (n_W + sum n_j + J)."""
        n_h = int(self.h_offsets[-1])
        a = np.zeros((self.n_obs, n_h))
        obs_off = self.P.offsets
        for j, spec in enumerate(self.C.sources):
            rows = slice(obs_off[j], obs_off[j + 1])
            a[rows, : self.n_ideal] = sum(self.d_to_source[j])
            u_cols = slice(self.h_offsets[j + 1], self.h_offsets[j + 2])
            a[rows, u_cols] = sum(self.r_projections[j])
            a[rows, self.h_offsets[-2] + j] = 1.0
        return a

    @cached_property
    def a_coordinates(self) -> np.ndarray:
        """A applied to the orthonormal H basis (functions on observed cells)."""
        return self.a_matrix @ self.basis_H

    @cached_property
    def a_tilde(self) -> np.ndarray:
        """sqrt(P)-scaled A in orthonormal H coordinates."""
        return np.sqrt(self.obs_weights)[:, None] * self.a_coordinates

    @cached_property
    def tangent(self) -> SubspaceBasis:
        vectors = weighted_gram_schmidt(self.a_coordinates, self.obs_weights, RANK_TOLERANCE)
        return SubspaceBasis("T(P,P)", self.obs_weights, vectors)

    @cached_property
    def q_over_p(self) -> Tuple[Tuple[np.ndarray, ...], ...]:
        """dQ/dP(.|S=j) at the block-k history of each source-j cell."""
        return tuple(
            tuple(np.divide(1.0, r, out=np.zeros_like(r), where=r > 0) for r in row)
            for row in self.p_over_q
        )

    def split_h(self, flat: np.ndarray) -> "HVector":
        off = self.h_offsets
        h_U = tuple(flat[off[j + 1]:off[j + 2]] for j in range(self.n_sources))
        return HVector(flat[: off[1]], h_U, flat[off[-2]:off[-1]])

    def h_from_coordinates(self, coords: np.ndarray) -> "HVector":
        return self.split_h(self.basis_H @ coords)

    def h_coordinates(self, h: "HVector") -> np.ndarray:
        return self.basis_H.T @ (self.h_weights * h.flat())

    def h_inner(self, a: "HVector", b: "HVector") -> float:
        return float(np.sum(self.h_weights * a.flat() * b.flat()))

    def obs_inner(self, f: ObsFunction, g: ObsFunction) -> float:
        return float(np.sum(self.obs_weights * f * g))

    def zero_h(self) -> "HVector":
        return self.split_h(np.zeros(int(self.h_offsets[-1])))

    def ideal_direction(self, h_Q: IdealFunction) -> "HVector":
        zero = self.zero_h()
        return HVector(np.asarray(h_Q, dtype=float), zero.h_U, zero.h_lambda)


def apply_A(model: FusedModel, h: HVector) -> ObsFunction:
    """Observed score sum_j 1(s=j) sum_k Pi[h_Q|D] + Pi[h_U|R] + h_lambda(s)."""
    return model.a_matrix @ h.flat()


def decompose_obs_function(model: FusedModel, g: ObsFunction) -> ObsDecomposition:
    """Split g into aligned increments m, non-aligned increments n and gamma."""
    m, n = [], []
    gamma = np.zeros(model.n_sources)
    for j, (spec, piece) in enumerate(zip(model.C.sources, model.P.split(g))):
        law = model.P.laws[j]
        space = law.space
        gamma[j] = float(law.mass @ piece)
        m_j, n_j = [], []
        for k in range(spec.n_blocks):
            increment = increment_operator(law, spec, k, space) @ piece
            mask = region_mask(space, spec, k)
            m_j.append(np.where(mask, increment, 0.0))
            n_j.append(np.where(mask, 0.0, increment))
        m.append(tuple(m_j))
        n.append(tuple(n_j))
    return ObsDecomposition(tuple(m), tuple(n), gamma)


def apply_A_star(model: FusedModel, g: ObsFunction) -> HVector:
    """Adjoint of the score operator via the decomposition of g."""
    dec = decompose_obs_function(model, g)
    lam = model.lam
    h_Q = np.zeros(model.n_ideal)
    h_U = []
    for j, spec in enumerate(model.C.sources):
        index = model.obs_index(j)
        total = np.zeros(model.source_space(j).size)
        u_total = np.zeros_like(total)
        for k in range(spec.n_blocks):
            total += lam[j] * model.p_over_q[j][k] * dec.m[j][k]
            u_total += lam[j] * model.p_over_u[j][k] * dec.n[j][k]
        h_Q += total[index]
        h_U.append(u_total)
    gamma = dec.gamma - lam @ dec.gamma
    return HVector(model.project_tangent_Q(h_Q), tuple(h_U), gamma)


def adjoint_matrix(model: FusedModel) -> np.ndarray:
    """A* in raw coordinates: H-projection of W_H^{-1} A^T W_P."""
    w_h = model.h_weights
    inv = np.divide(1.0, w_h, out=np.zeros_like(w_h), where=w_h > 0)
    raw = inv[:, None] * model.a_matrix.T * model.obs_weights[None, :]
    projector = model.basis_H @ (model.basis_H.T * w_h[None, :])
    return projector @ raw


def information_operator(model: FusedModel) -> LinearOpMatrix:
    """A*A in orthonormal H coordinates."""
    info = model.a_tilde.T @ model.a_tilde
    labels = _h_labels(model)
    return LinearOpMatrix(labels, labels, 0.5 * (info + info.T))


def _h_labels(model: FusedModel) -> Tuple[str, ...]:
    names = ["Q"] + [f"U{j + 1}" for j in range(model.n_sources)] + ["lambda"]
    return tuple(
        f"{name}[{i}]" for name, size in zip(names, model.h_block_sizes) for i in range(size)
    )


def information_blocks(model: FusedModel, h: HVector) -> HVector:
    """Closed-form A*A h, block by block."""
    lam = model.lam
    q_part = np.zeros(model.n_ideal)
    u_parts = []
    for j, spec in enumerate(model.C.sources):
        index = model.obs_index(j)
        u_total = np.zeros(model.source_space(j).size)
        for k in range(spec.n_blocks):
            ratio = model.p_over_q[j][k][index]
            q_part += lam[j] * ratio * (model.d_projections[j][k] @ h.h_Q)
            u_total += lam[j] * model.p_over_u[j][k] * (model.r_projections[j][k] @ h.h_U[j])
        u_parts.append(u_total)
    return HVector(model.project_tangent_Q(q_part), tuple(u_parts), h.h_lambda.copy())


def tangent_space(model: FusedModel) -> SubspaceBasis:
    """Orthonormal basis of T(P,P) = range of A in L2_0(P)."""
    return model.tangent


def null_space_of_adjoint(model: FusedModel, rtol: float = RANK_TOLERANCE) -> SubspaceBasis:
    """Orthonormal basis of Null(A*) intersected with L2_0(P)."""
    w = model.obs_weights
    scale = np.sqrt(w)
    _, s, vt = np.linalg.svd(model.a_tilde.T, full_matrices=True)
    rank = int(np.sum(s > rtol * s[0])) if s.size and s[0] > 0 else 0
    inv = np.divide(1.0, scale, out=np.zeros_like(scale), where=scale > 0)
    null = vt[rank:].T * inv[:, None]
    centered = null - (w @ null)[None, :]
    return SubspaceBasis("Null(A*)", w, weighted_gram_schmidt(centered, w, rtol))


def ideal_tangent_complement(model: FusedModel) -> np.ndarray:
    """Orthonormal basis of the complement of T(Q,Q) in L2_0(Q)."""
    return orthogonal_complement(model.basis_Q, model.Q.mass, centered_basis(model.Q.mass))


def boundedness_constant(model: FusedModel) -> float:
    """max{J delta K, epsilon, 1}, an upper bound on ||A||^2."""
    k_max = max(spec.n_blocks for spec in model.C.sources)
    return max(model.n_sources * model.delta * k_max, model.epsilon, 1.0)
