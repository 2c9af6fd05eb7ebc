import numpy as np
import pytest

from fusion.core import AxisSet
from fusion.exceptions import AlignmentError, PositivityError, SpaceMismatchError
from fusion.model import AlignmentSpec, FusedLaw, MarginalFlag, SourceSpec
from fusion.operator import (
    FusedModel,
    adjoint_matrix,
    apply_A,
    apply_A_star,
    basis_D,
    basis_R,
    boundedness_constant,
    information_blocks,
    information_operator,
    null_space_of_adjoint,
    tangent_space,
)
from fusion.settings import settings
from fusion.verify import adjoint_residual
from tests.conftest import random_pmf


@pytest.fixture
def model(ub_point_case):
    fw, Q, P = ub_point_case
    return fw.bind(P, Q)


def random_h(model, rng):
    return model.h_from_coordinates(rng.standard_normal(model.basis_H.shape[1]))


def centered_obs(model, rng):
    g = rng.standard_normal(model.n_obs)
    return g - model.obs_weights @ g


def test_bind_rejects_misaligned(ub_point_case, rng):
    """Test binding a law that is not aligned with Q fails."""
    fw, Q, P = ub_point_case
    with pytest.raises(AlignmentError):
        FusedModel.bind(random_pmf(Q.space, rng), fw.alignment(), P=P)


def test_bind_strict_positivity(ub_point_case):
    """Test strict mode refuses zero cells in the source laws."""
    fw, Q, P = ub_point_case
    mass = P.laws[0].mass.copy()
    mass[0] = 0.0
    law = type(P.laws[0]).from_weights(P.laws[0].space, mass)
    zeroed = FusedLaw(P.lam, (law, P.laws[1]))
    with pytest.raises((PositivityError, AlignmentError)):
        FusedModel.bind(Q, fw.alignment(), P=zeroed)


def test_bind_needs_p_or_u(ub_point_case):
    fw, Q, _ = ub_point_case
    with pytest.raises(SpaceMismatchError):
        FusedModel.bind(Q, fw.alignment())


def test_scores_have_mean_zero(model, rng):
    """Test every score A h integrates to zero under P."""
    for _ in range(5):
        score = apply_A(model, random_h(model, rng))
        assert float(model.obs_weights @ score) == pytest.approx(0.0, abs=1e-12)


def test_adjoint_identity(any_case, rng):
    """Test <A h, g>_P = <h, A* g>_H for every framework's model."""
    fw, _, P = any_case
    model = fw.bind(P)
    assert adjoint_residual(model, rng, draws=25) <= settings.adjoint_tolerance


def test_adjoint_identity_by_hand(model, rng):
    for _ in range(5):
        h = random_h(model, rng)
        g = centered_obs(model, rng)
        left = model.obs_inner(apply_A(model, h), g)
        right = model.h_inner(h, apply_A_star(model, g))
        assert left == pytest.approx(right, abs=1e-10)


def test_adjoint_matrix_agrees(model, rng):
    """Test the dense adjoint matches the decomposition-based adjoint on H."""
    g = centered_obs(model, rng)
    h = random_h(model, rng)
    dense = model.split_h(adjoint_matrix(model) @ g)
    assert model.h_inner(h, dense) == pytest.approx(model.h_inner(h, apply_A_star(model, g)), abs=1e-10)


def test_information_blocks_match_matrix(model, rng):
    """Test the closed-form A*A agrees with the coordinate matrix."""
    info = information_operator(model)
    assert info.entries == pytest.approx(info.entries.T)
    assert info.domain[0] == "Q[0]"
    for _ in range(3):
        coords = rng.standard_normal(model.basis_H.shape[1])
        h = model.h_from_coordinates(coords)
        closed = model.h_coordinates(information_blocks(model, h))
        assert closed == pytest.approx(info.entries @ coords, abs=1e-10)


def test_boundedness(model, rng):
    """Test ||A h||^2 <= max(J delta K, epsilon, 1) ||h||^2."""
    bound = boundedness_constant(model)
    for _ in range(5):
        h = random_h(model, rng)
        score = apply_A(model, h)
        assert model.obs_inner(score, score) <= bound * model.h_inner(h, h) + 1e-12


def test_tangent_and_adjoint_null_space_are_orthogonal(model):
    """Test L2_0(P) splits into the tangent space and Null(A*)."""
    tangent = tangent_space(model)
    null = null_space_of_adjoint(model)
    w = model.obs_weights
    assert tangent.dim + null.dim == model.n_obs - 1
    if tangent.dim and null.dim:
        overlap = tangent.vectors.T @ (w[:, None] * null.vectors)
        assert np.max(np.abs(overlap)) < 1e-8
    assert tangent.gram() == pytest.approx(np.eye(tangent.dim), abs=1e-10)


def test_subspace_bases(ub_point_case):
    """Test D and R bases are orthonormal and mean zero."""
    fw, Q, P = ub_point_case
    C = fw.alignment()
    d = basis_D(Q, C, 1, 2)
    assert d.dim == 6
    assert d.gram() == pytest.approx(np.eye(d.dim), abs=1e-10)
    assert Q.mass @ d.vectors == pytest.approx(np.zeros(d.dim), abs=1e-12)
    anchored = basis_D(Q, C, 2, 2)
    assert anchored.dim == 2
    assert basis_D(Q, C, 1, 1).dim == 0
    r = basis_R(P.laws[1], C, 2, 1)
    assert r.dim == 2


def test_single_source_saturated_model(rng):
    """Test a fully aligned single source has an injective score operator on Q."""
    space = AxisSet.of(X=(0, 1), Y=(0, 1))
    C = AlignmentSpec((SourceSpec(1, ("X", "Y"), (("X", "Y"),), (MarginalFlag.STAR,)),))
    Q = random_pmf(space, rng)
    model = FusedModel.bind(Q, C, U=[random_pmf(space, rng)], lam=[1.0])
    assert model.P.laws[0].mass == pytest.approx(Q.mass)
    f = np.array([1.0, -1.0, 0.5, 0.0])
    h = model.ideal_direction(f - Q.mass @ f)
    assert apply_A(model, h) == pytest.approx(h.h_Q)
