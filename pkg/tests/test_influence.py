import numpy as np
import pytest

from fusion.core import AxisSet, axis_values
from fusion.exceptions import DecompositionFailed, SpaceMismatchError
from fusion.influence import (
    check_pathwise_differentiable,
    decompose_algorithm,
    eif_project,
    eif_solve,
    gradient_residual,
    if_family,
    lift_to_observed,
    two_source_solve,
    variance,
)
from fusion.model import AlignmentSpec, MarginalFlag, SourceSpec
from fusion.operator import FusedModel
from tests.conftest import random_pmf


@pytest.fixture
def full_model(ub_full_case):
    fw, Q, P = ub_full_case
    return fw, fw.bind(P, Q)


@pytest.fixture
def outcome_only_model(rng):
    """One source aligning Y | X only; E[X] is not identified."""
    space = AxisSet.of(X=(0, 1, 2), Y=(0, 1))
    C = AlignmentSpec((
        SourceSpec(1, ("X", "Y"), (("X",), ("Y",)), (MarginalFlag.EMPTY, frozenset({(0,), (1,), (2,)}))),
    ))
    Q = random_pmf(space, rng)
    return FusedModel.bind(Q, C, U=[random_pmf(space, rng)], lam=[1.0])


def test_decompose_reconstructs_psi(full_model):
    """Test DECOMPOSE splits psi over the aligned spaces."""
    fw, model = full_model
    psi = fw.ideal_influence(model.Q)
    dec = decompose_algorithm(model.d_bases, psi)
    assert dec.total() == pytest.approx(psi, abs=1e-9)
    for j, row in enumerate(dec.components):
        for k, piece in enumerate(row):
            basis = model.d_bases[j][k]
            assert basis.project(piece) == pytest.approx(piece, abs=1e-9)


def test_two_source_solver_matches_decompose(full_model):
    """Test both decompositions lift to valid observed influence functions."""
    fw, model = full_model
    psi = fw.ideal_influence(model.Q)
    general = lift_to_observed(model, decompose_algorithm(model.d_bases, psi))
    special = lift_to_observed(model, two_source_solve(model, psi))
    assert gradient_residual(model, general, psi) < 1e-8
    assert gradient_residual(model, special, psi) < 1e-8
    assert eif_project(model, general) == pytest.approx(eif_project(model, special), abs=1e-8)


def test_decompose_zero_psi(full_model):
    """Test psi = 0 decomposes into zero components."""
    _, model = full_model
    dec = decompose_algorithm(model.d_bases, np.zeros(model.n_ideal))
    assert all(np.all(piece == 0) for row in dec.components for piece in row)


def test_decompose_failure(outcome_only_model):
    """Test E[X] has no decomposition when the X marginal is not aligned."""
    model = outcome_only_model
    x = axis_values(model.Q.space, "X")
    with pytest.raises(DecompositionFailed) as excinfo:
        decompose_algorithm(model.d_bases, x - model.Q.mass @ x)
    assert excinfo.value.step == 1
    assert excinfo.value.residual > 1e-3


def test_pathwise_differentiability(outcome_only_model, full_model):
    """Test the affine search finds a witness only when one exists."""
    model = outcome_only_model
    x = axis_values(model.Q.space, "X")
    report = check_pathwise_differentiable(model, x - model.Q.mass @ x)
    assert not report.differentiable
    assert report.witness is None

    fw, full = full_model
    report = check_pathwise_differentiable(full, fw.ideal_influence(full.Q))
    assert report.differentiable
    assert report.residual < 1e-8


def test_two_source_solver_requires_two_sources(outcome_only_model):
    with pytest.raises(SpaceMismatchError):
        two_source_solve(outcome_only_model, np.zeros(outcome_only_model.n_ideal))
    with pytest.raises(SpaceMismatchError):
        if_family(outcome_only_model, np.zeros(outcome_only_model.n_obs))


def test_family_members_are_gradients(full_model, rng):
    """Test every family member is an influence function no better than the efficient one."""
    fw, model = full_model
    psi = fw.ideal_influence(model.Q)
    phi = fw.influence(model.P)
    family = if_family(model, phi)
    assert family.dim == 4
    efficient = eif_project(model, phi)
    eff_var = variance(model, efficient)
    assert family.member_from_coefficients(np.zeros(family.dim)) == pytest.approx(phi)
    for member in family.sample(rng, 10):
        assert gradient_residual(model, member, psi) < 1e-8
        assert variance(model, member) >= eff_var - 1e-10
        assert eif_project(model, member) == pytest.approx(efficient, abs=1e-8)


def test_efficient_influence_is_mean_zero(full_model):
    fw, model = full_model
    efficient = eif_project(model, fw.influence(model.P))
    assert float(model.obs_weights @ efficient) == pytest.approx(0.0, abs=1e-12)


def test_information_equation_matches_projection(prevalence_case):
    """Test solving A*A h = psi reproduces the projected influence function."""
    fw, Q, P = prevalence_case
    model = fw.bind(P, Q)
    psi = fw.ideal_influence(model.Q)
    solution = eif_solve(model, psi)
    assert solution.residual < 1e-8
    assert solution.phi == pytest.approx(eif_project(model, fw.influence(P)), abs=1e-8)
    assert gradient_residual(model, solution.phi, psi) < 1e-8


def test_variance_accepts_law_or_model(full_model):
    fw, model = full_model
    phi = fw.influence(model.P)
    assert variance(model, phi) == pytest.approx(variance(model.P, phi))
