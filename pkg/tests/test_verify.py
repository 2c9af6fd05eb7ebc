import pytest

from fusion.exceptions import ConstructionError, FusionValidationError, PositivityError
from fusion.verify import (
    S1_GRID,
    Submodel,
    are_curves,
    contraction_counterexample,
    operator_range_checks,
    pathwise_check,
    random_direction,
    score_residual,
    tilt,
)


@pytest.fixture
def point_model(ub_point_case):
    fw, Q, P = ub_point_case
    return fw, fw.bind(P, Q)


def test_tilt_at_zero_is_identity(point_model, rng):
    """Test the submodel passes through P at t = 0."""
    _, model = point_model
    h = random_direction(model, rng)
    Q_t, U_t, lam_t = tilt(model, h, 0.0)
    assert Q_t.mass == pytest.approx(model.Q.mass)
    assert lam_t == pytest.approx(model.lam)
    assert Submodel(model, h).at(0.0).obs_weights() == pytest.approx(model.obs_weights, abs=1e-12)


def test_tilt_bound(point_model, rng):
    """Test steps past 0.5 / max|h| are refused."""
    _, model = point_model
    h = random_direction(model, rng)
    bound = Submodel(model, h).t_max
    with pytest.raises(PositivityError):
        tilt(model, h, 2.0 * bound)


def test_numerical_score_matches_operator(point_model, rng):
    """Test finite-difference scores agree with A h."""
    _, model = point_model
    for _ in range(5):
        assert score_residual(model, random_direction(model, rng)) < 1e-7


def test_pathwise_derivative(any_case, rng):
    """Test d/dt phi(P_t) = <phi1, A h>_P along random submodels."""
    fw, _, P = any_case
    model = fw.bind(P)
    phi1 = fw.influence(P)
    for _ in range(20):
        check = pathwise_check(fw, model, random_direction(model, rng), phi1=phi1)
        assert check.residual < 1e-6


def test_pathwise_zero_direction(point_model):
    fw, model = point_model
    check = pathwise_check(fw, model, model.zero_h())
    assert check.residual == 0.0
    assert not check.richardson


def test_non_contraction():
    """Test I - A*A expands the constructed direction by 1.5."""
    report = contraction_counterexample(2.5)
    assert report.factor == pytest.approx(1.5)
    assert report.norm_ratio >= 1.5 - 1e-9
    assert report.operator_norm >= 1.5 - 1e-9
    assert not report.contraction
    assert not report.boundary
    assert report.condition_number < 1e6
    assert report.inverse_residual <= 1e-10
    assert report.to_dict()["contraction"] is False


def test_contraction_boundary_and_interior():
    """Test c = 2 sits on the boundary and c = 0.5 contracts."""
    assert contraction_counterexample(2.0).boundary
    inside = contraction_counterexample(0.5)
    assert inside.contraction
    assert inside.norm_ratio == pytest.approx(0.5)


def test_contraction_ratio_must_be_positive():
    with pytest.raises(ConstructionError):
        contraction_counterexample(0.0)
    with pytest.raises(ConstructionError):
        contraction_counterexample(float("inf"))


def test_are_curves():
    """Test aligning both outcome levels is never less efficient."""
    frame = are_curves()
    assert list(frame.columns) == ["p_s1", "var_iiia", "var_ii", "var_iiib", "are_ii", "are_iiib"]
    assert len(frame) == len(S1_GRID) == 19
    assert frame["p_s1"].iloc[0] == pytest.approx(0.05)
    assert (frame["are_ii"] >= 1.0 - 1e-9).all()
    assert (frame["are_iiib"] >= 1.0 - 1e-9).all()
    assert (frame["var_iiia"] > 0).all()


def test_are_curves_validation():
    with pytest.raises(FusionValidationError):
        are_curves("other")
    with pytest.raises(FusionValidationError):
        are_curves("appendix-c", [0.0, 0.5])


def test_operator_range_checks(point_model):
    """Test H splits into Range(A*) and Null(A), and L2_0(P) into Range(A) and Null(A*)."""
    _, model = point_model
    checks = operator_range_checks(model)
    assert checks["dim_null_A"] > 0
    assert checks["dim_range_A_star"] == checks["rank_A"]
    assert checks["dim_range_A_star"] + checks["dim_null_A"] == checks["dim_H"]
    assert checks["h_overlap"] < 1e-8
    assert checks["h_split_ok"]
    assert checks["adjoint_ok"]
    assert checks["obs_split_ok"]
    assert checks["max_overlap"] < 1e-8
    assert checks["dim_L2_0_P"] == model.n_obs - 1


def test_range_checks_catch_a_broken_adjoint(point_model, mocker):
    """Test an adjoint that drops every direction fails both the H split and the adjoint identity."""
    _, model = point_model
    mocker.patch("fusion.verify.apply_A_star", side_effect=lambda m, g: m.zero_h())
    checks = operator_range_checks(model)
    assert checks["dim_range_A_star"] == 0
    assert not checks["h_split_ok"]
    assert not checks["adjoint_ok"]


def test_design_alias():
    """Test both design names give the same curves."""
    grid = [0.25, 0.75]
    assert are_curves("appendix-c", grid).equals(are_curves("case-control", grid))
