import numpy as np
import pytest

from fusion.core import AxisSet, FinitePmf, RealTable, conditional, marginal
from fusion.exceptions import (
    DegenerateInstrumentError,
    FrameworkMismatchError,
    PositivityError,
    SpaceMismatchError,
)
from fusion.frameworks import (
    FRAMEWORKS,
    UBLayout,
    case_control_design,
    create_framework,
    naive_vs_obedient_demo,
    reconstruct_joint,
    tsiv_eif,
    tsiv_if,
)
from fusion.frameworks.prevalence import mq, mq_residual
from fusion.frameworks.tsiv import default_g, t_from_g, tsiv_moment_residual
from fusion.influence import eif_project, gradient_residual, variance
from fusion.model import check_alignment
from fusion.operator import FusedModel
from tests.conftest import aligned_law, random_pmf


def test_registry_lists_every_kind():
    """Test all worked frameworks are registered."""
    assert set(FRAMEWORKS) == {
        "Prevalence", "TSIV", "TransportI", "TransportII", "TransportIIIa",
        "TransportIIIb", "GenericUBPoint", "GenericUBFull",
    }
    with pytest.raises(FrameworkMismatchError):
        create_framework("Unknown", AxisSet.of(X=(0, 1)))


def test_identification(any_case):
    """Test phi(P) equals psi(Q) at an aligned law."""
    fw, Q, P = any_case
    assert check_alignment(P, Q, fw.alignment()).aligned
    assert fw.phi(P) == pytest.approx(fw.ideal_functional(Q), abs=1e-10)
    assert fw.ideal_functional(fw.ideal_from_observed(P)) == pytest.approx(fw.ideal_functional(Q), abs=1e-10)


def test_closed_form_influence_is_a_gradient(any_case):
    """Test A* phi1 = (psi1, 0, 0) for the closed-form influence function."""
    fw, _, P = any_case
    model = fw.bind(P)
    phi1 = fw.influence(P)
    assert float(model.obs_weights @ phi1) == pytest.approx(0.0, abs=1e-10)
    assert gradient_residual(model, phi1, fw.ideal_influence(model.Q)) < 1e-8


def test_pipeline_agrees_with_closed_form(any_case):
    """Test the generic pipeline and the closed form share the efficient projection."""
    fw, _, P = any_case
    model = fw.bind(P)
    closed = fw.influence(P)
    pipeline = fw.pipeline_influence(P)
    assert gradient_residual(model, pipeline, fw.ideal_influence(model.Q)) < 1e-8
    assert eif_project(model, pipeline) == pytest.approx(eif_project(model, closed), abs=1e-8)


def test_efficient_influence_agrees_with_projection(any_case):
    """Test each framework's efficient influence function is the tangent-space projection."""
    fw, _, P = any_case
    model = fw.bind(P)
    closed = fw.influence(P)
    efficient = fw.efficient_influence(P)
    assert efficient == pytest.approx(eif_project(model, closed), abs=1e-8)
    assert variance(P, efficient) <= variance(P, closed) + 1e-10


def test_compute_and_run(prevalence_case):
    """Test the named computations and the result wrapper."""
    fw, Q, P = prevalence_case
    data = fw.compute(P, "phi", Q)
    assert data["phi"] == pytest.approx(data["psi"])
    assert data["identification_gap"] < 1e-10
    eif = fw.compute(P, "eif", Q)
    assert eif["efficient_variance"] <= eif["variance"] + 1e-10
    assert eif["projection_agreement"] < 1e-8
    result = fw.run(P, "eif", Q)
    assert result.success
    assert result.exit_code == 0
    assert set(result.arrays()) == {"influence", "efficient"}
    assert "influence" not in result.to_dict()
    assert result.to_dict()["efficient_gradient_residual"] < 1e-8
    failed = fw.run(P, "nothing")
    assert not failed.success
    assert "cannot compute" in failed.error
    assert failed.exit_code == 2
    assert fw.run(P, "demo").exit_code == 2
    assert fw.get_status()["kind"] == "Prevalence"


def test_demo_through_run(ub_full_case):
    """Test the full (U, B) framework reports the naive-versus-efficient comparison."""
    fw, Q, P = ub_full_case
    result = fw.run(P, "demo", Q)
    assert result.success
    assert result.to_dict()["gap"] > 1e-6
    naive, efficient = result.arrays()["naive"], result.arrays()["efficient"]
    assert variance(P, efficient) < variance(P, naive)


def test_relaxed_framework_skips_checks(prevalence_case, rng):
    """Test the relaxed copy binds a law outside the model."""
    fw, Q, P = prevalence_case
    other = random_pmf(P.laws[0].space, rng)
    disobedient = type(P).from_weights(P.weights, [other, P.laws[1]])
    relaxed = fw.relaxed()
    model = relaxed.bind(disobedient)
    assert isinstance(model, FusedModel)
    assert np.all(np.isfinite(relaxed.influence(disobedient)))


# ----- prevalence -----

def test_mq_is_unbiased_for_y(prevalence_case):
    """Test E_Q[m_Q | X, Y] = Y."""
    _, Q, _ = prevalence_case
    assert mq_residual(Q) < 1e-12


def test_mq_degenerate_proxy():
    """Test a proxy independent of Y is refused."""
    space = AxisSet.of(X=(0, 1), Y=(0, 1), V=(0, 1))
    Q = FinitePmf.from_weights(space, np.ones(space.size))
    with pytest.raises(DegenerateInstrumentError):
        mq(Q)


def test_prevalence_requires_binary_outcome():
    with pytest.raises(FrameworkMismatchError):
        create_framework("Prevalence", AxisSet.of(X=(0, 1), Y=(0, 1, 2), V=(0, 1)))


# ----- TSIV -----

def test_tsiv_saturated_influence_is_unique(tsiv_case):
    """Test every instrument function gives the same influence function for binary L."""
    fw, Q, P = tsiv_case
    default = fw.influence(P)
    efficient = tsiv_eif(P).phi
    assert efficient == pytest.approx(default, abs=1e-9)
    other = tsiv_if(P, np.array([[1.0, 2.0], [0.5, -1.0]])).phi
    assert other == pytest.approx(default, abs=1e-9)


def test_tsiv_restricted_model(tsiv_restricted_case):
    """Test the efficient instrument beats the default one with three instrument levels."""
    fw, Q, P = tsiv_restricted_case
    assert tsiv_moment_residual(P) < 1e-12
    assert fw.phi(P) == pytest.approx(0.3)
    assert fw.tangent_basis(Q).shape[1] == Q.space.size - 2
    default = fw.influence(P)
    efficient = fw.efficient_influence(P)
    assert variance(P, efficient) <= variance(P, default) + 1e-12
    ideal = fw.ideal_from_observed(P)
    t = t_from_g(P, ideal, default_g(ideal))
    assert t.shape == (3, 2)


def test_tsiv_intercept_component(tsiv_restricted_case):
    fw, Q, P = tsiv_restricted_case
    intercept = create_framework("TSIV", Q.space, component="tau")
    assert intercept.phi(P) == pytest.approx(0.2)
    with pytest.raises(FrameworkMismatchError):
        create_framework("TSIV", Q.space, component="slope")


def test_tsiv_degenerate_instrument():
    """Test an instrument that does not move X is refused."""
    space = AxisSet.of(L=(0, 1), X=(0, 1), Y=(0, 1))
    fw = create_framework("TSIV", space)
    Q = FinitePmf.from_weights(space, np.ones(space.size))
    P = aligned_law(Q, fw.alignment(), np.random.default_rng(3))
    with pytest.raises(DegenerateInstrumentError):
        fw.phi(P)


# ----- (U, B) models -----

def test_reconstruct_joint_recovers_q(rng, ub_space):
    """Test the joint is rebuilt from U | B and B | U = u0 for every anchor."""
    Q = random_pmf(ub_space, rng)
    u_given_b = conditional(Q, ("U",), ("B",))
    b_given_u = conditional(Q, ("B",), ("U",)).values.reshape(3, 3)
    for u0 in range(3):
        b_given_u0 = RealTable(ub_space.sub(("B",)), b_given_u[u0])
        joint = reconstruct_joint(u_given_b, b_given_u0, (u0,))
        assert joint.space.names == ("U", "B")
        assert joint.mass == pytest.approx(Q.mass, abs=1e-12)


def test_reconstruct_joint_positivity(ub_space):
    """Test an anchor with zero conditional mass is refused."""
    table = np.full(9, 1.0 / 3.0)
    table[0] = 0.0
    table[1] = 0.5
    table[2] = 0.5
    u_given_b = RealTable(AxisSet.of(B=(0, 1, 2), U=(0, 1, 2)), table)
    b_given_u0 = RealTable(ub_space.sub(("B",)), np.full(3, 1.0 / 3.0))
    with pytest.raises(PositivityError):
        reconstruct_joint(u_given_b, b_given_u0, (0,))


def test_full_model_constraint(ub_full_case, rng):
    """Test anchors agree inside the full model and disagree outside it."""
    fw, Q, P = ub_full_case
    assert fw.constraint_residual(P) < 1e-12
    disobedient = type(P).from_weights(P.weights, [random_pmf(P.laws[0].space, rng), P.laws[1]])
    assert fw.constraint_residual(disobedient) > 1e-6


def test_full_family_shift_is_in_null_space(ub_full_case, rng):
    """Test shifts indexed by t leave A* phi unchanged."""
    fw, _, P = ub_full_case
    model = fw.bind(P)
    phi = fw.influence(P)
    psi = fw.ideal_influence(model.Q)
    shifted = phi + fw.family_shift(model, rng.standard_normal(model.n_ideal))
    assert gradient_residual(model, shifted, psi) < 1e-8
    assert variance(P, shifted) >= variance(P, fw.efficient_influence(P)) - 1e-10


def test_ub_layout_validation(ub_space):
    with pytest.raises(SpaceMismatchError):
        create_framework("GenericUBPoint", ub_space, u_axes=("U",), b_axes=("B",), u0=(5,))
    with pytest.raises(SpaceMismatchError):
        UBLayout(("U",), ("U",))


def test_naive_versus_efficient(ub_full_case):
    """Test the source-1 plug-in is strictly inefficient when U and B are not one-to-one."""
    fw, Q, P = ub_full_case
    model = fw.bind(P, Q)
    report = naive_vs_obedient_demo(model, fw.u_star, fw.b_star)
    assert not report.deterministic
    assert report.gap > 1e-6
    assert report.incompatibility_residual > 1e-6
    assert report.naive_gradient_residual < 1e-8
    assert report.efficient_gradient_residual < 1e-8
    assert report.discrete_agreement < 1e-8
    assert report.to_dict()["gap"] == pytest.approx(report.gap)


def test_naive_is_efficient_when_deterministic(ub_space, rng):
    """Test the variance gap closes when U and B determine each other."""
    fw = create_framework("GenericUBFull", ub_space, u_axes=("U",), b_axes=("B",), strict=False)
    mass = np.zeros(9)
    mass[[0, 4, 8]] = [0.2, 0.3, 0.5]
    Q = FinitePmf(ub_space, mass)
    C = fw.alignment()
    U = [random_pmf(C.source_space(ub_space, j), rng) for j in range(2)]
    model = FusedModel.bind(Q, C, U=U, lam=[0.5, 0.5], strict=False)
    report = naive_vs_obedient_demo(model, (0,), (0,))
    assert report.deterministic
    assert abs(report.gap) <= 1e-12


# ----- transport -----

def test_case_control_design_is_aligned():
    """Test the case-control design lies in every scenario's model."""
    design = case_control_design(0.3)
    for kind in ("TransportII", "TransportIIIa", "TransportIIIb"):
        fw = create_framework(kind, design.space, l0=design.l0)
        assert check_alignment(design.P, design.Q, fw.alignment()).aligned
        assert fw.phi(design.P) == pytest.approx(fw.ideal_functional(design.Q), abs=1e-10)
    with pytest.raises(FrameworkMismatchError):
        case_control_design(1.0)


def test_case_control_dominance(design):
    """Test aligning both outcome levels beats either partial alignment."""
    variances = {}
    for kind in ("TransportII", "TransportIIIa", "TransportIIIb"):
        fw = create_framework(kind, design.space, l0=design.l0)
        variances[kind] = variance(design.P, fw.efficient_influence(design.P))
    assert variances["TransportIIIa"] <= variances["TransportII"] + 1e-12
    assert variances["TransportIIIa"] <= variances["TransportIIIb"] + 1e-12


def test_transport_requires_exact_axes():
    space = AxisSet.of(L=(0, 1), A=(0, 1), Y=(0, 1), Z=(0, 1))
    with pytest.raises(FrameworkMismatchError):
        create_framework("TransportI", space, covariates=("L",))


def test_transport_i_ignores_source_one_covariates(transport_i_case):
    """Test the target covariate law comes from source 2 only."""
    fw, Q, P = transport_i_case
    assert marginal(P.laws[1], ("L1", "L2")).mass == pytest.approx(marginal(Q, ("L1", "L2")).mass)
    assert fw.phi(P) == pytest.approx(fw.ideal_functional(Q), abs=1e-10)
