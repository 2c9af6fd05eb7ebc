import numpy as np
import pytest

from fusion.core import AxisSet, FinitePmf
from fusion.frameworks import case_control_design, create_framework
from fusion.model import assemble_observed_law


def random_pmf(space, rng, low=0.2):
    """Strictly positive law with cell weights drawn from [low, 1)."""
    return FinitePmf.from_weights(space, rng.uniform(low, 1.0, space.size))


def aligned_law(Q, C, rng, lam=None):
    """Observed law in the model: Q on the aligned blocks, random U elsewhere."""
    U = [random_pmf(C.source_space(Q.space, j), rng) for j in range(C.n_sources)]
    if lam is None:
        lam = rng.uniform(0.3, 0.7, C.n_sources)
    return assemble_observed_law(Q, U, lam, C)


def tsiv_moment_law(rng):
    """Three-level instrument with E[Y|l] = 0.2 + 0.3 E[X|l] and X independent of Y given L."""
    space = AxisSet.of(L=(0, 1, 2), X=(0, 1), Y=(0, 1))
    q_l = rng.uniform(0.2, 1.0, 3)
    q_l = q_l / q_l.sum()
    e_x = np.array([0.2, 0.5, 0.8])
    e_y = 0.2 + 0.3 * e_x
    mass = np.zeros(space.size)
    for i, (l, x, y) in enumerate(space.cells()):
        px = e_x[l] if x == 1 else 1.0 - e_x[l]
        py = e_y[l] if y == 1 else 1.0 - e_y[l]
        mass[i] = q_l[l] * px * py
    return FinitePmf.from_weights(space, mass)


@pytest.fixture
def rng():
    """Seeded generator shared by a test."""
    return np.random.default_rng(20240611)


@pytest.fixture
def prevalence_case(rng):
    """Prevalence framework with a law in its model."""
    space = AxisSet.of(X=(0, 1), Y=(0, 1), V=(0, 1))
    fw = create_framework("Prevalence", space)
    weights = rng.uniform(0.3, 1.0, space.size)
    # keep E[V|Y=1,x] well away from E[V|Y=0,x]
    v = np.array([cell[2] for cell in space.cells()])
    y = np.array([cell[1] for cell in space.cells()])
    weights = weights * np.where(v == y, 3.0, 1.0)
    Q = FinitePmf.from_weights(space, weights)
    P = aligned_law(Q, fw.alignment(), rng)
    return fw, Q, P


@pytest.fixture
def tsiv_case(rng):
    """TSIV framework with a binary instrument (saturated moment model)."""
    space = AxisSet.of(L=(0, 1), X=(0, 1), Y=(0, 1))
    fw = create_framework("TSIV", space)
    weights = rng.uniform(0.3, 1.0, space.size)
    x = np.array([cell[1] for cell in space.cells()])
    l = np.array([cell[0] for cell in space.cells()])
    weights = weights * np.where(x == l, 3.0, 1.0)
    Q = FinitePmf.from_weights(space, weights)
    P = aligned_law(Q, fw.alignment(), rng)
    return fw, Q, P


@pytest.fixture
def tsiv_restricted_case(rng):
    """TSIV framework with a three-level instrument (restricted ideal model)."""
    Q = tsiv_moment_law(rng)
    fw = create_framework("TSIV", Q.space)
    P = aligned_law(Q, fw.alignment(), rng)
    return fw, Q, P


@pytest.fixture
def ub_space():
    return AxisSet.of(U=(0, 1, 2), B=(0, 1, 2))


@pytest.fixture
def ub_full_case(rng, ub_space):
    """Fully aligned (U, B) model on a 3 x 3 grid."""
    fw = create_framework("GenericUBFull", ub_space, u_axes=("U",), b_axes=("B",), u_star=(0,), b_star=(1,))
    Q = random_pmf(ub_space, rng)
    P = aligned_law(Q, fw.alignment(), rng)
    return fw, Q, P


@pytest.fixture
def ub_point_case(rng, ub_space):
    """Point-anchored (U, B) model on a 3 x 3 grid."""
    fw = create_framework("GenericUBPoint", ub_space, u_axes=("U",), b_axes=("B",), u_star=(1,), b_star=(2,))
    Q = random_pmf(ub_space, rng)
    P = aligned_law(Q, fw.alignment(), rng)
    return fw, Q, P


@pytest.fixture
def design():
    """Case-control transport design at P(S=1) = 0.5."""
    return case_control_design(0.5)


@pytest.fixture
def transport_i_case(rng, design):
    """Scenario i with a random cohort and target covariate law."""
    fw = create_framework("TransportI", design.space, l0=design.l0)
    P = aligned_law(design.Q, fw.alignment(), rng)
    return fw, design.Q, P


@pytest.fixture(params=["Prevalence", "TSIV", "TSIV3", "GenericUBPoint", "GenericUBFull", "TransportI",
                        "TransportII", "TransportIIIa", "TransportIIIb"])
def any_case(request, rng, ub_space, design):
    """Every framework with an observed law in its model."""
    kind = request.param
    if kind == "Prevalence":
        return request.getfixturevalue("prevalence_case")
    if kind == "TSIV":
        return request.getfixturevalue("tsiv_case")
    if kind == "TSIV3":
        return request.getfixturevalue("tsiv_restricted_case")
    if kind == "GenericUBPoint":
        return request.getfixturevalue("ub_point_case")
    if kind == "GenericUBFull":
        return request.getfixturevalue("ub_full_case")
    if kind == "TransportI":
        return request.getfixturevalue("transport_i_case")
    fw = create_framework(kind, design.space, l0=design.l0)
    return fw, design.Q, design.P
