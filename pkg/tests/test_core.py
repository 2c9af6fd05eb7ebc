import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from fusion.core import (
    AxisSet,
    FinitePmf,
    RealTable,
    axis_values,
    conditional,
    conditional_mean,
    expectation_given,
    floor_pmf,
    l2_inner,
    marginal,
    product_pmf,
    projection_matrix,
    reorder,
)
from fusion.exceptions import InvalidPmfError, SpaceMismatchError, ZeroMassError

SPACE = AxisSet.of(X=(0, 1, 2), Y=(0, 1), Z=("a", "b"))

positive_weights = arrays(
    np.float64,
    SPACE.size,
    elements=st.floats(min_value=0.01, max_value=1.0, allow_nan=False, allow_infinity=False),
)
values = arrays(
    np.float64,
    SPACE.size,
    elements=st.floats(min_value=-5.0, max_value=5.0, allow_nan=False, allow_infinity=False),
)


def test_axis_set_row_major_cells():
    """Test cells are enumerated with the last axis fastest."""
    space = AxisSet.of(X=(0, 1, 2), Y=(0, 1))
    assert space.size == 6
    assert space.cells()[:3] == [(0, 0), (0, 1), (1, 0)]
    assert space.flat_index((1, 0)) == 2
    assert space.labels()[3] == "X=1|Y=1"


def test_axis_set_rejects_duplicates():
    """Test duplicate axes and levels are refused."""
    with pytest.raises(SpaceMismatchError):
        AxisSet((("X", (0, 1)), ("X", (0, 1))))
    with pytest.raises(SpaceMismatchError):
        AxisSet.of(X=(0, 0))
    with pytest.raises(SpaceMismatchError):
        SPACE.flat_index((3, 0, "a"))


def test_pmf_validation():
    """Test negative or unnormalized mass is rejected."""
    space = AxisSet.of(X=(0, 1))
    with pytest.raises(InvalidPmfError):
        FinitePmf(space, np.array([1.2, -0.2]))
    with pytest.raises(InvalidPmfError):
        FinitePmf(space, np.array([0.5, 0.6]))
    with pytest.raises(SpaceMismatchError):
        FinitePmf(space, np.array([1.0]))
    assert FinitePmf.from_weights(space, [1, 3]).mass[1] == pytest.approx(0.75)


def test_marginal_and_conditional():
    """Test marginal sums and conditional normalization."""
    p = FinitePmf.from_weights(SPACE, np.arange(1, SPACE.size + 1))
    px = marginal(p, ("X",))
    assert px.space.names == ("X",)
    assert px.mass.sum() == pytest.approx(1.0)
    cond = conditional(p, ("Y",), ("X", "Z"))
    assert cond.space.names == ("X", "Z", "Y")
    assert cond.values.reshape(-1, 2).sum(axis=1) == pytest.approx(np.ones(6))


def test_conditional_zero_mass():
    """Test conditioning on a zero-mass cell raises in strict mode only."""
    space = AxisSet.of(X=(0, 1), Y=(0, 1))
    p = FinitePmf(space, np.array([0.5, 0.5, 0.0, 0.0]))
    with pytest.raises(ZeroMassError):
        conditional(p, ("Y",), ("X",))
    lenient = conditional(p, ("Y",), ("X",), strict=False)
    assert lenient.values[2:] == pytest.approx([0.0, 0.0])


@settings(max_examples=40, deadline=None)
@given(positive_weights, values)
def test_tower_property(weights, f):
    """Test E[E[f|X]] = E[f] and E[E[f|X,Y]|X] = E[f|X]."""
    p = FinitePmf.from_weights(SPACE, weights)
    inner = expectation_given(p, f, ("X", "Y"))
    assert float(p.mass @ expectation_given(p, f, ("X",))) == pytest.approx(float(p.mass @ f), abs=1e-10)
    assert expectation_given(p, inner, ("X",)) == pytest.approx(expectation_given(p, f, ("X",)), abs=1e-10)


@settings(max_examples=30, deadline=None)
@given(positive_weights, values, values)
def test_projection_is_self_adjoint_and_idempotent(weights, f, g):
    """Test conditional expectation is an orthogonal projection in L2(p)."""
    p = FinitePmf.from_weights(SPACE, weights)
    proj = projection_matrix(p, ("X", "Z"))
    assert proj @ (proj @ f) == pytest.approx(proj @ f, abs=1e-10)
    assert l2_inner(p, proj @ f, g) == pytest.approx(l2_inner(p, f, proj @ g), abs=1e-9)


def test_conditional_mean_table_shape():
    """Test the conditional mean is tabulated on the conditioning axes."""
    p = FinitePmf.from_weights(SPACE, np.ones(SPACE.size))
    y = axis_values(SPACE, "Y")
    means = conditional_mean(p, y, ("X",))
    assert means == pytest.approx([0.5, 0.5, 0.5])


def test_axis_values_non_numeric():
    """Test numeric evaluation of a string-valued axis is refused."""
    with pytest.raises(SpaceMismatchError):
        axis_values(SPACE, "Z")


def test_floor_pmf_counts_cells():
    """Test zero cells are raised to the floor and counted."""
    space = AxisSet.of(X=(0, 1, 2))
    p = FinitePmf(space, np.array([0.5, 0.5, 0.0]))
    floored, count = floor_pmf(p, 1e-6)
    assert count == 1
    assert floored.is_positive()
    assert floor_pmf(floored, 1e-6)[1] == 0


def test_reorder_and_product():
    """Test reordering keeps the mass of each cell and products multiply."""
    p = FinitePmf.from_weights(SPACE, np.arange(1, SPACE.size + 1))
    q = reorder(p, ("Z", "X", "Y"))
    cell = (2, 1, "b")
    assert q.mass[q.space.flat_index(("b", 2, 1))] == pytest.approx(p.mass[SPACE.flat_index(cell)])
    with pytest.raises(SpaceMismatchError):
        reorder(p, ("X", "Y"))
    a = FinitePmf.from_weights(AxisSet.of(A=(0, 1)), [1, 3])
    b = FinitePmf.from_weights(AxisSet.of(B=(0, 1)), [1, 1])
    ab = product_pmf(a, b)
    assert ab.mass == pytest.approx([0.125, 0.125, 0.375, 0.375])


def test_real_table_broadcast():
    """Test a table on X is read at every cell of a larger space."""
    table = RealTable(SPACE.sub(("X",)), np.array([1.0, 2.0, 3.0]))
    at = table.at(SPACE)
    assert at.shape == (SPACE.size,)
    assert at[SPACE.flat_index((2, 0, "b"))] == 3.0
    assert table.value((1,)) == 2.0
    with pytest.raises(SpaceMismatchError):
        table.at(AxisSet.of(X=(0, 1, 3)))
