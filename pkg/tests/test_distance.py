import numpy as np
import pytest

from distseg.distance import DistancePenalty, distance_grad, distance_sq, penalty_value_and_grad
from distseg.gradcheck import check_distance, fd_gradient, rel_error, tie_free_vector
from distseg.projections import Cardinality, Intersection, L1Ball, MaxRank, project


def test_worked_example():
    y = np.array([[0.7, 0.1, 0.15, 0.05]])
    c = Cardinality(0, 2)
    assert distance_sq(y, c) == pytest.approx(0.5 * (0.1**2 + 0.05**2), abs=1e-16)
    np.testing.assert_allclose(distance_grad(y, c), [[0, 0.1, 0, 0.05]], atol=1e-16)


@pytest.mark.parametrize("cset", [Cardinality(0, 4), L1Ball(0, 10.0), MaxRank(0, 2)])
def test_feasible_point_zero(cset):
    y = np.array([[[0.1, 0.2], [0.3, 0.0]]])
    assert distance_sq(y, cset) == 0.0
    assert not distance_grad(y, cset).any()


def test_l1_distance_monotone_along_ray(rng):
    v = rng.standard_normal(5)
    tau = 1.0
    b = (v / np.abs(v).sum() * tau)[None]
    d = [distance_sq(t * b, L1Ball(0, tau)) for t in np.linspace(1, 4, 20)]
    assert d[0] == pytest.approx(0.0, abs=1e-15)
    assert all(np.diff(d) > 0)


@pytest.mark.parametrize("kind", ["card", "l1"])
def test_finite_differences_tie_free(rng, kind):
    for _ in range(30):
        n = int(rng.integers(2, 12))
        k = int(rng.integers(1, n))
        y = tie_free_vector(rng, n, k)[None]
        cset = Cardinality(0, k) if kind == "card" else L1Ball(0, 0.5 * float(np.abs(y).sum()))
        fd = fd_gradient(lambda z: distance_sq(z, cset), y)
        assert rel_error(fd, distance_grad(y, cset)) <= 1e-6


def test_suite_helper():
    assert check_distance(trials=10) <= 1e-6


def test_gradient_is_y_minus_projection_bitwise(rng):
    y = rng.uniform(size=(2, 4, 4))
    pen = DistancePenalty((Cardinality(0, 5), L1Ball(1, 2.0)), (0.5, 3.0))
    _, g = pen.value_and_grad(y)
    np.testing.assert_array_equal(g[0], 0.5 * (y[0] - project(y, Cardinality(0, 5))[0]))
    np.testing.assert_array_equal(g[1], 3.0 * (y[1] - project(y, L1Ball(1, 2.0))[1]))


def test_single_term_equals_scaled_distance(rng):
    y = rng.uniform(size=(2, 3, 3))
    c = Cardinality(1, 2)
    v, g = DistancePenalty((c,), (2.5,)).value_and_grad(y)
    assert v == pytest.approx(2.5 * distance_sq(y, c), rel=1e-15)
    np.testing.assert_allclose(g, 2.5 * distance_grad(y, c), rtol=1e-15)


def test_disjoint_channel_additivity(rng):
    y = rng.uniform(size=(2, 3, 3))
    a, b = Cardinality(0, 3), Cardinality(1, 4)
    v, g = penalty_value_and_grad(y, DistancePenalty((a, b)))
    assert v == pytest.approx(distance_sq(y, a) + distance_sq(y, b), rel=1e-14)
    ga, gb = distance_grad(y, a), distance_grad(y, b)
    assert not ga[1].any() and not gb[0].any()
    np.testing.assert_allclose(g, ga + gb, rtol=1e-15)


def test_zero_set_equivalences(rng):
    y = np.zeros((2, 3, 3))
    y[0, 0, 0] = 0.7
    pen = DistancePenalty((Cardinality(0, 1), Cardinality(1, 9)))
    v, g = pen.value_and_grad(y)
    assert v == 0.0 and not g.any() and pen.distance(y) == 0.0
    y[0, 1, 1] = 0.2
    v, g = pen.value_and_grad(y)
    assert v > 0 and g.any()


def test_distance_is_unweighted_sum_of_squares(rng):
    y = rng.uniform(size=(2, 3, 3))
    pen = DistancePenalty((Cardinality(0, 2), Cardinality(1, 5)), (4.0, 0.25))
    expect = sum(np.sum((y - project(y, s)) ** 2) for s in pen.sets)
    assert pen.distance(y) == pytest.approx(expect, rel=1e-14)


def test_intersection_mode(rng):
    y = rng.uniform(size=(1, 3, 3))
    sets = (L1Ball(0, 1.0), L1Ball(0, 2.0))
    pen = DistancePenalty(sets, (2.0, 2.0), mode="intersection")
    v, g = pen.value_and_grad(y)
    p = project(y, Intersection(sets))
    assert v == pytest.approx(2.0 * 0.5 * np.sum((y - p) ** 2), rel=1e-12)
    with pytest.raises(ValueError):
        DistancePenalty(sets, (1.0, 2.0), mode="intersection")


def test_penalty_validation():
    with pytest.raises(ValueError):
        DistancePenalty(())
    with pytest.raises(ValueError):
        DistancePenalty((Cardinality(0, 1),), (0.0,))
    with pytest.raises(ValueError):
        DistancePenalty((Cardinality(0, 1),), (1.0, 2.0))
    with pytest.raises(ValueError):
        DistancePenalty((Cardinality(0, 1),), mode="max")
