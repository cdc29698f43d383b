import numpy as np
import pytest

from totalstab.lyapunov import RadialPiecewiseV, sublevel_boundary_sampler
from totalstab.sets import CompactSetSampler, radial_boundary, unit_directions

SAMPLERS = [
    CompactSetSampler.ball(2.0, 3, n=300, n_boundary=100, seed=1),
    CompactSetSampler.box([-1, 0], [1, 2], n=300, n_boundary=100, seed=2),
    CompactSetSampler.ellipsoid(np.diag([4.0, 1.0]), 1.0, n=300, n_boundary=100, seed=3),
    CompactSetSampler.annulus(np.eye(2), 0.25, 1.0, n=300, n_boundary=100, seed=4),
    CompactSetSampler.sublevel(lambda x: float(x @ x), 2, 1.0, 2.0, n=300, n_boundary=100, seed=5),
]


@pytest.mark.parametrize("s", SAMPLERS, ids=lambda s: s.kind)
def test_samples_inside(s):
    X = s.draw()
    assert X.shape == (s.n + s.n_boundary, s.dim)
    assert s.contains(X).all()


@pytest.mark.parametrize("s", SAMPLERS, ids=lambda s: s.kind)
def test_deterministic(s):
    np.testing.assert_array_equal(s.draw(), s.draw())
    assert not np.array_equal(s.draw(), s.with_plan(seed=s.seed + 1).draw())


def test_ellipsoid_boundary_exact():
    P = np.diag([4.0, 1.0])
    X = CompactSetSampler.ellipsoid(P, 1.0, n=500, seed=0, boundary_only=True).draw()
    np.testing.assert_allclose(np.einsum("ni,ij,nj->n", X, P, X), 1.0, atol=1e-10)


def test_unit_circle_boundary():
    X = sublevel_boundary_sampler(np.eye(2), 1.0, 4, seed=0).draw()
    assert X.shape == (4, 2)
    np.testing.assert_allclose(np.linalg.norm(X, axis=1), 1.0, atol=1e-12)


def test_annulus_boundary_levels():
    s = CompactSetSampler.annulus(np.eye(2), 0.25, 1.0, n=200, seed=0, boundary_only=True)
    q = np.sum(s.draw() ** 2, axis=1)
    assert np.all(np.isclose(q, 0.25, atol=1e-10) | np.isclose(q, 1.0, atol=1e-10))


def test_box_boundary_on_faces():
    s = CompactSetSampler.box([-1, -2], [1, 2], n=200, seed=0, boundary_only=True)
    X = s.draw()
    on_face = np.isclose(np.abs(X[:, 0]), 1) | np.isclose(np.abs(X[:, 1]), 2)
    assert on_face.all()


def test_generic_boundary_bisection():
    V = lambda x: float(x[0] ** 2 + 2 * x[1] ** 2)
    X = sublevel_boundary_sampler(V, 1.0, 64, seed=0, dim=2, r_max=3.0).draw()
    vals = np.array([V(x) for x in X])
    assert np.all(np.abs(vals - 1.0) <= 1e-10)


def test_radial_boundary_flags_multiple_roots():
    V = RadialPiecewiseV()
    d = unit_directions(8, 2, np.random.default_rng(0))
    pts, radii, multi = radial_boundary(V, 1.2, d, 4.0)
    np.testing.assert_allclose(radii, 0.61667, atol=1e-4)
    assert multi.all()


def test_unit_directions_1d():
    d = unit_directions(100, 1, np.random.default_rng(0))
    assert set(np.unique(d)) == {-1.0, 1.0}


def test_box_validation():
    with pytest.raises(ValueError):
        CompactSetSampler.box([1], [0])
