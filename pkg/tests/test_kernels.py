"""The numba and numpy kernel paths must agree."""
import numpy as np
import pytest

from totalstab import _kernels as K

pytestmark = pytest.mark.skipif(not K.HAS_NUMBA, reason="numba not installed")


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def test_counterexample_profile(rng):
    r = np.concatenate([rng.uniform(0, 70, 5000), 2.0 ** np.arange(-8, 7), 1.5 * 2.0 ** np.arange(-8, 7), [0.0]])
    np.testing.assert_array_equal(K.counterexample_profile_numba(r), K.counterexample_profile_numpy(r))


@pytest.mark.parametrize("c", [0.0, 0.3, 0.5, 1.0])
def test_sublevel_runs(rng, c):
    v = rng.random(1000)
    for a, b in zip(K.sublevel_runs_numba(v, c), K.sublevel_runs_numpy(v, c)):
        np.testing.assert_array_equal(a, b)


def test_sublevel_runs_edges():
    v = np.array([0.0, 2.0, 0.0, 0.0, 2.0, 0.0])
    s, t = K.sublevel_runs_numpy(v, 1.0)
    assert s.tolist() == [0, 2, 5] and t.tolist() == [0, 3, 5]
    s2, t2 = K.sublevel_runs_numba(v, 1.0)
    assert s2.tolist() == s.tolist() and t2.tolist() == t.tolist()


@pytest.mark.parametrize("n", [1, 2, 4])
def test_lmi_margins(rng, n):
    J = rng.normal(size=(200, n, n))
    B = rng.normal(size=(n, n))
    P = B @ B.T + n * np.eye(n)
    np.testing.assert_allclose(K.lmi_margins_numba(J, P, 0.7), K.lmi_margins_numpy(J, P, 0.7),
                               rtol=1e-12, atol=1e-12)


def test_quad_forms(rng):
    X = rng.normal(size=(300, 3))
    P = np.diag([1.0, 2.0, 3.0]) + 0.1
    np.testing.assert_allclose(K.quad_forms_numba(X, P), K.quad_forms_numpy(X, P), rtol=1e-13)


def test_min_pair_distance(rng):
    A, B = rng.normal(size=(500, 2)), rng.normal(size=(300, 2)) + 3
    assert K.min_pair_distance_numba(A, B) == pytest.approx(K.min_pair_distance_numpy(A, B), rel=1e-14)


def test_spectral_norms(rng):
    D = rng.normal(size=(100, 3, 3))
    np.testing.assert_allclose(K.spectral_norms_numba(D), K.spectral_norms_numpy(D), rtol=1e-12)


def test_numpy_path_selected_by_env(tmp_path):
    import subprocess
    import sys
    code = "import totalstab._kernels as K; print(K.USE_NUMBA)"
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True,
                         env={"TOTALSTAB_DISABLE_NUMBA": "1", "PATH": ""}, check=True)
    assert out.stdout.strip() == "False"
