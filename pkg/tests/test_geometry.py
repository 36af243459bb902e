import numpy as np
import pytest
from hypothesis import given, strategies as st

from anosovfam.errors import (
    DegenerateInputError,
    DegenerateSplittingError,
    DimensionMismatchError,
    ParameterError,
    WindowRangeError,
)
from anosovfam.geometry import (
    TWO_PI,
    MetricSpec,
    TangentVector,
    TorusPoint,
    angle_cos,
    build_frame,
    flat_distance,
    metric_norm,
    total_distance,
    wrap,
)

from conftest import E_S, E_U

coords = st.floats(-20.0, 20.0, allow_nan=False)
small = st.floats(-5.0, 5.0, allow_nan=False)


def _vec(comp, v, x=(0.0, 0.0)):
    return TangentVector(TorusPoint(comp, x), v)


def _spd(seed, d=2):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((d, d))
    return A @ A.T + d * np.eye(d)


class TestPoints:
    def test_coords_reduced(self):
        p = TorusPoint(0, (TWO_PI + 1.0, -1.0))
        assert np.allclose(p.coords, (1.0, TWO_PI - 1.0))
        assert all(0.0 <= c < TWO_PI for c in p.coords)

    def test_dimension_at_least_two(self):
        with pytest.raises(DimensionMismatchError):
            TorusPoint(0, (1.0,))

    def test_vector_dimension_checked(self):
        with pytest.raises(DimensionMismatchError):
            TangentVector(TorusPoint(0, (0.0, 0.0)), (1.0, 2.0, 3.0))

    def test_vector_nonfinite_rejected(self):
        with pytest.raises(DegenerateInputError):
            TangentVector(TorusPoint(0, (0.0, 0.0)), (np.nan, 0.0))

    @given(st.lists(coords, min_size=2, max_size=4))
    def test_wrap_range(self, xs):
        w = wrap(np.array(xs))
        assert np.all(w >= 0.0) and np.all(w < TWO_PI)


class TestMetricSpec:
    def test_rejects_asymmetric(self):
        with pytest.raises(ParameterError):
            MetricSpec([[1.0, 0.1], [0.0, 1.0]])

    def test_rejects_indefinite(self):
        with pytest.raises(ParameterError):
            MetricSpec([[1.0, 0.0], [0.0, -1.0]])

    def test_window_without_extension(self):
        m = MetricSpec([np.eye(2), np.eye(2)], start=0)
        with pytest.raises(WindowRangeError):
            m.factor(2)

    def test_periodic_and_constant_extension(self):
        g = [np.eye(2), 4.0 * np.eye(2)]
        per = MetricSpec(g, start=-1, extension="periodic")
        const = MetricSpec(g, start=-1, extension="constant")
        assert np.allclose(per.gram(1), np.eye(2))
        assert np.allclose(const.gram(5), 4.0 * np.eye(2))
        assert np.allclose(const.gram(-7), np.eye(2))

    def test_vectorized_factors_match(self):
        m = MetricSpec([_spd(1), _spd(2), _spd(3)], start=-1, extension="periodic")
        comps = np.array([-4, -1, 0, 1, 2, 7])
        F = m.factors(comps)
        for c, R in zip(comps, F):
            assert np.array_equal(R, m.factor(c))


class TestMetricNorm:
    def test_euclidean(self):
        assert metric_norm(_vec(0, (3.0, 4.0)), MetricSpec.euclidean(2)) == pytest.approx(5.0)

    def test_diagonal(self):
        m = MetricSpec.uniform(np.diag([4.0, 1.0]))
        assert metric_norm(_vec(0, (1.0, 0.0)), m) == pytest.approx(2.0)

    def test_zero(self):
        assert metric_norm(_vec(0, (0.0, 0.0)), MetricSpec.euclidean(2)) == 0.0

    def test_out_of_window(self):
        m = MetricSpec(np.eye(2), start=0)
        with pytest.raises(WindowRangeError):
            metric_norm(_vec(3, (1.0, 0.0)), m)

    @given(small, small, small, st.integers(0, 50))
    def test_homogeneous(self, a, b, t, seed):
        m = MetricSpec.uniform(_spd(seed))
        n1 = metric_norm(_vec(0, (t * a, t * b)), m)
        n0 = metric_norm(_vec(0, (a, b)), m)
        assert abs(n1 - abs(t) * n0) <= 1e-12 * max(1.0, abs(t) * n0)


class TestTotalDistance:
    def test_coincident(self):
        p = TorusPoint(0, (1.0, 2.0))
        assert total_distance(p, p, MetricSpec.euclidean(2)) == 0.0

    def test_different_components(self):
        m = MetricSpec.euclidean(2)
        assert total_distance(TorusPoint(0, (0, 0)), TorusPoint(1, (0, 0)), m) == 1.0

    def test_clamped(self):
        m = MetricSpec.euclidean(2)
        assert total_distance(TorusPoint(0, (0, 0)), TorusPoint(0, (2.0, 0)), m) == 1.0

    def test_wraps_around(self):
        d = flat_distance(np.array([[0.1, 0.0]]), np.array([[TWO_PI - 0.1, 0.0]]), np.eye(2))
        assert d[0] == pytest.approx(0.2)

    @given(st.lists(st.tuples(st.integers(0, 1), coords, coords), min_size=3, max_size=3))
    def test_metric_axioms(self, pts):
        m = MetricSpec.euclidean(2)
        x, y, z = (TorusPoint(c, (a, b)) for c, a, b in pts)
        assert total_distance(x, y, m) == total_distance(y, x, m)
        assert total_distance(x, z, m) <= total_distance(x, y, m) + total_distance(y, z, m) + 1e-12

    def test_exactly_symmetric(self):
        # naive wrapping of y - x and x - y differs in the last bit here
        x, y = np.array([[5.0, 1e-07]]), np.array([[18.0 % TWO_PI, 18.0 % TWO_PI]])
        R = np.array([[2.0, 0.7], [0.0, 1.3]])
        for F in (np.eye(2), R):
            assert flat_distance(x, y, F)[0] == flat_distance(y, x, F)[0]
        rng = np.random.default_rng(3)
        X, Y = rng.uniform(0.0, TWO_PI, (2, 500, 2))
        assert np.array_equal(flat_distance(X, Y, R), flat_distance(Y, X, R))


class TestFrames:
    def test_standard_axes(self):
        f = build_frame(TorusPoint(0, (0, 0)), [[1, 0]], [[0, 1]], MetricSpec.euclidean(2))
        assert np.allclose(f.basis, np.eye(2))

    def test_cat_eigenvectors_orthogonal(self):
        f = build_frame(TorusPoint(0, (0, 0)), [E_S], [E_U], MetricSpec.euclidean(2))
        assert np.allclose(f.basis.T @ f.basis, np.eye(2), atol=1e-14)

    def test_diagonal_metric_normalization(self):
        m = MetricSpec.uniform(np.diag([4.0, 1.0]))
        f = build_frame(TorusPoint(0, (0, 0)), [[1, 0]], [[0, 1]], m)
        assert f.basis[0, 0] == pytest.approx(0.5)
        assert f.basis[1, 1] == pytest.approx(1.0)

    def test_rank_deficient(self):
        with pytest.raises(DegenerateSplittingError):
            build_frame(TorusPoint(0, (0, 0)), [[1, 1]], [[2, 2]], MetricSpec.euclidean(2))

    @given(st.integers(0, 1000), st.floats(0.0, np.pi))
    def test_isometry_for_orthogonal_blocks(self, seed, theta):
        # blocks that are G-orthogonal give an isometric tau_p
        G = _spd(seed)
        m = MetricSpec.uniform(G)
        R = m.factor(0)
        q = np.array([np.cos(theta), np.sin(theta)])
        s = np.linalg.solve(R, q)
        u = np.linalg.solve(R, np.array([-q[1], q[0]]))
        f = build_frame(TorusPoint(0, (0, 0)), [s], [u], m)
        V = np.random.default_rng(seed).standard_normal((100, 2))
        assert f.isometry_defect(G, V) < 1e-10


class TestAngles:
    def test_orthogonal(self):
        m = MetricSpec.euclidean(2)
        assert angle_cos(_vec(0, (1, 0)), _vec(0, (0, 1)), m) == 0.0

    def test_same(self):
        m = MetricSpec.euclidean(2)
        assert angle_cos(_vec(0, (1, 2)), _vec(0, (1, 2)), m) == pytest.approx(1.0)

    def test_cat_eigenvectors(self):
        m = MetricSpec.euclidean(2)
        assert abs(angle_cos(_vec(0, E_S), _vec(0, E_U), m)) < 1e-15

    def test_zero_vector(self):
        m = MetricSpec.euclidean(2)
        with pytest.raises(DegenerateInputError):
            angle_cos(_vec(0, (0, 0)), _vec(0, (1, 0)), m)
