import numpy as np
import pytest
from hypothesis import given, strategies as st

from anosovfam.errors import (
    DimensionMismatchError,
    ParameterError,
    WindowRangeError,
)
from anosovfam.family import (
    CAT,
    AffineToral,
    Composite,
    FamilySpec,
    MapBank,
    NeighborhoodSpec,
    PerturbedCat,
    TrigPerturbed,
    apply,
    alternating_family,
    c1_distance,
    cat_family,
    compose_batch,
    compose_n,
    constant_family,
    in_neighborhood,
    inverse_apply,
    jacobian,
    map_from_dict,
    random_perturbed_cat_family,
)
from anosovfam.geometry import TWO_PI, TorusPoint, wrap_diff

angles = st.floats(0.0, TWO_PI, allow_nan=False, exclude_max=True)
alphas = st.floats(-1.0, -0.5)


def _close_mod(a, b, tol):
    return np.max(np.abs(wrap_diff(np.asarray(a) - np.asarray(b)))) < tol


def _random_trig(seed):
    rng = np.random.default_rng(seed)
    terms = [{"axis": int(rng.integers(2)), "freq": rng.integers(-2, 3, 2).tolist(),
              "amplitude": float(rng.uniform(-0.05, 0.05)),
              "phase": float(rng.uniform(0, TWO_PI))} for _ in range(3)]
    return TrigPerturbed(CAT, terms)


class TestMaps:
    def test_cat_apply(self):
        q = apply(AffineToral(CAT), TorusPoint(0, (1.0, 0.0)))
        assert q.component == 1
        assert np.allclose(q.coords, (2.0, 1.0))

    def test_cat_apply_wraps(self):
        q = apply(AffineToral(CAT), TorusPoint(0, (np.pi, np.pi)))
        assert _close_mod(q.coords, (3 * np.pi, 2 * np.pi), 1e-12)

    def test_cat_jacobian(self):
        assert np.array_equal(jacobian(AffineToral(CAT), TorusPoint(0, (0.3, 0.7))), CAT)

    def test_perturbed_cat_apply(self):
        q = apply(PerturbedCat(-0.5), TorusPoint(0, (np.pi / 2, 0.0)))
        assert _close_mod(q.coords, (np.pi - 0.5, np.pi / 2 - 0.5), 1e-12)

    def test_perturbed_cat_jacobian(self):
        J = jacobian(PerturbedCat(-0.5), TorusPoint(0, (0.0, 0.0)))
        assert np.allclose(J, [[1.5, 1.0], [0.5, 1.0]])

    def test_inverse_cat(self):
        p = inverse_apply(AffineToral(CAT), TorusPoint(1, (2.0, 1.0)))
        assert p.component == 0
        assert _close_mod(p.coords, (1.0, 0.0), 1e-12)

    def test_non_unimodular(self):
        with pytest.raises(ParameterError):
            AffineToral([[2, 0], [0, 1]])

    def test_non_integer(self):
        with pytest.raises(ParameterError):
            AffineToral([[1.5, 0], [0, 1]])

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            apply(AffineToral(np.eye(3, dtype=int)), TorusPoint(0, (0.0, 0.0)))

    def test_serialization_roundtrip(self):
        for f in (AffineToral(CAT, (0.1, 0.2)), PerturbedCat(-0.7), _random_trig(3),
                  Composite([PerturbedCat(-0.9), AffineToral(CAT)])):
            g = map_from_dict(f.to_dict())
            X = np.random.default_rng(0).uniform(0, TWO_PI, (20, 2))
            assert np.allclose(f.apply_batch(X), g.apply_batch(X))

    @given(angles, angles, alphas)
    def test_round_trip(self, x, y, a):
        f = PerturbedCat(a)
        p = TorusPoint(0, (x, y))
        back = inverse_apply(f, apply(f, p))
        assert back.component == 0
        assert _close_mod(back.coords, p.coords, 1e-10)

    @given(angles, angles, st.integers(0, 10_000))
    def test_jacobian_matches_finite_difference(self, x, y, seed):
        f = _random_trig(seed)
        X = np.array([[x, y]])
        h = 1e-5
        fd = np.empty((2, 2))
        for k in range(2):
            e = np.zeros(2)
            e[k] = h
            fd[:, k] = wrap_diff(f.apply_batch(X + e)[0] - f.apply_batch(X - e)[0]) / (2 * h)
        assert np.max(np.abs(fd - f.jacobian_batch(X)[0])) < 1e-6

    def test_value_and_jacobian_consistent(self):
        X = np.random.default_rng(1).uniform(0, TWO_PI, (50, 2))
        for f in (PerturbedCat(-0.8), _random_trig(5),
                  Composite([_random_trig(1), PerturbedCat(-0.95)])):
            v, J = f.value_and_jacobian(X)
            assert np.allclose(v, f.apply_batch(X))
            assert np.allclose(J, f.jacobian_batch(X))


class TestMapBank:
    def test_matches_individual_maps(self):
        maps = [PerturbedCat(-0.9), AffineToral(CAT, (0.5, 0.1)), _random_trig(2),
                Composite([PerturbedCat(-0.95), AffineToral(CAT)])]
        bank = MapBank(maps)
        rng = np.random.default_rng(4)
        X = rng.uniform(0, TWO_PI, (40, 2))
        idx = rng.integers(0, len(maps), 40)
        V, J = bank.value_and_jacobian(idx, X)
        for k in range(40):
            f = maps[idx[k]]
            assert _close_mod(V[k], f.apply_batch(X[k:k + 1])[0], 1e-12)
            assert np.allclose(J[k], f.jacobian_batch(X[k:k + 1])[0])
        P, Jp = bank.inverse_and_jacobian(idx, V)
        assert _close_mod(P, X, 1e-10)
        assert np.allclose(Jp, J, atol=1e-9)


class TestFamily:
    def test_window_count(self):
        with pytest.raises(ParameterError):
            FamilySpec([AffineToral(CAT)] * 3, window=2)

    def test_components(self):
        assert cat_family(3).components == [-3, -2, -1, 0, 1, 2]

    def test_periodic_slots(self):
        F = random_perturbed_cat_family(2, seed=0)
        assert F.map_at(4) is F.map_at(0)
        assert F.map_at(-3) is F.map_at(1)

    def test_constant_slots(self):
        F = random_perturbed_cat_family(2, seed=0, extension="constant")
        assert F.map_at(100) is F.maps[-1]
        assert F.map_at(-100) is F.maps[0]

    def test_vectorized_slots(self):
        for ext in ("periodic", "constant"):
            F = random_perturbed_cat_family(2, seed=0, extension=ext)
            comps = np.arange(-9, 9)
            assert [F.slot(c) for c in comps] == F.slots(comps).tolist()

    def test_digest_stable(self):
        a = random_perturbed_cat_family(4, seed=3)
        b = FamilySpec.from_dict(a.to_dict())
        assert a.digest() == b.digest()

    def test_cat_square(self):
        _, C = compose_n(cat_family(1), 0, 2, TorusPoint(0, (0.1, 0.2)))
        assert np.allclose(C, [[5, 3], [3, 2]])

    def test_compose_zero(self):
        p = TorusPoint(0, (0.1, 0.2))
        q, C = compose_n(cat_family(1), 0, 0, p)
        assert np.allclose(q.coords, p.coords) and np.allclose(C, np.eye(2))

    def test_compose_wrong_component(self):
        with pytest.raises(ParameterError):
            compose_n(cat_family(1), 0, 1, TorusPoint(1, (0.0, 0.0)))

    def test_alternating_returns(self):
        F = alternating_family(CAT, 2)
        X = np.array([[0.3, 1.1]])
        Y, C = compose_batch(F, -2, 2, X)
        assert _close_mod(Y, X, 1e-12)
        assert np.allclose(C[0], np.eye(2))

    @given(st.integers(-3, 3), st.integers(-3, 3), angles, angles, st.integers(-4, 3))
    def test_cocycle(self, n, m, x, y, i):
        F = random_perturbed_cat_family(2, seed=5)
        X = np.array([[x, y]])
        Xn, Cn = compose_batch(F, i, n, X)
        Xnm, Cm = compose_batch(F, i + n, m, Xn)
        Xt, Ct = compose_batch(F, i, n + m, X)
        assert _close_mod(Xnm, Xt, 1e-8)
        C = Cm[0] @ Cn[0]
        assert np.max(np.abs(C - Ct[0])) <= 1e-8 * max(1.0, np.abs(Ct[0]).max())

    def test_step_matches_maps(self):
        F = random_perturbed_cat_family(3, seed=2)
        rng = np.random.default_rng(0)
        comps = rng.integers(-7, 7, 30)
        X = rng.uniform(0, TWO_PI, (30, 2))
        Y, J = F.step(comps, X)
        for k, c in enumerate(comps):
            f = F.map_at(c)
            assert _close_mod(Y[k], f.apply_batch(X[k:k + 1])[0], 1e-12)
            assert np.allclose(J[k], f.jacobian_batch(X[k:k + 1])[0])
        P, Jp = F.unstep(comps + 1, Y)
        assert _close_mod(P, X, 1e-10)
        assert np.allclose(Jp, J, atol=1e-9)


class TestC1Distance:
    def test_translation(self):
        t = 0.1
        f, g = AffineToral(CAT), AffineToral(CAT, (t, 0.0))
        assert c1_distance(f, g) == pytest.approx(t, abs=1e-12)

    def test_perturbed_cat_alphas(self):
        d = c1_distance(PerturbedCat(-0.9), PerturbedCat(-0.95), grid=64)
        assert d == pytest.approx(0.05 * np.sqrt(2.0), rel=1e-3)

    def test_self(self):
        assert c1_distance(PerturbedCat(-0.9), PerturbedCat(-0.9)) == 0.0

    def test_grid_too_small(self):
        with pytest.raises(ParameterError):
            c1_distance(AffineToral(CAT), AffineToral(CAT), grid=1)

    @given(st.integers(0, 1000), st.integers(0, 1000), st.integers(0, 1000))
    def test_triangle(self, a, b, c):
        f, g, h = _random_trig(a), _random_trig(b), _random_trig(c)
        assert c1_distance(f, h, grid=16) <= (c1_distance(f, g, grid=16)
                                              + c1_distance(g, h, grid=16) + 1e-12)


class TestNeighborhood:
    def test_radii_validation(self):
        with pytest.raises(ParameterError):
            NeighborhoodSpec([0.1, 0.0], 1)
        with pytest.raises(ParameterError):
            NeighborhoodSpec([0.1], 1)

    def test_inside_and_outside(self):
        F = cat_family(1)
        eps = 0.05
        nb = NeighborhoodSpec([eps, eps], 1)
        near = F.replace_maps([AffineToral(CAT, (eps / 2, 0.0))] * 2)
        far = F.replace_maps([AffineToral(CAT, (2 * eps, 0.0))] * 2)
        ok, slack = in_neighborhood(F, near, nb)
        assert ok and min(slack.values()) == pytest.approx(eps / 2, abs=1e-12)
        ok, _ = in_neighborhood(F, far, nb)
        assert not ok

    def test_bump_outside(self):
        F = cat_family(1)
        eps = 0.05
        G = F.replace_maps([AffineToral(CAT).with_terms(
            [{"axis": 0, "freq": [1, 0], "amplitude": 2 * eps, "phase": 0.0}])] * 2)
        assert not in_neighborhood(F, G, NeighborhoodSpec([eps, eps], 1))[0]

    def test_window_mismatch(self):
        with pytest.raises(WindowRangeError):
            in_neighborhood(cat_family(1), cat_family(2), NeighborhoodSpec([1, 1], 1))

    def test_constant_family_is_its_own_neighbor(self):
        F = constant_family(PerturbedCat(-0.9), 2)
        ok, slack = in_neighborhood(F, F, NeighborhoodSpec([0.01] * 4, 2))
        assert ok and all(s == pytest.approx(0.01) for s in slack.values())
