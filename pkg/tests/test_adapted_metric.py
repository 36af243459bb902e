from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from anosovfam.adapted_metric import (
    AdaptedMetric,
    adapted_norm,
    block_orthogonality_defect,
    build_adapted_metric,
    default_epsilon,
    equivalence_constants,
    rescaled_metric,
    rescaled_metric_invariance,
    sandwich_check,
    truncation_horizon,
    verify_strict,
)
from anosovfam.cones import SplittingFrames, alpha_range, strict_cone_lemma_check
from anosovfam.errors import ParameterError, PreconditionError
from anosovfam.family import CAT, alternating_family, identity_family
from anosovfam.geometry import TorusPoint
from anosovfam.splitting import estimate_splitting, fit_constants

from conftest import E_S, E_U, LAM_CAT

EPS = 0.1


@pytest.fixture(scope="module")
def cat_am(cat, cat_split):
    return AdaptedMetric(cat, cat_split, LAM_CAT, EPS)


@pytest.fixture(scope="module")
def pcat_am(pcat, pcat_split, pcat_fit):
    return AdaptedMetric(pcat, pcat_split, pcat_fit.lambda_hat, EPS, pcat_fit.c_hat)


class TestSeries:
    def test_stable_eigenvector(self, cat, cat_split):
        p = TorusPoint(0, (0.7, 2.1))
        val = adapted_norm(cat, cat_split, LAM_CAT, EPS, p, E_S)
        assert val == pytest.approx((LAM_CAT + EPS) / EPS, abs=1e-9)
        assert val == pytest.approx(4.81966, abs=1e-5)

    def test_unstable_eigenvector(self, cat, cat_split):
        p = TorusPoint(0, (0.7, 2.1))
        val = adapted_norm(cat, cat_split, LAM_CAT, EPS, p, E_U)
        assert val == pytest.approx((LAM_CAT + EPS) / EPS, abs=1e-9)

    def test_zero(self, cat, cat_split):
        assert adapted_norm(cat, cat_split, LAM_CAT, EPS, TorusPoint(0, (0, 0)), (0, 0)) == 0.0

    def test_epsilon_range(self, cat, cat_split):
        with pytest.raises(ParameterError):
            AdaptedMetric(cat, cat_split, LAM_CAT, 1.0 - LAM_CAT)
        with pytest.raises(ParameterError):
            AdaptedMetric(cat, cat_split, LAM_CAT, 0.0)

    def test_non_converged(self):
        F = alternating_family(CAT, 1)
        split = estimate_splitting(F, grid=4)
        with pytest.raises(PreconditionError):
            AdaptedMetric(F, split, 0.5, 0.1)

    def test_not_hyperbolic(self, cat_split):
        F = identity_family()
        split = estimate_splitting(F, grid=4)
        with pytest.raises(PreconditionError):
            build_adapted_metric(F, split)

    def test_default_epsilon(self):
        assert default_epsilon(0.1) == 0.1
        assert default_epsilon(0.9) == pytest.approx(0.05)

    @given(st.floats(0.05, 0.9), st.floats(0.01, 0.99), st.floats(1.0, 50.0))
    def test_truncation_rule(self, lam, frac, c):
        eps = frac * (1.0 - lam)
        N, tail = truncation_horizon(lam, eps, c, 1e-10)
        q = lam / (lam + eps)
        assert tail < 1e-10
        if N > 0:
            assert c * q ** N / (1.0 - q) >= 1e-10

    def test_truncation_consistency(self, pcat, pcat_split, pcat_am):
        rng = np.random.default_rng(0)
        X = rng.uniform(0.0, 2 * np.pi, (100, 2))
        V = rng.standard_normal((100, 2))
        longer = AdaptedMetric(pcat, pcat_split, pcat_am.lam, EPS, pcat_am.c)
        longer.N = pcat_am.N + 25
        a = pcat_am.norm_at(0, X, V)
        b = longer.norm_at(0, X, V)
        assert np.max(np.abs(a - b) / b) < 1e-9


class TestEquivalence:
    def test_example(self):
        assert equivalence_constants(1.0, 0.381966, 0.1, 1.0)[1] == pytest.approx(23.229, abs=1e-3)

    def test_scaling(self):
        base = equivalence_constants(1.0, 0.4, 0.1, 1.0)[1]
        assert equivalence_constants(0.5, 0.4, 0.1, 1.0)[1] == pytest.approx(2 * base)
        assert equivalence_constants(1.0, 0.4, 0.1, 2.0)[1] == pytest.approx(4 * base)

    def test_lower_is_half(self):
        assert equivalence_constants(0.3, 0.4, 0.1, 1.0)[0] == 0.5

    def test_mu_range(self):
        with pytest.raises(ParameterError):
            equivalence_constants(0.0, 0.4, 0.1, 1.0)

    def test_sandwich(self, pcat, pcat_am):
        rep = sandwich_check(pcat, pcat_am, 100)
        assert rep.lower_ratio >= 0.5
        assert rep.upper_excess <= 1e-9
        assert rep.passed

    def test_block_orthogonality(self, pcat_split, pcat_am):
        rng = np.random.default_rng(1)
        X = pcat_split.points
        Es, Eu = pcat_split.bases_at(0, X)
        Vs = Es[:, :, 0] * rng.standard_normal((len(X), 1))
        Vu = Eu[:, :, 0] * rng.standard_normal((len(X), 1))
        assert block_orthogonality_defect(pcat_am, 0, X, Vs, Vu).max() < 1e-10

    def test_forms_positive_definite(self, pcat_am):
        H = pcat_am.forms(0)
        assert np.all(np.linalg.eigvalsh(H) > 0.0)
        assert np.allclose(H, np.swapaxes(H, 1, 2))


class TestStrict:
    def test_cat_ratio(self, cat, cat_am):
        rep = verify_strict(cat, cat_am)
        assert rep.stable_ratio == pytest.approx(LAM_CAT, abs=1e-9)
        assert rep.unstable_ratio == pytest.approx(LAM_CAT, abs=1e-9)
        assert rep.passed

    def test_understated_rate_fails(self, cat, cat_split):
        # true one-step ratio is LAM_CAT, above the claimed 0.1 + 0.1
        am = AdaptedMetric(cat, cat_split, 0.1, 0.1)
        rep = verify_strict(cat, am)
        assert rep.worst_ratio == pytest.approx(LAM_CAT, abs=1e-9)
        assert not rep.passed

    def test_perturbed_cat(self, pcat, pcat_am):
        rep = verify_strict(pcat, pcat_am)
        assert rep.worst_ratio <= pcat_am.rate + 1e-8

    def test_cones_in_adapted_metric(self, pcat, pcat_split, pcat_fit, pcat_am):
        assert verify_strict(pcat, pcat_am).passed
        fit = replace(pcat_fit, lambda_hat=pcat_am.rate, c_hat=1.0)
        alpha = 0.5 * alpha_range(pcat_am.rate)[1]
        rep = strict_cone_lemma_check(pcat, pcat_split, alpha, fit=fit, frames=pcat_am)
        assert rep.passed


class TestRescaledMetric:
    def test_bounds(self, cat):
        m = rescaled_metric(cat.metric, 1.0, 4.0)
        v = np.random.default_rng(0).standard_normal((50, 2))
        R = m.factor(0)
        n2 = np.sum((v @ R.T) ** 2, axis=1)
        e2 = np.sum(v ** 2, axis=1)
        assert np.all(n2 >= e2 - 1e-12) and np.all(n2 <= 4 * e2 + 1e-12)

    def test_invalid(self, cat):
        with pytest.raises(ParameterError):
            rescaled_metric(cat.metric, 2.0, 1.0)

    def test_uniform_scale(self, cat, cat_split):
        (row,) = rescaled_metric_invariance(cat, cat_split, [(4.0, 4.0)])
        assert row["lambda_delta"] < 1e-10
        assert abs(row["c_star"] - row["c"]) < 1e-10

    def test_anisotropic(self, cat, cat_split):
        (row,) = rescaled_metric_invariance(cat, cat_split, [(1.0, 4.0)])
        assert row["lambda_delta"] < 1e-6
        assert row["c_star"] <= 2.0 * row["c"] + 1e-6
        assert row["within_bound"]

    def test_perturbed(self, pcat, pcat_split, pcat_fit):
        rows = rescaled_metric_invariance(pcat, pcat_split, [(1.0, 4.0), (0.5, 8.0)],
                                          fit=pcat_fit)
        assert all(r["within_bound"] for r in rows)


def test_frames_match_norm(pcat_split, pcat_am):
    X = pcat_split.points[:10]
    V = np.random.default_rng(2).standard_normal((10, 2))
    B = pcat_am.frames(0, X)
    via_frame = np.linalg.norm(np.linalg.solve(B, V[:, :, None])[:, :, 0], axis=1)
    assert np.allclose(via_frame, pcat_am.norm_at(0, X, V), rtol=1e-12)


def test_cat_fit_unchanged_by_frames(cat, cat_split):
    # SplittingFrames realize the flat metric for orthogonal splittings
    fr = SplittingFrames(cat_split)
    B = fr.frames(0, cat_split.points)
    assert np.allclose(np.matmul(np.swapaxes(B, 1, 2), B), np.eye(2), atol=1e-12)
    assert fit_constants(cat, cat_split).c_hat == pytest.approx(1.0, abs=1e-9)
