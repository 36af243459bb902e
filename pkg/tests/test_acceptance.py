"""Acceptance gate: one test per numbered criterion, each at its stated tolerance.

The terminal summary prints one PASS/FAIL line per criterion (see conftest).
Runtime limits include any kernel compilation triggered inside the test.
"""
from fractions import Fraction
import time

import numpy as np
import pytest

from anosovfam.adapted_metric import AdaptedMetric, sandwich_check, verify_strict
from anosovfam.certify import (
    CERTIFIED,
    FAILED,
    INCONCLUSIVE,
    Resolutions,
    certify_family,
    convert_constants,
    openness_experiment,
)
from anosovfam.cones import eta_bound, lambda_prime, sigma_bound, strict_cone_lemma_check
from anosovfam.family import (
    CAT,
    PerturbedCat,
    alternating_family,
    cat_family,
    compose_batch,
    constant_family,
    identity_family,
    random_perturbed_cat_family,
)
from anosovfam.geometry import TWO_PI, MetricSpec, wrap_diff
from anosovfam.splitting import estimate_splitting, fit_constants

from conftest import E_S, E_U, LAM_CAT


def _sin_to_line(E, e):
    u = E[..., :, 0]
    u = u / np.linalg.norm(u, axis=-1, keepdims=True)
    return np.abs(u[..., 0] * e[1] - u[..., 1] * e[0])


class Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t0


@pytest.mark.criterion(1, "cat-map anchor (fit constants and 64x64 splitting)")
def test_cat_anchor():
    with Timer() as t:
        F = cat_family(1)
        split = estimate_splitting(F, grid=64)
        fit = fit_constants(F, split)
    print(f"lambda_hat={fit.lambda_hat!r} c_hat={fit.c_hat!r} {t.elapsed:.2f}s")
    assert abs(fit.lambda_hat - LAM_CAT) <= 1e-6
    assert abs(fit.c_hat - 1.0) <= 1e-6
    assert split.converged and len(split.points) == 64 * 64
    assert _sin_to_line(split.unstable, E_U).max() <= 1e-8
    assert _sin_to_line(split.stable, E_S).max() <= 1e-8
    assert t.elapsed < 10.0


@pytest.mark.criterion(2, "openness at desk scale (100+100 trials certified)")
def test_openness_experiment():
    with Timer() as t:
        runs = []
        for F in (cat_family(1), random_perturbed_cat_family(8, (-1.0, -0.9), seed=1)):
            assert F.window == 8 or F.name == "cat"
            assert F.extension == "periodic"
            summary, bundle = openness_experiment(F, 100, seed=7)
            runs.append((F.name, summary, bundle))
    for name, s, b in runs:
        print(f"{name}: {s.certified}/{s.trials} min_margin={s.min_margin!r} eta={s.eta!r}")
    print(f"{t.elapsed:.1f}s")
    for name, s, b in runs:
        assert s.trials == 100 and s.certified == 100, name
        assert s.min_margin > 0.0, name
        assert all(float(r[3]) > 0.0 for r in s.rows), name
        assert b.eta < 1.0 and s.eta < 1.0, name
        assert not s.errors, name
    assert t.elapsed < 120.0


@pytest.mark.criterion(3, "negative controls (identity, alternating A, A^-1)")
def test_negative_controls():
    res = Resolutions(grid=8)
    with Timer() as t:
        ident, ident_bundle = certify_family(identity_family(), res=res)
        alt = alternating_family(CAT, 1)
        alt_cert, _ = certify_family(alt, res=res)
        alt_split = estimate_splitting(alt, grid=8)
    print(f"identity: {ident.verdict} ({ident.reason}); alternating: {alt_cert.verdict} "
          f"({alt_cert.reason}); {t.elapsed:.2f}s")
    assert ident.verdict == FAILED and ident.reason == "not hyperbolic"
    assert ident_bundle is None
    assert alt_cert.verdict in (FAILED, INCONCLUSIVE) and alt_cert.verdict != CERTIFIED
    assert not alt_split.converged
    assert t.elapsed < 10.0


@pytest.mark.criterion(4, "cone lemma on the cat family at alpha = 0.1 (and its dual)")
def test_cone_lemma():
    alpha = 0.1
    with Timer() as t:
        F = cat_family(1)
        rep = strict_cone_lemma_check(F, estimate_splitting(F, grid=16), alpha)
    need = 1.0 / lambda_prime(LAM_CAT, alpha)
    print(f"expansion_unstable={rep.expansion_unstable!r} expansion_stable="
          f"{rep.expansion_stable!r} required={need!r} {t.elapsed:.2f}s")
    assert rep.margin_unstable > 0.0 and rep.margin_stable > 0.0
    assert rep.expansion_unstable >= need - 1e-9
    # dual: f^{-1} expands the stable cone by the same factor
    assert rep.expansion_stable >= need - 1e-9
    assert t.elapsed < 10.0


@pytest.mark.criterion(5, "adapted metric on PerturbedCat(-0.9), epsilon = 0.1")
def test_adapted_metric():
    eps = 0.1
    with Timer() as t:
        F = constant_family(PerturbedCat(-0.9), 1)
        split = estimate_splitting(F, grid=16)
        fit = fit_constants(F, split)
        am = AdaptedMetric(F, split, fit.lambda_hat, eps, fit.c_hat)
        strict = verify_strict(F, am)
        sw = sandwich_check(F, am, 100)
    print(f"lambda_hat={fit.lambda_hat!r} c_hat={fit.c_hat!r} stable_ratio="
          f"{strict.stable_ratio!r} lower={sw.lower_ratio!r} excess={sw.upper_excess!r} "
          f"{t.elapsed:.2f}s")
    assert fit.hyperbolic
    for i, r in strict.per_component.items():
        assert r["stable"] <= fit.lambda_hat + eps + 1e-8, i
    assert strict.stable_ratio <= fit.lambda_hat + eps + 1e-8
    assert sw.lower_ratio >= 0.5
    assert sw.upper_excess <= 1e-9
    assert t.elapsed < 30.0


@pytest.mark.criterion(6, "constants formulas against independent arithmetic")
def test_constant_formulas():
    # (1 - 0.1) / (0.5 * 1.1) = 18/11
    assert abs(eta_bound(0.1, 0.5, 0.0) - float(1 / Fraction(18, 11))) <= 1e-12
    # min of (1/lam - lam) a / (2 (1+a)^2) and ((1-a)/lam - (1+a) a) / (2 (1+a)) at 0.5, 0.1
    lam, a = Fraction(1, 2), Fraction(1, 10)
    t1 = (1 / lam - lam) * a / (2 * (1 + a) ** 2)
    t2 = ((1 - a) / lam - (1 + a) * a) / (2 * (1 + a))
    assert t1 == Fraction(15, 242)
    assert abs(sigma_bound(0.5, 0.1) - float(min(t1, t2))) <= 1e-9
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(1000):
        lam = rng.uniform(0.05, 0.95)
        eps = rng.uniform(0.01, 0.99) * (1.0 - lam)
        c = rng.uniform(1.0, 10.0)
        alpha = rng.uniform(0.001, 0.999) * eps / (c * (lam + eps))
        r = (lam + eps) / eps * c
        want = 2.0 * (1.0 + alpha) * r / (1.0 - alpha * r)
        got = convert_constants(alpha, lam, eps, c)
        worst = max(worst, abs(got - want) / max(1.0, abs(want)))
    print(f"convert_constants worst relative error {worst!r}")
    assert worst <= 1e-12


@pytest.mark.criterion(7, "invariance suites (cocycle, Jacobian, rescaling, determinism)")
def test_invariance_suites():
    rng = np.random.default_rng(7)
    F = random_perturbed_cat_family(2, seed=5)

    # cocycle identity D f^{n+m} = D f^m(f^n) D f^n
    for _ in range(50):
        i, n, m = (int(v) for v in rng.integers(-3, 4, 3))
        X = rng.uniform(0.0, TWO_PI, (4, 2))
        Xn, Cn = compose_batch(F, i, n, X)
        Xnm, Cm = compose_batch(F, i + n, m, Xn)
        Xt, Ct = compose_batch(F, i, n + m, X)
        assert np.abs(wrap_diff(Xnm - Xt)).max() <= 1e-8
        scale = max(1.0, float(np.abs(Ct).max()))
        assert np.abs(np.matmul(Cm, Cn) - Ct).max() <= 1e-8 * scale

    # Jacobian against central differences
    h = 1e-5
    for f in F.maps:
        X = rng.uniform(0.0, TWO_PI, (20, 2))
        J = f.jacobian_batch(X)
        for k in range(2):
            e = np.zeros(2)
            e[k] = h
            fd = wrap_diff(f.apply_batch(X + e) - f.apply_batch(X - e)) / (2 * h)
            assert np.abs(fd - J[:, :, k]).max() <= 1e-6

    # uniform metric rescaling leaves lambda_hat unchanged
    G = constant_family(PerturbedCat(-0.9), 1)
    split = estimate_splitting(G, grid=8)
    base = fit_constants(G, split)
    for s in (0.25, 3.0, 10.0):
        scaled = fit_constants(G, split, metric=MetricSpec.uniform(s * s * np.eye(2)))
        assert abs(scaled.lambda_hat - base.lambda_hat) <= 1e-10
        assert abs(scaled.c_hat - base.c_hat) <= 1e-10

    # byte-identical certificates on re-run
    res = Resolutions(grid=8)
    a, _ = certify_family(G, res=res)
    b, _ = certify_family(G, res=res)
    assert a.to_json() == b.to_json()
    s1, _ = openness_experiment(G, 3, seed=11, res=res)
    s2, _ = openness_experiment(G, 3, seed=11, res=res)
    assert s1.csv() == s2.csv()
