"""Adapted norm making a hyperbolic family contract in one step.

For ``v = v_s + v_u`` split along the bundles,

    |v_s|_1 = sum_n (lam + eps)^-n |D f^n v_s|,
    |v_u|_1 = sum_n (lam + eps)^-n |D f^-n v_u|,
    |v|_1^2 = |v_s|_1^2 + |v_u|_1^2,

truncated once the geometric tail ``c q^(N+1) / (1 - q)``, ``q = lam / (lam + eps)``,
drops below a tolerance. Iterated norms come from restricted cocycles so
the series stays accurate far beyond the point where pushing raw vectors
forward would lose the stable direction.
"""
from dataclasses import dataclass, field
import math

import numpy as np

from . import _kernels as K
from .errors import ParameterError, PreconditionError
from .geometry import MetricSpec, cache_key
from .splitting import angle_property, fit_constants, restricted_cocycle

DEFAULT_TAIL_TOL = 1e-10
STRICT_SLACK = 1e-8


def default_epsilon(lam):
    return min(0.1, (1.0 - lam) / 2.0)


def _check_epsilon(lam, eps):
    if not 0.0 < eps < 1.0 - lam:
        raise ParameterError(f"epsilon must lie in (0, 1 - lambda) = (0, {1.0 - lam!r})")


def truncation_horizon(lam, eps, c=1.0, tail_tol=DEFAULT_TAIL_TOL):
    """Smallest ``N`` with ``c q^(N+1) / (1 - q) < tail_tol``; returns ``(N, tail)``."""
    _check_epsilon(lam, eps)
    q = lam / (lam + eps)
    if q == 0.0:
        return 0, 0.0
    N = max(0, math.ceil(math.log(tail_tol * (1.0 - q) / c) / math.log(q)) - 1)
    while c * q ** (N + 1) / (1.0 - q) >= tail_tol:
        N += 1
    return N, c * q ** (N + 1) / (1.0 - q)


def equivalence_constants(mu, lam, eps, c):
    """Lower and upper constants ``(1/2, Delta)`` comparing the adapted and original norms."""
    if not 0.0 < mu <= 1.0:
        raise ParameterError("angle constant mu must lie in (0, 1]")
    return 0.5, (1.0 / mu) * ((lam + eps) / eps * c) ** 2


def _sqrtm_inv(H):
    w, V = np.linalg.eigh(H)
    return np.matmul(V * (1.0 / np.sqrt(w))[:, None, :], np.swapaxes(V, 1, 2))


class AdaptedMetric:
    """Pointwise adapted norm for a family with an estimated splitting.

    Values are computed on demand at any point; ``forms`` caches the
    quadratic forms (standard coordinates) on the splitting grid. Frames
    returned by :meth:`frames` are aligned with the splitting and realize
    the adapted norm as ``|B^{-1} v|``: exactly for one-dimensional bundles,
    and through the squared series for higher-dimensional ones.
    """

    def __init__(self, F, split, lam, eps, c=1.0, tail_tol=DEFAULT_TAIL_TOL, settle=None,
                 metric=None):
        if not split.converged:
            raise PreconditionError("adapted metric needs a converged splitting")
        _check_epsilon(lam, eps)
        self.family = F
        self.split = split
        self.metric = F.metric if metric is None else metric
        self.lam = float(lam)
        self.eps = float(eps)
        self.c = float(c)
        self.tail_tol = tail_tol
        self.N, self.tail = truncation_horizon(self.lam, self.eps, self.c, tail_tol)
        self.settle = max(int(split.iterations.max()), 10) + 5 if settle is None else settle
        self.k = split.k
        self.c_observed = 1.0
        self._cache = {}
        self._frame_cache = {}

    @property
    def rate(self):
        return self.lam + self.eps

    def _series(self, i, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        key = cache_key(i, X)
        if key in self._cache:
            return self._cache[key]
        k, r = self.split.dims
        w = self.rate ** -np.arange(self.N + 1)
        lam_pow = self.lam ** np.arange(self.N + 1)
        out = []
        for flavor, dim in (("s", k), ("u", r)):
            B, C = restricted_cocycle(self.family, i, X, dim, flavor, self.N, self.settle,
                                      self.metric)
            n = len(X)
            a = K.op_norm(C.reshape(-1, dim, dim)).reshape(n, -1)
            self.c_observed = max(self.c_observed, float(np.max(a / lam_pow)))
            out.append((B, C, w))
        self._cache[key] = out
        return out

    def block_norms(self, i, X, V):
        """``(|v_s|_1, |v_u|_1)`` for vectors ``V[n]`` based at ``X[n]``."""
        (Bs, Cs, w), (Bu, Cu, _) = self._series(i, X)
        Bfull = np.concatenate([Bs, Bu], axis=2)
        coef = np.linalg.solve(Bfull, np.atleast_2d(V)[:, :, None])[:, :, 0]
        cs, cu = coef[:, :self.k], coef[:, self.k:]
        ns = np.linalg.norm(np.einsum("ntij,nj->nti", Cs, cs), axis=2) @ w
        nu = np.linalg.norm(np.einsum("ntij,nj->nti", Cu, cu), axis=2) @ w
        return ns, nu

    def norm_at(self, i, X, V):
        ns, nu = self.block_norms(i, X, V)
        return np.sqrt(ns * ns + nu * nu)

    def _block_form(self, C, w):
        if C.shape[-1] == 1:
            s = np.abs(C[:, :, 0, 0]) @ w
            return (s * s)[:, None, None]
        CtC = np.matmul(np.swapaxes(C, 2, 3), C)
        return np.einsum("t,ntij->nij", w * w, CtC)

    def frames(self, i, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        key = cache_key(i, X)
        if key not in self._frame_cache:
            (Bs, Cs, w), (Bu, Cu, _) = self._series(i, X)
            Ws = np.matmul(Bs, _sqrtm_inv(self._block_form(Cs, w)))
            Wu = np.matmul(Bu, _sqrtm_inv(self._block_form(Cu, w)))
            self._frame_cache[key] = np.concatenate([Ws, Wu], axis=2)
        return self._frame_cache[key]

    def forms(self, i, X=None):
        """Quadratic forms ``H`` with ``|v|_1^2 = v^T H v`` in standard coordinates."""
        X = self.split.points if X is None else X
        tau = np.linalg.inv(self.frames(i, X))
        return np.matmul(np.swapaxes(tau, 1, 2), tau)

    def to_dict(self, include_forms=True):
        out = {
            "lambda": self.lam,
            "epsilon": self.eps,
            "c": self.c,
            "c_observed": self.c_observed,
            "truncation": self.N,
            "tail_bound": self.tail,
            "tail_tol": self.tail_tol,
            "components": list(self.split.components),
        }
        if include_forms:
            out["points"] = self.split.points.tolist()
            out["forms"] = {str(i): self.forms(i).tolist() for i in self.split.components}
        return out


def build_adapted_metric(F, split, epsilon=None, fit=None, tail_tol=DEFAULT_TAIL_TOL):
    """Adapted metric from fitted constants; ``epsilon`` defaults to ``min(0.1, (1-lambda)/2)``."""
    fit = fit_constants(F, split) if fit is None else fit
    if not fit.hyperbolic:
        raise PreconditionError(f"family is not hyperbolic at resolution ({fit.verdict})")
    eps = default_epsilon(fit.lambda_hat) if epsilon is None else float(epsilon)
    return AdaptedMetric(F, split, fit.lambda_hat, eps, fit.c_hat, tail_tol)


def adapted_norm(F, split, lam, eps, p, v, N=None, c=1.0, tail_tol=DEFAULT_TAIL_TOL):
    """``|v|_1`` at the point ``p``; ``N`` overrides the tail-rule truncation."""
    am = AdaptedMetric(F, split, lam, eps, c, tail_tol)
    if N is not None:
        am.N = int(N)
    v = np.asarray(v.array() if hasattr(v, "array") else v, dtype=float)
    return float(am.norm_at(p.component, p.array()[None], v[None])[0])


@dataclass
class StrictReport:
    rate: float
    stable_ratio: float
    unstable_ratio: float
    slack: float
    worst_component: int
    worst_point: tuple
    per_component: dict = field(default_factory=dict, repr=False)

    @property
    def worst_ratio(self):
        return max(self.stable_ratio, self.unstable_ratio)

    @property
    def passed(self):
        return self.worst_ratio <= self.rate + self.slack

    def to_dict(self):
        return {"rate": self.rate, "stable_ratio": self.stable_ratio,
                "unstable_ratio": self.unstable_ratio, "slack": self.slack,
                "passed": self.passed, "worst_component": self.worst_component,
                "worst_point": list(self.worst_point),
                "per_component": {str(k): v for k, v in self.per_component.items()}}


def _bundle_vectors(B, extra, seed):
    # basis columns plus seeded unit combinations (only when the bundle is >1-dim)
    n, d, r = B.shape
    vecs = [B[:, :, j] for j in range(r)]
    if r > 1:
        rng = np.random.default_rng(seed)
        for _ in range(extra):
            c = rng.standard_normal(r)
            vecs.append(B @ (c / np.linalg.norm(c)))
    return vecs


def verify_strict(F, am, X=None, extra=8, slack=STRICT_SLACK):
    """One-step adapted-norm ratios on ``E^s`` under ``f`` and on ``E^u`` under ``f^{-1}``."""
    X = am.split.points if X is None else np.atleast_2d(X)
    worst = (-np.inf, 0, ())
    rs = ru = 0.0
    per = {}
    for i in am.split.components:
        Es, Eu = am.split.bases_at(i, X)
        f = F.map_at(i)
        Y = f.apply_batch(X)
        J = f.jacobian_batch(X)
        g = F.map_at(i - 1)
        Z = g.inverse_batch(X)
        Jinv = np.linalg.inv(g.jacobian_batch(Z))
        s_ratio = np.zeros(len(X))
        u_ratio = np.zeros(len(X))
        for v in _bundle_vectors(Es, extra, 0):
            r = am.norm_at(i + 1, Y, np.einsum("nij,nj->ni", J, v)) / am.norm_at(i, X, v)
            s_ratio = np.maximum(s_ratio, r)
        for v in _bundle_vectors(Eu, extra, 1):
            r = am.norm_at(i - 1, Z, np.einsum("nij,nj->ni", Jinv, v)) / am.norm_at(i, X, v)
            u_ratio = np.maximum(u_ratio, r)
        rs, ru = max(rs, float(s_ratio.max())), max(ru, float(u_ratio.max()))
        both = np.maximum(s_ratio, u_ratio)
        p = int(np.argmax(both))
        per[i] = {"stable": float(s_ratio.max()), "unstable": float(u_ratio.max())}
        if both[p] > worst[0]:
            worst = (float(both[p]), i, tuple(float(v) for v in X[p]))
    return StrictReport(am.rate, rs, ru, slack, worst[1], worst[2], per)


@dataclass
class SandwichReport:
    lower_ratio: float
    upper_excess: float
    delta: dict
    mu: dict
    c_used: float

    @property
    def passed(self):
        return self.lower_ratio >= 0.5 and self.upper_excess <= 1e-9

    def to_dict(self):
        return {"min_ratio_adapted_over_original": self.lower_ratio,
                "max_excess_over_delta": self.upper_excess,
                "delta": {str(k): v for k, v in self.delta.items()},
                "mu": {str(k): v for k, v in self.mu.items()},
                "c_used": self.c_used, "passed": self.passed}


def delta_table(F, am, angles=None):
    """``Delta_i`` per component using the measured angle constants."""
    angles = angle_property(F, am.split, metric=am.metric) if angles is None else angles
    for i in am.split.components:
        am.frames(i, am.split.points)
    c = max(am.c, am.c_observed)
    return {i: equivalence_constants(angles.mu[i], am.lam, am.eps, c)[1]
            for i in am.split.components}, angles, c


def sandwich_check(F, am, vectors_per_point=100, seed=0):
    """Check ``|v|/2 <= |v|_1 <= Delta_i |v|`` for random vectors at every stored point."""
    delta, angles, c = delta_table(F, am)
    X = am.split.points
    rng = np.random.default_rng(seed)
    low, excess = np.inf, -np.inf
    for i in am.split.components:
        R = am.metric.factor(i)
        for _ in range(vectors_per_point):
            V = rng.standard_normal(X.shape)
            n1 = am.norm_at(i, X, V)
            n0 = np.linalg.norm(V @ R.T, axis=1)
            low = min(low, float(np.min(n1 / n0)))
            excess = max(excess, float(np.max(n1 - delta[i] * n0)))
    return SandwichReport(low, excess, delta, angles.mu, c)


def block_orthogonality_defect(am, i, X, Vs, Vu):
    """``| |v_s+v_u|_1^2 - |v_s|_1^2 - |v_u|_1^2 |`` relative to the total."""
    tot = am.norm_at(i, X, Vs + Vu) ** 2
    parts = am.norm_at(i, X, Vs) ** 2 + am.norm_at(i, X, Vu) ** 2
    return np.abs(tot - parts) / np.maximum(tot, np.finfo(float).tiny)


def rescaled_metric(metric, low, high):
    """Metric with ``low |v|^2 <= |v|_*^2 <= high |v|^2``: ``R^T diag(high, low, ...) R``."""
    if not 0.0 < low <= high:
        raise ParameterError("need 0 < low <= high")
    d = metric.dim
    D = np.diag([high] + [low] * (d - 1))
    R = metric._factors
    grams = np.matmul(np.matmul(np.swapaxes(R, 1, 2), D), R)
    grams = 0.5 * (grams + np.swapaxes(grams, 1, 2))
    return MetricSpec(grams, metric.start, metric.extension)


def rescaled_metric_invariance(F, split, pairs, N=None, fit=None):
    """Refit constants under rescaled metrics and compare with the bound ``sqrt(K/k) c``."""
    base = fit_constants(F, split) if fit is None else fit
    horizon = base.horizon if N is None else N
    rows = []
    for low, high in pairs:
        m = rescaled_metric(F.metric, low, high)
        star = fit_constants(F, split, N=horizon, metric=m)
        bound = math.sqrt(high / low) * base.c_hat
        rows.append({
            "low": low, "high": high,
            "lambda": base.lambda_hat, "lambda_star": star.lambda_hat,
            "c": base.c_hat, "c_star": star.c_hat, "c_bound": bound,
            "lambda_delta": abs(star.lambda_hat - base.lambda_hat),
            "within_bound": star.c_hat <= bound + 1e-6,
        })
    return rows
