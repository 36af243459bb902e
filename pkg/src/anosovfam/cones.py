"""Cone fields around a splitting and the constants that keep them invariant.

All checks work in *working frames*: matrices ``B(p)`` whose first ``k``
columns span the stable space and remaining columns the unstable space,
with the working norm ``|B(p)^{-1} v|``. For orthonormal frames that is the
family metric; an adapted metric supplies its own frames. In frame
coordinates a map's derivative becomes ``T = B(f(p))^{-1} D_p f B(p)``.
"""
from dataclasses import dataclass, field
import csv
import io

import numpy as np

from . import _kernels as K
from .errors import (
    ConstantsInconsistentError,
    DegenerateInputError,
    ParameterError,
    PreconditionError,
)
from .family import NeighborhoodSpec
from .geometry import Frame, INJECTIVITY_RADIUS, cache_key, frame_matrices
from .splitting import fit_constants

STABLE, UNSTABLE = "stable", "unstable"
DEFAULT_BOUNDARY_SAMPLES = 64
DEFAULT_BOUNDARY_SAMPLES_HIGHDIM = 512
DEFAULT_CHART_SAMPLES = 16
DEFAULT_SAFETY = 0.9
BETA_HALVINGS = 40
STRICT_TOL = 1e-6


# --- formulas -------------------------------------------------------------------

def alpha_range(lam):
    """Open interval of cone apertures compatible with contraction ``lam``."""
    return 0.0, (1.0 - lam) / (1.0 + lam)


def _check_alpha(alpha, lam):
    lo, hi = alpha_range(lam)
    if not lo < alpha < hi:
        raise ParameterError(f"alpha = {alpha} outside (0, {hi}) for lambda = {lam}")


def lambda_prime(lam, alpha):
    return lam * (1.0 + alpha) / (1.0 - alpha)


def sigma_bound(lam, alpha):
    """Remainder budget as stated with the lemma (min of two terms)."""
    t1 = (1.0 / lam - lam) * alpha / (2.0 * (1.0 + alpha) ** 2)
    t2 = (1.0 / lam * (1.0 - alpha) - (1.0 + alpha) * alpha) / (2.0 * (1.0 + alpha))
    return min(t1, t2)


def sigma_bound_contraction(lam, alpha):
    """Budget used inside the contraction estimate's proof."""
    return ((1.0 - alpha) / lam - (1.0 + alpha)) / (2.0 * (1.0 + alpha))


def effective_sigma_bound(lam, alpha):
    """Smaller of the two budgets; keeps ``eta_bound < 1`` for every admissible sigma."""
    _check_alpha(alpha, lam)
    b = min(sigma_bound(lam, alpha), sigma_bound_contraction(lam, alpha))
    if b <= 0.0:
        raise ParameterError("remainder budget is nonpositive; decrease alpha")
    return b


def eta_bound(alpha, lam, sigma):
    """``1 / [(1-alpha)(1/(lam (1+alpha)) - sigma) - sigma]``."""
    denom = (1.0 - alpha) * (1.0 / (lam * (1.0 + alpha)) - sigma) - sigma
    if not denom > 1.0:
        raise ConstantsInconsistentError(
            f"expansion factor {denom!r} <= 1 for alpha={alpha}, lambda={lam}, sigma={sigma}")
    return 1.0 / denom


# --- cones ----------------------------------------------------------------------

@dataclass(frozen=True)
class ConeSpec:
    frame: Frame
    alpha: float
    flavor: str = UNSTABLE

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ParameterError("cone aperture must lie in (0, 1)")
        if self.flavor not in (STABLE, UNSTABLE):
            raise ParameterError(f"flavor must be {STABLE!r} or {UNSTABLE!r}")


def cone_contains(c, v, closed=False):
    """Membership of tangent vector ``v`` in the cone ``c``; ``0`` belongs to every cone."""
    if v.base != c.frame.base:
        raise DegenerateInputError("vector and cone have different base points")
    x = c.frame.coordinates(v.array())
    k = c.frame.k
    ns, nu = np.linalg.norm(x[:k]), np.linalg.norm(x[k:])
    if ns == 0.0 and nu == 0.0:
        return True
    small, big = (ns, nu) if c.flavor == UNSTABLE else (nu, ns)
    return bool(small <= c.alpha * big if closed else small < c.alpha * big)


def cone_samples(d, k, alpha, flavor, n=None, seed=0):
    """Unit vectors in frame coordinates covering the closed cone.

    For ``d = 2`` these are ``(t alpha, 1)`` (or ``(1, t alpha)``) with ``t``
    uniform on ``[-1, 1]`` including both boundary rays. Higher dimensions
    draw ``n`` seeded directions, half of them on the boundary.
    """
    r = d - k
    dom, sub = (r, k) if flavor == UNSTABLE else (k, r)
    if d == 2:
        n = DEFAULT_BOUNDARY_SAMPLES if n is None else n
        t = np.linspace(-1.0, 1.0, max(int(n), 2))
        a, b = t * alpha, np.ones_like(t)
        X = np.stack([a, b] if flavor == UNSTABLE else [b, a], axis=1)
    else:
        n = DEFAULT_BOUNDARY_SAMPLES_HIGHDIM if n is None else n
        rng = np.random.default_rng(seed)
        u = rng.standard_normal((n, dom))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        s = rng.standard_normal((n, sub))
        s /= np.linalg.norm(s, axis=1, keepdims=True)
        rho = np.ones(n)
        rho[n // 2:] = rng.uniform(0.0, 1.0, n - n // 2)
        s *= (alpha * rho)[:, None]
        X = np.concatenate([s, u] if flavor == UNSTABLE else [u, s], axis=1)
    return X / np.linalg.norm(X, axis=1, keepdims=True)


def exact_margin_2d(T, alpha, flavor):
    """Exact cone-image margin for linear maps of the plane.

    The image of the closed cone is the sector spanned by the images of its
    two boundary rays containing the image of the axis; it lies in the open
    cone iff both ray images do and they fall in the same nappe. A nappe
    mismatch yields margin ``-1``.
    """
    if flavor == UNSTABLE:
        rays = np.array([[alpha, 1.0], [-alpha, 1.0]])
        dom = 1
    else:
        rays = np.array([[1.0, alpha], [1.0, -alpha]])
        dom = 0
    Y = np.einsum("nij,mj->nmi", T, rays)
    sub = 1 - dom
    ny = np.linalg.norm(Y, axis=2)
    m = (alpha * np.abs(Y[:, :, dom]) - np.abs(Y[:, :, sub])) / ny
    same = np.sign(Y[:, 0, dom]) == np.sign(Y[:, 1, dom])
    return np.where(same, m.min(axis=1), -1.0)


# --- working frames -------------------------------------------------------------

class SplittingFrames:
    """Metric-orthonormal stable/unstable frames built from a splitting estimate."""

    def __init__(self, split, metric=None):
        self.split = split
        self.metric = split.family.metric if metric is None else metric
        self.k = split.k
        self._cache = {}

    def frames(self, i, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        key = cache_key(i, X)
        if key not in self._cache:
            Es, Eu = self.split.bases_at(i, X)
            R = self.metric.factors(np.broadcast_to(np.asarray(i), (len(X),)))
            self._cache[key] = frame_matrices(Es, Eu, R)
        return self._cache[key]


def frame_derivatives(f, i, X, frames_src, frames_dst=None):
    """``T = B(f(p))^{-1} D_p f B(p)`` for rows of ``X`` in component ``i``."""
    frames_dst = frames_src if frames_dst is None else frames_dst
    Y = f.apply_batch(X)
    B0 = frames_src.frames(i, X)
    B1 = frames_dst.frames(i + 1, Y)
    return np.linalg.solve(B1, np.matmul(f.jacobian_batch(X), B0))


def family_frame_derivatives(G, X, frames_src, frames_dst=None, components=None):
    """:func:`frame_derivatives` for every component of ``G`` in one batched pass.

    Returns ``{i: T_i}``; base frames are looked up per component so cached
    grid frames are reused, image frames are built for all components at once.
    """
    frames_dst = frames_src if frames_dst is None else frames_dst
    comps = tuple(G.components if components is None else components)
    n = len(X)
    rows = np.repeat(np.array(comps, dtype=np.int64), n)
    Y, J = G.step(rows, np.tile(X, (len(comps), 1)))
    B0 = np.concatenate([frames_src.frames(i, X) for i in comps])
    B1 = frames_dst.frames(rows + 1, Y)
    T = np.linalg.solve(B1, np.matmul(J, B0))
    return {i: T[c * n:(c + 1) * n] for c, i in enumerate(comps)}


@dataclass
class ConeReport:
    """Worst-case cone margins and expansion ratios over a point set."""

    alpha: float
    required_expansion: float
    margin_unstable: float
    margin_stable: float
    expansion_unstable: float
    expansion_stable: float
    worst_component: int
    worst_point: tuple
    points: int
    samples: int
    exact_2d: bool
    per_point: dict = field(default_factory=dict, repr=False)

    @property
    def min_margin(self):
        return min(self.margin_unstable, self.margin_stable)

    @property
    def min_expansion(self):
        return min(self.expansion_unstable, self.expansion_stable)

    @property
    def passed(self):
        return self.min_margin > 0.0 and self.min_expansion >= self.required_expansion

    def summary(self):
        return {
            "alpha": self.alpha,
            "required_expansion": self.required_expansion,
            "margin_unstable": self.margin_unstable,
            "margin_stable": self.margin_stable,
            "expansion_unstable": self.expansion_unstable,
            "expansion_stable": self.expansion_stable,
            "worst_component": self.worst_component,
            "worst_point": list(self.worst_point),
            "points": self.points,
            "samples": self.samples,
            "exact_2d": self.exact_2d,
            "passed": self.passed,
        }

    def to_dict(self):
        out = self.summary()
        out["per_point"] = {str(i): {k: v.tolist() for k, v in arrs.items()}
                            for i, arrs in self.per_point.items()}
        return out

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["component", "point", "margin_unstable", "margin_stable",
                    "expansion_unstable", "expansion_stable"])
        for i, arrs in self.per_point.items():
            for p in range(len(arrs["margin_unstable"])):
                w.writerow([i, p] + [repr(float(arrs[key][p])) for key in
                                     ("margin_unstable", "margin_stable",
                                      "expansion_unstable", "expansion_stable")])
        return buf.getvalue()


def cone_report(T_by_component, X, k, alpha, required_expansion, samples=None):
    """Margins of ``T`` on unstable cones and of ``T^{-1}`` on stable cones."""
    d = X.shape[1]
    Xu = cone_samples(d, k, alpha, UNSTABLE, samples)
    Xs = cone_samples(d, k, alpha, STABLE, samples)
    worst = (np.inf, 0, ())
    agg = dict(mu=np.inf, ms=np.inf, eu=np.inf, es=np.inf)
    per_point = {}
    for i, T in T_by_component.items():
        Tinv = np.linalg.inv(T)
        mu, eu = K.cone_margins(T, Xu, k, alpha, True)
        ms, es = K.cone_margins(Tinv, Xs, k, alpha, False)
        if d == 2:
            mu = np.minimum(mu, exact_margin_2d(T, alpha, UNSTABLE))
            ms = np.minimum(ms, exact_margin_2d(Tinv, alpha, STABLE))
        per_point[i] = dict(margin_unstable=mu, margin_stable=ms,
                            expansion_unstable=eu, expansion_stable=es)
        agg["mu"] = min(agg["mu"], float(mu.min()))
        agg["ms"] = min(agg["ms"], float(ms.min()))
        agg["eu"] = min(agg["eu"], float(eu.min()))
        agg["es"] = min(agg["es"], float(es.min()))
        score = np.minimum(np.minimum(mu, ms),
                           np.minimum(eu, es) - required_expansion)
        p = int(np.argmin(score))
        if score[p] < worst[0]:
            worst = (float(score[p]), i, tuple(float(v) for v in X[p]))
    return ConeReport(alpha, required_expansion, agg["mu"], agg["ms"], agg["eu"], agg["es"],
                      worst[1], worst[2], len(X), len(Xu), d == 2, per_point)


def strict_cone_lemma_check(F, split, alpha, boundary_samples=None, fit=None, tol=STRICT_TOL,
                            frames=None):
    """Cone invariance and ``1/lambda'`` expansion for a strictly hyperbolic family.

    ``lambda`` comes from ``fit`` (computed if absent); families whose fitted
    ``c`` exceeds ``1 + tol`` must first be given an adapted metric.
    """
    fit = fit_constants(F, split) if fit is None else fit
    if fit.c_hat > 1.0 + tol:
        raise PreconditionError(
            f"family is not strict in this metric (c = {fit.c_hat:.9g}); "
            "build an adapted metric first")
    lam = fit.lambda_hat
    _check_alpha(alpha, lam)
    frames = SplittingFrames(split) if frames is None else frames
    T = {i: frame_derivatives(F.map_at(i), i, split.points, frames)
         for i in split.components}
    return cone_report(T, split.points, split.k, alpha, 1.0 / lambda_prime(lam, alpha),
                       boundary_samples)


def perturbed_cone_check(G, frames, bundle, X, boundary_samples=None, T=None):
    """Cones of the base family's frames under the perturbed family's derivatives.

    Requires expansion at least ``1/eta`` on unstable cones under ``D g`` and
    on stable cones under ``D g^{-1}``.
    """
    T = family_frame_derivatives(G, X, frames) if T is None else T
    return cone_report(T, X, frames.k, bundle.alpha, 1.0 / bundle.eta, boundary_samples)


# --- nonlinear remainders -----------------------------------------------------------

def _block_samples(dim, radius, m, seed=0):
    # nested in m: doubling m reproduces every previous sample
    t = radius * (2.0 * np.arange(m + 1) / m - 1.0)
    if dim == 1:
        return t[:, None]
    rng = np.random.default_rng(seed)
    dirs = np.concatenate([np.eye(dim), -np.eye(dim), rng.standard_normal((4 * dim, dim))])
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    rad = np.abs(t[t >= 0.0])
    return (rad[:, None, None] * dirs[None]).reshape(-1, dim)


def chart_samples(d, k, beta, m=DEFAULT_CHART_SAMPLES):
    """Offsets in ``B^k(0, beta) x B^{d-k}(0, beta)`` (frame coordinates)."""
    if m < 1:
        raise ParameterError("chart sample count must be positive")
    S = _block_samples(k, beta, m)
    U = _block_samples(d - k, beta, m, seed=1)
    a = np.repeat(S, len(U), axis=0)
    b = np.tile(U, (len(S), 1))
    return np.concatenate([a, b], axis=1)


@dataclass
class RemainderEstimate:
    sigma1: np.ndarray = field(repr=False)
    sigma2: np.ndarray = field(repr=False)
    beta: float = 0.0

    @property
    def sigma_p(self):
        return np.maximum(self.sigma1, self.sigma2)

    @property
    def sigma(self):
        return float(self.sigma_p.max()) if self.sigma_p.size else 0.0


def remainder_sup(f, i, X, frames, beta, m=DEFAULT_CHART_SAMPLES, chunk=4096):
    """Sampled remainder sizes of ``f`` (acting ``M_i -> M_{i+1}``) in flat charts.

    ``sigma1[p]`` is the largest ``|tau_{f(p)} (D_{p + B_p u} f - D_p f) B_p|``
    and ``sigma2[p]`` the analogue for ``f^{-1}`` around ``f(p)``, with ``u``
    ranging over chart samples of radius ``beta``.
    """
    if not 0.0 < beta <= INJECTIVITY_RADIUS:
        raise ParameterError(f"beta must lie in (0, {INJECTIVITY_RADIUS}]")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n, d = X.shape
    Y = f.apply_batch(X)
    B0 = frames.frames(i, X)
    B1 = frames.frames(i + 1, Y)
    tau1 = np.linalg.inv(B1)
    tau0 = np.linalg.inv(B0)
    J0 = f.jacobian_batch(X)
    J0inv = np.linalg.inv(J0)
    U = chart_samples(d, frames.k, beta, m)
    s1 = np.zeros(n)
    s2 = np.zeros(n)
    per = max(1, chunk // len(U))
    for a in range(0, n, per):
        b = min(n, a + per)
        q = b - a
        off0 = np.einsum("nij,sj->nsi", B0[a:b], U).reshape(-1, d)
        P = np.repeat(X[a:b], len(U), axis=0) + off0
        dJ = f.jacobian_batch(P).reshape(q, len(U), d, d) - J0[a:b, None]
        M = np.matmul(np.matmul(tau1[a:b, None], dJ), B0[a:b, None])
        s1[a:b] = K.op_norm(M.reshape(-1, d, d)).reshape(q, -1).max(axis=1)
        off1 = np.einsum("nij,sj->nsi", B1[a:b], U).reshape(-1, d)
        Q = f.inverse_batch(np.repeat(Y[a:b], len(U), axis=0) + off1)
        dJi = np.linalg.inv(f.jacobian_batch(Q)).reshape(q, len(U), d, d) - J0inv[a:b, None]
        M = np.matmul(np.matmul(tau0[a:b, None], dJi), B1[a:b, None])
        s2[a:b] = K.op_norm(M.reshape(-1, d, d)).reshape(q, -1).max(axis=1)
    return RemainderEstimate(s1, s2, beta)


def admissible_beta(F, i, alpha, lam, frames, X, m=DEFAULT_CHART_SAMPLES):
    """Largest ``beta = (pi/2) 2^-j`` whose sampled remainder fits the budget.

    Returns ``(beta, remainder estimate, budget)``. The budget is the smaller
    of the stated bound and the contraction-proof bound, see
    :func:`effective_sigma_bound`.
    """
    bound = effective_sigma_bound(lam, alpha)
    beta = INJECTIVITY_RADIUS
    f = F.map_at(i)
    for _ in range(BETA_HALVINGS):
        est = remainder_sup(f, i, X, frames, beta, m)
        if est.sigma <= bound:
            return beta, est, bound
        beta *= 0.5
    raise ConstantsInconsistentError(
        f"no admissible beta for component {i} after {BETA_HALVINGS} halvings")


def epsilon_sequence(betas, sigmas, safety=DEFAULT_SAFETY, bound=None, extension="periodic"):
    """Radii ``eps_i = safety * min(beta_i, beta_{i+1}, sigma_i)`` over a window.

    ``betas``/``sigmas`` list window indices ``-W..W-1`` in order. A zero
    ``sigma_i`` (locally affine map) is replaced by ``bound``. Returns the
    neighbourhood and the list of substituted positions.
    """
    b = np.asarray(betas, dtype=float)
    s = np.asarray(sigmas, dtype=float)
    if b.shape != s.shape or len(b) % 2:
        raise ParameterError("need matching beta and sigma lists over a window of 2W indices")
    if not 0.0 < safety <= 1.0:
        raise ParameterError("safety must lie in (0, 1]")
    if np.any(b <= 0.0) or np.any(s < 0.0):
        raise ParameterError("betas must be positive and sigmas nonnegative")
    zero = np.flatnonzero(s == 0.0)
    if len(zero):
        if bound is None or not bound > 0.0:
            raise ParameterError("zero sigma needs a positive substitute bound")
        s = s.copy()
        s[zero] = bound
    nxt = np.roll(b, -1)
    if extension == "constant":
        nxt[-1] = b[-1]
    eps = safety * np.minimum(np.minimum(b, nxt), s)
    return NeighborhoodSpec(eps, len(b) // 2, extension), [int(j) for j in zero]


@dataclass
class ConstantsBundle:
    """Everything the perturbation lemmas need for one base family.

    ``lam`` is the contraction rate in the working metric; ``epsilon`` holds
    radii in that metric and ``radii`` the corresponding original-metric
    radii used for the C1 neighbourhood test.
    """

    alpha: float
    lam: float
    sigma: np.ndarray
    beta: np.ndarray
    epsilon: np.ndarray
    radii: np.ndarray
    eta: float
    lambda_prime: float
    sigma_bound: float
    sigma_bound_stated: float
    sigma_bound_contraction: float
    substituted: list
    safety: float
    window: int
    extension: str
    adapted: bool = False
    c_prime: float = 1.0
    fit: object = field(default=None, repr=False)
    frames: object = field(default=None, repr=False)
    split: object = field(default=None, repr=False)
    adapted_info: dict = field(default_factory=dict)

    def neighborhood(self):
        return NeighborhoodSpec(self.radii, self.window, self.extension)

    def to_dict(self):
        return {
            "alpha": self.alpha,
            "lambda": self.lam,
            "lambda_prime": self.lambda_prime,
            "eta": self.eta,
            "sigma": self.sigma.tolist(),
            "beta": self.beta.tolist(),
            "epsilon": self.epsilon.tolist(),
            "radii": self.radii.tolist(),
            "sigma_bound": self.sigma_bound,
            "sigma_bound_stated": self.sigma_bound_stated,
            "sigma_bound_contraction": self.sigma_bound_contraction,
            "sigma_substituted": list(self.substituted),
            "safety": self.safety,
            "window": self.window,
            "extension": self.extension,
            "adapted_metric": self.adapted,
            "c_prime": self.c_prime,
            "adapted": dict(self.adapted_info),
        }
