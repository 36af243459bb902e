"""Stable/unstable splitting estimation and hyperbolicity constants.

The unstable space at ``p`` is the dominant left singular subspace of the
forward cocycle arriving at ``p`` from far in the past; the stable space is
the dominant subspace of the inverse cocycle leaving ``p`` into the future.
Both products are accumulated one factor at a time with rescaling, so each
iteration costs one matrix product per point.
"""
from dataclasses import dataclass, field
import csv
import io
import json

import numpy as np

from . import _kernels as K
from .family import inv_batch
from .errors import DimensionMismatchError, ParameterError, PreconditionError
from .geometry import (
    TWO_PI,
    max_abs_cos,
    orthonormalize_blocks,
    torus_grid,
    wrap_diff,
)

DEFAULT_N_MAX = 60
DEFAULT_TOL = 1e-10
DEFAULT_FIT_HORIZON = 20
ANGLE_FLOOR = 1e-3


def default_dims(d):
    return d // 2, d - d // 2


def _check_dims(F, dims):
    k, r = default_dims(F.dim) if dims is None else (int(dims[0]), int(dims[1]))
    if k < 1 or r < 1 or k + r != F.dim:
        raise DimensionMismatchError(f"splitting dims {dims} do not add up to d = {F.dim}")
    return k, r


def _eye_batch(n, d):
    return np.broadcast_to(np.eye(d), (n, d, d)).copy()


def _dominant(P, r, tol, min_gap, U_prev):
    # distance to the limit is of order s_{r+1}/s_r, so both tests are needed
    U = K.top_left_subspace(P, r)
    if U_prev is None:
        return U, np.full(len(P), np.inf), np.zeros(len(P), dtype=bool)
    inc = K.subspace_distance(U_prev, U)
    ok = inc < tol
    if np.any(ok):
        s = np.linalg.svd(P[ok], compute_uv=False)
        gap = s[:, r - 1] / np.maximum(s[:, r], np.finfo(float).tiny)
        ok[ok] = gap > min_gap
    return U, inc, ok


def _rows(i, n):
    return np.broadcast_to(np.asarray(i, dtype=np.int64), (n,)).copy()


def estimate_at(F, i, X, dims=None, n_max=DEFAULT_N_MAX, tol=DEFAULT_TOL, min_gap=None):
    """Pointwise estimator for rows of ``X`` in component ``i``.

    ``i`` may be an integer or an array giving each row its own component.
    Returns ``(stable, unstable, iterations, last_increment, converged)``
    with bases of shape ``(n, d, k)`` and ``(n, d, d-k)``. A point counts as
    converged once the subspace moves by less than ``tol`` in one step and
    the singular-value gap separating it exceeds ``min_gap`` (default
    ``1/tol``). The gap test bounds the distance to the limit, which a single
    small increment does not, and keeps cocycles without dominated
    splitting (identity, cancelling products) from looking converged.
    """
    min_gap = 1.0 / tol if min_gap is None else min_gap
    if n_max < 1:
        raise ParameterError("n_max must be at least 1")
    k, r = _check_dims(F, dims)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n, d = X.shape
    comps0 = _rows(i, n)
    out = {}
    for flavor, dim in (("u", r), ("s", k)):
        E = np.empty((n, d, dim))
        iters = np.full(n, n_max, dtype=np.int64)
        incs = np.full(n, np.inf)
        conv = np.zeros(n, dtype=bool)
        active = np.arange(n)
        Y = X.copy()
        comps = comps0.copy()
        P = _eye_batch(n, d)
        U_prev = None
        for m in range(1, n_max + 1):
            if flavor == "u":
                Y, J = F.unstep(comps, Y)
                comps = comps - 1
                P = K.accumulate(P, J)
            else:
                Y2, J = F.step(comps, Y)
                P = K.accumulate(P, inv_batch(J))
                Y, comps = Y2, comps + 1
            U, inc, ok = _dominant(P, dim, tol, min_gap, U_prev)
            E[active] = U
            incs[active] = inc
            if np.any(ok):
                done = active[ok]
                iters[done] = m
                conv[done] = True
                keep = ~ok
                active, Y, P, U, comps = active[keep], Y[keep], P[keep], U[keep], comps[keep]
                if len(active) == 0:
                    break
            U_prev = U
        out[flavor] = (E, iters, incs, conv)
    Es, its_s, inc_s, conv_s = out["s"]
    Eu, its_u, inc_u, conv_u = out["u"]
    return (Es, Eu, np.maximum(its_s, its_u), np.maximum(inc_s, inc_u), conv_s & conv_u)


@dataclass
class SplittingEstimate:
    """Sampled splitting on a common set of base points for each component.

    ``stable[c]`` / ``unstable[c]`` hold orthonormal bases (Euclidean) at
    ``points`` for ``components[c]``.
    """

    family: object = field(repr=False)
    components: tuple
    points: np.ndarray = field(repr=False)
    grid: object
    k: int
    stable: np.ndarray = field(repr=False)
    unstable: np.ndarray = field(repr=False)
    iterations: np.ndarray = field(repr=False)
    last_increment: np.ndarray = field(repr=False)
    converged_mask: np.ndarray = field(repr=False)
    n_max: int = DEFAULT_N_MAX
    tol: float = DEFAULT_TOL

    @property
    def dim(self):
        return self.points.shape[1]

    @property
    def dims(self):
        return self.k, self.dim - self.k

    @property
    def converged(self):
        return bool(np.all(self.converged_mask))

    def index(self, i):
        try:
            return self.components.index(int(i))
        except ValueError:
            raise ParameterError(f"component {i} not covered by this estimate") from None

    def resolve(self, i):
        """Stored component carrying the same map data as ``i``, if any."""
        i = int(i)
        if i in self.components:
            return i
        F = self.family
        if F.extension == "periodic" and set(F.components) <= set(self.components):
            return (i + F.window) % (2 * F.window) - F.window
        return None

    def bases_at(self, i, Y):
        """Stable/unstable bases at arbitrary points of component ``i`` (scalar or per-row).

        Grid points reuse stored values; other points are re-estimated
        with the same settings rather than interpolated.
        """
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        n, d = Y.shape
        comps = _rows(i, n)
        Es = np.empty((n, d, self.k))
        Eu = np.empty((n, d, d - self.k))
        off = np.ones(n, dtype=bool)
        for c in np.unique(comps):
            sel = np.flatnonzero(comps == c)
            idx = self.lookup(c, Y[sel])
            on = idx >= 0
            if np.any(on):
                ci = self.index(self.resolve(c))
                Es[sel[on]] = self.stable[ci][idx[on]]
                Eu[sel[on]] = self.unstable[ci][idx[on]]
                off[sel[on]] = False
        if np.any(off):
            s, u, *_ = estimate_at(self.family, comps[off], Y[off], self.dims, self.n_max,
                                   self.tol)
            Es[off], Eu[off] = s, u
        return Es, Eu

    def at(self, i):
        c = self.index(i)
        return self.stable[c], self.unstable[c]

    def diagnostics(self):
        return {
            "converged": self.converged,
            "nonconverged_points": int(np.sum(~self.converged_mask)),
            "max_iterations": int(self.iterations.max()),
            "max_last_increment": float(np.max(self.last_increment)),
            "n_max": self.n_max,
            "tol": self.tol,
        }

    def lookup(self, i, Y, atol=1e-12):
        """Indices of grid points matching rows of ``Y`` in component ``i`` (-1 if off-grid)."""
        i = self.resolve(i)
        if self.grid is None or i is None:
            return np.full(len(Y), -1)
        g = self.grid
        j = np.rint(np.asarray(Y) * g / TWO_PI).astype(np.int64)
        on = np.all(np.abs(wrap_diff(Y - TWO_PI * j / g)) <= atol, axis=1)
        j %= g
        flat = np.zeros(len(Y), dtype=np.int64)
        for a in range(Y.shape[1]):
            flat = flat * g + j[:, a]
        return np.where(on, flat, -1)

    def to_dict(self):
        return {
            "family_digest": self.family.digest(),
            "components": list(self.components),
            "grid": self.grid,
            "dims": list(self.dims),
            "points": self.points.tolist(),
            "stable": self.stable.tolist(),
            "unstable": self.unstable.tolist(),
            "iterations": self.iterations.tolist(),
            "last_increment": self.last_increment.tolist(),
            "converged": self.converged_mask.tolist(),
            "diagnostics": self.diagnostics(),
        }

    def to_csv(self):
        d, k = self.dim, self.k
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        head = ["component"] + [f"x{a}" for a in range(d)]
        head += [f"stable{j}_{a}" for j in range(k) for a in range(d)]
        head += [f"unstable{j}_{a}" for j in range(d - k) for a in range(d)]
        head += ["unstable_slope", "max_abs_cos", "iterations", "last_increment", "converged"]
        w.writerow(head)
        R = self.family.metric
        for c, i in enumerate(self.components):
            cos = max_abs_cos(self.stable[c], self.unstable[c], R.factor(i))
            for p in range(len(self.points)):
                u = self.unstable[c, p]
                slope = ""
                if d == 2 and u.shape[1] == 1 and u[0, 0] != 0.0:
                    slope = repr(float(u[1, 0] / u[0, 0]))
                row = [i] + [repr(float(v)) for v in self.points[p]]
                row += [repr(float(v)) for v in self.stable[c, p].T.ravel()]
                row += [repr(float(v)) for v in u.T.ravel()]
                row += [slope, repr(float(cos[p])), int(self.iterations[c, p]),
                        repr(float(self.last_increment[c, p])),
                        int(self.converged_mask[c, p])]
                w.writerow(row)
        return buf.getvalue()


def estimate_splitting(F, grid=64, dims=None, n_max=DEFAULT_N_MAX, tol=DEFAULT_TOL,
                       components=None, points=None, min_gap=None):
    """Estimate the splitting on a uniform grid (or on given ``points``) of each component."""
    k, _ = _check_dims(F, dims)
    if points is None:
        if grid < 2:
            raise ParameterError("grid resolution must be at least 2 per axis")
        X = torus_grid(F.dim, grid)
    else:
        X = np.atleast_2d(np.asarray(points, dtype=float))
        grid = None
    comps = tuple(F.components if components is None else (int(c) for c in components))
    nc, n = len(comps), len(X)
    res = estimate_at(F, np.repeat(np.array(comps, dtype=np.int64), n), np.tile(X, (nc, 1)),
                      (k, F.dim - k), n_max, tol, min_gap)
    stack = [a.reshape((nc, n) + a.shape[1:]) for a in res]
    return SplittingEstimate(F, comps, X, grid, k, *stack, n_max=n_max, tol=tol)


# --- invariance ----------------------------------------------------------------

@dataclass
class InvarianceReport:
    max_defect: float
    stable_defect: float
    unstable_defect: float
    worst_component: int
    worst_point: tuple
    reestimated_points: int

    def to_dict(self):
        return dict(self.__dict__, worst_point=list(self.worst_point))


def _orth(E):
    Q, _ = np.linalg.qr(E)
    return Q


def dg_invariance_check(F, split):
    """Subspace distance between ``D_p f(E_p)`` and ``E_{f(p)}``, maximized over the grid."""
    X = split.points
    nc, n = len(split.components), len(X)
    comps = np.repeat(np.array(split.components, dtype=np.int64), n)
    Y, J = F.step(comps, np.tile(X, (nc, 1)))
    Es_img = _orth(np.matmul(J, split.stable.reshape((nc * n,) + split.stable.shape[2:])))
    Eu_img = _orth(np.matmul(J, split.unstable.reshape((nc * n,) + split.unstable.shape[2:])))
    reest = sum(int(np.sum(split.lookup(c, Y[comps == c]) < 0)) for c in split.components)
    Ts, Tu = split.bases_at(comps + 1, Y)
    a = K.subspace_distance(Ts, Es_img)
    b = K.subspace_distance(Tu, Eu_img)
    both = np.maximum(a, b)
    p = int(np.argmax(both))
    return InvarianceReport(float(both[p]), float(a.max()), float(b.max()),
                            int(comps[p]), tuple(float(v) for v in X[p % n]), reest)


# --- restricted cocycles and constants -------------------------------------------

def _orbit(F, i, X, length, flavor):
    """Orbit ``z_0..z_length`` and step maps ``L_j`` (and their inverses).

    Stable flavor follows ``f`` forward with ``L_j = D f``; unstable follows
    ``f^{-1}`` with ``L_j = D f^{-1}``. ``comps[j]`` is the per-row component of ``z_j``.
    """
    Z = [np.array(X, dtype=float)]
    c = _rows(i, len(X))
    L, Linv, comps = [], [], [c]
    for j in range(length):
        if flavor == "s":
            Y, J = F.step(c, Z[-1])
            L.append(J)
            Linv.append(inv_batch(J))
            c = c + 1
        else:
            Y, J = F.unstep(c, Z[-1])
            L.append(inv_batch(J))
            Linv.append(J)
            c = c - 1
        Z.append(Y)
        comps.append(c)
    return Z, L, Linv, comps


def restricted_cocycle(F, i, X, dim, flavor, N, settle=40, metric=None):
    """Cocycle restricted to the contracted bundle along each orbit, in orthonormal bases.

    The bundle at ``z_j`` is pulled back from ``z_{N+settle}`` through the
    inverse step maps, which is numerically stable because the bundle is
    dominant for those inverses. Returns ``(B0, C)`` where ``B0`` is a
    metric-orthonormal basis of the bundle at the starting points and
    ``C[:, n]`` is the ``dim x dim`` matrix of ``D f^{+-n}`` restricted to
    the bundle (``n = 0..N``). Norms of ``D f^{+-n} v`` are ``|C[:, n] c|``
    for ``v = B0 c``. ``i`` may be per-row.
    """
    metric = F.metric if metric is None else metric
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n, d = X.shape
    Z, L, Linv, comps = _orbit(F, i, X, N + settle, flavor)
    Q = _eye_batch(n, d)
    E = [None] * (N + 1)
    for j in range(N + settle - 1, -1, -1):
        Q = K.accumulate(Linv[j], Q)
        if j <= N:
            E[j] = K.top_left_subspace(Q, dim)
    R = [metric.factors(comps[j]) for j in range(N + 1)]
    B = [orthonormalize_blocks(E[j], R[j]) for j in range(N + 1)]
    C = np.empty((n, N + 1, dim, dim))
    C[:, 0] = np.eye(dim)
    for j in range(N):
        R1 = R[j + 1]
        img = np.matmul(R1, np.matmul(L[j], B[j]))
        M = np.matmul(np.swapaxes(np.matmul(R1, B[j + 1]), 1, 2), img)
        C[:, j + 1] = np.matmul(M, C[:, j])
    return B[0], C


@dataclass
class HyperbolicityFit:
    """Fitted ``(lambda, c)`` with ``|D f^n v_s| <= c lambda^n |v_s|`` on samples."""

    lambda_hat: float
    c_hat: float
    lambda_stable: float
    lambda_unstable: float
    c_stable: float
    c_unstable: float
    horizon: int
    worst_flavor: str
    worst_component: int
    worst_point: tuple
    hyperbolic: bool
    splitting_converged: bool = True
    profile: np.ndarray = field(default=None, repr=False)
    rates: dict = field(default_factory=dict, repr=False)

    @property
    def verdict(self):
        return "hyperbolic" if self.hyperbolic else "not hyperbolic"

    def to_dict(self):
        out = {k: v for k, v in self.__dict__.items() if k not in ("rates", "profile")}
        out["worst_point"] = list(self.worst_point)
        out["verdict"] = self.verdict
        return out


def _op_norms(C):
    n, T, a, _ = C.shape
    return K.op_norm(C.reshape(n * T, a, a)).reshape(n, T)


def fit_constants(F, split, N=DEFAULT_FIT_HORIZON, metric=None, settle=None):
    """Fit hyperbolicity constants from restricted-cocycle norms on ``split``'s points.

    ``lambda_hat`` is the worst tail rate ``(a_N / a_{N0})^{1/(N-N0)}`` with
    ``N0 = N // 2`` and ``a_n = |D f^n restricted|``; ``c_hat`` is then the
    smallest constant with ``a_n <= c lambda_hat^n`` for all sampled
    ``n <= N``. A rate of 1 or more, or a non-converged splitting, yields
    ``hyperbolic = False``. ``profile[n]`` is the largest sampled ``a_n``
    over both bundles.
    """
    if N < 2:
        raise ParameterError("fit horizon must be at least 2")
    metric = F.metric if metric is None else metric
    settle = max(int(split.iterations.max()), 10) + 5 if settle is None else settle
    N0 = N // 2
    k, r = split.dims
    best = {"s": (0.0, 0, ()), "u": (0.0, 0, ())}
    norms = {}
    X = split.points
    nc, npts = len(split.components), len(X)
    rows = np.repeat(np.array(split.components, dtype=np.int64), npts)
    for flavor, dim in (("s", k), ("u", r)):
        _, C = restricted_cocycle(F, rows, np.tile(X, (nc, 1)), dim, flavor, N, settle, metric)
        A = _op_norms(C).reshape(nc, npts, N + 1)
        for ci, i in enumerate(split.components):
            a = A[ci]
            norms[(flavor, i)] = a
            # a collapsed cocycle (coincident bundles) shows no contraction: rate 1
            live = a[:, N0] > 0.0
            rate = np.ones(len(a))
            rate[live] = (a[live, N] / a[live, N0]) ** (1.0 / (N - N0))
            p = int(np.argmax(rate))
            if rate[p] > best[flavor][0]:
                best[flavor] = (float(rate[p]), i, tuple(float(v) for v in split.points[p]))
    lam_s, lam_u = best["s"][0], best["u"][0]
    lam = max(lam_s, lam_u)
    powers = lam ** np.arange(N + 1)
    c = {"s": 1.0, "u": 1.0}
    for (flavor, _), a in norms.items():
        c[flavor] = max(c[flavor], float(np.max(a / powers)))
    worst = "s" if lam_s >= lam_u else "u"
    profile = np.max(np.stack([a.max(axis=0) for a in norms.values()]), axis=0)
    return HyperbolicityFit(
        lambda_hat=lam, c_hat=max(c.values()), lambda_stable=lam_s, lambda_unstable=lam_u,
        c_stable=c["s"], c_unstable=c["u"], horizon=N, worst_flavor=worst,
        worst_component=best[worst][1], worst_point=best[worst][2],
        hyperbolic=bool(lam < 1.0 and split.converged),
        splitting_converged=split.converged,
        profile=profile,
        rates={"stable": best["s"], "unstable": best["u"]},
    )


def bounded_growth_membership(F, p, v, N, c, metric=None):
    """True iff ``|D f^n v| <= c |v|`` for every ``1 <= n <= N``."""
    if N < 1:
        raise ParameterError("N must be at least 1")
    metric = F.metric if metric is None else metric
    v = np.asarray(v.array() if hasattr(v, "array") else v, dtype=float)
    i = p.component
    base = np.linalg.norm(metric.factor(i) @ v)
    X = p.array()[None]
    w = v.copy()
    for n in range(1, N + 1):
        f = F.map_at(i + n - 1)
        w = f.jacobian_batch(X)[0] @ w
        X = f.apply_batch(X)
        if np.linalg.norm(metric.factor(i + n) @ w) > c * base:
            return False
    return True


# --- angles and continuity ---------------------------------------------------------

@dataclass
class AngleReport:
    mu: dict
    mu_hat: float
    floor: float
    worst_component: int
    worst_point: tuple

    @property
    def spa(self):
        return self.mu_hat > self.floor

    def to_dict(self):
        return {"mu": {str(k): v for k, v in self.mu.items()}, "mu_hat": self.mu_hat,
                "floor": self.floor, "spa_at_resolution": self.spa,
                "worst_component": self.worst_component,
                "worst_point": list(self.worst_point)}


def angle_property(F, split, floor=ANGLE_FLOOR, metric=None):
    """``mu_i = 1 - max |cos angle(E^s, E^u)|`` per component and its infimum."""
    metric = F.metric if metric is None else metric
    mu = {}
    worst = (np.inf, 0, ())
    for c, i in enumerate(split.components):
        cos = max_abs_cos(split.stable[c], split.unstable[c], metric.factor(i))
        p = int(np.argmax(cos))
        mu[i] = float(1.0 - cos[p])
        if mu[i] < worst[0]:
            worst = (mu[i], i, tuple(float(v) for v in split.points[p]))
    return AngleReport(mu, float(worst[0]), floor, worst[1], worst[2])


def continuity_modulus(split):
    """Largest subspace distance between grid neighbours (either bundle)."""
    if split.grid is None:
        raise PreconditionError("continuity modulus needs a grid-based estimate")
    if not split.converged:
        raise PreconditionError(
            f"splitting not converged: {json.dumps(split.diagnostics(), sort_keys=True)}")
    g, d = split.grid, split.dim
    worst = 0.0
    for E in (split.stable, split.unstable):
        shaped = E.reshape((len(split.components),) + (g,) * d + E.shape[-2:])
        for a in range(d):
            nb = np.roll(shaped, -1, axis=1 + a)
            A = shaped.reshape((-1,) + E.shape[-2:])
            B = nb.reshape((-1,) + E.shape[-2:])
            worst = max(worst, float(K.subspace_distance(A, B).max()))
    return worst
