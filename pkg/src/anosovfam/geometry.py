"""Flat-torus geometry: points, tangent vectors, constant metrics, frames.

Every component ``M_i`` is the flat torus R^d / (2 pi Z)^d carrying a
constant inner product ``G_i``. The exponential map is translation, so
chart computations reduce to linear algebra in the standard coordinates.
"""
from dataclasses import dataclass, field
import itertools

import numpy as np

from .errors import (
    DegenerateInputError,
    DegenerateSplittingError,
    DimensionMismatchError,
    ParameterError,
    WindowRangeError,
)

TWO_PI = 2.0 * np.pi

#: Chart-validity radius used on every component.
INJECTIVITY_RADIUS = np.pi / 2


def wrap(x):
    """Reduce coordinates into ``[0, 2 pi)``."""
    r = np.mod(x, TWO_PI)
    return np.where(r >= TWO_PI, 0.0, r)


def wrap_diff(x):
    """Reduce coordinate differences into ``[-pi, pi)``."""
    return np.mod(np.asarray(x) + np.pi, TWO_PI) - np.pi


def torus_grid(d, resolution):
    """Uniform grid of ``resolution**d`` points, row-major over axes."""
    if resolution < 1:
        raise ParameterError("grid resolution must be positive")
    axis = TWO_PI * np.arange(resolution) / resolution
    mesh = np.meshgrid(*([axis] * d), indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


@dataclass(frozen=True)
class TorusPoint:
    component: int
    coords: tuple

    def __post_init__(self):
        c = np.asarray(self.coords, dtype=float).ravel()
        if c.size < 2:
            raise DimensionMismatchError("torus dimension must be at least 2")
        object.__setattr__(self, "component", int(self.component))
        object.__setattr__(self, "coords", tuple(float(v) for v in wrap(c)))

    @property
    def dim(self):
        return len(self.coords)

    def array(self):
        return np.array(self.coords)


@dataclass(frozen=True)
class TangentVector:
    base: TorusPoint
    components: tuple

    def __post_init__(self):
        v = np.asarray(self.components, dtype=float).ravel()
        if v.size != self.base.dim:
            raise DimensionMismatchError(
                f"vector has {v.size} entries, base point has dimension {self.base.dim}"
            )
        if not np.all(np.isfinite(v)):
            raise DegenerateInputError("tangent vector has non-finite entries")
        object.__setattr__(self, "components", tuple(float(t) for t in v))

    def array(self):
        return np.array(self.components)


class MetricSpec:
    """Per-component constant Riemannian metrics ``G_i``.

    ``grams[j]`` is the metric of component ``start + j``. Indices outside
    the stored range resolve through ``extension``: ``"periodic"`` repeats
    the stored block, ``"constant"`` clamps to the nearest end, and
    ``None`` raises :class:`WindowRangeError`.
    """

    def __init__(self, grams, start=0, extension=None):
        g = np.array(grams, dtype=float)
        if g.ndim == 2:
            g = g[None]
        if g.ndim != 3 or g.shape[1] != g.shape[2]:
            raise DimensionMismatchError("grams must have shape (n, d, d)")
        if g.shape[1] < 2:
            raise DimensionMismatchError("torus dimension must be at least 2")
        if extension not in (None, "periodic", "constant"):
            raise ParameterError(f"unknown metric extension {extension!r}")
        if np.max(np.abs(g - np.swapaxes(g, 1, 2))) > 1e-12:
            raise ParameterError("metric matrices must be symmetric")
        if np.min(np.linalg.eigvalsh(g)) <= 0.0:
            raise ParameterError("metric matrices must be positive definite")
        self.grams = g
        self.start = int(start)
        self.extension = extension
        # ||v||_G = ||R v|| with R upper triangular, G = R^T R
        self._factors = np.swapaxes(np.linalg.cholesky(g), 1, 2).copy()
        self._inv_factors = np.linalg.inv(self._factors)

    @classmethod
    def uniform(cls, gram):
        return cls(np.asarray(gram, dtype=float)[None], start=0, extension="constant")

    @classmethod
    def euclidean(cls, d):
        return cls.uniform(np.eye(d))

    @property
    def dim(self):
        return self.grams.shape[1]

    @property
    def window(self):
        return self.start, self.start + len(self.grams) - 1

    def _slot(self, i):
        j = int(i) - self.start
        n = len(self.grams)
        if 0 <= j < n:
            return j
        if self.extension == "periodic":
            return j % n
        if self.extension == "constant":
            return 0 if j < 0 else n - 1
        lo, hi = self.window
        raise WindowRangeError(f"component {i} outside metric window [{lo}, {hi}]")

    def gram(self, i):
        return self.grams[self._slot(i)]

    def factor(self, i):
        """Upper-triangular ``R`` with ``G_i = R^T R``."""
        return self._factors[self._slot(i)]

    def inv_factor(self, i):
        return self._inv_factors[self._slot(i)]

    def slots(self, comps):
        """Vectorized slot lookup for an integer array of components."""
        j = np.asarray(comps, dtype=np.int64) - self.start
        n = len(self.grams)
        if self.extension == "periodic":
            return np.mod(j, n)
        if self.extension == "constant":
            return np.clip(j, 0, n - 1)
        if np.any((j < 0) | (j >= n)):
            lo, hi = self.window
            raise WindowRangeError(f"component outside metric window [{lo}, {hi}]")
        return j

    def factors(self, comps):
        """Per-row factors ``R`` for an array of components, shape ``(n, d, d)``."""
        if len(self.grams) == 1 and self.extension is not None:
            return np.broadcast_to(self._factors[0], (len(np.atleast_1d(comps)),) + self._factors.shape[1:])
        return self._factors[self.slots(comps)]

    def inv_factors(self, comps):
        if len(self.grams) == 1 and self.extension is not None:
            return np.broadcast_to(self._inv_factors[0], (len(np.atleast_1d(comps)),) + self._factors.shape[1:])
        return self._inv_factors[self.slots(comps)]

    def scaled(self, t2):
        return MetricSpec(self.grams * t2, self.start, self.extension)

    def to_dict(self):
        return {
            "grams": self.grams.tolist(),
            "start": self.start,
            "extension": self.extension,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(data["grams"], data.get("start", 0), data.get("extension"))

    def __eq__(self, other):
        return (
            isinstance(other, MetricSpec)
            and self.start == other.start
            and self.extension == other.extension
            and np.array_equal(self.grams, other.grams)
        )

    def __repr__(self):
        return f"MetricSpec(window={self.window}, extension={self.extension!r}, d={self.dim})"


def cache_key(i, X):
    """Hashable key for a (component or per-row components, points) pair."""
    i = np.asarray(i, dtype=np.int64)
    return (i.ndim, i.tobytes(), X.shape, X.tobytes())


def metric_norm(v, m):
    """``sqrt(v^T G_i v)`` for a tangent vector based in component ``i``."""
    R = m.factor(v.base.component)
    return float(np.linalg.norm(R @ v.array()))


def flat_distance(x, y, gram_factor):
    """Geodesic distance on the flat torus under ``G = R^T R``; batched over rows."""
    # reduce |y - x| and restore the sign so that swapping x and y negates diff exactly
    raw = np.atleast_2d(y) - np.atleast_2d(x)
    diff = np.sign(raw) * wrap_diff(np.abs(raw))
    d = diff.shape[1]
    best = np.full(diff.shape[0], np.inf)
    for shift in itertools.product((-1, 0, 1), repeat=d):
        cand = diff + TWO_PI * np.array(shift, dtype=float)
        best = np.minimum(best, np.linalg.norm(cand @ gram_factor.T, axis=1))
    return best


def total_distance(x, y, m):
    """Metric on the disjoint union: 1 across components, clamped flat distance within."""
    m.factor(x.component)
    m.factor(y.component)
    if x.component != y.component:
        return 1.0
    dist = flat_distance(x.array(), y.array(), m.factor(x.component))[0]
    return float(min(1.0, dist))


@dataclass(frozen=True)
class Frame:
    """Splitting-aligned frame at a point.

    ``basis`` holds the stable block in its first ``k`` columns and the
    unstable block after, each block orthonormal under the metric; ``tau``
    is its inverse, sending tangent vectors to frame coordinates.
    """

    base: TorusPoint
    basis: np.ndarray = field(repr=False)
    k: int

    @property
    def tau(self):
        return np.linalg.inv(self.basis)

    def coordinates(self, v):
        return np.linalg.solve(self.basis, np.asarray(v, dtype=float))

    def isometry_defect(self, gram, vectors):
        """Largest relative gap between ``||tau v||`` and ``||v||_G`` over rows of ``vectors``."""
        R = np.linalg.cholesky(gram).T
        ng = np.linalg.norm(vectors @ R.T, axis=1)
        nt = np.linalg.norm(np.linalg.solve(self.basis, vectors.T).T, axis=1)
        return float(np.max(np.abs(nt - ng) / ng))


def orthonormalize_blocks(E, R):
    """G-orthonormalize the columns of each ``E[n]`` (shape ``(n, d, r)``) in order.

    ``R`` is the metric factor; the result spans the same subspaces and its
    columns are the classical Gram-Schmidt output.
    """
    if E.shape[2] == 1:
        nrm = np.linalg.norm(np.matmul(R, E), axis=1, keepdims=True)
        return E / nrm
    Q, Rq = np.linalg.qr(np.matmul(R, E))
    signs = np.sign(np.diagonal(Rq, axis1=1, axis2=2))
    signs[signs == 0.0] = 1.0
    Q = Q * signs[:, None, :]
    return np.matmul(np.linalg.inv(R), Q)


def frame_matrices(Es, Eu, R, tol=1e-10):
    """Batched :func:`build_frame`: stack orthonormalized stable and unstable blocks."""
    B = np.concatenate([orthonormalize_blocks(Es, R), orthonormalize_blocks(Eu, R)], axis=2)
    sv = np.linalg.svd(np.matmul(R, B), compute_uv=False)
    if np.any(sv[:, -1] < tol * sv[:, 0]):
        raise DegenerateSplittingError("stable and unstable directions are linearly dependent")
    return B


def build_frame(p, stable_dirs, unstable_dirs, m):
    """Frame at ``p`` whose blocks span the given stable and unstable directions."""
    d = p.dim
    S = np.atleast_2d(np.asarray(stable_dirs, dtype=float))
    U = np.atleast_2d(np.asarray(unstable_dirs, dtype=float))
    if S.shape[1] != d or U.shape[1] != d or S.shape[0] + U.shape[0] != d:
        raise DimensionMismatchError("need k stable and d-k unstable vectors of dimension d")
    B = frame_matrices(S.T[None], U.T[None], m.factor(p.component))[0]
    return Frame(p, B, S.shape[0])


def angle_cos(u, w, m):
    """Cosine of the angle between ``u`` and ``w`` under the metric."""
    if u.base != w.base:
        raise DegenerateInputError("vectors must share a base point")
    G = m.gram(u.base.component)
    a, b = u.array(), w.array()
    na, nb = np.sqrt(a @ G @ a), np.sqrt(b @ G @ b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("angle undefined for a zero vector")
    return float(np.clip((a @ G @ b) / (na * nb), -1.0, 1.0))


def max_abs_cos(Es, Eu, R):
    """Cosine of the smallest principal angle between the two blocks, per point."""
    Qs = np.matmul(R, orthonormalize_blocks(Es, R))
    Qu = np.matmul(R, orthonormalize_blocks(Eu, R))
    C = np.matmul(np.swapaxes(Qs, 1, 2), Qu)
    return np.clip(np.linalg.norm(C, 2, axis=(1, 2)), 0.0, 1.0)
