"""Non-stationary dynamical systems on flat tori.

A :class:`FamilySpec` stores maps ``f_i`` for ``i`` in ``[-W, W-1]`` and an
extension policy resolving every other integer index. Maps act on batches
of points (rows of an ``(n, d)`` array); scalar helpers wrap
:class:`~anosovfam.geometry.TorusPoint` for the public per-point API.
"""
import hashlib
import json

import numpy as np

from . import _kernels as K
from .errors import (
    DimensionMismatchError,
    InversionError,
    ParameterError,
    WindowRangeError,
)
from .geometry import (
    MetricSpec,
    TorusPoint,
    flat_distance,
    torus_grid,
    wrap,
    wrap_diff,
)

CAT = np.array([[2, 1], [1, 1]])

NEWTON_TOL = 1e-12
NEWTON_MAXITER = 50
DEFAULT_C1_GRID = 64


def _unimodular(A):
    A = np.asarray(A)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionMismatchError("matrix must be square")
    if not np.all(np.equal(np.mod(A, 1), 0)):
        raise ParameterError("toral maps need an integer matrix")
    A = A.astype(np.int64)
    det = round(np.linalg.det(A))
    if abs(det) != 1:
        raise ParameterError(f"matrix must be unimodular, |det| = {abs(det)}")
    return A


class MapSpec:
    """Diffeomorphism of the d-torus with exact value, Jacobian and inverse."""

    kind = "abstract"

    @property
    def dim(self):
        raise NotImplementedError

    def apply_batch(self, X):
        raise NotImplementedError

    def jacobian_batch(self, X):
        raise NotImplementedError

    def linear_part(self):
        """Integer matrix and translation whose affine map seeds Newton."""
        raise NotImplementedError

    def with_terms(self, terms):
        """Return ``self`` plus the trigonometric bump ``terms``."""
        raise NotImplementedError

    def to_dict(self):
        raise NotImplementedError

    def value_and_jacobian(self, X):
        return self.apply_batch(X), self.jacobian_batch(X)

    def affine_trig_form(self):
        """``(A, b, axes, freqs, amps, phases)`` if the map is affine plus bumps, else None."""
        return None

    def inverse_batch(self, Q):
        Q = np.atleast_2d(np.asarray(Q, dtype=float))
        A, b = self.linear_part()
        X = wrap((Q - b) @ np.linalg.inv(A).T)
        return newton_solve(self.value_and_jacobian, Q, X)

    def __eq__(self, other):
        return isinstance(other, MapSpec) and self.to_dict() == other.to_dict()

    def __hash__(self):
        return hash(json.dumps(self.to_dict(), sort_keys=True))

    def __repr__(self):
        return f"{type(self).__name__}({json.dumps(self.to_dict(), sort_keys=True)})"


def solve_batch(J, r):
    """Solve ``J[n] x[n] = r[n]``; closed form in the plane."""
    if J.shape[1] == 2:
        det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
        x0 = (J[:, 1, 1] * r[:, 0] - J[:, 0, 1] * r[:, 1]) / det
        x1 = (J[:, 0, 0] * r[:, 1] - J[:, 1, 0] * r[:, 0]) / det
        return np.stack([x0, x1], axis=1)
    return np.linalg.solve(J, r[:, :, None])[:, :, 0]


def inv_batch(J):
    if J.shape[1] == 2:
        det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
        out = np.empty_like(J)
        out[:, 0, 0] = J[:, 1, 1] / det
        out[:, 1, 1] = J[:, 0, 0] / det
        out[:, 0, 1] = -J[:, 0, 1] / det
        out[:, 1, 0] = -J[:, 1, 0] / det
        return out
    return np.linalg.inv(J)


def newton_solve(value_jac, Q, X):
    """Solve ``F(X) = Q`` mod 2 pi by damped Newton from the initial guess ``X``.

    ``value_jac(X)`` returns values and Jacobians for all rows; steps are
    halved per row whenever they would increase that row's residual.
    """
    val, J = value_jac(X)
    res = wrap_diff(val - Q)
    err = np.max(np.abs(res), axis=1)
    for _ in range(NEWTON_MAXITER):
        if err.max(initial=0.0) <= NEWTON_TOL:
            return X
        step = solve_batch(J, res)
        t = np.ones(len(X))
        for _ in range(12):
            cand = wrap(X - t[:, None] * step)
            v2, J2 = value_jac(cand)
            r2 = wrap_diff(v2 - Q)
            e2 = np.max(np.abs(r2), axis=1)
            bad = (e2 > err) & (err > NEWTON_TOL)
            if not np.any(bad) or np.all(t[bad] < 1e-3):
                break
            t[bad] *= 0.5
        X, res, err, J = cand, r2, e2, J2
    worst = float(err.max(initial=0.0))
    if worst > 10 * NEWTON_TOL:
        raise InversionError("Newton inversion did not converge", worst)
    return X


def _term_arrays(terms, d):
    axes = np.array([t["axis"] for t in terms], dtype=np.int64)
    freqs = np.array([t["freq"] for t in terms], dtype=float).reshape(len(terms), d)
    amps = np.array([t["amplitude"] for t in terms], dtype=float)
    phases = np.array([t.get("phase", 0.0) for t in terms], dtype=float)
    return axes, freqs, amps, phases


def _clean_terms(terms, d):
    out = []
    for t in terms:
        axis = int(t["axis"])
        freq = [int(v) for v in t["freq"]]
        if not 0 <= axis < d or len(freq) != d:
            raise DimensionMismatchError("bump term axis/frequency does not match dimension")
        if any(float(v) != int(v) for v in t["freq"]):
            raise ParameterError("bump frequencies must be integers")
        amp = float(t["amplitude"])
        if not np.isfinite(amp):
            raise ParameterError("bump amplitudes must be finite")
        out.append({"axis": axis, "freq": freq, "amplitude": amp,
                    "phase": float(t.get("phase", 0.0))})
    return tuple(out)


class AffineToral(MapSpec):
    """``x -> A x + b`` with ``A`` integer and ``|det A| = 1``."""

    kind = "affine"

    def __init__(self, matrix, translation=None):
        self.matrix = _unimodular(matrix)
        d = self.matrix.shape[0]
        self.translation = (
            np.zeros(d) if translation is None else np.asarray(translation, dtype=float).ravel()
        )
        if self.translation.size != d:
            raise DimensionMismatchError("translation length must equal dimension")
        self._Af = self.matrix.astype(float)
        self._Ainv = np.round(np.linalg.inv(self._Af))

    @property
    def dim(self):
        return self.matrix.shape[0]

    def apply_batch(self, X):
        return wrap(np.atleast_2d(X) @ self._Af.T + self.translation)

    def jacobian_batch(self, X):
        n = np.atleast_2d(X).shape[0]
        return np.broadcast_to(self._Af, (n, self.dim, self.dim)).copy()

    def inverse_batch(self, Q):
        return wrap((np.atleast_2d(Q) - self.translation) @ self._Ainv.T)

    def linear_part(self):
        return self._Af, self.translation

    def affine_trig_form(self):
        d = self.dim
        return (self._Af, self.translation, np.zeros(0, dtype=np.int64), np.zeros((0, d)),
                np.zeros(0), np.zeros(0))

    def with_terms(self, terms):
        return TrigPerturbed(self.matrix, terms, self.translation)

    def to_dict(self):
        return {"kind": self.kind, "matrix": self.matrix.tolist(),
                "translation": self.translation.tolist()}


class TrigPerturbed(MapSpec):
    """Affine toral map plus finitely many Fourier bumps.

    Each term ``{"axis": j, "freq": k, "amplitude": a, "phase": phi}`` adds
    ``a * sin(k . x + phi)`` to output coordinate ``j``; integer ``k`` keeps
    the map well defined on the torus.
    """

    kind = "trig"

    def __init__(self, matrix, terms=(), translation=None):
        self.base = AffineToral(matrix, translation)
        self.terms = _clean_terms(terms, self.base.dim)
        self._arrays = _term_arrays(self.terms, self.base.dim)

    @property
    def matrix(self):
        return self.base.matrix

    @property
    def translation(self):
        return self.base.translation

    @property
    def dim(self):
        return self.base.dim

    def _bump(self, X):
        return K.trig_sum(np.atleast_2d(X), *self._arrays)

    def apply_batch(self, X):
        X = np.atleast_2d(X)
        val, _ = self._bump(X)
        return wrap(X @ self.base._Af.T + self.base.translation + val)

    def jacobian_batch(self, X):
        _, jac = self._bump(X)
        return jac + self.base._Af

    def value_and_jacobian(self, X):
        X = np.atleast_2d(X)
        val, jac = self._bump(X)
        return wrap(X @ self.base._Af.T + self.base.translation + val), jac + self.base._Af

    def linear_part(self):
        return self.base.linear_part()

    def affine_trig_form(self):
        return (self.base._Af, self.base.translation) + tuple(self._arrays)

    def with_terms(self, terms):
        return TrigPerturbed(self.matrix, self.terms + _clean_terms(terms, self.dim),
                             self.translation)

    def to_dict(self):
        return {"kind": self.kind, "matrix": self.matrix.tolist(),
                "translation": self.translation.tolist(),
                "terms": [dict(t) for t in self.terms]}


class PerturbedCat(TrigPerturbed):
    """``(x, y) -> (2x + y - (1+a) sin x, x + y - (1+a) sin x)`` mod 2 pi."""

    kind = "perturbed_cat"

    def __init__(self, alpha):
        self.alpha = float(alpha)
        s = -(1.0 + self.alpha)
        super().__init__(CAT, [
            {"axis": 0, "freq": [1, 0], "amplitude": s, "phase": 0.0},
            {"axis": 1, "freq": [1, 0], "amplitude": s, "phase": 0.0},
        ])

    def with_terms(self, terms):
        return TrigPerturbed(CAT, self.terms + _clean_terms(terms, 2))

    def to_dict(self):
        return {"kind": self.kind, "alpha": self.alpha}


class Composite(MapSpec):
    """Composition applying ``parts[0]`` first."""

    kind = "composite"

    def __init__(self, parts):
        self.parts = tuple(parts)
        if not self.parts:
            raise ParameterError("composite needs at least one part")
        if len({p.dim for p in self.parts}) != 1:
            raise DimensionMismatchError("composite parts differ in dimension")

    @property
    def dim(self):
        return self.parts[0].dim

    def apply_batch(self, X):
        for f in self.parts:
            X = f.apply_batch(X)
        return X

    def jacobian_batch(self, X):
        return self.value_and_jacobian(X)[1]

    def value_and_jacobian(self, X):
        X = np.atleast_2d(X)
        J = np.broadcast_to(np.eye(self.dim), (len(X), self.dim, self.dim)).copy()
        for f in self.parts:
            X, Jf = f.value_and_jacobian(X)
            J = np.matmul(Jf, J)
        return X, J

    def inverse_batch(self, Q):
        for f in reversed(self.parts):
            Q = f.inverse_batch(Q)
        return Q

    def linear_part(self):
        A = np.eye(self.dim)
        b = np.zeros(self.dim)
        for f in self.parts:
            Af, bf = f.linear_part()
            A, b = Af @ A, Af @ b + bf
        return A, b

    def with_terms(self, terms):
        bump = TrigPerturbed(np.eye(self.dim, dtype=int), terms)
        return Composite(self.parts + (bump,))

    def to_dict(self):
        return {"kind": self.kind, "parts": [p.to_dict() for p in self.parts]}


def map_from_dict(data):
    kind = data.get("kind")
    if kind == "affine":
        return AffineToral(data["matrix"], data.get("translation"))
    if kind == "trig":
        return TrigPerturbed(data["matrix"], data.get("terms", ()), data.get("translation"))
    if kind == "perturbed_cat":
        return PerturbedCat(data["alpha"])
    if kind == "composite":
        return Composite([map_from_dict(p) for p in data["parts"]])
    raise ParameterError(f"unknown map kind {kind!r}")


class MapBank:
    """Evaluate a list of maps on points tagged with per-row map indices.

    When every map is affine plus Fourier bumps, all rows are evaluated in
    one vectorized pass with padded term tables; otherwise rows are grouped
    by map.
    """

    def __init__(self, maps):
        self.maps = tuple(maps)
        self.dim = self.maps[0].dim
        forms = [f.affine_trig_form() for f in self.maps]
        self.vectorized = all(fm is not None for fm in forms)
        if self.vectorized:
            d = self.dim
            T = max(1, max(len(fm[2]) for fm in forms))
            M = len(forms)
            self.A = np.stack([fm[0] for fm in forms]).astype(float)
            self.b = np.stack([fm[1] for fm in forms]).astype(float)
            self.Ainv = np.linalg.inv(self.A)
            self.axes = np.zeros((M, T), dtype=np.int64)
            self.freqs = np.zeros((M, T, d))
            self.amps = np.zeros((M, T))
            self.phases = np.zeros((M, T))
            for m, fm in enumerate(forms):
                t = len(fm[2])
                self.axes[m, :t], self.freqs[m, :t] = fm[2], fm[3]
                self.amps[m, :t], self.phases[m, :t] = fm[4], fm[5]

    def _grouped(self, idx, X, method):
        outs = None
        for m in np.unique(idx):
            sel = idx == m
            res = getattr(self.maps[m], method)(X[sel])
            res = res if isinstance(res, tuple) else (res,)
            if outs is None:
                outs = [np.empty((len(X),) + r.shape[1:]) for r in res]
            for o, r in zip(outs, res):
                o[sel] = r
        return outs

    def value_and_jacobian(self, idx, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        idx = np.broadcast_to(np.asarray(idx, dtype=np.int64), (len(X),))
        if not len(X):
            return X.copy(), np.zeros((0, self.dim, self.dim))
        if not self.vectorized:
            val, jac = self._grouped(idx, X, "value_and_jacobian")
            return val, jac
        val, jac = K.trig_sum_indexed(X, idx, self.axes, self.freqs, self.amps, self.phases)
        A = self.A[idx]
        val += np.einsum("nij,nj->ni", A, X) + self.b[idx]
        return wrap(val), jac + A

    def inverse(self, idx, Q):
        return self.inverse_and_jacobian(idx, Q)[0]

    def inverse_and_jacobian(self, idx, Q):
        """Preimages ``X`` of rows of ``Q`` under maps ``idx`` and the forward Jacobians at ``X``."""
        Q = np.atleast_2d(np.asarray(Q, dtype=float))
        idx = np.broadcast_to(np.asarray(idx, dtype=np.int64), (len(Q),))
        if not len(Q):
            return Q.copy(), np.zeros((0, self.dim, self.dim))
        if not self.vectorized:
            X = self._grouped(idx, Q, "inverse_batch")[0]
            return X, self.value_and_jacobian(idx, X)[1]
        X, J, err = K.bank_inverse(Q, idx, self.A, self.b, self.Ainv, self.axes, self.freqs,
                                   self.amps, self.phases, NEWTON_TOL, NEWTON_MAXITER)
        worst = float(err.max())
        if worst > 10 * NEWTON_TOL:
            raise InversionError("Newton inversion did not converge", worst)
        return wrap(X), J


# --- per-point API -----------------------------------------------------------

def _check_dim(f, p):
    if p.dim != f.dim:
        raise DimensionMismatchError(f"point has dimension {p.dim}, map acts on {f.dim}")


def apply(f, p):
    _check_dim(f, p)
    return TorusPoint(p.component + 1, f.apply_batch(p.array()[None])[0])


def jacobian(f, p):
    _check_dim(f, p)
    return f.jacobian_batch(p.array()[None])[0]


def inverse_apply(f, q):
    _check_dim(f, q)
    return TorusPoint(q.component - 1, f.inverse_batch(q.array()[None])[0])


# --- families ----------------------------------------------------------------

EXTENSIONS = ("periodic", "constant")


class FamilySpec:
    """Two-sided sequence ``(f_i)`` stored on the window ``[-W, W-1]``.

    ``extension="periodic"`` repeats the stored block with period ``2W``;
    ``"constant"`` reuses the first map for ``i < -W`` and the last for
    ``i >= W``.
    """

    def __init__(self, maps, window=None, extension="periodic", metric=None, name=None):
        maps = tuple(maps)
        if window is None:
            if len(maps) % 2:
                raise ParameterError("need an even number of maps (2W)")
            window = len(maps) // 2
        window = int(window)
        if window < 1:
            raise ParameterError("window must be at least 1")
        if len(maps) != 2 * window:
            raise ParameterError(f"window {window} needs {2 * window} maps, got {len(maps)}")
        if extension not in EXTENSIONS:
            raise ParameterError(f"extension must be one of {EXTENSIONS}")
        dims = {f.dim for f in maps}
        if len(dims) != 1:
            raise DimensionMismatchError("all maps must act on the same torus")
        self.maps = maps
        self.window = window
        self.extension = extension
        self.dim = dims.pop()
        self.metric = MetricSpec.euclidean(self.dim) if metric is None else metric
        if self.metric.dim != self.dim:
            raise DimensionMismatchError("metric dimension differs from map dimension")
        self.name = name
        self._bank = None

    @property
    def components(self):
        """Indices whose outgoing map lies in the stored window."""
        return list(range(-self.window, self.window))

    def slot(self, i):
        j = int(i) + self.window
        n = len(self.maps)
        if 0 <= j < n:
            return j
        if self.extension == "periodic":
            return j % n
        return 0 if j < 0 else n - 1

    def map_at(self, i):
        return self.maps[self.slot(i)]

    def slots(self, comps):
        """Vectorized :meth:`slot` over an integer array of indices."""
        j = np.asarray(comps, dtype=np.int64) + self.window
        n = len(self.maps)
        if self.extension == "periodic":
            return np.mod(j, n)
        return np.clip(j, 0, n - 1)

    @property
    def bank(self):
        if self._bank is None:
            self._bank = MapBank(self.maps)
        return self._bank

    def step(self, comps, X):
        """``(f_c(x), D_x f_c)`` for rows ``x`` lying in components ``c``."""
        return self.bank.value_and_jacobian(self.slots(comps), X)

    def unstep(self, comps, Y):
        """``(x, D_x f_{c-1})`` with ``x = f_{c-1}^{-1}(y)`` for rows ``y`` in components ``c``."""
        return self.bank.inverse_and_jacobian(self.slots(np.asarray(comps) - 1), Y)

    def replace_maps(self, maps, name=None):
        return FamilySpec(maps, self.window, self.extension, self.metric, name or self.name)

    def with_metric(self, metric):
        return FamilySpec(self.maps, self.window, self.extension, metric, self.name)

    def to_dict(self):
        return {
            "window": self.window,
            "extension": self.extension,
            "metric": self.metric.to_dict(),
            "maps": [f.to_dict() for f in self.maps],
        }

    @classmethod
    def from_dict(cls, data, name=None):
        return cls([map_from_dict(m) for m in data["maps"]], data["window"],
                   data["extension"], MetricSpec.from_dict(data["metric"]), name)

    def canonical_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def digest(self):
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    def __repr__(self):
        label = f"{self.name!r}, " if self.name else ""
        return f"FamilySpec({label}W={self.window}, {self.extension}, d={self.dim})"


def constant_family(f, window=1, metric=None, name=None):
    return FamilySpec([f] * (2 * window), window, "periodic", metric, name)


def cat_family(window=1, metric=None):
    return constant_family(AffineToral(CAT), window, metric, "cat")


def identity_family(d=2, window=1):
    return constant_family(AffineToral(np.eye(d, dtype=int)), window, name="identity")


def alternating_family(A=CAT, window=1):
    A = AffineToral(A)
    Ainv = AffineToral(np.round(np.linalg.inv(A.matrix)).astype(int))
    return FamilySpec([A, Ainv] * window, window, "periodic", name="alternating")


def random_perturbed_cat_family(window, alpha_range=(-1.0, -0.9), seed=0, extension="periodic"):
    rng = np.random.default_rng(seed)
    alphas = rng.uniform(alpha_range[0], alpha_range[1], size=2 * window)
    return FamilySpec([PerturbedCat(a) for a in alphas], window, extension,
                      name="random_perturbed_cat")


# --- composition law ---------------------------------------------------------

def step_forward(F, i, X):
    f = F.map_at(i)
    return f.apply_batch(X), f.jacobian_batch(X)


def step_backward(F, i, X):
    """Apply ``f_{i-1}^{-1}`` to points of ``M_i``; Jacobian is the inverse matrix."""
    f = F.map_at(i - 1)
    Y = f.inverse_batch(X)
    return Y, np.linalg.inv(f.jacobian_batch(Y))


def compose_batch(F, i, n, X):
    """``f_i^n`` on rows of ``X`` in ``M_i`` with its cocycle ``D f_i^n``."""
    X = np.array(np.atleast_2d(X), dtype=float)
    C = np.broadcast_to(np.eye(F.dim), (len(X), F.dim, F.dim)).copy()
    step = 1 if n > 0 else -1
    j = i
    for _ in range(abs(n)):
        if step > 0:
            X, J = step_forward(F, j, X)
        else:
            X, J = step_backward(F, j, X)
        C = np.matmul(J, C)
        j += step
    return X, C


def compose_n(F, i, n, p):
    """``(f_i^n(p), D_p f_i^n)``; ``p`` must lie in component ``i``."""
    if p.component != i:
        raise ParameterError(f"point lies in component {p.component}, not {i}")
    if p.dim != F.dim:
        raise DimensionMismatchError("point dimension differs from family dimension")
    X, C = compose_batch(F, i, int(n), p.array()[None])
    return TorusPoint(i + int(n), X[0]), C[0]


# --- C1 distance and neighborhoods --------------------------------------------

def c1_distance(f, g, m=None, grid=DEFAULT_C1_GRID, index=0):
    """Grid sup of ``max(displacement, ||Df - Dg||)`` for maps ``M_index -> M_index+1``."""
    if f.dim != g.dim:
        raise DimensionMismatchError("maps act on different tori")
    if grid < 2:
        raise ParameterError("C1 distance needs at least 2 grid points per axis")
    m = MetricSpec.euclidean(f.dim) if m is None else m
    X = torus_grid(f.dim, grid)
    R_src, R_dst = m.factor(index), m.factor(index + 1)
    disp = np.minimum(1.0, flat_distance(f.apply_batch(X), g.apply_batch(X), R_dst))
    dJ = f.jacobian_batch(X) - g.jacobian_batch(X)
    jac = K.op_norm(np.matmul(np.matmul(R_dst, dJ), np.linalg.inv(R_src)))
    return float(max(disp.max(), jac.max()))


class NeighborhoodSpec:
    """Per-index radii ``eps_i`` over the window, extended like the family."""

    def __init__(self, radii, window, extension="periodic"):
        r = np.asarray(radii, dtype=float).ravel()
        if len(r) != 2 * int(window):
            raise ParameterError("need one radius per window index")
        if np.any(~(r > 0.0)):
            raise ParameterError("radii must be positive")
        if extension not in EXTENSIONS:
            raise ParameterError(f"extension must be one of {EXTENSIONS}")
        self.radii = r
        self.window = int(window)
        self.extension = extension

    def radius(self, i):
        j = int(i) + self.window
        n = len(self.radii)
        if not 0 <= j < n:
            if self.extension == "periodic":
                j %= n
            else:
                j = 0 if j < 0 else n - 1
        return float(self.radii[j])

    def scaled(self, factor):
        return NeighborhoodSpec(self.radii * factor, self.window, self.extension)

    def to_dict(self):
        return {"radii": self.radii.tolist(), "window": self.window,
                "extension": self.extension}


def in_neighborhood(F, G, nb, grid=DEFAULT_C1_GRID):
    """Whether ``d_C1(f_i, g_i) < eps_i`` on every window index; slack ``eps_i - d_i``."""
    if F.window != G.window or F.extension != G.extension:
        raise WindowRangeError("families have mismatched windows or extensions")
    if nb.window != F.window:
        raise WindowRangeError("neighborhood window differs from family window")
    slack = {}
    for i in F.components:
        d = c1_distance(F.map_at(i), G.map_at(i), F.metric, grid, index=i)
        slack[i] = nb.radius(i) - d
    return all(s > 0.0 for s in slack.values()), slack
