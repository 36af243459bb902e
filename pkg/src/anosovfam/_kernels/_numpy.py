"""Pure-numpy kernels. Reference path; always available."""
import numpy as np


def _fix_signs(U):
    # Largest-magnitude entry of each column made positive so output is
    # independent of the LAPACK sign convention.
    idx = np.argmax(np.abs(U), axis=1)
    pick = np.take_along_axis(U, idx[:, None, :], axis=1)
    return U * np.where(pick < 0.0, -1.0, 1.0)


def accumulate(P, J):
    """Right-multiply each ``P[n]`` by ``J[n]`` and rescale to unit max-entry."""
    Q = np.matmul(P, J)
    scale = np.max(np.abs(Q), axis=(1, 2))
    scale[scale == 0.0] = 1.0
    return Q / scale[:, None, None]


def top_left_subspace(P, r):
    U, _, _ = np.linalg.svd(P)
    return _fix_signs(np.ascontiguousarray(U[:, :, :r]))


def subspace_distance(U, V):
    """Sine of the largest principal angle between span(U[n]) and span(V[n])."""
    R = V - np.matmul(U, np.matmul(np.swapaxes(U, 1, 2), V))
    return np.linalg.norm(R, 2, axis=(1, 2))


def op_norm(M):
    if M.shape[1] == 1 or M.shape[2] == 1:
        return np.sqrt(np.sum(M * M, axis=(1, 2)))
    return np.linalg.norm(M, 2, axis=(1, 2))


def cone_margins(T, X, k, alpha, unstable):
    """Worst cone margin and worst norm ratio of ``T[n] @ x`` over samples ``x``.

    The margin of an image ``y`` is ``(alpha*|y_dom| - |y_sub|) / |y|`` where
    ``dom`` is the unstable block for unstable cones and the stable block
    otherwise; it is positive iff ``y`` lies in the open cone.
    """
    Y = np.einsum("nij,mj->nmi", T, X)
    ys = np.linalg.norm(Y[:, :, :k], axis=2)
    yu = np.linalg.norm(Y[:, :, k:], axis=2)
    ny = np.sqrt(ys * ys + yu * yu)
    nx = np.linalg.norm(X, axis=1)
    if unstable:
        m = (alpha * yu - ys) / ny
    else:
        m = (alpha * ys - yu) / ny
    return m.min(axis=1), (ny / nx[None, :]).min(axis=1)


def trig_sum(x, axes, freqs, amps, phases):
    """Value and Jacobian of ``sum_t amps[t] * sin(freqs[t].x + phases[t]) e_axes[t]``."""
    n, d = x.shape
    val = np.zeros((n, d))
    jac = np.zeros((n, d, d))
    if len(axes) == 0:
        return val, jac
    arg = x @ freqs.T + phases[None, :]
    s = np.sin(arg) * amps[None, :]
    c = np.cos(arg) * amps[None, :]
    for t in range(len(axes)):
        a = axes[t]
        val[:, a] += s[:, t]
        jac[:, a, :] += c[:, t, None] * freqs[t][None, :]
    return val, jac


def trig_sum_indexed(x, idx, axes, freqs, amps, phases):
    """Like :func:`trig_sum` with per-row term tables ``[idx[p]]`` (zero-padded)."""
    n, d = x.shape
    val = np.zeros((n, d))
    jac = np.zeros((n, d, d))
    if axes.shape[1] == 0:
        return val, jac
    F = freqs[idx]
    arg = np.einsum("ntd,nd->nt", F, x) + phases[idx]
    A = amps[idx]
    s = np.sin(arg) * A
    c = np.cos(arg) * A
    ax = axes[idx]
    rows = np.arange(n)
    for t in range(axes.shape[1]):
        np.add.at(val, (rows, ax[:, t]), s[:, t])
        np.add.at(jac, (rows, ax[:, t]), c[:, t, None] * F[:, t])
    return val, jac


def _bank_eval(X, idx, A, b, axes, freqs, amps, phases):
    val, jac = trig_sum_indexed(X, idx, axes, freqs, amps, phases)
    Am = A[idx]
    return val + np.einsum("nij,nj->ni", Am, X) + b[idx], jac + Am


def bank_inverse(Q, idx, A, b, Ainv, axes, freqs, amps, phases, tol, maxiter):
    """Per-row Newton inversion of ``x -> A x + b + bumps`` (mod 2 pi), seeded affinely.

    Returns ``(X, DF(X), residual)``; steps are halved per row while they
    would increase that row's residual.
    """
    two_pi = 2.0 * np.pi
    X = np.mod(np.einsum("nij,nj->ni", Ainv[idx], Q - b[idx]), two_pi)
    val, J = _bank_eval(X, idx, A, b, axes, freqs, amps, phases)
    r, e = resid_rows(val, Q, two_pi)
    for _ in range(maxiter):
        live = e > tol
        if not np.any(live):
            break
        step = np.linalg.solve(J[live], r[live][:, :, None])[:, :, 0]
        t = np.ones(len(step))
        rows = np.flatnonzero(live)
        for _ in range(12):
            cand = np.mod(X[rows] - t[:, None] * step, two_pi)
            v2, J2 = _bank_eval(cand, idx[rows], A, b, axes, freqs, amps, phases)
            r2, e2 = resid_rows(v2, Q[rows], two_pi)
            bad = (e2 > e[rows]) & (t >= 1e-3)
            if not np.any(bad):
                break
            t[bad] *= 0.5
        X[rows], J[rows], r[rows], e[rows] = cand, J2, r2, e2
    return X, J, e


def resid_rows(v, q, two_pi):
    r = np.mod(v - q + np.pi, two_pi) - np.pi
    return r, np.max(np.abs(r), axis=1)
