"""numba-compiled kernels, same contracts as :mod:`._numpy`.

2x2 cases use closed forms; larger dimensions fall back to LAPACK through
numba's ``np.linalg`` support.
"""
import numpy as np
from numba import njit

_OPTS = dict(cache=True, nogil=True)


@njit(**_OPTS)
def _fix_signs_inplace(U):
    n, d, r = U.shape
    for p in range(n):
        for j in range(r):
            best = 0.0
            for i in range(d):
                if abs(U[p, i, j]) > abs(best):
                    best = U[p, i, j]
            if best < 0.0:
                for i in range(d):
                    U[p, i, j] = -U[p, i, j]


@njit(**_OPTS)
def accumulate(P, J):
    n, d, _ = P.shape
    Q = np.empty_like(P)
    for p in range(n):
        scale = 0.0
        for i in range(d):
            for j in range(d):
                acc = 0.0
                for l in range(d):
                    acc += P[p, i, l] * J[p, l, j]
                Q[p, i, j] = acc
                if abs(acc) > scale:
                    scale = abs(acc)
        if scale == 0.0:
            scale = 1.0
        for i in range(d):
            for j in range(d):
                Q[p, i, j] /= scale
    return Q


@njit(**_OPTS)
def top_left_subspace(P, r):
    n, d, _ = P.shape
    U = np.empty((n, d, r))
    if d == 2 and r == 1:
        for p in range(n):
            a = P[p, 0, 0] * P[p, 0, 0] + P[p, 0, 1] * P[p, 0, 1]
            c = P[p, 1, 0] * P[p, 1, 0] + P[p, 1, 1] * P[p, 1, 1]
            b = P[p, 0, 0] * P[p, 1, 0] + P[p, 0, 1] * P[p, 1, 1]
            th = 0.5 * np.arctan2(2.0 * b, a - c)
            U[p, 0, 0] = np.cos(th)
            U[p, 1, 0] = np.sin(th)
    else:
        for p in range(n):
            u, _, _ = np.linalg.svd(np.ascontiguousarray(P[p]))
            U[p] = u[:, :r]
    _fix_signs_inplace(U)
    return U


@njit(**_OPTS)
def _norm2x2(a, b, c, e):
    # spectral norm of [[a, b], [c, e]]
    s1 = a * a + b * b + c * c + e * e
    det = a * e - b * c
    disc = s1 * s1 - 4.0 * det * det
    if disc < 0.0:
        disc = 0.0
    return np.sqrt(0.5 * (s1 + np.sqrt(disc)))


@njit(**_OPTS)
def op_norm(M):
    n, a, b = M.shape
    out = np.empty(n)
    if a == 1 or b == 1:
        for p in range(n):
            acc = 0.0
            for i in range(a):
                for j in range(b):
                    acc += M[p, i, j] * M[p, i, j]
            out[p] = np.sqrt(acc)
    elif a == 2 and b == 2:
        for p in range(n):
            out[p] = _norm2x2(M[p, 0, 0], M[p, 0, 1], M[p, 1, 0], M[p, 1, 1])
    else:
        for p in range(n):
            _, s, _ = np.linalg.svd(np.ascontiguousarray(M[p]))
            out[p] = s[0]
    return out


@njit(**_OPTS)
def subspace_distance(U, V):
    n, d, r = U.shape
    out = np.empty(n)
    if d == 2 and r == 1:
        for p in range(n):
            out[p] = abs(U[p, 0, 0] * V[p, 1, 0] - U[p, 1, 0] * V[p, 0, 0])
        return out
    R = np.empty((n, d, r))
    for p in range(n):
        for j in range(r):
            for i in range(d):
                acc = V[p, i, j]
                for l in range(r):
                    dot = 0.0
                    for m in range(d):
                        dot += U[p, m, l] * V[p, m, j]
                    acc -= U[p, i, l] * dot
                R[p, i, j] = acc
    return op_norm(R)


@njit(**_OPTS)
def cone_margins(T, X, k, alpha, unstable):
    n, d, _ = T.shape
    m = X.shape[0]
    margins = np.empty(n)
    ratios = np.empty(n)
    y = np.empty(d)
    for p in range(n):
        worst_m = np.inf
        worst_r = np.inf
        for s in range(m):
            nx = 0.0
            for i in range(d):
                acc = 0.0
                for j in range(d):
                    acc += T[p, i, j] * X[s, j]
                y[i] = acc
                nx += X[s, i] * X[s, i]
            ys = 0.0
            for i in range(k):
                ys += y[i] * y[i]
            yu = 0.0
            for i in range(k, d):
                yu += y[i] * y[i]
            ny = np.sqrt(ys + yu)
            ys = np.sqrt(ys)
            yu = np.sqrt(yu)
            if unstable:
                mm = (alpha * yu - ys) / ny
            else:
                mm = (alpha * ys - yu) / ny
            rr = ny / np.sqrt(nx)
            if mm < worst_m:
                worst_m = mm
            if rr < worst_r:
                worst_r = rr
        margins[p] = worst_m
        ratios[p] = worst_r
    return margins, ratios


@njit(**_OPTS)
def trig_sum(x, axes, freqs, amps, phases):
    n, d = x.shape
    nt = axes.shape[0]
    val = np.zeros((n, d))
    jac = np.zeros((n, d, d))
    for p in range(n):
        for t in range(nt):
            arg = phases[t]
            for j in range(d):
                arg += freqs[t, j] * x[p, j]
            a = axes[t]
            val[p, a] += amps[t] * np.sin(arg)
            c = amps[t] * np.cos(arg)
            for j in range(d):
                jac[p, a, j] += c * freqs[t, j]
    return val, jac


@njit(**_OPTS)
def trig_sum_indexed(x, idx, axes, freqs, amps, phases):
    n, d = x.shape
    nt = axes.shape[1]
    val = np.zeros((n, d))
    jac = np.zeros((n, d, d))
    for p in range(n):
        m = idx[p]
        for t in range(nt):
            amp = amps[m, t]
            if amp == 0.0:
                continue
            arg = phases[m, t]
            for j in range(d):
                arg += freqs[m, t, j] * x[p, j]
            a = axes[m, t]
            val[p, a] += amp * np.sin(arg)
            c = amp * np.cos(arg)
            for j in range(d):
                jac[p, a, j] += c * freqs[m, t, j]
    return val, jac


@njit(**_OPTS)
def _bank_eval(x, m, A, b, axes, freqs, amps, phases, val, jac):
    d = x.shape[0]
    for a in range(d):
        s = b[m, a]
        for j in range(d):
            s += A[m, a, j] * x[j]
            jac[a, j] = A[m, a, j]
        val[a] = s
    for t in range(axes.shape[1]):
        amp = amps[m, t]
        if amp == 0.0:
            continue
        arg = phases[m, t]
        for j in range(d):
            arg += freqs[m, t, j] * x[j]
        a = axes[m, t]
        val[a] += amp * np.sin(arg)
        c = amp * np.cos(arg)
        for j in range(d):
            jac[a, j] += c * freqs[m, t, j]


@njit(**_OPTS)
def _residual(val, q, r):
    two_pi = 2.0 * np.pi
    e = 0.0
    for a in range(val.shape[0]):
        z = (val[a] - q[a] + np.pi) % two_pi - np.pi
        r[a] = z
        if abs(z) > e:
            e = abs(z)
    return e


@njit(**_OPTS)
def bank_inverse(Q, idx, A, b, Ainv, axes, freqs, amps, phases, tol, maxiter):
    n, d = Q.shape
    two_pi = 2.0 * np.pi
    X = np.empty((n, d))
    J = np.empty((n, d, d))
    err = np.empty(n)
    val = np.empty(d)
    r = np.empty(d)
    cand = np.empty(d)
    jac = np.empty((d, d))
    jac2 = np.empty((d, d))
    x = np.empty(d)
    step = np.empty(d)
    for p in range(n):
        m = idx[p]
        for a in range(d):
            s = 0.0
            for j in range(d):
                s += Ainv[m, a, j] * (Q[p, j] - b[m, j])
            x[a] = s % two_pi
        _bank_eval(x, m, A, b, axes, freqs, amps, phases, val, jac)
        e = _residual(val, Q[p], r)
        for _ in range(maxiter):
            if e <= tol:
                break
            if d == 2:
                det = jac[0, 0] * jac[1, 1] - jac[0, 1] * jac[1, 0]
                step[0] = (jac[1, 1] * r[0] - jac[0, 1] * r[1]) / det
                step[1] = (jac[0, 0] * r[1] - jac[1, 0] * r[0]) / det
            else:
                step[:] = np.linalg.solve(jac, r.copy())
            t = 1.0
            e2 = e
            for _ in range(12):
                for a in range(d):
                    cand[a] = (x[a] - t * step[a]) % two_pi
                _bank_eval(cand, m, A, b, axes, freqs, amps, phases, val, jac2)
                e2 = _residual(val, Q[p], r)
                if e2 <= e or t < 1e-3:
                    break
                t *= 0.5
            for a in range(d):
                x[a] = cand[a]
                for j in range(d):
                    jac[a, j] = jac2[a, j]
            e = e2
        for a in range(d):
            X[p, a] = x[a]
            for j in range(d):
                J[p, a, j] = jac[a, j]
        err[p] = e
    return X, J, err
