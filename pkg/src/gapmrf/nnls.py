"""Row-wise non-negative least squares against a small complex dictionary.

Each row solves ``min_{u >= 0} 0.5 * ||u @ delta - m||^2`` with real ``u``.
Splitting real and imaginary parts turns this into a real NNLS whose normal
equations are ``G = real(delta @ delta^H)`` and ``b = real(m @ delta^H)``;
the active-set iteration of Lawson and Hanson runs on ``(G, b)`` directly.
"""

from __future__ import annotations

import numpy as np


# Coordinate-descent sweeps that seed the active set of multi-atom rows.


class NNLSConvergenceError(RuntimeError):
    pass


def _solve_passive(G, b, passive):
    idx = np.flatnonzero(passive)
    s = np.zeros_like(b)
    if idx.size:
        sub = G[np.ix_(idx, idx)]
        try:
            s[idx] = np.linalg.solve(sub, b[idx])
        except np.linalg.LinAlgError:
            s[idx] = np.linalg.lstsq(sub, b[idx], rcond=None)[0]
    return s


def nnls_gram(G, b, max_iter=None, tol=None):
    """Minimize ``0.5 x'Gx - b'x`` over ``x >= 0`` by an active-set method.

    Parameters
    ----------
    G : ndarray, shape (T, T)
        Symmetric positive semi-definite Gram matrix.
    b : ndarray, shape (T,)
    max_iter : int, optional
        Cap on outer iterations, default ``10 * T``.
    tol : float, optional
        Dual feasibility tolerance on ``w = b - Gx``; defaults to
        ``1e-11 * max|b|``.

    Returns
    -------
    x : ndarray, shape (T,)

    Raises
    ------
    NNLSConvergenceError
        If the iteration cap is reached before the KKT conditions hold.
    """
    G = np.asarray(G, dtype=float)
    b = np.asarray(b, dtype=float)
    T = b.size
    if max_iter is None:
        max_iter = 10 * T
    if tol is None:
        tol = 1e-11 * max(np.abs(b).max(initial=0.0), 1e-300)

    x = np.zeros(T)
    passive = np.zeros(T, dtype=bool)
    # indices whose entry came out non-positive through roundoff; they stay
    # out until the iterate changes
    rejected = np.zeros(T, dtype=bool)
    w = b.copy()
    for _ in range(max_iter):
        cand = np.where(passive | rejected, -np.inf, w)
        j = int(np.argmax(cand))
        if not cand[j] > tol:
            return x
        passive[j] = True
        s = _solve_passive(G, b, passive)
        if s[j] <= 0:
            passive[j] = False
            rejected[j] = True
            continue
        rejected[:] = False
        while np.any(s[passive] <= 0):
            neg = np.flatnonzero(passive & (s <= 0))
            ratios = x[neg] / (x[neg] - s[neg])
            k = int(np.argmin(ratios))
            x = x + ratios[k] * (s - x)
            x[neg[k]] = 0.0
            passive &= x > 0
            x[~passive] = 0.0
            s = _solve_passive(G, b, passive)
        x = s
        w = b - G @ x
    if np.max(np.where(passive | rejected, -np.inf, w), initial=-np.inf) > tol:
        raise NNLSConvergenceError(f"NNLS did not converge in {max_iter} iterations")
    return x


def _solve_grouped(G, B, passive):
    """Solve every row's passive subsystem.

    Rows sharing a pattern share one factorization; rows with a pattern of
    their own are solved together as identity-padded full systems.
    """
    n, T = B.shape
    S = np.zeros_like(B)
    if n == 0:
        return S
    packed = np.ascontiguousarray(np.packbits(passive, axis=1))
    keys = packed.view(np.dtype((np.void, packed.shape[1]))).ravel()
    _, inverse, counts = np.unique(keys, return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    order = np.argsort(inverse, kind="stable")
    starts = np.concatenate([[0], np.cumsum(counts)])
    single = []
    for k in range(counts.size):
        rows = order[starts[k]:starts[k + 1]]
        idx = np.flatnonzero(passive[rows[0]])
        if idx.size == 0:
            continue
        if rows.size == 1:
            single.append(rows[0])
            continue
        sub = G[np.ix_(idx, idx)]
        rhs = B[np.ix_(rows, idx)].T
        try:
            sol = np.linalg.solve(sub, rhs)
        except np.linalg.LinAlgError:
            sol = np.linalg.lstsq(sub, rhs, rcond=None)[0]
        S[np.ix_(rows, idx)] = sol.T
    if single:
        rows = np.asarray(single)
        P = passive[rows]
        A = np.where(P[:, :, None] & P[:, None, :], G, 0.0)
        diag = np.arange(T)
        A[:, diag, diag] = np.where(P, G[diag, diag], 1.0)
        rhs = np.where(P, B[rows], 0.0)
        try:
            sol = np.linalg.solve(A, rhs[..., None])[..., 0]
        except np.linalg.LinAlgError:
            sol = np.array([np.linalg.lstsq(a, b, rcond=None)[0] for a, b in zip(A, rhs)])
        # pivoting on near-singular blocks leaks roundoff into the padding
        S[rows] = np.where(P, sol, 0.0)
    return S


def _descend(G, B, X, P, todo, S):
    """Inner Lawson-Hanson loop: move rows ``todo`` from feasible ``X`` towards
    their passive-set solutions ``S``, dropping indices that hit zero."""
    while True:
        neg = P[todo] & (S <= 0)
        bad = neg.any(axis=1)
        X[todo[~bad]] = S[~bad]
        if not np.any(bad):
            return
        todo, S, neg = todo[bad], S[bad], neg[bad]
        x = X[todo]
        with np.errstate(divide="ignore", invalid="ignore"):
            ratios = np.where(neg, x / (x - S), np.inf)
        k = np.argmin(ratios, axis=1)
        alpha = ratios[np.arange(todo.size), k]
        x = x + alpha[:, None] * (S - x)
        x[np.arange(todo.size), k] = 0.0
        P[todo] &= x > 0
        x[~P[todo]] = 0.0
        X[todo] = x
        S = _solve_grouped(G, B[todo], P[todo])


def nnls_gram_batch(G, B, tol, max_iter=None):
    """Row-wise :func:`nnls_gram` for a stack of right-hand sides ``B`` (n, T).

    Rows are advanced together and rows with equal passive sets share one
    solve. Each row follows the active-set path it would follow alone.
    """
    G = np.asarray(G, dtype=float)
    B = np.atleast_2d(np.asarray(B, dtype=float))
    n, T = B.shape
    tol = np.broadcast_to(np.asarray(tol, dtype=float), (n,))
    if max_iter is None:
        max_iter = 10 * T
    X = np.zeros((n, T))
    P = np.zeros((n, T), dtype=bool)
    R = np.zeros((n, T), dtype=bool)
    live = np.arange(n)
    for _ in range(max_iter):
        W = B[live] - X[live] @ G
        cand = np.where(P[live] | R[live], -np.inf, W)
        j = np.argmax(cand, axis=1)
        grow = cand[np.arange(live.size), j] > tol[live]
        live, j = live[grow], j[grow]
        if live.size == 0:
            return X
        P[live, j] = True
        S = _solve_grouped(G, B[live], P[live])
        reject = S[np.arange(live.size), j] <= 0
        P[live[reject], j[reject]] = False
        R[live[reject], j[reject]] = True
        R[live[~reject]] = False
        _descend(G, B, X, P, live[~reject], S[~reject])
    W = B[live] - X[live] @ G
    if np.any(np.where(P[live] | R[live], -np.inf, W).max(axis=1, initial=-np.inf) > tol[live]):
        raise NNLSConvergenceError(f"NNLS did not converge in {max_iter} iterations")
    return X


def nnls_rows(Mbar, delta):
    """Solve the row-wise NNLS for every row of ``Mbar`` against ``delta``.

    Parameters
    ----------
    Mbar : ndarray, shape (N, L), complex
    delta : ndarray, shape (T, L), complex, or a Dictionary

    Returns
    -------
    U : ndarray, shape (N, T), non-negative
    """
    atoms = getattr(delta, "atoms", delta)
    atoms = np.atleast_2d(np.asarray(atoms))
    Mbar = np.atleast_2d(np.asarray(Mbar))
    G = (atoms @ atoms.conj().T).real
    B = (Mbar @ atoms.conj().T).real
    N, T = B.shape
    U = np.zeros((N, T))
    if T == 0 or N == 0:
        return U
    tol = 1e-11 * np.maximum(np.abs(B).max(axis=1), 1e-300)

    # Rows settled by a support of size <= 1 (the bulk of pure voxels).
    diag = np.diag(G)
    gain = np.where(B > 0, B * B / diag, -1.0)
    j = np.argmax(gain, axis=1)
    rows = np.arange(N)
    xj = np.where(B[rows, j] > 0, B[rows, j] / diag[j], 0.0)
    W = B - G[:, j].T * xj[:, None]
    W[rows, j] = -np.inf
    settled = np.all(W <= tol[:, None], axis=1)
    U[rows[settled], j[settled]] = xj[settled]

    rest = np.flatnonzero(~settled)
    if rest.size:
        U[rest] = nnls_gram_batch(G, B[rest], tol[rest])
    return U


def kkt_residual(u, delta, m):
    """Largest KKT violation of a row solution, relative to ||delta|| ||m||."""
    atoms = getattr(delta, "atoms", delta)
    g = ((u @ atoms - m) @ atoms.conj().T).real
    scale = max(np.linalg.norm(atoms) * np.linalg.norm(m), 1e-300)
    viol = np.where(u > 0, np.abs(g), np.maximum(-g, 0.0))
    return float(np.max(viol, initial=0.0) / scale)
