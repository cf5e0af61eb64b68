"""Small dense linear-algebra kernels: thin QR, SVD, least squares, rank detection.

All kernels operate on real float64 2-D numpy arrays. They target the small
matrices that arise as block coefficients, favour accuracy of tiny singular
values (rank decisions depend on them), and fix sign conventions so repeated
runs are bit-identical.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

__all__ = [
    "NumericalError",
    "SvdResult",
    "LstsqResult",
    "RankResult",
    "qr_thin",
    "svd",
    "least_squares",
    "rank_reveal",
    "back_substitute",
    "right_divide_upper",
]

_EPS = float(np.finfo(np.float64).eps)

# Off-diagonal ratio below which a Jacobi column pair counts as orthogonal.
_JACOBI_TOL = 32.0 * _EPS


class NumericalError(RuntimeError):
    """Raised when an iterative kernel exhausts its budget without converging."""


class SvdResult(NamedTuple):
    left_vectors: np.ndarray       # n x r, orthonormal columns
    singular_values: np.ndarray    # length r, non-increasing, >= 0
    right_vectors: np.ndarray      # s x r, orthonormal columns


class LstsqResult(NamedTuple):
    y: np.ndarray
    rank: int
    rank_deficient: bool


class RankResult(NamedTuple):
    rank: int
    range_basis: np.ndarray
    null_directions: np.ndarray
    sigmas: np.ndarray


def _check_matrix(m, name="matrix"):
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got ndim={a.ndim}")
    if a.shape[0] < 1:
        raise ValueError(f"{name} needs at least one row, got shape {a.shape}")
    if a.size and not np.isfinite(a).all():
        raise ValueError(f"{name} contains NaN or Inf")
    return a


def qr_thin(m):
    """Thin Householder QR with a non-negative diagonal of R.

    Parameters
    ----------
    m : ndarray, shape (n, s) with n >= s >= 1

    Returns
    -------
    (q, r) : q has orthonormal columns (n x s), r is upper triangular (s x s)
        with real non-negative diagonal, and q @ r reconstructs m to roundoff.

    Rank deficiency is not an error; r simply carries (near-)zero diagonal
    entries and callers that need the rank use :func:`rank_reveal`.
    """
    a = _check_matrix(m).copy()
    n, s = a.shape
    if n < s:
        raise ValueError(f"qr_thin needs n >= s, got {n} x {s}")
    reflectors = []
    for k in range(s):
        x = a[k:, k]
        alpha = np.sqrt(x @ x)
        if alpha == 0.0:
            reflectors.append(None)
            continue
        v = x.copy()
        v[0] += alpha if v[0] >= 0.0 else -alpha
        vnorm = np.sqrt(v @ v)
        v /= vnorm
        a[k:, k:] -= np.outer(v, 2.0 * (v @ a[k:, k:]))
        reflectors.append(v)
    r = np.triu(a[:s, :].copy())
    q = np.zeros((n, s))
    q[np.arange(s), np.arange(s)] = 1.0
    for k in range(s - 1, -1, -1):
        v = reflectors[k]
        if v is not None:
            q[k:] -= np.outer(v, 2.0 * (v @ q[k:]))
    flip = np.diag(r) < 0.0
    if flip.any():
        r[flip] *= -1.0
        q[:, flip] *= -1.0
    return q, r


def _round_robin_rounds(s):
    """Fixed tournament schedule covering every column pair in s-1 (or s) rounds."""
    t = s if s % 2 == 0 else s + 1
    players = list(range(t))
    rounds = []
    for _ in range(t - 1):
        left = []
        right = []
        for i in range(t // 2):
            p, q = players[i], players[t - 1 - i]
            if p < s and q < s:
                left.append(min(p, q))
                right.append(max(p, q))
        rounds.append((np.array(left, dtype=np.intp), np.array(right, dtype=np.intp)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def svd(m, max_sweeps=60):
    """Thin singular value decomposition via one-sided Jacobi rotations.

    Returns an :class:`SvdResult` with singular values sorted non-increasing.
    Deterministic: fixed round-robin sweep order, stable ordering of ties, and
    the first nonzero entry of every left vector is made positive (the right
    vector flips with it).

    Raises :class:`NumericalError` if the rotation sweeps do not converge
    within ``max_sweeps``.
    """
    a = _check_matrix(m)
    n, s = a.shape
    if s == 0:
        return SvdResult(np.zeros((n, 0)), np.zeros(0), np.zeros((0, 0)))
    if n < s:
        flipped = svd(a.T, max_sweeps=max_sweeps)
        return SvdResult(flipped.right_vectors, flipped.singular_values,
                         flipped.left_vectors)
    g = a.copy()
    v = np.eye(s)
    rounds = _round_robin_rounds(s) if s > 1 else []
    zero_factor = max(n, s) * _EPS
    converged = False
    worst = 0.0
    for _ in range(max_sweeps):
        norms = np.sqrt(np.einsum("ij,ij->j", g, g))
        cut = zero_factor * (norms.max() if norms.size else 0.0)
        dead = norms <= cut
        if dead.any():
            g[:, dead] = 0.0
        rotated = 0
        worst = 0.0
        for ii, jj in rounds:
            gi = g[:, ii]
            gj = g[:, jj]
            aa = np.einsum("ij,ij->j", gi, gi)
            bb = np.einsum("ij,ij->j", gj, gj)
            cc = np.einsum("ij,ij->j", gi, gj)
            denom = np.sqrt(aa * bb)
            live = denom > 0.0
            ratio = np.zeros_like(cc)
            np.divide(np.abs(cc), denom, out=ratio, where=live)
            if ratio.size:
                worst = max(worst, float(ratio.max()))
            act = ratio > _JACOBI_TOL
            if not act.any():
                continue
            rotated += int(act.sum())
            isel = ii[act]
            jsel = jj[act]
            zeta = (bb[act] - aa[act]) / (2.0 * cc[act])
            t = np.sign(zeta) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            t = np.where(zeta == 0.0, 1.0, t)
            c = 1.0 / np.sqrt(1.0 + t * t)
            sn = c * t
            gi2 = g[:, isel]
            gj2 = g[:, jsel]
            g[:, isel] = c * gi2 - sn * gj2
            g[:, jsel] = sn * gi2 + c * gj2
            vi = v[:, isel]
            vj = v[:, jsel]
            v[:, isel] = c * vi - sn * vj
            v[:, jsel] = sn * vi + c * vj
        if rotated == 0:
            converged = True
            break
    if not converged:
        raise NumericalError(
            f"one-sided Jacobi SVD did not converge within {max_sweeps} sweeps "
            f"for a {n}x{s} matrix (worst off-diagonal ratio {worst:.3e})")
    norms = np.sqrt(np.einsum("ij,ij->j", g, g))
    order = np.argsort(-norms, kind="stable")
    sigmas = norms[order]
    u = np.zeros((n, s))
    vr = v[:, order].copy()
    nonzero = sigmas > 0.0
    if nonzero.any():
        cols = order[nonzero]
        u[:, nonzero] = g[:, cols] / sigmas[nonzero][None, :]
    missing = np.flatnonzero(~nonzero)
    if missing.size:
        _complete_orthonormal(u, missing)
    for j in range(s):
        nz = np.flatnonzero(u[:, j] != 0.0)
        if nz.size and u[nz[0], j] < 0.0:
            u[:, j] = -u[:, j]
            vr[:, j] = -vr[:, j]
    return SvdResult(u, sigmas, vr)


def _complete_orthonormal(u, missing):
    """Fill zero columns of u with deterministic orthonormal directions."""
    n = u.shape[0]
    occupied = np.einsum("ij,ij->i", u, u)
    cand = np.argsort(occupied, kind="stable")
    ci = 0
    for idx in missing:
        while True:
            if ci >= n:
                raise NumericalError("could not complete orthonormal basis")
            e = np.zeros(n)
            e[cand[ci]] = 1.0
            ci += 1
            w = e - u @ (u.T @ e)
            w -= u @ (u.T @ w)
            nrm = np.sqrt(w @ w)
            if nrm > 0.5:
                u[:, idx] = w / nrm
                break


def back_substitute(r, b):
    """Solve r @ x = b for upper-triangular r (columns of b independently)."""
    s = r.shape[0]
    x = np.zeros_like(b, dtype=np.float64)
    for i in range(s - 1, -1, -1):
        x[i] = (b[i] - r[i, i + 1:] @ x[i + 1:]) / r[i, i]
    return x


def right_divide_upper(b, r):
    """Solve x @ r = b for upper-triangular r, i.e. x = b @ inv(r)."""
    s = r.shape[0]
    x = np.zeros_like(b, dtype=np.float64)
    for j in range(s):
        x[:, j] = (b[:, j] - x[:, :j] @ r[:j, j]) / r[j, j]
    return x


def least_squares(h, g):
    """Columnwise minimizer of ||g - h @ y||_F via QR, SVD fallback on rank loss.

    ``h`` must have at least as many rows as columns. Well-conditioned systems
    go through the thin QR; a (nearly) singular triangular factor switches to
    the minimum-norm solution through the SVD, flagged in the result.

    Returns :class:`LstsqResult` ``(y, rank, rank_deficient)``.
    """
    hm = _check_matrix(h, "h")
    gm = _check_matrix(g, "g")
    q_rows, r_cols = hm.shape
    if q_rows < r_cols:
        raise ValueError(f"least_squares needs rows >= cols, got {q_rows} x {r_cols}")
    if gm.shape[0] != q_rows:
        raise ValueError(
            f"right-hand side has {gm.shape[0]} rows, expected {q_rows}")
    q, r = qr_thin(hm)
    diag = np.abs(np.diag(r))
    dmax = diag.max() if diag.size else 0.0
    tol = max(q_rows, r_cols) * _EPS * dmax
    if dmax > 0.0 and (diag > tol).all():
        return LstsqResult(back_substitute(r, q.T @ gm), r_cols, False)
    res = svd(hm)
    sig = res.singular_values
    s1 = sig[0] if sig.size else 0.0
    rank = 0 if s1 == 0.0 else int(np.count_nonzero(sig > max(q_rows, r_cols) * _EPS * s1))
    if rank == 0:
        return LstsqResult(np.zeros((r_cols, gm.shape[1])), 0, True)
    ur = res.left_vectors[:, :rank]
    vr = res.right_vectors[:, :rank]
    y = vr @ ((ur.T @ gm) / sig[:rank][:, None])
    return LstsqResult(y, rank, True)


def rank_reveal(m, tol):
    """Numerical rank of ``m``: count of singular values above ``tol * sigma_1``.

    Returns :class:`RankResult` with the leading left singular vectors as the
    range basis, the remaining ones as null-space directions, and the full
    singular value list. ``rank`` is 0 when ``m`` is exactly zero.
    """
    if tol < 0:
        raise ValueError("tol must be >= 0")
    res = svd(m)
    sig = res.singular_values
    s1 = sig[0] if sig.size else 0.0
    rank = 0 if s1 == 0.0 else int(np.count_nonzero(sig > tol * s1))
    return RankResult(rank,
                      res.left_vectors[:, :rank].copy(),
                      res.left_vectors[:, rank:].copy(),
                      sig.copy())
