"""Dense real-matrix primitives: exact SVD, truncated randomized SVD, QR
orthonormalization, principal angles between subspaces, Stiefel tangent
projection, and Frobenius-inner-product cosine.

Everything here is pure-function numpy in 64-bit; callers that train in 32-bit
cast on the way in and out. The exact SVD first reduces tall inputs to square
via Householder QR, then runs a one-sided Jacobi iteration with a round-robin
ordering so that each sweep applies n/2 independent column rotations at a
time; no LAPACK routines are used, which keeps results bit-reproducible under
a fixed sweep order. The Jacobi working set is stored transposed (one row per
column of the input) so every gather/scatter touches contiguous memory.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .errors import NumericalFailure, UndefinedCosineError

_EPS = np.finfo(np.float64).eps


class SvdTriple(NamedTuple):
    """Economy SVD factors: u (m x r), s (length r, non-increasing), vt (r x n)."""

    u: np.ndarray
    s: np.ndarray
    vt: np.ndarray


def _as_matrix(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got ndim={a.ndim}")
    return a


def _round_robin_rounds(n: int):
    """Tournament pairings of {0..n-1}: each of the rounds holds disjoint pairs,
    and the union over all rounds covers every unordered pair exactly once."""
    k = n if n % 2 == 0 else n + 1  # odd n gets a bye seat at index n
    if k < 2:
        return []
    arm = np.arange(1, k // 2)
    rounds = []
    for r in range(k - 1):
        x = np.concatenate(([k - 1], (r + arm) % (k - 1)))
        y = np.concatenate(([r % (k - 1)], (r - arm) % (k - 1)))
        keep = (x < n) & (y < n)
        lo = np.minimum(x[keep], y[keep])
        hi = np.maximum(x[keep], y[keep])
        rounds.append((lo, hi))
    return rounds


def _complete_basis(u: np.ndarray, have: int, need: int) -> np.ndarray:
    """Fill columns have..have+need-1 of u with unit vectors orthogonal to the rest."""
    m = u.shape[0]
    filled = have
    for t in range(m):
        if filled >= have + need:
            break
        cand = np.zeros(m)
        cand[t] = 1.0
        if filled:
            cand -= u[:, :filled] @ (u[:, :filled].T @ cand)
            # second pass for numerical cleanliness
            cand -= u[:, :filled] @ (u[:, :filled].T @ cand)
        norm = np.linalg.norm(cand)
        if norm > 0.5:
            u[:, filled] = cand / norm
            filled += 1
    if filled < have + need:
        raise NumericalFailure("could not complete an orthonormal basis")
    return u


def _jacobi_pass(work, v, max_sweeps: int, tol: float):
    """One-sided Jacobi on the columns of a matrix stored transposed: row i of
    work is column i of the matrix being decomposed. Rotations that orthogonalize
    column pairs of the matrix are mirrored onto v (also stored transposed).
    Operates in place; returns (first-sweep worst off ratio, converged flag)."""
    n = work.shape[0]
    if n <= 1:
        return 0.0, True
    rounds = _round_robin_rounds(n)
    first = None
    for _ in range(max_sweeps):
        worst = 0.0
        for ii, jj in rounds:
            ci = work[ii]
            cj = work[jj]
            aii = np.einsum("ij,ij->i", ci, ci)
            ajj = np.einsum("ij,ij->i", cj, cj)
            aij = np.einsum("ij,ij->i", ci, cj)
            denom = np.sqrt(aii * ajj)
            ratio = np.divide(np.abs(aij), denom, out=np.zeros_like(aij), where=denom > 0)
            worst = max(worst, float(ratio.max(initial=0.0)))
            hit = ratio > tol
            if not hit.any():
                continue
            if not hit.all():
                ii, jj, ci, cj = ii[hit], jj[hit], ci[hit], cj[hit]
                aii, ajj, aij = aii[hit], ajj[hit], aij[hit]
            tau = (ajj - aii) / (2.0 * aij)
            t = np.sign(tau) / (np.abs(tau) + np.sqrt(1.0 + tau * tau))
            t[tau == 0] = 1.0  # sign(0) = 0 would stall an exact 45-degree rotation
            c = (1.0 / np.sqrt(1.0 + t * t))[:, None]
            s = c * t[:, None]
            work[ii] = c * ci - s * cj
            work[jj] = s * ci + c * cj
            vi, vj = v[ii], v[jj]
            v[ii] = c * vi - s * vj
            v[jj] = s * vi + c * vj
        if first is None:
            first = worst
        if worst <= tol:
            return first, True
    return first, False


def _jacobi_orthogonalize(work, v, max_sweeps: int, tol: float) -> None:
    """Orthogonalize all columns (rows of the transposed storage) in place."""
    _, ok = _jacobi_pass(work, v, max_sweeps, tol)
    if not ok:
        raise NumericalFailure(f"one-sided Jacobi did not converge in {max_sweeps} sweeps")


def svd_exact(m, max_sweeps: int = 60, tol: float = 1e-14) -> SvdTriple:
    """Full-precision economy SVD: Householder QR reduction to square, then
    one-sided Jacobi on the triangular factor.

    Reconstruction u @ diag(s) @ vt matches the input to ~1e-10 relative
    Frobenius error for well-scaled inputs; factors are orthonormal to the
    same tolerance. Raises NumericalFailure if the sweep cap is hit.
    """
    a = _as_matrix(m)
    if not np.all(np.isfinite(a)):
        raise ValueError("svd_exact requires finite entries")
    if a.shape[0] < a.shape[1]:
        t = svd_exact(a.T, max_sweeps=max_sweeps, tol=tol)
        return SvdTriple(t.vt.T, t.s, t.u.T)

    rows, cols = a.shape
    if rows > cols and cols > 0:
        q, core = _householder_qr(a)
    else:
        q, core = None, a

    work = np.ascontiguousarray(core.T)
    v = np.eye(cols)
    _jacobi_orthogonalize(work, v, max_sweeps, tol)

    norms = np.sqrt(np.einsum("ij,ij->i", work, work))
    order = np.argsort(-norms, kind="stable")
    s = norms[order]
    u = np.ascontiguousarray(work[order].T)
    vt = v[order]
    smax = s[0] if cols else 0.0
    cut = smax * 1e-13
    nonzero = int(np.sum(s > cut))
    if nonzero:
        u[:, :nonzero] /= s[:nonzero]
    if nonzero < cols:
        s[nonzero:] = 0.0
        u[:, nonzero:] = 0.0
        u = _complete_basis(u, nonzero, cols - nonzero)
    if q is not None:
        u = q @ u
    return SvdTriple(u, s, vt)


def _householder_qr(a: np.ndarray):
    """Economy Householder QR of a rows >= cols matrix: Q (rows x cols) with
    orthonormal columns regardless of rank, and the full upper-triangular R."""
    rows, cols = a.shape
    r = a.copy()
    vs = []
    for j in range(cols):
        x = r[j:, j]
        normx = np.linalg.norm(x)
        if normx == 0.0:
            vs.append(None)
            continue
        alpha = -normx if x[0] >= 0 else normx
        vref = x.copy()
        vref[0] -= alpha
        vnorm = np.linalg.norm(vref)
        if vnorm == 0.0:
            vs.append(None)
            continue
        vref /= vnorm
        r[j:, j:] -= 2.0 * np.outer(vref, vref @ r[j:, j:])
        vs.append(vref)
    q = np.zeros((rows, cols))
    q[:cols, :cols] = np.eye(cols)
    for j in reversed(range(cols)):
        vref = vs[j]
        if vref is not None:
            q[j:, :] -= 2.0 * np.outer(vref, vref @ q[j:, :])
    return q, np.triu(r[:cols, :])


def qr_orthonormal(a, check_rank: bool = False):
    """Householder QR; returns the economy Q (m x k) and the diagonal of R.

    Q is orthonormal regardless of the rank of the input. With check_rank,
    a numerically rank-deficient input raises ValueError.
    """
    a = _as_matrix(a)
    rows, cols = a.shape
    if rows < cols:
        raise ValueError(f"qr_orthonormal needs rows >= cols, got {a.shape}")
    q, r = _householder_qr(a)
    diag = np.diag(r).copy()
    if check_rank:
        scale = np.abs(diag).max(initial=0.0)
        if scale == 0.0 or np.any(np.abs(diag) <= scale * rows * _EPS * 10):
            raise ValueError("input matrix is numerically rank-deficient")
    return q, diag


def svd_truncated_randomized(m, r: int, seed: int, oversample: int = 8,
                             power_iters: int = 2) -> SvdTriple:
    """Rank-r randomized SVD: Gaussian sketch, QR re-orthonormalized power
    iterations, then an exact SVD of the projected matrix.

    Bit-identical output for identical (matrix, r, seed).
    """
    a = _as_matrix(m)
    rows, cols = a.shape
    if not 1 <= r <= min(rows, cols):
        raise ValueError(f"rank {r} out of range for shape {a.shape}")
    rng = np.random.Generator(np.random.PCG64(seed))
    sketch = min(r + oversample, min(rows, cols))
    omega = rng.standard_normal((cols, sketch))
    q, _ = qr_orthonormal(a @ omega)
    for _ in range(power_iters):
        z, _ = qr_orthonormal(a.T @ q)
        q, _ = qr_orthonormal(a @ z)
    b = q.T @ a
    tb = svd_exact(b)
    u = q @ tb.u
    return SvdTriple(u[:, :r], tb.s[:r], tb.vt[:r, :])


def principal_angles(a, b) -> np.ndarray:
    """Principal angles (degrees, non-decreasing) between col spaces of a and b.

    Both matrices must share the row count and have full column rank; angles
    are arccos of the singular values of Qa^T Qb, clamped to [-1, 1].
    """
    a = _as_matrix(a)
    b = _as_matrix(b)
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"row counts differ: {a.shape[0]} vs {b.shape[0]}")
    qa, _ = qr_orthonormal(a, check_rank=True)
    qb, _ = qr_orthonormal(b, check_rank=True)
    sv = svd_exact(qa.T @ qb).s
    return np.degrees(np.arccos(np.clip(sv, -1.0, 1.0)))


def tangent_project(u, g) -> np.ndarray:
    """Project g onto the tangent space at u of the orthonormal-column manifold:
    (I - u u^T) g, evaluated without forming the m x m projector."""
    u = _as_matrix(u)
    g = _as_matrix(g)
    if u.shape != g.shape:
        raise ValueError(f"shape mismatch: {u.shape} vs {g.shape}")
    return g - u @ (u.T @ g)


def frobenius_cosine(a, b) -> float:
    """Frobenius-inner-product cosine between same-shaped matrices, in [-1, 1]."""
    a = _as_matrix(a)
    b = _as_matrix(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise UndefinedCosineError("cosine undefined for a zero-norm matrix")
    return float(np.clip(np.sum(a * b) / (na * nb), -1.0, 1.0))
