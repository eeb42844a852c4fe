"""Small dense kernels: nonnegative least squares and halfspace projection.

Everything here operates on tiny problems (dimensions in the single digits
to low tens), so the solvers favour exactness and determinism over
scalability: ties are broken by lowest index, and a Bland-style rule kicks
in after ``3 * k`` iterations to rule out cycling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import Infeasible, IterationCap


@dataclass(frozen=True)
class NnlsSolution:
    """Result of a nonnegative least-squares solve.

    ``x`` is clamped so that every entry is >= 0 exactly.  ``converged``
    reports whether the KKT conditions were met within the pass budget.
    """

    x: np.ndarray
    residual_norm: float
    iterations: int
    converged: bool


def _lstsq(A, b):
    sol, _, _, _ = np.linalg.lstsq(A, b, rcond=None)
    return sol


def nnls(A, b, kkt_tol=None, max_passes=None) -> NnlsSolution:
    """Minimize ``||A x - b||`` subject to ``x >= 0`` by active-set passes.

    Parameters
    ----------
    A : (m, k) array_like
    b : (m,) array_like
    kkt_tol : float, optional
        Absolute tolerance on the KKT conditions; defaults to
        ``1e-11 * (1 + max|A^T b|)``.
    max_passes : int, optional
        Outer pass budget, default ``10 * k``.

    Raises
    ------
    IterationCap
        If the pass budget is exhausted before the KKT conditions hold.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    if A.ndim != 2:
        raise ValueError("A must be a matrix")
    m, k = A.shape
    if k < 1:
        raise ValueError("need at least one column")
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(b))):
        raise ValueError("nonfinite entries in nnls data")
    if max_passes is None:
        max_passes = 10 * k
    atb = A.T @ b
    if kkt_tol is None:
        kkt_tol = 1e-11 * (1.0 + float(np.max(np.abs(atb), initial=0.0)))

    x = np.zeros(k)
    passive = np.zeros(k, dtype=bool)
    passes = 0
    inner_total = 0
    bland_after = 3 * k

    while True:
        w = atb - A.T @ (A @ x)  # negative gradient of 0.5*||Ax-b||^2
        candidates = np.flatnonzero(~passive & (w > kkt_tol))
        if candidates.size == 0:
            break
        if passes >= max_passes:
            raise IterationCap(
                f"nnls exceeded {max_passes} passes (k={k})"
            )
        passes += 1
        if inner_total > bland_after:
            enter = int(candidates[0])  # Bland: lowest admissible index
        else:
            wc = w[candidates]
            enter = int(candidates[np.flatnonzero(wc == wc.max())[0]])
        passive[enter] = True

        while True:
            idx = np.flatnonzero(passive)
            z = np.zeros(k)
            z[idx] = _lstsq(A[:, idx], b)
            neg = idx[z[idx] <= 0.0]
            if neg.size == 0:
                x = z
                break
            inner_total += 1
            # Step toward z until the first passive entry hits zero.
            denom = x[neg] - z[neg]
            safe = denom > 0.0
            if not np.any(safe):
                passive[neg] = False
                continue
            alpha = float(np.min(x[neg][safe] / denom[safe]))
            x = x + alpha * (z - x)
            drop = idx[x[idx] <= kkt_tol]
            x[drop] = 0.0
            passive[drop] = False
            if inner_total > max_passes * max(k, 2):
                raise IterationCap("nnls inner loop exceeded its budget")

    x = np.maximum(x, 0.0)
    residual = b - A @ x
    return NnlsSolution(
        x=x,
        residual_norm=float(np.linalg.norm(residual)),
        iterations=passes,
        converged=True,
    )


def project_halfspaces(y, rows, offsets, feas_tol=1e-9, max_iter=None):
    """Project ``y`` onto ``{x : rows @ x <= offsets}``.

    Returns ``(x, multipliers)`` where the multipliers are the KKT
    multipliers of the active rows embedded into a full length-``s``
    nonnegative vector, so that ``x - y + rows.T @ multipliers == 0``.

    Primal active-set iteration: equality-project onto the working set,
    drop rows with negative multipliers, add the most violated row.
    Ties are broken by lowest index; a Bland-style lowest-index rule
    replaces the most-negative/most-violated choices after ``3 * s``
    iterations.

    Raises
    ------
    IterationCap
        If the working-set loop exceeds ``10 * s`` iterations.
    Infeasible
        If the working-set equalities become inconsistent, which cannot
        happen for a nonempty feasible region.
    """
    y = np.asarray(y, dtype=float)
    rows = np.asarray(rows, dtype=float)
    offsets = np.asarray(offsets, dtype=float)
    s = rows.shape[0]
    if max_iter is None:
        max_iter = max(10 * s, 20)
    bland_after = 3 * s

    resid0 = rows @ y - offsets
    if np.all(resid0 <= feas_tol):
        return y.copy(), np.zeros(s)

    work: list[int] = []
    x = y.copy()
    lam = np.zeros(0)
    for it in range(max_iter + 1):
        if work:
            Aw = rows[work]
            # x = y - Aw^T lam with Aw x = c_w  =>  (Aw Aw^T) lam = Aw y - c_w
            gram = Aw @ Aw.T
            rhs = Aw @ y - offsets[work]
            lam = _lstsq(gram, rhs)
            x = y - Aw.T @ lam
            if np.linalg.norm(Aw @ x - offsets[work]) > max(
                1e-7, 1e-7 * np.linalg.norm(offsets[work])
            ):
                raise Infeasible("working-set equalities are inconsistent")
            neg = np.flatnonzero(lam < -feas_tol)
            if neg.size:
                if it > bland_after:
                    drop_pos = int(neg[0])
                else:
                    ln = lam[neg]
                    drop_pos = int(neg[np.flatnonzero(ln == ln.min())[0]])
                work.pop(drop_pos)
                continue
        resid = rows @ x - offsets
        viol = np.flatnonzero(resid > feas_tol)
        viol = np.array([j for j in viol if j not in work], dtype=int)
        if viol.size == 0:
            mult = np.zeros(s)
            if work:
                mult[work] = np.maximum(lam, 0.0)
            return x, mult
        if it > bland_after:
            add = int(viol[0])
        else:
            rv = resid[viol]
            add = int(viol[np.flatnonzero(rv == rv.max())[0]])
        work.append(add)
        work.sort()
    raise IterationCap(f"halfspace projection exceeded {max_iter} iterations")


def signed_least_squares(A_free, A_nonneg, b):
    """Minimize ``||A_free f + A_nonneg g - b||`` over free ``f`` and ``g >= 0``.

    Either block may have zero columns.  Returns ``(f, g, residual_norm)``.
    The free block is eliminated by projecting onto the orthogonal
    complement of its range, after which the nonnegative block reduces to
    a plain nonnegative least-squares solve.
    """
    b = np.asarray(b, dtype=float)
    m = b.shape[0]
    A_free = np.asarray(A_free, dtype=float)
    A_nonneg = np.asarray(A_nonneg, dtype=float)
    if A_free.size == 0:
        A_free = A_free.reshape(m, 0)
    if A_nonneg.size == 0:
        A_nonneg = A_nonneg.reshape(m, 0)
    kf = A_free.shape[1]
    kg = A_nonneg.shape[1]

    if kf == 0 and kg == 0:
        return np.zeros(0), np.zeros(0), float(np.linalg.norm(b))
    if kg == 0:
        f = _lstsq(A_free, b)
        r = b - A_free @ f
        return f, np.zeros(0), float(np.linalg.norm(r))

    if kf:
        q, _ = np.linalg.qr(A_free, mode="reduced")

        def perp(v):
            return v - q @ (q.T @ v)

        Pg = A_nonneg - q @ (q.T @ A_nonneg)
        pb = perp(b)
    else:
        Pg = A_nonneg
        pb = b
    sol = nnls(Pg, pb)
    g = sol.x
    if kf:
        f = _lstsq(A_free, b - A_nonneg @ g)
    else:
        f = np.zeros(0)
    r = b - (A_free @ f if kf else 0.0) - A_nonneg @ g
    return f, g, float(np.linalg.norm(r))
