"""Convex polyhedra as halfspace intersections, with cone projections.

A polyhedron is ``{x : <g_j, x> <= c_j, j = 0..s-1}`` described by its
generator rows ``g_j`` and offsets ``c_j``.  Generators are kept exactly
as supplied (they are not normalized internally); all multiplier
conventions downstream are relative to the supplied scaling.
Indices are 0-based throughout.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from .errors import DegeneratePolyhedronWarning, Infeasible, InfeasiblePoint
from .qp import nnls, project_halfspaces

#: Default absolute tolerance on the activity residual <g_j, x> - c_j.
ACTIVITY_TOL = 1e-8

#: Singular values below RANK_TOL times the largest one count as zero
#: in the linear-independence test.
RANK_TOL = 1e-10


class Polyhedron:
    """Halfspace intersection ``{x : generators @ x <= offsets}``.

    Parameters
    ----------
    generators : (s, n) array_like
        One row per halfspace; rows need not be unit vectors.
    offsets : (s,) array_like
    witness : (n,) array_like, optional
        A point known to be feasible; supplying one skips the phase-1
        feasibility solve at construction.

    Raises
    ------
    Infeasible
        If the inequality system has no solution.

    Notes
    -----
    A feasible-but-flat polyhedron (no strictly interior point found) is
    accepted with a :class:`DegeneratePolyhedronWarning`; independence of
    active generators is checked pointwise, not globally.
    """

    def __init__(self, generators, offsets, witness=None):
        G = np.atleast_2d(np.asarray(generators, dtype=float))
        c = np.atleast_1d(np.asarray(offsets, dtype=float))
        if G.shape[0] != c.shape[0]:
            raise ValueError("generators and offsets disagree in count")
        if G.shape[0] < 1:
            raise ValueError("need at least one halfspace")
        if not (np.all(np.isfinite(G)) and np.all(np.isfinite(c))):
            raise ValueError("nonfinite polyhedron data")
        self.generators = G
        self.offsets = c
        self.s, self.n = G.shape
        self.degenerate = False
        self._check_nonempty(witness)
        self.generators.setflags(write=False)
        self.offsets.setflags(write=False)

    def _check_nonempty(self, witness):
        strict_margin = 1e-9
        for cand in self._cheap_candidates(witness):
            r = self.generators @ cand - self.offsets
            if np.all(r < -strict_margin):
                return
            if np.all(r <= ACTIVITY_TOL):
                witness = cand  # feasible but flat; confirm interior below
                break
        # Phase 1: minimize t subject to G x - t <= c; t < 0 means interior.
        A_ub = np.hstack([self.generators, -np.ones((self.s, 1))])
        res = linprog(
            c=np.r_[np.zeros(self.n), 1.0],
            A_ub=A_ub,
            b_ub=self.offsets,
            bounds=[(None, None)] * self.n + [(-1.0, None)],
            method="highs",
        )
        if not res.success or res.x[-1] > ACTIVITY_TOL:
            if witness is not None:
                self._flag_degenerate()
                return
            raise Infeasible("polyhedron is empty")
        if res.x[-1] > -strict_margin:
            self._flag_degenerate()

    def _flag_degenerate(self):
        self.degenerate = True
        warnings.warn(
            "polyhedron is feasible but has (numerically) empty interior",
            DegeneratePolyhedronWarning,
            stacklevel=4,
        )

    def _cheap_candidates(self, witness):
        if witness is not None:
            yield np.asarray(witness, dtype=float)
        yield np.zeros(self.n)
        # Least-squares solution of the tight system is often interior-adjacent.
        sol, _, _, _ = np.linalg.lstsq(self.generators, self.offsets - 1.0, rcond=None)
        yield sol

    def residuals(self, x):
        """Per-halfspace activity residuals ``generators @ x - offsets``."""
        return self.generators @ np.asarray(x, dtype=float) - self.offsets

    def contains(self, x, tol=ACTIVITY_TOL):
        return bool(np.all(self.residuals(x) <= tol))

    def __repr__(self):
        return f"Polyhedron(n={self.n}, s={self.s})"


@dataclass(frozen=True)
class ActiveSet:
    """Indices of halfspaces tight at a point, at a fixed tolerance."""

    indices: tuple
    tol: float

    def __contains__(self, j):
        return j in self.indices

    def __iter__(self):
        return iter(self.indices)

    def __len__(self):
        return len(self.indices)


@dataclass(frozen=True)
class ConeDecomposition:
    """Projection onto a finitely generated cone with its coefficients.

    ``projection_point == sum(lam_j * g_j)`` over ``coefficients``; entries
    with zero weight are omitted.  ``unique`` is False when the active
    generators are linearly dependent, in which case the projection point
    is still exact but the coefficients are one valid choice among many.
    """

    projection_point: np.ndarray
    coefficients: tuple
    unique: bool = True

    def as_vector(self, s):
        """Embed the coefficients into a length-``s`` nonnegative vector."""
        out = np.zeros(s)
        for j, lam in self.coefficients:
            out[j] = lam
        return out


def active_set(x, C: Polyhedron, tol=ACTIVITY_TOL) -> ActiveSet:
    """Indices j with ``|<g_j, x> - c_j| <= tol``; requires x near C.

    Raises :class:`InfeasiblePoint` if any residual exceeds ``tol``.
    """
    r = C.residuals(x)
    worst = float(np.max(r))
    if worst > tol:
        raise InfeasiblePoint(f"point violates halfspace by {worst:.3e} > tol={tol:.1e}")
    idx = tuple(int(j) for j in np.flatnonzero(np.abs(r) <= tol))
    return ActiveSet(indices=idx, tol=tol)


def licq(x, C: Polyhedron, tol=ACTIVITY_TOL, rank_tol=RANK_TOL) -> bool:
    """True when the active generators at ``x`` are linearly independent.

    The empty family (interior point) counts as independent.  Rank is
    decided by singular values relative to the largest one.
    """
    act = active_set(x, C, tol)
    if len(act) == 0:
        return True
    A = C.generators[list(act.indices)]
    if A.shape[0] > A.shape[1]:
        return False
    sv = np.linalg.svd(A, compute_uv=False)
    return bool(sv[-1] > rank_tol * sv[0])


def project_polyhedron(y, C: Polyhedron) -> np.ndarray:
    """Euclidean projection of ``y`` onto ``C``; identity for feasible ``y``."""
    x, _ = project_halfspaces(y, C.generators, C.offsets)
    return x


def project_tangent_cone(v, x, C: Polyhedron, tol=ACTIVITY_TOL) -> np.ndarray:
    """Project ``v`` onto the tangent cone ``{w : <g_j, w> <= 0, j active at x}``."""
    act = active_set(x, C, tol)
    v = np.asarray(v, dtype=float)
    if len(act) == 0:
        return v.copy()
    rows = C.generators[list(act.indices)]
    w, _ = project_halfspaces(v, rows, np.zeros(len(act)))
    return w


def project_normal_cone(v, x, C: Polyhedron, tol=ACTIVITY_TOL) -> ConeDecomposition:
    """Project ``v`` onto the cone spanned by the active generators at ``x``.

    The complementary projection onto the tangent cone recovers ``v``:
    the two parts are orthogonal and sum to ``v``.
    """
    act = active_set(x, C, tol)
    v = np.asarray(v, dtype=float)
    if len(act) == 0:
        return ConeDecomposition(np.zeros_like(v), (), unique=True)
    idx = list(act.indices)
    A = C.generators[idx].T  # n x k, columns are active generators
    sol = nnls(A, v)
    point = A @ sol.x
    coeffs = tuple(
        (int(j), float(lam)) for j, lam in zip(idx, sol.x) if lam > 0.0
    )
    return ConeDecomposition(point, coeffs, unique=licq(x, C, tol))
