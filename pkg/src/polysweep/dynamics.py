"""Controlled sweeping dynamics over a polyhedron and its discrete schemes.

The state obeys a differential inclusion driven by a perturbation
``g(x, u)`` minus a normal-cone reaction that keeps the state inside the
polyhedron ``C``; membership in ``C`` is therefore an implicit pointwise
state constraint.  Two explicit schemes are provided:

* ``catching_up``: project the Euler predictor back onto ``C`` each step
  (unconditionally feasible, the default), and
* ``tangent_projection``: advance along the projection of ``g`` onto the
  tangent cone at the current node, re-projecting onto ``C`` to control
  drift.

At a node the right velocity splits as ``g = v + r`` with ``v`` in the
tangent cone and ``r = sum(eta_j * g_j)`` in the normal cone; the
nonnegative ``eta`` weights are the sweeping reaction multipliers.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import FitResidualTooLarge, GrowthWarning, NonUniqueCoefficientsWarning
from .geometry import (
    ACTIVITY_TOL,
    Polyhedron,
    active_set,
    licq,
    project_normal_cone,
    project_tangent_cone,
)
from .qp import nnls, project_halfspaces

#: Controls must sit inside their control set to this tolerance.
MEMBERSHIP_TOL = 1e-9

#: Every produced node state satisfies the halfspace inequalities to this.
STATE_TOL = 1e-9

#: Minimum admissible step length.
MIN_STEP = 1e-12


class PerturbationMap:
    """Perturbation ``g(x, u)`` with closed-form Jacobians.

    Catalog kinds:

    * ``"affine"``: ``g(x, u) = G x + B u + b``;
    * ``"control"``: ``g(x, u) = u`` (square shortcut for the affine kind).

    Custom maps can be built from callables via :meth:`from_callables`.
    """

    def __init__(self, kind, evaluation, jacobian_x, jacobian_u, n, d):
        self.kind = kind
        self._eval = evaluation
        self._jac_x = jacobian_x
        self._jac_u = jacobian_u
        self.n = n
        self.d = d

    @classmethod
    def affine(cls, G, B, b=None):
        G = np.atleast_2d(np.asarray(G, dtype=float))
        B = np.atleast_2d(np.asarray(B, dtype=float))
        n = G.shape[0]
        d = B.shape[1]
        if G.shape != (n, n) or B.shape[0] != n:
            raise ValueError("inconsistent affine perturbation shapes")
        bv = np.zeros(n) if b is None else np.asarray(b, dtype=float)
        return cls(
            "affine",
            lambda x, u: G @ x + B @ u + bv,
            lambda x, u: G,
            lambda x, u: B,
            n,
            d,
        )

    @classmethod
    def control_only(cls, n):
        """``g(x, u) = u`` with matching state and control dimensions."""
        eye = np.eye(n)
        zero = np.zeros((n, n))
        m = cls(
            "control",
            lambda x, u: np.asarray(u, dtype=float),
            lambda x, u: zero,
            lambda x, u: eye,
            n,
            n,
        )
        return m

    @classmethod
    def from_callables(cls, evaluation, jacobian_x, jacobian_u, n, d):
        return cls("custom", evaluation, jacobian_x, jacobian_u, n, d)

    def __call__(self, x, u):
        return self._eval(x, u)

    def jacobian_x(self, x, u):
        return self._jac_x(x, u)

    def jacobian_u(self, x, u):
        return self._jac_u(x, u)

    def self_test(self, rng=None, points=5, fd_eps=1e-6, rel_tol=1e-6):
        """Check both Jacobians against central differences at random points."""
        rng = np.random.default_rng(0) if rng is None else rng
        for _ in range(points):
            x = rng.uniform(-1.0, 1.0, self.n)
            u = rng.uniform(-1.0, 1.0, self.d)
            Jx = np.asarray(self.jacobian_x(x, u), dtype=float)
            Ju = np.asarray(self.jacobian_u(x, u), dtype=float)
            for k in range(self.n):
                e = np.zeros(self.n)
                e[k] = fd_eps
                col = (self(x + e, u) - self(x - e, u)) / (2 * fd_eps)
                if np.linalg.norm(col - Jx[:, k]) > rel_tol * (1 + np.linalg.norm(col)):
                    return False
            for k in range(self.d):
                e = np.zeros(self.d)
                e[k] = fd_eps
                col = (self(x, u + e) - self(x, u - e)) / (2 * fd_eps)
                if np.linalg.norm(col - Ju[:, k]) > rel_tol * (1 + np.linalg.norm(col)):
                    return False
        return True


class ControlSet:
    """Compact admissible control region: a box, a finite set, or a ball."""

    def __init__(self, kind, **params):
        self.kind = kind
        if kind == "box":
            self.lower = np.atleast_1d(np.asarray(params["lower"], dtype=float))
            self.upper = np.atleast_1d(np.asarray(params["upper"], dtype=float))
            if self.lower.shape != self.upper.shape or np.any(self.lower > self.upper):
                raise ValueError("box bounds must satisfy lower <= upper")
            self.d = self.lower.size
        elif kind == "finite":
            self.points = np.atleast_2d(np.asarray(params["points"], dtype=float))
            if self.points.shape[0] < 1:
                raise ValueError("finite control set needs at least one point")
            self.d = self.points.shape[1]
        elif kind == "ball":
            self.center = np.atleast_1d(np.asarray(params["center"], dtype=float))
            self.radius = float(params["radius"])
            if self.radius < 0:
                raise ValueError("ball radius must be nonnegative")
            self.d = self.center.size
        else:
            raise ValueError(f"unknown control set kind {kind!r}")

    @classmethod
    def box(cls, lower, upper):
        return cls("box", lower=lower, upper=upper)

    @classmethod
    def finite(cls, points):
        return cls("finite", points=points)

    @classmethod
    def ball(cls, center, radius):
        return cls("ball", center=center, radius=radius)

    @property
    def convex(self):
        return self.kind in ("box", "ball")

    def contains(self, u, tol=MEMBERSHIP_TOL):
        u = np.asarray(u, dtype=float)
        return float(np.linalg.norm(u - self.project(u))) <= tol

    def project(self, u):
        u = np.asarray(u, dtype=float)
        if self.kind == "box":
            return np.clip(u, self.lower, self.upper)
        if self.kind == "finite":
            d2 = np.sum((self.points - u) ** 2, axis=1)
            return self.points[int(np.argmin(d2))].copy()
        gap = u - self.center
        nrm = np.linalg.norm(gap)
        if nrm <= self.radius:
            return u.copy()
        return self.center + gap * (self.radius / nrm)

    def normal_cone_distance(self, v, u, tol=MEMBERSHIP_TOL):
        """Distance from ``v`` to the normal cone of the set at ``u``."""
        v = np.asarray(v, dtype=float)
        u = np.asarray(u, dtype=float)
        if self.kind == "box":
            d2 = 0.0
            for k in range(self.d):
                at_lo = abs(u[k] - self.lower[k]) <= tol
                at_hi = abs(u[k] - self.upper[k]) <= tol
                if at_lo and at_hi:
                    continue  # collapsed coordinate: normal cone is the line
                if at_hi:
                    d2 += min(v[k], 0.0) ** 2
                elif at_lo:
                    d2 += max(v[k], 0.0) ** 2
                else:
                    d2 += v[k] ** 2
            return float(np.sqrt(d2))
        if self.kind == "finite":
            return 0.0  # isolated points: the cone is the whole space
        gap = u - self.center
        nrm = np.linalg.norm(gap)
        if nrm < self.radius - tol:
            return float(np.linalg.norm(v))
        if nrm <= tol:
            return float(np.linalg.norm(v))
        ray = gap / nrm
        t = float(v @ ray)
        return float(np.linalg.norm(v - max(t, 0.0) * ray))

    def support(self, psi):
        """Return ``(max_{u in U} <psi, u>, argmax)``."""
        psi = np.asarray(psi, dtype=float)
        if self.kind == "box":
            arg = np.where(psi >= 0.0, self.upper, self.lower)
            return float(psi @ arg), arg
        if self.kind == "finite":
            vals = self.points @ psi
            k = int(np.argmax(vals))
            return float(vals[k]), self.points[k].copy()
        nrm = float(np.linalg.norm(psi))
        if nrm == 0.0:
            return float(psi @ self.center), self.center.copy()
        arg = self.center + self.radius * psi / nrm
        return float(psi @ arg), arg

    def center_point(self):
        if self.kind == "box":
            return 0.5 * (self.lower + self.upper)
        if self.kind == "finite":
            return self.points[0].copy()
        return self.center.copy()

    def extreme_points(self, cap=16):
        """Deterministic list of extreme candidates for multistart seeding."""
        if self.kind == "box":
            pts = []
            for mask in range(min(2 ** self.d, cap)):
                p = np.where(
                    [(mask >> k) & 1 for k in range(self.d)], self.upper, self.lower
                )
                pts.append(p.astype(float))
            return pts
        if self.kind == "finite":
            return [p.copy() for p in self.points[:cap]]
        pts = []
        for k in range(self.d):
            for sgn in (-1.0, 1.0):
                e = np.zeros(self.d)
                e[k] = sgn * self.radius
                pts.append(self.center + e)
                if len(pts) >= cap:
                    return pts
        return pts

    def sample(self, rng):
        if self.kind == "box":
            return rng.uniform(self.lower, self.upper)
        if self.kind == "finite":
            return self.points[rng.integers(0, self.points.shape[0])].copy()
        raw = rng.normal(size=self.d)
        r = rng.uniform(0.0, 1.0) ** (1.0 / self.d) * self.radius
        nrm = np.linalg.norm(raw)
        if nrm == 0.0:
            return self.center.copy()
        return self.center + r * raw / nrm


class BVControl:
    """Right-continuous piecewise-constant control on ``[0, T]``.

    ``value(t)`` returns the value attached to the largest breakpoint
    ``<= t``; the first breakpoint must be 0.
    """

    def __init__(self, breakpoints, values, control_set=None, tol=MEMBERSHIP_TOL):
        bp = np.atleast_1d(np.asarray(breakpoints, dtype=float))
        vals = np.atleast_2d(np.asarray(values, dtype=float))
        if bp.size != vals.shape[0]:
            raise ValueError("breakpoints and values disagree in count")
        if bp[0] != 0.0:
            raise ValueError("first breakpoint must be 0")
        if np.any(np.diff(bp) <= 0):
            raise ValueError("breakpoints must be strictly increasing")
        if control_set is not None:
            for v in vals:
                if not control_set.contains(v, tol):
                    raise ValueError(f"control value {v} lies outside the control set")
        self.breakpoints = bp
        self.values = vals
        self.d = vals.shape[1]
        diffs = np.diff(vals, axis=0)
        self.total_variation = float(np.sum(np.linalg.norm(diffs, axis=1))) if len(vals) > 1 else 0.0

    @classmethod
    def constant(cls, u0, control_set=None):
        return cls([0.0], [np.asarray(u0, dtype=float)], control_set)

    def value(self, t):
        k = int(np.searchsorted(self.breakpoints, t, side="right")) - 1
        return self.values[max(k, 0)]

    def values_at(self, times):
        ks = np.searchsorted(self.breakpoints, times, side="right") - 1
        return self.values[np.maximum(ks, 0)]


class CostFunction:
    """Terminal cost with analytic gradient.

    Kinds: ``linear`` (``a . x``), ``quadratic`` (``0.5 x'Qx + a.x``) and
    ``half_norm_sq`` (``0.5 ||x||^2``).  All catalog kinds are smooth, so
    the subgradient is the singleton gradient.
    """

    def __init__(self, kind, **params):
        self.kind = kind
        if kind == "linear":
            self.a = np.atleast_1d(np.asarray(params["a"], dtype=float))
        elif kind == "quadratic":
            self.Q = np.atleast_2d(np.asarray(params["Q"], dtype=float))
            self.a = np.atleast_1d(np.asarray(params["a"], dtype=float))
        elif kind == "half_norm_sq":
            pass
        else:
            raise ValueError(f"unknown cost kind {kind!r}")

    @classmethod
    def linear(cls, a):
        return cls("linear", a=a)

    @classmethod
    def quadratic(cls, Q, a=None):
        Q = np.atleast_2d(np.asarray(Q, dtype=float))
        a = np.zeros(Q.shape[0]) if a is None else a
        return cls("quadratic", Q=Q, a=a)

    @classmethod
    def half_norm_sq(cls):
        return cls("half_norm_sq")

    def value(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "linear":
            return float(self.a @ x)
        if self.kind == "quadratic":
            return float(0.5 * x @ self.Q @ x + self.a @ x)
        return float(0.5 * x @ x)

    def gradient(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "linear":
            return self.a.copy()
        if self.kind == "quadratic":
            return 0.5 * (self.Q + self.Q.T) @ x + self.a
        return x.copy()

    def self_test(self, n, rng=None, fd_eps=1e-6, rel_tol=1e-6):
        rng = np.random.default_rng(0) if rng is None else rng
        for _ in range(5):
            x = rng.uniform(-1.0, 1.0, n)
            g = self.gradient(x)
            for k in range(n):
                e = np.zeros(n)
                e[k] = fd_eps
                fd = (self.value(x + e) - self.value(x - e)) / (2 * fd_eps)
                if abs(fd - g[k]) > rel_tol * (1 + abs(fd)):
                    return False
        return True


@dataclass
class SweepingProblem:
    """Full problem instance: dynamics data, control region, cost, horizon."""

    C: Polyhedron
    U: ControlSet
    g: PerturbationMap
    phi: CostFunction
    x0: np.ndarray
    T: float

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float)
        self.T = float(self.T)
        if self.T <= 0:
            raise ValueError("horizon must be positive")
        if not self.C.contains(self.x0, ACTIVITY_TOL):
            raise ValueError("initial state must lie in the polyhedron")
        if self.g.n != self.C.n:
            raise ValueError("perturbation state dimension disagrees with polyhedron")


@dataclass
class Trajectory:
    """Discrete node states with interval velocities and reaction multipliers.

    ``velocities[i]`` is the realized difference quotient on interval ``i``
    and ``eta[i]`` the normal-cone multipliers of the perturbation split at
    node ``i`` (the final entry uses the control value at the horizon).
    """

    times: np.ndarray
    states: np.ndarray
    velocities: np.ndarray
    eta: np.ndarray
    scheme: str = "catching_up"
    eta_unique: bool = True

    def __post_init__(self):
        for arr in (self.times, self.states, self.velocities, self.eta):
            arr.setflags(write=False)

    @property
    def h(self):
        return float(self.times[1] - self.times[0])

    def to_csv(self, path, controls=None):
        """Write ``t, x_1.., u_1.., eta_1..`` rows, one per node.

        Control columns repeat the interval value (the last node repeats
        the final interval).  Floats carry 17 significant digits so the
        file round-trips bit-exactly.
        """
        n = self.states.shape[1]
        s = self.eta.shape[1]
        d = controls.shape[1] if controls is not None else 0
        header = (
            ["t"]
            + [f"x_{k + 1}" for k in range(n)]
            + [f"u_{k + 1}" for k in range(d)]
            + [f"eta_{k + 1}" for k in range(s)]
        )
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            last = len(self.times) - 1
            for i, t in enumerate(self.times):
                row = [t, *self.states[i]]
                if controls is not None:
                    row.extend(controls[min(i, last - 1)])
                row.extend(self.eta[i])
                w.writerow([f"{v:.17g}" for v in row])


def _step_catching_up(x, drift, h, G, c):
    z = x + h * drift
    if np.max(G @ z - c) <= 1e-13:
        return z
    out, _ = project_halfspaces(z, G, c)
    return out


def catching_up_step(x, u, h, problem: SweepingProblem) -> np.ndarray:
    """One projected Euler step: project ``x + h g(x, u)`` back onto ``C``."""
    if h <= 0:
        raise ValueError("step must be positive")
    x = np.asarray(x, dtype=float)
    drift = problem.g(x, u)
    return _step_catching_up(x, drift, h, problem.C.generators, problem.C.offsets)


def right_velocity(x, u, problem: SweepingProblem, tol=ACTIVITY_TOL):
    """Split ``g(x, u)`` into tangential velocity and normal reaction.

    Returns ``(velocity, eta)`` with ``eta`` embedded into a full length-s
    nonnegative vector, zero off the active set, so that
    ``velocity == g(x, u) - generators.T @ eta``.  When the active
    generators are dependent the velocity is still exact but ``eta`` is
    one valid choice; a :class:`NonUniqueCoefficientsWarning` is issued.
    """
    x = np.asarray(x, dtype=float)
    gval = problem.g(x, u)
    decomp = project_normal_cone(gval, x, problem.C, tol)
    eta = decomp.as_vector(problem.C.s)
    if not decomp.unique:
        warnings.warn(
            "active generators are dependent; reaction multipliers not unique",
            NonUniqueCoefficientsWarning,
            stacklevel=2,
        )
    return gval - decomp.projection_point, eta


def _simulate_states(problem, mesh, controls, x_init=None, start=0):
    """Node states of the catching-up scheme; lean path used by the solver."""
    G = problem.C.generators
    c = problem.C.offsets
    h = mesh.h
    N = mesh.N
    x = problem.x0 if x_init is None else np.asarray(x_init, dtype=float)
    states = np.empty((N - start + 1, problem.C.n))
    states[0] = x
    for i in range(start, N):
        x = _step_catching_up(x, problem.g(x, controls[i]), h, G, c)
        states[i - start + 1] = x
    return states


def integrate(problem, control, mesh, scheme="catching_up", sampling="right", with_eta=True):
    """Simulate the sweeping dynamics on a dyadic mesh.

    Parameters
    ----------
    control : BVControl
    scheme : {"catching_up", "tangent_projection"}
        Projected Euler (default) or explicit tangent-cone velocity with a
        feasibility re-projection each step.
    sampling : {"right", "left"}
        Which endpoint of each interval samples the control; the right
        endpoint is the default (matches the right-continuous convention).
    with_eta : bool
        Skip the multiplier extraction when False (cheaper; used in inner
        optimization loops).
    """
    if scheme not in ("catching_up", "tangent_projection"):
        raise ValueError(f"unknown scheme {scheme!r}")
    if sampling not in ("right", "left"):
        raise ValueError(f"unknown sampling {sampling!r}")
    if mesh.h < MIN_STEP:
        raise ValueError("mesh step below the minimum admissible size")
    N = mesh.N
    h = mesh.h
    times = mesh.nodes
    sample_times = times[1:] if sampling == "right" else times[:-1]
    controls = control.values_at(sample_times)
    for i, u in enumerate(controls):
        if not problem.U.contains(u, MEMBERSHIP_TOL):
            raise ValueError(f"control at node {i} lies outside the control set")

    G = problem.C.generators
    c = problem.C.offsets
    n = problem.C.n
    s = problem.C.s
    states = np.empty((N + 1, n))
    states[0] = problem.x0
    eta = np.zeros((N + 1, s))
    unique = True
    growth_warned = False
    x = problem.x0.copy()
    for i in range(N):
        u = controls[i]
        gval = problem.g(x, u)
        gn = float(np.linalg.norm(gval))
        if not growth_warned and gn > 1e3 * (1.0 + float(np.linalg.norm(x))):
            warnings.warn(
                f"perturbation norm {gn:.3e} exceeds the growth envelope at node {i}",
                GrowthWarning,
                stacklevel=2,
            )
            growth_warned = True
        if with_eta:
            decomp = project_normal_cone(gval, x, problem.C)
            eta[i] = decomp.as_vector(s)
            unique = unique and decomp.unique
            if scheme == "tangent_projection":
                vel = gval - decomp.projection_point
                x = _step_catching_up(x, vel, h, G, c)
            else:
                x = _step_catching_up(x, gval, h, G, c)
        else:
            if scheme == "tangent_projection":
                vel = project_tangent_cone(gval, x, problem.C)
                x = _step_catching_up(x, vel, h, G, c)
            else:
                x = _step_catching_up(x, gval, h, G, c)
        states[i + 1] = x
    if with_eta:
        u_T = control.value(problem.T)
        decomp = project_normal_cone(problem.g(x, u_T), x, problem.C)
        eta[N] = decomp.as_vector(s)
        unique = unique and decomp.unique
    velocities = np.diff(states, axis=0) / h
    return Trajectory(
        times=times.copy(),
        states=states,
        velocities=velocities,
        eta=eta,
        scheme=scheme,
        eta_unique=unique,
    )


def extract_eta(trajectory, control, problem, residual_scale=1e-6, sampling="right"):
    """Recover the reaction multipliers from a node trajectory.

    On each interval the defect ``g(x_i, u_i) - (x_{i+1} - x_i)/h`` is
    fitted as a nonnegative combination of the generators active at the
    left node; the final node reuses the velocity split at the horizon.
    Returns ``(eta, residuals)`` with ``eta`` of shape ``(N+1, s)``.

    Raises
    ------
    FitResidualTooLarge
        If some interval fit leaves a residual above
        ``residual_scale * (1 + ||g||)``: the node sequence is not a
        sweeping trajectory for these controls.
    """
    times = trajectory.times
    states = trajectory.states
    N = len(times) - 1
    h = trajectory.h
    s = problem.C.s
    sample_times = times[1:] if sampling == "right" else times[:-1]
    controls = control.values_at(sample_times)
    eta = np.zeros((N + 1, s))
    residuals = np.zeros(N)
    for i in range(N):
        x = states[i]
        gval = problem.g(x, controls[i])
        defect = gval - (states[i + 1] - x) / h
        act = active_set(x, problem.C)
        idx = list(act.indices)
        if idx:
            A = problem.C.generators[idx].T
            sol = nnls(A, defect)
            eta[i, idx] = sol.x
            residuals[i] = sol.residual_norm
        else:
            residuals[i] = float(np.linalg.norm(defect))
        cap = residual_scale * (1.0 + float(np.linalg.norm(gval)))
        if residuals[i] > cap:
            raise FitResidualTooLarge(
                f"interval {i}: multiplier fit residual {residuals[i]:.3e} "
                f"exceeds {cap:.3e}; not a sweeping trajectory"
            )
    _, eta[N] = right_velocity(states[N], control.value(times[-1]), problem)
    return eta, residuals
