"""Dyadic meshes, discrete control problems, and refinement diagnostics.

Refinement level ``m`` induces ``N = 2**m`` uniform intervals on
``[0, T]``; refining keeps every existing node, so node-wise quantities
can be compared across levels directly.  The discrete objective is the
terminal cost plus an optional tracking term that penalizes the squared
distance of interval velocities and controls from a reference pair; the
same integral at unit weight is the localization budget used to filter
candidates that wander too far from the reference.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .dynamics import (
    MEMBERSHIP_TOL,
    STATE_TOL,
    BVControl,
    SweepingProblem,
    Trajectory,
    _simulate_states,
    integrate,
)
from .errors import LevelOutOfRange, MissingReference
from .geometry import active_set
from .qp import nnls

MAX_LEVEL = 24

#: Subsamples per interval for the composite midpoint quadrature.
QUAD_POINTS = 4


@dataclass(frozen=True)
class Mesh:
    """Uniform dyadic mesh: ``2**m`` intervals on ``[0, T]``."""

    m: int
    T: float

    def __post_init__(self):
        if not (1 <= self.m <= MAX_LEVEL):
            raise LevelOutOfRange(f"level {self.m} outside [1, {MAX_LEVEL}]")
        if self.T <= 0:
            raise ValueError("horizon must be positive")

    @property
    def N(self):
        return 2**self.m

    @property
    def h(self):
        return self.T / self.N

    @property
    def nodes(self):
        return np.arange(self.N + 1) * (self.T / self.N)

    def refine(self):
        return Mesh(self.m + 1, self.T)


def build_mesh(m, T) -> Mesh:
    """Uniform dyadic mesh at refinement level ``m`` (1..24)."""
    return Mesh(int(m), float(T))


class Reference:
    """Continuous-time pair evaluable at arbitrary times.

    Wraps callables ``state(t)``, ``velocity(t)``, ``control(t)``; the
    velocity is the a.e. derivative of the state.
    """

    def __init__(self, state, velocity, control):
        self.state = state
        self.velocity = velocity
        self.control = control

    @classmethod
    def from_trajectory(cls, traj: Trajectory, control: BVControl):
        """Piecewise-linear state / piecewise-constant velocity reference."""
        times = traj.times
        states = traj.states
        vel = traj.velocities
        n_iv = len(times) - 1

        def interval(t):
            k = int(np.searchsorted(times, t, side="right")) - 1
            return min(max(k, 0), n_iv - 1)

        def state(t):
            k = interval(t)
            return states[k] + (t - times[k]) * vel[k]

        def velocity(t):
            return vel[interval(t)]

        return cls(state, velocity, control.value)


@dataclass
class DiscretePair:
    """Node states and interval controls of one discrete candidate."""

    states: np.ndarray
    controls: np.ndarray

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        self.controls = np.asarray(self.controls, dtype=float)
        if self.states.shape[0] != self.controls.shape[0] + 1:
            raise ValueError("need one more state than controls")

    @property
    def N(self):
        return self.controls.shape[0]

    def velocities(self, h):
        return np.diff(self.states, axis=0) / h

    def validate(self, problem: SweepingProblem, mesh: Mesh, dynamics_tol=1e-6):
        """Check start state, memberships, and the node-cone dynamics defect.

        The defect on interval ``i`` is the distance from
        ``(x_i - x_{i+1})/h + g(x_i, u_i)`` to the normal cone at ``x_i``;
        it vanishes exactly when boundary crossings align with nodes.
        Returns the largest defect; raises ``ValueError`` on a violated
        membership.
        """
        if np.linalg.norm(self.states[0] - problem.x0) > STATE_TOL:
            raise ValueError("pair does not start at the initial state")
        for i, u in enumerate(self.controls):
            if not problem.U.contains(u, MEMBERSHIP_TOL):
                raise ValueError(f"control {i} outside the control set")
        for i, x in enumerate(self.states):
            if not problem.C.contains(x, STATE_TOL):
                raise ValueError(f"state {i} outside the polyhedron")
        h = mesh.h
        worst = 0.0
        for i in range(self.N):
            x = self.states[i]
            vec = (x - self.states[i + 1]) / h + problem.g(x, self.controls[i])
            idx = list(active_set(x, problem.C).indices)
            if idx:
                dist = nnls(problem.C.generators[idx].T, vec).residual_norm
            else:
                dist = float(np.linalg.norm(vec))
            worst = max(worst, dist)
        if worst > dynamics_tol:
            raise ValueError(
                f"dynamics defect {worst:.3e} exceeds tolerance {dynamics_tol:.1e}"
            )
        return worst


def _quad_times(t0, h):
    return t0 + (np.arange(QUAD_POINTS) + 0.5) * (h / QUAD_POINTS)


@dataclass
class DiscreteProblem:
    """One discrete optimal control problem on a fixed mesh.

    ``objective`` evaluates the terminal cost plus
    ``tracking_weight / 2`` times the squared tracking integral against
    the reference; ``localization_value`` is the same integral at unit
    weight, compared against the ``epsilon / 2`` budget by
    ``passes_localization``.  When a reference is present the first
    control is pinned to the reference control at time zero.
    """

    problem: SweepingProblem
    mesh: Mesh
    reference: Reference | None = None
    epsilon: float | None = None
    tracking_weight: float = 0.0

    def __post_init__(self):
        if self.tracking_weight < 0:
            raise ValueError("tracking weight must be nonnegative")
        if self.tracking_weight > 0 and self.reference is None:
            raise MissingReference("tracking objective requires a reference pair")
        if self.reference is not None and self.epsilon is not None and self.epsilon <= 0:
            raise ValueError("localization radius must be positive")

    def tracking_integral(self, states, controls):
        """Squared distance of (velocities, controls) from the reference."""
        if self.reference is None:
            return 0.0
        h = self.mesh.h
        nodes = self.mesh.nodes
        vel = np.diff(states, axis=0) / h
        total = 0.0
        w = h / QUAD_POINTS
        for i in range(self.mesh.N):
            for tq in _quad_times(nodes[i], h):
                dv = vel[i] - self.reference.velocity(tq)
                du = controls[i] - self.reference.control(tq)
                total += w * (float(dv @ dv) + float(du @ du))
        return total

    def objective(self, states, controls) -> float:
        val = self.problem.phi.value(states[-1])
        if self.tracking_weight > 0:
            val += 0.5 * self.tracking_weight * self.tracking_integral(states, controls)
        return float(val)

    def objective_of_pair(self, pair: DiscretePair) -> float:
        return self.objective(pair.states, pair.controls)

    def localization_value(self, states, controls) -> float:
        return self.tracking_integral(states, controls)

    def passes_localization(self, states, controls, slack=1e-12) -> bool:
        if self.reference is None or self.epsilon is None:
            return True
        return self.localization_value(states, controls) <= 0.5 * self.epsilon + slack

    def pinned_first_control(self):
        if self.reference is None:
            return None
        return np.asarray(self.reference.control(0.0), dtype=float)

    def simulate(self, controls):
        """Catching-up node states for a full control sequence."""
        return _simulate_states(self.problem, self.mesh, np.asarray(controls, dtype=float))


def discretize_problem(
    problem, mesh, reference=None, epsilon=None, tracking_weight=0.0
) -> DiscreteProblem:
    """Bundle a sweeping problem with a mesh and optional tracking data."""
    return DiscreteProblem(
        problem=problem,
        mesh=mesh,
        reference=reference,
        epsilon=epsilon,
        tracking_weight=float(tracking_weight),
    )


def approximate_feasible(reference: Reference, control: BVControl, mesh: Mesh, problem: SweepingProblem):
    """Discretize a continuous feasible pair onto a mesh.

    Controls are sampled at right endpoints and the states re-simulated by
    the catching-up scheme from the initial state.  Returns
    ``(pair, l2_control_distance, w12_state_distance)`` measuring how far
    the discrete pair sits from the continuous input.
    """
    nodes = mesh.nodes
    controls = control.values_at(nodes[1:])
    states = _simulate_states(problem, mesh, controls)
    pair = DiscretePair(states=states, controls=controls)

    h = mesh.h
    w = h / QUAD_POINTS
    vel = pair.velocities(h)
    ctrl_sq = 0.0
    state_sq = 0.0
    for i in range(mesh.N):
        for tq in _quad_times(nodes[i], h):
            du = controls[i] - reference.control(tq)
            ctrl_sq += w * float(du @ du)
            dv = vel[i] - reference.velocity(tq)
            dx = states[i] + (tq - nodes[i]) * vel[i] - reference.state(tq)
            state_sq += w * (float(dv @ dv) + float(dx @ dx))
    return pair, float(np.sqrt(ctrl_sq)), float(np.sqrt(state_sq))


@dataclass
class ConvergenceTable:
    """Per-level refinement errors against a reference pair."""

    levels: list = field(default_factory=list)
    h: list = field(default_factory=list)
    err_vel_l2: list = field(default_factory=list)
    err_ctrl_l2: list = field(default_factory=list)
    err_node_max: list = field(default_factory=list)

    def add(self, m, h, vel, ctrl, node):
        self.levels.append(int(m))
        self.h.append(float(h))
        self.err_vel_l2.append(float(vel))
        self.err_ctrl_l2.append(float(ctrl))
        self.err_node_max.append(float(node))

    def monotone(self, slack=1e-15):
        """Non-increasing flags for (velocity, control, node) error columns."""
        def chk(col):
            return all(col[k + 1] <= col[k] + slack for k in range(len(col) - 1))

        return chk(self.err_vel_l2), chk(self.err_ctrl_l2), chk(self.err_node_max)

    def ratios(self, column="err_vel_l2"):
        col = getattr(self, column)
        out = []
        for k in range(len(col) - 1):
            out.append(col[k] / col[k + 1] if col[k + 1] != 0 else float("nan"))
        return out

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["m", "h", "err_vel_L2", "err_ctrl_L2", "err_node_max"])
            for k in range(len(self.levels)):
                w.writerow(
                    [self.levels[k]]
                    + [
                        f"{v:.17g}"
                        for v in (
                            self.h[k],
                            self.err_vel_l2[k],
                            self.err_ctrl_l2[k],
                            self.err_node_max[k],
                        )
                    ]
                )


def convergence_report(problem, control, levels, reference: Reference) -> ConvergenceTable:
    """Refinement errors of the catching-up scheme against a reference.

    Velocity and control errors are composite-midpoint L2 norms; the node
    error is the worst node-wise distance to the reference state.
    """
    table = ConvergenceTable()
    for m in levels:
        mesh = build_mesh(m, problem.T)
        traj = integrate(problem, control, mesh, with_eta=False)
        nodes = mesh.nodes
        h = mesh.h
        w = h / QUAD_POINTS
        controls = control.values_at(nodes[1:])
        vel_sq = 0.0
        ctrl_sq = 0.0
        for i in range(mesh.N):
            for tq in _quad_times(nodes[i], h):
                dv = traj.velocities[i] - reference.velocity(tq)
                du = controls[i] - reference.control(tq)
                vel_sq += w * float(dv @ dv)
                ctrl_sq += w * float(du @ du)
        node_err = max(
            float(np.linalg.norm(traj.states[i] - reference.state(nodes[i])))
            for i in range(mesh.N + 1)
        )
        table.add(m, h, np.sqrt(vel_sq), np.sqrt(ctrl_sq), node_err)
    return table
