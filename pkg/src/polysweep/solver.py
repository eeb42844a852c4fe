"""Direct solution of the discrete problems by control parametrization.

States are eliminated through the catching-up simulation, leaving a
reduced objective over the control sequence.  The projected-gradient
driver uses one-sided finite-difference gradients (the reduced objective
is nonsmooth where the projection's active set changes), an
expand-then-backtrack line search, and a compass-search fallback when the
line search stalls.  Multistart covers the nonconvexity; the merge picks
the lexicographically smallest ``(objective, start index)`` so results do
not depend on completion order.  A lattice enumeration oracle is provided
for tiny instances.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .discretize import DiscretePair, DiscreteProblem
from .dynamics import _simulate_states
from .errors import NoDescent, SearchSpaceTooLarge

BRUTE_FORCE_CAP = 10**7


@dataclass
class SolveOptions:
    """Projected-gradient settings; identical options and seed give
    identical results."""

    max_iters: int = 100
    step_size_init: float = 1.0
    armijo_c: float = 1e-4
    backtrack: float = 0.5
    expansions: int = 40
    multistart_count: int = 4
    seed: int = 0
    fd_epsilon: float = 1e-6
    stop_tol: float = 1e-6
    compass_min_step: float = 1e-9
    extra_starts: tuple = ()

    def __post_init__(self):
        if self.multistart_count < 1:
            raise ValueError("need at least one start")
        if not (0.0 < self.armijo_c < 1.0):
            raise ValueError("armijo constant must lie in (0, 1)")
        if not (0.0 < self.backtrack < 1.0):
            raise ValueError("backtrack factor must lie in (0, 1)")


@dataclass
class SolveResult:
    pair: DiscretePair
    objective: float
    iterations: int
    starts_used: int
    kkt_residual: float
    history: list = field(default_factory=list)

    def to_json_dict(self):
        return {
            "schema": 1,
            "objective": self.objective,
            "kkt_residual": self.kkt_residual,
            "iterations": self.iterations,
            "starts_used": self.starts_used,
            "history": list(self.history),
        }


class _Reduced:
    """Reduced objective u -> J(u) with tail-restarted finite differences."""

    def __init__(self, dp: DiscreteProblem):
        self.dp = dp
        self.problem = dp.problem
        self.mesh = dp.mesh
        self.N = dp.mesh.N
        self.d = dp.problem.U.d
        pinned = dp.pinned_first_control()
        self.pinned = pinned

    def clamp(self, controls):
        U = self.problem.U
        out = np.empty_like(controls)
        for i in range(self.N):
            out[i] = U.project(controls[i])
        if self.pinned is not None:
            out[0] = self.pinned
        return out

    def states(self, controls):
        return _simulate_states(self.problem, self.mesh, controls)

    def value(self, controls, states=None):
        if states is None:
            states = self.states(controls)
        return self.dp.objective(states, controls)

    def value_from(self, controls, base_states, i0):
        """Objective after re-simulating only from node ``i0`` onward."""
        tail = _simulate_states(
            self.problem, self.mesh, controls, x_init=base_states[i0], start=i0
        )
        if self.dp.tracking_weight > 0:
            states = np.vstack([base_states[:i0], tail])
            return self.dp.objective(states, controls)
        return self.dp.problem.phi.value(tail[-1])

    def gradient(self, controls, base_states, base_value, eps):
        grad = np.zeros_like(controls)
        start = 1 if self.pinned is not None else 0
        for i in range(start, self.N):
            for k in range(self.d):
                pert = controls.copy()
                pert[i, k] += eps
                grad[i, k] = (self.value_from(pert, base_states, i) - base_value) / eps
        return grad


def _pg_residual(red, controls, grad):
    return float(np.max(np.abs(controls - red.clamp(controls - grad))))


def _line_search(red, controls, grad, value, opts):
    """Expand-then-backtrack projected Armijo search.

    Returns ``(new_controls, new_value, accepted)``.
    """
    def trial(alpha):
        cand = red.clamp(controls - alpha * grad)
        return cand, red.value(cand)

    def sufficient(cand, val, alpha):
        gap = float(np.sum(grad * (controls - cand)))
        return val <= value - opts.armijo_c * gap + 1e-15

    alpha = opts.step_size_init
    cand, val = trial(alpha)
    if sufficient(cand, val, alpha):
        best = (cand, val, alpha)
        for _ in range(opts.expansions):
            alpha *= 2.0
            cand, val = trial(alpha)
            if sufficient(cand, val, alpha) and val <= best[1]:
                best = (cand, val, alpha)
            else:
                break
        return best[0], best[1], True
    while alpha > 1e-16:
        alpha *= opts.backtrack
        cand, val = trial(alpha)
        if sufficient(cand, val, alpha):
            return cand, val, True
    return controls, value, False


def _compass_search(red, controls, value, step, opts):
    """One compass sweep over control coordinates; first improvement wins."""
    start = 1 if red.pinned is not None else 0
    while step >= opts.compass_min_step:
        for i in range(start, red.N):
            for k in range(red.d):
                for sgn in (1.0, -1.0):
                    cand = controls.copy()
                    cand[i, k] += sgn * step
                    cand = red.clamp(cand)
                    val = red.value(cand)
                    if val < value - 1e-15:
                        return cand, val, True
        step *= 0.5
    return controls, value, False


def _run_start(red, start_controls, opts):
    controls = red.clamp(start_controls)
    states = red.states(controls)
    value = red.dp.objective(states, controls)
    history = [value]
    iterations = 0
    failed_at_zero = False
    kkt = float("inf")
    for it in range(opts.max_iters):
        eps = opts.fd_epsilon * (1.0 + float(np.max(np.abs(controls), initial=0.0)))
        grad = red.gradient(controls, states, value, eps)
        kkt = _pg_residual(red, controls, grad)
        if kkt <= opts.stop_tol:
            iterations = it
            break
        new_controls, new_value, ok = _line_search(red, controls, grad, value, opts)
        if not ok:
            new_controls, new_value, ok = _compass_search(
                red, controls, value, max(eps * 10, 1e-4), opts
            )
        if not ok:
            if it == 0:
                failed_at_zero = True
            iterations = it
            break
        controls, value = new_controls, new_value
        states = red.states(controls)
        history.append(value)
        iterations = it + 1
    else:
        iterations = opts.max_iters
    return controls, value, iterations, kkt, history, failed_at_zero


def _build_starts(dp, opts, rng):
    """Start list: center, extreme points, caller extras, seeded draws."""
    U = dp.problem.U
    N = dp.mesh.N

    def constant(u):
        return np.tile(np.asarray(u, dtype=float), (N, 1))

    starts = [constant(U.center_point())]
    starts.extend(constant(p) for p in U.extreme_points())
    if len(starts) > opts.multistart_count:
        starts = starts[: opts.multistart_count]
    while len(starts) < opts.multistart_count:
        starts.append(np.vstack([U.sample(rng) for _ in range(N)]))
    for extra in opts.extra_starts:
        starts.append(np.asarray(extra, dtype=float).reshape(N, U.d))
    return starts


def solve(dp: DiscreteProblem, opts: SolveOptions | None = None) -> SolveResult:
    """Minimize the reduced objective over admissible control sequences.

    Every iterate is projected back onto the control set, so all reported
    controls are feasible and all reported states live in the polyhedron.

    Raises
    ------
    NoDescent
        If every start is non-stationary yet fails both the line search
        and the compass fallback at its first iteration.
    """
    opts = SolveOptions() if opts is None else opts
    red = _Reduced(dp)
    rng = np.random.default_rng(opts.seed)
    starts = _build_starts(dp, opts, rng)

    best = None
    all_failed = True
    total_iters = 0
    for idx, s0 in enumerate(starts):
        controls, value, iters, kkt, history, failed0 = _run_start(red, s0, opts)
        total_iters += iters
        if not failed0:
            all_failed = False
        key = (value, idx)
        if best is None or key < best[0]:
            best = (key, controls, kkt, history)
    if all_failed:
        raise NoDescent("every start failed to descend at its first iteration")

    _, controls, kkt, history = best
    states = red.states(controls)
    pair = DiscretePair(states=states, controls=controls)
    return SolveResult(
        pair=pair,
        objective=red.dp.objective(states, controls),
        iterations=total_iters,
        starts_used=len(starts),
        kkt_residual=kkt,
        history=history,
    )


def brute_force(dp: DiscreteProblem, grid) -> SolveResult:
    """Exhaustive lattice search over control sequences (tiny instances).

    ``grid`` is one list of admissible values per control coordinate; the
    lattice is their product and sequences are enumerated in
    lexicographic order, so ties resolve to the first optimum found.

    Raises
    ------
    SearchSpaceTooLarge
        If the sequence count exceeds ``10**7``.
    """
    d = dp.problem.U.d
    N = dp.mesh.N
    grid = [np.asarray(g, dtype=float) for g in grid]
    if len(grid) != d:
        raise ValueError("need one value list per control coordinate")
    points = [np.array(p) for p in itertools.product(*grid)]
    count = len(points) ** N
    if count > BRUTE_FORCE_CAP:
        raise SearchSpaceTooLarge(f"{count} sequences exceed the cap {BRUTE_FORCE_CAP}")

    red = _Reduced(dp)
    best_value = np.inf
    best_controls = None
    evaluated = 0
    for seq in itertools.product(points, repeat=N):
        controls = np.vstack(seq)
        if red.pinned is not None:
            controls = controls.copy()
            controls[0] = red.pinned
        value = red.value(controls)
        evaluated += 1
        if value < best_value:
            best_value = value
            best_controls = controls
    states = red.states(best_controls)
    pair = DiscretePair(states=states, controls=best_controls)
    eps = 1e-6
    grad = red.gradient(best_controls, states, best_value, eps)
    return SolveResult(
        pair=pair,
        objective=float(best_value),
        iterations=evaluated,
        starts_used=evaluated,
        kkt_residual=_pg_residual(red, best_controls, grad),
        history=[float(best_value)],
    )
