"""Problem files: TOML documents describing one sweeping control instance.

Sections
--------
``[polyhedron]``   generators (list of rows), offsets
``[control_set]``  kind = "box" | "finite" | "ball" plus parameters
``[perturbation]`` kind = "control" | "affine" (G, B, b)
``[cost]``         kind = "linear" | "quadratic" | "half_norm_sq"
``[problem]``      x0, horizon
``[control]``      optional: breakpoints, values (piecewise constant)
``[solver]``       optional: multistart, seed, max_iters, stop_tol, ...
``[certificate]``  optional: lambda, p, q, psi, eta, eta_final, gamma

Certificate vector fields accept either a single vector (constant in
time) or one row per node / interval.  ``psi`` and ``gamma`` are stated
as rates: the discrete stationarity covector is ``h * psi`` and the
per-interval measure mass is ``h * generators.T @ gamma``.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .conditions import ContinuousDuals, DualBundle
from .discretize import Mesh
from .dynamics import BVControl, ControlSet, CostFunction, PerturbationMap, SweepingProblem
from .errors import Infeasible, MissingSection, ParseError
from .geometry import Polyhedron


@dataclass
class ProblemFile:
    """Parsed problem document."""

    problem: SweepingProblem
    control: BVControl | None
    solver_options: dict
    certificate: dict | None
    path: str


def _find_line(text, key):
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if stripped.startswith(key) or stripped.startswith(f"[{key}]"):
            return lineno
    return None


def _require(doc, section, path, text):
    if section not in doc:
        raise MissingSection(f"missing required section [{section}]", path=path)
    return doc[section]


def _get(table, key, section, path, text):
    if key not in table:
        raise ParseError(
            f"section [{section}] is missing key {key!r}",
            path=path,
            line=_find_line(text, section),
        )
    return table[key]


def load_problem_file(path) -> ProblemFile:
    """Parse and validate a problem file.

    Raises :class:`ParseError` (with a location when known) on malformed
    input and :class:`MissingSection` when a required section is absent.
    """
    path = str(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    text = raw.decode("utf-8", errors="replace")
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ParseError(f"invalid TOML: {exc}", path=path) from exc

    poly_tab = _require(doc, "polyhedron", path, text)
    try:
        C = Polyhedron(
            _get(poly_tab, "generators", "polyhedron", path, text),
            _get(poly_tab, "offsets", "polyhedron", path, text),
        )
    except (ValueError, Infeasible) as exc:
        raise ParseError(
            f"bad polyhedron: {exc}", path=path, line=_find_line(text, "polyhedron")
        ) from exc

    cs_tab = _require(doc, "control_set", path, text)
    kind = _get(cs_tab, "kind", "control_set", path, text)
    try:
        if kind == "box":
            U = ControlSet.box(cs_tab["lower"], cs_tab["upper"])
        elif kind == "finite":
            U = ControlSet.finite(cs_tab["points"])
        elif kind == "ball":
            U = ControlSet.ball(cs_tab["center"], cs_tab["radius"])
        else:
            raise ValueError(f"unknown control set kind {kind!r}")
    except (KeyError, ValueError) as exc:
        raise ParseError(
            f"bad control_set: {exc}", path=path, line=_find_line(text, "control_set")
        ) from exc

    pert_tab = _require(doc, "perturbation", path, text)
    pkind = _get(pert_tab, "kind", "perturbation", path, text)
    try:
        if pkind == "control":
            g = PerturbationMap.control_only(C.n)
        elif pkind == "affine":
            g = PerturbationMap.affine(
                pert_tab.get("G", np.zeros((C.n, C.n))),
                pert_tab["B"],
                pert_tab.get("b"),
            )
        else:
            raise ValueError(f"unknown perturbation kind {pkind!r}")
    except (KeyError, ValueError) as exc:
        raise ParseError(
            f"bad perturbation: {exc}", path=path, line=_find_line(text, "perturbation")
        ) from exc

    cost_tab = _require(doc, "cost", path, text)
    ckind = _get(cost_tab, "kind", "cost", path, text)
    try:
        if ckind == "linear":
            phi = CostFunction.linear(cost_tab["a"])
        elif ckind == "quadratic":
            phi = CostFunction.quadratic(cost_tab["Q"], cost_tab.get("a"))
        elif ckind == "half_norm_sq":
            phi = CostFunction.half_norm_sq()
        else:
            raise ValueError(f"unknown cost kind {ckind!r}")
    except (KeyError, ValueError) as exc:
        raise ParseError(
            f"bad cost: {exc}", path=path, line=_find_line(text, "cost")
        ) from exc

    prob_tab = _require(doc, "problem", path, text)
    try:
        problem = SweepingProblem(
            C=C,
            U=U,
            g=g,
            phi=phi,
            x0=_get(prob_tab, "x0", "problem", path, text),
            T=_get(prob_tab, "horizon", "problem", path, text),
        )
    except ValueError as exc:
        raise ParseError(
            f"bad problem data: {exc}", path=path, line=_find_line(text, "problem")
        ) from exc

    control = None
    if "control" in doc:
        ctab = doc["control"]
        try:
            control = BVControl(
                _get(ctab, "breakpoints", "control", path, text),
                _get(ctab, "values", "control", path, text),
                control_set=U,
            )
        except ValueError as exc:
            raise ParseError(
                f"bad control: {exc}", path=path, line=_find_line(text, "control")
            ) from exc

    return ProblemFile(
        problem=problem,
        control=control,
        solver_options=dict(doc.get("solver", {})),
        certificate=dict(doc["certificate"]) if "certificate" in doc else None,
        path=path,
    )


def _expand(field, rows, width, name):
    """Broadcast a constant vector to ``rows`` samples, or pass rows through."""
    arr = np.asarray(field, dtype=float)
    if arr.ndim == 1:
        if arr.size != width:
            raise ParseError(f"certificate field {name!r} must have {width} entries")
        return np.tile(arr, (rows, 1))
    if arr.shape != (rows, width):
        raise ParseError(
            f"certificate field {name!r} must be a {width}-vector or a {rows}x{width} table"
        )
    return arr


def certificate_to_bundle(cert: dict, mesh: Mesh, problem: SweepingProblem) -> DualBundle:
    """Build the discrete multiplier bundle a certificate describes.

    The stationarity covector scales with the mesh step: the file stores
    the rate ``psi(t)`` and the discrete covector is ``h * psi``.
    """
    N = mesh.N
    n, d, s = problem.C.n, problem.U.d, problem.C.s
    lam = float(cert.get("lambda", 1.0))
    p = _expand(cert.get("p", np.zeros(n)), N + 1, n, "p")
    psi = mesh.h * _expand(cert.get("psi", np.zeros(d)), N, d, "psi")
    eta_rows = _expand(cert.get("eta", np.zeros(s)), N + 1, s, "eta")
    if "eta_final" in cert:
        eta_rows = eta_rows.copy()
        eta_rows[-1] = np.asarray(cert["eta_final"], dtype=float)
    gamma = _expand(cert.get("gamma", np.zeros(s)), N, s, "gamma")
    return DualBundle(
        lam=lam,
        p=p,
        eta=eta_rows,
        gamma=gamma,
        psi=psi,
        theta_y=np.zeros((N, n)),
        theta_u=np.zeros((N, d)),
    )


def certificate_to_continuous(
    cert: dict, mesh: Mesh, problem: SweepingProblem
) -> ContinuousDuals:
    """Build continuous-time dual samples from a certificate.

    ``q`` defaults to ``p`` minus the tail of the measure described by
    ``gamma`` (interpreted as a generator-weighted density) and
    ``gamma_atoms`` entries of the form ``[t, mass...]``.
    """
    N = mesh.N
    n, d, s = problem.C.n, problem.U.d, problem.C.s
    times = mesh.nodes
    lam = float(cert.get("lambda", 1.0))
    p = _expand(cert.get("p", np.zeros(n)), N + 1, n, "p")
    psi = _expand(cert.get("psi", np.zeros(d)), N + 1, d, "psi")
    eta = _expand(cert.get("eta", np.zeros(s)), N + 1, s, "eta")
    if "eta_final" in cert:
        eta = eta.copy()
        eta[-1] = np.asarray(cert["eta_final"], dtype=float)
    gamma_rate = _expand(cert.get("gamma", np.zeros(s)), N, s, "gamma")
    interval_mass = np.vstack(
        [mesh.h * (problem.C.generators.T @ gamma_rate[i]) for i in range(N)]
    )
    atoms = [
        (float(entry[0]), np.asarray(entry[1:], dtype=float))
        for entry in cert.get("gamma_atoms", [])
    ]
    duals = ContinuousDuals(
        lam=lam,
        times=times,
        p=p,
        q=p.copy(),
        psi=psi,
        eta=eta,
        gamma_atoms=atoms,
        gamma_intervals=interval_mass,
    )
    if "q" in cert:
        duals.q = _expand(cert["q"], N + 1, n, "q")
    else:
        duals.q = np.vstack([p[i] - duals.tail_mass(times[i]) for i in range(N + 1)])
    return duals
