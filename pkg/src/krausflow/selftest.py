"""Quick invariant checks run by ``krausflow selftest``."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .constraints import build_element_fixing, constrained_project, feasibility_descent
from .flow import FlowConfig, flow_ascent, flow_unitary
from .landscape import ControlProblem, dim_max_manifold, gradient, objective
from .linalg import hs_inner
from .sampling import SeededStream, haar_unitary, random_rho, random_theta
from .stiefel import distance_to_unitary_submanifold, random_stiefel, tangent_project

__all__ = ["CHECKS", "run_selftest"]


def _gradient_fd(rng) -> float:
    worst = 0.0
    for n in (2, 3):
        p = ControlProblem(random_rho(n, 0, rng), random_theta(n, 1))
        s = random_stiefel(n, rng)
        d = tangent_project(s, rng.standard_normal(s.blocks.shape) + 1j * rng.standard_normal(s.blocks.shape)).blocks
        h = 1e-5
        fd = (objective(s.blocks + h * d, p) - objective(s.blocks - h * d, p)) / (2 * h)
        an = hs_inner(gradient(s, p).blocks, d)
        worst = max(worst, abs(fd - an) / max(abs(an), 1e-12))
    return worst


def _projector(rng) -> float:
    s = random_stiefel(3, rng)
    a = rng.standard_normal(s.blocks.shape) + 1j * rng.standard_normal(s.blocks.shape)
    pa = tangent_project(s, a).blocks
    return float(np.linalg.norm(tangent_project(s, pa).blocks - pa))


def _drift(rng) -> float:
    p = ControlProblem(random_rho(4, 0, rng), random_theta(4, 1))
    tr = flow_ascent(random_stiefel(4, rng), p, FlowConfig())
    return max(tr.drift_series) if tr.converged else float("inf")


def _unitary(rng) -> float:
    # flow_unitary raises if the trajectory leaves the submanifold
    p = ControlProblem(np.array([0.7, 0.3]), np.array([0.0, 1.0]))
    tr = flow_unitary(haar_unitary(2, rng), p)
    if not tr.converged or distance_to_unitary_submanifold(tr.final_point) > 1e-6:
        return float("inf")
    return abs(tr.j_final - 0.7)


def _constraints(rng) -> float:
    cs = build_element_fixing(3, [3], [1])
    fr = feasibility_descent(random_stiefel(3, rng), cs)
    if not fr.feasible:
        return float("inf")
    v = rng.standard_normal(fr.point.blocks.shape) + 1j * rng.standard_normal(fr.point.blocks.shape)
    pv = constrained_project(fr.point, cs, v).blocks
    return float(np.max(np.abs(cs.values(pv))))


def _dimension(_rng) -> float:
    return float(abs(dim_max_manifold(2, 1, 1) - 20))


# name, check, tolerance on the returned error
CHECKS: list[tuple[str, Callable, float]] = [
    ("gradient matches finite differences", _gradient_fd, 1e-6),
    ("tangent projector is idempotent", _projector, 1e-10),
    ("flow keeps orthonormality drift bounded", _drift, 2e-4),
    ("coherent flow reaches rho_max", _unitary, 0.011),
    ("constrained projector keeps constraints", _constraints, 1e-9),
    ("optimal set dimension at N=2", _dimension, 0.0),
]


def run_selftest(seed: int = 0) -> list[tuple[str, bool, float]]:
    out = []
    for i, (name, fn, tol) in enumerate(CHECKS):
        err = fn(SeededStream(seed, i).generator())
        out.append((name, bool(err <= tol), float(err)))
    return out
