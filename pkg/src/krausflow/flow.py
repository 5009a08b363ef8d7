"""Adaptive Runge-Kutta integration of gradient flows on the Stiefel manifold.

The integrator is the Dormand-Prince 5(4) pair with local extrapolation. A
step is accepted when the Frobenius norm of the embedded error estimate is
at most ``abs_tol + rel_tol * ||S||``. After each accepted step the
orthonormality drift is measured and the polar retraction is applied when
it exceeds ``drift_repair_threshold``.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from typing import Protocol

import numpy as np

from .landscape import ControlProblem, _gradient_blocks, objective_yform
from .linalg import ContractViolation, DegenerateInputError, fro_norm
from .stiefel import (
    DRIFT_HARD_LIMIT,
    StiefelPoint,
    _retract_blocks,
    blocks_of,
    distance_to_unitary_submanifold,
    drift,
    unitary_point,
)

__all__ = [
    "FlowConfig",
    "Trajectory",
    "IntegrationFailure",
    "InvarianceViolation",
    "VectorField",
    "FullGradient",
    "integrate",
    "flow_ascent",
    "flow_unitary",
    "UNITARY_DRIFT_THRESHOLD",
]

# Dormand-Prince 5(4) tableau
_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_B5 = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0)
_B4 = (5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40)
_E = tuple(b5 - b4 for b5, b4 in zip(_B5, _B4))

# distance to the unitary submanifold equals the drift there, so the
# coherent flow repairs drift well below its 1e-6 invariance bound
UNITARY_DRIFT_THRESHOLD = 5e-7


class IntegrationFailure(RuntimeError):
    """Drift could not be contained or the state became non-finite."""


class InvarianceViolation(RuntimeError):
    """A coherent-control trajectory left the unitary submanifold."""


@dataclass(frozen=True)
class FlowConfig:
    """Stopping rules and tolerances for one trajectory.

    ``target_value`` defaults to the largest observable eigenvalue. When
    ``grad_tol`` is set the flow also counts as converged once the norm of
    the vector field drops below it.
    """

    stop_eps: float = 0.01
    target_value: float | None = None
    rel_tol: float = 1e-6
    abs_tol: float = 1e-9
    drift_repair_threshold: float = 1e-5
    drift_hard_limit: float = DRIFT_HARD_LIMIT
    max_steps: int = 100_000
    max_sigma: float = 1e6
    initial_step: float = 1e-3
    grad_tol: float | None = None
    record: bool = False

    def __post_init__(self):
        if not self.stop_eps > 0:
            raise ValueError("stop_eps must be positive")
        if not self.drift_repair_threshold < self.drift_hard_limit:
            raise ValueError("drift_repair_threshold must be below drift_hard_limit")
        if self.max_steps < 0 or self.initial_step <= 0:
            raise ValueError("invalid step budget")


@dataclass
class Trajectory:
    """Outcome of one flow.

    The series hold one entry per observed state, starting with the
    initial point, so they have ``tau + 1`` entries. ``step_lengths`` are the
    per-step displacements summed into ``lam``.
    """

    tau: int
    lam: float
    objective_series: list[float]
    drift_series: list[float]
    sigma_series: list[float]
    step_series: list[float]
    step_lengths: list[float]
    sigma_final: float
    converged: bool
    final_point: StiefelPoint
    reason: str
    next_step: float
    rejected: int = 0
    field_norm: float = float("nan")

    @property
    def j_initial(self) -> float:
        return self.objective_series[0]

    @property
    def j_final(self) -> float:
        return self.objective_series[-1]

    def to_csv(self) -> str:
        """Per-step record ``sigma,J,drift,step_size``."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sigma", "J", "drift", "step_size"])
        for row in zip(self.sigma_series, self.objective_series, self.drift_series, self.step_series):
            w.writerow([repr(float(x)) for x in row])
        return buf.getvalue()


class VectorField(Protocol):
    """What :func:`integrate` needs from a flow."""

    def rate(self, k: np.ndarray) -> np.ndarray: ...

    def value(self, k: np.ndarray) -> float: ...

    def finished(self, k: np.ndarray, value: float) -> bool: ...

    def after_step(self, k: np.ndarray) -> np.ndarray: ...


@dataclass
class FullGradient:
    """``dS/dsigma = grad J(S)``, stopping at ``target - stop_eps``."""

    problem: ControlProblem
    target: float
    stop_eps: float

    def rate(self, k):
        return _gradient_blocks(k, self.problem.rho, self.problem.theta)

    def value(self, k):
        return objective_yform(k, self.problem)

    def finished(self, k, value):
        return value > self.target - self.stop_eps

    def after_step(self, k):
        return k


def _rk_step(f, k, h):
    stages = [f(k)]
    for i in range(1, 7):
        acc = k.copy()
        for a, st in zip(_A[i], stages):
            if a != 0.0:
                acc += (h * a) * st
        stages.append(f(acc))
    new = k.copy()
    for b, st in zip(_B5, stages):
        if b != 0.0:
            new += (h * b) * st
    err = np.zeros_like(k)
    for e, st in zip(_E, stages):
        if e != 0.0:
            err += (h * e) * st
    return new, fro_norm(err)


def integrate(
    s0,
    vf: VectorField,
    cfg: FlowConfig,
    monitor=None,
) -> Trajectory:
    """Integrate ``dS/dsigma = vf.rate(S)`` until ``vf.finished`` or a budget runs out.

    ``monitor(k)`` is called on every accepted state, including the first.
    """
    k = np.array(blocks_of(s0), dtype=np.complex128)
    h = cfg.initial_step
    sigma = 0.0
    tau = 0
    rejected = 0
    lam = 0.0
    val = vf.value(k)
    d0 = drift(k)
    objs, drifts, sigmas, steps, lengths = [val], [d0], [0.0], [0.0], []
    if monitor is not None:
        monitor(k)

    def done(k, val):
        if vf.finished(k, val):
            return True
        if cfg.grad_tol is not None:
            return fro_norm(vf.rate(k)) <= cfg.grad_tol
        return False

    converged = done(k, val)
    reason = "converged" if converged else ""
    while not converged:
        if tau >= cfg.max_steps:
            reason = "max_steps"
            break
        if sigma >= cfg.max_sigma:
            reason = "max_sigma"
            break
        # the mixed test uses the current state, so a run split at any
        # accepted step and resumed with ``next_step`` continues identically
        tol = cfg.abs_tol + cfg.rel_tol * fro_norm(k)
        new, err = _rk_step(vf.rate, k, h)
        if not (math.isfinite(err) and np.all(np.isfinite(new))):
            if h < 1e-14:
                raise IntegrationFailure("non-finite state")
            h *= 0.2
            rejected += 1
            continue
        factor = 5.0 if err == 0.0 else min(5.0, max(0.2, 0.9 * (tol / err) ** 0.2))
        if err > tol:
            h *= min(factor, 0.9)
            rejected += 1
            if h < 1e-14:
                raise IntegrationFailure("step size underflow")
            continue
        sigma += h
        tau += 1
        used = h
        h *= factor
        if drift(new) > cfg.drift_repair_threshold:
            try:
                new = _retract_blocks(new)
            except (ContractViolation, DegenerateInputError) as exc:
                raise IntegrationFailure(f"drift repair failed: {exc}") from exc
        new = vf.after_step(new)
        d = drift(new)
        if not d < cfg.drift_hard_limit:
            raise IntegrationFailure(f"drift {d:.3g} exceeds {cfg.drift_hard_limit:.3g}")
        step_len = fro_norm(new - k)
        lam += step_len
        k = new
        val = vf.value(k)
        objs.append(val)
        drifts.append(d)
        sigmas.append(sigma)
        steps.append(used)
        lengths.append(step_len)
        if monitor is not None:
            monitor(k)
        if done(k, val):
            converged = True
            reason = "converged"
    return Trajectory(
        tau=tau,
        lam=lam,
        objective_series=objs,
        drift_series=drifts,
        sigma_series=sigmas,
        step_series=steps,
        step_lengths=lengths,
        sigma_final=sigma,
        converged=converged,
        final_point=StiefelPoint(k),
        reason=reason,
        next_step=h,
        rejected=rejected,
        field_norm=fro_norm(vf.rate(k)),
    )


def flow_ascent(s0, p: ControlProblem, cfg: FlowConfig = FlowConfig(), vector_field="full_gradient", monitor=None) -> Trajectory:
    """Gradient ascent flow of the objective from ``s0``.

    ``vector_field`` is ``"full_gradient"`` or any :class:`VectorField`, such
    as the constrained fields from :mod:`krausflow.constraints`.
    """
    target = p.theta_max if cfg.target_value is None else cfg.target_value
    if isinstance(vector_field, str):
        if vector_field != "full_gradient":
            raise ValueError(f"unknown vector field {vector_field!r}")
        vf = FullGradient(p, target, cfg.stop_eps)
    else:
        vf = vector_field
    return integrate(s0, vf, cfg, monitor=monitor)


def flow_unitary(
    u0, p: ControlProblem, cfg: FlowConfig = FlowConfig(), tol: float = 1e-6, monitor=None
) -> Trajectory:
    """Coherent-control flow started on the unitary submanifold.

    Targets ``rho_max`` and checks at every accepted state that the
    trajectory stays within ``tol`` of the submanifold. ``monitor(k)``, if
    given, is called after that check.
    """
    cfg = replace(
        cfg,
        target_value=p.rho_max,
        drift_repair_threshold=min(cfg.drift_repair_threshold, UNITARY_DRIFT_THRESHOLD),
    )

    def check(k):
        dist = distance_to_unitary_submanifold(k)
        if dist > tol:
            raise InvarianceViolation(f"left the unitary submanifold (distance {dist:.3g})")
        if monitor is not None:
            monitor(k)

    return flow_ascent(unitary_point(u0), p, cfg, monitor=check)
