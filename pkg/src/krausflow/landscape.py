"""Objective, gradient and Hessian of the expectation value over Kraus maps.

The objective is ``J(S) = Tr[S rho S^dagger (I ⊗ Theta)]`` for diagonal
``rho`` and ``Theta``. Nothing here builds the N**3 x N**3 operator
``I ⊗ Theta``; every contraction goes through the N x N auxiliaries

* ``M = sum_j K_j^dagger Theta K_j``
* ``P = sum_j K_j^dagger Theta dK_j``
* ``B = sum_j K_j^dagger dK_j``
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .linalg import ContractViolation, DimensionError, dagger, fro_norm, hermitian_eig
from .stiefel import StiefelPoint, TangentVector, _project, blocks_of

__all__ = [
    "STATIONARY_TOL",
    "ControlProblem",
    "Canonical",
    "CriticalReport",
    "canonicalize",
    "objective",
    "objective_yform",
    "population_matrix",
    "gradient",
    "hessian_apply",
    "tangent_basis",
    "hessian_matrix",
    "critical_report",
    "dim_max_manifold",
]

STATIONARY_TOL = 1e-6
_ZERO_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class ControlProblem:
    """Diagonal initial state ``rho`` and diagonal observable ``theta``.

    ``d0`` counts the zero populations of ``rho`` and ``e1`` the
    multiplicity of the largest eigenvalue of ``theta``; both are derived.
    """

    rho: np.ndarray
    theta: np.ndarray
    d0: int = field(init=False)
    e1: int = field(init=False)

    def __post_init__(self):
        rho = np.array(self.rho, dtype=float)
        theta = np.array(self.theta, dtype=float)
        if rho.ndim != 1 or theta.shape != rho.shape:
            raise DimensionError("rho and theta must be 1-d of equal length")
        if rho.size < 1:
            raise ValueError("empty problem")
        if not (np.all(np.isfinite(rho)) and np.all(np.isfinite(theta))):
            raise ValueError("rho and theta must be finite")
        if np.any(rho < -_ZERO_TOL) or abs(rho.sum() - 1.0) > _ZERO_TOL:
            raise ContractViolation("rho must be a probability vector")
        rho.setflags(write=False)
        theta.setflags(write=False)
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "d0", int(np.sum(rho < _ZERO_TOL)))
        top = theta.max()
        object.__setattr__(self, "e1", int(np.sum(np.abs(theta - top) <= _ZERO_TOL)))

    @property
    def n(self) -> int:
        return self.rho.size

    @property
    def theta_max(self) -> float:
        return float(self.theta.max())

    @property
    def theta_min(self) -> float:
        return float(self.theta.min())

    @property
    def rho_max(self) -> float:
        return float(self.rho.max())

    def rho_matrix(self) -> np.ndarray:
        return np.diag(self.rho).astype(np.complex128)

    def theta_matrix(self) -> np.ndarray:
        return np.diag(self.theta).astype(np.complex128)


@dataclass(frozen=True, eq=False)
class Canonical:
    """Diagonal form of a general problem.

    ``rho_full = omega diag(rho) omega^dagger`` and
    ``theta_full = basis diag(theta) basis^dagger``. A Kraus operator ``K``
    of the original problem corresponds to ``basis^dagger K omega`` here,
    and the objective is unchanged under that map.
    """

    problem: ControlProblem
    omega: np.ndarray
    basis: np.ndarray

    def to_canonical(self, s) -> StiefelPoint:
        k = blocks_of(s)
        return StiefelPoint(dagger(self.basis) @ k @ self.omega)

    def __iter__(self):
        # unpacks as (problem, omega)
        return iter((self.problem, self.omega))


def _diagonal_or_eig(a: np.ndarray, descending: bool):
    off = a - np.diag(np.diagonal(a))
    if fro_norm(off) <= 1e-14 * max(1.0, fro_norm(a)):
        return np.real(np.diagonal(a)).copy(), np.eye(a.shape[0], dtype=np.complex128)
    spec = hermitian_eig(a)
    w, v = spec.eigenvalues, spec.eigenvectors
    if not descending:
        w, v = w[::-1], v[:, ::-1]
    return w.copy(), v.copy()


def canonicalize(rho_full, theta_full) -> Canonical:
    """Diagonalize a general state/observable pair.

    The observable's eigenvalues come out ascending so the largest sits in the
    trailing slot; already diagonal inputs are kept as they are.
    """
    rho_full = np.asarray(rho_full, dtype=np.complex128)
    theta_full = np.asarray(theta_full, dtype=np.complex128)
    n = rho_full.shape[0]
    if rho_full.shape != (n, n) or theta_full.shape != (n, n):
        raise DimensionError("rho and theta must be square matrices of equal size")
    if fro_norm(rho_full - dagger(rho_full)) > 1e-10 or fro_norm(theta_full - dagger(theta_full)) > 1e-10:
        raise ContractViolation("inputs must be Hermitian")
    if abs(np.trace(rho_full) - 1.0) > 1e-10:
        raise ContractViolation("rho must have unit trace")
    rho, omega = _diagonal_or_eig(rho_full, descending=True)
    if rho.min() < -1e-10:
        raise ContractViolation("rho must be positive semidefinite")
    rho = np.clip(rho, 0.0, None)
    rho[np.abs(rho) < _ZERO_TOL] = 0.0
    rho /= rho.sum()
    theta, basis = _diagonal_or_eig(theta_full, descending=False)
    return Canonical(ControlProblem(rho, theta), omega, basis)


def _check(k: np.ndarray, p: ControlProblem):
    if k.shape[1] != p.n:
        raise DimensionError(f"point has N={k.shape[1]} but problem has N={p.n}")


def objective(s, p: ControlProblem) -> float:
    """``sum_i Tr[K_i rho K_i^dagger Theta]``."""
    k = blocks_of(s)
    _check(k, p)
    out = k @ p.rho_matrix() @ dagger(k) @ p.theta_matrix()
    return float(np.real(np.trace(out, axis1=1, axis2=2).sum()))


def population_matrix(s) -> np.ndarray:
    """``P[j, i] = ||Y_j^i||^2 = sum_l |(K_l)_{ji}|^2``."""
    k = blocks_of(s)
    return np.sum(np.abs(k) ** 2, axis=0)


def objective_yform(s, p: ControlProblem) -> float:
    """``sum_{i,j} ||Y_j^i||^2 rho_i theta_j`` from the population matrix."""
    k = blocks_of(s)
    _check(k, p)
    return float(p.theta @ population_matrix(k) @ p.rho)


def _m_matrix(k: np.ndarray, theta: np.ndarray) -> np.ndarray:
    return np.einsum("iab,a,iac->bc", k.conj(), theta, k)


def _gradient_blocks(k: np.ndarray, rho: np.ndarray, theta: np.ndarray) -> np.ndarray:
    m = _m_matrix(k, theta)
    mr = m * rho[np.newaxis, :]
    sym = mr + rho[:, np.newaxis] * m
    return 2.0 * theta[:, np.newaxis] * k * rho[np.newaxis, :] - k @ sym


def gradient(s, p: ControlProblem) -> TangentVector:
    """Riemannian gradient; block i is ``2 Theta K_i rho - K_i (M rho + rho M)``."""
    k = blocks_of(s)
    _check(k, p)
    return TangentVector(_gradient_blocks(k, p.rho, p.theta))


def _hessian_general(k, dk, rho, theta):
    m = _m_matrix(k, theta)
    pm = np.einsum("iab,a,iac->bc", k.conj(), theta, dk)
    pd = dagger(pm)
    r = np.diag(rho)
    lead = 2.0 * theta[:, np.newaxis] * dk * rho[np.newaxis, :]
    ambient = (
        lead
        - dk @ (m @ r)
        - k @ (pd @ r)
        - k @ (pm @ r)
        - dk @ (r @ m)
        - k @ (r @ pd)
        - k @ (r @ pm)
    )
    return _project(k, ambient)


def _hessian_critical(k, dk, rho, theta):
    m = _m_matrix(k, theta)
    pm = np.einsum("iab,a,iac->bc", k.conj(), theta, dk)
    b = np.einsum("iab,iac->bc", k.conj(), dk)
    r = np.diag(rho)
    theta_k = theta[:, np.newaxis] * k
    return (
        2.0 * theta[:, np.newaxis] * dk * rho[np.newaxis, :]
        - dk @ (m @ r)
        - dk @ (r @ m)
        - k @ (pm @ r)
        + k @ (b @ m @ r)
        - k @ (r @ dagger(pm))
        + theta_k @ (r @ dagger(b))
    )


def hessian_apply(
    s, p: ControlProblem, v, form: Literal["general", "critical"] = "general"
) -> TangentVector:
    """Riemannian Hessian of the objective applied to a tangent vector.

    ``general`` projects the ambient covariant derivative of the gradient
    and is valid at every point. ``critical`` evaluates the reduced
    seven-term expression, which only holds where the gradient vanishes.
    """
    k = blocks_of(s)
    dk = blocks_of(v)
    _check(k, p)
    if dk.shape != k.shape:
        raise DimensionError(f"shape mismatch {dk.shape} vs {k.shape}")
    if form == "general":
        return TangentVector(_hessian_general(k, dk, p.rho, p.theta))
    if form == "critical":
        g = fro_norm(_gradient_blocks(k, p.rho, p.theta))
        if g > STATIONARY_TOL:
            raise ContractViolation(f"critical form needs a stationary point (|grad| = {g:.3g})")
        return TangentVector(_hessian_critical(k, dk, p.rho, p.theta))
    raise ValueError(f"unknown Hessian form {form!r}")


# -- second-order analysis --------------------------------------------------

MAX_REPORT_N = 4


class CapabilityError(ValueError):
    """Requested size is outside what the dense analysis supports."""


@dataclass(frozen=True)
class CriticalReport:
    gradient_norm: float
    hessian_eigenvalues: np.ndarray
    classification: str
    null_dimension: int


def _real_to_blocks(x: np.ndarray, n: int) -> np.ndarray:
    half = x.size // 2
    return (x[:half] + 1j * x[half:]).reshape(n * n, n, n)


def _blocks_to_real(b: np.ndarray) -> np.ndarray:
    flat = b.reshape(-1)
    return np.concatenate([flat.real, flat.imag])


def tangent_basis(s) -> np.ndarray:
    """Orthonormal real basis of T_S as columns of a ``2N^4 x (2N^4 - N^2)`` array."""
    k = blocks_of(s)
    n = k.shape[1]
    dim = 2 * n**4
    cols = np.empty((dim, dim))
    eye = np.eye(dim)
    for j in range(dim):
        cols[:, j] = _blocks_to_real(_project(k, _real_to_blocks(eye[:, j], n)))
    w, v = np.linalg.eigh(0.5 * (cols + cols.T))
    return v[:, w > 0.5]


def hessian_matrix(s, p: ControlProblem, basis: np.ndarray | None = None) -> np.ndarray:
    """Hessian in an orthonormal real tangent basis (symmetrized)."""
    k = blocks_of(s)
    n = k.shape[1]
    if basis is None:
        basis = tangent_basis(k)
    images = np.column_stack(
        [_blocks_to_real(_hessian_general(k, _real_to_blocks(b, n), p.rho, p.theta)) for b in basis.T]
    )
    h = basis.T @ images
    return 0.5 * (h + h.T)


def critical_report(
    s, p: ControlProblem, stationary_tol: float = STATIONARY_TOL, null_tol: float = 1e-6
) -> CriticalReport:
    """Gradient norm and tangent-space Hessian spectrum at a point.

    ``null_tol`` is relative to the largest eigenvalue magnitude, with a
    floor at rounding level so a vanishing Hessian counts as all null.
    """
    k = blocks_of(s)
    _check(k, p)
    if k.shape[1] > MAX_REPORT_N:
        raise CapabilityError(f"dense Hessian analysis supports N <= {MAX_REPORT_N}")
    gnorm = fro_norm(_gradient_blocks(k, p.rho, p.theta))
    eig = np.linalg.eigvalsh(hessian_matrix(k, p))[::-1]
    scale = float(np.max(np.abs(eig))) if eig.size else 0.0
    cut = max(null_tol * scale, _ZERO_TOL)
    null_dim = int(np.sum(np.abs(eig) <= cut))
    if gnorm > stationary_tol:
        kind = "nonstationary"
    elif np.all(eig <= cut):
        kind = "max"
    else:
        kind = "saddle-or-min"
    return CriticalReport(gnorm, eig, kind, null_dim)


def dim_max_manifold(n: int, d0: int, e1: int) -> int:
    """Real dimension of the set of optimal controls: ``2(d0+e1)N^3 - (2 d0 e1 + 1)N^2``."""
    if n < 1 or not 0 <= d0 <= n - 1 or not 1 <= e1 <= n:
        raise ValueError(f"invalid degeneracies d0={d0}, e1={e1} for N={n}")
    return 2 * (d0 + e1) * n**3 - (2 * d0 * e1 + 1) * n**2
