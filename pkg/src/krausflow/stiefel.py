"""Stacked Kraus operators as points of the complex Stiefel manifold.

A point for an N-level system holds N**2 Kraus operators of size N x N in an
array of shape ``(N**2, N, N)``. Flattening stacks the blocks vertically into
the N**3 x N matrix ``S`` with ``S^dagger S = I``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import (
    ContractViolation,
    DegenerateInputError,
    DimensionError,
    dagger,
    fro_norm,
    qr_phase_fixed,
)

__all__ = [
    "DRIFT_HARD_LIMIT",
    "StiefelPoint",
    "TangentVector",
    "WTransform",
    "gram",
    "drift",
    "flatten",
    "unflatten",
    "tangent_project",
    "retract",
    "apply_w",
    "random_stiefel",
    "unitary_point",
    "distance_to_unitary_submanifold",
    "channel",
]

DRIFT_HARD_LIMIT = 2e-4


def _check_blocks(blocks: np.ndarray) -> int:
    if blocks.ndim != 3 or blocks.shape[1] != blocks.shape[2]:
        raise DimensionError(f"blocks must have shape (N^2, N, N), got {blocks.shape}")
    n = blocks.shape[1]
    if blocks.shape[0] != n * n:
        raise DimensionError(f"expected {n * n} blocks for N={n}, got {blocks.shape[0]}")
    return n


@dataclass(frozen=True, eq=False)
class StiefelPoint:
    """N**2 stacked Kraus operators satisfying ``sum_i K_i^dagger K_i = I``."""

    blocks: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.blocks, dtype=np.complex128)
        _check_blocks(b)
        if not np.all(np.isfinite(b)):
            raise ValueError("Stiefel point has non-finite entries")
        b.setflags(write=False)
        object.__setattr__(self, "blocks", b)

    @property
    def n(self) -> int:
        return self.blocks.shape[1]

    @property
    def matrix(self) -> np.ndarray:
        return flatten(self)

    def drift(self) -> float:
        return drift(self.blocks)

    def validate(self, tol: float = DRIFT_HARD_LIMIT) -> "StiefelPoint":
        d = self.drift()
        if not d < tol:
            raise ContractViolation(f"||S^dagger S - I|| = {d:.3g} exceeds {tol:.3g}")
        return self


@dataclass(frozen=True, eq=False)
class TangentVector:
    """A displacement stacked like a :class:`StiefelPoint`."""

    blocks: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.blocks, dtype=np.complex128)
        _check_blocks(b)
        b.setflags(write=False)
        object.__setattr__(self, "blocks", b)

    @property
    def n(self) -> int:
        return self.blocks.shape[1]

    def norm(self) -> float:
        return fro_norm(self.blocks)


@dataclass(frozen=True, eq=False)
class WTransform:
    """Mixing ``K~_j = sum_i u[j, i] K_i`` by an N**2 x N**2 unitary."""

    u: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.u, dtype=np.complex128)
        if u.ndim != 2 or u.shape[0] != u.shape[1]:
            raise DimensionError(f"mixing matrix must be square, got {u.shape}")
        if fro_norm(dagger(u) @ u - np.eye(u.shape[0])) > 1e-10:
            raise ContractViolation("mixing matrix is not unitary")
        u.setflags(write=False)
        object.__setattr__(self, "u", u)


def blocks_of(x) -> np.ndarray:
    """Block array of a point, a tangent vector, or a raw array."""
    if isinstance(x, (StiefelPoint, TangentVector)):
        return x.blocks
    return np.asarray(x, dtype=np.complex128)


def gram(k) -> np.ndarray:
    """``S^dagger S`` computed blockwise as ``sum_i K_i^dagger K_i``."""
    k = blocks_of(k)
    return np.einsum("iab,iac->bc", k.conj(), k)


def drift(k) -> float:
    """Frobenius distance of ``S^dagger S`` from the identity."""
    k = blocks_of(k)
    return fro_norm(gram(k) - np.eye(k.shape[1]))


def flatten(s) -> np.ndarray:
    """The N**3 x N Stiefel matrix; block i occupies rows ``i*N ... i*N + N - 1``."""
    k = blocks_of(s)
    return k.reshape(-1, k.shape[2])


def unflatten(matrix) -> StiefelPoint:
    m = np.asarray(matrix, dtype=np.complex128)
    n = m.shape[1]
    if m.ndim != 2 or m.shape[0] != n**3:
        raise DimensionError(f"expected an N^3 x N matrix, got {m.shape}")
    return StiefelPoint(m.reshape(n * n, n, n))


def _project(k: np.ndarray, a: np.ndarray) -> np.ndarray:
    c = np.einsum("iab,iac->bc", k.conj(), a)
    return a - k @ (0.5 * (c + dagger(c)))


def tangent_project(s, a) -> TangentVector:
    """Orthogonal projection ``A - S (S^dagger A + A^dagger S) / 2`` onto T_S."""
    k = blocks_of(s)
    a = blocks_of(a)
    if a.shape != k.shape:
        raise DimensionError(f"shape mismatch {a.shape} vs {k.shape}")
    return TangentVector(_project(k, a))


def _retract_blocks(k: np.ndarray) -> np.ndarray:
    g = gram(k)
    n = k.shape[1]
    if fro_norm(g - np.eye(n)) > 0.5:
        raise ContractViolation("point too far from the manifold to retract")
    w, v = np.linalg.eigh(g)
    if w[0] < 1e-12:
        raise DegenerateInputError("S^dagger S is singular")
    inv_sqrt = (v / np.sqrt(w)) @ dagger(v)
    return k @ inv_sqrt


def retract(s) -> StiefelPoint:
    """Polar retraction ``S (S^dagger S)^(-1/2)``: the nearest orthonormal frame."""
    return StiefelPoint(_retract_blocks(blocks_of(s)))


def apply_w(w: WTransform | np.ndarray, s) -> StiefelPoint:
    u = w.u if isinstance(w, WTransform) else WTransform(w).u
    k = blocks_of(s)
    if u.shape[0] != k.shape[0]:
        raise DimensionError(f"mixing matrix of size {u.shape[0]} for {k.shape[0]} blocks")
    return StiefelPoint(np.einsum("ji,iab->jab", u, k))


def random_stiefel(n: int, rng: np.random.Generator) -> StiefelPoint:
    """Sample from the invariant (uniform) measure on the Stiefel manifold."""
    if n < 2:
        raise ValueError("dimension must be at least 2")
    while True:
        z = rng.standard_normal((n**3, n)) + 1j * rng.standard_normal((n**3, n))
        try:
            q, _ = qr_phase_fixed(z)
        except DegenerateInputError:  # pragma: no cover - probability zero
            continue
        return unflatten(q)


def unitary_point(u) -> StiefelPoint:
    """The coherent-control point with every Kraus operator equal to ``U / N``."""
    u = np.asarray(u, dtype=np.complex128)
    n = u.shape[0]
    if u.shape != (n, n) or fro_norm(dagger(u) @ u - np.eye(n)) > 1e-10:
        raise ContractViolation("input is not a unitary matrix")
    return StiefelPoint(np.broadcast_to(u / n, (n * n, n, n)).copy())


def distance_to_unitary_submanifold(s) -> float:
    """Block spread plus unitarity defect of ``N`` times the block average."""
    k = blocks_of(s)
    n = k.shape[1]
    mean = k.mean(axis=0)
    spread = max(fro_norm(b - mean) for b in k)
    v = n * mean
    return spread + fro_norm(dagger(v) @ v - np.eye(n))


def channel(s, rho) -> np.ndarray:
    """Action ``sum_i K_i rho K_i^dagger`` of the Kraus map on a density matrix."""
    k = blocks_of(s)
    return np.einsum("iab,bc,idc->ad", k, np.asarray(rho), k.conj())
