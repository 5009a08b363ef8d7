"""Dense complex matrix primitives.

Everything here works on plain :class:`numpy.ndarray` values of complex
dtype. Norms are Frobenius throughout.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "DimensionError",
    "DegenerateInputError",
    "ContractViolation",
    "HermitianSpectrum",
    "as_cmatrix",
    "dagger",
    "fro_norm",
    "hs_inner",
    "qr_phase_fixed",
    "hermitian_eig",
]


class DimensionError(ValueError):
    """Operands have incompatible shapes."""


class DegenerateInputError(ValueError):
    """Input is (numerically) rank deficient or singular."""


class ContractViolation(ValueError):
    """An input violates a documented precondition."""


def as_cmatrix(a) -> np.ndarray:
    """Return `a` as a finite 2-d complex128 array."""
    m = np.asarray(a, dtype=np.complex128)
    if m.ndim != 2:
        raise DimensionError(f"expected a 2-d matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix has non-finite entries")
    return m


def dagger(a: np.ndarray) -> np.ndarray:
    """Conjugate transpose over the last two axes."""
    return np.conj(np.swapaxes(a, -1, -2))


def fro_norm(a: np.ndarray) -> float:
    return float(np.sqrt(np.sum(np.abs(a) ** 2)))


def hs_inner(a: np.ndarray, b: np.ndarray) -> float:
    """Real Hilbert-Schmidt inner product ``Re Tr(a^dagger b)``.

    Works for any pair of equally shaped arrays; stacked blocks are summed
    over, which is the same as taking the product of the flattened matrices.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.real(np.vdot(a, b)))


def qr_phase_fixed(a) -> tuple[np.ndarray, np.ndarray]:
    """Thin QR factorization with a positive real diagonal in ``r``.

    Removing the column phase freedom makes ``q`` distributed according to
    the invariant measure when ``a`` is complex Ginibre.

    Raises
    ------
    DegenerateInputError
        If some diagonal entry of ``r`` is below 1e-12 in magnitude.
    """
    a = as_cmatrix(a)
    rows, cols = a.shape
    if rows < cols:
        raise DimensionError(f"need rows >= cols, got {a.shape}")
    q, r = np.linalg.qr(a, mode="reduced")
    d = np.diagonal(r)
    mag = np.abs(d)
    if np.any(mag < 1e-12):
        raise DegenerateInputError("matrix is numerically rank deficient")
    phase = d / mag
    q = q * phase[np.newaxis, :]
    r = np.conj(phase)[:, np.newaxis] * r
    # diagonal is real by construction; drop the rounding residue
    idx = np.arange(cols)
    r[idx, idx] = mag
    return q, r


@dataclass(frozen=True)
class HermitianSpectrum:
    """Eigen-decomposition with eigenvalues sorted in descending order."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    def reconstruct(self) -> np.ndarray:
        v = self.eigenvectors
        return (v * self.eigenvalues) @ dagger(v)


def hermitian_eig(a) -> HermitianSpectrum:
    a = as_cmatrix(a)
    if a.shape[0] != a.shape[1]:
        raise DimensionError(f"matrix must be square, got {a.shape}")
    scale = fro_norm(a)
    if fro_norm(a - dagger(a)) > 1e-10 * max(scale, 1e-300):
        raise ContractViolation("matrix is not Hermitian")
    w, v = np.linalg.eigh(0.5 * (a + dagger(a)))
    order = np.argsort(w)[::-1]
    return HermitianSpectrum(eigenvalues=w[order], eigenvectors=v[:, order])
