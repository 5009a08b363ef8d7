"""Seeded generation of states, observables, unitaries and simplex points."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .linalg import qr_phase_fixed

__all__ = [
    "SeededStream",
    "uniform_simplex",
    "random_rho",
    "random_theta",
    "haar_unitary",
]


@dataclass(frozen=True)
class SeededStream:
    """A reproducible random stream identified by ``(seed, stream_id)``.

    Streams with different ids are spawned children of the same seed
    sequence, so runs can be scheduled in any order.
    """

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream_id,))
        return np.random.Generator(np.random.PCG64(ss))

    def child(self, stream_id: int) -> "SeededStream":
        return SeededStream(self.seed, stream_id)


def _rng(rng) -> np.random.Generator:
    if isinstance(rng, SeededStream):
        return rng.generator()
    return rng


def uniform_simplex(n: int, rng) -> np.ndarray:
    """Flat Dirichlet sample via normalized exponential variates."""
    if n < 1:
        raise ValueError("n must be positive")
    rng = _rng(rng)
    a = 1.0 - rng.random(n)  # in (0, 1]
    x = -np.log(a)
    total = x.sum()
    if total == 0.0:  # pragma: no cover - needs every draw to hit exactly 1
        return np.full(n, 1.0 / n)
    y = x / total
    y[-1] = max(0.0, 1.0 - y[:-1].sum())
    return y


Placement = Literal["leading_zeros", "random_positions"]


def random_rho(
    n: int,
    d0: int,
    rng,
    placement: Placement = "random_positions",
    maximally_mixed: bool = False,
) -> np.ndarray:
    """Diagonal of a random density matrix with exactly ``d0`` zero entries.

    The non-zero part is flat on the simplex. With ``random_positions`` the
    last level (the target of a ``|N><N|`` observable) is the first to be
    emptied, and the remaining zeros go to random levels; a pure state is
    therefore never the target state itself. ``leading_zeros`` empties
    levels ``1..d0``.
    """
    if not 0 <= d0 <= n - 1:
        raise ValueError(f"d0={d0} out of range for n={n}")
    rng = _rng(rng)
    if maximally_mixed:
        if d0 != 0:
            raise ValueError("a maximally mixed state has no zero eigenvalues")
        return np.full(n, 1.0 / n)
    rho = np.zeros(n)
    if placement == "leading_zeros":
        support = np.arange(d0, n)
    elif placement == "random_positions":
        if d0 == 0:
            support = np.arange(n)
        else:
            support = np.sort(rng.permutation(n - 1)[: n - d0])
    else:
        raise ValueError(f"unknown placement {placement!r}")
    rho[support] = uniform_simplex(n - d0, rng)
    return rho


def random_theta(n: int, e1: int) -> np.ndarray:
    """Binary observable spectrum with ``e1`` ones in the trailing slots."""
    if not 1 <= e1 <= n:
        raise ValueError(f"e1={e1} out of range for n={n}")
    theta = np.zeros(n)
    theta[n - e1 :] = 1.0
    return theta


def haar_unitary(n: int, rng) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be positive")
    rng = _rng(rng)
    z = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    q, _ = qr_phase_fixed(z)
    return q
