"""Linear constraints on Kraus operators that respect re-parametrization.

Each constraint is a real linear functional ``h_k(S) = <G_k, S>`` given by an
anchor matrix ``G_k`` shaped like a Stiefel point. Two families are built:

* general: ``Tr(B_i^dagger K_j) = 0`` for every block ``j`` and every given
  ``B_i``, split into real and imaginary parts;
* element fixing: ``(K_l)_{rc} = 0`` for every block ``l`` and every fixed
  entry ``(r, c)``.

Both are invariant under mixing the Kraus operators by a unitary, since
the constraint holds for each block separately and is linear.

Row and column indices in this module are 1-based, matching the usual
``|1>, ..., |N>`` labelling of levels.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Literal

import numpy as np

from .flow import FlowConfig, Trajectory, integrate
from .landscape import CapabilityError, ControlProblem, _gradient_blocks, objective_yform
from .linalg import ContractViolation, DimensionError, dagger, fro_norm
from .stiefel import StiefelPoint, TangentVector, _project, _retract_blocks, blocks_of, drift

__all__ = [
    "ConstraintSet",
    "FeasibilityFailure",
    "max_constraints",
    "FeasibilityResult",
    "FeasibilityDescent",
    "ConstrainedAscent",
    "build_general",
    "build_element_fixing",
    "build_from_pairs",
    "random_b_matrices",
    "constraint_values",
    "gram_matrix",
    "constrained_project",
    "project_constrained_fast",
    "feasibility_descent",
    "restore",
    "constrained_flow",
    "analytic_jmax_element_fixing",
    "analytic_jmax",
    "dumps",
    "loads",
]

RANK_TOL = 1e-10
FEASIBLE_TOL = 1e-10
REPAIR_TRIGGER = 1e-10
RESTORE_TOL = 1e-12
RESTORE_ITERS = 200
STALL_WINDOW = 200
STALL_RTOL = 1e-4


class FeasibilityFailure(RuntimeError):
    """No point satisfying the constraints was found."""


def max_constraints(n: int) -> int:
    return n * n - n - 1


@dataclass(frozen=True, eq=False)
class ConstraintSet:
    """Anchors ``G_k`` stored as an array of shape ``(q, N**2, N, N)``.

    ``kind`` is ``"general"`` (with ``bs`` holding the B matrices) or
    ``"element_fixing"`` (with ``pairs`` holding 1-based ``(row, col)``).
    """

    n: int
    anchors: np.ndarray
    kind: Literal["general", "element_fixing"]
    bs: np.ndarray | None = None
    pairs: tuple[tuple[int, int], ...] = ()
    _real: np.ndarray = field(init=False, repr=False)
    _basis: np.ndarray = field(init=False, repr=False)
    _mask: np.ndarray | None = field(init=False, repr=False)

    def __post_init__(self):
        a = np.asarray(self.anchors, dtype=np.complex128)
        n = self.n
        if a.ndim != 4 or a.shape[1:] != (n * n, n, n):
            raise DimensionError(f"anchors must have shape (q, {n * n}, {n}, {n})")
        if a.shape[0] and np.any(np.max(np.abs(a.reshape(a.shape[0], -1)), axis=1) == 0):
            raise ValueError("zero anchor")
        a.setflags(write=False)
        object.__setattr__(self, "anchors", a)
        flat = a.reshape(a.shape[0], n**4)
        real = np.concatenate([flat.real, flat.imag], axis=1)
        object.__setattr__(self, "_real", real)
        # orthonormal basis of the span of the anchors, for fast projections
        if real.shape[0]:
            u, sv, _ = np.linalg.svd(real.T, full_matrices=False)
            basis = u[:, sv > RANK_TOL * sv[0]]
        else:
            basis = np.zeros((real.shape[1], 0))
        object.__setattr__(self, "_basis", basis)
        # anchors that are coordinate vectors (element fixing) span a
        # coordinate subspace, and projecting onto it is a mask
        mask = None
        if real.shape[0] and np.all(np.count_nonzero(real, axis=1) == 1):
            mask = np.any(real != 0, axis=0).astype(float)
        object.__setattr__(self, "_mask", mask)

    @property
    def q(self) -> int:
        return self.anchors.shape[0]

    def values(self, s) -> np.ndarray:
        """Constraint values ``h_k(S) = <G_k, S>``."""
        return self._real @ _to_real(blocks_of(s))

    def residual(self, s) -> float:
        """``f(S) = sum_k h_k(S)^2``."""
        h = self.values(s)
        return float(h @ h)

    def project_span(self, x: np.ndarray) -> np.ndarray:
        """Orthogonal projection of real-coordinate columns onto the anchor span."""
        if self._mask is not None:
            return x * (self._mask if x.ndim == 1 else self._mask[:, None])
        return self._basis @ (self._basis.T @ x)


def _to_real(k: np.ndarray) -> np.ndarray:
    flat = k.reshape(-1)
    return np.concatenate([flat.real, flat.imag])


def _from_real(x: np.ndarray, n: int) -> np.ndarray:
    half = x.shape[0] // 2
    return (x[:half] + 1j * x[half:]).reshape((n * n, n, n) + x.shape[1:])


def _stack(anchors_real_part: list[np.ndarray]) -> np.ndarray:
    a = np.array(anchors_real_part, dtype=np.complex128)
    return np.concatenate([a, 1j * a], axis=0)


def build_general(bs) -> ConstraintSet:
    """Constraints ``Tr(B_i^dagger K_j) = 0`` for all blocks ``j``.

    Produces ``2 * n_b * N**2`` anchors; anchor ``n_b * j + i`` carries
    ``B_i`` in block ``j`` and the second half repeats the first times ``1j``.
    """
    bs = np.asarray(bs, dtype=np.complex128)
    if bs.ndim == 2:
        bs = bs[np.newaxis]
    if bs.ndim != 3 or bs.shape[1] != bs.shape[2]:
        raise DimensionError("B matrices must be square and of equal size")
    nb, n = bs.shape[0], bs.shape[1]
    if not 1 <= nb <= max_constraints(n):
        raise ValueError(f"need 1 <= n_b <= {max_constraints(n)} for N={n}, got {nb}")
    for b in bs:
        if fro_norm(b) == 0:
            raise ValueError("zero B matrix")
    base = []
    for j in range(n * n):
        for i in range(nb):
            g = np.zeros((n * n, n, n), dtype=np.complex128)
            g[j] = bs[i]
            base.append(g)
    return ConstraintSet(n, _stack(base), "general", bs=bs.copy())


def build_from_pairs(n: int, pairs) -> ConstraintSet:
    """Fix the 1-based entries ``(row, col)`` of every Kraus operator to zero."""
    pairs = tuple(sorted({(int(r), int(c)) for r, c in pairs}))
    if not pairs:
        raise ValueError("no entries to fix")
    for r, c in pairs:
        if not (1 <= r <= n and 1 <= c <= n):
            raise ValueError(f"entry ({r}, {c}) out of range for N={n}")
    if len(pairs) > max_constraints(n):
        raise ValueError(f"at most {max_constraints(n)} entries can be fixed for N={n}")
    for c in range(1, n + 1):
        if all((r, c) in pairs for r in range(1, n + 1)):
            raise ValueError(f"column {c} fully fixed: no Stiefel point satisfies this")
    base = []
    for r, c in pairs:
        for l in range(n * n):
            g = np.zeros((n * n, n, n), dtype=np.complex128)
            g[l, r - 1, c - 1] = 1.0
            base.append(g)
    return ConstraintSet(n, _stack(base), "element_fixing", pairs=pairs)


def build_element_fixing(n: int, rows, cols) -> ConstraintSet:
    """Fix ``(K_l)_{rc} = 0`` for all ``r`` in ``rows`` and ``c`` in ``cols``.

    ``rows`` and ``cols`` are 1-based index sets of equal size.
    """
    rows = sorted(set(int(r) for r in rows))
    cols = sorted(set(int(c) for c in cols))
    if not rows or not cols:
        raise ValueError("index sets must be non-empty")
    if len(rows) != len(cols):
        raise ValueError("index sets must have equal cardinality")
    return build_from_pairs(n, [(r, c) for r in rows for c in cols])


def random_b_matrices(n: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """Complex Ginibre matrices normalized to unit Frobenius norm."""
    z = rng.standard_normal((count, n, n)) + 1j * rng.standard_normal((count, n, n))
    return z / np.linalg.norm(z.reshape(count, -1), axis=1)[:, np.newaxis, np.newaxis]


def constraint_values(cs: ConstraintSet, s) -> np.ndarray:
    return cs.values(s)


# -- projections ------------------------------------------------------------


def gram_matrix(s, cs: ConstraintSet) -> np.ndarray:
    """``Z_ij = <G_i, P_S(G_j)>``."""
    k = blocks_of(s)
    pg = np.array([_project(k, g) for g in cs.anchors])
    flat_g = cs.anchors.reshape(cs.q, -1)
    flat_pg = pg.reshape(cs.q, -1)
    return np.real(flat_g.conj() @ flat_pg.T)


def _pinv_sym(z: np.ndarray, tol: float = RANK_TOL) -> tuple[np.ndarray, int]:
    w, v = np.linalg.eigh(0.5 * (z + z.T))
    if w.size == 0:
        return z, 0
    keep = w > tol * max(w[-1], 1e-300)
    inv = (v[:, keep] / w[keep]) @ v[:, keep].T
    return inv, int(keep.sum())


def constrained_project(s, cs: ConstraintSet, v, return_rank: bool = False):
    """Project a tangent vector onto the tangent space of the constrained set.

    ``v - sum_ij P_S(G_i) Z+_ij <G_j, v>`` with ``Z+`` the pseudo-inverse of
    the Gram matrix on its numerical range.
    """
    k = blocks_of(s)
    dv = blocks_of(v)
    if dv.shape != k.shape:
        raise DimensionError(f"shape mismatch {dv.shape} vs {k.shape}")
    if cs.q == 0:
        out = TangentVector(dv)
        return (out, 0) if return_rank else out
    pg = np.array([_project(k, g) for g in cs.anchors])
    z = np.real(cs.anchors.reshape(cs.q, -1).conj() @ pg.reshape(cs.q, -1).T)
    zinv, rank = _pinv_sym(z)
    y = cs.values(dv)
    coef = zinv @ y
    out = TangentVector(dv - np.tensordot(coef, pg, axes=1))
    return (out, rank) if return_rank else out


@lru_cache(maxsize=None)
def _hermitian_basis(n: int) -> np.ndarray:
    """Orthonormal basis of the real space of Hermitian ``n x n`` matrices."""
    basis = []
    for a in range(n):
        e = np.zeros((n, n), dtype=np.complex128)
        e[a, a] = 1.0
        basis.append(e)
    r2 = 1.0 / np.sqrt(2.0)
    for a in range(n):
        for b in range(a + 1, n):
            e = np.zeros((n, n), dtype=np.complex128)
            e[a, b] = e[b, a] = r2
            basis.append(e)
            f = np.zeros((n, n), dtype=np.complex128)
            f[a, b] = 1j * r2
            f[b, a] = -1j * r2
            basis.append(f)
    out = np.array(basis)
    out.setflags(write=False)
    return out


def project_constrained_fast(k: np.ndarray, cs: ConstraintSet, v: np.ndarray) -> np.ndarray:
    """Same projection as :func:`constrained_project`, via an N**2 x N**2 system.

    Writing the correction as ``P_S(a)`` with ``a`` in the anchor span, the
    Hermitian matrix ``h = herm(S^dagger a)`` solves
    ``h - herm(S^dagger Pi(S h)) = herm(S^dagger Pi(v))`` where ``Pi`` is the
    orthogonal projector onto the anchor span. Then ``a = Pi(v) + Pi(S h)``.
    """
    n = k.shape[1]
    if cs.q == 0:
        return v
    hb = _hermitian_basis(n)
    m = hb.shape[0]
    kf = k.reshape(-1, n)
    # S h_m for every Hermitian basis element, as real columns
    sh = (kf @ hb.transpose(1, 0, 2).reshape(n, m * n)).reshape(-1, m, n).transpose(0, 2, 1)
    sh = sh.reshape(-1, m)
    cols = np.concatenate([sh.real, sh.imag])
    pi_sh = cs.project_span(cols)
    pi_v = cs.project_span(_to_real(v))
    hbf = hb.conj().reshape(m, n * n)

    def herm_coords(x: np.ndarray) -> np.ndarray:
        # x has shape (N^2, N, N) or (N^2, N, N, cols); returns Re tr(h_m^+ S^+ x)
        c = kf.conj().T @ x.reshape(kf.shape[0], -1)
        return np.real(hbf @ c.reshape(n * n, -1)).reshape((m,) + x.shape[3:])

    t = herm_coords(_from_real(pi_sh, n))
    rhs = herm_coords(_from_real(pi_v, n))
    coef, *_ = np.linalg.lstsq(np.eye(m) - t, rhs, rcond=RANK_TOL)
    a = _from_real(pi_v + pi_sh @ coef, n)
    return v - _project(k, a)


def restore(k: np.ndarray, cs: ConstraintSet, tol: float = RESTORE_TOL) -> np.ndarray:
    """Return a nearby point with drift and all ``|h_k|`` below ``tol``.

    Each sweep retracts onto the manifold, then subtracts the tangent
    vector ``P_S(a)``, ``a`` in the anchor span, that zeroes every
    constraint. The tangent move changes the drift only to second order, so
    the iteration converges quadratically where the constraints meet the
    manifold transversally. Sweeps that stop improving fall back to
    alternating retraction and orthogonal projection.
    """
    n = k.shape[1]
    x = np.array(k)
    newton = True
    for _ in range(RESTORE_ITERS):
        x = _retract_blocks(x)
        err = np.max(np.abs(cs.values(x)), initial=0.0)
        if err <= tol and drift(x) <= tol:
            return x
        if newton:
            y = project_constrained_fast(x, cs, x)
            if np.all(np.isfinite(y)) and fro_norm(y - x) < 0.5:
                x = y
                continue
            newton = False
        x = x - _from_real(cs.project_span(_to_real(x)), n)
    raise FeasibilityFailure("could not restore the constraints")


# -- flows ------------------------------------------------------------------


@dataclass
class FeasibilityDescent:
    """``dS/dsigma = -P_S(grad f)`` with ``grad f = 2 sum_k h_k G_k``.

    Besides reaching ``f < tol`` the descent stops once ``f`` has fallen by
    less than a fraction ``stall_rtol`` over ``stall_window`` accepted
    steps, which is where it sits at a positive minimum of ``f``.
    """

    cs: ConstraintSet
    tol: float = FEASIBLE_TOL
    stall_window: int = STALL_WINDOW
    stall_rtol: float = STALL_RTOL
    stalled: bool = False
    _history: list = field(default_factory=list, repr=False)

    def rate(self, k):
        h = self.cs.values(k)
        grad = _from_real(2.0 * (self.cs._real.T @ h), self.cs.n)
        return -_project(k, grad)

    def value(self, k):
        return self.cs.residual(k)

    def finished(self, k, value):
        if value < self.tol:
            return True
        hist = self._history
        hist.append(value)
        if len(hist) > self.stall_window:
            old = hist.pop(0)
            if old - value <= self.stall_rtol * old:
                self.stalled = True
                return True
        return False

    def after_step(self, k):
        return k


@dataclass
class ConstrainedAscent:
    """Projected gradient ascent on the constrained set.

    The projected field keeps the linear constraints exactly, so only the
    drift retraction can break them. A violation above ``REPAIR_TRIGGER``
    after an accepted step is repaired with :func:`restore`.
    """

    problem: ControlProblem
    cs: ConstraintSet
    cfg: FlowConfig
    target: float | None = None
    stop_eps: float = 0.01
    repairs: int = 0

    def rate(self, k):
        g = _gradient_blocks(k, self.problem.rho, self.problem.theta)
        return project_constrained_fast(k, self.cs, g)

    def value(self, k):
        return objective_yform(k, self.problem)

    def finished(self, k, value):
        return self.target is not None and value > self.target - self.stop_eps

    def after_step(self, k):
        if np.max(np.abs(self.cs.values(k)), initial=0.0) <= REPAIR_TRIGGER:
            return k
        self.repairs += 1
        return restore(k, self.cs)


@dataclass(frozen=True)
class FeasibilityResult:
    point: StiefelPoint
    residual: float
    iterations: int
    feasible: bool


def feasibility_descent(s0, cs: ConstraintSet, cfg: FlowConfig = FlowConfig(), tol: float = FEASIBLE_TOL) -> FeasibilityResult:
    """Descend ``f(S) = sum_k <G_k, S>^2`` on the manifold until ``f < tol``.

    A point that reaches ``tol`` is then polished by :func:`restore`, so the
    returned residual is at rounding level. A stalled descent is reported
    through ``feasible=False`` rather than raised: the residual landscape is
    not known to be trap free, and a random set of general constraints can
    also have no feasible point at all.
    """
    k0 = blocks_of(s0)
    if cs.residual(k0) < tol and drift(k0) <= RESTORE_TOL:
        return FeasibilityResult(StiefelPoint(k0), cs.residual(k0), 0, True)
    tr = integrate(k0, FeasibilityDescent(cs, tol), cfg)
    res = cs.residual(tr.final_point)
    if not res < tol:
        return FeasibilityResult(tr.final_point, res, tr.tau, False)
    try:
        point = StiefelPoint(restore(np.array(tr.final_point.blocks), cs))
    except FeasibilityFailure:
        return FeasibilityResult(tr.final_point, res, tr.tau, False)
    return FeasibilityResult(point, cs.residual(point), tr.tau, True)


def constrained_flow(
    s0, p: ControlProblem, cs: ConstraintSet, cfg: FlowConfig, target: float | None = None, monitor=None
) -> tuple[Trajectory, ConstrainedAscent]:
    """Constrained ascent from a feasible ``s0``.

    Without a ``target`` the flow stops only on ``cfg.grad_tol`` or a budget.
    Every accepted step is retracted and restored onto the constraints, so
    the recorded objective never includes a drift bias.
    """
    cfg = replace(cfg, drift_repair_threshold=0.0)
    vf = ConstrainedAscent(p, cs, cfg, target=target, stop_eps=cfg.stop_eps)
    return integrate(s0, vf, cfg, monitor=monitor), vf


# -- analytic optimum for element fixing ------------------------------------


def _check_projector(p: ControlProblem):
    n = p.n
    expected = np.zeros(n)
    expected[-1] = 1.0
    if not np.allclose(p.theta, expected, atol=1e-12, rtol=0):
        raise CapabilityError("analytic optimum needs Theta = |N><N|")


def analytic_jmax(p: ControlProblem, cs: ConstraintSet) -> float:
    """Largest objective on the constrained set for ``Theta = |N><N|``.

    Only entries in the last row matter: fixing ``(N, c)`` removes the
    population ``rho_c`` from what can reach the target level.
    """
    if cs.kind != "element_fixing":
        raise ValueError("analytic optimum only exists for element fixing")
    _check_projector(p)
    n = p.n
    lost = sum(p.rho[c - 1] for r, c in cs.pairs if r == n)
    return float(1.0 - lost)


def analytic_jmax_element_fixing(p: ControlProblem, rows, cols) -> float:
    """``1`` if ``N`` is not among ``rows``, else ``1 - sum_{j in cols} rho_j``."""
    _check_projector(p)
    rows = set(int(r) for r in rows)
    cols = set(int(c) for c in cols)
    if p.n not in rows:
        return 1.0
    return float(1.0 - sum(p.rho[c - 1] for c in cols))


# -- text format ------------------------------------------------------------


def dumps(cs: ConstraintSet) -> str:
    """Serialize to the line format read by :func:`loads`.

    ``n <N>`` first, then either one ``b`` line per B matrix (row-major
    real/imaginary pairs) or one ``fix <row> <col>`` line per fixed entry.
    """
    lines = [f"n {cs.n}"]
    if cs.kind == "general":
        for b in cs.bs:
            nums = []
            for z in b.reshape(-1):
                nums += [repr(float(z.real)), repr(float(z.imag))]
            lines.append("b " + " ".join(nums))
    else:
        lines += [f"fix {r} {c}" for r, c in cs.pairs]
    return "\n".join(lines) + "\n"


def loads(text: str) -> ConstraintSet:
    n = None
    bs, pairs = [], []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        head, *rest = line.split()
        if head == "n":
            n = int(rest[0])
        elif head == "b":
            vals = np.array([float(x) for x in rest])
            if n is None or vals.size != 2 * n * n:
                raise ValueError(f"bad B line: {raw!r}")
            bs.append((vals[0::2] + 1j * vals[1::2]).reshape(n, n))
        elif head == "fix":
            pairs.append((int(rest[0]), int(rest[1])))
        else:
            raise ValueError(f"unknown directive {head!r}")
    if n is None:
        raise ValueError("missing 'n' line")
    if bs and pairs:
        raise ValueError("a file holds either b lines or fix lines, not both")
    if bs:
        return build_general(np.array(bs))
    return build_from_pairs(n, pairs)
