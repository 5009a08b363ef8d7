"""Monte Carlo drivers, run records and aggregate statistics.

Every run draws from its own stream ``SeededStream(seed, run_index)``, so
results do not depend on scheduling and a re-run with the same seed and
configuration reproduces the output files byte for byte. Wall-clock time is
only recorded when ``timing`` is enabled, since it would otherwise break
that guarantee.
"""
from __future__ import annotations

import csv
import io
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import stats

from .constraints import (
    FeasibilityFailure,
    analytic_jmax_element_fixing,
    build_element_fixing,
    build_general,
    constrained_flow,
    feasibility_descent,
    max_constraints,
    random_b_matrices,
)
from .flow import FlowConfig, flow_ascent, flow_unitary
from .landscape import ControlProblem, dim_max_manifold, objective_yform
from .sampling import SeededStream, haar_unitary, random_rho, random_theta
from .stiefel import random_stiefel

__all__ = [
    "RECORD_FIELDS",
    "RunRecord",
    "AggregateRow",
    "HarnessConfig",
    "RhoKind",
    "parse_rho_kind",
    "records_to_text",
    "records_from_csv",
    "aggregate",
    "aggregates_to_csv",
    "DistributionSummary",
    "exp_objective_distribution",
    "exp_trap_scan",
    "exp_scaling",
    "DegeneracyReport",
    "exp_degeneracy",
    "exp_compare_unitary",
    "ConstraintSetReport",
    "ConstrainedResult",
    "exp_constrained",
]

RECORD_FIELDS = (
    "experiment", "seed", "n", "d0", "e1", "rho_kind", "control_kind",
    "tau", "lambda", "j_initial", "j_final", "converged", "wall_ms",
)
HIST_BINS = 50
# general constraint sets: redraws allowed, probes per draw
GENERAL_DRAW_BUDGET = 50
GENERAL_PROBES = 2


@dataclass(frozen=True)
class RunRecord:
    """One trajectory. ``lam`` is written under the column name ``lambda``."""

    experiment: str
    seed: int
    n: int
    d0: int
    e1: int
    rho_kind: str
    control_kind: str
    tau: int
    lam: float
    j_initial: float
    j_final: float
    converged: bool
    wall_ms: int = 0

    def row(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return {k: d[k] for k in RECORD_FIELDS}


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def records_to_text(records: Iterable[RunRecord], fmt: str = "csv") -> str:
    """Serialize records as CSV (with header) or JSON lines."""
    buf = io.StringIO()
    if fmt == "csv":
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(RECORD_FIELDS)
        for r in records:
            w.writerow([_fmt(v) for v in r.row().values()])
    elif fmt == "jsonlines":
        for r in records:
            buf.write(json.dumps(r.row()) + "\n")
    else:
        raise ValueError(f"unknown format {fmt!r}")
    return buf.getvalue()


def records_from_csv(text: str) -> list[RunRecord]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if tuple(header) != RECORD_FIELDS:
        raise ValueError("unexpected header")
    out = []
    for row in reader:
        d = dict(zip(header, row))
        out.append(RunRecord(
            experiment=d["experiment"], seed=int(d["seed"]), n=int(d["n"]),
            d0=int(d["d0"]), e1=int(d["e1"]), rho_kind=d["rho_kind"],
            control_kind=d["control_kind"], tau=int(d["tau"]), lam=float(d["lambda"]),
            j_initial=float(d["j_initial"]), j_final=float(d["j_final"]),
            converged=d["converged"] == "true", wall_ms=int(d["wall_ms"]),
        ))
    return out


@dataclass(frozen=True)
class AggregateRow:
    n: int
    d0: int
    e1: int
    control_kind: str
    count: int
    mean_tau: float
    std_tau: float
    median_tau: float
    mean_lambda: float
    std_lambda: float
    median_lambda: float
    convergence_rate: float


def aggregate(records: Sequence[RunRecord]) -> list[AggregateRow]:
    """Group by ``(n, d0, e1, control_kind)``; population std, sorted keys."""
    groups: dict[tuple, list[RunRecord]] = {}
    for r in records:
        groups.setdefault((r.n, r.d0, r.e1, r.control_kind), []).append(r)
    rows = []
    for key in sorted(groups):
        rs = groups[key]
        tau = np.array([r.tau for r in rs], dtype=float)
        lam = np.array([r.lam for r in rs], dtype=float)
        rows.append(AggregateRow(
            *key, count=len(rs),
            mean_tau=float(tau.mean()), std_tau=float(tau.std()), median_tau=float(np.median(tau)),
            mean_lambda=float(lam.mean()), std_lambda=float(lam.std()), median_lambda=float(np.median(lam)),
            convergence_rate=sum(r.converged for r in rs) / len(rs),
        ))
    return rows


def aggregates_to_csv(rows: Sequence[AggregateRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    names = [f.name for f in fields(AggregateRow)]
    w.writerow(names)
    for r in rows:
        w.writerow([_fmt(getattr(r, k)) for k in names])
    return buf.getvalue()


# -- configuration ----------------------------------------------------------


@dataclass(frozen=True)
class HarnessConfig:
    """Settings shared by all drivers.

    ``workers > 1`` fans runs out to a process pool; results are collected
    in run-index order, so the output is the same for any worker count.
    """

    flow: FlowConfig = FlowConfig()
    workers: int = 1
    timing: bool = False
    # constrained flows have no known target and stop on a small field
    constrained_grad_tol: float = 1e-5
    feasibility_restarts: int = 5


@dataclass(frozen=True)
class RhoKind:
    """Tag for the spectrum of the initial state.

    ``pure`` has one populated level, ``mixed`` is flat on the simplex with
    ``d0`` zeros (default none), ``maximally-mixed`` is ``I/N`` and
    ``rank:k`` has ``k`` populated levels.
    """

    tag: str
    rank: int | None = None

    def d0(self, n: int, default: int = 0) -> int:
        if self.tag == "pure":
            return n - 1
        if self.tag == "rank":
            if not 1 <= self.rank <= n:
                raise ValueError(f"rank {self.rank} out of range for n={n}")
            return n - self.rank
        if self.tag == "maximally-mixed":
            return 0
        return default

    def sample(self, n: int, rng, d0: int = 0) -> np.ndarray:
        if self.tag == "maximally-mixed":
            return random_rho(n, 0, rng, maximally_mixed=True)
        return random_rho(n, self.d0(n, d0), rng)

    def label(self) -> str:
        return f"rank:{self.rank}" if self.tag == "rank" else self.tag


def parse_rho_kind(text: str) -> RhoKind:
    if text in ("pure", "mixed", "maximally-mixed"):
        return RhoKind(text)
    if text.startswith("rank:"):
        try:
            k = int(text[5:])
        except ValueError:
            raise ValueError(f"bad rank in {text!r}") from None
        if k < 1:
            raise ValueError("rank must be positive")
        return RhoKind("rank", k)
    raise ValueError(f"unknown rho kind {text!r}")


# -- run machinery ----------------------------------------------------------


def _map(fn: Callable, tasks: list, workers: int) -> list:
    if workers <= 1 or len(tasks) < 2:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks, chunksize=max(1, len(tasks) // (4 * workers))))


def _elapsed_ms(t0: float, timing: bool) -> int:
    return int(round((time.perf_counter() - t0) * 1000)) if timing else 0


@dataclass(frozen=True)
class _FlowTask:
    experiment: str
    seed: int
    index: int
    n: int
    d0: int
    e1: int
    rho_kind: RhoKind
    hc: HarnessConfig
    control: str = "kraus"
    # compare-unitary runs target rho_max and pair both controls
    target: str = "theta_max"


def _record(task: _FlowTask, control: str, tr, t0: float) -> RunRecord:
    return RunRecord(
        experiment=task.experiment, seed=task.seed, n=task.n, d0=task.d0, e1=task.e1,
        rho_kind=task.rho_kind.label(), control_kind=control, tau=tr.tau, lam=float(tr.lam),
        j_initial=float(tr.j_initial), j_final=float(tr.j_final), converged=bool(tr.converged),
        wall_ms=_elapsed_ms(t0, task.hc.timing),
    )


def _run_flow(task: _FlowTask) -> list[RunRecord]:
    rng = SeededStream(task.seed, task.index).generator()
    rho = task.rho_kind.sample(task.n, rng, task.d0)
    p = ControlProblem(rho, random_theta(task.n, task.e1))
    s0 = random_stiefel(task.n, rng)
    cfg = task.hc.flow
    if task.target == "rho_max":
        cfg = replace(cfg, target_value=p.rho_max)
    out = []
    if task.control in ("kraus", "both"):
        t0 = time.perf_counter()
        out.append(_record(task, "kraus", flow_ascent(s0, p, cfg), t0))
    if task.control in ("unitary", "both"):
        u0 = haar_unitary(task.n, rng)
        t0 = time.perf_counter()
        out.append(_record(task, "unitary", flow_unitary(u0, p, cfg), t0))
    return out


def _run_tasks(tasks: list[_FlowTask], workers: int) -> list[RunRecord]:
    return [r for rs in _map(_run_flow, tasks, workers) for r in rs]


# -- objective distribution -------------------------------------------------


@dataclass(frozen=True)
class DistributionSummary:
    n: int
    samples: int
    mean: float
    std: float
    values: np.ndarray = field(repr=False)
    counts: np.ndarray = field(repr=False)
    edges: np.ndarray = field(repr=False)

    def histogram_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_left", "bin_right", "count"])
        for lo, hi, c in zip(self.edges[:-1], self.edges[1:], self.counts):
            w.writerow([repr(float(lo)), repr(float(hi)), int(c)])
        return buf.getvalue()


def _sample_j0(args) -> float:
    n, seed, index = args
    rng = SeededStream(seed, index).generator()
    p = ControlProblem(random_rho(n, 0, rng), random_theta(n, 1))
    return objective_yform(random_stiefel(n, rng), p)


def exp_objective_distribution(n: int, samples: int, seed: int, hc: HarnessConfig = HarnessConfig()) -> DistributionSummary:
    """Objective at ``samples`` random ``(S0, rho)`` pairs with ``Theta = |N><N|``.

    ``std`` is the sample standard deviation. The histogram has 50 uniform
    bins on ``[theta_min, theta_max] = [0, 1]``.
    """
    if n < 2:
        raise ValueError("n must be at least 2")
    if samples < 1:
        raise ValueError("samples must be positive")
    vals = np.array(_map(_sample_j0, [(n, seed, i) for i in range(samples)], hc.workers))
    counts, edges = np.histogram(vals, bins=HIST_BINS, range=(0.0, 1.0))
    std = float(vals.std(ddof=1)) if samples > 1 else 0.0
    return DistributionSummary(n, samples, float(vals.mean()), std, vals, counts, edges)


# -- landscape scans --------------------------------------------------------

TRAP_KINDS = (RhoKind("pure"), RhoKind("mixed"), RhoKind("maximally-mixed"))


def exp_trap_scan(
    n: int,
    starts: int,
    seed: int,
    rho_kinds: Sequence[RhoKind] = TRAP_KINDS,
    hc: HarnessConfig = HarnessConfig(),
    e1: int = 1,
) -> list[RunRecord]:
    """``starts`` flows per state kind with a rank-``e1`` projector observable."""
    if n < 2:
        raise ValueError("n must be at least 2")
    tasks = [
        _FlowTask("trap-scan", seed, j * starts + i, n, kind.d0(n), e1, kind, hc)
        for j, kind in enumerate(rho_kinds)
        for i in range(starts)
    ]
    return _run_tasks(tasks, hc.workers)


def exp_scaling(
    n_range: Sequence[int],
    mode: str,
    value: int,
    runs_per_point: int,
    seed: int,
    hc: HarnessConfig = HarnessConfig(),
) -> list[RunRecord]:
    """Runs at fixed rank ``N - d0 = value`` or fixed ``d0 = value``.

    ``mode`` is ``"fixed_rank"`` or ``"fixed_d0"``. Aggregate the records
    with :func:`aggregate`.
    """
    tasks = []
    for n in n_range:
        if mode == "fixed_rank":
            d0 = n - value
        elif mode == "fixed_d0":
            d0 = value
        else:
            raise ValueError(f"unknown mode {mode!r}")
        if not 0 <= d0 <= n - 1:
            raise ValueError(f"d0={d0} out of range for n={n}")
        kind = RhoKind("rank", n - d0)
        for _ in range(runs_per_point):
            tasks.append(_FlowTask("scan-n", seed, len(tasks), n, d0, 1, kind, hc))
    return _run_tasks(tasks, hc.workers)


@dataclass(frozen=True)
class DegeneracyReport:
    """Per-cell medians over the ``(d0, e1)`` grid and their rank correlation with ``dim``."""

    n: int
    cells: list[tuple[int, int, float, float, int]]
    spearman: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["n", "d0", "e1", "median_tau", "median_lambda", "dim"])
        for d0, e1, mt, ml, dim in self.cells:
            w.writerow([self.n, d0, e1, repr(mt), repr(ml), dim])
        w.writerow([])
        w.writerow(["spearman", repr(self.spearman)])
        return buf.getvalue()


def exp_degeneracy(
    n: int, runs_per_cell: int, seed: int, hc: HarnessConfig = HarnessConfig()
) -> tuple[list[RunRecord], DegeneracyReport]:
    """Grid ``d0 in 0..n-1``, ``e1 in 1..n``."""
    if n < 3:
        raise ValueError("n must be at least 3")
    tasks = []
    for d0 in range(n):
        for e1 in range(1, n + 1):
            kind = RhoKind("rank", n - d0)
            for _ in range(runs_per_cell):
                tasks.append(_FlowTask("scan-degeneracy", seed, len(tasks), n, d0, e1, kind, hc))
    records = _run_tasks(tasks, hc.workers)
    cells = []
    for row in aggregate(records):
        cells.append((row.d0, row.e1, row.median_tau, row.median_lambda, dim_max_manifold(n, row.d0, row.e1)))
    rho = stats.spearmanr([c[2] for c in cells], [c[4] for c in cells]).statistic
    return records, DegeneracyReport(n, cells, float(rho))


def exp_compare_unitary(
    n_range: Sequence[int],
    runs_per_point: int,
    seed: int,
    rho_kinds: Sequence[RhoKind] = (RhoKind("pure"), RhoKind("mixed")),
    hc: HarnessConfig = HarnessConfig(),
) -> list[RunRecord]:
    """Paired Kraus and unitary flows from the same state, both targeting ``rho_max``."""
    tasks = []
    for n in n_range:
        for kind in rho_kinds:
            for _ in range(runs_per_point):
                tasks.append(_FlowTask(
                    "compare-unitary", seed, len(tasks), n, kind.d0(n), 1, kind, hc,
                    control="both", target="rho_max",
                ))
    return _run_tasks(tasks, hc.workers)


# -- constrained optimization -----------------------------------------------


@dataclass(frozen=True)
class ConstraintSetReport:
    """Outcome of all restarts on one constraint set.

    ``analytic`` is only known for element fixing and is ``nan`` otherwise.
    ``j_min``, ``j_max`` and ``max_residual`` cover the restarts that found
    a feasible start (``failed_runs`` counts the others). ``rejected_draws``
    counts general sets drawn and discarded as infeasible before this one.
    """

    set_index: int
    n: int
    q: int
    restarts: int
    j_min: float
    j_max: float
    analytic: float
    max_residual: float
    feasibility_failures: int
    failed_runs: int = 0
    rejected_draws: int = 0

    @property
    def spread(self) -> float:
        """``j_max - j_min``, or ``nan`` when no restart succeeded."""
        return self.j_max - self.j_min

    @property
    def max_error(self) -> float:
        """Largest ``|J* - analytic|`` over the restarts (``nan`` if unknown)."""
        if math.isnan(self.analytic):
            return float("nan")
        return max(abs(self.j_min - self.analytic), abs(self.j_max - self.analytic))


@dataclass(frozen=True)
class ConstrainedResult:
    records: list[RunRecord]
    sets: list[ConstraintSetReport]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        names = [f.name for f in fields(ConstraintSetReport)] + ["spread"]
        w.writerow(names)
        for s in self.sets:
            w.writerow([_fmt(getattr(s, k)) for k in names])
        return buf.getvalue()


@dataclass(frozen=True)
class _ConstrainedTask:
    experiment: str
    seed: int
    index: int
    n: int
    rho: np.ndarray
    cs_def: tuple
    hc: HarnessConfig


def _build(n: int, cdef: tuple):
    if cdef[0] == "general":
        return build_general(cdef[1])
    return build_element_fixing(n, cdef[1], cdef[2])


def _run_constrained(task: _ConstrainedTask) -> tuple[RunRecord, float, int]:
    """Feasibility phase with restarts, then constrained ascent to stationarity.

    When every restart fails the record has ``converged=false``, ``tau=0``
    and ``nan`` objective values, and the residual is ``nan``.
    """
    rng = SeededStream(task.seed, task.index).generator()
    n = task.n
    cs = _build(n, task.cs_def)
    p = ControlProblem(task.rho, random_theta(n, 1))
    cfg = replace(task.hc.flow, grad_tol=task.hc.constrained_grad_tol)
    t0 = time.perf_counter()
    failures = 0
    base = dict(
        experiment=task.experiment, seed=task.seed, n=n, d0=p.d0, e1=1,
        rho_kind="mixed", control_kind="kraus",
    )
    for _ in range(task.hc.feasibility_restarts):
        fr = feasibility_descent(random_stiefel(n, rng), cs, task.hc.flow)
        if fr.feasible:
            break
        failures += 1
    else:
        nan = float("nan")
        rec = RunRecord(**base, tau=0, lam=0.0, j_initial=nan, j_final=nan, converged=False,
                        wall_ms=_elapsed_ms(t0, task.hc.timing))
        return rec, nan, failures
    tr, _ = constrained_flow(fr.point, p, cs, cfg)
    rec = RunRecord(
        **base, tau=tr.tau, lam=float(tr.lam),
        j_initial=float(tr.j_initial), j_final=float(tr.j_final), converged=bool(tr.converged),
        wall_ms=_elapsed_ms(t0, task.hc.timing),
    )
    return rec, float(np.max(np.abs(cs.values(tr.final_point)), initial=0.0)), failures


def _draw_general_set(n: int, layout: np.random.Generator, hc: HarnessConfig) -> tuple[np.ndarray, int]:
    """Draw B matrices until a feasibility probe succeeds.

    A random set with many B matrices can leave no Stiefel point that meets
    all constraints; such draws are discarded. Returns the accepted set and
    the number of rejected draws.
    """
    for rejected in range(GENERAL_DRAW_BUDGET):
        nb = int(layout.integers(1, max_constraints(n) + 1))
        bs = random_b_matrices(n, nb, layout)
        cs = build_general(bs)
        for _ in range(GENERAL_PROBES):
            if feasibility_descent(random_stiefel(n, layout), cs, hc.flow).feasible:
                return bs, rejected
    raise FeasibilityFailure(f"no feasible constraint set in {GENERAL_DRAW_BUDGET} draws at N={n}")


def exp_constrained(
    n_range: Sequence[int],
    protocol: str,
    seed: int,
    hc: HarnessConfig = HarnessConfig(),
    rhos: int = 5,
    sets_per_rho: int = 5,
    restarts: int = 10,
    index_sets: int = 25,
) -> ConstrainedResult:
    """Constrained ascent with ``Theta = |N><N|`` and random mixed states.

    ``general``: for each ``n``, ``rhos`` states times ``sets_per_rho``
    random B-constraint sets, ``restarts`` feasible starts each; the report
    gives the spread of the final objective per set. The number of B
    matrices is drawn from ``1..N^2-N-1`` and draws without a feasible
    point are replaced (see :func:`_draw_general_set`).

    ``element_fixing``: for each ``n``, ``index_sets`` random pairs of
    index sets ``I1, I2`` of a common random size in ``1..N-1``, one run
    each against :func:`analytic_jmax_element_fixing`.
    """
    # set layout is drawn from a stream of its own, disjoint from the runs
    layout = SeededStream(seed, 2**32).generator()
    tasks: list[_ConstrainedTask] = []
    groups: list[tuple[int, int, tuple, np.ndarray, int, int]] = []
    for n in n_range:
        if protocol == "general":
            if n < 2:
                raise ValueError("n must be at least 2")
            for _ in range(rhos):
                rho = random_rho(n, 0, layout)
                for _ in range(sets_per_rho):
                    bs, rejected = _draw_general_set(n, layout, hc)
                    cdef = ("general", bs)
                    groups.append((n, len(tasks), cdef, rho, restarts, rejected))
                    for _ in range(restarts):
                        tasks.append(_ConstrainedTask("constrained-general", seed, len(tasks), n, rho, cdef, hc))
        elif protocol == "element_fixing":
            if n < 2:
                raise ValueError("n must be at least 2")
            for _ in range(index_sets):
                m = int(layout.integers(1, n))
                rows = tuple(sorted(int(x) + 1 for x in layout.choice(n, m, replace=False)))
                cols = tuple(sorted(int(x) + 1 for x in layout.choice(n, m, replace=False)))
                rho = random_rho(n, 0, layout)
                cdef = ("element_fixing", rows, cols)
                groups.append((n, len(tasks), cdef, rho, 1, 0))
                tasks.append(_ConstrainedTask("constrained-element-fixing", seed, len(tasks), n, rho, cdef, hc))
        else:
            raise ValueError(f"unknown protocol {protocol!r}")
    results = _map(_run_constrained, tasks, hc.workers)
    reports = []
    for gi, (n, start, cdef, rho, count, rejected) in enumerate(groups):
        chunk = results[start : start + count]
        ok = [(r, res) for r, res, _ in chunk if not math.isnan(r.j_final)]
        js = [r.j_final for r, _ in ok] or [float("nan")]
        if cdef[0] == "element_fixing":
            analytic = analytic_jmax_element_fixing(ControlProblem(rho, random_theta(n, 1)), cdef[1], cdef[2])
        else:
            analytic = float("nan")
        reports.append(ConstraintSetReport(
            set_index=gi, n=n, q=_build(n, cdef).q, restarts=count,
            j_min=min(js), j_max=max(js), analytic=analytic,
            max_residual=max((res for _, res in ok), default=float("nan")),
            feasibility_failures=sum(f for _, _, f in chunk),
            failed_runs=count - len(ok), rejected_draws=rejected,
        ))
    return ConstrainedResult([r for r, _, _ in results], reports)
