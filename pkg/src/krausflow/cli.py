"""Command-line entry point.

Exit status is 0 on success, 1 on a usage error and 2 on a numerical
failure (drift, feasibility or invariance). Run records go to ``--out`` or
to stdout; summaries go to stdout when records are written to a file and
to stderr otherwise.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .constraints import FeasibilityFailure
from .experiments import (
    HarnessConfig,
    RhoKind,
    aggregate,
    aggregates_to_csv,
    exp_compare_unitary,
    exp_constrained,
    exp_degeneracy,
    exp_objective_distribution,
    exp_scaling,
    exp_trap_scan,
    parse_rho_kind,
    records_to_text,
)
from .flow import FlowConfig, IntegrationFailure, InvarianceViolation, flow_ascent, flow_unitary
from .landscape import ControlProblem
from .linalg import ContractViolation, DegenerateInputError
from .sampling import SeededStream, haar_unitary, random_theta
from .selftest import run_selftest
from .stiefel import random_stiefel

NUMERICAL_FAILURES = (IntegrationFailure, InvarianceViolation, FeasibilityFailure, ContractViolation, DegenerateInputError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _n_range(text: str) -> list[int]:
    """``2:8`` (inclusive) or ``2,4,8``."""
    try:
        if ":" in text:
            lo, hi = (int(x) for x in text.split(":"))
            out = list(range(lo, hi + 1))
        else:
            out = [int(x) for x in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad range {text!r}") from None
    if not out or min(out) < 2:
        raise argparse.ArgumentTypeError("dimensions must be at least 2")
    return out


def _rho(text: str) -> RhoKind:
    try:
        return parse_rho_kind(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _theta(text: str) -> int | None:
    """Returns the degeneracy ``e1`` (``None`` for a plain projector)."""
    if text == "projector":
        return None
    if text.startswith("degenerate:"):
        try:
            e1 = int(text.split(":", 1)[1])
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad degeneracy in {text!r}") from None
        if e1 < 1:
            raise argparse.ArgumentTypeError("e1 must be positive")
        return e1
    raise argparse.ArgumentTypeError(f"unknown observable {text!r}")


def _common() -> argparse.ArgumentParser:
    g = _Parser(add_help=False)
    g.add_argument("--n", type=int, default=None, help="dimension N")
    g.add_argument("--d0", type=int, default=None, help="number of zero eigenvalues of rho")
    g.add_argument("--e1", type=int, default=None, help="degeneracy of the top eigenvalue of Theta")
    g.add_argument("--runs", type=int, default=None, help="runs (or samples) per point")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--stop-eps", type=float, default=0.01)
    g.add_argument("--drift-tol", type=float, default=2e-4, help="hard limit on ||S^+S - I||_F")
    g.add_argument("--max-steps", type=int, default=100_000)
    g.add_argument("--out", type=Path, default=None, help="output file (default stdout)")
    g.add_argument("--summary", type=Path, default=None, help="also write aggregates or reports here")
    g.add_argument("--rho", type=_rho, default=None, help="pure | mixed | maximally-mixed | rank:<k>")
    g.add_argument("--theta", type=_theta, default=None, help="projector | degenerate:<e1>")
    g.add_argument("--format", choices=("csv", "jsonlines"), default="csv")
    g.add_argument("--workers", type=int, default=1)
    g.add_argument("--timing", action="store_true", help="record wall-clock times (breaks byte-identical output)")
    return g


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="krausflow", description="Gradient-flow experiments over Kraus maps.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    common = [_common()]
    sub.add_parser("sample-objective", parents=common, help="objective distribution at random controls")
    sub.add_parser("trap-scan", parents=common, help="flows from random starts for several state kinds")
    p = sub.add_parser("scan-n", parents=common, help="effort against dimension")
    p.add_argument("--n-range", type=_n_range, default=_n_range("2:8"))
    p.add_argument("--mode", choices=("fixed-rank", "fixed-d0"), default="fixed-d0")
    p.add_argument("--rank", type=int, default=1, help="populated levels for fixed-rank mode")
    sub.add_parser("scan-degeneracy", parents=common, help="effort over the (d0, e1) grid")
    p = sub.add_parser("compare-unitary", parents=common, help="Kraus against unitary control")
    p.add_argument("--n-range", type=_n_range, default=_n_range("4,6,8"))
    p = sub.add_parser("constrained", parents=common, help="constrained optimization protocols")
    p.add_argument("--n-range", type=_n_range, default=None)
    p.add_argument("--protocol", choices=("general", "element-fixing"), default="general")
    p.add_argument("--restarts", type=int, default=10)
    p = sub.add_parser("flow", parents=common, help="one trajectory with a per-step record")
    p.add_argument("--control", choices=("kraus", "unitary"), default="kraus")
    sub.add_parser("selftest", parents=common, help="run the invariant checks")
    return parser


def _harness(args) -> HarnessConfig:
    if args.workers < 1:
        raise UsageError("--workers must be positive")
    try:
        cfg = FlowConfig(stop_eps=args.stop_eps, drift_hard_limit=args.drift_tol, max_steps=args.max_steps)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return HarnessConfig(flow=cfg, workers=args.workers, timing=args.timing)


def _e1(args, n: int) -> int:
    e1 = args.e1
    if args.theta is not None:
        if e1 is not None and e1 != args.theta:
            raise UsageError("--e1 and --theta disagree")
        e1 = args.theta
    e1 = 1 if e1 is None else e1
    if not 1 <= e1 <= n:
        raise UsageError(f"e1={e1} out of range for n={n}")
    return e1


def _rho_kind(args, n: int) -> tuple[RhoKind, int]:
    kind = args.rho or RhoKind("mixed")
    try:
        d0 = kind.d0(n, args.d0 or 0)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if args.d0 is not None and args.d0 != d0:
        raise UsageError("--d0 and --rho disagree")
    if kind.tag == "maximally-mixed" and args.d0:
        raise UsageError("a maximally mixed state has no zeros")
    if not 0 <= d0 <= n - 1:
        raise UsageError(f"d0={d0} out of range for n={n}")
    return kind, d0


def _need(value, name: str, default):
    out = default if value is None else value
    if out is None:
        raise UsageError(f"{name} is required")
    return out


class _Output:
    def __init__(self, args):
        self.args = args

    def records(self, text: str):
        if self.args.out is None:
            sys.stdout.write(text)
        else:
            self.args.out.write_text(text)

    def summary(self, line: str):
        print(line, file=sys.stdout if self.args.out is not None else sys.stderr)

    def extra(self, text: str):
        if self.args.summary is not None:
            self.args.summary.write_text(text)


def _run(args) -> int:
    out = _Output(args)
    hc = _harness(args)
    cmd = args.command
    if cmd == "selftest":
        failed = 0
        for name, ok, err in run_selftest(args.seed):
            out.summary(f"{'PASS' if ok else 'FAIL'} {name} (error {err:.3g})")
            failed += not ok
        return 2 if failed else 0
    if cmd == "sample-objective":
        n = _need(args.n, "--n", 2)
        if n < 2:
            raise UsageError("--n must be at least 2")
        d = exp_objective_distribution(n, _need(args.runs, "--runs", 10_000), args.seed, hc)
        out.records(d.histogram_csv())
        out.summary(f"n {n} samples {d.samples} mean {d.mean!r} std {d.std!r}")
        return 0
    if cmd == "trap-scan":
        n = _need(args.n, "--n", 5)
        if n < 2:
            raise UsageError("--n must be at least 2")
        kinds = [args.rho] if args.rho is not None else None
        kw = {"rho_kinds": kinds} if kinds else {}
        recs = exp_trap_scan(n, _need(args.runs, "--runs", 100), args.seed, hc=hc, e1=_e1(args, n), **kw)
        out.records(records_to_text(recs, args.format))
        out.extra(aggregates_to_csv(aggregate(recs)))
        rate = sum(r.converged for r in recs) / len(recs) if recs else 1.0
        out.summary(f"runs {len(recs)} convergence_rate {rate!r}")
        return 0
    if cmd == "scan-n":
        if args.mode == "fixed-rank":
            mode, value = "fixed_rank", args.rank
        else:
            mode, value = "fixed_d0", args.d0 or 0
        try:
            recs = exp_scaling(args.n_range, mode, value, _need(args.runs, "--runs", 50), args.seed, hc)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        rows = aggregate(recs)
        out.records(records_to_text(recs, args.format))
        out.extra(aggregates_to_csv(rows))
        for r in rows:
            out.summary(f"n {r.n} d0 {r.d0} mean_tau {r.mean_tau!r} mean_lambda {r.mean_lambda!r}")
        return 0
    if cmd == "scan-degeneracy":
        n = _need(args.n, "--n", 6)
        if n < 3:
            raise UsageError("--n must be at least 3")
        recs, rep = exp_degeneracy(n, _need(args.runs, "--runs", 25), args.seed, hc)
        out.records(records_to_text(recs, args.format))
        out.extra(rep.to_csv())
        out.summary(f"cells {len(rep.cells)} spearman {rep.spearman!r}")
        return 0
    if cmd == "compare-unitary":
        kinds = [args.rho] if args.rho is not None else [RhoKind("pure"), RhoKind("mixed")]
        recs = exp_compare_unitary(args.n_range, _need(args.runs, "--runs", 50), args.seed, kinds, hc)
        rows = aggregate(recs)
        out.records(records_to_text(recs, args.format))
        out.extra(aggregates_to_csv(rows))
        for r in rows:
            out.summary(f"n {r.n} d0 {r.d0} {r.control_kind} mean_tau {r.mean_tau!r}")
        return 0
    if cmd == "constrained":
        protocol = args.protocol.replace("-", "_")
        default = [2, 3, 4] if protocol == "general" else [2, 3, 4, 5]
        ns = args.n_range or ([args.n] if args.n is not None else default)
        # --runs is the number of sets per state (general) or index sets per n
        if protocol == "general":
            kw = {"restarts": args.restarts, "sets_per_rho": _need(args.runs, "--runs", 5)}
        else:
            kw = {"index_sets": _need(args.runs, "--runs", 25)}
        res = exp_constrained(ns, protocol, args.seed, hc, **kw)
        out.records(records_to_text(res.records, args.format))
        out.extra(res.to_csv())
        spread = max((s.spread for s in res.sets if not np.isnan(s.spread)), default=float("nan"))
        errs = [s.max_error for s in res.sets if not np.isnan(s.analytic)]
        failed = sum(s.failed_runs for s in res.sets)
        line = f"sets {len(res.sets)} failed_runs {failed} max_spread {spread!r}"
        if errs:
            line += f" max_analytic_error {max(errs)!r}"
        out.summary(line)
        return 0
    if cmd == "flow":
        n = _need(args.n, "--n", 4)
        if n < 2:
            raise UsageError("--n must be at least 2")
        kind, d0 = _rho_kind(args, n)
        rng = SeededStream(args.seed).generator()
        p = ControlProblem(kind.sample(n, rng, d0), random_theta(n, _e1(args, n)))
        cfg = replace(hc.flow, record=True)
        if args.control == "kraus":
            tr = flow_ascent(random_stiefel(n, rng), p, cfg)
        else:
            tr = flow_unitary(haar_unitary(n, rng), p, cfg)
        out.records(tr.to_csv())
        out.summary(f"tau {tr.tau} lambda {tr.lam!r} j_final {tr.j_final!r} converged {tr.converged}")
        return 0
    raise UsageError(f"unknown command {cmd!r}")  # pragma: no cover


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _run(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"krausflow: error: {exc}", file=sys.stderr)
        return 1
    except NUMERICAL_FAILURES as exc:
        print(f"krausflow: numerical failure: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        parser.print_usage(sys.stderr)
        print(f"krausflow: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
