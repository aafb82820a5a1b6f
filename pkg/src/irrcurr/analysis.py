"""Score-distribution reports, run comparison tables and the FLOP overhead model."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from fractions import Fraction
from numbers import Integral

import numpy as np

from .errors import ContractViolation
from .learnability import LearnabilityTable
from .trainer import AVERAGE_LABEL, TrainLog

QUARTERS = ("0-25%", "25-50%", "50-75%", "75-100%")


@dataclass
class QuartileReport:
    domains: list
    counts: list  # per quarter: {domain: n}
    composition: list  # per quarter: {domain: Fraction}
    mean_score: list  # per quarter: {domain: float or nan}

    def top_domain(self, quarter=0):
        """Largest share in the quarter; ties go to the first name."""
        comp = self.composition[quarter]
        return min(comp, key=lambda d: (-comp[d], d))

    def rows(self):
        for q, name in enumerate(QUARTERS):
            for d in self.domains:
                yield name, d, self.counts[q][d], float(self.composition[q][d]), self.mean_score[q][d]

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["quarter", "domain", "count", "fraction", "mean_learnability"])
        for name, d, n, frac, mean in self.rows():
            w.writerow([name, d, n, f"{frac:.6f}", f"{mean:.6f}" if math.isfinite(mean) else "nan"])
        return buf.getvalue()


def quartile_bounds(n):
    return [0, math.ceil(n / 4), math.ceil(n / 2), math.ceil(3 * n / 4), n]


def quartile_report(table: LearnabilityTable) -> QuartileReport:
    """Domain mix and per-domain mean score in each quarter of the global ranking."""
    rows = sorted(table.scored, key=lambda r: (-r.learnability, r.sample_id))
    n = len(rows)
    if n < 4:
        raise ContractViolation(f"quartile report needs at least 4 scored rows, got {n}")
    domains = sorted({r.domain for r in rows})
    b = quartile_bounds(n)
    counts, comp, means = [], [], []
    for q in range(4):
        part = rows[b[q]:b[q + 1]]
        c = {d: 0 for d in domains}
        acc = {d: [] for d in domains}
        for r in part:
            c[r.domain] += 1
            acc[r.domain].append(r.learnability)
        counts.append(c)
        comp.append({d: Fraction(c[d], len(part)) for d in domains})
        means.append({d: float(np.mean(acc[d])) if acc[d] else float("nan") for d in domains})
    return QuartileReport(domains, counts, comp, means)


@dataclass(frozen=True)
class FlopCostModel:
    C1: int
    C2: int
    T: int
    B: int
    b: int
    D: int
    T_c: int = 1

    def __post_init__(self):
        for k in ("C1", "C2", "T", "B", "b", "D", "T_c"):
            if not getattr(self, k) > 0:
                raise ContractViolation(f"{k} must be positive")
        if self.B < self.b:
            raise ContractViolation("presample batch B must be >= train batch b")


@dataclass(frozen=True)
class FlopOverhead:
    rho_loss_extra: object
    curriculum_extra: object
    ratio: object

    def to_csv(self):
        return (
            "quantity,value\n"
            f"rho_loss_extra,{self.rho_loss_extra}\n"
            f"curriculum_extra,{self.curriculum_extra}\n"
            f"ratio,{float(self.ratio):.6f}\n"
        )


def forward_flops(n_params, context_len):
    """Rough forward cost of one sequence: two FLOPs per parameter per token."""
    return 2 * n_params * context_len


def flop_overhead(m: FlopCostModel) -> FlopOverhead:
    """Online selection cost T*C1*(B+b) + T*C2*B against one scoring pass C2*D.

    Integer inputs give exact integers and a ``Fraction`` ratio.
    """
    rho = m.T * m.C1 * (m.B + m.b) + m.T * m.C2 * m.B
    cur = m.C2 * m.D
    exact = all(isinstance(getattr(m, k), Integral) for k in ("C1", "C2", "T", "B", "b", "D"))
    ratio = Fraction(cur, rho) if exact else cur / rho
    return FlopOverhead(rho, cur, ratio)


@dataclass
class RunSummary:
    label: str
    log: TrainLog
    manifest_digest: str = ""
    sharpness: list = field(default_factory=list)


@dataclass
class ComparisonRow:
    label: str
    avg: float
    per_domain: dict
    mean_sharpness: float
    best: set = field(default_factory=set)


@dataclass
class ComparisonTable:
    domains: list
    rows: list

    def row(self, label):
        for r in self.rows:
            if r.label == label:
                return r
        raise KeyError(label)

    def columns(self):
        return ["avg", *self.domains, "mean_sharpness"]

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["label", *self.columns(), "best"])
        for r in self.rows:
            vals = [r.avg, *(r.per_domain.get(d, float("nan")) for d in self.domains), r.mean_sharpness]
            w.writerow([r.label, *(_f6(v) for v in vals), ";".join(c for c in self.columns() if c in r.best)])
        return buf.getvalue()

    def to_text(self):
        cols = self.columns()
        width = max(12, *(len(c) + 1 for c in cols))
        lw = max(5, *(len(r.label) for r in self.rows)) + 2
        lines = ["label".ljust(lw) + "".join(c.rjust(width) for c in cols)]
        for r in self.rows:
            vals = [r.avg, *(r.per_domain.get(d, float("nan")) for d in self.domains), r.mean_sharpness]
            cells = [(_f6(v) + ("*" if c in r.best else " ")).rjust(width) for c, v in zip(cols, vals)]
            lines.append(r.label.ljust(lw) + "".join(cells))
        lines.append("* best (lowest) value in the column")
        return "\n".join(lines) + "\n"


def _f6(v):
    return f"{v:.6f}" if math.isfinite(v) else "nan"


def compare_runs(runs) -> ComparisonTable:
    """One row per run from its final validation entry; flags column minima."""
    runs = list(runs)
    if not runs:
        raise ContractViolation("no runs to compare")
    digests = {r.manifest_digest for r in runs}
    if len(digests) > 1:
        raise ContractViolation("runs were evaluated on different validation sets")
    rows = []
    for r in runs:
        final = r.log.final_validation()
        if AVERAGE_LABEL not in final:
            raise ContractViolation(f"run {r.label!r} has no validation entries")
        per_domain = {d: v for d, v in final.items() if d != AVERAGE_LABEL}
        eig = [x.top_eigenvalue for x in r.sharpness if math.isfinite(x.top_eigenvalue)]
        rows.append(ComparisonRow(r.label, final[AVERAGE_LABEL], per_domain, float(np.mean(eig)) if eig else float("nan")))
    domains = sorted({d for r in rows for d in r.per_domain})
    table = ComparisonTable(domains, rows)
    for col in table.columns():
        vals = [_col(r, col) for r in rows]
        finite = [v for v in vals if math.isfinite(v)]
        if not finite:
            continue
        lo = min(finite)
        for r, v in zip(rows, vals):
            if v == lo:
                r.best.add(col)
    return table


def _col(row, col):
    if col == "avg":
        return row.avg
    if col == "mean_sharpness":
        return row.mean_sharpness
    return row.per_domain.get(col, float("nan"))
