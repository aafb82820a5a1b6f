"""Per-sample learnability: proxy loss at an early checkpoint minus the late average."""

from __future__ import annotations

import csv
import io
import math
import os
import warnings
from dataclasses import dataclass, field
from decimal import Decimal

import numpy as np

from .corpus import stack_tokens
from .errors import ContractViolation
from .model import Checkpoint

COLUMNS = ["sample_id", "domain", "l_early", "l_late", "learnability"]
SCOPES = ("per-domain", "global")


@dataclass(frozen=True)
class ScoreRow:
    sample_id: str
    domain: str
    l_early: float
    l_late: float
    learnability: float

    @property
    def finite(self):
        return math.isfinite(self.learnability)


@dataclass
class LearnabilityTable:
    rows: list
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [r.sample_id for r in self.rows]
        if len(set(ids)) != len(ids):
            raise ContractViolation("duplicate sample_id in learnability table")

    def __len__(self):
        return len(self.rows)

    @property
    def scored(self):
        """Rows with finite scores; quarantined rows are left out."""
        return [r for r in self.rows if r.finite]

    @property
    def quarantined(self):
        return [r.sample_id for r in self.rows if not r.finite]

    def by_id(self):
        return {r.sample_id: r for r in self.rows}

    def domains(self):
        return sorted({r.domain for r in self.rows})

    def to_csv(self) -> str:
        buf = io.StringIO()
        for k, v in sorted(self.provenance.items()):
            buf.write(f"# {k}: {v}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in sorted(self.rows, key=lambda r: r.sample_id):
            w.writerow([r.sample_id, r.domain, _fmt(r.l_early), _fmt(r.l_late), _fmt(r.learnability)])
        return buf.getvalue()

    def write(self, path):
        tmp = f"{path}.tmp"
        with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_csv())
        os.replace(tmp, path)

    @classmethod
    def read(cls, path):
        provenance, lines = {}, []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.startswith("#"):
                    key, _, value = line[1:].strip().partition(": ")
                    provenance[key] = value
                else:
                    lines.append(line)
        reader = csv.reader(lines)
        header = next(reader)
        if header != COLUMNS:
            raise ContractViolation(f"{path}: unexpected columns {header}")
        rows = [ScoreRow(sid, dom, float(a), float(b), float(c)) for sid, dom, a, b, c in reader]
        return cls(rows, provenance)


def _fmt(x):
    return f"{x:.6f}" if math.isfinite(x) else "nan"


def _round6(x):
    return Decimal(f"{x:.6f}")


def make_row(sample_id, domain, l_early, l_late) -> ScoreRow:
    """Row whose persisted learnability equals l_early - l_late exactly.

    Both losses are rounded to 6 decimals first and the difference is taken
    in decimal arithmetic, so the identity survives the CSV round trip.
    """
    if not (math.isfinite(l_early) and math.isfinite(l_late)):
        return ScoreRow(sample_id, domain, l_early, l_late, float("nan"))
    e, late = _round6(l_early), _round6(l_late)
    return ScoreRow(sample_id, domain, float(e), float(late), float(e - late))


def _losses(ckpt: Checkpoint, tokens, chunk):
    model = ckpt.model()
    out = np.full(len(tokens), np.nan)
    for s in range(0, len(tokens), chunk):
        part = tokens[s:s + chunk]
        try:
            out[s:s + chunk] = model.sequence_losses(part, chunk=chunk)
        except ArithmeticError:
            # isolate the bad rows one at a time
            for i in range(len(part)):
                try:
                    out[s + i] = model.sequence_losses(part[i:i + 1])[0]
                except ArithmeticError:
                    out[s + i] = np.nan
    return out


def score_corpus(early: Checkpoint, late, train_set, chunk=32, provenance=None) -> LearnabilityTable:
    """Learnability of every sequence in ``train_set``.

    ``late`` must hold exactly three checkpoints past ``early``; the late loss
    is their arithmetic mean. Samples with a non-finite loss are kept with a
    NaN score and reported through ``LearnabilityTable.quarantined``.
    """
    late = list(late)
    if len(late) != 3:
        raise ContractViolation(f"need exactly 3 late checkpoints, got {len(late)}")
    if len({c.step for c in late}) != 3 or any(c.step <= early.step for c in late):
        raise ContractViolation("late checkpoints need distinct steps after the early checkpoint")
    if any(c.config != early.config for c in late):
        raise ContractViolation("checkpoints were trained with different model configs")
    if not train_set:
        raise ContractViolation("train_set is empty")
    tokens = stack_tokens(train_set)
    l_early = _losses(early, tokens, chunk)
    l_late = np.mean([_losses(c, tokens, chunk) for c in late], axis=0)
    rows = [make_row(s.sample_id, s.domain, float(a), float(b)) for s, a, b in zip(train_set, l_early, l_late)]
    table = LearnabilityTable(rows, dict(provenance or {}))
    if table.quarantined:
        warnings.warn(f"{len(table.quarantined)} samples had non-finite loss and are excluded from the curriculum")
    return table


def rank(table: LearnabilityTable, scope="per-domain"):
    """Descending-learnability order of sample ids, ties by ascending id.

    Returns ``{domain: [ids]}`` for per-domain scope and ``{None: [ids]}``
    for global scope. Quarantined rows never appear.
    """
    if scope not in SCOPES:
        raise ContractViolation(f"scope must be one of {SCOPES}")
    rows = table.scored
    if not rows:
        raise ContractViolation("no scored rows to rank")
    ordered = sorted(rows, key=lambda r: (-r.learnability, r.sample_id))
    if scope == "global":
        return {None: [r.sample_id for r in ordered]}
    out = {}
    for r in ordered:
        out.setdefault(r.domain, []).append(r.sample_id)
    return {d: out[d] for d in sorted(out)}
