"""Threshold-decay curriculum sampler with anti-curriculum and uniform baselines."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from fractions import Fraction

import numpy as np

from .errors import ConfigError, ContractViolation
from .learnability import SCOPES, LearnabilityTable, rank

MODES = ("curriculum", "anti-curriculum", "uniform")


@dataclass(frozen=True)
class CurriculumSchedule:
    lambda0: float = 0.5
    t_c: int = 1000
    mode: str = "curriculum"
    scope: str = "per-domain"
    with_replacement: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.lambda0 <= 1:
            raise ConfigError(f"lambda0 must lie in (0, 1], got {self.lambda0}")
        if not isinstance(self.t_c, int) or self.t_c < 1:
            raise ConfigError(f"t_c must be a positive int, got {self.t_c!r}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.scope not in SCOPES:
            raise ConfigError(f"scope must be one of {SCOPES}, got {self.scope!r}")

    def to_dict(self):
        return asdict(self)


def _exact(x) -> Fraction:
    # decimal literal semantics: 0.1 means 1/10, not its binary neighbour
    return x if isinstance(x, Fraction) else Fraction(repr(float(x)))


def unlocked_fraction_exact(t: int, schedule: CurriculumSchedule) -> Fraction:
    if t < 0:
        raise ContractViolation("step must be >= 0")
    l0 = _exact(schedule.lambda0)
    return min(Fraction(1), l0 + (1 - l0) * Fraction(t, schedule.t_c))


def unlocked_fraction(t: int, schedule: CurriculumSchedule) -> float:
    """Share of the ranking open for sampling at step ``t``, capped at 1."""
    return float(unlocked_fraction_exact(t, schedule))


def pool_size(n: int, f) -> int:
    f = _exact(f)
    if not 0 < f <= 1:
        raise ContractViolation(f"fraction must lie in (0, 1], got {f}")
    return math.ceil(f * n)


class Ranking:
    """Descending-score id order per scope group, plus the scores behind it."""

    def __init__(self, groups: dict, scores: dict, domains: dict, scope: str):
        for key, ids in groups.items():
            if not ids:
                raise ConfigError(f"ranking group {key!r} is empty")
        if not groups:
            raise ConfigError("ranking is empty")
        self.groups = groups
        self.scores = scores
        self.domains = domains
        self.scope = scope

    @classmethod
    def from_table(cls, table: LearnabilityTable, scope="per-domain"):
        rows = table.scored
        return cls(rank(table, scope), {r.sample_id: r.learnability for r in rows},
                   {r.sample_id: r.domain for r in rows}, scope)

    @classmethod
    def from_scores(cls, scores: dict, domains: dict | None = None, scope="global"):
        domains = domains or {k: "_" for k in scores}
        order = sorted(scores, key=lambda k: (-scores[k], k))
        if scope == "global":
            groups = {None: order}
        else:
            groups = {}
            for k in order:
                groups.setdefault(domains[k], []).append(k)
            groups = {d: groups[d] for d in sorted(groups)}
        return cls(groups, dict(scores), dict(domains), scope)

    def __len__(self):
        return sum(len(v) for v in self.groups.values())


def _group_pool(ids, f, mode):
    if mode == "uniform":
        return ids
    k = pool_size(len(ids), f)
    return ids[:k] if mode == "curriculum" else ids[len(ids) - k:]


def eligible_pools(ranking: Ranking, f, mode):
    """Per-group eligible id lists (in rank order)."""
    if mode not in MODES:
        raise ContractViolation(f"unknown mode {mode!r}")
    pool_size(1, f)  # validates f
    return {key: _group_pool(ids, f, mode) for key, ids in ranking.groups.items()}


def eligible_pool(ranking: Ranking, f, mode, scope=None) -> set:
    if scope is not None and scope != ranking.scope:
        raise ContractViolation(f"ranking was built for {ranking.scope!r} scope, not {scope!r}")
    return {i for ids in eligible_pools(ranking, f, mode).values() for i in ids}


def threshold_score(ranking: Ranking, f, group=None) -> float:
    """Score of the ceil(f*N)-th ranked sample in one scope group."""
    if group is None:
        if len(ranking.groups) != 1:
            raise ContractViolation("per-domain ranking: name the group")
        group = next(iter(ranking.groups))
    ids = ranking.groups[group]
    return ranking.scores[ids[pool_size(len(ids), f) - 1]]


def domain_quotas(domains, batch_size: int, step: int):
    """ceil(B/n) per domain, cut to B; the short domain rotates with the step."""
    n = len(domains)
    q = -(-batch_size // n)
    start = step % n
    order = list(domains[start:]) + list(domains[:start])
    out, left = {}, batch_size
    for d in order:
        take = min(q, left)
        out[d] = take
        left -= take
    return {d: out[d] for d in domains}


class SamplerState:
    """Seeded curriculum sampler. ``step`` advances once per ``sample_batch``."""

    def __init__(self, ranking: Ranking, schedule: CurriculumSchedule, seed: int | None = None, step: int = 0):
        if ranking.scope != schedule.scope:
            raise ContractViolation(f"ranking scope {ranking.scope!r} != schedule scope {schedule.scope!r}")
        self.ranking = ranking
        self.schedule = schedule
        self.step = step
        self.rng = np.random.Generator(np.random.PCG64(schedule.seed if seed is None else seed))
        self._key = None
        self._pools = None
        self._perm = {}

    def pools(self, t=None):
        """Current per-group pools; rebuilt only when some pool size changes."""
        t = self.step if t is None else t
        f = unlocked_fraction_exact(t, self.schedule)
        key = tuple(len(ids) if self.schedule.mode == "uniform" else pool_size(len(ids), f)
                    for ids in self.ranking.groups.values())
        if key != self._key:
            self._pools = eligible_pools(self.ranking, f, self.schedule.mode)
            self._key = key
            self._perm = {}
        return self._pools

    def _draw(self, group, pool, k):
        if self.schedule.with_replacement:
            return [pool[i] for i in self.rng.integers(0, len(pool), size=k)]
        if k > len(pool):
            raise ContractViolation(f"batch quota {k} exceeds pool size {len(pool)} without replacement")
        perm, pos = self._perm.get(group, (None, 0))
        if perm is None or pos + k > len(perm):
            perm, pos = self.rng.permutation(len(pool)), 0
        self._perm[group] = (perm, pos + k)
        return [pool[i] for i in perm[pos:pos + k]]

    def sample_batch(self, batch_size: int) -> list:
        if batch_size < 1:
            raise ContractViolation("batch_size must be >= 1")
        pools = self.pools()
        if self.ranking.scope == "global":
            (key, pool), = pools.items()
            out = self._draw(key, pool, batch_size)
        else:
            out = []
            for d, k in domain_quotas(list(pools), batch_size, self.step).items():
                if k:
                    out += self._draw(d, pools[d], k)
        self.step += 1
        return out


class CurriculumSource:
    """Adapts a ``SamplerState`` to the trainer's batch-source interface."""

    def __init__(self, state: SamplerState, sequences):
        self.state = state
        self.by_id = {s.sample_id: s for s in sequences}
        missing = [i for i in state.ranking.scores if i not in self.by_id]
        if missing:
            raise ContractViolation(f"{len(missing)} ranked ids have no sequence, e.g. {missing[0]}")

    def batch(self, step, batch_size):
        return [self.by_id[i] for i in self.state.sample_batch(batch_size)]
