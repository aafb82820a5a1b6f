"""Adam training loop with early/late checkpoint retention and validation logging."""

from __future__ import annotations

import csv
import io
import math
import os
import warnings
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from . import autodiff as ad
from . import kernels
from .corpus import PackedSequence, stack_tokens
from .errors import ConfigError, ContractViolation, NonFiniteLossError, NumericError
from .model import Checkpoint, LanguageModel

AVERAGE_LABEL = "avg"  # domain column value for the domain-uniform average


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int
    early_ckpt_step: int
    batch_size: int = 32
    learning_rate: float = 3e-4
    late_ckpt_interval: int | None = None  # default: total_steps // 20
    eval_interval: int = 200
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.late_ckpt_interval is None:
            object.__setattr__(self, "late_ckpt_interval", max(1, self.total_steps // 20))
        t, t0, k = self.total_steps, self.early_ckpt_step, self.late_ckpt_interval
        if not 0 < t0 < t:
            raise ConfigError(f"need 0 < early_ckpt_step < total_steps (got t0={t0}, T={t})")
        if k < 1 or self.batch_size < 1 or self.eval_interval < 1:
            raise ConfigError("late_ckpt_interval, batch_size and eval_interval must be >= 1")
        if t - 2 * k <= t0:
            raise ConfigError(f"three late checkpoints spaced {k} apart ending at {t} must all come after t0={t0}")
        if not (self.learning_rate > 0 and self.grad_clip > 0):
            raise ConfigError("learning_rate and grad_clip must be positive")

    def to_dict(self):
        return asdict(self)


def late_checkpoint_steps(cfg: TrainConfig):
    """Steps at which a late snapshot is taken; only the last three survive."""
    k = cfg.late_ckpt_interval
    return [s for s in range(cfg.early_ckpt_step + 1, cfg.total_steps + 1) if (cfg.total_steps - s) % k == 0]


def retained_checkpoint_steps(cfg: TrainConfig):
    return [cfg.early_ckpt_step] + late_checkpoint_steps(cfg)[-3:]


def eval_steps(cfg: TrainConfig):
    steps = list(range(0, cfg.total_steps + 1, cfg.eval_interval))
    if steps[-1] != cfg.total_steps:
        steps.append(cfg.total_steps)
    return steps


class BatchSource(Protocol):
    def batch(self, step: int, batch_size: int) -> Sequence[PackedSequence]: ...


class UniformSource:
    """Uniform draws with replacement over a fixed pool."""

    def __init__(self, seqs, seed=0):
        if not seqs:
            raise ConfigError("empty training pool")
        self.seqs = list(seqs)
        self.rng = np.random.default_rng(seed)

    def batch(self, step, batch_size):
        idx = self.rng.integers(0, len(self.seqs), size=batch_size)
        return [self.seqs[i] for i in idx]


class RepeatSource:
    """The same batch every step (overfitting checks)."""

    def __init__(self, seqs):
        self.seqs = list(seqs)

    def batch(self, step, batch_size):
        return self.seqs[:batch_size]


@dataclass
class PerplexityReport:
    per_domain: dict
    average: float


def evaluate_perplexity(model: LanguageModel, validation, domains=None, chunk=32) -> PerplexityReport:
    """Per-domain mean log-perplexity (nats/token) and their unweighted mean."""
    if not validation:
        raise ContractViolation("validation set is empty")
    by_domain = {}
    for s in validation:
        by_domain.setdefault(s.domain, []).append(s)
    names = sorted(by_domain) if domains is None else list(domains)
    per_domain = {}
    for d in names:
        seqs = by_domain.get(d)
        if not seqs:
            warnings.warn(f"domain {d!r} has no validation sequences; excluded from the average")
            continue
        per_domain[d] = float(model.sequence_losses(stack_tokens(seqs), chunk=chunk).mean())
    if not per_domain:
        raise ContractViolation("no domain has validation sequences")
    return PerplexityReport(per_domain, float(np.mean(list(per_domain.values()))))


@dataclass
class TrainLog:
    train_loss: list = field(default_factory=list)  # (step, loss)
    validation: list = field(default_factory=list)  # (step, domain, log_ppl)

    def final_validation(self):
        if not self.validation:
            return {}
        last = self.validation[-1][0]
        return {d: v for s, d, v in self.validation if s == last}

    def write(self, train_path, val_path, provenance=None):
        _write_csv(train_path, ["step", "train_loss"], [(s, f"{v:.6f}") for s, v in self.train_loss], provenance)
        _write_csv(val_path, ["step", "domain", "val_log_ppl"], [(s, d, f"{v:.6f}") for s, d, v in self.validation], provenance)

    @classmethod
    def read(cls, train_path, val_path):
        log = cls()
        log.train_loss = [(int(r[0]), float(r[1])) for r in _read_csv(train_path)]
        log.validation = [(int(r[0]), r[1], float(r[2])) for r in _read_csv(val_path)]
        return log


def _write_csv(path, header, rows, provenance=None):
    buf = io.StringIO()
    for k, v in sorted((provenance or {}).items()):
        buf.write(f"# {k}: {v}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def _read_csv(path):
    with open(path, encoding="utf-8") as fh:
        rows = list(csv.reader(line for line in fh if not line.startswith("#")))
    return rows[1:]


class Adam:
    def __init__(self, params: ad.ParameterSet, cfg: TrainConfig):
        self.cfg = cfg
        self.params = params
        self.m = {k: np.zeros(p.size, dtype=p.dtype) for k, p in params.items()}
        self.v = {k: np.zeros(p.size, dtype=p.dtype) for k, p in params.items()}
        self.t = 0

    def step(self, grads: ad.GradientSet):
        """Clip by global norm, then one in-place Adam update. Returns the pre-clip norm."""
        norm = grads.norm()
        scale = min(1.0, self.cfg.grad_clip / norm) if norm > 0 else 1.0
        self.t += 1
        c = self.cfg
        for k, p in self.params.items():
            g = np.ascontiguousarray(grads[k]).reshape(-1)
            if scale < 1.0:
                g = g * g.dtype.type(scale)
            kernels.adam_update(p.data.reshape(-1), g, self.m[k], self.v[k], c.learning_rate, c.beta1, c.beta2, c.adam_eps, self.t)
        return norm


Hook = Callable[[int, LanguageModel], None]


@dataclass
class TrainResult:
    model: LanguageModel
    checkpoints: list
    log: TrainLog


def train(model: LanguageModel, batch_source: BatchSource, cfg: TrainConfig, validation=None,
          hooks: Sequence[Hook] = (), domains=None, on_eval: Callable | None = None) -> TrainResult:
    """Run ``cfg.total_steps`` Adam steps on batches from ``batch_source``.

    Snapshots are kept at ``t0`` and for the last three late steps (see
    ``late_checkpoint_steps``). Hooks see step 0 before any update and every
    step after its update; they must not touch the parameters.
    """
    params = model.params
    opt = Adam(params, cfg)
    log = TrainLog()
    late = deque(maxlen=3)
    early = None
    late_steps = set(late_checkpoint_steps(cfg))
    evals = set(eval_steps(cfg)) if validation else set()

    def evaluate(step):
        rep = evaluate_perplexity(model, validation, domains)
        for d, v in rep.per_domain.items():
            log.validation.append((step, d, v))
        log.validation.append((step, AVERAGE_LABEL, rep.average))
        if on_eval is not None:
            on_eval(step, rep)

    for h in hooks:
        h(0, model)
    if 0 in evals:
        evaluate(0)
    for step in range(1, cfg.total_steps + 1):
        batch = list(batch_source.batch(step, cfg.batch_size))
        if len(batch) != cfg.batch_size:
            raise ContractViolation(f"batch source returned {len(batch)} sequences, expected {cfg.batch_size}")
        tokens = stack_tokens(batch)
        value = float("nan")
        try:
            loss = model.loss(tokens)
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericError("non-finite loss")
            grads = ad.grad(loss, params)
            if not all(kernels.all_finite(g) for g in grads.values()):
                raise NumericError("non-finite gradient")
        except NumericError as exc:
            raise NonFiniteLossError(step, [s.sample_id for s in batch], value) from exc
        opt.step(grads)
        log.train_loss.append((step, value))
        if step == cfg.early_ckpt_step:
            early = Checkpoint(step, model.config, params.copy())
        if step in late_steps:
            late.append(Checkpoint(step, model.config, params.copy()))
        for h in hooks:
            h(step, model)
        if step in evals:
            evaluate(step)
    return TrainResult(model, [early, *late], log)
