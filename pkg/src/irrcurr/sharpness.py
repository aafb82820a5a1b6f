"""Top Hessian eigenvalue of the MLP weights by power iteration on finite-difference HVPs."""

from __future__ import annotations

import csv
import io
import logging
import math
import os
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .corpus import stack_tokens
from .errors import ConfigError, ContractViolation
from .model import LanguageModel

log = logging.getLogger(__name__)

PROBE_TAG = "dense"


@dataclass(frozen=True)
class PowerResult:
    eigenvalue: float
    eigenvector: np.ndarray
    iters: int
    converged: bool


def power_method(hvp_oracle: Callable[[np.ndarray], np.ndarray], dim: int, max_iters: int = 100,
                 tol: float = 1e-4, seed: int = 0) -> PowerResult:
    """Dominant eigenpair of a symmetric operator given only its action.

    Returns the signed Rayleigh quotient. Stops once successive estimates
    agree to ``tol * max(1, |lambda|)``. A zero action (``Hv == 0``) reports
    eigenvalue 0, converged.
    """
    if max_iters < 1 or not tol > 0 or dim < 1:
        raise ContractViolation("need max_iters >= 1, tol > 0 and dim >= 1")
    v = np.random.default_rng(seed).standard_normal(dim)
    v /= np.linalg.norm(v)
    prev = None
    for it in range(1, max_iters + 1):
        hv = np.asarray(hvp_oracle(v), dtype=np.float64)
        if not np.all(np.isfinite(hv)):
            return PowerResult(float("nan"), v, it, False)
        nrm = float(np.linalg.norm(hv))
        if nrm == 0.0:
            return PowerResult(0.0, v, it, True)
        lam = float(v @ hv)
        if prev is not None and abs(lam - prev) < tol * max(1.0, abs(lam)):
            return PowerResult(lam, v, it, True)
        prev = lam
        v = hv / nrm
    return PowerResult(prev, v, max_iters, False)


@dataclass(frozen=True)
class SharpnessRecord:
    step: int
    top_eigenvalue: float
    n_probe_samples: int
    iters: int
    converged: bool


def select_probe(validation, n_samples: int, seed: int):
    """``n_samples`` sequences per domain, drawn without replacement."""
    if n_samples < 1:
        raise ConfigError("n_samples must be >= 1")
    by_domain = {}
    for s in validation:
        by_domain.setdefault(s.domain, []).append(s)
    if not by_domain:
        raise ContractViolation("validation set is empty")
    rng = np.random.default_rng(seed)
    out = []
    for d in sorted(by_domain):
        seqs = by_domain[d]
        if len(seqs) < n_samples:
            raise ConfigError(f"domain {d!r} has {len(seqs)} validation sequences, probe needs {n_samples}")
        out += [seqs[i] for i in sorted(rng.choice(len(seqs), size=n_samples, replace=False))]
    return out


def probe_sharpness(model: LanguageModel, validation, n_samples: int = 8, seed: int = 0, max_iters: int = 100,
                    tol: float = 1e-4, eps: float = 1e-3, step: int = 0, dtype=np.float64) -> SharpnessRecord:
    """Top eigenvalue of the probe-loss Hessian restricted to dense-tagged weights.

    The model's parameters are only read. The probe loss runs in ``dtype``
    (float64 by default) so central differences stay above rounding noise.
    """
    probe = select_probe(validation, n_samples, seed)
    tokens = stack_tokens(probe)
    params = model.params.astype(dtype) if dtype is not None else model.params
    dense = params.select(PROBE_TAG)
    if not len(dense):
        raise ContractViolation("model has no dense-tagged parameters")
    config = model.config

    def loss_fn(p):
        return LanguageModel(config, p).loss(tokens)

    def oracle(vec):
        v = ad.GradientSet.from_vector(vec, dense, dtype=params[next(iter(dense))].dtype)
        return ad.hvp(loss_fn, params, v, eps=eps).to_vector()

    dim = sum(p.size for p in dense.values())
    try:
        res = power_method(oracle, dim, max_iters=max_iters, tol=tol, seed=seed)
    except ArithmeticError:
        res = PowerResult(float("nan"), np.zeros(0), 0, False)
    if res.converged and res.eigenvalue < 0:
        log.warning("step %d: dominant Hessian eigenvalue is negative (%.6g)", step, res.eigenvalue)
    return SharpnessRecord(step, res.eigenvalue, len(probe), res.iters, res.converged)


def probe_seed(seed: int, step: int) -> int:
    """Fresh, reproducible probe draw for each step."""
    return int(np.random.SeedSequence([seed, step]).generate_state(1)[0])


class SharpnessProbe:
    """Trainer hook recording sharpness at steps 0, k, 2k, ... and at the last step."""

    def __init__(self, validation, total_steps: int, every_k: int = 200, n_samples: int = 8, seed: int = 0,
                 max_iters: int = 100, tol: float = 1e-4, eps: float = 1e-3, callback=None):
        if every_k < 1:
            raise ConfigError("every_k must be >= 1")
        self.validation = validation
        self.total_steps = total_steps
        self.every_k = every_k
        self.kwargs = dict(n_samples=n_samples, max_iters=max_iters, tol=tol, eps=eps)
        self.seed = seed
        self.records = []
        self.callback = callback

    def steps(self):
        return trace_steps(self.total_steps, self.every_k)

    def __call__(self, step, model):
        if step % self.every_k and step != self.total_steps:
            return
        rec = probe_sharpness(model, self.validation, seed=probe_seed(self.seed, step), step=step, **self.kwargs)
        self.records.append(rec)
        if self.callback is not None:
            self.callback(rec)


def trace_steps(total_steps, every_k):
    steps = list(range(0, total_steps + 1, every_k))
    if steps[-1] != total_steps:
        steps.append(total_steps)
    return steps


def sharpness_trace(train_fn, validation, total_steps, every_k=200, **kwargs):
    """Run ``train_fn(hook)`` with a probe hook attached; returns the records."""
    probe = SharpnessProbe(validation, total_steps, every_k=every_k, **kwargs)
    train_fn(probe)
    return probe.records


def mean_eigenvalue(records):
    vals = [r.top_eigenvalue for r in records if math.isfinite(r.top_eigenvalue)]
    return float(np.mean(vals)) if vals else float("nan")


def write_trace(records, path, provenance=None):
    buf = io.StringIO()
    for k, v in sorted((provenance or {}).items()):
        buf.write(f"# {k}: {v}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "top_eigenvalue", "converged", "iters"])
    for r in records:
        w.writerow([r.step, f"{r.top_eigenvalue:.6f}", int(r.converged), r.iters])
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def read_trace(path, n_probe_samples=0):
    with open(path, encoding="utf-8") as fh:
        rows = list(csv.reader(line for line in fh if not line.startswith("#")))[1:]
    return [SharpnessRecord(int(s), float(e), n_probe_samples, int(i), c == "1") for s, e, c, i in rows]
