"""YAML run configuration with line-numbered validation errors."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace

import yaml

from .curriculum import MODES, CurriculumSchedule
from .errors import ConfigError
from .learnability import SCOPES
from .model import ModelConfig
from .trainer import TrainConfig


@dataclass(frozen=True)
class CorpusConfig:
    path: str | None = None
    generate: dict | None = None  # toy.generate keyword arguments
    proxy_frac: float = 0.5
    val_frac: float = 0.1
    context_len: int = 128


@dataclass(frozen=True)
class SharpnessConfig:
    enabled: bool = True
    every_k: int = 200
    n_samples: int = 8
    max_iters: int = 100
    tol: float = 1e-4
    eps: float = 1e-3


@dataclass(frozen=True)
class AnalysisConfig:
    presample_factor: int = 5  # online-selection presample batch B = factor * b


@dataclass(frozen=True)
class RunConfig:
    seed: int
    corpus: CorpusConfig
    proxy_model: ModelConfig
    proxy_train: TrainConfig
    main_model: ModelConfig
    main_train: TrainConfig
    curriculum: CurriculumSchedule
    modes: tuple = MODES
    scopes: tuple = ("per-domain",)
    sharpness: SharpnessConfig = field(default_factory=SharpnessConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    out: str | None = None
    base_dir: str = "."

    def runs(self):
        """(name, schedule) for every mode x scope combination."""
        out = []
        for scope in self.scopes:
            for mode in self.modes:
                name = mode if len(self.scopes) == 1 else f"{scope}-{mode}"
                out.append((name, replace(self.curriculum, mode=mode, scope=scope)))
        return out

    def to_dict(self):
        d = asdict(self)
        d.pop("base_dir")
        d.pop("out")
        return d

    def digest(self, *keys):
        d = self.to_dict()
        if keys:
            d = {k: d[k] for k in keys}
        return hashlib.sha256(json.dumps(d, sort_keys=True, default=list).encode()).hexdigest()[:16]


class _Loader(yaml.SafeLoader):
    pass


def _construct_mapping(loader, node):
    loader.flatten_mapping(node)
    out = _Mapping()
    for k, v in node.value:
        key = loader.construct_object(k)
        if key in out:
            raise ConfigError(f"line {k.start_mark.line + 1}: duplicate key {key!r}")
        out[key] = loader.construct_object(v, deep=True)
        out.lines[key] = k.start_mark.line + 1
    out.line = node.start_mark.line + 1
    return out


class _Mapping(dict):
    def __init__(self):
        super().__init__()
        self.lines = {}
        self.line = 0


_Loader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_mapping)


def _where(node, key=None):
    line = node.lines.get(key, node.line) if isinstance(node, _Mapping) else 0
    return f"line {line}: " if line else ""


def _section(node, key, required=True):
    if key not in node:
        if required:
            raise ConfigError(f"{_where(node)}missing section {key!r}")
        return _Mapping()
    value = node[key]
    if not isinstance(value, dict):
        raise ConfigError(f"{_where(node, key)}{key!r} must be a mapping")
    return value


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, list):
        return [_plain(v) for v in x]
    return x


def _build(cls, node, path, **extra):
    names = {f.name for f in fields(cls)}
    for k in node:
        if k not in names:
            raise ConfigError(f"{_where(node, k)}unknown key {path}.{k} (expected one of {sorted(names)})")
    try:
        return cls(**_plain(dict(node)), **extra)
    except (ConfigError, TypeError, ValueError) as exc:
        raise ConfigError(f"{_where(node)}{path}: {exc}") from None


def _typed(node, key, kind, path):
    if key in node and not isinstance(node[key], kind):
        raise ConfigError(f"{_where(node, key)}{path}.{key} must be {kind.__name__}, got {node[key]!r}")


def parse_config(text, base_dir=".", seed=None, out=None) -> RunConfig:
    try:
        raw = yaml.load(text, Loader=_Loader)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark
        raise ConfigError(f"line {mark.line + 1}: {exc.problem}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a YAML mapping")
    allowed = {"seed", "out", "corpus", "proxy", "main", "curriculum", "sharpness", "analysis"}
    for k in raw:
        if k not in allowed:
            raise ConfigError(f"{_where(raw, k)}unknown top-level key {k!r}")
    if "seed" not in raw and seed is None:
        raise ConfigError("config needs an explicit integer 'seed'")
    _typed(raw, "seed", int, "")
    run_seed = raw.get("seed") if seed is None else seed

    corpus = _build(CorpusConfig, _section(raw, "corpus"), "corpus")
    if (corpus.path is None) == (corpus.generate is None):
        raise ConfigError(f"{_where(raw, 'corpus')}corpus needs exactly one of 'path' or 'generate'")
    if corpus.path is not None:
        p = os.path.join(base_dir, corpus.path)
        if not os.path.exists(p):
            raise ConfigError(f"{_where(raw['corpus'], 'path')}corpus.path {p} does not exist")
        corpus = replace(corpus, path=os.path.abspath(p))

    models, trains = {}, {}
    for which in ("proxy", "main"):
        sec = _section(raw, which)
        for k in sec:
            if k not in ("model", "train"):
                raise ConfigError(f"{_where(sec, k)}unknown key {which}.{k}")
        mnode = _section(sec, "model")
        models[which] = _build(ModelConfig, mnode, f"{which}.model",
                               **({} if "context_len" in mnode else {"context_len": corpus.context_len}))
        tnode = _section(sec, "train")
        trains[which] = _build(TrainConfig, tnode, f"{which}.train", **({} if "seed" in tnode else {"seed": run_seed}))
        if models[which].context_len != corpus.context_len:
            raise ConfigError(f"{_where(mnode)}{which}.model.context_len must equal corpus.context_len")
    if models["proxy"].param_count() >= models["main"].param_count():
        raise ConfigError(f"{_where(raw, 'proxy')}the proxy model should be smaller than the main model")

    cnode = _section(raw, "curriculum")
    cur = {k: v for k, v in cnode.items() if k not in ("modes", "scopes")}
    cur.setdefault("seed", run_seed)
    schedule = _build(CurriculumSchedule, _with_lines(cur, cnode), "curriculum")
    modes = tuple(cnode.get("modes", [schedule.mode]))
    scopes = tuple(cnode.get("scopes", [schedule.scope]))
    for m in modes:
        if m not in MODES:
            raise ConfigError(f"{_where(cnode, 'modes')}unknown mode {m!r}")
    for s in scopes:
        if s not in SCOPES:
            raise ConfigError(f"{_where(cnode, 'scopes')}unknown scope {s!r}")

    sharp = _build(SharpnessConfig, _section(raw, "sharpness", required=False), "sharpness")
    analysis = _build(AnalysisConfig, _section(raw, "analysis", required=False), "analysis")
    return RunConfig(
        seed=run_seed, corpus=corpus, proxy_model=models["proxy"], proxy_train=trains["proxy"],
        main_model=models["main"], main_train=trains["main"], curriculum=schedule, modes=modes, scopes=scopes,
        sharpness=sharp, analysis=analysis, out=out or raw.get("out"), base_dir=base_dir,
    )


def _with_lines(d, like):
    m = _Mapping()
    m.update(d)
    m.lines = like.lines
    m.line = like.line
    return m


def load_config(path, seed=None, out=None) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        return parse_config(text, base_dir=os.path.dirname(os.path.abspath(path)), seed=seed, out=out)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None
