"""Pipeline stages: ingest, train-proxy, score, train-main, probe, analyze.

Every stage reads its inputs from the output directory, writes artifacts
atomically and leaves a ``<stage>.stamp.json`` holding the hash of its
configuration and inputs. A stage whose stamp matches and whose outputs
exist is skipped, so interrupted runs resume where they stopped.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time

from . import __version__, toy
from .analysis import FlopCostModel, RunSummary, compare_runs, flop_overhead, forward_flops, quartile_report
from .config import RunConfig
from .corpus import load_split, read_corpus, save_split, split_corpus
from .curriculum import CurriculumSource, Ranking, SamplerState
from .errors import MissingArtifactError
from .learnability import LearnabilityTable, score_corpus
from .model import Checkpoint, LanguageModel, load_checkpoint, save_checkpoint
from .sharpness import SharpnessProbe, probe_seed, probe_sharpness, read_trace, write_trace
from .trainer import TrainLog, UniformSource, train

log = logging.getLogger("irrcurr")

STAGES = ("ingest", "train-proxy", "score", "train-main", "probe", "analyze")


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()[:16]


def _key(*parts):
    return hashlib.sha256(json.dumps(parts, sort_keys=True, default=str).encode()).hexdigest()[:16]


class Pipeline:
    def __init__(self, cfg: RunConfig, out: str, force=False):
        self.cfg = cfg
        self.out = out
        self.force = force
        os.makedirs(out, exist_ok=True)

    # ---- paths and bookkeeping ------------------------------------------------

    def path(self, *parts):
        return os.path.join(self.out, *parts)

    def _require(self, path, stage):
        if not os.path.exists(path):
            raise MissingArtifactError(path, stage)
        return path

    def _stamp_path(self, name):
        return self.path(f"{name}.stamp.json")

    def _fresh(self, name, key, outputs):
        if self.force:
            return False
        try:
            with open(self._stamp_path(name), encoding="utf-8") as fh:
                stamp = json.load(fh)
        except (OSError, ValueError):
            return False
        return stamp.get("key") == key and all(os.path.exists(p) for p in outputs)

    def _stamp(self, name, key, outputs):
        stamp = {"key": key, "outputs": {os.path.relpath(p, self.out): file_digest(p) for p in outputs}}
        tmp = self._stamp_path(name) + ".tmp"
        with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(stamp, fh, sort_keys=True, indent=1)
            fh.write("\n")
        os.replace(tmp, self._stamp_path(name))

    def _provenance(self, stage, key, **upstream):
        prov = {"stage": stage, "inputs": key, "seed": self.cfg.seed, "irrcurr": __version__}
        prov.update({f"upstream.{k}": v for k, v in upstream.items()})
        return prov

    # ---- stages -------------------------------------------------------------

    def ingest(self):
        c = self.cfg.corpus
        if c.path is not None:
            docs = read_corpus(c.path)
            source = _key([(d.doc_id, d.domain, hashlib.sha256(d.text).hexdigest()) for d in docs])
        else:
            docs, source = None, _key(c.generate)
        key = _key("ingest", self.cfg.digest("corpus"), self.cfg.seed, source)
        outputs = [self.path("corpus", f) for f in ("manifest.csv", "proxy.npy", "train.npy", "validation.npy")]
        if self._fresh("ingest", key, outputs):
            log.info("ingest: up to date")
            return
        if docs is None:
            docs = toy.generate(**c.generate)
        split = split_corpus(docs, c.proxy_frac, c.val_frac, self.cfg.seed, c.context_len)
        save_split(split, self.path("corpus"), self._provenance("ingest", key))
        log.info("ingest: %d proxy / %d train / %d validation sequences over %d domains",
                 len(split.proxy_set), len(split.train_set), len(split.validation_set), len(split.domains))
        self._stamp("ingest", key, outputs)

    def _split(self):
        self._require(self.path("corpus", "manifest.csv"), "ingest")
        return load_split(self.path("corpus"))

    def _corpus_digest(self):
        return file_digest(self._require(self.path("corpus", "manifest.csv"), "ingest"))

    def proxy_checkpoint_paths(self):
        return [self.path("proxy", "early.ckpt")] + [self.path("proxy", f"late-{i}.ckpt") for i in (1, 2, 3)]

    def train_proxy(self):
        cfg = self.cfg
        corpus = self._corpus_digest()
        key = _key("train-proxy", cfg.digest("proxy_model", "proxy_train"), corpus)
        outputs = self.proxy_checkpoint_paths() + [self.path("proxy", "train_log.csv"), self.path("proxy", "val_log.csv")]
        if self._fresh("train-proxy", key, outputs):
            log.info("train-proxy: up to date")
            return
        split = self._split()
        os.makedirs(self.path("proxy"), exist_ok=True)
        model = LanguageModel.init(cfg.proxy_model, seed=cfg.proxy_train.seed)
        source = UniformSource(split.proxy_set, seed=cfg.proxy_train.seed)
        res = _timed_train("proxy", model, source, cfg.proxy_train, split.validation_set)
        prov = self._provenance("train-proxy", key, corpus=corpus)
        for ckpt, path in zip(res.checkpoints, self.proxy_checkpoint_paths()):
            save_checkpoint(path, Checkpoint(ckpt.step, ckpt.config, ckpt.params, prov))
        res.log.write(outputs[-2], outputs[-1], prov)
        self._stamp("train-proxy", key, outputs)

    def score(self):
        paths = self.proxy_checkpoint_paths()
        for p in paths:
            self._require(p, "train-proxy")
        ckpt_digests = [file_digest(p) for p in paths]
        corpus = self._corpus_digest()
        key = _key("score", ckpt_digests, corpus)
        out = self.path("scores", "learnability.csv")
        if self._fresh("score", key, [out]):
            log.info("score: up to date")
            return
        split = self._split()
        early, *late = [load_checkpoint(p) for p in paths]
        prov = {
            "proxy_config": early.config.digest(),
            "checkpoint_steps": " ".join(str(c.step) for c in [early, *late]),
            "corpus_manifest": corpus,
            "inputs": key,
            "irrcurr": __version__,
        }
        table = score_corpus(early, late, split.train_set, provenance=prov)
        os.makedirs(self.path("scores"), exist_ok=True)
        table.write(out)
        log.info("score: %d samples scored, %d quarantined", len(table.scored), len(table.quarantined))
        self._stamp("score", key, [out])

    def run_dir(self, name):
        return self.path("main", name)

    def train_main(self, only=None):
        cfg = self.cfg
        scores = self._require(self.path("scores", "learnability.csv"), "score")
        scores_digest = file_digest(scores)
        corpus = self._corpus_digest()
        split = table = None
        for name, schedule in cfg.runs():
            if only and name not in only:
                continue
            key = _key("train-main", cfg.digest("main_model", "main_train", "sharpness"), schedule.to_dict(),
                       scores_digest, corpus)
            d = self.run_dir(name)
            outputs = [os.path.join(d, f) for f in ("final.ckpt", "train_log.csv", "val_log.csv")]
            if cfg.sharpness.enabled:
                outputs.append(os.path.join(d, "sharpness.csv"))
            stage = f"train-main.{name}"
            if self._fresh(stage, key, outputs):
                log.info("%s: up to date", stage)
                continue
            if split is None:
                split = self._split()
                table = LearnabilityTable.read(scores)
            os.makedirs(d, exist_ok=True)
            ranking = Ranking.from_table(table, schedule.scope)
            source = CurriculumSource(SamplerState(ranking, schedule), split.train_set)
            model = LanguageModel.init(cfg.main_model, seed=cfg.main_train.seed)
            hooks = []
            if cfg.sharpness.enabled:
                s = cfg.sharpness
                hooks.append(SharpnessProbe(split.validation_set, cfg.main_train.total_steps, every_k=s.every_k,
                                            n_samples=s.n_samples, seed=cfg.seed, max_iters=s.max_iters,
                                            tol=s.tol, eps=s.eps,
                                            callback=lambda r, n=name: log.info("%s: step %d sharpness %.4f (%s, %d iters)",
                                                                                n, r.step, r.top_eigenvalue,
                                                                                "converged" if r.converged else "not converged",
                                                                                r.iters)))
            res = _timed_train(name, model, source, cfg.main_train, split.validation_set, hooks)
            prov = self._provenance(stage, key, scores=scores_digest, corpus=corpus)
            save_checkpoint(outputs[0], Checkpoint(cfg.main_train.total_steps, cfg.main_model, res.model.params, prov))
            res.log.write(outputs[1], outputs[2], prov)
            if cfg.sharpness.enabled:
                write_trace(hooks[0].records, outputs[3], prov)
            self._stamp(stage, key, outputs)

    def probe(self):
        cfg, s = self.cfg, self.cfg.sharpness
        corpus = self._corpus_digest()
        split = None
        for name, _ in cfg.runs():
            ckpt_path = self._require(os.path.join(self.run_dir(name), "final.ckpt"), "train-main")
            ckpt_digest = file_digest(ckpt_path)
            key = _key("probe", cfg.digest("sharpness"), ckpt_digest, corpus)
            out = os.path.join(self.run_dir(name), "probe_final.csv")
            if self._fresh(f"probe.{name}", key, [out]):
                continue
            if split is None:
                split = self._split()
            ckpt = load_checkpoint(ckpt_path)
            rec = probe_sharpness(ckpt.model(), split.validation_set, n_samples=s.n_samples,
                                  seed=probe_seed(cfg.seed, ckpt.step), max_iters=s.max_iters, tol=s.tol,
                                  eps=s.eps, step=ckpt.step)
            log.info("probe %s: step %d sharpness %.4f", name, rec.step, rec.top_eigenvalue)
            write_trace([rec], out, self._provenance("probe", key, checkpoint=ckpt_digest))
            self._stamp(f"probe.{name}", key, [out])

    def load_runs(self):
        manifest = self._corpus_digest()
        runs = []
        for name, _ in self.cfg.runs():
            d = self.run_dir(name)
            logs = [self._require(os.path.join(d, f), "train-main") for f in ("train_log.csv", "val_log.csv")]
            trace = os.path.join(d, "sharpness.csv")
            records = read_trace(trace) if os.path.exists(trace) else []
            runs.append(RunSummary(name, TrainLog.read(*logs), manifest, records))
        return runs

    def analyze(self):
        cfg = self.cfg
        scores = self._require(self.path("scores", "learnability.csv"), "score")
        runs = self.load_runs()
        inputs = [file_digest(scores)] + [
            file_digest(os.path.join(self.run_dir(r.label), f))
            for r in runs for f in ("val_log.csv", "sharpness.csv") if os.path.exists(os.path.join(self.run_dir(r.label), f))
        ]
        key = _key("analyze", cfg.digest("analysis", "main_model", "proxy_model", "main_train", "curriculum"), inputs)
        names = ("quartiles.csv", "flops.csv", "comparison.csv", "summary.txt")
        outputs = [self.path("analysis", f) for f in names]
        if self._fresh("analyze", key, outputs):
            log.info("analyze: up to date")
            return
        os.makedirs(self.path("analysis"), exist_ok=True)
        table = LearnabilityTable.read(scores)
        quarters = quartile_report(table)
        b = cfg.main_train.batch_size
        flops = flop_overhead(FlopCostModel(
            C1=forward_flops(cfg.main_model.param_count(), cfg.main_model.context_len),
            C2=forward_flops(cfg.proxy_model.param_count(), cfg.proxy_model.context_len),
            T=cfg.main_train.total_steps, B=cfg.analysis.presample_factor * b, b=b, D=len(table), T_c=cfg.curriculum.t_c,
        ))
        comparison = compare_runs(runs)
        header = "".join(f"# {k}: {v}\n" for k, v in sorted(self._provenance("analyze", key).items()))
        texts = [header + quarters.to_csv(), header + flops.to_csv(), header + comparison.to_csv(),
                 comparison.to_text() + f"\nFLOP overhead: online selection {flops.rho_loss_extra}, "
                 f"curriculum scoring {flops.curriculum_extra}, ratio {float(flops.ratio):.6f}\n"]
        for path, text in zip(outputs, texts):
            _write_text(path, text)
        log.info("analyze:\n%s", comparison.to_text())
        self._stamp("analyze", key, outputs)

    def run(self, stage):
        steps = {
            "ingest": self.ingest,
            "train-proxy": self.train_proxy,
            "score": self.score,
            "train-main": self.train_main,
            "probe": self.probe,
            "analyze": self.analyze,
        }
        for name in STAGES if stage == "all" else [stage]:
            log.info("stage %s", name)
            steps[name]()


def _write_text(path, text):
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _timed_train(label, model, source, tcfg, validation, hooks=()):
    start = time.monotonic()
    every = max(1, tcfg.total_steps // 20)

    def progress(step, _model):
        if step and (step % every == 0 or step == tcfg.total_steps):
            log.info("%s: step %d/%d (%.0fs)", label, step, tcfg.total_steps, time.monotonic() - start)

    def on_eval(step, rep):
        log.info("%s: step %d val log-ppl %.4f", label, step, rep.average)

    return train(model, source, tcfg, validation, hooks=[*hooks, progress], on_eval=on_eval)

