"""Domain-tagged documents: ingestion, byte tokenization, splitting, packing."""

from __future__ import annotations

import csv
import hashlib
import io
import os
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractViolation

VOCAB_SIZE = 256
SEPARATOR = 0  # NUL byte joins consecutive documents of one domain
SPLITS = ("proxy", "train", "validation")


@dataclass(frozen=True)
class Document:
    doc_id: str
    domain: str
    text: bytes


@dataclass(frozen=True, eq=False)
class PackedSequence:
    sample_id: str
    domain: str
    tokens: np.ndarray = field(repr=False)


@dataclass
class CorpusSplit:
    proxy_set: list
    train_set: list
    validation_set: list
    documents: dict = field(default_factory=dict)  # split name -> doc_ids assigned to it

    def sets(self):
        return {"proxy": self.proxy_set, "train": self.train_set, "validation": self.validation_set}

    @property
    def domains(self):
        return sorted({s.domain for s in self.train_set})


def tokenize(text) -> np.ndarray:
    """Byte-level ids (0..255) of UTF-8 text or raw bytes."""
    if isinstance(text, str):
        text = text.encode("utf-8")
    return np.frombuffer(bytes(text), dtype=np.uint8).copy()


def detokenize(ids) -> bytes:
    arr = np.asarray(ids)
    if arr.size and (arr.min() < 0 or arr.max() >= VOCAB_SIZE):
        raise ContractViolation("byte token ids must lie in [0, 256)")
    return arr.astype(np.uint8).tobytes()


def _domain_key(domain):
    return int.from_bytes(hashlib.sha256(domain.encode()).digest()[:8], "little")


def split_corpus(docs, proxy_frac=0.5, val_frac=0.1, seed=0, context_len=128) -> CorpusSplit:
    """Stratified per-domain document split, then packing of each part.

    Each domain's documents are shuffled with a generator keyed on (seed,
    domain) so adding a domain never reshuffles the others.
    """
    if not (proxy_frac > 0 and val_frac > 0 and proxy_frac + val_frac < 1):
        raise ConfigError(f"need 0 < proxy_frac, val_frac and proxy_frac + val_frac < 1 (got {proxy_frac}, {val_frac})")
    by_domain = defaultdict(list)
    for d in docs:
        by_domain[d.domain].append(d)
    if not by_domain:
        raise ConfigError("empty corpus")
    parts = {name: [] for name in SPLITS}
    for domain in sorted(by_domain):
        group = sorted(by_domain[domain], key=lambda d: d.doc_id)
        n = len(group)
        if n < 3:
            raise ConfigError(f"domain {domain!r} has {n} documents; at least 3 are needed to split")
        order = np.random.default_rng([seed, _domain_key(domain)]).permutation(n)
        n_proxy = max(1, int(round(proxy_frac * n)))
        n_val = max(1, int(round(val_frac * n)))
        if n - n_proxy - n_val < 1:
            raise ConfigError(f"domain {domain!r}: fractions leave no training documents")
        shuffled = [group[i] for i in order]
        parts["proxy"] += shuffled[:n_proxy]
        parts["validation"] += shuffled[n_proxy:n_proxy + n_val]
        parts["train"] += shuffled[n_proxy + n_val:]
    packed = {name: pack(parts[name], context_len, prefix=f"{name}/") for name in SPLITS}
    for name, seqs in packed.items():
        missing = set(by_domain) - {s.domain for s in seqs}
        if missing:
            raise ConfigError(f"{name} split has no full-length sequence for domains {sorted(missing)}")
    documents = {name: [d.doc_id for d in parts[name]] for name in SPLITS}
    return CorpusSplit(packed["proxy"], packed["train"], packed["validation"], documents)


def pack(docs, context_len, prefix="") -> list:
    """Concatenate each domain's documents (NUL-separated) and cut full windows.

    Windows never straddle domains; a trailing partial window is dropped.
    """
    if context_len < 2:
        raise ContractViolation("context_len must be >= 2")
    if not docs:
        raise ConfigError("empty corpus")
    by_domain = defaultdict(list)
    for d in docs:
        by_domain[d.domain].append(d)
    out = []
    for domain in sorted(by_domain):
        pieces = []
        for i, d in enumerate(by_domain[domain]):
            if i:
                pieces.append(np.array([SEPARATOR], dtype=np.uint8))
            pieces.append(tokenize(d.text))
        stream = np.concatenate(pieces) if pieces else np.zeros(0, dtype=np.uint8)
        n = len(stream) // context_len
        windows = stream[: n * context_len].reshape(n, context_len)
        out += [PackedSequence(f"{prefix}{domain}/{i:06d}", domain, windows[i]) for i in range(n)]
    return out


def stack_tokens(seqs) -> np.ndarray:
    if not seqs:
        return np.zeros((0, 0), dtype=np.uint8)
    return np.stack([s.tokens for s in seqs])


# ---- ingestion ----------------------------------------------------------------


def _unescape(field_text):
    out, i = [], 0
    table = {"n": "\n", "t": "\t", "\\": "\\", "r": "\r"}
    while i < len(field_text):
        c = field_text[i]
        if c == "\\" and i + 1 < len(field_text) and field_text[i + 1] in table:
            out.append(table[field_text[i + 1]])
            i += 2
        else:
            out.append(c)
            i += 1
    return "".join(out)


def read_corpus(path) -> list:
    """Load documents from a directory tree or a TSV record file.

    Directory: one subdirectory per domain; each regular file is a document
    with id ``<domain>/<relative path>``.
    TSV: ``domain<TAB>doc_id<TAB>text`` per line, with ``\\n``, ``\\t``,
    ``\\\\`` escapes in the text field.
    """
    path = Path(path)
    docs = []
    if path.is_dir():
        for sub in sorted(p for p in path.iterdir() if p.is_dir()):
            for f in sorted(q for q in sub.rglob("*") if q.is_file()):
                docs.append(Document(f"{sub.name}/{f.relative_to(sub).as_posix()}", sub.name, f.read_bytes()))
    elif path.is_file():
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                cols = line.split("\t", 2)
                if len(cols) != 3:
                    raise ConfigError(f"{path}:{lineno}: expected domain<TAB>doc_id<TAB>text")
                docs.append(Document(cols[1], cols[0], _unescape(cols[2]).encode("utf-8")))
    else:
        raise ConfigError(f"corpus path {path} does not exist")
    seen = set()
    for d in docs:
        if d.doc_id in seen:
            raise ConfigError(f"duplicate doc_id {d.doc_id!r}")
        seen.add(d.doc_id)
    if not docs:
        raise ConfigError(f"no documents found under {path}")
    return docs


def write_tsv_corpus(docs, path):
    def esc(b):
        return b.decode("utf-8").replace("\\", "\\\\").replace("\n", "\\n").replace("\t", "\\t").replace("\r", "\\r")

    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for d in docs:
            fh.write(f"{d.domain}\t{d.doc_id}\t{esc(d.text)}\n")


# ---- manifest -----------------------------------------------------------------


def manifest_rows(split: CorpusSplit):
    for name, seqs in split.sets().items():
        for s in seqs:
            yield s.sample_id, name, s.domain


def write_manifest(split: CorpusSplit, path, provenance=None):
    buf = io.StringIO()
    for k, v in sorted((provenance or {}).items()):
        buf.write(f"# {k}: {v}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sample_id", "split", "domain"])
    for row in manifest_rows(split):
        w.writerow(row)
    _atomic_write_text(path, buf.getvalue())


def save_split(split: CorpusSplit, directory, provenance=None):
    """Persist a split as manifest.csv plus one .npy token matrix per part."""
    os.makedirs(directory, exist_ok=True)
    write_manifest(split, os.path.join(directory, "manifest.csv"), provenance)
    for name, seqs in split.sets().items():
        tmp = os.path.join(directory, f"{name}.npy.tmp")
        with open(tmp, "wb") as fh:
            np.save(fh, stack_tokens(seqs))
        os.replace(tmp, os.path.join(directory, f"{name}.npy"))


def load_split(directory) -> CorpusSplit:
    rows = {name: [] for name in SPLITS}
    with open(os.path.join(directory, "manifest.csv"), encoding="utf-8") as fh:
        reader = csv.reader(line for line in fh if not line.startswith("#"))
        next(reader)
        for sample_id, name, domain in reader:
            rows[name].append((sample_id, domain))
    out = {}
    for name in SPLITS:
        tokens = np.load(os.path.join(directory, f"{name}.npy"))
        if len(tokens) != len(rows[name]):
            raise ContractViolation(f"{name}.npy has {len(tokens)} rows, manifest lists {len(rows[name])}")
        out[name] = [PackedSequence(sid, dom, tokens[i]) for i, (sid, dom) in enumerate(rows[name])]
    return CorpusSplit(out["proxy"], out["train"], out["validation"])


def _atomic_write_text(path, text):
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)
