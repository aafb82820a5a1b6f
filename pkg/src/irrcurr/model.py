"""GPT-style decoder used for both the proxy and the main model."""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ContractViolation


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_model: int
    n_heads: int
    vocab_size: int = 256
    context_len: int = 128

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "vocab_size", "context_len"):
            value = getattr(self, name)
            if not isinstance(value, int) or value <= 0:
                raise ConfigError(f"{name} must be a positive int, got {value!r}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.context_len < 2:
            raise ConfigError("context_len must be at least 2")

    @property
    def head_dim(self):
        return self.d_model // self.n_heads

    def param_count(self):
        v, c, d, n = self.vocab_size, self.context_len, self.d_model, self.n_layers
        per_layer = 12 * d * d + 13 * d
        return v * d + c * d + n * per_layer + 2 * d + d * v + v

    def to_dict(self):
        return asdict(self)

    def digest(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


PROXY_DESK = ModelConfig(n_layers=2, d_model=128, n_heads=4)
MAIN_DESK = ModelConfig(n_layers=4, d_model=256, n_heads=4)


def param_layout(config: ModelConfig):
    """(name, shape, tag) for every parameter, in a fixed order."""
    d, v, c = config.d_model, config.vocab_size, config.context_len
    out = [("wte", (v, d), "embedding"), ("wpe", (c, d), "embedding")]
    for i in range(config.n_layers):
        p = f"h{i}."
        out += [
            (p + "ln1.g", (d,), "other"),
            (p + "ln1.b", (d,), "other"),
            (p + "attn.qkv.w", (d, 3 * d), "attention"),
            (p + "attn.qkv.b", (3 * d,), "other"),
            (p + "attn.proj.w", (d, d), "attention"),
            (p + "attn.proj.b", (d,), "other"),
            (p + "ln2.g", (d,), "other"),
            (p + "ln2.b", (d,), "other"),
            (p + "mlp.fc.w", (d, 4 * d), "dense"),
            (p + "mlp.fc.b", (4 * d,), "other"),
            (p + "mlp.proj.w", (4 * d, d), "dense"),
            (p + "mlp.proj.b", (d,), "other"),
        ]
    out += [("lnf.g", (d,), "other"), ("lnf.b", (d,), "other"), ("head.w", (d, v), "other"), ("head.b", (v,), "other")]
    return out


def init_params(config: ModelConfig, seed: int) -> ad.ParameterSet:
    """Normal(0, 0.02) matrices, zero biases, unit layernorm gains."""
    rng = np.random.default_rng(seed)
    params, tags = {}, {}
    for name, shape, tag in param_layout(config):
        if len(shape) == 2:
            arr = rng.normal(0.0, 0.02, size=shape)
        elif name.endswith(".g"):
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        params[name] = ad.tensor(arr.astype(np.float32))
        tags[name] = tag
    return ad.ParameterSet(params, tags)


class LanguageModel:
    def __init__(self, config: ModelConfig, params: ad.ParameterSet):
        expected = {name: shape for name, shape, _ in param_layout(config)}
        got = {name: p.shape for name, p in params.items()}
        if expected != got:
            raise ContractViolation("parameter shapes do not match the model config")
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0):
        return cls(config, init_params(config, seed))

    def with_params(self, params: ad.ParameterSet):
        return LanguageModel(self.config, params)

    @property
    def num_params(self):
        return self.params.num_params

    def forward(self, tokens) -> ad.Tensor:
        """Logits for a (batch, seq) or (seq,) array of token ids."""
        ids = np.asarray(tokens)
        squeeze = ids.ndim == 1
        if squeeze:
            ids = ids[None, :]
        if ids.ndim != 2 or ids.shape[1] == 0:
            raise ContractViolation(f"tokens must be a non-empty (batch, seq) array, got shape {ids.shape}")
        cfg, p = self.config, self.params
        b, t = ids.shape
        if t > cfg.context_len:
            raise ContractViolation(f"sequence length {t} exceeds context_len {cfg.context_len}")
        if ids.dtype.kind not in "iu" or ids.min() < 0 or ids.max() >= cfg.vocab_size:
            raise ContractViolation(f"token ids must be integers in [0, {cfg.vocab_size})")

        pos = np.broadcast_to(np.arange(t), (b, t))
        x = ad.add(ad.embedding(p["wte"], ids), ad.embedding(p["wpe"], pos))
        h_, dh = cfg.n_heads, cfg.head_dim
        scale = 1.0 / math.sqrt(dh)
        for i in range(cfg.n_layers):
            n = f"h{i}."
            h = ad.layernorm(x, p[n + "ln1.g"], p[n + "ln1.b"])
            qkv = ad.add(ad.matmul(h, p[n + "attn.qkv.w"]), p[n + "attn.qkv.b"])
            qkv = ad.transpose(ad.reshape(qkv, (b, t, 3, h_, dh)), (2, 0, 3, 1, 4))
            q, k, v = ad.take(qkv, 0), ad.take(qkv, 1), ad.take(qkv, 2)
            att = ad.softmax(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), causal=True, scale=scale)
            o = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (b, t, cfg.d_model))
            x = ad.add(x, ad.add(ad.matmul(o, p[n + "attn.proj.w"]), p[n + "attn.proj.b"]))
            h = ad.layernorm(x, p[n + "ln2.g"], p[n + "ln2.b"])
            h = ad.gelu(ad.add(ad.matmul(h, p[n + "mlp.fc.w"]), p[n + "mlp.fc.b"]))
            x = ad.add(x, ad.add(ad.matmul(h, p[n + "mlp.proj.w"]), p[n + "mlp.proj.b"]))
        x = ad.layernorm(x, p["lnf.g"], p["lnf.b"])
        logits = ad.add(ad.matmul(x, p["head.w"]), p["head.b"])
        if squeeze:
            logits = ad.reshape(logits, (t, cfg.vocab_size))
        return logits

    def loss(self, batch, lengths=None) -> ad.Tensor:
        """Mean next-token NLL over a (batch, seq) array.

        With ``lengths``, positions at or past each sequence's length are
        padding and excluded from the mean.
        """
        ids = np.asarray(batch)
        if ids.ndim == 1:
            ids = ids[None, :]
        if ids.shape[1] < 2:
            raise ContractViolation("next-token loss needs sequences of length >= 2")
        logits = self.forward(ids[:, :-1])
        v = self.config.vocab_size
        weights = None
        if lengths is not None:
            lengths = np.asarray(lengths).reshape(-1)
            if lengths.min() < 2:
                raise ContractViolation("every sequence needs length >= 2")
            weights = (np.arange(ids.shape[1] - 1)[None, :] < (lengths[:, None] - 1)).reshape(-1)
        return ad.cross_entropy(ad.reshape(logits, (-1, v)), ids[:, 1:].reshape(-1), weights)

    def sequence_losses(self, batch, chunk=32) -> np.ndarray:
        """Per-sequence mean NLL (float64) for equal-length sequences, no graph."""
        ids = np.asarray(batch)
        if ids.ndim != 2 or ids.shape[1] < 2:
            raise ContractViolation("sequence_losses expects (batch, seq>=2) token ids")
        out = np.empty(ids.shape[0], dtype=np.float64)
        v = self.config.vocab_size
        with ad.no_grad():
            for s in range(0, ids.shape[0], chunk):
                part = ids[s:s + chunk]
                logits = self.forward(part[:, :-1])
                rows = ad.row_losses(ad.reshape(logits, (-1, v)), part[:, 1:].reshape(-1))
                out[s:s + chunk] = rows.reshape(part.shape[0], -1).astype(np.float64).mean(axis=1)
        return out


def forward(model: LanguageModel, tokens) -> ad.Tensor:
    return model.forward(tokens)


def sequence_loss(model: LanguageModel, tokens, length=None) -> float:
    """Per-token mean NLL in nats of one sequence (optionally padded past ``length``)."""
    ids = np.asarray(tokens)
    if ids.ndim != 1:
        raise ContractViolation("sequence_loss takes one sequence")
    if ids.shape[0] < 2 or (length is not None and length < 2):
        raise ContractViolation("sequence_loss needs at least 2 tokens")
    with ad.no_grad():
        lengths = None if length is None else [length]
        return float(model.loss(ids[None, :], lengths).data)


# ---- checkpoints --------------------------------------------------------------

MAGIC = b"IRRCKPT1\n"


@dataclass
class Checkpoint:
    step: int
    config: ModelConfig
    params: ad.ParameterSet
    provenance: dict = field(default_factory=dict)

    def model(self):
        return LanguageModel(self.config, self.params)


def save_checkpoint(path, ckpt: Checkpoint):
    """Write a checkpoint: magic line, header length line, JSON header, raw blobs.

    Blobs are little-endian in header order; identical inputs give identical bytes.
    """
    entries, blobs, offset = [], [], 0
    for name, t in ckpt.params.items():
        arr = np.ascontiguousarray(t.data)
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append({
            "name": name,
            "tag": ckpt.params.tags[name],
            "shape": list(arr.shape),
            "dtype": arr.dtype.name,
            "offset": offset,
            "nbytes": len(raw),
        })
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"format": 1, "step": ckpt.step, "config": ckpt.config.to_dict(), "params": entries, "provenance": ckpt.provenance},
        sort_keys=True,
    ).encode()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(b"%016d\n" % len(header))
        fh.write(header)
        fh.write(b"\n")
        for raw in blobs:
            fh.write(raw)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ContractViolation(f"{path} is not a checkpoint file")
        n = int(fh.readline())
        header = json.loads(fh.read(n))
        fh.read(1)
        body = fh.read()
    params, tags = {}, {}
    for e in header["params"]:
        dt = np.dtype(e["dtype"]).newbyteorder("<")
        arr = np.frombuffer(body, dtype=dt, count=int(np.prod(e["shape"])), offset=e["offset"])
        params[e["name"]] = ad.Tensor(arr.reshape(e["shape"]).astype(e["dtype"]))
        tags[e["name"]] = e["tag"]
    return Checkpoint(
        step=header["step"],
        config=ModelConfig(**header["config"]),
        params=ad.ParameterSet(params, tags),
        provenance=header.get("provenance", {}),
    )
