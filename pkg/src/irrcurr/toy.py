"""Synthetic multi-domain corpora with a controlled mix of document difficulty.

Each domain mixes three kinds of documents:

* ``text``: word sequences from a domain lexicon with Zipf word frequencies
  and a sparse word-bigram grammar. Learned slowly, so the early/late gap is
  large.
* ``garbled``: the same kind of text with 30% of its characters replaced by
  random printable bytes. Partly learnable.
* ``noise``: uniform random bytes. Nothing to learn.
* ``motto``: one short phrase repeated, drawn from a small per-domain bank
  shared by every split. Pure memorization; only the skewed profile uses it.

The ``skewed`` profile builds two domains: ``alpha`` is clean text and mottos,
``beta`` is mostly noise plus garbled text.
"""

from __future__ import annotations

import string

import numpy as np

from .corpus import Document
from .errors import ConfigError

ALPHABETS = [
    string.ascii_lowercase,
    string.ascii_uppercase,
    "aeioubdfgklmnprstvz0123456789",
    "abcdefghijklmnopqrstuvwxyz'-",
]

PROFILES = {
    # kind -> share of a domain's documents
    "standard": {"text": 0.5, "garbled": 0.2, "noise": 0.3},
}


MOTTO_BANK = 12
GARBLE_RATE = 0.3


class _Language:
    def __init__(self, rng, alphabet, n_words=600, fanout=8):
        self.words = []
        seen = set()
        while len(self.words) < n_words:
            w = "".join(rng.choice(list(alphabet), size=int(rng.integers(2, 9))))
            if w not in seen:
                seen.add(w)
                self.words.append(w)
        ranks = np.arange(1, n_words + 1, dtype=np.float64)
        self.unigram = ranks ** -1.1 / np.sum(ranks ** -1.1)
        # each word has a few preferred successors
        self.succ = rng.choice(n_words, size=(n_words, fanout), p=self.unigram)
        w = np.arange(1, fanout + 1, dtype=np.float64) ** -1.0
        self.succ_p = w / w.sum()

    def sample(self, rng, n_bytes, noise_rate=0.0):
        out, size = [], 0
        cur = int(rng.choice(len(self.words), p=self.unigram))
        sentence = 0
        while size < n_bytes:
            word = self.words[cur]
            if noise_rate:
                word = "".join(c if rng.random() >= noise_rate else chr(int(rng.integers(33, 127))) for c in word)
            sentence += 1
            sep = ". " if sentence >= rng.integers(6, 14) else " "
            if sep == ". ":
                sentence = 0
            out.append(word + sep)
            size += len(word) + len(sep)
            if rng.random() < 0.15:
                cur = int(rng.choice(len(self.words), p=self.unigram))
            else:
                cur = int(self.succ[cur, rng.choice(len(self.succ_p), p=self.succ_p)])
        return "".join(out)[:n_bytes].encode()


def _phrase(rng, alphabet):
    return " ".join("".join(rng.choice(list(alphabet), size=int(rng.integers(3, 7)))) for _ in range(5)) + ". "


def _motto(phrase, n_bytes):
    return (phrase * (n_bytes // len(phrase) + 1))[:n_bytes].encode()


def _noise(rng, n_bytes):
    return rng.integers(1, 256, size=n_bytes, dtype=np.uint8).tobytes()


def _doc_lengths(rng, total, lo=800, hi=1600):
    lengths = []
    while total > 0:
        n = int(min(total, rng.integers(lo, hi + 1)))
        lengths.append(n)
        total -= n
    return lengths


def _domain(name, rng, alphabet, tokens, mix):
    lang = _Language(rng, alphabet)
    # a bank small enough that validation mottos were all seen in training
    bank = [_phrase(rng, alphabet) for _ in range(MOTTO_BANK)]
    lengths = _doc_lengths(rng, tokens)
    kinds = list(mix)
    counts = np.floor(np.array([mix[k] for k in kinds]) * len(lengths)).astype(int)
    counts[0] += len(lengths) - counts.sum()
    labels = np.repeat(np.arange(len(kinds)), counts)
    rng.shuffle(labels)
    docs = []
    for i, (n, lab) in enumerate(zip(lengths, labels)):
        kind = kinds[lab]
        if kind == "text":
            text = lang.sample(rng, n)
        elif kind == "garbled":
            text = lang.sample(rng, n, noise_rate=GARBLE_RATE)
        elif kind == "motto":
            text = _motto(bank[int(rng.integers(len(bank)))], n)
        else:
            text = _noise(rng, n)
        docs.append(Document(f"{name}/{kind}-{i:05d}", name, text))
    return docs


def generate(n_domains=3, tokens_per_domain=200_000, seed=0, profile="standard"):
    """Documents for a synthetic corpus; identical output for identical arguments."""
    if profile == "skewed":
        return generate_skewed(tokens_per_domain, seed)
    if profile not in PROFILES:
        raise ConfigError(f"unknown toy corpus profile {profile!r}")
    if not 1 <= n_domains <= len(ALPHABETS):
        raise ConfigError(f"n_domains must be between 1 and {len(ALPHABETS)}")
    docs = []
    for d in range(n_domains):
        rng = np.random.default_rng([seed, d])
        docs += _domain(f"d{d}", rng, ALPHABETS[d], tokens_per_domain, PROFILES[profile])
    return docs


def generate_skewed(tokens_per_domain=200_000, seed=0):
    """Two equal-size domains with very different learnability profiles."""
    alpha = _domain("alpha", np.random.default_rng([seed, 100]), ALPHABETS[0], tokens_per_domain,
                    {"text": 0.8, "motto": 0.2})
    beta = _domain("beta", np.random.default_rng([seed, 101]), ALPHABETS[1], tokens_per_domain,
                   {"garbled": 0.4, "noise": 0.6})
    return alpha + beta
