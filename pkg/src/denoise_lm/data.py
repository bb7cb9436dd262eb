"""Tokenizer, corpus I/O, batching, and the synthetic Markov corpus."""

from __future__ import annotations

import json
import string
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .encoder import CLS_ID, PAD_ID, SEP_ID
from .errors import DataError

N_RESERVED = 4


class ByteTokenizer:
    """Byte-level ids shifted past the four reserved ids; vocab 260.

    A vocab file (JSON ``{"vocab_size": N, "map": {"a": 4, ...}}``) replaces
    the byte mapping; characters missing from the map are rejected.
    """

    def __init__(self, mapping: dict[str, int] | None = None, vocab_size: int | None = None):
        self.mapping = mapping
        if mapping is None:
            self.vocab_size = 256 + N_RESERVED
        else:
            if any(i < N_RESERVED for i in mapping.values()):
                raise DataError("vocab map must not use reserved ids 0..3")
            self.vocab_size = vocab_size or max(mapping.values()) + 1

    @classmethod
    def from_file(cls, path) -> ByteTokenizer:
        doc = json.loads(Path(path).read_text())
        return cls(doc["map"], doc.get("vocab_size"))

    def encode(self, text: str) -> np.ndarray:
        if self.mapping is None:
            return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.int64) + N_RESERVED
        try:
            return np.array([self.mapping[ch] for ch in text], dtype=np.int64)
        except KeyError as e:
            raise DataError(f"character {e.args[0]!r} not in vocab map") from None

    def decode(self, ids) -> str:
        ids = [int(i) for i in ids if int(i) >= N_RESERVED]
        if self.mapping is None:
            return bytes(i - N_RESERVED for i in ids).decode("utf-8", errors="replace")
        inv = {v: k for k, v in self.mapping.items()}
        return "".join(inv.get(i, "?") for i in ids)


def read_corpus(path) -> list[str]:
    """Documents are separated by one or more blank lines."""
    text = Path(path).read_text(encoding="utf-8")
    docs, cur = [], []
    for line in text.split("\n"):
        if line.strip() == "":
            if cur:
                docs.append("\n".join(cur))
                cur = []
        else:
            cur.append(line)
    if cur:
        docs.append("\n".join(cur))
    if not docs:
        raise DataError(f"corpus {path} contains no documents")
    return docs


def pack_document(ids: np.ndarray, seq_len: int) -> np.ndarray:
    """[CLS] doc [SEP] truncated/padded to ``seq_len``; never mixes documents."""
    body = ids[: seq_len - 2]
    row = np.full(seq_len, PAD_ID, dtype=np.int64)
    row[0] = CLS_ID
    row[1 : 1 + body.size] = body
    row[1 + body.size] = SEP_ID
    return row


class Batcher:
    """Deterministic batches: the rows of step ``s`` depend only on ``(seed, s)``."""

    def __init__(self, docs: list[np.ndarray], seq_len: int, batch_size: int, seed: int):
        docs = [d for d in docs if d.size > 0]
        if not docs:
            raise DataError("corpus has no non-empty documents")
        self.rows = np.stack([pack_document(d, seq_len) for d in docs])
        self.batch_size = batch_size
        self.seed = seed

    def batch(self, step: int) -> np.ndarray:
        g = rngmod.generator(self.seed, "data", step)
        idx = g.integers(0, self.rows.shape[0], size=self.batch_size)
        return self.rows[idx].copy()


# synthetic corpus -----------------------------------------------------------------


@dataclass
class MarkovChain:
    """Order-2 character chain: ``next_probs[a, b]`` is the law of the char after ``a b``."""

    alphabet: str
    next_probs: np.ndarray  # [k, k, k]

    @classmethod
    def from_seed(
        cls,
        seed: int,
        alphabet_size: int = 8,
        concentration: float = 0.3,
        pair_concentration: float = 0.5,
        n_clusters: int = 2,
        switch_prob: float = 0.02,
    ) -> MarkovChain:
        """Random chain with slowly mixing letter clusters.

        Letter ``i`` belongs to cluster ``i % n_clusters``. After ``a b`` the
        chain leaves the cluster of ``b`` with probability ``switch_prob``
        (uniformly over the other letters); inside the cluster the next-char
        law is a product of a sparse Dirichlet(``concentration``) factor of
        ``b`` and a milder Dirichlet(``pair_concentration``) factor of ``a``.
        The long runs make the surrounding window informative from the first
        step of training, and the previous char narrows things further.
        """
        k = alphabet_size
        if not 2 <= k <= 26:
            raise DataError("alphabet_size must be in [2, 26]")
        if not 1 <= n_clusters <= k // 2:
            raise DataError("n_clusters must leave at least two letters per cluster")
        if not 0.0 <= switch_prob <= 1.0:
            raise DataError("switch_prob must be in [0, 1]")
        alphabet = string.ascii_lowercase[:k]
        g = rngmod.generator(seed, "corpus", 0)
        last = g.dirichlet(np.full(k, concentration), size=k)  # [b, c]
        before = g.dirichlet(np.full(k, pair_concentration), size=k)  # [a, c]
        probs = before[:, None, :] * last[None, :, :]
        cluster = np.arange(k) % n_clusters
        same = (cluster[:, None] == cluster[None, :]).astype(np.float64)  # [b, c]
        inside = probs * same[None]
        inside /= inside.sum(axis=2, keepdims=True)
        if n_clusters > 1:
            outside = (1.0 - same) / (1.0 - same).sum(axis=1, keepdims=True)
            probs = (1.0 - switch_prob) * inside + switch_prob * outside[None]
        else:
            probs = inside
        # keep every transition reachable so the chain is ergodic
        probs = (probs + 1e-3) / (1 + k * 1e-3)
        return cls(alphabet, probs)

    @property
    def k(self) -> int:
        return len(self.alphabet)

    def pair_transition(self) -> np.ndarray:
        """[k^2 x k^2] transition matrix over (previous, current) pairs."""
        k = self.k
        P = np.zeros((k * k, k * k))
        for a in range(k):
            for b in range(k):
                P[a * k + b, b * k : b * k + k] = self.next_probs[a, b]
        return P

    def stationary_pairs(self) -> np.ndarray:
        P = self.pair_transition()
        w, v = np.linalg.eig(P.T)
        pi = np.real(v[:, np.argmin(np.abs(w - 1))])
        return pi / pi.sum()

    def stationary_unigram(self) -> np.ndarray:
        return self.stationary_pairs().reshape(self.k, self.k).sum(axis=0)

    def sample(self, length: int, g: np.random.Generator) -> str:
        """One document started from the stationary pair law."""
        k = self.k
        pair = g.choice(k * k, p=self.stationary_pairs_cached())
        out = [pair // k, pair % k]
        cdf = np.cumsum(self.next_probs, axis=2)
        u = g.random(max(length - 2, 0))
        for i in range(length - 2):
            row = cdf[out[-2], out[-1]]
            out.append(min(int(np.searchsorted(row, u[i] * row[-1], side="right")), k - 1))
        return "".join(self.alphabet[c] for c in out[:length])

    def stationary_pairs_cached(self) -> np.ndarray:
        if not hasattr(self, "_pi"):
            self._pi = self.stationary_pairs()
        return self._pi


def generate_corpus(
    n_docs: int,
    doc_len_range: tuple[int, int],
    seed: int,
    alphabet_size: int = 8,
    concentration: float = 0.3,
    pair_concentration: float = 0.5,
    n_clusters: int = 2,
    switch_prob: float = 0.02,
) -> list[str]:
    if n_docs < 1:
        raise DataError("n_docs must be >= 1")
    lo, hi = doc_len_range
    if not 2 <= lo <= hi:
        raise DataError(f"document length range must satisfy 2 <= min <= max, got {doc_len_range}")
    chain = MarkovChain.from_seed(seed, alphabet_size, concentration, pair_concentration, n_clusters, switch_prob)
    docs = []
    for i in range(n_docs):
        g = rngmod.generator(seed, "corpus", 1, i)
        docs.append(chain.sample(int(g.integers(lo, hi + 1)), g))
    return docs


def write_corpus(docs: list[str], path) -> None:
    Path(path).write_text("\n\n".join(docs) + "\n", encoding="utf-8")
