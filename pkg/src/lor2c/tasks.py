"""Synthetic classification tasks and the pretraining corpus."""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .transformer import PAD_ID

TASK_KINDS = ("parity", "majority-token", "pattern-match", "copy-classify")
PATTERN = (1, 2, 3)
EVAL_BUCKETS = 4  # one bucket of the hashed sequence space is reserved for eval


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "parity"
    vocab_size: int = 4
    seq_len: int = 8
    n_classes: int = 2
    n_train: int = 2048
    n_eval: int = 512
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"unknown task kind {self.kind!r}; expected one of {TASK_KINDS}")
        if self.seq_len < 1 or self.n_train < 1 or self.n_eval < 1:
            raise ConfigError("seq_len, n_train and n_eval must be >= 1")
        if self.vocab_size < 2:
            raise ConfigError("task vocab_size must be >= 2")
        if self.kind in ("parity", "pattern-match") and self.n_classes != 2:
            raise ConfigError(f"{self.kind} is binary; n_classes must be 2, got {self.n_classes}")
        if self.kind in ("majority-token", "copy-classify") and not 2 <= self.n_classes <= self.vocab_size:
            raise ConfigError(f"{self.kind} needs 2 <= n_classes <= vocab_size, got {self.n_classes}")
        if self.kind == "pattern-match" and (self.vocab_size <= max(PATTERN) or self.seq_len < len(PATTERN)):
            raise ConfigError(f"pattern-match needs vocab_size > {max(PATTERN)} and seq_len >= {len(PATTERN)}")


@dataclass
class Dataset:
    tokens: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


def label_of(kind: str, seq: np.ndarray, n_classes: int = 2) -> int:
    """Closed-form label of one token sequence."""
    seq = np.asarray(seq)
    if kind == "parity":
        return int(np.count_nonzero(seq == 1) % 2)
    if kind == "majority-token":
        counts = np.bincount(seq[seq < n_classes], minlength=n_classes)
        return int(np.argmax(counts))
    if kind == "pattern-match":
        p = len(PATTERN)
        return int(any(tuple(seq[i:i + p]) == PATTERN for i in range(len(seq) - p + 1)))
    if kind == "copy-classify":
        return int(seq[0] % n_classes)
    raise ConfigError(f"unknown task kind {kind!r}")


def is_eval_sequence(seq: np.ndarray) -> bool:
    return zlib.crc32(np.asarray(seq, dtype=np.int64).tobytes()) % EVAL_BUCKETS == 0


def _propose(spec: TaskSpec, rng: np.random.Generator, target: int) -> np.ndarray:
    seq = rng.integers(0, spec.vocab_size, size=spec.seq_len)
    if spec.kind == "pattern-match" and target == 1:
        at = rng.integers(0, spec.seq_len - len(PATTERN) + 1)
        seq[at:at + len(PATTERN)] = PATTERN
    return seq


def _sample(spec: TaskSpec, n: int, rng: np.random.Generator, want_eval: bool) -> Dataset:
    tokens = np.empty((n, spec.seq_len), dtype=np.int64)
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        target = int(rng.integers(0, spec.n_classes))
        while True:
            seq = _propose(spec, rng, target)
            if is_eval_sequence(seq) == want_eval and label_of(spec.kind, seq, spec.n_classes) == target:
                break
        tokens[i] = seq
        labels[i] = target
    return Dataset(tokens, labels)


def make_task(spec: TaskSpec) -> tuple[Dataset, Dataset]:
    """Deterministic (train, eval) sets with class-balanced labels.

    Sequences are assigned to a split by a hash of their tokens, so no sequence
    can appear in both.
    """
    train = _sample(spec, spec.n_train, np.random.default_rng([spec.seed, 0]), want_eval=False)
    evals = _sample(spec, spec.n_eval, np.random.default_rng([spec.seed, 1]), want_eval=True)
    return train, evals


def make_corpus(vocab_size: int, max_seq_len: int, n_seqs: int, seed: int,
                min_len: int = 2) -> np.ndarray:
    """Padded sequences from a seeded random bigram chain over ids ``0..vocab_size-2``.

    The last id is left free for the mask token.
    """
    n_tok = vocab_size - 1
    if n_tok < 2:
        raise ConfigError("pretraining needs vocab_size >= 3")
    rng = np.random.default_rng([seed, 7])
    logits = rng.normal(0.0, 2.0, size=(n_tok, n_tok))
    trans = np.exp(logits)
    trans /= trans.sum(axis=1, keepdims=True)
    cdf = np.cumsum(trans, axis=1)
    out = np.full((n_seqs, max_seq_len), PAD_ID, dtype=np.int64)
    lengths = rng.integers(min(min_len, max_seq_len), max_seq_len + 1, size=n_seqs)
    for i in range(n_seqs):
        tok = int(rng.integers(0, n_tok))
        for j in range(lengths[i]):
            out[i, j] = tok
            tok = min(int(np.searchsorted(cdf[tok], rng.random(), side="right")), n_tok - 1)
    return out
