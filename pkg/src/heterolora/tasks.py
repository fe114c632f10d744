"""Synthetic desk-scale tasks.

parity
    Two tokens in the sequence are "marked bits" (ids 0 and 1); the rest are
    filler ids ``>= 2``.  The label is the XOR of the two marked bits.
majority
    Sequences over ids ``{0, 1}``; the label is the more frequent id.
copy-lm
    A random prefix followed by a copy of itself; the model is scored on
    predicting the copied half.

Train and eval sets never share a sequence and classification labels are
balanced to within one in each split.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .seeding import rng_for

TASK_KINDS = ("parity", "majority", "copy-lm")
N_MARKED = 2


class TaskError(ValueError):
    pass


@dataclass
class SyntheticTask:
    kind: str = "parity"
    vocab_size: int = 8
    seq_len: int = 8
    n_train: int = 512
    n_eval: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise TaskError(f"unknown task kind {self.kind!r}; expected one of {TASK_KINDS}")
        for name in ("vocab_size", "seq_len", "n_train", "n_eval"):
            if getattr(self, name) < 1:
                raise TaskError(f"{name} must be >= 1")
        if self.kind == "parity" and (self.vocab_size < 3 or self.seq_len < N_MARKED):
            raise TaskError("parity needs vocab_size >= 3 (two bit ids plus filler) and seq_len >= 2")
        if self.kind == "majority" and self.vocab_size < 2:
            raise TaskError("majority needs vocab_size >= 2")
        if self.kind == "copy-lm" and (self.vocab_size < 2 or self.seq_len < 2):
            raise TaskError("copy-lm needs vocab_size >= 2 and seq_len >= 2")

    @property
    def head(self) -> str:
        return "causal-lm" if self.kind == "copy-lm" else "classification"

    @property
    def n_classes(self) -> int:
        return self.vocab_size if self.kind == "copy-lm" else 2

    @property
    def model_seq_len(self) -> int:
        """Length of the id sequences the model sees."""
        return 2 * (self.seq_len // 2) - 1 if self.kind == "copy-lm" else self.seq_len


@dataclass
class Batch:
    tokens: np.ndarray
    targets: np.ndarray
    positions: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.tokens)


def parity_label(seq) -> int:
    bits = [int(t) for t in seq if t in (0, 1)]
    return int(np.bitwise_xor.reduce(bits)) if bits else 0


def majority_label(seq) -> int:
    seq = np.asarray(seq)
    return int((seq == 1).sum() > (seq == 0).sum())


def _sample_parity(label: int, task_cfg: SyntheticTask, rng: np.random.Generator) -> np.ndarray:
    seq = rng.integers(2, task_cfg.vocab_size, size=task_cfg.seq_len)
    pos = rng.choice(task_cfg.seq_len, size=N_MARKED, replace=False)
    bits = rng.integers(0, 2, size=N_MARKED)
    bits[-1] = label ^ int(np.bitwise_xor.reduce(bits[:-1]))
    seq[pos] = bits
    return seq


def _sample_majority(label: int, task_cfg: SyntheticTask, rng: np.random.Generator) -> np.ndarray:
    n = task_cfg.seq_len
    k = int(rng.integers(n // 2 + 1, n + 1))
    seq = np.full(n, 1 - label)
    seq[rng.choice(n, size=k, replace=False)] = label
    return seq


def _sample_copy(task_cfg: SyntheticTask, rng: np.random.Generator) -> np.ndarray:
    prefix = rng.integers(0, task_cfg.vocab_size, size=task_cfg.seq_len // 2)
    return np.concatenate([prefix, prefix])


class TaskData:
    """Materialised train/eval splits of a :class:`SyntheticTask`."""

    def __init__(self, task_cfg: SyntheticTask, train_x, train_y, eval_x, eval_y):
        self.config = task_cfg
        self.train_x, self.train_y = train_x, train_y
        self.eval_x, self.eval_y = eval_x, eval_y
        if task_cfg.kind == "copy-lm":
            half = task_cfg.seq_len // 2
            self.positions = np.arange(half - 1, 2 * half - 1)
        else:
            self.positions = None

    def _batch(self, x, y, idx) -> Batch:
        return Batch(x[idx], y[idx], self.positions)

    def train_batches(self, batch_size: int, rng: np.random.Generator) -> list[Batch]:
        """One shuffled epoch of training batches."""
        order = rng.permutation(len(self.train_x))
        return [self._batch(self.train_x, self.train_y, order[i:i + batch_size])
                for i in range(0, len(order), batch_size)]

    def eval_batches(self, batch_size: int) -> list[Batch]:
        n = len(self.eval_x)
        return [self._batch(self.eval_x, self.eval_y, np.arange(i, min(i + batch_size, n)))
                for i in range(0, n, batch_size)]

    def batch_stream(self, batch_size: int, rng: np.random.Generator) -> Iterator[Batch]:
        """Endless reshuffled training batches."""
        while True:
            yield from self.train_batches(batch_size, rng)


def make_task(task_cfg: SyntheticTask) -> TaskData:
    rng = rng_for(task_cfg.seed, f"task/{task_cfg.kind}")
    total = task_cfg.n_train + task_cfg.n_eval
    seen: set[tuple] = set()
    seqs, labels = [], []
    max_tries = 200 * total + 1000
    tries = 0
    for i in range(total):
        split_idx = i if i < task_cfg.n_train else i - task_cfg.n_train
        label = split_idx % 2
        while True:
            tries += 1
            if tries > max_tries:
                raise TaskError(f"cannot draw {total} distinct sequences; enlarge vocab_size or seq_len")
            if task_cfg.kind == "parity":
                s = _sample_parity(label, task_cfg, rng)
            elif task_cfg.kind == "majority":
                s = _sample_majority(label, task_cfg, rng)
            else:
                s = _sample_copy(task_cfg, rng)
            key = tuple(int(v) for v in s)
            if key not in seen:
                seen.add(key)
                break
        seqs.append(s)
        labels.append(label)
    seqs = np.asarray(seqs, dtype=np.int64)
    if task_cfg.kind == "copy-lm":
        x, y = seqs[:, :-1], seqs[:, 1:]
    else:
        x, y = seqs, np.asarray(labels, dtype=np.int64)
    n = task_cfg.n_train
    return TaskData(task_cfg, x[:n], y[:n], x[n:], y[n:])
