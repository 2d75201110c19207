"""Labeled token-sequence datasets: seeded synthetic data and hashed text files."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Tuple

import numpy as np

from .exceptions import ValidationError


@dataclass(frozen=True)
class Dataset:
    sequences: Tuple[Tuple[int, ...], ...]
    labels: np.ndarray

    def __post_init__(self):
        if len(self.sequences) != len(self.labels):
            raise ValidationError("sequences and labels differ in length")

    def __len__(self):
        return len(self.sequences)

    def batch(self, ids: Sequence[int]):
        ids = np.asarray(ids, dtype=np.int64)
        return [list(self.sequences[i]) for i in ids], self.labels[ids]

    def sample(self, i: int):
        return list(self.sequences[int(i)]), int(self.labels[int(i)])

    def padded_tokens(self, ids) -> int:
        """Token rows a batch of ``ids`` produces after right-padding."""
        if len(ids) == 0:
            return 0
        return len(ids) * max(len(self.sequences[i]) for i in ids)


def _label_table(vocab_size: int, num_classes: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1ABE1]))
    return rng.standard_normal((vocab_size, num_classes))


def labels_from_tokens(sequences, vocab_size: int, num_classes: int, seed: int) -> np.ndarray:
    """Fixed seeded labelling rule: argmax over classes of summed per-token class weights."""
    table = _label_table(vocab_size, num_classes, seed)
    return np.array([int(np.argmax(table[list(s)].sum(axis=0))) for s in sequences], dtype=np.int64)


def synthetic_dataset(num_samples: int, vocab_size: int, num_classes: int = 2,
                      min_len: int = 2, max_len: int = 4, seed: int = 0) -> Dataset:
    """Uniform random token sequences with lengths in ``[min_len, max_len]``."""
    if num_samples < 1:
        raise ValidationError("num_samples must be >= 1")
    if not 1 <= min_len <= max_len:
        raise ValidationError(f"need 1 <= min_len <= max_len, got {min_len}, {max_len}")
    if vocab_size < 2:
        raise ValidationError("vocab_size must be >= 2")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDA7A]))
    lengths = rng.integers(min_len, max_len + 1, size=num_samples)
    seqs = tuple(tuple(int(t) for t in rng.integers(1, vocab_size, size=L)) for L in lengths)
    return Dataset(seqs, labels_from_tokens(seqs, vocab_size, num_classes, seed))


def hash_token(word: str, vocab_size: int, salt: str = "") -> int:
    """Stable hash of a word into ``[1, vocab_size)``; id 0 is the pad token."""
    h = hashlib.blake2b((salt + word).encode("utf-8"), digest_size=8).digest()
    return 1 + int.from_bytes(h, "little") % (vocab_size - 1)


def text_file_dataset(path, vocab_size: int, num_classes: int = 2, salt: str = "",
                      max_len: int = 64, seed: int = 0) -> Dataset:
    """Read one sample per non-empty line.

    A line ``<int label>\\t<text>`` carries its own label; a bare text line is
    labelled by the seeded token rule. Words are split on whitespace and hashed
    into the vocabulary; sequences are truncated to ``max_len`` tokens.
    """
    seqs, labels = [], []
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if not line:
            continue
        label = None
        head, sep, rest = line.partition("\t")
        if sep and head.strip().lstrip("-").isdigit():
            label, line = int(head), rest
        words = line.split()
        if not words:
            continue
        seq = tuple(hash_token(w, vocab_size, salt) for w in words[:max_len])
        seqs.append(seq)
        labels.append(label)
    if not seqs:
        raise ValidationError(f"no samples in {path}")
    auto = labels_from_tokens(seqs, vocab_size, num_classes, seed)
    y = np.array([auto[i] if lab is None else lab for i, lab in enumerate(labels)], dtype=np.int64)
    if np.any(y < 0) or np.any(y >= num_classes):
        raise ValidationError(f"labels must lie in [0, {num_classes})")
    return Dataset(tuple(seqs), y)
