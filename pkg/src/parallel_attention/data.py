"""Vocabularies, parallel corpora, batching, and synthetic translation tasks."""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .exceptions import FormatError, VocabularyError

logger = logging.getLogger(__name__)

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")

Pair = tuple[str, str]


class Vocabulary:
    """Token ↔ id map with reserved ids PAD=0, BOS=1, EOS=2, UNK=3."""

    def __init__(self, tokens: Sequence[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(RESERVED)}
        for tok in tokens:
            if tok in self.stoi:
                raise FormatError(f"duplicate vocabulary entry {tok!r}")
            self.stoi[tok] = len(self.itos)
            self.itos.append(tok)

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def __contains__(self, token: str) -> bool:
        return token in self.stoi and self.stoi[token] >= len(RESERVED)

    def tokens(self) -> list[str]:
        return self.itos[len(RESERVED):]

    def encode(self, text: str) -> list[int]:
        return [self.stoi.get(tok, UNK) if tok not in RESERVED else UNK for tok in text.split()]

    def decode(self, ids: Iterable[int], strip_special: bool = True) -> str:
        out = []
        for i in ids:
            i = int(i)
            if not 0 <= i < len(self.itos):
                raise VocabularyError(f"token id {i} outside vocabulary of size {len(self.itos)}")
            if strip_special and i in (PAD, BOS, EOS):
                continue
            out.append(self.itos[i])
        return " ".join(out)

    def save(self, path) -> None:
        """One token per line in id order, after a ``#vocab size=N`` header."""
        body = "\n".join(self.itos)
        Path(path).write_text(f"#vocab size={len(self.itos)}\n{body}\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        header = lines[0]
        if not header.startswith("#vocab size="):
            raise FormatError(f"{path}: missing vocabulary header")
        try:
            size = int(header.split("=", 1)[1])
        except ValueError:
            raise FormatError(f"{path}: bad vocabulary header {header!r}") from None
        entries = lines[1:1 + size]
        if len(entries) != size or tuple(entries[:len(RESERVED)]) != RESERVED:
            raise FormatError(f"{path}: expected {size} entries starting with the reserved tokens")
        return cls(entries[len(RESERVED):])


def build_vocab(sentences: Iterable[str], min_freq: int = 1) -> Vocabulary:
    counts = Counter(tok for s in sentences for tok in s.split())
    if not counts:
        raise FormatError("cannot build a vocabulary from an empty corpus")
    keep = sorted(t for t, c in counts.items() if c >= min_freq and t not in RESERVED)
    return Vocabulary(keep)


def load_parallel_tsv(path, max_len: int = 60) -> tuple[list[Pair], int]:
    """Read ``source<TAB>target`` lines; returns (pairs, number skipped for length)."""
    pairs: list[Pair] = []
    skipped = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise FormatError(f"{path}:{lineno}: expected one tab separating source and target")
            src, tgt = (" ".join(p.split()) for p in parts)
            ns, nt = len(src.split()), len(tgt.split())
            if ns == 0 or nt == 0:
                raise FormatError(f"{path}:{lineno}: empty source or target")
            if ns > max_len or nt > max_len:
                skipped += 1
                continue
            pairs.append((src, tgt))
    if skipped:
        logger.warning("%s: skipped %d pairs longer than %d tokens", path, skipped, max_len)
    return pairs, skipped


def write_parallel_tsv(path, pairs: Iterable[Pair]) -> None:
    Path(path).write_text("".join(f"{s}\t{t}\n" for s, t in pairs), encoding="utf-8")


def synthetic_tokens(vocab_size: int) -> list[str]:
    return [f"w{i}" for i in range(vocab_size - len(RESERVED))]


def make_synthetic_task(kind: str, vocab_size: int, n_pairs: int, len_range: tuple[int, int] = (3, 12),
                        seed: int = 0) -> list[Pair]:
    """Generate ``copy``, ``reverse`` or ``increment`` pairs over ``vocab_size - 4`` content tokens."""
    if vocab_size <= len(RESERVED):
        raise ValueError(f"vocab_size must exceed {len(RESERVED)}, got {vocab_size}")
    lo, hi = len_range
    if not 1 <= lo <= hi:
        raise ValueError(f"bad length range {len_range}")
    if kind not in ("copy", "reverse", "increment"):
        raise ValueError(f"unknown synthetic task {kind!r}")
    toks = synthetic_tokens(vocab_size)
    n = len(toks)
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n_pairs):
        ids = rng.integers(0, n, size=int(rng.integers(lo, hi + 1)))
        if kind == "copy":
            out = ids
        elif kind == "reverse":
            out = ids[::-1]
        else:
            out = (ids + 1) % n
        pairs.append((" ".join(toks[i] for i in ids), " ".join(toks[i] for i in out)))
    return pairs


def apply_task_rule(kind: str, source: str, vocab_size: int) -> str:
    """What a perfect model outputs for a synthetic source sentence."""
    toks = source.split()
    if kind == "copy":
        return source
    if kind == "reverse":
        return " ".join(reversed(toks))
    n = vocab_size - len(RESERVED)
    return " ".join(f"w{(int(t[1:]) + 1) % n}" for t in toks)


@dataclass
class TranslationBatch:
    """Padded id matrices for one mini-batch.

    ``src`` is source + EOS, ``tgt_in`` is BOS + target, ``tgt_out`` is target + EOS.
    """

    index: np.ndarray
    src: np.ndarray
    tgt_in: np.ndarray
    tgt_out: np.ndarray

    @property
    def src_mask(self) -> np.ndarray:
        return self.src != PAD

    @property
    def tgt_mask(self) -> np.ndarray:
        return self.tgt_out != PAD

    @property
    def src_lengths(self) -> np.ndarray:
        return self.src_mask.sum(axis=1)

    @property
    def n_tokens(self) -> int:
        return int(self.tgt_mask.sum())

    def __len__(self) -> int:
        return len(self.index)


EncodedPair = tuple[list[int], list[int]]


def encode_pairs(pairs: Sequence[Pair], src_vocab: Vocabulary, tgt_vocab: Vocabulary) -> list[EncodedPair]:
    return [(src_vocab.encode(s), tgt_vocab.encode(t)) for s, t in pairs]


def _pad(rows: list[list[int]]) -> np.ndarray:
    out = np.full((len(rows), max(len(r) for r in rows)), PAD, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, :len(r)] = r
    return out


def collate(data: Sequence[EncodedPair], index: Sequence[int]) -> TranslationBatch:
    idx = np.asarray(index, dtype=np.int64)
    src = [data[i][0] + [EOS] for i in idx]
    tgt_in = [[BOS] + data[i][1] for i in idx]
    tgt_out = [data[i][1] + [EOS] for i in idx]
    return TranslationBatch(idx, _pad(src), _pad(tgt_in), _pad(tgt_out))


def batch_iter(data: Sequence[EncodedPair], batch_size: int, seed: int = 0, epoch: int = 1,
               shuffle: bool = True) -> Iterator[TranslationBatch]:
    """Length-bucketed batches covering each pair exactly once.

    Pairs are shuffled, stably sorted by source length, cut into batches, and
    the batch order is shuffled; all randomness derives from ``(seed, epoch)``.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    n = len(data)
    if shuffle:
        rng = np.random.default_rng([seed, epoch])
        order = rng.permutation(n)
        order = order[np.argsort([len(data[i][0]) for i in order], kind="stable")]
        chunks = [order[i:i + batch_size] for i in range(0, n, batch_size)]
        chunks = [chunks[i] for i in rng.permutation(len(chunks))]
    else:
        order = np.arange(n)
        chunks = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    for chunk in chunks:
        yield collate(data, chunk)


def train_test_split(pairs: Sequence[Pair], n_test: int) -> tuple[list[Pair], list[Pair]]:
    """Deterministic tail split: the last ``n_test`` pairs form the held-out set."""
    pairs = list(pairs)
    if not 0 <= n_test < len(pairs):
        raise ValueError(f"cannot hold out {n_test} of {len(pairs)} pairs")
    return pairs[:len(pairs) - n_test], pairs[len(pairs) - n_test:]
