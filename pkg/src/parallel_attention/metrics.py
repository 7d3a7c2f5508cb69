"""Corpus BLEU, wall-clock timers, and attention divergence."""
from __future__ import annotations

import contextlib
import math
import time
from collections import Counter, defaultdict
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


def _tok(s) -> list:
    return s.split() if isinstance(s, str) else list(s)


def _ngrams(tokens: list, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def modified_ngram_precision(candidates, references, n: int) -> tuple[int, int]:
    """Corpus totals of (clipped n-gram matches, candidate n-grams).

    Sentences may be strings (split on whitespace) or token sequences.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates but {len(references)} references")
    matches = total = 0
    for cand, ref in zip(candidates, references):
        c = _ngrams(_tok(cand), n)
        r = _ngrams(_tok(ref), n)
        matches += sum(min(k, r[g]) for g, k in c.items())
        total += sum(c.values())
    return matches, total


@dataclass
class BleuScore:
    score: float
    precisions: list[float]
    brevity_penalty: float
    candidate_len: int
    reference_len: int

    @property
    def percent(self) -> float:
        return 100.0 * self.score


def corpus_bleu(candidates, references, max_n: int = 4, smooth: bool = False) -> BleuScore:
    """BLEU with n-gram counts summed over the corpus before taking ratios.

    ``smooth`` adds one to numerator and denominator of every order above 1,
    which keeps short synthetic sentences from zeroing the geometric mean.
    """
    if not candidates:
        raise ValueError("corpus_bleu needs at least one candidate")
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates but {len(references)} references")
    cand_len = sum(len(_tok(c)) for c in candidates)
    ref_len = sum(len(_tok(r)) for r in references)
    if ref_len == 0:
        raise ValueError("references are empty")
    precisions = []
    for n in range(1, max_n + 1):
        m, t = modified_ngram_precision(candidates, references, n)
        if smooth and n > 1:
            m, t = m + 1, t + 1
        precisions.append(m / t if t else 0.0)
    if cand_len == 0:
        bp = 0.0
    elif cand_len < ref_len:
        bp = math.exp(1.0 - ref_len / cand_len)
    else:
        bp = 1.0
    if min(precisions) <= 0.0:
        score = 0.0
    else:
        score = bp * math.exp(sum(math.log(p) for p in precisions) / max_n)
    return BleuScore(score, precisions, bp, cand_len, ref_len)


def sentence_bleu(candidate, reference, max_n: int = 4, smooth: bool = False) -> float:
    return corpus_bleu([candidate], [reference], max_n, smooth).score


class Timer:
    """Accumulates monotonic wall-clock seconds per label; labels may nest."""

    def __init__(self):
        self.totals: dict[str, float] = defaultdict(float)
        self.counts: dict[str, int] = defaultdict(int)

    @contextlib.contextmanager
    def block(self, label: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.totals[label] += time.perf_counter() - t0
            self.counts[label] += 1

    def __getitem__(self, label: str) -> float:
        return self.totals.get(label, 0.0)


def time_block(label: str, work: Callable[[], object], timer: Timer | None = None) -> float:
    """Run ``work()`` and return its wall-clock seconds, also adding them to ``timer``."""
    t0 = time.perf_counter()
    work()
    elapsed = time.perf_counter() - t0
    if timer is not None:
        timer.totals[label] += elapsed
        timer.counts[label] += 1
    return elapsed


def jensen_shannon(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise JS divergence in bits (range [0, 1]) between distributions on the last axis."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    m = 0.5 * (p + q)

    def kl(a, b):
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(a > 0, a * np.log2(a / np.where(b > 0, b, 1.0)), 0.0)
        return t.sum(axis=-1)

    return 0.5 * kl(p, m) + 0.5 * kl(q, m)


def mean_pairwise_divergence(maps: Sequence[np.ndarray]) -> tuple[float, list[tuple[int, int, float]]]:
    """Mean JS divergence over all pairs of same-shaped attention maps ``[heads, q, k]``.

    Returns the overall mean and the per-pair means.
    """
    pairs = []
    for i in range(len(maps)):
        for j in range(i + 1, len(maps)):
            pairs.append((i, j, float(jensen_shannon(maps[i], maps[j]).mean())))
    overall = float(np.mean([d for *_, d in pairs])) if pairs else 0.0
    return overall, pairs

