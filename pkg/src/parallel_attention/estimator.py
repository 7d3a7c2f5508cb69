"""Scikit-learn style front end: fit on sentence pairs, predict translations."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted

from .data import EOS, BOS, Vocabulary, build_vocab, encode_pairs
from .metrics import corpus_bleu
from .model import AttentionDump, ModelConfig, TransformerModel
from .parallel import Variant
from .tensor import no_grad
from .training import (TrainConfig, load_checkpoint, save_checkpoint, train, translate_ids)


def check_sentences(X, name: str = "X") -> list[str]:
    """Coerce an iterable of sentences to a list of whitespace-normalised strings."""
    if isinstance(X, (str, bytes)):
        raise TypeError(f"{name} must be a sequence of sentences, not a single string")
    if isinstance(X, np.ndarray) and X.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {X.shape}")
    out = []
    for i, s in enumerate(X):
        if not isinstance(s, str):
            raise TypeError(f"{name}[{i}] is {type(s).__name__}, expected str")
        out.append(" ".join(s.split()))
    return out


def check_pairs(X, y, require_nonempty: bool = True) -> tuple[list[str], list[str]]:
    X, y = check_sentences(X, "X"), check_sentences(y, "y")
    if len(X) != len(y):
        raise ValueError(f"X and y have inconsistent lengths: {len(X)} != {len(y)}")
    if require_nonempty and not X:
        raise ValueError("at least one sentence pair is required")
    for i, (s, t) in enumerate(zip(X, y)):
        if not s or not t:
            raise ValueError(f"pair {i} has an empty side")
    return X, y


class ParallelAttentionTranslator(BaseEstimator):
    """Encoder-decoder translator whose encoder is stacked or split into parallel branches.

    ``fit(X, y)`` takes source and target sentences (whitespace tokenised),
    ``predict(X)`` returns greedy translations and ``score(X, y)`` corpus BLEU
    in [0, 1]. ``transform(X)`` gives mean-pooled encoder states, so the
    encoder can feed other estimators.
    """

    def __init__(self, variant="aapa", branches=5, branch_depth=1, decoder_depth=2, d_model=64,
                 d_ff=256, heads=4, max_len=64, epochs=10, batch_size=32, lr=1e-3, beta2=0.999,
                 smoothing=0.1, min_freq=1, seed=0, workers=1, count_includes_final=False, apa_norm=True,
                 bleu_smooth=False, checkpoint_dir=None):
        self.variant = variant
        self.branches = branches
        self.branch_depth = branch_depth
        self.decoder_depth = decoder_depth
        self.d_model = d_model
        self.d_ff = d_ff
        self.heads = heads
        self.max_len = max_len
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.beta2 = beta2
        self.smoothing = smoothing
        self.min_freq = min_freq
        self.seed = seed
        self.workers = workers
        self.count_includes_final = count_includes_final
        self.apa_norm = apa_norm
        self.bleu_smooth = bleu_smooth
        self.checkpoint_dir = checkpoint_dir

    def _model_config(self, src_vocab: int, tgt_vocab: int) -> ModelConfig:
        return ModelConfig(variant=Variant.parse(self.variant).value, branches=self.branches,
                           branch_depth=self.branch_depth, decoder_depth=self.decoder_depth,
                           d_model=self.d_model, d_ff=self.d_ff, heads=self.heads, max_len=self.max_len,
                           src_vocab=src_vocab, tgt_vocab=tgt_vocab, seed=self.seed,
                           count_includes_final=self.count_includes_final, apa_norm=self.apa_norm,
                           workers=self.workers)

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                           beta2=self.beta2, smoothing=self.smoothing, seed=self.seed,
                           bleu_smooth=self.bleu_smooth)

    def fit(self, X, y, eval_set=None):
        """Train from scratch. ``eval_set=(X_val, y_val)`` drives the per-epoch validation curves."""
        X, y = check_pairs(X, y)
        self.src_vocab_ = build_vocab(X, self.min_freq)
        self.tgt_vocab_ = build_vocab(y, self.min_freq)
        self.model_ = TransformerModel(self._model_config(len(self.src_vocab_), len(self.tgt_vocab_)))
        train_data = encode_pairs(list(zip(X, y)), self.src_vocab_, self.tgt_vocab_)
        valid_data = []
        if eval_set is not None:
            Xv, yv = check_pairs(*eval_set)
            valid_data = encode_pairs(list(zip(Xv, yv)), self.src_vocab_, self.tgt_vocab_)
        limit = self.max_len - 1
        too_long = [i for i, (s, t) in enumerate(train_data + valid_data) if len(s) > limit or len(t) > limit]
        if too_long:
            raise ValueError(f"{len(too_long)} pairs exceed max_len-1={limit} tokens (first index {too_long[0]})")
        config = self.train_config()
        self.adam_ = config.new_adam(self.model_)
        self.report_ = train(self.model_, train_data, valid_data, config, self.adam_,
                             checkpoint_dir=self.checkpoint_dir, extra=self._extra())
        return self

    def _extra(self) -> dict:
        return {"src_vocab": self.src_vocab_.tokens(), "tgt_vocab": self.tgt_vocab_.tokens(),
                "estimator_params": {k: (str(v) if isinstance(v, Path) else v) for k, v in self.get_params().items()}}

    def _check_fitted(self):
        check_is_fitted(self, ["model_", "src_vocab_", "tgt_vocab_"])

    def predict(self, X) -> list[str]:
        self._check_fitted()
        X = check_sentences(X)
        ids = [self.src_vocab_.encode(s)[: self.max_len - 1] for s in X]
        hyps = translate_ids(self.model_, ids)
        return [self.tgt_vocab_.decode(h) for h in hyps]

    def score(self, X, y) -> float:
        X, y = check_pairs(X, y)
        return corpus_bleu(self.predict(X), y, smooth=self.bleu_smooth).score

    def transform(self, X) -> np.ndarray:
        """Mean of encoder output vectors over non-pad source positions, ``[n, d_model]``."""
        self._check_fitted()
        X = check_sentences(X)
        out = np.zeros((len(X), self.d_model))
        with no_grad():
            for i, s in enumerate(X):
                ids = self.src_vocab_.encode(s)[: self.max_len - 1] + [EOS]
                memory, _ = self.model_.encode(np.asarray(ids))
                out[i] = memory.data.mean(axis=0)
        return out

    def attention(self, source: str, target: str | None = None) -> AttentionDump:
        """Attention maps for one pair; without ``target`` the model's own translation is used."""
        self._check_fitted()
        src = self.src_vocab_.encode(" ".join(source.split()))[: self.max_len - 1]
        if target is None:
            tgt = translate_ids(self.model_, [src])[0]
        else:
            tgt = self.tgt_vocab_.encode(target)
        tgt = tgt[: self.max_len - 1]
        return self.model_.extract_attention(src + [EOS], [BOS] + tgt)

    def save(self, path) -> None:
        self._check_fitted()
        adam = getattr(self, "adam_", None) or self.train_config().new_adam(self.model_)
        report = getattr(self, "report_", None)
        save_checkpoint(path, self.model_, adam, self.train_config(), len(report) if report else 0,
                        report, self._extra())

    @classmethod
    def load(cls, path) -> "ParallelAttentionTranslator":
        ck = load_checkpoint(path)
        params = ck.extra.get("estimator_params")
        if params is None or "src_vocab" not in ck.extra:
            raise NotFittedError(f"{Path(path)} was not written by {cls.__name__}")
        est = cls(**params)
        est.model_ = ck.model
        est.src_vocab_ = Vocabulary(ck.extra["src_vocab"])
        est.tgt_vocab_ = Vocabulary(ck.extra["tgt_vocab"])
        est.report_ = ck.report
        est.adam_ = ck.adam
        return est
