"""Loss, optimizer, greedy decoding, the training loop, and checkpoints."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import struct
import time
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import BOS, EOS, PAD, EncodedPair, batch_iter, collate
from .exceptions import ConfigError, ContractError, FormatError, TrainingError
from .metrics import corpus_bleu
from .model import ModelConfig, TransformerModel
from .tensor import Tensor, add, backward, log_softmax, mul, no_grad, scale, sum_all

logger = logging.getLogger(__name__)


def _xlogx(x: float) -> float:
    return x * math.log(x) if x > 0 else 0.0


def smoothed_targets(target_ids: np.ndarray, vocab: int, smoothing: float) -> np.ndarray:
    """(1 − ε) on the gold id and ε / (vocab − 1) on every other id."""
    off = smoothing / (vocab - 1) if vocab > 1 else 0.0
    t = np.full(target_ids.shape + (vocab,), off)
    np.put_along_axis(t, target_ids[..., None], 1.0 - smoothing, axis=-1)
    return t


def kl_div_loss(logits: Tensor, target_ids, smoothing: float = 0.1, pad_id: int = PAD) -> Tensor:
    """Mean over non-pad positions of KL(smoothed one-hot ‖ softmax(logits))."""
    if not 0.0 <= smoothing < 1.0:
        raise ContractError(f"smoothing must lie in [0, 1), got {smoothing}")
    target_ids = np.asarray(target_ids, dtype=np.int64)
    vocab = logits.shape[-1]
    if logits.shape[:-1] != target_ids.shape:
        raise ContractError(f"logits {logits.shape} do not match targets {target_ids.shape}")
    if smoothing > 0 and vocab < 2:
        raise ContractError("label smoothing needs a vocabulary of at least two ids")
    keep = target_ids != pad_id
    n = int(keep.sum())
    if n == 0:
        raise ContractError("every target position is padding")
    t = smoothed_targets(target_ids, vocab, smoothing) * keep[..., None]
    entropy_term = _xlogx(1.0 - smoothing) + (vocab - 1) * _xlogx(smoothing / (vocab - 1) if vocab > 1 else 0.0)
    cross = sum_all(mul(log_softmax(logits), Tensor(t)))
    return add(scale(cross, -1.0 / n), entropy_term)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-9
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def create(cls, params: Sequence[np.ndarray], **hyper) -> "AdamState":
        return cls(m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params], **hyper)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None], state: AdamState) -> AdamState:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ContractError("params, grads and optimizer state disagree in length")
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ContractError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


def greedy_decode_batch(model: TransformerModel, sources: Sequence[Sequence[int]],
                        max_len: int | None = None) -> list[list[int]]:
    """Argmax decoding from BOS until EOS or ``max_len`` tokens; ties go to the lowest id."""
    limit = model.config.max_len - 1
    max_len = limit if max_len is None else min(max_len, limit)
    if not sources:
        return []
    src = collate([(list(s), []) for s in sources], range(len(sources))).src
    out = [[] for _ in sources]
    with no_grad():
        memory, mask = model.encode(src)
        tgt = np.full((len(sources), 1), BOS, dtype=np.int64)
        done = np.zeros(len(sources), dtype=bool)
        for _ in range(max_len):
            logits = model.decode(memory, mask, tgt).data[:, -1, :]
            nxt = logits.argmax(axis=-1)
            for i in np.flatnonzero(~done):
                if nxt[i] == EOS:
                    done[i] = True
                else:
                    out[i].append(int(nxt[i]))
            if done.all():
                break
            nxt = np.where(done, PAD, nxt)
            tgt = np.concatenate([tgt, nxt[:, None]], axis=1)
    return out


def greedy_decode(model: TransformerModel, src_ids: Sequence[int], max_len: int | None = None) -> list[int]:
    return greedy_decode_batch(model, [src_ids], max_len)[0]


def translate_ids(model: TransformerModel, sources: Sequence[Sequence[int]], max_len: int | None = None,
                  chunk: int = 256) -> list[list[int]]:
    """Greedy decoding in length-sorted chunks (results returned in input order).

    Without ``max_len`` each chunk stops after ``2 * longest source + 10`` tokens.
    """
    order = sorted(range(len(sources)), key=lambda i: len(sources[i]))
    result: list[list[int]] = [[] for _ in sources]
    for start in range(0, len(order), chunk):
        idx = order[start:start + chunk]
        limit = max_len if max_len is not None else 2 * max(len(sources[i]) for i in idx) + 10
        for i, hyp in zip(idx, greedy_decode_batch(model, [sources[i] for i in idx], limit)):
            result[i] = hyp
    return result


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-9
    smoothing: float = 0.1
    seed: int = 0
    bleu_smooth: bool = False
    decode_max_len: int | None = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if not 0.0 <= self.smoothing < 1.0:
            raise ConfigError(f"smoothing must lie in [0, 1), got {self.smoothing}")

    def new_adam(self, model: TransformerModel) -> AdamState:
        return AdamState.create([p.data for p in model.parameters()], lr=self.lr, beta1=self.beta1,
                                beta2=self.beta2, eps=self.adam_eps)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_bleu: float
    seconds: float


CSV_FIELDS = ("epoch", "train_loss", "val_loss", "val_bleu", "seconds")


@dataclass
class TrainReport:
    records: list[EpochRecord] = field(default_factory=list)
    total_seconds: float = 0.0

    def __len__(self) -> int:
        return len(self.records)

    def metrics(self) -> list[tuple[int, float, float, float]]:
        """Records without the timing column (the reproducible part)."""
        return [(r.epoch, r.train_loss, r.val_loss, r.val_bleu) for r in self.records]

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in self.records:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.val_bleu), f"{r.seconds:.6f}"])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text

    @classmethod
    def from_csv(cls, text: str) -> "TrainReport":
        rows = list(csv.DictReader(io.StringIO(text)))
        return cls([EpochRecord(int(r["epoch"]), float(r["train_loss"]), float(r["val_loss"]),
                                float(r["val_bleu"]), float(r["seconds"])) for r in rows])


def batch_loss(model: TransformerModel, batch, smoothing: float) -> Tensor:
    return kl_div_loss(model.forward(batch.src, batch.tgt_in), batch.tgt_out, smoothing, PAD)


def evaluate_loss(model: TransformerModel, data: Sequence[EncodedPair], batch_size: int, smoothing: float) -> float:
    """Token-weighted mean loss over ``data`` in a fixed order."""
    total = tokens = 0.0
    with no_grad():
        for batch in batch_iter(data, batch_size, shuffle=False):
            total += float(batch_loss(model, batch, smoothing).data) * batch.n_tokens
            tokens += batch.n_tokens
    return total / tokens


def evaluate_bleu(model: TransformerModel, data: Sequence[EncodedPair], max_len: int | None = None,
                  smooth: bool = False) -> float:
    hyps = translate_ids(model, [s for s, _ in data], max_len)
    return corpus_bleu(hyps, [t for _, t in data], smooth=smooth).score


def train(model: TransformerModel, train_data: Sequence[EncodedPair], valid_data: Sequence[EncodedPair],
          config: TrainConfig, adam: AdamState | None = None, start_epoch: int = 1,
          report: TrainReport | None = None, checkpoint_dir=None, extra: dict | None = None) -> TrainReport:
    """Teacher-forced mini-batch Adam on the KL loss for epochs ``start_epoch..config.epochs``.

    After each epoch the validation loss and greedy-decoding BLEU are recorded
    and, with ``checkpoint_dir``, ``epoch_{k}.ckpt`` is written. Batch order
    depends only on ``(config.seed, epoch)``, so a run resumed from a checkpoint
    replays the same batches as an uninterrupted one.
    """
    if not train_data:
        raise ContractError("training corpus is empty")
    params = model.parameters()
    adam = adam if adam is not None else config.new_adam(model)
    report = report if report is not None else TrainReport()
    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
    run_start = time.perf_counter()
    prior_total = report.total_seconds
    for epoch in range(start_epoch, config.epochs + 1):
        t0 = time.perf_counter()
        total = tokens = 0.0
        for i, batch in enumerate(batch_iter(train_data, config.batch_size, config.seed, epoch)):
            model.zero_grad()
            loss = batch_loss(model, batch, config.smoothing)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"epoch {epoch}, batch {i} (pairs {batch.index[:8].tolist()}...): "
                                    f"loss is {value}")
            backward(loss)
            adam_step([p.data for p in params], [p.grad for p in params], adam)
            total += value * batch.n_tokens
            tokens += batch.n_tokens
        if valid_data:
            val_loss = evaluate_loss(model, valid_data, config.batch_size, config.smoothing)
            val_bleu = evaluate_bleu(model, valid_data, config.decode_max_len, config.bleu_smooth)
        else:
            val_loss = val_bleu = float("nan")
        record = EpochRecord(epoch, total / tokens, val_loss, val_bleu, time.perf_counter() - t0)
        report.records.append(record)
        report.total_seconds = prior_total + (time.perf_counter() - run_start)
        if checkpoint_dir is not None:
            save_checkpoint(Path(checkpoint_dir) / f"epoch_{epoch}.ckpt", model, adam, config, epoch, report, extra)
        logger.info("epoch %d train_loss=%.4f val_loss=%.4f val_bleu=%.4f (%.1fs)",
                    epoch, record.train_loss, val_loss, val_bleu, record.seconds)
    report.total_seconds = prior_total + (time.perf_counter() - run_start)
    return report


# Checkpoints: MAGIC | u32 version | u64 header length | JSON header | float64 LE arrays.
MAGIC = b"PATTNCKP"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


@dataclass
class Checkpoint:
    model: TransformerModel
    adam: AdamState
    train_config: TrainConfig
    epoch: int
    report: TrainReport
    extra: dict


def save_checkpoint(path, model: TransformerModel, adam: AdamState, train_config: TrainConfig,
                    epoch: int = 0, report: TrainReport | None = None, extra: dict | None = None) -> None:
    names = [n for n, _ in model.named_parameters()]
    arrays = [(f"param/{n}", t.data) for n, t in model.named_parameters()]
    arrays += [(f"adam_m/{n}", a) for n, a in zip(names, adam.m)]
    arrays += [(f"adam_v/{n}", a) for n, a in zip(names, adam.v)]
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays)
    header = {
        "version": VERSION,
        "model_config": model.config.to_dict(),
        "train_config": asdict(train_config),
        "seed": model.config.seed,
        "epoch": epoch,
        "adam": {k: getattr(adam, k) for k in ("lr", "beta1", "beta2", "eps", "t")},
        "report": [asdict(r) for r in (report.records if report else [])],
        "report_total_seconds": report.total_seconds if report else 0.0,
        "extra": extra or {},
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
        "payload_bytes": len(payload),
        "crc32": zlib.crc32(payload),
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(head)))
        fh.write(head)
        fh.write(payload)
    os.replace(tmp, path)


def _read_parts(path) -> tuple[dict, bytes]:
    with open(path, "rb") as fh:
        raw = fh.read(_PREFIX.size)
        if len(raw) != _PREFIX.size:
            raise FormatError(f"{path}: truncated checkpoint prefix")
        magic, version, head_len = _PREFIX.unpack(raw)
        if magic != MAGIC:
            raise FormatError(f"{path}: not a checkpoint file")
        if version != VERSION:
            raise FormatError(f"{path}: checkpoint version {version}, expected {VERSION}")
        head = fh.read(head_len)
        payload = fh.read()
    if len(head) != head_len:
        raise FormatError(f"{path}: truncated checkpoint header")
    try:
        header = json.loads(head.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt checkpoint header") from exc
    return header, payload


def read_checkpoint_header(path) -> dict:
    return _read_parts(path)[0]


def load_checkpoint(path) -> Checkpoint:
    """Rebuild model, optimizer state and metadata; raises FormatError on any mismatch."""
    header, payload = _read_parts(path)
    if len(payload) != header["payload_bytes"]:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, header promises {header['payload_bytes']}")
    if zlib.crc32(payload) != header["crc32"]:
        raise FormatError(f"{path}: payload checksum mismatch")
    arrays: dict[str, np.ndarray] = {}
    offset = 0
    for spec in header["arrays"]:
        n = int(np.prod(spec["shape"], dtype=np.int64))
        arrays[spec["name"]] = np.frombuffer(payload, dtype="<f8", count=n, offset=offset).astype(
            np.float64).reshape(spec["shape"])
        offset += 8 * n
    try:
        model = TransformerModel(ModelConfig.from_dict(header["model_config"]))
        names = [n for n, _ in model.named_parameters()]
        model.load_state_dict({n: arrays[f"param/{n}"] for n in names})
        adam = AdamState(**header["adam"], m=[arrays[f"adam_m/{n}"].copy() for n in names],
                         v=[arrays[f"adam_v/{n}"].copy() for n in names])
        known = {f.name for f in fields(TrainConfig)}
        tc = TrainConfig(**{k: v for k, v in header["train_config"].items() if k in known})
    except (KeyError, ValueError, TypeError) as exc:
        raise FormatError(f"{path}: checkpoint does not match the model layout ({exc})") from exc
    report = TrainReport([EpochRecord(**r) for r in header["report"]], header.get("report_total_seconds", 0.0))
    return Checkpoint(model, adam, tc, header["epoch"], report, header["extra"])


def resume(path, train_data: Sequence[EncodedPair], valid_data: Sequence[EncodedPair],
           checkpoint_dir=None, epochs: int | None = None) -> tuple[TransformerModel, TrainReport]:
    """Continue a run from a checkpoint through ``epochs`` (default: the saved budget)."""
    ck = load_checkpoint(path)
    config = ck.train_config
    if epochs is not None:
        config = TrainConfig(**{**asdict(config), "epochs": epochs})
    report = train(ck.model, train_data, valid_data, config, ck.adam, ck.epoch + 1, ck.report,
                   checkpoint_dir, ck.extra)
    return ck.model, report
