"""Full encoder-decoder translation model."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .attention import AttentionMask, make_causal_mask, make_padding_mask
from .blocks import DecoderLayer, decoder_layer_forward, embed, positional_encoding, xavier_uniform, zeros
from .exceptions import ConfigError, DimensionError
from .parallel import EncoderTopology, Variant, build_topology, encode
from .tensor import Tensor, add, matmul, no_grad

PAD_ID = 0


@dataclass
class ModelConfig:
    variant: str = "aapa"
    branches: int = 5
    branch_depth: int = 1
    decoder_depth: int = 2
    d_model: int = 64
    d_ff: int = 256
    heads: int = 4
    max_len: int = 64
    src_vocab: int = 32
    tgt_vocab: int = 32
    seed: int = 0
    count_includes_final: bool = False
    apa_norm: bool = True
    workers: int = 1

    def __post_init__(self):
        self.variant = Variant.parse(self.variant).value
        self.validate()

    def validate(self) -> None:
        if self.heads < 1 or self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} must be divisible by heads={self.heads}")
        if self.d_model % 2:
            raise ConfigError(f"d_model must be even, got {self.d_model}")
        for name in ("branches", "branch_depth", "decoder_depth", "d_ff", "max_len",
                     "src_vocab", "tgt_vocab", "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class AttentionDump:
    """Attention weights keyed by ``(component, index, head)``, each ``[q_len, k_len]``.

    Components: ``encoder`` (stacked layer ``index``), ``branch`` (parallel
    branch ``index``), ``final`` (attending layer), ``decoder_self`` and
    ``decoder_cross`` (decoder layer ``index``).
    """

    weights: dict[tuple[str, int, int], np.ndarray] = field(default_factory=dict)

    def groups(self, component: str) -> list[int]:
        return sorted({i for c, i, _ in self.weights if c == component})

    def heads(self, component: str, index: int) -> np.ndarray:
        hs = sorted(h for c, i, h in self.weights if c == component and i == index)
        return np.stack([self.weights[(component, index, h)] for h in hs])

    def components(self) -> list[str]:
        return sorted({c for c, _, _ in self.weights})


class TransformerModel:
    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.seed)
        c = config
        self.src_embed = xavier_uniform(rng, c.src_vocab, c.d_model)
        self.tgt_embed = xavier_uniform(rng, c.tgt_vocab, c.d_model)
        self.pe = positional_encoding(c.max_len, c.d_model)
        self.encoder: EncoderTopology = build_topology(
            c.variant, c.branches, c.d_model, c.d_ff, c.heads, rng, c.branch_depth,
            c.count_includes_final, c.apa_norm)
        self.decoder = [DecoderLayer.create(rng, c.d_model, c.d_ff, c.heads) for _ in range(c.decoder_depth)]
        self.out_w = xavier_uniform(rng, c.d_model, c.tgt_vocab)
        self.out_b = zeros(c.tgt_vocab)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        params = [("src_embed", self.src_embed), ("tgt_embed", self.tgt_embed)]
        params += [(f"encoder.{n}", t) for n, t in self.encoder.parameters()]
        for i, layer in enumerate(self.decoder):
            params += [(f"decoder{i}.{n}", t) for n, t in layer.parameters()]
        params += [("out.w", self.out_w), ("out.b", self.out_b)]
        return params

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            raise ConfigError("state dict keys do not match model parameters")
        for n, t in own.items():
            arr = np.asarray(state[n], dtype=np.float64)
            if arr.shape != t.shape:
                raise DimensionError(f"parameter {n}: shape {arr.shape} != {t.shape}")
            t.data = arr.copy()

    def _check_ids(self, ids: np.ndarray, side: str) -> None:
        if ids.shape[-1] > self.config.max_len:
            raise ConfigError(f"{side} length {ids.shape[-1]} exceeds max_len {self.config.max_len}")
        if ids.shape[-1] < 1:
            raise ConfigError(f"{side} sequence is empty")

    def encode(self, src_ids, record: list | None = None, trace: list | None = None):
        """Source ids → (memory ``[..., s_len, d_model]``, source padding mask)."""
        src_ids = np.asarray(src_ids, dtype=np.int64)
        self._check_ids(src_ids, "source")
        mask = make_padding_mask(src_ids, PAD_ID)
        x = embed(src_ids, self.src_embed, self.pe)
        return encode(x, self.encoder, mask, record, trace, self.config.workers), mask

    def decode(self, memory: Tensor, src_mask: AttentionMask, tgt_in, record: list | None = None) -> Tensor:
        """Decoder input ids (BOS-prefixed) → logits ``[..., t_len, tgt_vocab]``."""
        tgt_in = np.asarray(tgt_in, dtype=np.int64)
        self._check_ids(tgt_in, "target")
        y = embed(tgt_in, self.tgt_embed, self.pe)
        causal = make_causal_mask(tgt_in.shape[-1])
        for i, layer in enumerate(self.decoder):
            ws: list = []
            y = decoder_layer_forward(y, memory, layer, causal, src_mask, ws)
            if record is not None:
                record += [("decoder_self", i, ws[0]), ("decoder_cross", i, ws[1])]
        return add(matmul(y, self.out_w), self.out_b)

    def forward(self, src_ids, tgt_in, record: list | None = None) -> Tensor:
        """Logits for every decoder position; row ``t`` depends on ``tgt_in[..., :t+1]`` only."""
        memory, mask = self.encode(src_ids, record)
        return self.decode(memory, mask, tgt_in, record)

    __call__ = forward

    def extract_attention(self, src_ids, tgt_in) -> AttentionDump:
        """Per-head attention maps of one sentence pair (1-D id sequences)."""
        src_ids, tgt_in = np.asarray(src_ids), np.asarray(tgt_in)
        if src_ids.ndim != 1 or tgt_in.ndim != 1:
            raise DimensionError("extract_attention takes a single sentence pair")
        record: list = []
        with no_grad():
            self.forward(src_ids, tgt_in, record)
        dump = AttentionDump()
        for component, index, w in record:
            for h, mat in enumerate(w.data):
                dump.weights[(component, index, h)] = mat.copy()
        return dump

    def parameter_count(self) -> int:
        return parameter_count(self)


def parameter_count(model) -> int:
    """Number of scalar parameters in a model, topology, or layer."""
    params = model.parameters() if hasattr(model, "parameters") else model
    return int(sum(t.data.size for t in (p[1] if isinstance(p, tuple) else p for p in params)))
