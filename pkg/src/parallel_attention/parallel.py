"""Encoder topologies: the stacked baseline and the parallel-branch variants.

APA sums the branch outputs, ACPA concatenates them and reduces back to
``d_model`` with a ReLU affine map before one final encoder layer, and AAPA
sums them before one final encoder layer. Every branch reads the same input,
so branches carry no data dependency on each other and may run on a thread
pool; the combiner is the only synchronisation point.
"""
from __future__ import annotations

import enum
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionMask
from .blocks import EncoderLayer, LN_EPS, encoder_layer_forward, xavier_uniform, zeros
from .exceptions import ConfigError, DimensionError
from .tensor import Tensor, add, add_tensors, concat, layer_norm, matmul, no_grad, relu


class Variant(str, enum.Enum):
    STACKED = "stacked"
    APA = "apa"
    ACPA = "acpa"
    AAPA = "aapa"

    @classmethod
    def parse(cls, value) -> "Variant":
        try:
            return cls(str(getattr(value, "value", value)).lower())
        except ValueError:
            raise ConfigError(f"unknown encoder variant {value!r}; expected one of "
                              f"{[v.value for v in cls]}") from None


@dataclass
class Reducer:
    """ReLU(c · w + b) mapping ``B·d_model`` features down to ``d_model``."""

    w: Tensor
    b: Tensor

    def parameters(self):
        return [("w", self.w), ("b", self.b)]

    def __call__(self, c: Tensor) -> Tensor:
        if c.shape[-1] != self.w.shape[0]:
            raise ConfigError(f"reducer expects {self.w.shape[0]} input features, got {c.shape[-1]}")
        return relu(add(matmul(c, self.w), self.b))


@dataclass
class EncoderTopology:
    """Encoder layers arranged as one chain (stacked) or as parallel branches.

    ``branch_layers[b]`` is the chain of layers forming branch ``b``; the
    stacked baseline is a single chain of N layers.
    """

    variant: Variant
    branch_layers: list[list[EncoderLayer]]
    final_layer: EncoderLayer | None = None
    reducer: Reducer | None = None
    normalize_sum: bool = False

    def __post_init__(self):
        v = self.variant
        if not self.branch_layers or any(not chain for chain in self.branch_layers):
            raise ConfigError("an encoder needs at least one branch of at least one layer")
        if v is Variant.STACKED and len(self.branch_layers) != 1:
            raise ConfigError("stacked encoder is a single chain of layers")
        if (self.final_layer is not None) != (v in (Variant.ACPA, Variant.AAPA)):
            raise ConfigError(f"{v.value}: final attending layer present iff variant is ACPA or AAPA")
        if (self.reducer is not None) != (v is Variant.ACPA):
            raise ConfigError(f"{v.value}: reducer present iff variant is ACPA")

    @property
    def branches(self) -> int:
        """B for parallel variants, N for the stacked baseline."""
        if self.variant is Variant.STACKED:
            return len(self.branch_layers[0])
        return len(self.branch_layers)

    @property
    def d_model(self) -> int:
        return self.branch_layers[0][0].self_attn.w_q.shape[0]

    def layers(self) -> list[EncoderLayer]:
        out = [layer for chain in self.branch_layers for layer in chain]
        if self.final_layer is not None:
            out.append(self.final_layer)
        return out

    def parameters(self):
        params = []
        for b, chain in enumerate(self.branch_layers):
            for j, layer in enumerate(chain):
                prefix = f"layer{j}" if self.variant is Variant.STACKED else f"branch{b}.layer{j}"
                params += [(f"{prefix}.{n}", t) for n, t in layer.parameters()]
        if self.reducer is not None:
            params += [(f"reducer.{n}", t) for n, t in self.reducer.parameters()]
        if self.final_layer is not None:
            params += [(f"final.{n}", t) for n, t in self.final_layer.parameters()]
        return params


def build_topology(variant, branches: int, d_model: int, d_ff: int, heads: int,
                   rng: np.random.Generator, branch_depth: int = 1,
                   count_includes_final: bool = False, apa_norm: bool = True) -> EncoderTopology:
    """Initialise an encoder; each layer gets its own independently drawn weights.

    With ``count_includes_final`` the final attending layer of ACPA/AAPA is one
    of the ``branches`` (so ``branches - 1`` run in parallel).
    """
    variant = Variant.parse(variant)
    if branches < 1 or branch_depth < 1:
        raise ConfigError(f"branches and branch_depth must be positive, got {branches}, {branch_depth}")

    def layer():
        return EncoderLayer.create(rng, d_model, d_ff, heads)

    if variant is Variant.STACKED:
        return EncoderTopology(variant, [[layer() for _ in range(branches)]])
    attended = variant in (Variant.ACPA, Variant.AAPA)
    n_parallel = branches - 1 if (attended and count_includes_final) else branches
    if n_parallel < 1:
        raise ConfigError(f"{variant.value} with count_includes_final needs branches >= 2")
    chains = [[layer() for _ in range(branch_depth)] for _ in range(n_parallel)]
    reducer = None
    if variant is Variant.ACPA:
        reducer = Reducer(xavier_uniform(rng, n_parallel * d_model, d_model), zeros(d_model))
    final = layer() if attended else None
    return EncoderTopology(variant, chains, final, reducer, normalize_sum=(variant is Variant.APA and apa_norm))


_executors: dict[int, ThreadPoolExecutor] = {}


def _executor(workers: int) -> ThreadPoolExecutor:
    if workers not in _executors:
        _executors[workers] = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="branch")
    return _executors[workers]


def _run_chain(x: Tensor, chain: list[EncoderLayer], mask, component: str, index: int,
               base_depth: int):
    """Run layers in sequence; returns (output, attention records, depth trace)."""
    records, trace = [], []
    depth = base_depth
    for j, layer in enumerate(chain):
        ws: list = []
        x = encoder_layer_forward(x, layer, mask, ws)
        depth += 1
        name = component if len(chain) == 1 or component == "encoder" else f"{component}.l{j}"
        idx = j if component == "encoder" else index
        records.append((name, idx, ws[0]))
        trace.append((name, idx, depth))
    return x, records, trace


def _run_branches(x: Tensor, topology: EncoderTopology, mask, workers: int):
    jobs = [(x, chain, mask, "branch", b, 0) for b, chain in enumerate(topology.branch_layers)]
    if workers > 1 and len(jobs) > 1:
        results = list(_executor(workers).map(lambda a: _run_chain(*a), jobs))
    else:
        results = [_run_chain(*a) for a in jobs]
    # merge in branch order regardless of completion order
    outputs = [r[0] for r in results]
    records = [rec for r in results for rec in r[1]]
    trace = [t for r in results for t in r[2]]
    return outputs, records, trace


def _emit(record, trace, records, traces):
    if record is not None:
        record.extend(records)
    if trace is not None:
        trace.extend(traces)


def encode_stacked(x: Tensor, layers: list[EncoderLayer], mask: AttentionMask | None = None,
                   record: list | None = None, trace: list | None = None) -> Tensor:
    """layer_N ∘ … ∘ layer_1 applied to ``x``."""
    if not layers:
        raise ConfigError("stacked encoder needs at least one layer")
    out, recs, tr = _run_chain(x, layers, mask, "encoder", 0, 0)
    _emit(record, trace, recs, tr)
    return out


def _require(topology: EncoderTopology, variant: Variant):
    if topology.variant is not variant:
        raise ConfigError(f"expected a {variant.value} topology, got {topology.variant.value}")


def encode_apa(x: Tensor, topology: EncoderTopology, mask: AttentionMask | None = None,
               record: list | None = None, trace: list | None = None, workers: int = 1) -> Tensor:
    """Σ_b branch_b(x), followed by a parameter-free norm when ``topology.normalize_sum``."""
    _require(topology, Variant.APA)
    outs, recs, tr = _run_branches(x, topology, mask, workers)
    _emit(record, trace, recs, tr)
    s = add_tensors(outs)
    return layer_norm(s, None, None, LN_EPS) if topology.normalize_sum else s


def encode_acpa(x: Tensor, topology: EncoderTopology, mask: AttentionMask | None = None,
                record: list | None = None, trace: list | None = None, workers: int = 1) -> Tensor:
    """final_layer(ReLU(concat_b branch_b(x) · W_r + b_r))."""
    _require(topology, Variant.ACPA)
    outs, recs, tr = _run_branches(x, topology, mask, workers)
    c = concat(outs, axis=-1)
    if c.shape[-1] != topology.reducer.w.shape[0]:
        raise ConfigError(f"reducer expects {topology.reducer.w.shape[0]} features, "
                          f"concat produced {c.shape[-1]}")
    r = topology.reducer(c)
    depth = max(d for *_, d in tr)
    out, frecs, ftr = _run_chain(r, [topology.final_layer], mask, "final", 0, depth)
    _emit(record, trace, recs + frecs, tr + ftr)
    return out


def encode_aapa(x: Tensor, topology: EncoderTopology, mask: AttentionMask | None = None,
                record: list | None = None, trace: list | None = None, workers: int = 1) -> Tensor:
    """final_layer(Σ_b branch_b(x))."""
    _require(topology, Variant.AAPA)
    outs, recs, tr = _run_branches(x, topology, mask, workers)
    s = add_tensors(outs)
    depth = max(d for *_, d in tr)
    out, frecs, ftr = _run_chain(s, [topology.final_layer], mask, "final", 0, depth)
    _emit(record, trace, recs + frecs, tr + ftr)
    return out


def encode(x: Tensor, topology: EncoderTopology, mask: AttentionMask | None = None,
           record: list | None = None, trace: list | None = None, workers: int = 1) -> Tensor:
    if x.shape[-1] != topology.d_model:
        raise DimensionError(f"encoder input width {x.shape[-1]} != d_model {topology.d_model}")
    if topology.variant is Variant.STACKED:
        return encode_stacked(x, topology.branch_layers[0], mask, record, trace)
    fn = {Variant.APA: encode_apa, Variant.ACPA: encode_acpa, Variant.AAPA: encode_aapa}[topology.variant]
    return fn(x, topology, mask, record, trace, workers)


@dataclass
class CriticalPathReport:
    sequential_depth: int
    branch_count: int
    wall_clock_forward: float
    samples: list[float] = field(default_factory=list, repr=False)


def benchmark_input(d_model: int, batch: int = 16, length: int = 32, seed: int = 0) -> Tensor:
    return Tensor(np.random.default_rng(seed).standard_normal((batch, length, d_model)))


def critical_path(topology: EncoderTopology, bench_input: Tensor | None = None, workers: int = 4,
                  repeats: int = 5) -> CriticalPathReport:
    """Measure the dependent-layer chain length and forward wall clock of one encoder.

    Depth comes from the layer trace of an actual forward pass. Timing runs with
    concurrent branch evaluation on ``workers`` threads and one BLAS thread per
    caller, so any speed-up comes from branch concurrency alone. The median of
    ``repeats`` timed passes (after one warm-up) is reported.
    """
    from threadpoolctl import threadpool_limits

    x = bench_input if bench_input is not None else benchmark_input(topology.d_model)
    samples = []
    with no_grad(), threadpool_limits(limits=1, user_api="blas"):
        trace: list = []
        encode(x, topology, trace=trace, workers=workers)
        for _ in range(repeats):
            t0 = time.perf_counter()
            encode(x, topology, workers=workers)
            samples.append(time.perf_counter() - t0)
    depth = max(d for *_, d in trace)
    return CriticalPathReport(depth, topology.branches, statistics.median(samples), samples)
