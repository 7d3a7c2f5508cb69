"""Command-line entry point: train, translate, eval, compare, attn-dump, bench."""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .data import load_parallel_tsv, make_synthetic_task, train_test_split
from .estimator import ParallelAttentionTranslator
from .exceptions import ConfigError
from .metrics import corpus_bleu, mean_pairwise_divergence
from .model import AttentionDump
from .parallel import Variant, benchmark_input, build_topology, critical_path

logger = logging.getLogger("parallel_attention")

DEFAULTS: dict[str, object] = {
    # model
    "variant": "aapa",
    "branches": 5,
    "branch_depth": 1,
    "decoder_depth": 2,
    "d_model": 64,
    "d_ff": 256,
    "heads": 4,
    "max_len": 64,
    "count_includes_final": False,
    "apa_norm": True,
    "workers": 1,
    "seed": 0,
    # training
    "epochs": 10,
    "batch_size": 32,
    "lr": 1e-3,
    "beta2": 0.999,
    "smoothing": 0.1,
    "bleu_smooth": False,
    "min_freq": 1,
    # data
    "task": "copy",
    "vocab_size": 30,
    "n_pairs": 2000,
    "n_valid": 200,
    "min_len": 3,
    "max_task_len": 12,
    "data_seed": 0,
    "train_path": "",
    "valid_path": "",
    "test_path": "",
    # compare / bench / attn-dump
    "variants": "",
    "bench_workers": 4,
    "bench_batch": 16,
    "bench_len": 32,
    "bench_repeats": 5,
    "sentence": "",
}

TASKS = ("copy", "reverse", "increment", "tsv")


def _coerce(key: str, raw: str):
    default = DEFAULTS[key]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, value = (p.strip() for p in line.split("=", 1))
        out[key] = value
    return out


@dataclass
class RunSpec:
    command: str
    config: dict = field(default_factory=lambda: dict(DEFAULTS))
    out: Path = Path("runs/latest")
    checkpoint: str | None = None
    test: str | None = None
    sentences: list[str] = field(default_factory=list)

    def __getitem__(self, key: str):
        return self.config[key]

    @classmethod
    def resolve(cls, command: str, config_path=None, overrides=(), **flags) -> "RunSpec":
        raw: dict[str, str] = {}
        if config_path:
            raw.update(parse_config_text(Path(config_path).read_text(encoding="utf-8"), str(config_path)))
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"--set expects key=value, got {item!r}")
            k, v = item.split("=", 1)
            raw[k.strip()] = v
        unknown = sorted(set(raw) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        config = dict(DEFAULTS)
        config.update({k: _coerce(k, v) for k, v in raw.items()})
        for key in ("seed", "variant", "branches", "epochs", "task", "variants", "workers"):
            if flags.get(key) is not None:
                config[key] = flags[key]
        config["variant"] = Variant.parse(config["variant"]).value
        if config["task"] not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {config['task']!r}")
        spec = cls(command, config)
        if flags.get("out"):
            spec.out = Path(flags["out"])
        spec.checkpoint = flags.get("checkpoint")
        spec.test = flags.get("test")
        spec.sentences = list(flags.get("sentence") or [])
        return spec

    def manifest(self) -> str:
        """Resolved config as key = value lines; loadable again with ``--config``."""
        lines = [f"# parallel-attention {__version__}", f"# command: {self.command}"]
        lines += [f"{k} = {self.config[k]}" for k in sorted(self.config)]
        if self.checkpoint:
            lines.append(f"# checkpoint: {self.checkpoint}")
        if self.test:
            lines.append(f"# test: {self.test}")
        return "\n".join(lines) + "\n"

    def write_manifest(self) -> None:
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "manifest.txt").write_text(self.manifest(), encoding="utf-8")


def estimator_from_spec(spec: RunSpec, variant=None, branches=None, checkpoint_dir=None) -> ParallelAttentionTranslator:
    c = spec.config
    return ParallelAttentionTranslator(
        variant=variant or c["variant"], branches=branches or c["branches"], branch_depth=c["branch_depth"],
        decoder_depth=c["decoder_depth"], d_model=c["d_model"], d_ff=c["d_ff"], heads=c["heads"],
        max_len=c["max_len"], epochs=c["epochs"], batch_size=c["batch_size"], lr=c["lr"], beta2=c["beta2"],
        smoothing=c["smoothing"], min_freq=c["min_freq"], seed=c["seed"], workers=c["workers"],
        count_includes_final=c["count_includes_final"], apa_norm=c["apa_norm"],
        bleu_smooth=c["bleu_smooth"], checkpoint_dir=checkpoint_dir)


def load_corpus(spec: RunSpec):
    """(train pairs, validation pairs) from a synthetic task or TSV files."""
    c = spec.config
    if c["task"] == "tsv":
        if not c["train_path"]:
            raise ConfigError("task=tsv needs train_path")
        limit = c["max_len"] - 1
        train_pairs, _ = load_parallel_tsv(c["train_path"], limit)
        if c["valid_path"]:
            valid_pairs, _ = load_parallel_tsv(c["valid_path"], limit)
        else:
            train_pairs, valid_pairs = train_test_split(train_pairs, min(c["n_valid"], len(train_pairs) - 1))
        return train_pairs, valid_pairs
    pairs = make_synthetic_task(c["task"], c["vocab_size"], c["n_pairs"] + c["n_valid"],
                                (c["min_len"], c["max_task_len"]), c["data_seed"])
    return train_test_split(pairs, c["n_valid"])


def parse_variants(text: str, default_branches: int) -> list[tuple[str, int]]:
    out = []
    for item in filter(None, (p.strip() for p in text.split(","))):
        name, _, b = item.partition(":")
        out.append((Variant.parse(name).value, int(b) if b else default_branches))
    return out


def _split(pairs):
    return [s for s, _ in pairs], [t for _, t in pairs]


def _write_rows(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_curves(report, out: Path) -> None:
    _write_rows(out / "curves" / "loss.csv", ("epoch", "train_loss", "val_loss"),
                [(r.epoch, repr(r.train_loss), repr(r.val_loss)) for r in report.records])
    _write_rows(out / "curves" / "bleu.csv", ("epoch", "val_bleu"),
                [(r.epoch, repr(r.val_bleu)) for r in report.records])


def cmd_train(spec: RunSpec) -> int:
    spec.write_manifest()
    train_pairs, valid_pairs = load_corpus(spec)
    est = estimator_from_spec(spec, checkpoint_dir=spec.out)
    est.fit(*_split(train_pairs), eval_set=_split(valid_pairs))
    est.report_.to_csv(spec.out / "report.csv")
    write_curves(est.report_, spec.out)
    est.src_vocab_.save(spec.out / "src.vocab")
    est.tgt_vocab_.save(spec.out / "tgt.vocab")
    last = est.report_.records[-1]
    print(f"trained {spec['variant']} B={spec['branches']}: val_bleu={last.val_bleu:.4f} "
          f"({100 * last.val_bleu:.2f}) in {est.report_.total_seconds:.1f}s -> {spec.out}")
    return 0


def _require_checkpoint(spec: RunSpec) -> ParallelAttentionTranslator:
    if not spec.checkpoint:
        raise ConfigError(f"{spec.command} needs --checkpoint")
    return ParallelAttentionTranslator.load(spec.checkpoint)


def cmd_translate(spec: RunSpec, stdin=None, stdout=None) -> int:
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    est = _require_checkpoint(spec)
    lines = [line.rstrip("\n") for line in stdin]
    if not lines:
        return 0
    nonempty = [i for i, s in enumerate(lines) if s.strip()]
    hyps = est.predict([lines[i] for i in nonempty]) if nonempty else []
    out = [""] * len(lines)
    for i, h in zip(nonempty, hyps):
        out[i] = h
    stdout.write("".join(h + "\n" for h in out))
    stdout.flush()
    return 0


def cmd_eval(spec: RunSpec) -> int:
    est = _require_checkpoint(spec)
    path = spec.test or spec["test_path"]
    if path:
        pairs, _ = load_parallel_tsv(path, spec["max_len"] - 1)
    else:
        _, pairs = load_corpus(spec)
    src, ref = _split(pairs)
    score = corpus_bleu(est.predict(src), ref, smooth=spec["bleu_smooth"])
    p = " ".join(f"{x:.4f}" for x in score.precisions)
    line = (f"BLEU = {score.score:.6f} ({score.percent:.2f}) precisions={p} bp={score.brevity_penalty:.4f} "
            f"hyp_len={score.candidate_len} ref_len={score.reference_len} n={len(pairs)}")
    print(line)
    if spec.out is not None:
        spec.write_manifest()
        (spec.out / "eval.txt").write_text(line + "\n", encoding="utf-8")
    return 0


def cmd_compare(spec: RunSpec) -> int:
    variants = parse_variants(spec["variants"], spec["branches"])
    if len(variants) < 2:
        raise ConfigError("compare needs at least two variants, e.g. --variants stacked:6,aapa:5")
    spec.write_manifest()
    train_pairs, valid_pairs = load_corpus(spec)
    rows = []
    # sequential on purpose: concurrent runs would contaminate the wall-clock column
    for variant, branches in variants:
        est = estimator_from_spec(spec, variant, branches)
        est.fit(*_split(train_pairs), eval_set=_split(valid_pairs))
        (spec.out / "runs").mkdir(parents=True, exist_ok=True)
        est.report_.to_csv(spec.out / "runs" / f"{variant}_{branches}.csv")
        depth = critical_path(est.model_.encoder, benchmark_input(spec["d_model"], 2, 8), workers=1,
                              repeats=1).sequential_depth
        rows.append((variant, branches, est.model_.parameter_count(), repr(est.report_.records[-1].val_bleu),
                     f"{est.report_.total_seconds:.6f}", depth))
        print(f"{variant:8s} B={branches}: bleu={est.report_.records[-1].val_bleu:.4f} "
              f"seconds={est.report_.total_seconds:.1f} depth={depth}")
    _write_rows(spec.out / "compare.csv",
                ("variant", "branches", "params", "final_bleu", "total_seconds", "critical_path_depth"), rows)
    return 0


def _pgm(matrix: np.ndarray) -> bytes:
    """Binary greymap, each row scaled so its maximum maps to 255."""
    peak = matrix.max(axis=1, keepdims=True)
    scaled = np.where(peak > 0, matrix / np.where(peak > 0, peak, 1.0), 0.0)
    pixels = np.clip(np.rint(scaled * 255.0), 0, 255).astype(np.uint8)
    h, w = pixels.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def write_attention(dump: AttentionDump, directory: Path, prefix: str = "") -> list[Path]:
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for (component, index, head), mat in sorted(dump.weights.items()):
        stem = directory / f"{prefix}{component}{index}_h{head}"
        np.savetxt(stem.with_suffix(".csv"), mat, delimiter=",", fmt="%.17g")
        stem.with_suffix(".pgm").write_bytes(_pgm(mat))
        written.append(stem.with_suffix(".csv"))
    return written


def branch_divergence(dumps: list[AttentionDump]) -> tuple[float, list[tuple[int, int, float]]]:
    """Pairwise branch JS divergence averaged over sentences."""
    per_pair: dict[tuple[int, int], list[float]] = {}
    for dump in dumps:
        idx = dump.groups("branch")
        _, pairs = mean_pairwise_divergence([dump.heads("branch", i) for i in idx])
        for i, j, d in pairs:
            per_pair.setdefault((idx[i], idx[j]), []).append(d)
    pairs = [(i, j, float(np.mean(v))) for (i, j), v in sorted(per_pair.items())]
    overall = float(np.mean([d for *_, d in pairs])) if pairs else 0.0
    return overall, pairs


def cmd_attn_dump(spec: RunSpec) -> int:
    est = _require_checkpoint(spec)
    sentences = spec.sentences or ([spec["sentence"]] if spec["sentence"] else [])
    if not sentences:
        raise ConfigError("attn-dump needs --sentence (repeatable) or sentence= in the config")
    spec.write_manifest()
    dumps = [est.attention(s) for s in sentences]
    for k, dump in enumerate(dumps):
        write_attention(dump, spec.out / "attn", f"s{k}_" if len(dumps) > 1 else "")
    overall, pairs = branch_divergence(dumps)
    rows = [(i, j, repr(d)) for i, j, d in pairs] + [("mean", "", repr(overall))]
    _write_rows(spec.out / "divergence.csv", ("branch_i", "branch_j", "js_divergence"), rows)
    print(f"wrote {len(dumps[0].weights)} attention maps per sentence; mean branch divergence {overall:.6f}")
    return 0


def cmd_bench(spec: RunSpec) -> int:
    c = spec.config
    variants = parse_variants(c["variants"], c["branches"]) or [(c["variant"], c["branches"])]
    spec.write_manifest()
    x = benchmark_input(c["d_model"], c["bench_batch"], c["bench_len"])
    rows = []
    for variant, branches in variants:
        topo = build_topology(variant, branches, c["d_model"], c["d_ff"], c["heads"],
                              np.random.default_rng(c["seed"]), c["branch_depth"], c["count_includes_final"],
                              c["apa_norm"])
        rep = critical_path(topo, x, workers=c["bench_workers"], repeats=c["bench_repeats"])
        rows.append((variant, branches, rep.sequential_depth, f"{rep.wall_clock_forward:.6f}", c["bench_workers"]))
        print(f"{variant:8s} B={branches}: depth={rep.sequential_depth} forward={rep.wall_clock_forward * 1e3:.2f}ms")
    _write_rows(spec.out / "bench.csv", ("variant", "branches", "sequential_depth", "wall_clock_forward",
                                        "workers"), rows)
    return 0


COMMANDS = {
    "train": cmd_train,
    "translate": cmd_translate,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "attn-dump": cmd_attn_dump,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="parallel-attention", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="flat key=value config file")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--checkpoint")
    parser.add_argument("--variant", choices=[v.value for v in Variant])
    parser.add_argument("--branches", type=int)
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--task", choices=TASKS)
    parser.add_argument("--variants", help="comma list like stacked:6,aapa:5 (compare, bench)")
    parser.add_argument("--workers", type=int, help="threads for concurrent branch evaluation")
    parser.add_argument("--test", help="TSV test file (eval)")
    parser.add_argument("--sentence", action="append", help="source sentence (attn-dump, repeatable)")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        spec = RunSpec.resolve(args.command, args.config, args.overrides, seed=args.seed, variant=args.variant,
                               branches=args.branches, epochs=args.epochs, task=args.task,
                               variants=args.variants, workers=args.workers, out=args.out,
                               checkpoint=args.checkpoint, test=args.test, sentence=args.sentence)
        if args.command == "eval" and not args.out:
            spec.out = None
        return COMMANDS[args.command](spec)
    except (ValueError, RuntimeError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
