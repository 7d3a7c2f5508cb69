import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from parallel_attention.data import (BOS, EOS, PAD, UNK, Vocabulary, apply_task_rule, batch_iter, build_vocab,
                                     collate, encode_pairs, load_parallel_tsv, make_synthetic_task,
                                     train_test_split, write_parallel_tsv)
from parallel_attention.exceptions import FormatError, VocabularyError
from parallel_attention.metrics import corpus_bleu
from parallel_attention.model import ModelConfig, TransformerModel
from parallel_attention.tensor import Tensor
from parallel_attention.training import kl_div_loss


# --- vocabulary ----------------------------------------------------------

def test_reserved_ids():
    assert (PAD, BOS, EOS, UNK) == (0, 1, 2, 3)


def test_build_vocab_alphabetical():
    v = build_vocab(["a b a"])
    assert v.encode("a b") == [4, 5] and len(v) == 6


def test_min_freq_drops_rare_tokens():
    v = build_vocab(["a b a"], min_freq=2)
    assert v.encode("a b") == [4, UNK]
    assert "b" not in v


def test_vocab_independent_of_line_order():
    lines = [f"w{i % 7} x{i % 3} y{i}" for i in range(40)]
    ref = build_vocab(lines)
    r = random.Random(0)
    for _ in range(10):
        r.shuffle(lines)
        assert build_vocab(lines) == ref


def test_empty_corpus():
    with pytest.raises(FormatError):
        build_vocab(["", "   "])


def test_reserved_strings_never_produced_from_text():
    v = build_vocab(["<pad> <eos> hello"])
    assert "<pad>" not in v.tokens()
    assert v.encode("<pad> <bos> hello") == [UNK, UNK, v.stoi["hello"]]


def test_duplicate_tokens_rejected():
    with pytest.raises(FormatError):
        Vocabulary(["a", "a"])


def test_decode_strips_special_and_checks_range():
    v = build_vocab(["x y"])
    assert v.decode([BOS, 4, 5, EOS, PAD]) == "x y"
    assert v.decode([BOS, 4], strip_special=False) == "<bos> x"
    assert v.decode([UNK]) == "<unk>"
    with pytest.raises(VocabularyError):
        v.decode([99])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.sampled_from(["ab", "cd", "ef", "gh", "ij"]), min_size=1, max_size=12))
def test_encode_decode_round_trips(words):
    v = build_vocab(["ab cd ef gh ij"])
    text = " ".join(words)
    assert v.decode(v.encode(text)) == text
    ids = v.encode(text)
    assert v.encode(v.decode(ids)) == ids


def test_decode_normalises_whitespace():
    v = build_vocab(["a b"])
    assert v.decode(v.encode("  a\t b ")) == "a b"


def test_vocab_file_round_trip(tmp_path):
    v = build_vocab(["z y x w"])
    p = tmp_path / "v.txt"
    v.save(p)
    text = p.read_text()
    assert text.startswith("#vocab size=8\n<pad>\n<bos>\n<eos>\n<unk>\nw\n")
    assert Vocabulary.load(p) == v


@pytest.mark.parametrize("content", ["no header\n", "#vocab size=9\n<pad>\n<bos>\n<eos>\n<unk>\na\n",
                                     "#vocab size=x\n", "#vocab size=5\n<bos>\n<pad>\n<eos>\n<unk>\na\n"])
def test_bad_vocab_file(tmp_path, content):
    p = tmp_path / "v.txt"
    p.write_text(content)
    with pytest.raises(FormatError):
        Vocabulary.load(p)


# --- TSV -----------------------------------------------------------------

def test_tsv_three_lines(tmp_path):
    p = tmp_path / "c.tsv"
    p.write_text("a b\tx y\nc\tz\nd e f\tu v w\n", encoding="utf-8")
    pairs, skipped = load_parallel_tsv(p)
    assert pairs == [("a b", "x y"), ("c", "z"), ("d e f", "u v w")] and skipped == 0


def test_tsv_missing_tab_names_line(tmp_path):
    p = tmp_path / "c.tsv"
    p.write_text("a\tb\nno tab here\n", encoding="utf-8")
    with pytest.raises(FormatError, match=":2:"):
        load_parallel_tsv(p)


def test_tsv_skips_overlong(tmp_path):
    p = tmp_path / "c.tsv"
    long_src = " ".join(["t"] * 61)
    p.write_text(f"{long_src}\tshort\n{' '.join(['t'] * 60)}\tok\n", encoding="utf-8")
    pairs, skipped = load_parallel_tsv(p, max_len=60)
    assert skipped == 1 and len(pairs) == 1


def test_tsv_round_trip_and_unicode(tmp_path):
    pairs = [("grüße dich", "hallo ☃"), ("a", "b")]
    p = tmp_path / "c.tsv"
    write_parallel_tsv(p, pairs)
    before = p.read_bytes()
    assert load_parallel_tsv(p)[0] == pairs
    assert p.read_bytes() == before


def test_tsv_empty_side(tmp_path):
    p = tmp_path / "c.tsv"
    p.write_text("a\t \n", encoding="utf-8")
    with pytest.raises(FormatError, match=":1:"):
        load_parallel_tsv(p)


# --- synthetic tasks -----------------------------------------------------

def test_task_rules_by_hand():
    assert apply_task_rule("copy", "a b", 30) == "a b"
    assert apply_task_rule("reverse", "a b c", 30) == "c b a"
    assert apply_task_rule("increment", "w0 w25 w3", 30) == "w1 w0 w4"


@pytest.mark.parametrize("kind", ["copy", "reverse", "increment"])
def test_synthetic_pairs_follow_rule(kind):
    pairs = make_synthetic_task(kind, 30, 200, (3, 12), seed=1)
    assert all(apply_task_rule(kind, s, 30) == t for s, t in pairs)
    assert all(3 <= len(s.split()) <= 12 for s, _ in pairs)
    assert {tok for s, _ in pairs for tok in s.split()} <= {f"w{i}" for i in range(26)}
    _, test = train_test_split(pairs, 50)
    rule_out = [apply_task_rule(kind, s, 30) for s, _ in test]
    assert corpus_bleu(rule_out, [t for _, t in test]).score == 1.0


def test_synthetic_determinism():
    assert make_synthetic_task("copy", 30, 50, seed=4) == make_synthetic_task("copy", 30, 50, seed=4)
    assert make_synthetic_task("copy", 30, 50, seed=4) != make_synthetic_task("copy", 30, 50, seed=5)


@pytest.mark.parametrize("args", [("copy", 4, 10), ("copy", 30, 10, (0, 3)), ("copy", 30, 10, (5, 3)),
                                  ("shuffle", 30, 10)])
def test_synthetic_bad_args(args):
    with pytest.raises(ValueError):
        make_synthetic_task(*args)


def test_tail_split():
    pairs = [(str(i), str(i)) for i in range(10)]
    tr, te = train_test_split(pairs, 3)
    assert tr == pairs[:7] and te == pairs[7:]
    with pytest.raises(ValueError):
        train_test_split(pairs, 10)


# --- batching ------------------------------------------------------------

def corpus(n=10, seed=0):
    pairs = make_synthetic_task("copy", 12, n, (1, 6), seed=seed)
    v = build_vocab([s for s, _ in pairs])
    return encode_pairs(pairs, v, v)


def test_batch_sizes_ten_by_four():
    sizes = sorted(len(b) for b in batch_iter(corpus(), 4, seed=0, epoch=1))
    assert sizes == [2, 4, 4]
    assert [len(b) for b in batch_iter(corpus(), 4, shuffle=False)] == [4, 4, 2]


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 40), st.integers(1, 9), st.integers(0, 5), st.integers(1, 4))
def test_batches_partition_the_corpus(n, bs, seed, epoch):
    data = corpus(n)
    ids = np.concatenate([b.index for b in batch_iter(data, bs, seed, epoch)])
    assert sorted(ids.tolist()) == list(range(n))


def test_epoch_orders_differ_but_repeat():
    data = corpus(40)

    def order(epoch):
        return [b.index.tolist() for b in batch_iter(data, 4, seed=3, epoch=epoch)]

    assert order(1) == order(1)
    assert order(1) != order(2)


def test_batches_group_similar_lengths():
    data = corpus(200)
    spreads = [int(np.ptp(b.src_lengths)) for b in batch_iter(data, 16, seed=0, epoch=1)]
    assert max(spreads) <= 1


def test_collate_shifts_target():
    data = [([4, 5, 6], [7, 8]), ([4], [9, 10, 11])]
    b = collate(data, [0, 1])
    assert b.src.tolist() == [[4, 5, 6, EOS], [4, EOS, PAD, PAD]]
    assert b.tgt_in.tolist() == [[BOS, 7, 8, PAD], [BOS, 9, 10, 11]]
    assert b.tgt_out.tolist() == [[7, 8, EOS, PAD], [9, 10, 11, EOS]]
    assert b.n_tokens == 7
    both = b.tgt_mask[:, 1:] & (b.tgt_in[:, 1:] != PAD)
    np.testing.assert_array_equal(b.tgt_out[:, :-1][both], b.tgt_in[:, 1:][both])


def test_padding_contributes_nothing_to_loss():
    m = TransformerModel(ModelConfig(variant="apa", branches=2, d_model=8, heads=2, d_ff=16,
                                     src_vocab=12, tgt_vocab=12, max_len=16))
    data = corpus(6, seed=2)
    b = collate(data, range(6))
    logits = m(b.src, b.tgt_in)
    loss = kl_div_loss(logits, b.tgt_out).data
    # scrambling logits at pad positions changes nothing
    scrambled = logits.data.copy()
    scrambled[b.tgt_out == PAD] = np.random.default_rng(0).normal(size=scrambled[b.tgt_out == PAD].shape) * 50
    assert kl_div_loss(Tensor(scrambled), b.tgt_out).data == loss
