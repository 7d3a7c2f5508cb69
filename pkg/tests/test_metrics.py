import math
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from parallel_attention.metrics import (BleuScore, Timer, corpus_bleu, jensen_shannon, mean_pairwise_divergence,
                                        modified_ngram_precision, sentence_bleu, time_block)

from _oracles import bleu_oracle


def test_precision_identical():
    assert modified_ngram_precision(["a b c"], ["a b c"], 1) == (3, 3)


def test_precision_clipped_the():
    cand = "the the the the the the the"
    assert modified_ngram_precision([cand], ["the cat is on the mat"], 1) == (2, 7)


def test_precision_no_bigram_overlap():
    assert modified_ngram_precision(["a b"], ["c d"], 2) == (0, 1)


def test_precision_accepts_token_lists():
    assert modified_ngram_precision([["a", "b", "a"]], [["a", "b"]], 1) == (2, 3)


def test_precision_argument_errors():
    with pytest.raises(ValueError):
        modified_ngram_precision(["a"], ["a"], 0)
    with pytest.raises(ValueError):
        modified_ngram_precision(["a"], ["a", "b"], 1)


def test_identical_corpus_scores_one():
    refs = ["the cat sat on the mat", "a b c d e"]
    s = corpus_bleu(refs, refs)
    assert isinstance(s, BleuScore)
    assert s.score == 1.0 and s.brevity_penalty == 1.0 and s.percent == 100.0


def test_empty_candidates_score_zero():
    s = corpus_bleu(["", ""], ["a b c d", "e f g h"])
    assert s.score == 0.0 and s.candidate_len == 0


def test_empty_candidate_list():
    with pytest.raises(ValueError):
        corpus_bleu([], [])


def test_three_sentence_toy_matches_counting_oracle():
    refs = ["the quick brown fox jumps over the lazy dog",
            "one two three four five six",
            "alpha beta gamma delta"]
    cands = ["the quick brown fox jumps over the lazy dog",
             "one two three four seven eight",
             "zeta eta theta iota"]
    got = corpus_bleu(cands, refs).score
    assert got > 0
    assert got == pytest.approx(bleu_oracle(cands, refs), abs=1e-9)


def test_brevity_penalty_formula():
    s = corpus_bleu(["a b c d"], ["a b c d e f g h"])
    assert s.brevity_penalty == pytest.approx(math.exp(1 - 8 / 4), abs=1e-15)
    assert s.score == pytest.approx(math.exp(1 - 2), abs=1e-12)


def test_smoothing_rescues_short_sentences():
    assert corpus_bleu(["a b c"], ["a b c"]).score == 0.0
    # each order above 1 becomes (m+1)/(t+1); a perfect 3-token match keeps every ratio at 1
    assert corpus_bleu(["a b c"], ["a b c"], smooth=True).score == 1.0
    assert corpus_bleu(["a b x"], ["a b c"], smooth=True).score == pytest.approx((2 / 3 * 2 / 3 * 1 / 2 * 1) ** 0.25)


def test_extra_token_lowers_score():
    ref = "w1 w2 w3 w4 w5 w6"
    assert sentence_bleu(ref + " w9", ref) < sentence_bleu(ref, ref)


def test_corpus_aggregation_differs_from_sentence_mean():
    cands = ["a b c d e f g h", "x y z w q"]
    refs = ["a b c d e f g h", "x y z w r"]
    corpus = corpus_bleu(cands, refs).score
    mean = (sentence_bleu(cands[0], refs[0]) + sentence_bleu(cands[1], refs[1])) / 2
    assert abs(corpus - mean) > 1e-3


words = st.sampled_from(["a", "b", "c", "d", "e"])


@settings(max_examples=80, deadline=None)
@given(st.lists(st.tuples(st.lists(words, min_size=0, max_size=9), st.lists(words, min_size=4, max_size=9)),
                min_size=1, max_size=6))
def test_bleu_bounded_and_matches_oracle(pairs):
    cands = [" ".join(c) for c, _ in pairs]
    refs = [" ".join(r) for _, r in pairs]
    s = corpus_bleu(cands, refs).score
    assert 0.0 <= s <= 1.0
    assert s == pytest.approx(bleu_oracle(cands, refs), abs=1e-9)
    if s == 1.0:
        assert cands == refs


@settings(max_examples=40, deadline=None)
@given(st.lists(st.lists(words, min_size=4, max_size=9), min_size=1, max_size=5))
def test_bleu_one_iff_exact(refs):
    refs = [" ".join(r) for r in refs]
    assert corpus_bleu(refs, refs).score == 1.0


# --- timing --------------------------------------------------------------

def test_noop_block_is_fast():
    assert time_block("noop", lambda: None) < 1e-3


def test_time_block_accumulates():
    t = Timer()
    time_block("x", lambda: None, t)
    time_block("x", lambda: None, t)
    assert t.counts["x"] == 2 and t["x"] >= 0 and t["missing"] == 0.0


def test_nested_labels_bounded_by_parent():
    t = Timer()
    with t.block("parent"):
        for _ in range(3):
            with t.block("child"):
                time.sleep(0.002)
        with t.block("other"):
            sum(range(10000))
    assert t["child"] + t["other"] <= t["parent"] * 1.01


# --- divergence ----------------------------------------------------------

def test_js_identical_is_zero_and_disjoint_is_one():
    p = np.array([[0.5, 0.5, 0.0], [1.0, 0.0, 0.0]])
    q = np.array([[0.5, 0.5, 0.0], [0.0, 0.0, 1.0]])
    np.testing.assert_allclose(jensen_shannon(p, q), [0.0, 1.0], atol=1e-15)


def test_js_symmetric_and_hand_value():
    p, q = np.array([0.75, 0.25]), np.array([0.25, 0.75])
    m = np.array([0.5, 0.5])
    expected = 0.5 * sum(p * np.log2(p / m)) + 0.5 * sum(q * np.log2(q / m))
    assert jensen_shannon(p, q) == pytest.approx(expected, abs=1e-15)
    assert jensen_shannon(q, p) == pytest.approx(expected, abs=1e-15)


def test_mean_pairwise_divergence():
    a = np.array([[[1.0, 0.0], [0.5, 0.5]]])
    b = np.array([[[0.0, 1.0], [0.5, 0.5]]])
    mean, pairs = mean_pairwise_divergence([a, a, b])
    assert [(i, j) for i, j, _ in pairs] == [(0, 1), (0, 2), (1, 2)]
    assert pairs[0][2] == 0.0 and pairs[1][2] == pytest.approx(0.5)
    assert mean == pytest.approx(1 / 3)
    assert mean_pairwise_divergence([a])[0] == 0.0
