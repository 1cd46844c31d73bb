import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from multistream_slt.metrics import (
    align,
    bleu_n,
    corpus_bleu,
    gloss_report,
    lcs_length,
    letter_accuracy,
    levenshtein,
    rouge_l,
    token_error_rate,
)

toks = st.lists(st.sampled_from("ABCDE"), min_size=1, max_size=8)


def test_hand_examples():
    assert letter_accuracy("JIN", "JIM") == pytest.approx(2 / 3, abs=1e-9)
    assert letter_accuracy("", "APRIL") == 0.0
    assert letter_accuracy("XXXXXXXX", "AB") == 0.0  # clamped
    assert bleu_n("HERE WE START".split(), ["HERE WE START OUR FIRE".split()], n=1) == pytest.approx(
        math.exp(1 - 5 / 3), abs=1e-9
    )
    assert rouge_l("A C".split(), "A B C".split()) == pytest.approx(0.8, abs=1e-9)
    assert levenshtein("kitten", "sitting") == 3
    assert token_error_rate("A B".split(), "A C D".split()) == pytest.approx(2 / 3, abs=1e-12)


def test_smoothed_sentence_bleu_by_hand():
    # precisions 3/4, (2+1)/(3+1), (1+1)/(2+1), (0+1)/(1+1); equal lengths so no penalty
    got = bleu_n("A B C D".split(), ["A B C E".split()], n=4)
    assert got == pytest.approx((0.75 * 0.75 * (2 / 3) * 0.5) ** 0.25, abs=1e-9)
    assert bleu_n("A B C D".split(), ["A B C E".split()], n=4, smooth=False) == 0.0


def test_corpus_bleu_pools_counts():
    hyps = ["A B C D".split(), "A B".split()]
    refs = [["A B C E".split()], ["A B".split()]]
    assert corpus_bleu(hyps, refs, n=3) == pytest.approx((5 / 6 * 3 / 4 * 1 / 2) ** (1 / 3), abs=1e-9)
    assert corpus_bleu(hyps, refs, n=4) == 0.0


def test_degenerate_inputs():
    assert bleu_n([], [["A"]]) == 0.0
    assert rouge_l(["X"], ["A", "B"]) == 0.0
    with pytest.raises(ValueError):
        letter_accuracy("A", "")
    with pytest.raises(ValueError):
        rouge_l(["A"], [])
    with pytest.raises(ValueError):
        corpus_bleu([["A"]], [])


def test_align_marks_gaps():
    assert align(list("AC"), list("ABC")) == [(0, 0), (None, 1), (1, 2)]
    assert align(list("AXC"), list("AC")) == [(0, 0), (1, None), (2, 1)]
    assert align([], list("AB")) == [(None, 0), (None, 1)]


@given(toks)
def test_identity_scores_one(x):
    assert letter_accuracy(x, x) == 1.0
    assert rouge_l(x, x) == 1.0
    assert bleu_n(x, [x], n=1) == 1.0
    assert bleu_n(x, [x], n=4) == pytest.approx(1.0, abs=1e-12)


@given(toks, toks)
@settings(max_examples=80)
def test_metric_ranges_and_corpus_equivalence(h, r):
    for v in (letter_accuracy(h, r), rouge_l(h, r), bleu_n(h, [r], 1), bleu_n(h, [r], 4)):
        assert 0.0 <= v <= 1.0
    for smooth in (False, True):
        assert corpus_bleu([h], [[r]], 4, smooth) == pytest.approx(bleu_n(h, [r], 4, smooth), abs=1e-12)
    assert lcs_length(h, r) <= min(len(h), len(r))
    assert levenshtein(h, r) == levenshtein(r, h)
    edits = sum(1 for a, b in align(h, r) if a is None or b is None or h[a] != r[b])
    assert edits == levenshtein(h, r)


@given(st.permutations(list("ABCDEF")))
def test_permutation_never_beats_identity(perm):
    ref = list("ABCDEF")
    assert bleu_n(perm, [ref], 4) <= bleu_n(ref, [ref], 4)


def test_gloss_report():
    rep = gloss_report([[1, 2, 3], [4]], [[1, 2, 3], [4, 5]], [((1, 2), (1, 2, 3))])
    assert rep.token_error_rate == pytest.approx(1 / 5)
    assert rep.letter_accuracy == pytest.approx(2 / 3)
    assert rep.ref_tokens == 5 and rep.hyp_tokens == 4
    assert rep.rouge_l == pytest.approx((1.0 + 2 * 1 * 0.5 / 1.5) / 2)
    row = rep.as_row()
    assert set(row) >= {"letter_accuracy", "token_error_rate", "bleu1", "bleu4", "rougeL"}
    assert rep.to_csv().splitlines()[0].startswith("letter_accuracy,token_error_rate")
    assert "ROUGE-L" in rep.pretty()
    perfect = gloss_report([[1, 2, 3, 4]], [[1, 2, 3, 4]], [((3,), (3,))])
    assert perfect.letter_accuracy == perfect.bleu[1] == perfect.bleu[4] == perfect.rouge_l == 1.0
    # unsmoothed corpus BLEU-4 has no 4-grams to count on a two-token corpus
    assert gloss_report([[1, 2]], [[1, 2]]).bleu[4] == 0.0
