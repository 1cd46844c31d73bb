import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from multistream_slt.textprep import (
    ARPABET,
    GlossError,
    GlossSequence,
    PronouncingDict,
    RuleTable,
    Sentence,
    corpus_stats,
    fallback_phonemes,
    fingerspell_candidates,
    format_llm_pair,
    letters,
    mini_corpus,
    phonemize,
    process_record,
    pseudo_gloss,
    tokenize,
)
from multistream_slt.textprep.export import read_sentences, write_jsonl


def gloss(text):
    return list(pseudo_gloss(Sentence(text)).tokens)


# ---------------------------------------------------------------- pseudo-glosses


def test_gloss_reference_sentence():
    assert gloss("I have a few different ones here.") == ["I", "HAVE", "FEW", "DIFFERENT", "ONE", "HERE"]


def test_gloss_identity_and_filtering():
    assert gloss("RUN") == ["RUN"]
    with pytest.raises(GlossError, match="all tokens filtered"):
        gloss("THE")


def test_gloss_suffixes_need_known_stem():
    # STARTING -> START; THING keeps its ING because "TH" is too short
    assert gloss("starting things") == ["START", "THING"]
    assert gloss("this glass") == ["THIS", "GLASS"]
    assert gloss("walked") == ["WALK"]


def test_gloss_strips_punctuation_and_folds_accents():
    assert tokenize("Café, déjà-vu!") == ["CAFE", "DEJA", "VU"]
    assert tokenize("'quoted' don't") == ["QUOTED", "DON'T"]


def test_rule_table_rejects_unknown_keys():
    with pytest.raises(ValueError):
        RuleTable.from_dict({"stopwords": [], "surprise": 1})


def test_custom_rule_table_moves_tokens():
    rules = RuleTable.from_dict({"stopwords": ["THE"], "suffixes": [], "min_stem": 3, "move_to_end": ["WE"]})
    assert list(pseudo_gloss(Sentence("we light the fire"), rules).tokens) == ["LIGHT", "FIRE", "WE"]


sentences = st.lists(
    st.sampled_from(
        ["the", "dogs", "were", "running", "quickly", "to", "Paris", "and", "she", "painted", "walls", "happily"]
    ),
    min_size=1,
    max_size=10,
).map(" ".join)


@given(sentences)
@settings(max_examples=60, deadline=None)
def test_gloss_is_idempotent_and_shrinks(text):
    try:
        g = pseudo_gloss(Sentence(text))
    except GlossError:
        return
    assert len(g.tokens) <= len(text.split())
    assert all(t == t.upper() for t in g.tokens)
    again = pseudo_gloss(Sentence(" ".join(g.tokens).lower()))
    assert again.tokens == g.tokens


# ---------------------------------------------------------------- phonemes


@pytest.mark.parametrize(
    "g, expected",
    [
        ("HAVE DIFFERENT HERE", "hh ae v d ih f er ah n t hh iy r"),
        ("GO MEASURE IT", "g ow m eh zh er ih t"),
    ],
)
def test_phonemize_reference_rows(g, expected):
    ph = phonemize(GlossSequence.parse(g))
    assert " ".join(ph.phonemes) == expected
    assert ph.oov == ()


def test_phonemize_empty_and_oov():
    assert phonemize(GlossSequence(())).phonemes == ()
    ph = phonemize(GlossSequence.parse("HAVE QXZT"))
    assert ph.oov == ("QXZT",)
    assert ph.phonemes[:3] == ("hh", "ae", "v")
    assert ph.phonemes[3:] == fallback_phonemes("QXZT")


def test_dictionary_parser():
    lines = [
        ";;; comment",
        "READ  R IY1 D",
        "READ(2)  R EH1 D",
        "TOMATO  T AH0 M EY1 T OW2 # inline note",
    ]
    d = PronouncingDict.parse(lines)
    assert d.get("read") == ("r", "iy", "d")
    assert d.get("tomato") == ("t", "ah", "m", "ey", "t", "ow")
    with pytest.raises(ValueError):
        PronouncingDict.parse(["BAD  XX1"])


@given(st.lists(st.sampled_from(["HAVE", "GO", "IT", "HERE", "ZQXV", "MEASURE", "FIRE"]), max_size=6))
@settings(max_examples=40, deadline=None)
def test_phonemize_length_and_symbols(tokens):
    ph = phonemize(GlossSequence(tuple(tokens)))
    assert len(ph.phonemes) >= len(tokens)
    assert set(ph.phonemes) <= set(ARPABET)


# ---------------------------------------------------------------- letters & pairs


def test_letters_reference_rows():
    assert letters("april").letters == tuple("APRIL")
    assert letters("political capital").letters == tuple("POLITICALCAPITAL")
    assert letters("A").letters == ("A",)
    with pytest.raises(ValueError):
        letters("42!")


@given(st.text(min_size=1, max_size=20))
def test_letters_matches_filtered_uppercase(word):
    expected = "".join(ch for ch in word.upper() if "A" <= ch <= "Z")
    if not expected:
        with pytest.raises(ValueError):
            letters(word)
    else:
        assert "".join(letters(word).letters) == expected


def test_llm_pair_format():
    s = Sentence("I have a few different ones here.")
    pair = format_llm_pair(GlossSequence.parse("HAVE DIFFERENT HERE"), s)
    assert pair.input == "<S2S> <GLOSS> HAVE DIFFERENT HERE </GLOSS> <TEXT> I have a few different ones here."
    assert pair.input[pair.mask_boundary :] == s.text
    assert pair.input[: pair.mask_boundary].endswith("<TEXT> ")
    assert format_llm_pair(GlossSequence(("X",)), Sentence("x")).input == "<S2S> <GLOSS> X </GLOSS> <TEXT> x"


# ---------------------------------------------------------------- statistics


def test_corpus_stats_small_cases():
    st_ = corpus_stats([("a b c", "B C")])
    assert st_.per_pair_removed == (1,)
    assert st_.mean_fraction == pytest.approx(1 / 3, abs=1e-12)
    assert corpus_stats([("a b", "A B")]).mean_removed == 0


# Reference sentence/gloss rows; word counts below were made by hand.
TABLE_PAIRS = [
    ("So here we've got the startings of our bon fire.", "HERE WE START OUR FIRE"),
    (
        "We're going to measure it and there you can see we have it measured.",
        "GO MEASURE IT YOU SEE WE HAVE IT MEASURED WE",
    ),
    (
        "In my case I work more from home, and I work more from the college here that I cover, "
        "than I do actually at the office.",
        "CASE I WORK MORE HOME I WORK MORE COLLEGE HERE I COVER I ACTUALLY OFFICE",
    ),
    ("I have a few different ones here.", "HAVE DIFFERENT HERE"),
    ("I have here four different travel cases for your rat.", "HAVE HERE FOUR TRAVEL CASE YOUR RAT I"),
]
L = [10, 14, 26, 7, 10]
M = [5, 10, 15, 3, 8]


def test_corpus_stats_hand_counts():
    s = corpus_stats(TABLE_PAIRS)
    assert s.per_pair_removed == tuple(l - m for l, m in zip(L, M))
    assert s.mean_removed == pytest.approx(5.2, abs=1e-12)
    assert s.mean_fraction == pytest.approx(sum((l - m) / l for l, m in zip(L, M)) / 5, abs=1e-12)


def test_mini_corpus_reduction_and_csv():
    corpus = mini_corpus()
    stats = corpus_stats([(s, pseudo_gloss(s)) for s in corpus])
    assert len(corpus) == 20
    assert stats.mean_fraction >= 0.20
    assert stats.mean_removed == sum(stats.per_pair_removed) / len(corpus)
    csv_text = stats.to_csv().splitlines()
    assert csv_text[0] == "id,removed,fraction"
    assert len(csv_text) == 21


def test_records_roundtrip(tmp_path):
    s = Sentence("We visited Boston yesterday.", "r1")
    rec = process_record(s)
    assert rec["id"] == "r1"
    assert rec["gloss"].split()[0] == "WE"
    assert "B O S T O N" in rec["letters"]
    assert fingerspell_candidates(Sentence("I like Mars")) == ["MARS"]
    path = tmp_path / "out.jsonl"
    assert write_jsonl(path, [rec]) == 1
    assert json.loads(path.read_text()) == rec
    src = tmp_path / "in.jsonl"
    src.write_text(json.dumps({"id": "x", "text": "hello there"}) + "\n\n")
    assert list(read_sentences(src)) == [Sentence("hello there", "x")]
