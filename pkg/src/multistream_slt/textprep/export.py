from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Iterator, Sequence

from .gloss import GlossSequence, RuleTable, Sentence, pseudo_gloss, tokenize
from .phonemes import PronouncingDict, phonemize
from .spelling import letters

GLOSS_OPEN = "<S2S> <GLOSS> "
GLOSS_CLOSE = " </GLOSS> <TEXT> "


@dataclass(frozen=True)
class LlmPair:
    input: str
    mask_boundary: int

    def to_dict(self) -> dict:
        return {"input": self.input, "mask_boundary": self.mask_boundary}


def format_llm_pair(g: GlossSequence, s: Sentence) -> LlmPair:
    """Gloss/sentence pair in the delimiter format used for LLM fine-tuning.

    ``mask_boundary`` is the offset of the first sentence character: labels
    before it would be masked out of the loss.
    """
    if not g.tokens:
        raise ValueError("gloss sequence is empty")
    head = GLOSS_OPEN + " ".join(g.tokens) + GLOSS_CLOSE
    return LlmPair(head + s.text, len(head))


@dataclass(frozen=True)
class ReductionStats:
    ids: tuple[str, ...]
    per_pair_removed: tuple[int, ...]
    per_pair_fraction: tuple[float, ...]

    @property
    def mean_removed(self) -> float:
        return sum(self.per_pair_removed) / len(self.per_pair_removed)

    @property
    def mean_fraction(self) -> float:
        return sum(self.per_pair_fraction) / len(self.per_pair_fraction)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id", "removed", "fraction"])
        for i, r, f in zip(self.ids, self.per_pair_removed, self.per_pair_fraction):
            w.writerow([i, r, repr(f)])
        return buf.getvalue()


def corpus_stats(pairs: Sequence[tuple[Sentence | str, GlossSequence | str]]) -> ReductionStats:
    """Per-pair token reduction ``L - M`` under whitespace tokenisation."""
    if not pairs:
        raise ValueError("corpus_stats needs at least one pair")
    ids, removed, fractions = [], [], []
    for n, (s, g) in enumerate(pairs):
        text = s.text if isinstance(s, Sentence) else s
        gloss = " ".join(g.tokens) if isinstance(g, GlossSequence) else g
        L, M = len(text.split()), len(gloss.split())
        if L == 0:
            raise ValueError(f"pair {n} has an empty sentence")
        ids.append(s.id if isinstance(s, Sentence) and s.id else str(n))
        removed.append(L - M)
        fractions.append((L - M) / L)
    return ReductionStats(tuple(ids), tuple(removed), tuple(fractions))


def fingerspell_candidates(s: Sentence, pdict: PronouncingDict | None = None) -> list[str]:
    """Words likely to be fingerspelled: capitalised past the first word, or unknown."""
    pdict = pdict or PronouncingDict.default()
    out = []
    for i, raw in enumerate(s.text.split()):
        toks = tokenize(raw)
        if not toks or not any(ch.isalpha() for ch in toks[0]):
            continue
        word = raw.strip(".,;:!?\"()[]")
        proper = i > 0 and word[:1].isupper() and word.upper() != "I" and not word.isupper()
        if proper or toks[0] not in pdict:
            out.append(toks[0])
    return out


# ---------------------------------------------------------------- corpus I/O


def read_sentences(path) -> Iterator[Sentence]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            if "text" not in rec:
                raise ValueError(f"{path}:{lineno}: record lacks a 'text' field")
            yield Sentence(rec["text"], str(rec.get("id", lineno)))


def mini_corpus() -> list[Sentence]:
    path = resources.files(__package__).joinpath("data/mini_corpus.jsonl")
    return list(read_sentences(Path(str(path))))


def process_record(s: Sentence, rules: RuleTable | None = None, pdict: PronouncingDict | None = None) -> dict:
    pdict = pdict or PronouncingDict.default()
    g = pseudo_gloss(s, rules, pdict)
    ph = phonemize(g, pdict)
    return {
        "id": s.id,
        "gloss": " ".join(g.tokens),
        "phonemes": " ".join(ph.phonemes),
        "letters": [" ".join(letters(w).letters) for w in fingerspell_candidates(s, pdict)],
        "oov": list(ph.oov),
    }


def write_jsonl(path, records: Iterable[dict]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
            n += 1
    return n
