from __future__ import annotations

import functools
import json
import re
import unicodedata
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Container

from .phonemes import PronouncingDict

_NON_TOKEN = re.compile(r"[^A-Za-z0-9']+")
TOKEN_RE = re.compile(r"^[A-Z0-9']+$")


class GlossError(ValueError):
    pass


@dataclass(frozen=True)
class Sentence:
    text: str
    id: str = ""

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError("sentence text is empty")


@dataclass(frozen=True)
class GlossSequence:
    tokens: tuple[str, ...]
    source_id: str = ""

    def __post_init__(self):
        for tok in self.tokens:
            if not TOKEN_RE.match(tok):
                raise ValueError(f"invalid gloss token {tok!r}")

    def __str__(self) -> str:
        return " ".join(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    @classmethod
    def parse(cls, text: str, source_id: str = "") -> "GlossSequence":
        return cls(tuple(text.split()), source_id)


@dataclass(frozen=True)
class SuffixRule:
    suffix: str
    keep_if_preceded_by: frozenset[str] = frozenset()


@dataclass(frozen=True)
class RuleTable:
    """Data-driven pseudo-gloss rules.

    ``move_to_end`` lists tokens relocated to the end of the sequence (in
    order of appearance); it is empty by default.
    """

    stopwords: frozenset[str]
    suffixes: tuple[SuffixRule, ...]
    min_stem: int = 3
    move_to_end: frozenset[str] = field(default_factory=frozenset)

    @classmethod
    def from_dict(cls, raw: dict) -> "RuleTable":
        known = {"description", "stopwords", "suffixes", "min_stem", "move_to_end"}
        extra = set(raw) - known
        if extra:
            raise ValueError(f"unknown rule-table keys: {sorted(extra)}")
        suffixes = tuple(
            SuffixRule(s["suffix"].upper(), frozenset(c.upper() for c in s.get("keep_if_preceded_by", ())))
            for s in raw.get("suffixes", ())
        )
        return cls(
            stopwords=frozenset(w.upper() for w in raw.get("stopwords", ())),
            suffixes=suffixes,
            min_stem=int(raw.get("min_stem", 3)),
            move_to_end=frozenset(w.upper() for w in raw.get("move_to_end", ())),
        )

    @classmethod
    def load(cls, path) -> "RuleTable":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    @classmethod
    def default(cls) -> "RuleTable":
        return _default_rules()


@functools.lru_cache(maxsize=1)
def _default_rules() -> RuleTable:
    return RuleTable.from_dict(json.loads(resources.files(__package__).joinpath("data/rules.json").read_text()))


def tokenize(text: str) -> list[str]:
    """ASCII-fold, replace punctuation with spaces, uppercase, trim edge apostrophes."""
    ascii_text = unicodedata.normalize("NFKD", text).encode("ascii", "ignore").decode("ascii")
    out = []
    for raw in _NON_TOKEN.sub(" ", ascii_text).upper().split():
        tok = raw.strip("'")
        if tok:
            out.append(tok)
    return out


def stem(token: str, rules: RuleTable, vocab: Container[str]) -> str:
    """Strip suffixes repeatedly while the stem stays long enough and known."""
    changed = True
    while changed:
        changed = False
        for rule in rules.suffixes:
            if not token.endswith(rule.suffix):
                continue
            base = token[: -len(rule.suffix)]
            if len(base) < rules.min_stem or base[-1] in rule.keep_if_preceded_by:
                continue
            if base in vocab:
                token = base
                changed = True
                break
    return token


def pseudo_gloss(
    s: Sentence | str,
    rules: RuleTable | None = None,
    vocab: Container[str] | None = None,
) -> GlossSequence:
    rules = rules or RuleTable.default()
    vocab = PronouncingDict.default() if vocab is None else vocab
    if isinstance(s, str):
        s = Sentence(s)
    tokens = [t for t in tokenize(s.text) if t not in rules.stopwords]
    # stemming can expose a stopword, so filter again afterwards
    tokens = [t for t in (stem(t, rules, vocab) for t in tokens) if t not in rules.stopwords]
    if rules.move_to_end:
        tokens = [t for t in tokens if t not in rules.move_to_end] + [t for t in tokens if t in rules.move_to_end]
    if not tokens:
        raise GlossError("all tokens filtered")
    return GlossSequence(tuple(tokens), s.id)
