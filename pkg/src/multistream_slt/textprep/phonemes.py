from __future__ import annotations

import functools
import json
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping

ARPABET = (
    "aa", "ae", "ah", "ao", "aw", "ay", "b", "ch", "d", "dh", "eh", "er", "ey",
    "f", "g", "hh", "ih", "iy", "jh", "k", "l", "m", "n", "ng", "ow", "oy", "p",
    "r", "s", "sh", "t", "th", "uh", "uw", "v", "w", "y", "z", "zh",
)  # fmt: skip
ARPABET_SET = frozenset(ARPABET)

_VARIANT = re.compile(r"\(\d+\)$")
_STRESS = re.compile(r"\d")


@dataclass(frozen=True)
class PhonemeSequence:
    phonemes: tuple[str, ...]
    source_id: str = ""
    oov: tuple[str, ...] = ()

    def __str__(self) -> str:
        return " ".join(self.phonemes)


@dataclass
class PronouncingDict:
    """Word -> ARPAbet phonemes, lowercase and stress-free; first variant wins."""

    entries: dict[str, tuple[str, ...]] = field(default_factory=dict)
    source_path: str = ""

    def __contains__(self, word: str) -> bool:
        return word.upper() in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def get(self, word: str) -> tuple[str, ...] | None:
        return self.entries.get(word.upper())

    @classmethod
    def parse(cls, lines, source_path: str = "") -> "PronouncingDict":
        entries: dict[str, tuple[str, ...]] = {}
        for lineno, raw in enumerate(lines, 1):
            line = raw.split("#", 1)[0].strip()
            if not line or line.startswith(";;;"):
                continue
            word, *phones = line.split()
            word = _VARIANT.sub("", word).upper()
            if word in entries:
                continue
            cleaned = tuple(_STRESS.sub("", p).lower() for p in phones)
            bad = [p for p in cleaned if p not in ARPABET_SET]
            if bad or not cleaned:
                raise ValueError(f"{source_path or '<dict>'}:{lineno}: invalid phonemes {bad or phones}")
            entries[word] = cleaned
        return cls(entries, source_path)

    @classmethod
    def load(cls, path) -> "PronouncingDict":
        with open(path, encoding="utf-8", errors="replace") as fh:
            return cls.parse(fh, str(path))

    @classmethod
    def default(cls) -> "PronouncingDict":
        return _default_dict()


@functools.lru_cache(maxsize=1)
def _default_dict() -> PronouncingDict:
    path = resources.files("cmudict") / "data" / "cmudict.dict"
    return PronouncingDict.load(Path(str(path)))


@functools.lru_cache(maxsize=1)
def letter_phoneme_table() -> Mapping[str, tuple[str, ...]]:
    raw = json.loads(resources.files(__package__).joinpath("data/letter_phonemes.json").read_text())
    table = {k: tuple(v) for k, v in raw.items()}
    for k, v in table.items():
        if not v or any(p not in ARPABET_SET for p in v):
            raise ValueError(f"letter table entry {k!r} has invalid phonemes {v}")
    return table


def fallback_phonemes(word: str) -> tuple[str, ...]:
    table = letter_phoneme_table()
    out: list[str] = []
    for ch in word.upper():
        out.extend(table.get(ch, ()))
    return tuple(out)


def phonemize(gloss, pdict: PronouncingDict | None = None) -> PhonemeSequence:
    """Concatenate dictionary pronunciations of each gloss token in order.

    Tokens missing from the dictionary are spelled through the per-letter
    table and listed in ``oov``.
    """
    pdict = pdict or PronouncingDict.default()
    tokens = getattr(gloss, "tokens", gloss)
    if isinstance(tokens, str):
        tokens = tokens.split()
    out: list[str] = []
    oov: list[str] = []
    for tok in tokens:
        pron = pdict.get(tok)
        if pron is None:
            pron = fallback_phonemes(tok)
            oov.append(tok)
        if not pron:
            raise ValueError(f"token {tok!r} yields no phonemes")
        out.extend(pron)
    return PhonemeSequence(tuple(out), getattr(gloss, "source_id", ""), tuple(oov))
