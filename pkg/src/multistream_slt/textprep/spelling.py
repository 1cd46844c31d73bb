from __future__ import annotations

import string
from dataclasses import dataclass

ALPHABET = tuple(string.ascii_uppercase)


@dataclass(frozen=True)
class LetterSequence:
    letters: tuple[str, ...]

    def __post_init__(self):
        for ch in self.letters:
            if ch not in ALPHABET:
                raise ValueError(f"invalid letter {ch!r}")

    def __str__(self) -> str:
        return " ".join(self.letters)

    def __len__(self) -> int:
        return len(self.letters)


def letters(word: str) -> LetterSequence:
    """Uppercase A-Z characters of ``word`` in order; everything else is dropped."""
    out = tuple(ch for ch in word.upper() if ch in ALPHABET)
    if not out:
        raise ValueError(f"no alphabetic characters in {word!r}")
    return LetterSequence(out)
