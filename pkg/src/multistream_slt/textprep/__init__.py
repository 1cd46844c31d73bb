"""Rule-based text targets: pseudo-glosses, phonemes, letter sequences and LLM-pair exports."""

from .export import (
    LlmPair,
    ReductionStats,
    corpus_stats,
    fingerspell_candidates,
    format_llm_pair,
    mini_corpus,
    process_record,
    read_sentences,
    write_jsonl,
)
from .gloss import GlossError, GlossSequence, RuleTable, Sentence, pseudo_gloss, tokenize
from .phonemes import ARPABET, PhonemeSequence, PronouncingDict, fallback_phonemes, phonemize
from .spelling import ALPHABET, LetterSequence, letters

__all__ = [
    "ALPHABET",
    "ARPABET",
    "GlossError",
    "GlossSequence",
    "LetterSequence",
    "LlmPair",
    "PhonemeSequence",
    "PronouncingDict",
    "ReductionStats",
    "RuleTable",
    "Sentence",
    "corpus_stats",
    "fallback_phonemes",
    "fingerspell_candidates",
    "format_llm_pair",
    "letters",
    "mini_corpus",
    "phonemize",
    "process_record",
    "pseudo_gloss",
    "read_sentences",
    "tokenize",
    "write_jsonl",
]
