"""Text-to-token-id interface with the special tokens the pretext tasks need.

Two backends share one duck-typed interface (``tokenize`` / ``encode_text`` /
``vocab`` / ``max_len``): a whitespace+punctuation tokenizer whose vocab is
built from the corpus (desk-scale runs), and a greedy longest-match subword
tokenizer driven by an external vocab file (full-scale runs).
"""

from __future__ import annotations

import re
from collections import Counter
from pathlib import Path
from typing import Iterable, Sequence

PAD = "[PAD]"
UNK = "[UNK]"
CLS = "[CLS]"
SEP = "[SEP]"
MASK = "[MASK]"
NUM = "[NUM]"

SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, MASK, NUM)

# Positional table size of the encoder; assembly truncates to this.
MAX_POSITIONS = 512

# Candidate separator used by the answer-scoring input layout.
CANDIDATE_SEPARATOR = ";"

_WORD_RE = re.compile(r"\d+(?:[.,]\d+)*|[A-Za-z]+|[^\sA-Za-z\d]")
_NUMBER_RE = re.compile(r"\d{1,3}(?:,\d{3})+(?:\.\d+)?|\d+(?:\.\d+)?")


def pretokenize(text: str) -> list[str]:
    """Split text into words, digit runs, and single punctuation marks."""
    return _WORD_RE.findall(text)


def is_number_token(token: str) -> bool:
    """True iff the token is digits, allowing one decimal point or comma
    thousands separators. Subword continuation markers are ignored."""
    surface = token[2:] if token.startswith("##") else token
    return bool(_NUMBER_RE.fullmatch(surface))


def token_surface(token: str) -> str:
    """Strip a subword continuation marker, if any."""
    return token[2:] if token.startswith("##") else token


class Vocab:
    """Token-to-id map with fixed special tokens; [PAD] is pinned to id 0."""

    def __init__(self, tokens: Sequence[str]):
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("vocab contains duplicate tokens")
        missing = [t for t in SPECIAL_TOKENS if t not in self.index]
        if missing:
            raise ValueError(f"vocab is missing special tokens: {missing}")
        if self.index[PAD] != 0:
            raise ValueError("[PAD] must have id 0")
        self.pad_id = self.index[PAD]
        self.unk_id = self.index[UNK]
        self.cls_id = self.index[CLS]
        self.sep_id = self.index[SEP]
        self.mask_id = self.index[MASK]
        self.num_id = self.index[NUM]
        self.special_ids = frozenset(self.index[t] for t in SPECIAL_TOKENS)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id(self, token: str) -> int:
        return self.index.get(token, self.unk_id)

    def token(self, token_id: int) -> str:
        return self.tokens[token_id]

    @classmethod
    def build(
        cls,
        token_iter: Iterable[str],
        min_count: int = 1,
        max_size: int | None = None,
        extra: Sequence[str] = (CANDIDATE_SEPARATOR,),
    ) -> "Vocab":
        """Build a vocab from corpus tokens: specials first, then `extra`
        tokens, then corpus tokens by descending count (ties lexicographic)."""
        counts = Counter(token_iter)
        tokens = list(SPECIAL_TOKENS)
        for t in extra:
            if t not in tokens:
                tokens.append(t)
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        for token, count in ranked:
            if count < min_count or token in SPECIAL_TOKENS or token in extra:
                continue
            if max_size is not None and len(tokens) >= max_size:
                break
            tokens.append(token)
        return cls(tokens)

    def save(self, path: str | Path) -> None:
        """One token per line; line number = id."""
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([line for line in lines if line != ""])


class WhitespaceTokenizer:
    """Whole-word tokenizer with a corpus-built vocab, for desk-scale runs."""

    backend = "whitespace"

    def __init__(self, vocab: Vocab, max_len: int = MAX_POSITIONS):
        self.vocab = vocab
        self.max_len = max_len

    @classmethod
    def from_corpus(
        cls,
        texts: Iterable[str],
        min_count: int = 1,
        max_size: int | None = None,
        max_len: int = MAX_POSITIONS,
    ) -> "WhitespaceTokenizer":
        tokens = (t for text in texts for t in pretokenize(text))
        return cls(Vocab.build(tokens, min_count=min_count, max_size=max_size), max_len)

    def tokenize(self, text: str) -> list[str]:
        return pretokenize(text)

    def encode_text(self, text: str) -> list[int]:
        return [self.vocab.id(t) for t in self.tokenize(text)]


class SubwordTokenizer:
    """Greedy longest-match subword tokenizer over an external vocab.

    Honors WordPiece-style '##' continuation pieces when the vocab defines
    them; a vocab without '##' pieces is matched on surface alone, so a
    character-level vocab yields per-character pieces ('10;20' -> 1 0 ; 2 0).
    """

    backend = "subword"

    def __init__(self, vocab: Vocab, max_len: int = MAX_POSITIONS):
        self.vocab = vocab
        self.max_len = max_len
        self._continuations = any(t.startswith("##") for t in vocab.tokens)

    @classmethod
    def from_vocab_file(cls, path: str | Path, max_len: int = MAX_POSITIONS) -> "SubwordTokenizer":
        return cls(Vocab.load(path), max_len)

    def tokenize(self, text: str) -> list[str]:
        pieces: list[str] = []
        for word in pretokenize(text):
            pieces.extend(self._split_word(word))
        return pieces

    def encode_text(self, text: str) -> list[int]:
        return [self.vocab.id(t) for t in self.tokenize(text)]

    def _split_word(self, word: str) -> list[str]:
        out: list[str] = []
        start = 0
        while start < len(word):
            end = len(word)
            piece = None
            while end > start:
                sub = word[start:end]
                if start > 0 and self._continuations:
                    sub = "##" + sub
                if sub in self.vocab:
                    piece = sub
                    break
                end -= 1
            if piece is None:
                return [UNK]
            out.append(piece)
            start = end
        return out if out else [UNK]
