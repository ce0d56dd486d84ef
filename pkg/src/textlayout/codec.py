"""Vocabulary and the interleaved text-layout sequence.

Each word becomes its character tokens followed by a single ``[LOC]`` token;
the word's four coordinate bins ride alongside that position instead of
occupying four tokens of their own.
"""

from __future__ import annotations

import statistics
import string
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Iterator, Sequence

from .geometry import BBox

PAD, BOS, CONT, EOS, LOC = "[PAD]", "[BOS]", "[CONT]", "[EOS]", "[LOC]"
DOC_CLS, VQA, ANS_YES, ANS_NO, SEP = "[DOC_CLS]", "[VQA]", "[ANS_YES]", "[ANS_NO]", "[SEP]"
SPECIAL_TOKENS = (PAD, BOS, CONT, EOS, LOC, DOC_CLS, VQA, ANS_YES, ANS_NO, SEP)

ALPHABET = string.ascii_lowercase + string.ascii_uppercase + string.digits + ".,:;-/$%#&()'!?"

VOCAB_MAGIC = "TLVOCAB"
VOCAB_VERSION = 1

Coords = tuple[int, int, int, int]
Entry = tuple[int, "Coords | None"]


class EncodingError(ValueError):
    pass


class MalformedSequenceError(ValueError):
    pass


class UnterminatedWordWarning(UserWarning):
    pass


class Vocabulary:
    """Dense token ids: special tokens, class tokens ``CLS_i``, then characters."""

    def __init__(self, alphabet: str = ALPHABET, num_classes: int = 4):
        if len(set(alphabet)) != len(alphabet) or any(c.isspace() for c in alphabet):
            raise ValueError("alphabet must be unique non-whitespace characters")
        self.alphabet = alphabet
        self.num_classes = num_classes
        tokens = list(SPECIAL_TOKENS) + [f"CLS_{i}" for i in range(num_classes)] + list(alphabet)
        self._tokens = tokens
        self._ids = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self._tokens)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self._tokens == other._tokens

    def id(self, token: str) -> int:
        return self._ids[token]

    def token(self, idx: int) -> str:
        return self._tokens[idx]

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    @property
    def pad(self) -> int:
        return self._ids[PAD]

    @property
    def bos(self) -> int:
        return self._ids[BOS]

    @property
    def cont(self) -> int:
        return self._ids[CONT]

    @property
    def eos(self) -> int:
        return self._ids[EOS]

    @property
    def loc(self) -> int:
        return self._ids[LOC]

    @property
    def class_ids(self) -> list[int]:
        return [self._ids[f"CLS_{i}"] for i in range(self.num_classes)]

    def is_char(self, idx: int) -> bool:
        return idx >= len(SPECIAL_TOKENS) + self.num_classes

    def tokenize_word(self, word: str) -> list[int]:
        ids = []
        for ch in word:
            if ch not in self.alphabet:
                raise EncodingError(f"character {ch!r} not in alphabet")
            ids.append(self._ids[ch])
        return ids

    def detokenize(self, ids: Iterable[int]) -> str:
        out = []
        for i in ids:
            if not self.is_char(i):
                raise EncodingError(f"token {self.token(i)} is not a character")
            out.append(self._tokens[i])
        return "".join(out)

    def to_text(self) -> str:
        lines = [f"{VOCAB_MAGIC} {VOCAB_VERSION}"]
        lines += [f"{i}\t{t}" for i, t in enumerate(self._tokens)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Vocabulary":
        lines = text.rstrip("\n").split("\n")
        head = lines[0].split()
        if head != [VOCAB_MAGIC, str(VOCAB_VERSION)]:
            raise ValueError("unrecognised vocabulary manifest")
        tokens = []
        for k, line in enumerate(lines[1:]):
            idx, tok = line.split("\t", 1)
            if int(idx) != k:
                raise ValueError("vocabulary ids must be dense and ordered")
            tokens.append(tok)
        n_special = len(SPECIAL_TOKENS)
        if tuple(tokens[:n_special]) != SPECIAL_TOKENS:
            raise ValueError("vocabulary special tokens differ")
        num_classes = sum(1 for t in tokens if t.startswith("CLS_"))
        vocab = cls("".join(tokens[n_special + num_classes:]), num_classes)
        if vocab._tokens != tokens:
            raise ValueError("vocabulary layout differs")
        return vocab


@dataclass(frozen=True)
class WordBox:
    word: str
    box: BBox

    def __post_init__(self):
        if not self.word or any(c.isspace() for c in self.word):
            raise EncodingError(f"invalid word {self.word!r}")


@dataclass
class GlobalSequence:
    """Token ids plus the coordinate tuple attached to every ``[LOC]`` position."""

    tokens: list[int]
    loc_targets: dict[int, Coords] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.tokens)

    def entries(self) -> list[Entry]:
        return [(t, self.loc_targets.get(i)) for i, t in enumerate(self.tokens)]

    @classmethod
    def from_entries(cls, entries: Iterable[Entry]) -> "GlobalSequence":
        tokens, locs = [], {}
        for i, (t, c) in enumerate(entries):
            tokens.append(t)
            if c is not None:
                locs[i] = tuple(c)
        return cls(tokens, locs)

    def validate(self, vocab: Vocabulary) -> None:
        for i, t in enumerate(self.tokens):
            if (t == vocab.loc) != (i in self.loc_targets):
                raise MalformedSequenceError(f"position {i}: [LOC]/coordinate mismatch")


def reading_order(words: Sequence[WordBox]) -> list[WordBox]:
    """Row-major order: band by top edge (band height = median word height), then left edge."""
    if not words:
        return []
    band = max(1, int(statistics.median(w.box.height for w in words)))
    return sorted(words, key=lambda w: (w.box.y1 // band, w.box.x1, w.box.y1))


def encode_document(words: Sequence[WordBox], vocab: Vocabulary) -> GlobalSequence:
    """Words in the given order -> characters + ``[LOC]`` per word (no ``[EOS]``)."""
    if not words:
        raise EncodingError("cannot encode an empty document")
    tokens: list[int] = []
    locs: dict[int, Coords] = {}
    for wb in words:
        tokens.extend(vocab.tokenize_word(wb.word))
        locs[len(tokens)] = wb.box.astuple()
        tokens.append(vocab.loc)
    return GlobalSequence(tokens, locs)


def decode_sequence(
    seq: GlobalSequence, vocab: Vocabulary, diagnostics: list | None = None
) -> list[WordBox]:
    """Split at ``[LOC]`` boundaries back into words.

    Characters left over after the last ``[LOC]`` are reported: appended to
    ``diagnostics`` when given, otherwise emitted as an
    :class:`UnterminatedWordWarning`.
    """
    words: list[WordBox] = []
    pending: list[int] = []
    for i, t in enumerate(seq.tokens):
        if t == vocab.loc:
            if i not in seq.loc_targets:
                raise MalformedSequenceError(f"[LOC] at {i} has no coordinates")
            if not pending:
                raise MalformedSequenceError(f"[LOC] at {i} closes an empty word")
            words.append(WordBox(vocab.detokenize(pending), BBox(*seq.loc_targets[i])))
            pending = []
        elif vocab.is_char(t):
            if i in seq.loc_targets:
                raise MalformedSequenceError(f"coordinates attached to non-[LOC] position {i}")
            pending.append(t)
        else:
            raise MalformedSequenceError(f"unexpected token {vocab.token(t)} at {i}")
    if pending:
        record = {"kind": "unterminated-word", "text": vocab.detokenize(pending),
                  "position": len(seq.tokens) - len(pending)}
        if diagnostics is not None:
            diagnostics.append(record)
        else:
            warnings.warn(f"unterminated word {record['text']!r}", UnterminatedWordWarning,
                          stacklevel=2)
    return words


def compression_ratio(words: Sequence[WordBox], vocab: Vocabulary | None = None) -> float:
    """``(|w| + 1) / (|w| + 4)`` for the mean tokens-per-word ``|w|``."""
    if not words:
        raise EncodingError("empty document")
    vocab = vocab or Vocabulary()
    n = len(words)
    total = sum(len(vocab.tokenize_word(w.word)) for w in words)
    # (total/n + 1) / (total/n + 4), kept rational so it matches token counts exactly
    return float(Fraction(total + n, total + 4 * n))


def flattened_length(words: Sequence[WordBox], vocab: Vocabulary) -> int:
    """Token count if every word carried four explicit coordinate tokens."""
    return sum(len(vocab.tokenize_word(w.word)) + 4 for w in words)


# ---------------------------------------------------------------------------
# line-oriented text format: "token" or "token\tx1 y1 x2 y2"


def format_entries(entries: Iterable[Entry], vocab: Vocabulary) -> Iterator[str]:
    for t, c in entries:
        tok = vocab.token(t)
        yield tok if c is None else f"{tok}\t{c[0]} {c[1]} {c[2]} {c[3]}"


def sequence_to_text(seq: GlobalSequence, vocab: Vocabulary) -> str:
    return "".join(line + "\n" for line in format_entries(seq.entries(), vocab))


def parse_entry(line: str, vocab: Vocabulary) -> Entry:
    tok, _, rest = line.partition("\t")
    if tok not in vocab:
        raise EncodingError(f"unknown token {tok!r}")
    coords = None
    if rest:
        parts = rest.split()
        if len(parts) != 4:
            raise EncodingError(f"expected four coordinates in {line!r}")
        coords = tuple(int(p) for p in parts)
    return vocab.id(tok), coords


def sequence_from_text(text: str, vocab: Vocabulary) -> GlobalSequence:
    entries = [parse_entry(line, vocab) for line in text.split("\n") if line]
    seq = GlobalSequence.from_entries(entries)
    seq.validate(vocab)
    return seq
