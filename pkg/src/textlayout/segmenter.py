"""Multi-segment splitting of long global sequences.

The first segment holds up to ``M`` target tokens. Each later segment starts
with the previous segment's last ``alpha_p * M`` entries as a loss-free prefix
and holds up to ``(1 - alpha_p) * M`` new targets. ``[EOS]`` closes the last
segment and may take it one position past ``M``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

from .codec import Entry, GlobalSequence, Vocabulary


class Mode(str, Enum):
    BEGINNING = "BEGIN"
    CONTINUATION = "CONT"


class SegmentConfigError(ValueError):
    pass


class ContinuityError(ValueError):
    pass


@dataclass(frozen=True)
class SegmentConfig:
    M: int = 64
    alpha_p: float = 0.25

    def __post_init__(self):
        if self.M < 4:
            raise SegmentConfigError(f"M must be >= 4, got {self.M}")
        if not (0.0 < self.alpha_p < 1.0):
            raise SegmentConfigError(f"alpha_p must lie in (0, 1), got {self.alpha_p}")
        p = self.alpha_p * self.M
        if abs(p - round(p)) > 1e-9 or round(p) < 1:
            raise SegmentConfigError(f"alpha_p * M = {p} must be a positive integer")

    @property
    def prefix_len(self) -> int:
        return int(round(self.alpha_p * self.M))

    @property
    def stride(self) -> int:
        """New targets per continuation segment."""
        return self.M - self.prefix_len

    def num_segments(self, length: int) -> int:
        return 1 + math.ceil(max(0, length - self.M) / self.stride)


@dataclass
class Segment:
    mode: Mode
    mode_token: int
    prefix: list[Entry] = field(default_factory=list)
    targets: list[Entry] = field(default_factory=list)
    # entry that follows the last target in the document; None on the final segment
    boundary: Entry | None = None

    @property
    def loss_mask(self) -> list[bool]:
        """Aligned with ``[mode] + prefix + targets``."""
        return [False] * (1 + len(self.prefix)) + [True] * len(self.targets)


def split(seq: GlobalSequence, cfg: SegmentConfig, vocab: Vocabulary) -> list[Segment]:
    if len(seq) == 0:
        raise ValueError("cannot split an empty sequence")
    entries = seq.entries()
    segs = [Segment(Mode.BEGINNING, vocab.bos, [], entries[: cfg.M])]
    pos = min(cfg.M, len(entries))
    while pos < len(entries):
        segs[-1].boundary = entries[pos]
        prefix = next_prefix(segs[-1], cfg)
        segs.append(Segment(Mode.CONTINUATION, vocab.cont, prefix,
                            entries[pos: pos + cfg.stride]))
        pos += cfg.stride
    segs[-1].targets = segs[-1].targets + [(vocab.eos, None)]
    return segs


def truncate(seq: GlobalSequence, cfg: SegmentConfig, vocab: Vocabulary) -> list[Segment]:
    """Single-segment alternative to :func:`split`: tokens past ``M`` are dropped."""
    if len(seq) == 0:
        raise ValueError("cannot truncate an empty sequence")
    return [Segment(Mode.BEGINNING, vocab.bos, [], seq.entries()[: cfg.M] + [(vocab.eos, None)])]


def next_prefix(prev: Segment, cfg: SegmentConfig) -> list[Entry]:
    """Last ``alpha_p * M`` entries of ``prev`` (coordinates included)."""
    stream = prev.prefix + prev.targets
    if not prev.targets:
        raise ValueError("previous segment has no targets")
    return list(stream[-cfg.prefix_len:])


def reassemble(segments: Sequence[Segment], vocab: Vocabulary) -> GlobalSequence:
    if not segments or segments[0].mode is not Mode.BEGINNING:
        raise ContinuityError("first segment must be a beginning segment")
    out: list[Entry] = []
    for i, seg in enumerate(segments):
        if i > 0:
            if seg.mode is not Mode.CONTINUATION:
                raise ContinuityError(f"segment {i} is not a continuation")
            prev = segments[i - 1]
            window = (prev.prefix + prev.targets)[-len(seg.prefix):] if seg.prefix else []
            if [tuple_entry(e) for e in window] != [tuple_entry(e) for e in seg.prefix]:
                raise ContinuityError(f"segment {i} prefix does not match previous suffix")
        out.extend(seg.targets)
    if out and out[-1][0] == vocab.eos:
        out = out[:-1]
    return GlobalSequence.from_entries(out)


def tuple_entry(e: Entry) -> tuple:
    t, c = e
    return (t, None if c is None else tuple(c))


def dump_segments(segments: Sequence[Segment], vocab: Vocabulary) -> str:
    """One debugging line per segment: ``MODE|prefix entries|target entries``."""

    def fmt(entries):
        parts = []
        for t, c in entries:
            tok = vocab.token(t)
            parts.append(tok if c is None else f"{tok}@{c[0]},{c[1]},{c[2]},{c[3]}")
        return " ".join(parts)

    return "".join(f"{s.mode.value}|{fmt(s.prefix)}|{fmt(s.targets)}\n" for s in segments)
