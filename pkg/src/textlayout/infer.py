"""Greedy generation: OCR with multi-segment continuation, classification,
grounded question answering and token labelling."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .codec import (ANS_NO, ANS_YES, SEP, VQA, DOC_CLS, Entry, GlobalSequence, MalformedSequenceError,
                    Vocabulary, WordBox, decode_sequence, encode_document)
from .geometry import BBox, RangeError
from .model import Model
from .objectives import label_batch, label_hidden
from .segmenter import Mode, Segment, SegmentConfig, next_prefix, split


@dataclass(frozen=True)
class GenerationConfig:
    M: int = 64
    alpha_p: float = 0.25
    max_segments: int = 8

    def __post_init__(self):
        if self.max_segments < 1:
            raise ValueError("max_segments must be >= 1")

    @property
    def segment_config(self) -> SegmentConfig:
        return SegmentConfig(self.M, self.alpha_p)


@dataclass
class OcrResult:
    words: list[WordBox]
    segments_used: int
    diagnostics: list[dict] = field(default_factory=list)
    segments: list[Segment] = field(default_factory=list)
    word_segment: list[int] = field(default_factory=list)
    finished: bool = False


class _Decoder:
    """Re-runs the decoder over the growing input for one image (no KV cache)."""

    def __init__(self, model: Model, image: np.ndarray):
        self.model = model
        with T.no_grad():
            self.hv = model.encode_image(np.asarray(image)[None])

    def step(self, inputs: Sequence[Entry], vocab: Vocabulary):
        toks = np.array([[t for t, _ in inputs]], dtype=np.int64)
        coords = np.array([[c if c is not None else (0, 0, 0, 0) for _, c in inputs]], dtype=np.int64)
        with T.no_grad():
            h = self.model.decode(self.hv, self.model.embed_targets(toks, coords, toks == vocab.loc))
            last = T.reshape(T.take_rows(T.reshape(h, (-1, h.shape[-1])), [h.shape[1] - 1]),
                             (1, h.shape[-1]))
            logits = self.model.lm_logits(last).data[0]
        return last, logits

    def coords(self, hidden) -> tuple[int, int, int, int]:
        with T.no_grad():
            _, c = self.model.layout_head(hidden)
        return tuple(int(v) for v in c[0])


def _allowed_mask(vocab: Vocabulary, extra: Sequence[int] = ()) -> np.ndarray:
    allow = np.zeros(len(vocab), dtype=bool)
    for i in range(len(vocab)):
        allow[i] = vocab.is_char(i)
    allow[[vocab.loc, vocab.eos, *extra]] = True
    return allow


def _argmax(logits: np.ndarray, allow: np.ndarray) -> int:
    # np.argmax returns the first maximum: ties go to the lowest id
    return int(np.argmax(np.where(allow, logits, -np.inf)))


def _generate(dec: _Decoder, mode_token: int, prefix: list[Entry], max_targets: int,
              vocab: Vocabulary, allow: np.ndarray) -> tuple[list[Entry], bool]:
    """Greedy targets after ``[mode] + prefix``. Once ``max_targets`` are out, one
    more step is taken and kept only if it is ``[EOS]``."""
    out: list[Entry] = []
    while True:
        hidden, logits = dec.step([(mode_token, None)] + prefix + out, vocab)
        tok = _argmax(logits, allow)
        if len(out) >= max_targets:
            if tok == vocab.eos:
                out.append((tok, None))
                return out, True
            return out, False
        if tok == vocab.loc:
            out.append((tok, dec.coords(hidden)))
        else:
            out.append((tok, None))
        if tok == vocab.eos:
            return out, True


def decode_partial(entries: Sequence[Entry], vocab: Vocabulary, diagnostics: list) -> list[tuple[int, WordBox]]:
    """Tolerant decoding of generated output: bad words are reported and skipped.

    A generated box whose corners are out of order is repaired by sorting each
    axis (and reported), so the word text survives an untrained layout head.
    Returns ``(entry_index_of_loc, word)`` pairs.
    """
    words = []
    pending: list[int] = []
    start = 0
    for i, (t, c) in enumerate(entries):
        if t == vocab.loc:
            if pending and c is not None and (c[0] > c[2] or c[1] > c[3]):
                diagnostics.append({"kind": "inverted-box", "position": i, "box": tuple(c)})
                c = (min(c[0], c[2]), min(c[1], c[3]), max(c[0], c[2]), max(c[1], c[3]))
            try:
                seq = GlobalSequence(pending + [t], {len(pending): c})
                wb = decode_sequence(seq, vocab)[0]
                words.append((i, wb))
            except (MalformedSequenceError, RangeError, IndexError) as exc:
                diagnostics.append({"kind": "malformed-word", "position": start, "error": str(exc)})
            pending = []
            start = i + 1
        elif vocab.is_char(t):
            pending.append(t)
        else:
            diagnostics.append({"kind": "unexpected-token", "position": i, "token": vocab.token(t)})
    if pending:
        diagnostics.append({"kind": "unterminated-word", "position": start,
                            "text": vocab.detokenize(pending)})
    return words


def generate_ocr(model: Model, image: np.ndarray, vocab: Vocabulary,
                 cfg: GenerationConfig | None = None) -> OcrResult:
    """Read every word and box off a page, continuing across segments as needed."""
    cfg = cfg or GenerationConfig(M=model.cfg.M)
    scfg = cfg.segment_config
    dec = _Decoder(model, image)
    allow = _allowed_mask(vocab)
    segments: list[Segment] = []
    finished = False
    while len(segments) < cfg.max_segments:
        if not segments:
            seg = Segment(Mode.BEGINNING, vocab.bos, [], [])
            budget = scfg.M
        else:
            seg = Segment(Mode.CONTINUATION, vocab.cont, next_prefix(segments[-1], scfg), [])
            budget = scfg.stride
        seg.targets, finished = _generate(dec, seg.mode_token, seg.prefix, budget, vocab, allow)
        segments.append(seg)
        if finished or not seg.targets:
            break
    entries: list[Entry] = []
    owner: list[int] = []
    for k, s in enumerate(segments):
        entries.extend(s.targets)
        owner.extend([k] * len(s.targets))
    if entries and entries[-1][0] == vocab.eos:
        entries = entries[:-1]
    diagnostics: list[dict] = []
    if not finished:
        diagnostics.append({"kind": "no-eos", "segments": len(segments)})
    decoded = decode_partial(entries, vocab, diagnostics)
    return OcrResult([w for _, w in decoded], len(segments), diagnostics, segments,
                     [owner[i] for i, _ in decoded], finished)


def classify(model: Model, image: np.ndarray, vocab: Vocabulary) -> int:
    """Class index from the class-token logits after ``[DOC_CLS]`` (ties -> lowest)."""
    dec = _Decoder(model, image)
    _, logits = dec.step([(vocab.id(DOC_CLS), None)], vocab)
    return int(np.argmax(logits[vocab.class_ids]))


@dataclass
class Answer:
    words: list[WordBox]
    yes_no: bool | None = None
    diagnostics: list[dict] = field(default_factory=list)

    @property
    def text(self) -> str:
        if self.yes_no is not None:
            return "yes" if self.yes_no else "no"
        return " ".join(w.word for w in self.words)

    @property
    def boxes(self) -> list[BBox]:
        return [w.box for w in self.words]


def vqa_prefix(question: str, vocab: Vocabulary) -> list[Entry]:
    if not question:
        raise ValueError("empty question")
    return [(t, None) for t in vocab.tokenize_word(question)] + [(vocab.id(SEP), None)]


def answer_question(model: Model, image: np.ndarray, question: str, vocab: Vocabulary,
                    max_len: int = 24) -> Answer:
    prefix = vqa_prefix(question, vocab)
    yes, no = vocab.id(ANS_YES), vocab.id(ANS_NO)
    allow = _allowed_mask(vocab, (yes, no))
    dec = _Decoder(model, image)
    budget = min(max_len, model.cfg.max_len - 1 - len(prefix))
    out, _ = _generate(dec, vocab.id(VQA), prefix, budget, vocab, allow)
    if out and out[-1][0] == vocab.eos:
        out = out[:-1]
    diagnostics: list[dict] = []
    if out and out[0][0] in (yes, no):
        if len(out) > 1:
            diagnostics.append({"kind": "trailing-after-yes-no", "count": len(out) - 1})
        return Answer([], out[0][0] == yes, diagnostics)
    words = [w for _, w in decode_partial(out, vocab, diagnostics)]
    return Answer(words, None, diagnostics)


def label_tokens(model: Model, image: np.ndarray, words: Sequence[WordBox], vocab: Vocabulary,
                 scfg: SegmentConfig | None = None) -> list[int]:
    """Tag per word from gold words and boxes, segment by segment."""
    scfg = scfg or SegmentConfig(model.cfg.M)
    segs = split(encode_document(words, vocab), scfg, vocab)
    batch = label_batch(segs, [image] * len(segs), [[] for _ in segs], vocab)
    with T.no_grad():
        logits = model.tag_logits(label_hidden(model, batch)).data
    return [int(i) for i in np.argmax(logits, axis=-1)]
