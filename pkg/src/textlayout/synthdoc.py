"""Deterministic synthetic pages rendered with dot-matrix pseudo-glyphs.

All layout arithmetic is integer-only and randomness comes from
``random.Random``, so a page is a pure function of its spec on every
platform.
"""

from __future__ import annotations

import hashlib
import os
import random
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from PIL import Image

from .codec import ALPHABET, WordBox, reading_order
from .geometry import BBox, quantize_fraction

GLYPH_W, GLYPH_H = 3, 5
STYLES = ("paragraph", "two-column", "table", "form")
TAGS = ("header", "key", "value", "body")
HEADER, KEY, VALUE, BODY = range(4)

INK, PAPER = 0.0, 1.0


class GenerationError(ValueError):
    pass


def _glyph_table(alphabet: str = ALPHABET) -> dict[str, np.ndarray]:
    rng = random.Random(0x61F)
    used: set[int] = set()
    table = {}
    for ch in alphabet:
        while True:
            bits = rng.randrange(1, 1 << (GLYPH_W * GLYPH_H))
            if 5 <= bin(bits).count("1") <= 11 and bits not in used:
                break
        used.add(bits)
        pattern = np.array([(bits >> k) & 1 for k in range(GLYPH_W * GLYPH_H)], dtype=bool)
        table[ch] = pattern.reshape(GLYPH_H, GLYPH_W)
    return table


GLYPHS = _glyph_table()


def render_glyph(ch: str, cell: tuple[int, int] = (4, 6)) -> np.ndarray:
    """Pixel block ``[cell_h, cell_w]`` for one character (ink 0, paper 1)."""
    if ch not in GLYPHS:
        raise GenerationError(f"no glyph for {ch!r}")
    cw, ch_ = cell
    s = max(1, min(cw // (GLYPH_W + 1), ch_ // (GLYPH_H + 1)))
    block = np.full((ch_, cw), PAPER)
    pat = np.kron(GLYPHS[ch], np.ones((s, s), dtype=bool))
    block[: pat.shape[0], : pat.shape[1]][pat] = INK
    return block


@dataclass(frozen=True)
class PageSpec:
    seed: int
    width: int = 64
    height: int = 64
    min_words: int = 4
    max_words: int = 40
    cell: tuple[int, int] = (4, 6)
    style: str = "paragraph"
    continue_percent: int = 93   # per-word chance of drawing another word (long tail)

    def __post_init__(self):
        if self.style not in STYLES:
            raise GenerationError(f"unknown style {self.style!r}")
        if self.min_words < 1 or self.max_words < self.min_words:
            raise GenerationError("invalid word range")

    @property
    def class_id(self) -> int:
        return STYLES.index(self.style)


@dataclass(frozen=True)
class QAPair:
    question: str
    answer: tuple[WordBox, ...] = ()
    yes_no: bool | None = None


@dataclass
class RenderedPage:
    spec: PageSpec
    pixels: np.ndarray
    words: list[WordBox]
    tags: list[int]
    class_id: int
    qa: list[QAPair] = field(default_factory=list)

    def annotation_text(self) -> str:
        lines = [f"#style\t{self.spec.style}", f"#class\t{self.class_id}", f"#seed\t{self.spec.seed}"]
        for pair in self.qa:
            if pair.yes_no is not None:
                ans = "[ANS_YES]" if pair.yes_no else "[ANS_NO]"
            else:
                ans = " ".join(str(self.words.index(w)) for w in pair.answer)
            lines.append(f"#qa\t{pair.question}\t{ans}")
        for w, t in zip(self.words, self.tags):
            b = w.box
            lines.append(f"{w.word}\t{b.x1}\t{b.y1}\t{b.x2}\t{b.y2}\t{t}")
        return "\n".join(lines) + "\n"

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.round(self.pixels * 255).astype(np.uint8).tobytes())
        h.update(self.annotation_text().encode())
        return h.hexdigest()


_LOWER = "abcdefghijklmnopqrstuvwxyz"
_UPPER = _LOWER.upper()
_DIGITS = "0123456789"
_LEN_WEIGHTS = (3, 5, 6, 5, 3, 2)   # word lengths 1..6


def _word(rng: random.Random, chars: str, max_len: int) -> str:
    k = rng.choices(range(1, len(_LEN_WEIGHTS) + 1), weights=_LEN_WEIGHTS)[0]
    k = max(1, min(k, max_len))
    return "".join(rng.choice(chars) for _ in range(k))


class _Canvas:
    def __init__(self, spec: PageSpec):
        self.spec = spec
        self.cw, self.ch = spec.cell
        self.margin_x = (spec.width % self.cw) // 2 or self.cw // 2
        self.margin_y = (spec.height % self.ch) // 2 or self.ch // 2
        self.cols = (spec.width - 2 * self.margin_x) // self.cw
        self.rows = (spec.height - 2 * self.margin_y) // self.ch
        if self.cols < 2 or self.rows < 2:
            raise GenerationError("canvas too small for the glyph cell")
        self.pixels = np.full((spec.height, spec.width), PAPER)
        self.placed: list[tuple[str, int, int, int]] = []   # word, row, col, tag

    def put(self, word: str, row: int, col: int, tag: int):
        self.placed.append((word, row, col, tag))
        y0 = self.margin_y + row * self.ch
        for k, c in enumerate(word):
            x0 = self.margin_x + (col + k) * self.cw
            self.pixels[y0:y0 + self.ch, x0:x0 + self.cw] = render_glyph(c, self.spec.cell)

    def box(self, word: str, row: int, col: int) -> BBox:
        x0 = self.margin_x + col * self.cw
        y0 = self.margin_y + row * self.ch
        s = self.spec
        return BBox(quantize_fraction(x0, s.width), quantize_fraction(y0, s.height),
                    quantize_fraction(x0 + len(word) * self.cw, s.width),
                    quantize_fraction(y0 + self.ch, s.height))


def _flow(canvas: _Canvas, rng, n: int, row0: int, col0: int, width: int, tag: int) -> int:
    """Fill words left-to-right in a column band; returns how many were placed."""
    row, col, placed = row0, col0, 0
    while placed < n and row < canvas.rows:
        w = _word(rng, _LOWER + _DIGITS, width)
        if col + len(w) > col0 + width:
            row, col = row + 1, col0
            continue
        canvas.put(w, row, col, tag)
        col += len(w) + 1
        placed += 1
    return placed


def generate_page(spec: PageSpec) -> RenderedPage:
    """Render one page; words and tags come back in the codec's reading order."""
    rng = random.Random(spec.seed)
    n = spec.min_words
    while n < spec.max_words and rng.randrange(100) < spec.continue_percent:
        n += 1
    cv = _Canvas(spec)
    header = _word(rng, _UPPER, min(6, cv.cols))
    cv.put(header, 0, 0, HEADER)
    budget = n - 1
    kv_rows: list[tuple[int, int]] = []
    if spec.style == "paragraph":
        _flow(cv, rng, budget, 1, 0, cv.cols, BODY)
    elif spec.style == "two-column":
        half = (cv.cols - 1) // 2
        left = _flow(cv, rng, (budget + 1) // 2, 1, 0, half, BODY)
        _flow(cv, rng, budget - left, 1, half + 1, cv.cols - half - 1, BODY)
    elif spec.style == "table":
        ncol = 3
        width = cv.cols // ncol
        for i in range(budget):
            row, c = 1 + i // ncol, i % ncol
            if row >= cv.rows:
                break
            cv.put(_word(rng, _DIGITS + "$.", width - 1), row, c * width, VALUE)
    else:  # form: "key: value" lines
        row = 1
        while budget > 0 and row < cv.rows:
            key = _word(rng, _LOWER, max(1, cv.cols // 2 - 2)) + ":"
            cv.put(key, row, 0, KEY)
            start = len(cv.placed) - 1
            budget -= 1
            col = len(key) + 1
            while budget > 0:
                v = _word(rng, _DIGITS + "/-", cv.cols - col)
                if col + len(v) > cv.cols:
                    break
                cv.put(v, row, col, VALUE)
                col += len(v) + 1
                budget -= 1
                if rng.randrange(3) == 0 or col >= cv.cols - 1:
                    break
            kv_rows.append((start, len(cv.placed)))
            row += 1
    if len(cv.placed) < spec.min_words:
        raise GenerationError(f"only {len(cv.placed)} of {spec.min_words} words fit the canvas")

    entries = [(WordBox(w, cv.box(w, r, c)), t) for (w, r, c, t) in cv.placed]
    by_box = {id(wb): t for wb, t in entries}
    ordered = reading_order([wb for wb, _ in entries])
    tags = [by_box[id(wb)] for wb in ordered]

    qa: list[QAPair] = []
    seen_keys = set()
    for start, end in kv_rows:
        key_wb = entries[start][0]
        values = tuple(entries[k][0] for k in range(start + 1, end))
        question = key_wb.word[:-1]
        if values and question not in seen_keys:
            seen_keys.add(question)
            qa.append(QAPair(question, values))
    probe = STYLES[rng.randrange(len(STYLES))]
    qa.append(QAPair(f"is:{probe}", (), probe == spec.style))
    return RenderedPage(spec, cv.pixels, ordered, tags, spec.class_id, qa)


# ---------------------------------------------------------------------------
# corpora


def style_counts(n: int, mix: Mapping[str, float]) -> dict[str, int]:
    """Largest-remainder allocation of ``n`` pages to styles."""
    total = sum(mix.values())
    raw = {s: n * w / total for s, w in mix.items()}
    counts = {s: int(v) for s, v in raw.items()}
    rest = sorted(mix, key=lambda s: (-(raw[s] - counts[s]), STYLES.index(s)))
    for s in rest[: n - sum(counts.values())]:
        counts[s] += 1
    return counts


def make_corpus(n: int, seed: int, mix: Mapping[str, float] | None = None,
                **spec_kw) -> list[RenderedPage]:
    if n < 1:
        raise ValueError("corpus needs at least one page")
    mix = dict(mix) if mix else {s: 1.0 for s in STYLES}
    rng = random.Random(seed)
    styles = [s for s, c in style_counts(n, mix).items() for _ in range(c)]
    rng.shuffle(styles)
    return [generate_page(PageSpec(seed=rng.randrange(2 ** 31), style=s, **spec_kw))
            for s in styles]


def corpus_hash(pages: Sequence[RenderedPage]) -> str:
    h = hashlib.sha256()
    for p in pages:
        h.update(p.content_hash().encode())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# files: <name>.pgm + <name>.txt per page, manifest.txt per corpus


def write_pgm(path, pixels: np.ndarray) -> None:
    Image.fromarray(np.round(np.clip(pixels, 0, 1) * 255).astype(np.uint8), mode="L").save(path)


def read_pgm(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


def write_corpus(directory, pages: Sequence[RenderedPage], seed: int | None = None) -> str:
    os.makedirs(directory, exist_ok=True)
    lines = ["TLCORPUS 1", f"pages\t{len(pages)}"]
    if seed is not None:
        lines.append(f"seed\t{seed}")
    for i, p in enumerate(pages):
        name = f"page_{i:04d}"
        write_pgm(os.path.join(directory, name + ".pgm"), p.pixels)
        with open(os.path.join(directory, name + ".txt"), "w") as fh:
            fh.write(p.annotation_text())
        lines.append(f"page\t{name}\t{p.spec.seed}\t{p.spec.style}\t{p.content_hash()}")
    digest = corpus_hash(pages)
    lines.append(f"hash\t{digest}")
    with open(os.path.join(directory, "manifest.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return digest


def read_annotations(text: str):
    words, tags, meta, qa_raw = [], [], {}, []
    for line in text.splitlines():
        if not line:
            continue
        parts = line.split("\t")
        if line.startswith("#"):
            if parts[0] == "#qa":
                qa_raw.append((parts[1], parts[2]))
            else:
                meta[parts[0][1:]] = parts[1]
            continue
        w, x1, y1, x2, y2, t = parts
        words.append(WordBox(w, BBox(int(x1), int(y1), int(x2), int(y2))))
        tags.append(int(t))
    qa = []
    for q, a in qa_raw:
        if a in ("[ANS_YES]", "[ANS_NO]"):
            qa.append(QAPair(q, (), a == "[ANS_YES]"))
        else:
            qa.append(QAPair(q, tuple(words[int(i)] for i in a.split())))
    return words, tags, meta, qa


def read_corpus(directory) -> list[RenderedPage]:
    with open(os.path.join(directory, "manifest.txt")) as fh:
        manifest = [line.split("\t") for line in fh.read().splitlines()[1:]]
    pages = []
    for row in manifest:
        if row[0] != "page":
            continue
        name = row[1]
        pixels = read_pgm(os.path.join(directory, name + ".pgm"))
        with open(os.path.join(directory, name + ".txt")) as fh:
            words, tags, meta, qa = read_annotations(fh.read())
        spec = PageSpec(seed=int(meta["seed"]), width=pixels.shape[1], height=pixels.shape[0],
                        style=meta["style"])
        pages.append(RenderedPage(spec, pixels, words, tags, int(meta["class"]), qa))
    return pages


def manifest_hash(directory) -> str:
    with open(os.path.join(directory, "manifest.txt")) as fh:
        for line in fh:
            if line.startswith("hash\t"):
                return line.split("\t")[1].strip()
    raise ValueError("manifest has no hash line")
