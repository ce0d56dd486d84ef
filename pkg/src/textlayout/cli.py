"""Command-line entry point: ``textlayout <subcommand> [flags]``.

Every run writes its resolved configuration (including the content hash of
the corpus it consumed) to ``--out DIR/config.txt`` before doing any work;
``--config`` accepts such a file back, so a run can be repeated exactly.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from dataclasses import dataclass

import numpy as np
from PIL import Image, ImageDraw

from .codec import Vocabulary, encode_document, format_entries
from .infer import GenerationConfig, generate_ocr
from .model import Model
from .pipeline import (evaluate_cls, evaluate_label, evaluate_ocr, evaluate_vqa, finetune,
                       model_config_for, page_segments, pretrain)
from .segmenter import SegmentConfig, dump_segments
from .synthdoc import corpus_hash, make_corpus, read_corpus, read_pgm, write_corpus

TASKS = ("label", "cls", "vqa")
EVAL_TASKS = ("ocr",) + TASKS


@dataclass
class RunConfig:
    command: str = ""
    out: str = ""
    data: str = ""
    pages: int = 8
    data_seed: int = 0
    seed: int = 0
    steps: int = 2000
    batch_size: int = 8
    lr: float = 3e-3
    weight_decay: float = 1e-2
    M: int = 64
    alpha_p: float = 0.25
    d: int = 64
    n_heads: int = 4
    enc_layers: int = 4
    dec_layers: int = 2
    patch_size: int = 16
    use_layout: bool = True
    truncated: bool = False
    task: str = ""
    model: str = ""
    max_segments: int = 8
    corpus_hash: str = ""

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in dataclasses.asdict(self).items())

    @classmethod
    def parse(cls, text: str) -> dict:
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        out = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = (s.strip() for s in line.partition("="))
            if not sep or key not in types:
                raise ValueError(f"config line {n}: unknown or malformed entry {line!r}")
            out[key] = _convert(types[key], value)
        return out


def _convert(kind: str, value: str):
    if kind == "bool":
        if value.lower() not in ("true", "false"):
            raise ValueError(f"expected true/false, got {value!r}")
        return value.lower() == "true"
    if kind == "int":
        return int(value)
    if kind == "float":
        return float(value)
    return value


OVERRIDABLE = [f.name for f in dataclasses.fields(RunConfig) if f.name not in ("command", "corpus_hash")]


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="textlayout", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="key = value file (e.g. a previous run's config.txt)")
        p.add_argument("--out", required=out_required, default=None, help="output directory")
        p.add_argument("--seed", type=int)

    def corpus(p):
        p.add_argument("--data", help="corpus directory written by gen-data")
        p.add_argument("--pages", type=int, help="generate this many pages when --data is absent")
        p.add_argument("--data-seed", type=int, dest="data_seed")

    def training(p):
        p.add_argument("--steps", type=int)
        p.add_argument("--batch-size", type=int, dest="batch_size")
        p.add_argument("--lr", type=float)
        p.add_argument("--weight-decay", type=float, dest="weight_decay")

    def segmenting(p):
        p.add_argument("--M", type=int)
        p.add_argument("--alpha-p", type=float, dest="alpha_p")

    p = sub.add_parser("gen-data", help="render a synthetic corpus")
    common(p)
    p.add_argument("--n", type=int, dest="pages")
    p.add_argument("--data-seed", type=int, dest="data_seed")

    p = sub.add_parser("pretrain", help="joint text + layout training")
    common(p)
    corpus(p)
    training(p)
    segmenting(p)
    for name in ("d", "n-heads", "enc-layers", "dec-layers", "patch-size"):
        p.add_argument(f"--{name}", type=int, dest=name.replace("-", "_"))
    p.add_argument("--no-layout", action="store_const", const=False, dest="use_layout",
                   help="train without layout modelling (ablation)")
    p.add_argument("--truncate", action="store_const", const=True, dest="truncated",
                   help="keep only the first M tokens of each page (ablation)")

    p = sub.add_parser("finetune", help="fine-tune a pretrained model")
    common(p)
    corpus(p)
    training(p)
    segmenting(p)
    p.add_argument("--task", choices=TASKS, required=True)
    p.add_argument("--model", required=True, help="directory holding checkpoint.bin")

    p = sub.add_parser("ocr", help="read words and boxes off one image")
    common(p)
    p.add_argument("image")
    p.add_argument("--model", required=True)
    p.add_argument("--max-segments", type=int, dest="max_segments")

    p = sub.add_parser("eval", help="score a model on a corpus")
    common(p)
    corpus(p)
    segmenting(p)
    p.add_argument("--task", choices=EVAL_TASKS, required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--max-segments", type=int, dest="max_segments")

    p = sub.add_parser("inspect", help="print the token and segment views of one page")
    common(p, out_required=False)
    corpus(p)
    segmenting(p)
    p.add_argument("--page", type=int, default=0)
    return parser


def resolve(args: argparse.Namespace) -> RunConfig:
    """Defaults, then the config file, then explicit flags."""
    values = {}
    if args.config:
        with open(args.config) as fh:
            values.update(RunConfig.parse(fh.read()))
    for k in OVERRIDABLE:
        v = getattr(args, k, None)
        if v is not None:
            values[k] = v
    values.pop("corpus_hash", None)
    values["command"] = args.command
    return RunConfig(**values)


def _load_pages(cfg: RunConfig):
    if cfg.data:
        return read_corpus(cfg.data)
    return make_corpus(cfg.pages, cfg.data_seed)


def _start(cfg: RunConfig, pages=None) -> None:
    if pages is not None:
        cfg.corpus_hash = corpus_hash(pages)
    if cfg.out:
        os.makedirs(cfg.out, exist_ok=True)
        with open(os.path.join(cfg.out, "config.txt"), "w") as fh:
            fh.write(cfg.to_text())


def _train_log(cfg: RunConfig):
    fh = open(os.path.join(cfg.out, "train.log"), "w")

    def log(rec):
        fh.write(rec.line() + "\n")
        fh.flush()
    return fh, log


def write_overlay(path, pixels: np.ndarray, words) -> None:
    """Page with one rectangle per predicted word box."""
    h, w = pixels.shape
    img = Image.fromarray(np.round(np.clip(pixels, 0, 1) * 255).astype(np.uint8), mode="L")
    draw = ImageDraw.Draw(img)
    for wb in words:
        b = wb.box
        x1, y1 = b.x1 * w // 1000, b.y1 * h // 1000
        x2, y2 = max(x1, -(-b.x2 * w // 1000) - 1), max(y1, -(-b.y2 * h // 1000) - 1)
        draw.rectangle([x1, y1, x2, y2], outline=128)
    img.save(path)


def cmd_gen_data(cfg: RunConfig) -> None:
    pages = make_corpus(cfg.pages, cfg.data_seed)
    _start(cfg, pages)
    digest = write_corpus(cfg.out, pages, cfg.data_seed)
    print(f"wrote {len(pages)} pages to {cfg.out}\nhash {digest}")


def cmd_pretrain(cfg: RunConfig) -> None:
    pages = _load_pages(cfg)
    _start(cfg, pages)
    vocab = Vocabulary()
    mcfg = model_config_for(pages, vocab, d=cfg.d, n_heads=cfg.n_heads, enc_layers=cfg.enc_layers,
                            dec_layers=cfg.dec_layers, patch_size=cfg.patch_size, M=cfg.M,
                            layout_modeling=int(cfg.use_layout))
    model = Model(mcfg, seed=cfg.seed)
    fh, log = _train_log(cfg)
    with fh:
        hist = pretrain(model, pages, vocab, SegmentConfig(cfg.M, cfg.alpha_p), cfg.steps, cfg.batch_size,
                        cfg.lr, cfg.weight_decay, cfg.seed, cfg.truncated, log)
    model.save(cfg.out)
    print(hist[-1].line() if hist else "no steps run")


def cmd_finetune(cfg: RunConfig) -> None:
    pages = _load_pages(cfg)
    _start(cfg, pages)
    model = Model.load(cfg.model)
    fh, log = _train_log(cfg)
    with fh:
        hist = finetune(model, cfg.task, pages, Vocabulary(), SegmentConfig(cfg.M, cfg.alpha_p), cfg.steps,
                        cfg.batch_size, cfg.lr, cfg.weight_decay, cfg.seed, log)
    model.save(cfg.out)
    print(hist[-1].line() if hist else "no steps run")


def cmd_ocr(cfg: RunConfig, image: str) -> None:
    _start(cfg)
    model = Model.load(cfg.model)
    pixels = read_pgm(image)
    res = generate_ocr(model, pixels, Vocabulary(), GenerationConfig(model.cfg.M, cfg.alpha_p, cfg.max_segments))
    lines = [f"{w.word}\t{w.box.x1} {w.box.y1} {w.box.x2} {w.box.y2}" for w in res.words]
    lines += [f"#segments\t{res.segments_used}", f"#finished\t{str(res.finished).lower()}"]
    lines += [f"#diagnostic\t{d}" for d in res.diagnostics]
    with open(os.path.join(cfg.out, "ocr.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    write_overlay(os.path.join(cfg.out, "overlay.pgm"), pixels, res.words)
    print(" ".join(w.word for w in res.words))


def cmd_eval(cfg: RunConfig) -> None:
    pages = _load_pages(cfg)
    _start(cfg, pages)
    model = Model.load(cfg.model)
    vocab = Vocabulary()
    if cfg.task == "ocr":
        metrics, _ = evaluate_ocr(model, pages, vocab, GenerationConfig(model.cfg.M, cfg.alpha_p, cfg.max_segments))
    elif cfg.task == "cls":
        metrics = evaluate_cls(model, pages, vocab)
    elif cfg.task == "label":
        metrics = evaluate_label(model, pages, vocab, SegmentConfig(model.cfg.M, cfg.alpha_p))
    else:
        metrics = evaluate_vqa(model, pages, vocab)
    text = "".join(f"{k} = {v}\n" for k, v in metrics.items())
    with open(os.path.join(cfg.out, "metrics.txt"), "w") as fh:
        fh.write(text)
    print(text, end="")


def cmd_inspect(cfg: RunConfig, index: int) -> None:
    pages = _load_pages(cfg)
    if not 0 <= index < len(pages):
        raise IndexError(f"page {index} out of range (corpus has {len(pages)})")
    _start(cfg, pages)
    vocab = Vocabulary()
    page = pages[index]
    seq = encode_document(page.words, vocab)
    segs = page_segments(page, vocab, SegmentConfig(cfg.M, cfg.alpha_p))
    print(f"# page {index}: style {page.spec.style}, {len(page.words)} words, "
          f"{len(seq)} tokens, {len(segs)} segment(s)")
    print("\n".join(format_entries(seq.entries(), vocab)))
    print("# segments")
    print(dump_segments(segs, vocab), end="")


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = resolve(args)
        if args.command == "gen-data":
            cmd_gen_data(cfg)
        elif args.command == "pretrain":
            cmd_pretrain(cfg)
        elif args.command == "finetune":
            cmd_finetune(cfg)
        elif args.command == "ocr":
            cmd_ocr(cfg, args.image)
        elif args.command == "eval":
            cmd_eval(cfg)
        else:
            cmd_inspect(cfg, args.page)
    except Exception as exc:  # report any runtime failure as a one-line diagnostic
        print(f"textlayout {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
