"""Glue between pages, segments and the training/evaluation loops."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .codec import ANS_NO, ANS_YES, DOC_CLS, VQA, Vocabulary, encode_document
from .geometry import iou
from .infer import GenerationConfig, OcrResult, answer_question, classify, generate_ocr, label_tokens, vqa_prefix
from .metrics import match_boxes, mean_anls, prf, recognition_matches
from .model import FINETUNE_ONLY, Model, ModelConfig
from .objectives import (TrainRecord, doc_cls_loss, label_batch, segment_batch, token_label_loss,
                         total_loss, train)
from .segmenter import Mode, Segment, SegmentConfig, split, truncate
from .synthdoc import RenderedPage, QAPair


def model_config_for(pages: Sequence[RenderedPage], vocab: Vocabulary, **kw) -> ModelConfig:
    h, w = pages[0].pixels.shape
    return ModelConfig(image_h=h, image_w=w, vocab_size=len(vocab), **kw)


def page_segments(page: RenderedPage, vocab: Vocabulary, scfg: SegmentConfig,
                  truncated: bool = False) -> list[Segment]:
    seq = encode_document(page.words, vocab)
    return truncate(seq, scfg, vocab) if truncated else split(seq, scfg, vocab)


@dataclass
class Item:
    page: int
    segment: Segment
    tags: tuple[int, ...] = ()


def pretrain_items(pages, vocab, scfg, truncated=False) -> list[Item]:
    return [Item(i, s) for i, p in enumerate(pages) for s in page_segments(p, vocab, scfg, truncated)]


def cls_items(pages, vocab) -> list[Item]:
    return [Item(i, Segment(Mode.BEGINNING, vocab.id(DOC_CLS), [], [(vocab.class_ids[p.class_id], None)]))
            for i, p in enumerate(pages)]


def vqa_answer_entries(pair: QAPair, vocab: Vocabulary):
    if pair.yes_no is not None:
        return [(vocab.id(ANS_YES if pair.yes_no else ANS_NO), None)]
    return encode_document(pair.answer, vocab).entries()


def vqa_items(pages, vocab) -> list[Item]:
    items = []
    for i, p in enumerate(pages):
        for pair in p.qa:
            targets = vqa_answer_entries(pair, vocab) + [(vocab.eos, None)]
            items.append(Item(i, Segment(Mode.BEGINNING, vocab.id(VQA), vqa_prefix(pair.question, vocab),
                                         targets)))
    return items


def label_items(pages, vocab, scfg) -> list[Item]:
    items = []
    for i, p in enumerate(pages):
        k = 0
        for seg in page_segments(p, vocab, scfg):
            n = sum(1 for t, _ in seg.targets if t == vocab.loc)
            items.append(Item(i, seg, tuple(p.tags[k:k + n])))
            k += n
    return items


def _loss_fn(model, task, items, pages, vocab) -> Callable:
    def make(idx):
        chosen = [items[i] for i in idx]
        images = [pages[it.page].pixels for it in chosen]
        segs = [it.segment for it in chosen]
        if task == "token_label":
            return token_label_loss(model, label_batch(segs, images, [it.tags for it in chosen], vocab))
        batch = segment_batch(segs, images, vocab)
        if task == "doc_cls":
            return doc_cls_loss(model, batch, vocab)
        return total_loss(model, batch)
    return make


def pretrain(model: Model, pages: Sequence[RenderedPage], vocab: Vocabulary, scfg: SegmentConfig,
             steps: int, batch_size: int = 8, lr: float = 3e-3, weight_decay: float = 1e-2,
             seed: int = 0, truncated: bool = False,
             log: Callable[[TrainRecord], None] | None = None) -> list[TrainRecord]:
    """Joint text + layout training over segments sampled uniformly from the corpus.

    A model configured with ``layout_modeling=0`` trains the text loss alone.
    """
    items = pretrain_items(pages, vocab, scfg, truncated)
    params = {k: v for k, v in model.params.items() if k not in FINETUNE_ONLY}
    return train(model, _loss_fn(model, "pretrain", items, pages, vocab), len(items),
                 steps, batch_size, lr, weight_decay, seed, log, params=params)


FINETUNE_TASKS = {"label": "token_label", "cls": "doc_cls", "vqa": "vqa",
                  "token_label": "token_label", "doc_cls": "doc_cls"}


def finetune(model: Model, task: str, pages: Sequence[RenderedPage], vocab: Vocabulary,
             scfg: SegmentConfig, steps: int, batch_size: int = 8, lr: float = 1e-3,
             weight_decay: float = 1e-2, seed: int = 0,
             log: Callable[[TrainRecord], None] | None = None) -> list[TrainRecord]:
    if task not in FINETUNE_TASKS:
        raise ValueError(f"unknown task {task!r}")
    task = FINETUNE_TASKS[task]
    if task == "token_label":
        items = label_items(pages, vocab, scfg)
    elif task == "doc_cls":
        items = cls_items(pages, vocab)
    else:
        items = vqa_items(pages, vocab)
    params = model.params if task == "token_label" else {
        k: v for k, v in model.params.items() if k not in FINETUNE_ONLY}
    return train(model, _loss_fn(model, task, items, pages, vocab), len(items), steps, batch_size,
                 lr, weight_decay, seed, log, params=params)


# ---------------------------------------------------------------------------
# evaluation


def evaluate_ocr(model, pages, vocab, gcfg: GenerationConfig | None = None
                 ) -> tuple[dict[str, float], list[OcrResult]]:
    """Corpus-level (micro-averaged) localization and recognition scores plus raw results."""
    results = [generate_ocr(model, p.pixels, vocab, gcfg) for p in pages]
    loc_matches = rec_matches = 0
    for p, res in zip(pages, results):
        # boxes and words only match within their own page
        loc_matches += len(match_boxes([w.box for w in res.words], [w.box for w in p.words]))
        rec_matches += recognition_matches([w.word for w in res.words], [w.word for w in p.words])
    n_pred = sum(len(r.words) for r in results)
    n_gold = sum(len(p.words) for p in pages)
    lp, lr_, lf = prf(loc_matches, n_pred, n_gold)
    rp, rr, rf = prf(rec_matches, n_pred, n_gold)
    return {"loc_precision": lp, "loc_recall": lr_, "loc_f1": lf,
            "rec_precision": rp, "rec_recall": rr, "rec_f1": rf,
            "pages": len(pages), "segments": sum(r.segments_used for r in results)}, results


def evaluate_cls(model, pages, vocab) -> dict[str, float]:
    hits = sum(classify(model, p.pixels, vocab) == p.class_id for p in pages)
    return {"accuracy": hits / len(pages), "pages": len(pages)}


def evaluate_label(model, pages, vocab, scfg) -> dict[str, float]:
    hits = total = 0
    for p in pages:
        pred = label_tokens(model, p.pixels, p.words, vocab, scfg)
        hits += sum(a == b for a, b in zip(pred, p.tags))
        total += len(p.tags)
    return {"tag_accuracy": hits / total if total else 0.0, "words": total}


def evaluate_vqa(model, pages, vocab) -> dict[str, float]:
    preds, golds, ious = [], [], []
    for p in pages:
        for pair in p.qa:
            ans = answer_question(model, p.pixels, pair.question, vocab)
            preds.append(ans.text)
            if pair.yes_no is not None:
                golds.append(["yes" if pair.yes_no else "no"])
            else:
                golds.append([" ".join(w.word for w in pair.answer)])
                for k, gw in enumerate(pair.answer):
                    ious.append(iou(ans.words[k].box, gw.box) if k < len(ans.words) else 0.0)
    return {"anls": mean_anls(preds, golds), "questions": len(preds),
            "mean_grounding_iou": float(np.mean(ious)) if ious else 0.0,
            "grounding_iou_ge_0.5": float(np.mean([v >= 0.5 for v in ious])) if ious else 0.0}
