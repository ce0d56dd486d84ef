"""Localization, recognition and ANLS scores."""

from __future__ import annotations

from collections import Counter
from typing import Sequence

from .geometry import BBox, iou


def prf(matches: int, n_pred: int, n_gold: int) -> tuple[float, float, float]:
    p = matches / n_pred if n_pred else 0.0
    r = matches / n_gold if n_gold else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f


def match_boxes(pred: Sequence[BBox], gold: Sequence[BBox], iou_thresh: float = 0.5):
    """Greedy one-to-one matching, highest IoU first. Returns ``[(pred_idx, gold_idx, iou)]``."""
    cands = []
    for i, a in enumerate(pred):
        for j, b in enumerate(gold):
            v = iou(a, b)
            if v >= iou_thresh and v > 0:
                ta, tb = a.astuple(), b.astuple()
                # tie-break on the unordered box pair so swapping pred/gold matches alike
                cands.append((-v, min(ta, tb), max(ta, tb), i, j))
    cands.sort()
    used_p, used_g, out = set(), set(), []
    for negv, _, _, i, j in cands:
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        out.append((i, j, -negv))
    return out


def localization_prf(pred: Sequence[BBox], gold: Sequence[BBox], iou_thresh: float = 0.5):
    return prf(len(match_boxes(pred, gold, iou_thresh)), len(pred), len(gold))


def recognition_prf(pred: Sequence[str], gold: Sequence[str]):
    """Exact word match on multisets."""
    return prf(recognition_matches(pred, gold), len(pred), len(gold))


def recognition_matches(pred: Sequence[str], gold: Sequence[str]) -> int:
    return sum((Counter(pred) & Counter(gold)).values())


def levenshtein(a: str, b: str) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def anls(pred: str, golds: Sequence[str], tau: float = 0.5) -> float:
    """Thresholded normalised Levenshtein similarity against the closest gold answer.

    Answers are compared after stripping and lower-casing, as in the usual
    document-VQA scoring.
    """
    if not golds:
        raise ValueError("anls needs at least one gold answer")
    p = pred.strip().lower()
    best = 0.0
    for g in golds:
        g = g.strip().lower()
        denom = max(len(p), len(g))
        nl = levenshtein(p, g) / denom if denom else 0.0
        best = max(best, 1.0 - nl)
    return best if best >= tau else 0.0


def mean_anls(preds: Sequence[str], golds: Sequence[Sequence[str]], tau: float = 0.5) -> float:
    if not preds:
        return 0.0
    return sum(anls(p, g, tau) for p, g in zip(preds, golds)) / len(preds)
