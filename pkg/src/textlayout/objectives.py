"""Training objectives, batching and the AdamW optimiser."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from . import tensor as T
from .codec import Vocabulary
from .model import Model
from .segmenter import Segment
from .tensor import Tensor


@dataclass
class DecoderBatch:
    """Padded decoder inputs and position-aligned labels for a list of segments.

    Input position ``t`` holds ``([mode] + stream)[t]`` and is trained to
    predict ``stream[t]``, where ``stream = prefix + targets``. A segment that
    is not the last of its document gets one more position labelled with its
    boundary entry, so the slot where a full segment would place ``[EOS]``
    also learns when to continue instead.
    """

    images: np.ndarray        # [B, H, W]
    tokens: np.ndarray        # [B, L] input ids
    coords: np.ndarray        # [B, L, 4] input coordinates (valid at [LOC])
    is_loc: np.ndarray        # [B, L]
    labels: np.ndarray        # [B, L] next-token ids
    label_coords: np.ndarray  # [B, L, 4]
    label_is_loc: np.ndarray  # [B, L]
    loss_mask: np.ndarray     # [B, L]

    @property
    def layout_mask(self) -> np.ndarray:
        return self.loss_mask & self.label_is_loc


def segment_batch(segments: Sequence[Segment], images: Sequence[np.ndarray],
                  vocab: Vocabulary) -> DecoderBatch:
    if len(segments) != len(images):
        raise ValueError("one image per segment is required")
    streams = [s.prefix + s.targets for s in segments]
    lengths = [len(st) + (s.boundary is not None) for s, st in zip(segments, streams)]
    L = max(lengths)
    B = len(segments)
    tokens = np.full((B, L), vocab.pad, dtype=np.int64)
    coords = np.zeros((B, L, 4), dtype=np.int64)
    labels = np.full((B, L), vocab.pad, dtype=np.int64)
    lcoords = np.zeros((B, L, 4), dtype=np.int64)
    mask = np.zeros((B, L), dtype=bool)
    for b, (seg, stream) in enumerate(zip(segments, streams)):
        inputs = [(seg.mode_token, None)] + stream[:-1]
        if seg.boundary is not None:
            inputs = inputs + stream[-1:]
            stream = stream + [seg.boundary]
        for t, (tok, c) in enumerate(inputs):
            tokens[b, t] = tok
            if c is not None:
                coords[b, t] = c
        for t, (tok, c) in enumerate(stream):
            labels[b, t] = tok
            if c is not None:
                lcoords[b, t] = c
        mask[b, len(seg.prefix):len(stream)] = True
    return DecoderBatch(np.stack([np.asarray(im, dtype=np.float64) for im in images]),
                        tokens, coords, tokens == vocab.loc, labels, lcoords,
                        labels == vocab.loc, mask)


@dataclass
class LossBreakdown:
    global_text: Tensor
    local_layout: Tensor
    total: Tensor
    counts: tuple[int, int]

    def values(self) -> dict[str, float]:
        return {"global_text": self.global_text.item(), "local_layout": self.local_layout.item(),
                "total": self.total.item()}


def global_text_loss(logits: Tensor, targets: np.ndarray, loss_mask: np.ndarray) -> Tensor:
    """Mean cross-entropy over the loss positions."""
    if not np.any(loss_mask):
        raise ValueError("loss mask selects no positions")
    return T.cross_entropy(logits, targets, loss_mask)


def local_layout_loss(layout_logits: Sequence[Tensor], coords: np.ndarray) -> Tensor:
    """``-1/(4|S_L|) * sum log p`` over the four teacher-forced coordinate steps."""
    coords = np.asarray(coords, dtype=np.int64)
    if coords.shape[0] == 0:
        return Tensor(0.0)
    stacked = T.concat(list(layout_logits), axis=0)
    return T.cross_entropy(stacked, np.concatenate([coords[:, j] for j in range(4)]))


def forward_hidden(model: Model, batch: DecoderBatch) -> Tensor:
    hv = model.encode_image(batch.images)
    htl = model.embed_targets(batch.tokens, batch.coords, batch.is_loc)
    return model.decode(hv, htl)


def total_loss(model: Model, batch: DecoderBatch, use_layout: bool | None = None) -> LossBreakdown:
    """Global text loss plus local layout loss (teacher forced).

    ``use_layout`` defaults to the model's ``layout_modeling`` setting.
    """
    if use_layout is None:
        use_layout = bool(model.cfg.layout_modeling)
    h = forward_hidden(model, batch)
    logits = model.lm_logits(h)
    gt = global_text_loss(logits, batch.labels, batch.loss_mask)
    sel = np.flatnonzero(batch.layout_mask.reshape(-1))
    if use_layout and sel.size:
        d = h.shape[-1]
        h0 = T.take_rows(T.reshape(h, (-1, d)), sel)
        teacher = batch.label_coords.reshape(-1, 4)[sel]
        ll = local_layout_loss(model.layout_head(h0, teacher), teacher)
    else:
        ll = Tensor(0.0)
    total = T.add(gt, ll)
    return LossBreakdown(gt, ll, total, (int(batch.loss_mask.sum()), int(sel.size) if use_layout else 0))


# ---------------------------------------------------------------------------
# fine-tuning objectives


TASKS = ("token_label", "doc_cls", "vqa")


def doc_cls_loss(model: Model, batch: DecoderBatch, vocab: Vocabulary) -> Tensor:
    """Cross-entropy over class-token logits at the position after ``[DOC_CLS]``."""
    h = forward_hidden(model, batch)
    cls_ids = np.asarray(vocab.class_ids)
    logits = model.lm_logits(h)
    B, L, V = logits.shape
    rows = T.take_rows(T.reshape(logits, (B * L, V)), np.arange(B) * L)
    sub = T.matmul(rows, Tensor(np.eye(V)[:, cls_ids]))
    if not np.all(np.isin(batch.labels[:, 0], cls_ids)):
        raise ValueError("doc_cls labels must be class tokens")
    target = np.searchsorted(cls_ids, batch.labels[:, 0])
    return T.cross_entropy(sub, target)


@dataclass
class LabelBatch:
    """Teacher-provided decoder inputs with one tag target per ``[LOC]`` in the targets."""

    images: np.ndarray
    tokens: np.ndarray
    coords: np.ndarray
    is_loc: np.ndarray
    positions: np.ndarray   # flat indices into [B * L] of word-final ([LOC]) inputs
    tags: np.ndarray        # tag per position (-1 when unknown at inference)


def label_batch(segments: Sequence[Segment], images: Sequence[np.ndarray], tags: Sequence[Sequence[int]],
                vocab: Vocabulary) -> LabelBatch:
    """Inputs are ``[mode] + prefix + targets`` (``[EOS]`` dropped); tags are read at the
    ``[LOC]`` entries of the targets, so each word is labelled in exactly one segment."""
    streams = []
    for seg in segments:
        tg = [e for e in seg.targets if e[0] != vocab.eos]
        streams.append([(seg.mode_token, None)] + seg.prefix + tg)
    L = max(len(s) for s in streams)
    B = len(segments)
    tokens = np.full((B, L), vocab.pad, dtype=np.int64)
    coords = np.zeros((B, L, 4), dtype=np.int64)
    positions, out_tags = [], []
    for b, (seg, stream, seg_tags) in enumerate(zip(segments, streams, tags)):
        k = 0
        for t, (tok, c) in enumerate(stream):
            tokens[b, t] = tok
            if c is not None:
                coords[b, t] = c
            if tok == vocab.loc and t > len(seg.prefix):
                positions.append(b * L + t)
                out_tags.append(seg_tags[k] if k < len(seg_tags) else -1)
                k += 1
        if k != len(seg_tags) and len(seg_tags):
            raise ValueError(f"segment {b}: {k} words but {len(seg_tags)} tags")
    return LabelBatch(np.stack([np.asarray(im, dtype=np.float64) for im in images]),
                      tokens, coords, tokens == vocab.loc,
                      np.asarray(positions, dtype=np.int64), np.asarray(out_tags, dtype=np.int64))


def label_hidden(model: Model, batch: LabelBatch) -> Tensor:
    hv = model.encode_image(batch.images)
    h = model.decode(hv, model.embed_targets(batch.tokens, batch.coords, batch.is_loc))
    return T.take_rows(T.reshape(h, (-1, h.shape[-1])), batch.positions)


def token_label_loss(model: Model, batch: LabelBatch) -> Tensor:
    return T.cross_entropy(model.tag_logits(label_hidden(model, batch)), batch.tags)


def finetune_losses(task: str, model: Model, batch, vocab: Vocabulary) -> Tensor:
    if task == "token_label":
        return token_label_loss(model, batch)
    if task == "doc_cls":
        return doc_cls_loss(model, batch, vocab)
    if task == "vqa":
        return total_loss(model, batch).total
    raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")


# ---------------------------------------------------------------------------
# optimiser


class NonFiniteGradientError(FloatingPointError):
    pass


class AdamW:
    """AdamW with decoupled weight decay and a cosine learning-rate decay to zero."""

    def __init__(self, params: dict[str, Tensor], lr: float = 3e-3, weight_decay: float = 1e-2,
                 horizon: int = 1000, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.base_lr = lr
        self.weight_decay = weight_decay
        self.horizon = max(1, horizon)
        self.b1, self.b2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def lr_at(self, step: int) -> float:
        """Learning rate for the update following ``step`` completed updates."""
        s = min(step, self.horizon)
        return self.base_lr * 0.5 * (1.0 + math.cos(math.pi * s / self.horizon))

    def step(self) -> float:
        bad = [k for k, p in self.params.items()
               if p.grad is not None and not np.all(np.isfinite(p.grad))]
        if bad:
            raise NonFiniteGradientError(f"non-finite gradient in {', '.join(bad[:5])}; step rejected")
        lr = self.lr_at(self.step_count)
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.b1 ** t
        c2 = 1.0 - self.b2 ** t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return lr


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainRecord:
    step: int
    lr: float
    global_text: float
    local_layout: float
    total: float

    def line(self) -> str:
        return (f"step={self.step} lr={self.lr:.6e} global_text={self.global_text:.10f} "
                f"local_layout={self.local_layout:.10f} total={self.total:.10f}")


def parse_log_line(line: str) -> dict[str, float]:
    out = {}
    for part in line.split():
        k, _, v = part.partition("=")
        out[k] = int(v) if k == "step" else float(v)
    return out


def epoch_sampler(n: int, batch_size: int, rng: np.random.Generator) -> Iterable[list[int]]:
    """Uniform over items: shuffled passes, batches may wrap into the next pass."""
    order: list[int] = []
    while True:
        while len(order) < batch_size:
            order.extend(rng.permutation(n).tolist())
        yield order[:batch_size]
        order = order[batch_size:]


def train(model: Model, make_loss: Callable[[list[int]], LossBreakdown | Tensor], n_items: int,
          steps: int, batch_size: int = 8, lr: float = 3e-3, weight_decay: float = 1e-2,
          seed: int = 0, log: Callable[[TrainRecord], None] | None = None,
          params: dict[str, Tensor] | None = None) -> list[TrainRecord]:
    """Run ``steps`` AdamW updates; ``make_loss`` maps item indices to a loss."""
    params = params if params is not None else model.params
    opt = AdamW(params, lr=lr, weight_decay=weight_decay, horizon=steps)
    rng = np.random.default_rng(seed)
    sampler = epoch_sampler(n_items, min(batch_size, n_items), rng)
    history = []
    for step in range(steps):
        model.zero_grad()
        out = make_loss(next(sampler))
        if isinstance(out, LossBreakdown):
            loss, gt, ll = out.total, out.global_text.item(), out.local_layout.item()
        else:
            loss, gt, ll = out, out.item(), 0.0
        loss.backward()
        cur = opt.step()
        rec = TrainRecord(step + 1, cur, gt, ll, loss.item())
        history.append(rec)
        if log is not None:
            log(rec)
    return history
