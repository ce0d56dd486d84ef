"""Image encoder, text-layout decoder, LM head and the sequential layout head."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .checkpoint import load_arrays, save_arrays
from .geometry import NUM_BINS, RangeError
from .tensor import Tensor


class ConfigError(ValueError):
    pass


class MalformedInputError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    n_heads: int = 4
    enc_layers: int = 4
    dec_layers: int = 2
    patch_size: int = 16
    image_h: int = 64
    image_w: int = 64
    M: int = 64
    vocab_size: int = 91
    n_tags: int = 4
    layout_bins: int = NUM_BINS
    ffn_mult: int = 4
    # 0 turns layout modelling off: [LOC] inputs carry no coordinates and no layout loss is trained
    layout_modeling: int = 1

    def __post_init__(self):
        if self.d % 4 or self.d % self.n_heads:
            raise ConfigError("d must be divisible by 4 and by n_heads")
        if self.image_h % self.patch_size or self.image_w % self.patch_size:
            raise ConfigError("image dimensions must be divisible by patch_size")
        if self.layout_modeling not in (0, 1):
            raise ConfigError("layout_modeling must be 0 or 1")
        if self.layout_bins != NUM_BINS:
            raise ConfigError(f"layout vocabulary must have {NUM_BINS} bins")

    @property
    def num_patches(self) -> int:
        return (self.image_h // self.patch_size) * (self.image_w // self.patch_size)

    @property
    def max_len(self) -> int:
        # mode token + M entries + one position of [EOS] overflow
        return self.M + 2

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in dataclasses.asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        fields = {f.name for f in dataclasses.fields(cls)}
        kw = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            k, _, v = line.partition("=")
            k = k.strip()
            if k in fields:
                kw[k] = int(v.strip())
        return cls(**kw)


def _normal(rng, *shape):
    return rng.normal(0.0, 0.02, size=shape)


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    """Fresh parameters: N(0, 0.02) weights/embeddings, zero biases, unit LN gains."""
    rng = np.random.default_rng(seed)
    d, f = cfg.d, cfg.d * cfg.ffn_mult
    p: dict[str, np.ndarray] = {}

    def ln(prefix):
        p[prefix + ".g"] = np.ones(d)
        p[prefix + ".b"] = np.zeros(d)

    def lin(prefix, n_in, n_out, bias=True):
        p[prefix + ".w"] = _normal(rng, n_in, n_out)
        if bias:
            p[prefix + ".b"] = np.zeros(n_out)

    def attn(prefix):
        for n in ("q", "k", "v", "o"):
            lin(f"{prefix}.{n}", d, d)

    def ffn(prefix):
        lin(prefix + ".fc1", d, f)
        lin(prefix + ".fc2", f, d)

    lin("enc.patch", cfg.patch_size * cfg.patch_size, d)
    p["enc.pos"] = _normal(rng, cfg.num_patches, d)
    for i in range(cfg.enc_layers):
        ln(f"enc.{i}.ln1")
        attn(f"enc.{i}.attn")
        ln(f"enc.{i}.ln2")
        ffn(f"enc.{i}.ffn")
    ln("enc.ln_f")

    p["dec.E_w"] = _normal(rng, cfg.vocab_size, d)
    p["dec.E_x"] = _normal(rng, NUM_BINS, d // 4)
    p["dec.E_y"] = _normal(rng, NUM_BINS, d // 4)
    p["dec.pos"] = _normal(rng, cfg.max_len, d)
    for i in range(cfg.dec_layers):
        ln(f"dec.{i}.ln1")
        attn(f"dec.{i}.self")
        ln(f"dec.{i}.ln2")
        attn(f"dec.{i}.cross")
        ln(f"dec.{i}.ln3")
        ffn(f"dec.{i}.ffn")
    ln("dec.ln_f")

    lin("lm", d, cfg.vocab_size)
    p["layout.W_h"] = _normal(rng, d, d)
    p["layout.E_x"] = _normal(rng, NUM_BINS, d)
    p["layout.E_y"] = _normal(rng, NUM_BINS, d)
    p["layout.W_L"] = _normal(rng, d, NUM_BINS)
    lin("tag", d, cfg.n_tags)
    return {k: T.parameter(v, name=k) for k, v in p.items()}


# parameters only trained by the token-labelling fine-tune
FINETUNE_ONLY = ("tag.w", "tag.b")


def _linear(x: Tensor, params, prefix: str) -> Tensor:
    y = T.matmul(x, params[prefix + ".w"])
    b = params.get(prefix + ".b")
    return y if b is None else T.add(y, b)


def _ln(x: Tensor, params, prefix: str) -> Tensor:
    return T.layer_norm(x, params[prefix + ".g"], params[prefix + ".b"])


def causal_mask(n: int) -> np.ndarray:
    return np.triu(np.full((n, n), -1e9), k=1)


class Model:
    """Holds the configuration and the named parameter tensors."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor] | None = None, seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed)

    # -- persistence -----------------------------------------------------

    def save(self, directory: str | os.PathLike) -> None:
        os.makedirs(directory, exist_ok=True)
        save_arrays(os.path.join(directory, "checkpoint.bin"),
                    {k: v.data for k, v in self.params.items()})
        with open(os.path.join(directory, "model.txt"), "w") as fh:
            fh.write(self.cfg.to_text())

    @classmethod
    def load(cls, directory: str | os.PathLike) -> "Model":
        with open(os.path.join(directory, "model.txt")) as fh:
            cfg = ModelConfig.from_text(fh.read())
        arrays = load_arrays(os.path.join(directory, "checkpoint.bin"))
        fresh = init_params(cfg)
        if set(arrays) != set(fresh):
            raise ConfigError("checkpoint parameters do not match configuration")
        for k, t in fresh.items():
            if arrays[k].shape != t.shape:
                raise ConfigError(f"shape mismatch for {k}")
            t.data = arrays[k]
        return cls(cfg, fresh)

    def copy(self) -> "Model":
        return Model(self.cfg, {k: T.parameter(v.data.copy(), name=k)
                                for k, v in self.params.items()})

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    # -- attention blocks ------------------------------------------------

    def _attention(self, xq: Tensor, xkv: Tensor, prefix: str, mask: np.ndarray | None) -> Tensor:
        P = self.params
        B, Lq, d = xq.shape
        Lk = xkv.shape[1]
        h = self.cfg.n_heads
        dh = d // h

        def heads(x, L):
            return T.transpose(T.reshape(x, (B, L, h, dh)), (0, 2, 1, 3))

        q = heads(_linear(xq, P, prefix + ".q"), Lq)
        k = heads(_linear(xkv, P, prefix + ".k"), Lk)
        v = heads(_linear(xkv, P, prefix + ".v"), Lk)
        scores = T.scale(T.matmul(q, T.swap_last(k)), 1.0 / np.sqrt(dh))
        if mask is not None:
            scores = T.add_constant(scores, mask)
        ctx = T.matmul(T.softmax(scores), v)
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (B, Lq, d))
        return _linear(ctx, P, prefix + ".o")

    def _ffn(self, x: Tensor, prefix: str) -> Tensor:
        return _linear(T.gelu(_linear(x, self.params, prefix + ".fc1")), self.params, prefix + ".fc2")

    # -- encoder ---------------------------------------------------------

    def patchify(self, images: np.ndarray) -> np.ndarray:
        """``[B, H, W]`` pixels -> ``[B, patches, patch*patch]`` in row-major patch order."""
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 2:
            images = images[None]
        c = self.cfg
        if images.shape[1:] != (c.image_h, c.image_w):
            raise ConfigError(f"image shape {images.shape[1:]} != ({c.image_h}, {c.image_w})")
        B, ps = images.shape[0], c.patch_size
        gh, gw = c.image_h // ps, c.image_w // ps
        x = images.reshape(B, gh, ps, gw, ps).transpose(0, 1, 3, 2, 4)
        return x.reshape(B, gh * gw, ps * ps)

    def embed_patches(self, images: np.ndarray) -> Tensor:
        x = _linear(Tensor(self.patchify(images)), self.params, "enc.patch")
        B = x.shape[0]
        pos = T.take_rows(self.params["enc.pos"],
                          np.broadcast_to(np.arange(self.cfg.num_patches), (B, self.cfg.num_patches)))
        return T.add(x, pos)

    def encode_image(self, images: np.ndarray) -> Tensor:
        """Visual representations, ``[B, patches, d]``."""
        x = self.embed_patches(images)
        for i in range(self.cfg.enc_layers):
            y = _ln(x, self.params, f"enc.{i}.ln1")
            x = T.add(x, self._attention(y, y, f"enc.{i}.attn", None))
            x = T.add(x, self._ffn(_ln(x, self.params, f"enc.{i}.ln2"), f"enc.{i}.ffn"))
        return _ln(x, self.params, "enc.ln_f")

    # -- decoder ---------------------------------------------------------

    def loc_embedding(self, coords: np.ndarray) -> Tensor:
        """``[E_x(x1), E_y(y1), E_x(x2), E_y(y2)]`` for integer coords ``[..., 4]``."""
        coords = np.asarray(coords, dtype=np.int64)
        if coords.size and (coords.min() < 0 or coords.max() >= NUM_BINS):
            raise RangeError("coordinate bin out of range")
        P = self.params
        return T.concat([T.take_rows(P["dec.E_x"], coords[..., 0]),
                         T.take_rows(P["dec.E_y"], coords[..., 1]),
                         T.take_rows(P["dec.E_x"], coords[..., 2]),
                         T.take_rows(P["dec.E_y"], coords[..., 3])], axis=-1)

    def embed_targets(self, tokens: np.ndarray, coords: np.ndarray, is_loc: np.ndarray) -> Tensor:
        """Input embeddings: ``E_w`` for ordinary tokens, the coordinate concatenation at ``[LOC]``.

        ``tokens``/``is_loc`` are ``[B, L]``; ``coords`` is ``[B, L, 4]`` and
        only read where ``is_loc`` is set. Learned positions are added. Without
        layout modelling ``[LOC]`` is embedded like any other token.
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        is_loc = np.asarray(is_loc, dtype=bool) & bool(self.cfg.layout_modeling)
        B, L = tokens.shape
        if L > self.cfg.max_len:
            raise MalformedInputError(f"sequence length {L} exceeds {self.cfg.max_len}")
        coords = np.where(is_loc[..., None], np.asarray(coords, dtype=np.int64), 0)
        w = T.take_rows(self.params["dec.E_w"], tokens)
        m = is_loc[..., None].astype(np.float64)
        x = T.add(T.mul(w, Tensor(np.broadcast_to(1.0 - m, w.shape))),
                  T.mul(self.loc_embedding(coords), Tensor(np.broadcast_to(m, w.shape))))
        pos = T.take_rows(self.params["dec.pos"], np.broadcast_to(np.arange(L), (B, L)))
        return T.add(x, pos)

    def decode(self, hv: Tensor, htl: Tensor) -> Tensor:
        """Causal self-attention, cross-attention to ``hv``, feed-forward; pre-norm."""
        L = htl.shape[1]
        mask = causal_mask(L)
        x = htl
        P = self.params
        for i in range(self.cfg.dec_layers):
            y = _ln(x, P, f"dec.{i}.ln1")
            x = T.add(x, self._attention(y, y, f"dec.{i}.self", mask))
            x = T.add(x, self._attention(_ln(x, P, f"dec.{i}.ln2"), hv, f"dec.{i}.cross", None))
            x = T.add(x, self._ffn(_ln(x, P, f"dec.{i}.ln3"), f"dec.{i}.ffn"))
        return _ln(x, P, "dec.ln_f")

    def lm_logits(self, h: Tensor) -> Tensor:
        return _linear(h, self.params, "lm")

    def tag_logits(self, h: Tensor) -> Tensor:
        return _linear(h, self.params, "tag")

    # -- sequential layout head -------------------------------------------

    def layout_head(self, h0: Tensor, teacher: np.ndarray | None = None):
        """Expand ``[N, d]`` hidden states at ``[LOC]`` into four coordinate logits.

        With ``teacher`` (``[N, 4]`` gold bins) the chain is teacher forced and the
        list of four ``[N, 1001]`` logit tensors is returned. Without it each
        step feeds back its own argmax; returns ``(logits, coords)``.
        """
        P = self.params
        if teacher is not None:
            teacher = np.asarray(teacher, dtype=np.int64)
            if teacher.size and (teacher.min() < 0 or teacher.max() >= NUM_BINS):
                raise RangeError("teacher coordinate out of range")
        tables = (P["layout.E_x"], P["layout.E_y"], P["layout.E_x"])
        logits = []
        chosen = []
        h = T.gelu(T.matmul(h0, P["layout.W_h"]))
        for j in range(4):
            if j > 0:
                prev = teacher[:, j - 1] if teacher is not None else chosen[-1]
                h = T.gelu(T.add(T.matmul(h, P["layout.W_h"]), T.take_rows(tables[j - 1], prev)))
            lg = T.matmul(h, P["layout.W_L"])
            logits.append(lg)
            if teacher is None:
                chosen.append(np.argmax(lg.data, axis=-1))
        if teacher is not None:
            return logits
        return logits, np.stack(chosen, axis=-1)
