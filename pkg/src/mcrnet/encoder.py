"""Tokenization and the small transformer contextual encoder.

One encoder, two passes: the joint pass over ``[CLS] q [SEP] p [SEP]``
gives per-position passage-aware vectors, and the question-only pass over
``[CLS] q [SEP]`` gives the question summary read off the ``[CLS]`` row.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

PAD, UNK, CLS, SEP = "[PAD]", "[UNK]", "[CLS]", "[SEP]"
RESERVED = (PAD, UNK, CLS, SEP)
PAD_ID, UNK_ID, CLS_ID, SEP_ID = range(4)

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


def tokenize_with_offsets(text: str) -> tuple[list[str], list[tuple[int, int]]]:
    """Lowercased word/punctuation tokens plus their ``[start, end)`` char spans."""
    tokens, offsets = [], []
    for m in _TOKEN_RE.finditer(text):
        tokens.append(m.group().lower())
        offsets.append((m.start(), m.end()))
    return tokens, offsets


class Vocab:
    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK_ID)

    def ids(self, tokens: Sequence[str]) -> list[int]:
        return [self.stoi.get(t, UNK_ID) for t in tokens]

    def tokens(self, ids: Sequence[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    @classmethod
    def build(cls, texts: Iterable[str], min_count: int = 1) -> "Vocab":
        counts: Counter[str] = Counter()
        for text in texts:
            counts.update(tokenize_with_offsets(text)[0])
        kept = sorted((t for t, c in counts.items() if c >= min_count and t not in RESERVED),
                      key=lambda t: (-counts[t], t))
        return cls(kept)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.itos), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        if tuple(lines[:4]) != RESERVED:
            raise ValueError(f"{path}: vocab must start with {RESERVED}")
        return cls(lines[4:])


def tokenize(text: str, vocab: Vocab) -> tuple[list[int], list[tuple[int, int]]]:
    tokens, offsets = tokenize_with_offsets(text)
    return vocab.ids(tokens), offsets


@dataclass
class EncoderConfig:
    vocab_size: int
    hidden: int = 64
    layers: int = 2
    heads: int = 4
    max_len: int = 128
    dropout: float = 0.1
    ffn_mult: int = 4

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError(f"hidden size {self.hidden} not divisible by {self.heads} heads")
        if self.max_len < 4:
            raise ValueError("max_len must leave room for [CLS] q [SEP] p [SEP]")


# ---------------------------------------------------------------------------
# input layout


@dataclass
class JointInputs:
    ids: np.ndarray            # (B, L) int
    mask: np.ndarray           # (B, L) bool, False exactly on padding
    passage_start: np.ndarray  # (B,) first passage position
    passage_end: np.ndarray    # (B,) one past the last passage position
    truncated: np.ndarray      # (B,) bool


def fit_lengths(m: int, n: int, max_len: int) -> tuple[int, int]:
    """Question/passage token counts that fit ``m + n + 3 <= max_len``; passage tail goes first."""
    n_fit = min(n, max(max_len - m - 3, 0))
    m_fit = min(m, max_len - n_fit - 3)
    return m_fit, n_fit


def joint_layout(questions: Sequence[Sequence[int]], passages: Sequence[Sequence[int]],
                 max_len: int) -> JointInputs:
    rows, starts, ends, flags = [], [], [], []
    for q, p in zip(questions, passages):
        m, n = fit_lengths(len(q), len(p), max_len)
        flags.append(m < len(q) or n < len(p))
        rows.append([CLS_ID, *q[:m], SEP_ID, *p[:n], SEP_ID])
        starts.append(m + 2)
        ends.append(m + 2 + n)
    width = max(len(r) for r in rows)
    ids = np.full((len(rows), width), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(rows), width), dtype=bool)
    for i, r in enumerate(rows):
        ids[i, :len(r)] = r
        mask[i, :len(r)] = True
    return JointInputs(ids, mask, np.array(starts), np.array(ends), np.array(flags))


def question_layout(questions: Sequence[Sequence[int]], max_len: int) -> tuple[np.ndarray, np.ndarray]:
    rows = [[CLS_ID, *q[:max_len - 2], SEP_ID] for q in questions]
    width = max(len(r) for r in rows)
    ids = np.full((len(rows), width), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(rows), width), dtype=bool)
    for i, r in enumerate(rows):
        ids[i, :len(r)] = r
        mask[i, :len(r)] = True
    return ids, mask


# ---------------------------------------------------------------------------
# transformer


def _init(rng: np.random.Generator, shape, dtype, std: float) -> np.ndarray:
    return (rng.standard_normal(shape) * std).astype(dtype)


def transformer_layer(x: Tensor, mask: np.ndarray, w: dict[str, Tensor], heads: int,
                      dropout: float = 0.0, rng: np.random.Generator | None = None,
                      training: bool = False) -> tuple[Tensor, Tensor]:
    """Post-norm self-attention block. Returns the new states and the (B, H, L, L) attention.

    Padded positions are excluded as keys, and their own attention rows are
    zeroed so they never attend either.
    """
    B, L, h = x.shape
    d = h // heads

    def split_heads(t: Tensor) -> Tensor:
        return T.transpose(T.reshape(t, (B, L, heads, d)), (0, 2, 1, 3))

    qh = split_heads(T.affine(x, w["q_w"], w["q_b"]))
    # a key bias only shifts each score row by a constant, which softmax ignores
    kh = split_heads(T.affine(x, w["k_w"]))
    vh = split_heads(T.affine(x, w["v_w"], w["v_b"]))
    scores = T.mul(T.matmul(qh, T.transpose(kh, (0, 1, 3, 2))), 1.0 / math.sqrt(d))
    key_mask = mask[:, None, None, :]
    probs = T.masked_softmax(scores, key_mask)
    probs = T.mul(probs, Tensor(mask[:, None, :, None].astype(x.dtype)))
    ctx = T.matmul(T.dropout(probs, dropout, rng, training), vh)
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (B, L, h))
    attn_out = T.dropout(T.affine(ctx, w["out_w"], w["out_b"]), dropout, rng, training)
    x = T.layer_norm(T.add(x, attn_out), w["ln1_g"], w["ln1_b"])
    ff = T.relu(T.affine(x, w["ff1_w"], w["ff1_b"]))
    ff = T.dropout(T.affine(ff, w["ff2_w"], w["ff2_b"]), dropout, rng, training)
    x = T.layer_norm(T.add(x, ff), w["ln2_g"], w["ln2_b"])
    return x, probs


class Encoder:
    def __init__(self, config: EncoderConfig, rng: np.random.Generator, dtype=np.float32,
                 init_std: float = 0.02):
        self.config = config
        h, f = config.hidden, config.hidden * config.ffn_mult
        self.params: dict[str, Tensor] = {}

        def param(name, arr):
            t = Tensor(arr, requires_grad=True, name=name)
            self.params[name] = t
            return t

        param("tok_emb", _init(rng, (config.vocab_size, h), dtype, init_std))
        param("pos_emb", _init(rng, (config.max_len, h), dtype, init_std))
        self.layer_weights: list[dict[str, Tensor]] = []
        shapes = {"q_w": (h, h), "q_b": (h,), "k_w": (h, h), "v_w": (h, h), "v_b": (h,), "out_w": (h, h), "out_b": (h,),
                  "ln1_g": (h,), "ln1_b": (h,), "ff1_w": (h, f), "ff1_b": (f,),
                  "ff2_w": (f, h), "ff2_b": (h,), "ln2_g": (h,), "ln2_b": (h,)}
        for i in range(config.layers):
            lw = {}
            for key, shape in shapes.items():
                if key.startswith("ln") and key.endswith("_g"):
                    arr = np.ones(shape, dtype=dtype)
                elif key.endswith("_b"):
                    arr = np.zeros(shape, dtype=dtype)
                else:
                    arr = _init(rng, shape, dtype, init_std if init_std else 1.0 / math.sqrt(shape[0]))
                lw[key] = param(f"layer{i}.{key}", arr)
            self.layer_weights.append(lw)

    def forward(self, ids: np.ndarray, mask: np.ndarray, training: bool = False,
                rng: np.random.Generator | None = None,
                return_attention: bool = False):
        B, L = ids.shape
        if L > self.config.max_len:
            raise T.ShapeError(f"sequence length {L} exceeds max_len {self.config.max_len}")
        pos = T.embedding(self.params["pos_emb"], np.arange(L))
        x = T.add(T.embedding(self.params["tok_emb"], ids), pos)
        x = T.dropout(x, self.config.dropout, rng, training)
        attentions = []
        for lw in self.layer_weights:
            x, probs = transformer_layer(x, mask, lw, self.config.heads, self.config.dropout,
                                         rng, training)
            attentions.append(probs)
        return (x, attentions) if return_attention else x

    def encode_joint(self, joint: JointInputs, training: bool = False,
                     rng: np.random.Generator | None = None) -> Tensor:
        return self.forward(joint.ids, joint.mask, training, rng)

    def encode_question(self, ids: np.ndarray, mask: np.ndarray, training: bool = False,
                        rng: np.random.Generator | None = None) -> Tensor:
        return self.forward(ids, mask, training, rng)[:, 0, :]
