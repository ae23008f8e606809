"""Answer prediction: answerability score, sentinel span distributions, losses, decoding."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

PROB_EPS = 1e-7
SENTINEL = 0


@dataclass
class PredictorWeights:
    w_s: Tensor  # (2h,)
    w_c: Tensor  # (h,)
    w_e: Tensor  # (h,)

    @classmethod
    def init(cls, rng: np.random.Generator, hidden: int, dtype=np.float32) -> "PredictorWeights":
        def vec(name, n):
            bound = 1.0 / np.sqrt(n)
            return Tensor(rng.uniform(-bound, bound, n).astype(dtype), requires_grad=True,
                          name=f"predictor.{name}")
        return cls(vec("w_s", 2 * hidden), vec("w_c", hidden), vec("w_e", hidden))

    def params(self) -> dict[str, Tensor]:
        return {"w_s": self.w_s, "w_c": self.w_c, "w_e": self.w_e}


@dataclass
class LossBreakdown:
    span: Tensor
    ans: Tensor
    joint: Tensor
    lambda1: float
    lambda2: float

    def as_floats(self) -> dict[str, float]:
        return {"L_span": float(self.span.data), "L_ans": float(self.ans.data),
                "L_joint": float(self.joint.data)}


@dataclass
class Prediction:
    score: float
    answerable: bool
    span: tuple[int, int] | None
    best_span: tuple[int, int] | None
    gamma: np.ndarray
    eta: np.ndarray
    traces: list = field(default_factory=list)
    degenerate: bool = False


def answerability_score(s: Tensor, e: Tensor, w_s: Tensor) -> Tensor:
    """Sigmoid of the linear classifier over ``[s; e]``; higher means unanswerable."""
    return T.sigmoid(T.matmul(T.concat_last([s, e]), w_s))


def span_support(mask: np.ndarray, passage_start, passage_end) -> np.ndarray:
    """Boolean (B, L): the sentinel plus each example's passage region."""
    mask = np.asarray(mask, dtype=bool)
    pos = np.arange(mask.shape[-1])
    start = np.asarray(passage_start)[..., None]
    end = np.asarray(passage_end)[..., None]
    support = (pos >= start) & (pos < end) & mask
    support[..., SENTINEL] = True
    return support


def span_distributions(fused: Tensor, support: np.ndarray, w_c: Tensor,
                       w_e: Tensor) -> tuple[Tensor, Tensor]:
    gamma = T.masked_softmax(T.matmul(fused, w_c), support)
    eta = T.masked_softmax(T.matmul(fused, w_e), support)
    return gamma, eta


def ans_loss(score: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy; label 1 marks an unanswerable question."""
    y = np.asarray(labels)
    if not np.isin(y, (0, 1)).all():
        raise ValueError(f"answerability labels must be 0 or 1, got {np.unique(y)}")
    y = y.astype(score.dtype)
    p = T.clip(score, PROB_EPS, 1.0 - PROB_EPS)
    ll = T.add(T.mul(T.log(p), y), T.mul(T.log(T.sub(1.0, p)), 1.0 - y))
    return T.neg(T.mean(ll))


def span_loss(gamma: Tensor, eta: Tensor, starts, ends, support: np.ndarray | None = None) -> Tensor:
    """Mean over the batch of ``-(log gamma[start] + log eta[end])``."""
    starts = np.asarray(starts, dtype=np.int64)
    ends = np.asarray(ends, dtype=np.int64)
    if support is not None:
        rows = np.arange(len(starts))
        bad = ~(support[rows, starts] & support[rows, ends])
        if bad.any():
            raise ValueError(f"gold span outside the span support for batch rows {np.flatnonzero(bad).tolist()}")
    ls = T.log(T.clip(T.take_along_last(gamma, starts), PROB_EPS, 1.0))
    le = T.log(T.clip(T.take_along_last(eta, ends), PROB_EPS, 1.0))
    return T.neg(T.mean(T.add(ls, le)))


def joint_loss(l_span: Tensor, l_ans: Tensor, lambda1: float = 0.7, lambda2: float = 0.3) -> LossBreakdown:
    if lambda1 < 0 or lambda2 < 0:
        raise ValueError(f"loss weights must be nonnegative, got {lambda1}, {lambda2}")
    joint = T.add(T.mul(l_span, lambda1), T.mul(l_ans, lambda2))
    return LossBreakdown(l_span, l_ans, joint, lambda1, lambda2)


def best_span(gamma: np.ndarray, eta: np.ndarray, passage_start: int, passage_end: int,
              max_answer_len: int) -> tuple[int, int] | None:
    """Feasible ``(s, e)`` maximizing ``gamma[s] * eta[e]``; ties go to the smallest (s, e)."""
    if passage_end <= passage_start or max_answer_len < 1:
        return None
    g = gamma[passage_start:passage_end]
    h = eta[passage_start:passage_end]
    n = len(g)
    scores = np.outer(g, h)
    offset = np.arange(n)[None, :] - np.arange(n)[:, None]
    scores = np.where((offset >= 0) & (offset < max_answer_len), scores, -np.inf)
    flat = int(np.argmax(scores))
    s, e = divmod(flat, n)
    return passage_start + s, passage_start + e


def decode_answer(score: float, gamma: np.ndarray, eta: np.ndarray, threshold: float,
                  max_answer_len: int, passage_region: tuple[int, int]) -> Prediction:
    span = best_span(gamma, eta, passage_region[0], passage_region[1], max_answer_len)
    answerable = bool(score <= threshold) and span is not None
    return Prediction(score=float(score), answerable=answerable,
                      span=span if answerable else None, best_span=span,
                      gamma=gamma, eta=eta, degenerate=span is None)
