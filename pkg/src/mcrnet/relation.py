"""Co-interactive relation module.

Each relation block runs a start sub-block then an end sub-block. The start
sub-block enhances every position with the current start clue, rereads the
question to weight positions, and pools a new start clue. The end sub-block
does the same with the fresh start clue and the previous end clue in its
input. After ``steps`` blocks the final clues are fused back into every
position.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class RelationConfig:
    hidden: int = 64
    steps: int = 2
    share_weights: bool = True

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")


@dataclass
class ClueState:
    s: Tensor  # (B, h) or (h,)
    e: Tensor


@dataclass
class StepTrace:
    step: int
    alpha: np.ndarray  # (B, L)
    beta: np.ndarray


@dataclass
class BlockWeights:
    start_w: Tensor   # (2h, h)
    start_b: Tensor
    end_w: Tensor     # (3h, h)
    end_b: Tensor
    logit_w: Tensor   # scalar affine on end logits
    logit_b: Tensor


@dataclass
class RelationOutput:
    s: Tensor
    e: Tensor
    fused: Tensor                       # (B, L, h)
    traces: list[StepTrace] = field(default_factory=list)
    alphas: list[Tensor] = field(default_factory=list)
    betas: list[Tensor] = field(default_factory=list)


def init_clues(rng: np.random.Generator, hidden: int, dtype=np.float32) -> ClueState:
    s = Tensor(rng.uniform(-0.1, 0.1, hidden).astype(dtype), requires_grad=True, name="clue_s0")
    e = Tensor(rng.uniform(-0.1, 0.1, hidden).astype(dtype), requires_grad=True, name="clue_e0")
    return ClueState(s, e)


def _tile(v: Tensor, L: int) -> Tensor:
    B, h = v.shape
    return T.broadcast_to(T.reshape(v, (B, 1, h)), (B, L, h))


def start_subblock(s: Tensor, p: Tensor, q_cls: Tensor, mask: np.ndarray,
                   w: BlockWeights) -> tuple[Tensor, Tensor, Tensor]:
    """Returns ``(alpha, s_next, p_hat)`` with shapes (B, L), (B, h), (B, L, h)."""
    L = p.shape[1]
    p_hat = T.relu(T.affine(T.concat_last([_tile(s, L), p]), w.start_w, w.start_b))
    alpha = T.masked_softmax(T.row_dot(p_hat, q_cls), mask)
    return alpha, T.weighted_sum(alpha, p_hat), p_hat


def end_subblock(s_next: Tensor, e: Tensor, p: Tensor, q_cls: Tensor, mask: np.ndarray,
                 w: BlockWeights) -> tuple[Tensor, Tensor, Tensor]:
    """Returns ``(beta, e_next, p_hat)``; the start clue just produced is part of the input."""
    L = p.shape[1]
    p_hat = T.relu(T.affine(T.concat_last([_tile(s_next, L), _tile(e, L), p]), w.end_w, w.end_b))
    z = T.row_dot(p_hat, q_cls)
    beta = T.masked_softmax(T.add(T.mul(z, w.logit_w), w.logit_b), mask)
    return beta, T.weighted_sum(beta, p_hat), p_hat


def fuse(p: Tensor, s: Tensor, e: Tensor, weights: list[Tensor]) -> Tensor:
    """``[p_t; s; e] @ W`` with ``W`` given as its three (h, h) row blocks."""
    w_p, w_s, w_e = weights
    clue = T.add(T.matmul(s, w_s), T.matmul(e, w_e))
    return T.add(T.matmul(p, w_p), T.reshape(clue, (clue.shape[0], 1, clue.shape[1])))


class RelationModule:
    def __init__(self, config: RelationConfig, rng: np.random.Generator, dtype=np.float32):
        self.config = config
        h = config.hidden
        self.params: dict[str, Tensor] = {}
        clues = init_clues(rng, h, dtype)
        self.s0 = self._register("s0", clues.s)
        self.e0 = self._register("e0", clues.e)

        def lin(name, fan_in, fan_out):
            bound = 1.0 / np.sqrt(fan_in)
            return self._register(name, Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)).astype(dtype),
                                               requires_grad=True))

        def zeros(name, shape):
            return self._register(name, Tensor(np.zeros(shape, dtype=dtype), requires_grad=True))

        n_blocks = 1 if config.share_weights else config.steps
        self.blocks: list[BlockWeights] = []
        for i in range(n_blocks):
            pre = "block" if config.share_weights else f"block{i}"
            self.blocks.append(BlockWeights(
                start_w=lin(f"{pre}.start_w", 2 * h, h), start_b=zeros(f"{pre}.start_b", (h,)),
                end_w=lin(f"{pre}.end_w", 3 * h, h), end_b=zeros(f"{pre}.end_b", (h,)),
                logit_w=self._register(f"{pre}.logit_w", Tensor(np.ones((), dtype=dtype), requires_grad=True)),
                logit_b=zeros(f"{pre}.logit_b", ()),
            ))
        # fusion weight stored as its p / s / e row blocks; no bias, which would
        # shift every span logit equally
        bound = 1.0 / np.sqrt(3 * h)
        self.fuse = [self._register(f"fuse_{part}", Tensor(rng.uniform(-bound, bound, (h, h)).astype(dtype),
                                                          requires_grad=True))
                     for part in ("p", "s", "e")]

    def _register(self, name: str, t: Tensor) -> Tensor:
        t.name = f"relation.{name}"
        self.params[name] = t
        return t

    def block(self, j: int) -> BlockWeights:
        return self.blocks[0 if self.config.share_weights else j]

    def forward(self, p: Tensor, q_cls: Tensor, mask: np.ndarray) -> RelationOutput:
        B, L, h = p.shape
        s = T.broadcast_to(self.s0, (B, h))
        e = T.broadcast_to(self.e0, (B, h))
        out = RelationOutput(s, e, p)
        for j in range(self.config.steps):
            w = self.block(j)
            alpha, s, _ = start_subblock(s, p, q_cls, mask, w)
            beta, e, _ = end_subblock(s, e, p, q_cls, mask, w)
            out.alphas.append(alpha)
            out.betas.append(beta)
            out.traces.append(StepTrace(j, alpha.data.copy(), beta.data.copy()))
        out.s, out.e = s, e
        out.fused = fuse(p, s, e, self.fuse)
        return out


def run_module(p: Tensor, q_cls: Tensor, mask: np.ndarray, module: RelationModule) -> RelationOutput:
    return module.forward(p, q_cls, mask)
