"""The full reader: encoder -> relation module -> answer predictor."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import Batch
from .encoder import Encoder, EncoderConfig
from .predictor import (LossBreakdown, PredictorWeights, answerability_score, ans_loss, joint_loss,
                        span_distributions, span_loss, span_support)
from .relation import RelationConfig, RelationModule, RelationOutput
from .tensor import Tensor


@dataclass
class ModelConfig:
    vocab_size: int
    hidden: int = 64
    layers: int = 2
    heads: int = 4
    max_len: int = 128
    dropout: float = 0.1
    steps: int = 2
    share_weights: bool = True
    init_std: float = 0.02


@dataclass
class ModelOutput:
    score: Tensor        # (B,) unanswerable probability
    gamma: Tensor        # (B, L)
    eta: Tensor
    support: np.ndarray  # (B, L) span support
    relation: RelationOutput


class MCRNet:
    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = T.make_rng(seed)
        self.encoder = Encoder(EncoderConfig(config.vocab_size, config.hidden, config.layers, config.heads,
                                             config.max_len, config.dropout), rng, self.dtype, config.init_std)
        self.relation = RelationModule(RelationConfig(config.hidden, config.steps, config.share_weights),
                                       rng, self.dtype)
        self.predictor = PredictorWeights.init(rng, config.hidden, self.dtype)

    def named_parameters(self) -> dict[str, Tensor]:
        out = {f"encoder.{k}": v for k, v in self.encoder.params.items()}
        out.update({f"relation.{k}": v for k, v in self.relation.params.items()})
        out.update({f"predictor.{k}": v for k, v in self.predictor.params().items()})
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def forward(self, batch: Batch, training: bool = False,
                rng: np.random.Generator | None = None) -> ModelOutput:
        joint = batch.joint
        p = self.encoder.encode_joint(joint, training, rng)
        q_cls = self.encoder.encode_question(batch.question_ids, batch.question_mask, training, rng)
        rel = self.relation.forward(p, q_cls, joint.mask)
        score = answerability_score(rel.s, rel.e, self.predictor.w_s)
        support = span_support(joint.mask, joint.passage_start, joint.passage_end)
        gamma, eta = span_distributions(rel.fused, support, self.predictor.w_c, self.predictor.w_e)
        return ModelOutput(score, gamma, eta, support, rel)

    def loss(self, out: ModelOutput, batch: Batch, lambda1: float = 0.7,
             lambda2: float = 0.3) -> LossBreakdown:
        l_span = span_loss(out.gamma, out.eta, batch.starts, batch.ends, out.support)
        l_ans = ans_loss(out.score, batch.labels)
        return joint_loss(l_span, l_ans, lambda1, lambda2)
