"""Training loop, batched inference and evaluation on top of ``MCRNet``."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, save_checkpoint
from .config import RunConfig
from .data import ProcessedExample, make_batches
from .metrics import EvalReport, GoldRecord, PredictionRecord, evaluate_dataset
from .model import MCRNet, ModelConfig
from .predictor import Prediction, decode_answer

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    pass


def model_config(cfg: RunConfig, vocab_size: int) -> ModelConfig:
    return ModelConfig(vocab_size=vocab_size, hidden=cfg.hidden, layers=cfg.layers, heads=cfg.heads,
                       max_len=cfg.max_len, dropout=cfg.dropout, steps=cfg.steps,
                       share_weights=cfg.share_weights, init_std=cfg.init_std)


def build_model(cfg: RunConfig, vocab_size: int) -> MCRNet:
    return MCRNet(model_config(cfg, vocab_size), seed=cfg.seed, dtype=np.dtype(cfg.dtype))


def to_checkpoint(model: MCRNet, cfg: RunConfig, step: int) -> Checkpoint:
    params = {k: v.data.astype(np.float32) for k, v in model.named_parameters().items()}
    return Checkpoint(cfg, model.config.vocab_size, params, step=step, seed=cfg.seed)


def from_checkpoint(ckpt: Checkpoint, dtype=np.float32) -> MCRNet:
    model = build_model(ckpt.config.replace(dtype=np.dtype(dtype).name), ckpt.vocab_size)
    named = model.named_parameters()
    if set(named) != set(ckpt.params):
        missing = sorted(set(named) ^ set(ckpt.params))
        raise ValueError(f"checkpoint/model parameter mismatch: {missing[:5]}")
    for name, t in named.items():
        if t.shape != ckpt.params[name].shape:
            raise ValueError(f"shape mismatch for {name}: {t.shape} vs {ckpt.params[name].shape}")
        t.data = ckpt.params[name].astype(model.dtype)
    return model


# ---------------------------------------------------------------------------
# inference


def predict(model: MCRNet, examples: Sequence[ProcessedExample], threshold: float = 0.3,
            max_answer_len: int = 30, batch_size: int = 64) -> list[Prediction]:
    out: list[Prediction] = []
    with T.no_grad():
        for batch in make_batches(examples, batch_size, model.config.max_len):
            res = model.forward(batch, training=False)
            for i, ex in enumerate(batch.examples):
                L = len(ex.question_ids) + len(ex.passage_ids) + 3
                pred = decode_answer(float(res.score.data[i]), res.gamma.data[i, :L], res.eta.data[i, :L],
                                     threshold, max_answer_len, (ex.passage_start, ex.passage_end))
                pred.traces = [(tr.alpha[i, :L].copy(), tr.beta[i, :L].copy()) for tr in res.relation.traces]
                out.append(pred)
    return out


def to_records(examples: Sequence[ProcessedExample], preds: Sequence[Prediction]) -> list[PredictionRecord]:
    records = []
    for ex, p in zip(examples, preds):
        best = ex.span_text(*p.best_span) if p.best_span else None
        if p.answerable:
            s, e = p.span
            records.append(PredictionRecord(ex.id, p.score, best, s - ex.passage_start,
                                            e - ex.passage_start, best_text=best))
        else:
            records.append(PredictionRecord(ex.id, p.score, None, None, None, best_text=best))
    return records


def golds_from_processed(examples: Sequence[ProcessedExample]) -> list[GoldRecord]:
    return [GoldRecord(ex.id, list(ex.gold_texts), bool(ex.label)) for ex in examples]


def evaluate_model(model: MCRNet, examples: Sequence[ProcessedExample], cfg: RunConfig,
                   threshold: float | None = None) -> tuple[EvalReport, list[PredictionRecord]]:
    thr = cfg.threshold if threshold is None else threshold
    preds = predict(model, examples, thr, cfg.max_answer_len)
    records = to_records(examples, preds)
    return evaluate_dataset(records, golds_from_processed(examples), thr), records


def answerability_accuracy(records: Sequence[PredictionRecord], examples: Sequence[ProcessedExample],
                           threshold: float) -> float:
    hits = [(r.score > threshold) == bool(ex.label) for r, ex in zip(records, examples)]
    return float(np.mean(hits)) if hits else 0.0


def mean_loss(model: MCRNet, examples: Sequence[ProcessedExample], cfg: RunConfig) -> dict[str, float]:
    examples = [ex for ex in examples if ex.trainable]
    totals = {"L_span": 0.0, "L_ans": 0.0, "L_joint": 0.0}
    with T.no_grad():
        for batch in make_batches(examples, cfg.batch_size, cfg.max_len):
            parts = model.loss(model.forward(batch), batch, cfg.lambda1, cfg.lambda2).as_floats()
            for k in totals:
                totals[k] += parts[k] * len(batch)
    n = max(len(examples), 1)
    return {k: v / n for k, v in totals.items()}


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: MCRNet
    steps: int
    history: list[dict] = field(default_factory=list)
    best_dev: EvalReport | None = None
    best_checkpoint: Checkpoint | None = None


def _clip_grads(params: Sequence[T.Tensor], max_norm: float) -> None:
    total = np.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params if p.grad is not None))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= scale


def train(cfg: RunConfig, train_examples: Sequence[ProcessedExample], vocab_size: int,
          dev_examples: Sequence[ProcessedExample] | None = None, out_dir: str | Path | None = None,
          model: MCRNet | None = None) -> TrainResult:
    """Minimize ``lambda1 * L_span + lambda2 * L_ans`` with Adam.

    Writes ``train_log.jsonl`` and the best-dev ``model.ckpt`` under
    ``out_dir`` when given. Stops after ``cfg.epochs`` or ``cfg.max_steps``.
    """
    model = model or build_model(cfg, vocab_size)
    params = model.parameters()
    opt = T.Adam(params, lr=cfg.lr)
    rng = T.make_rng(cfg.seed + 1)
    trainable = [ex for ex in train_examples if ex.trainable]
    if not trainable:
        raise ValueError("no trainable examples")
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / "config.txt")
        (out / "train_log.jsonl").write_text("", encoding="utf-8")
    result = TrainResult(model, 0)
    best_key = None
    epoch = 0
    while True:
        if cfg.max_steps <= 0 and epoch >= cfg.epochs:
            break
        if cfg.max_steps > 0 and result.steps >= cfg.max_steps:
            break
        t0 = time.perf_counter()
        sums = {"L_span": 0.0, "L_ans": 0.0, "L_joint": 0.0}
        seen = 0
        for batch in make_batches(trainable, cfg.batch_size, cfg.max_len, shuffle_seed=cfg.seed * 1000 + epoch):
            if cfg.max_steps > 0 and result.steps >= cfg.max_steps:
                break
            res = model.forward(batch, training=True, rng=rng)
            loss = model.loss(res, batch, cfg.lambda1, cfg.lambda2)
            parts = loss.as_floats()
            if not all(np.isfinite(v) for v in parts.values()):
                raise NonFiniteLossError(f"non-finite loss {parts} at step {result.steps} "
                                         f"(epoch {epoch}, batch ids {batch.ids[:4]}...)")
            opt.zero_grad()
            T.backward(loss.joint)
            if cfg.grad_clip > 0:
                _clip_grads(params, cfg.grad_clip)
            opt.step()
            result.steps += 1
            for k in sums:
                sums[k] += parts[k] * len(batch)
            seen += len(batch)
        entry = {"epoch": epoch, "step": result.steps, "seconds": round(time.perf_counter() - t0, 3)}
        entry.update({k: v / max(seen, 1) for k, v in sums.items()})
        ckpt = None
        if dev_examples:
            report, _ = evaluate_model(model, dev_examples, cfg)
            entry["dev"] = report.to_dict()
            key = (report.f1, report.em)
            if best_key is None or key > best_key:
                best_key = key
                result.best_dev = report
                ckpt = to_checkpoint(model, cfg, result.steps)
        else:
            ckpt = to_checkpoint(model, cfg, result.steps)
        if ckpt is not None:
            result.best_checkpoint = ckpt
            if out:
                save_checkpoint(ckpt, out / "model.ckpt")
        result.history.append(entry)
        log.info("epoch %d step %d L_joint %.4f", epoch, result.steps, entry["L_joint"])
        if out:
            with open(out / "train_log.jsonl", "a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
        epoch += 1
    return result
