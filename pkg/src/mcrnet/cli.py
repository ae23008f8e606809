"""Command-line entry points: synth, train, eval, predict, ablate, attn."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import load_checkpoint
from .config import RunConfig, load_config
from .data import (ProcessedExample, SyntheticSpec, generate_synthetic, load_squad_json, process_examples,
                   save_squad_json)
from .encoder import Vocab
from .metrics import EvalReport, threshold_sweep
from .model import MCRNet
from .training import (answerability_accuracy, evaluate_model, from_checkpoint, golds_from_processed,
                       predict, to_records, train)

log = logging.getLogger("mcrnet")

ABLATION_ROWS = [(2, "Complete Model"), (1, "- Relation Block"), (0, "- Stacked Relation Blocks")]

# flag name -> RunConfig key
_CONFIG_FLAGS = ["hidden", "layers", "heads", "max_len", "dropout", "steps", "lambda1", "lambda2",
                 "threshold", "max_answer_len", "lr", "batch_size", "epochs", "max_steps", "grad_clip",
                 "seed", "dtype", "init_std"]


# ---------------------------------------------------------------------------
# helpers


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    for key in _CONFIG_FLAGS:
        kind = type(getattr(RunConfig(), key))
        p.add_argument("--" + key.replace("_", "-"), dest=key, type=kind, default=None)
    p.add_argument("--share-weights", dest="share_weights", default=None,
                   type=lambda s: s.lower() in ("1", "true", "yes"))


def _resolve_config(args, **extra) -> RunConfig:
    overrides = {k: getattr(args, k, None) for k in _CONFIG_FLAGS + ["share_weights"]}
    overrides.update({k: v for k, v in extra.items() if v is not None})
    return load_config(args.config, overrides)


def _vocab_path(checkpoint: Path, explicit: str | None) -> Path:
    return Path(explicit) if explicit else checkpoint.with_name("vocab.txt")


def load_model(checkpoint: str, vocab: str | None = None) -> tuple[MCRNet, RunConfig, Vocab]:
    ckpt = load_checkpoint(checkpoint)
    voc = Vocab.load(_vocab_path(Path(checkpoint), vocab))
    if len(voc) != ckpt.vocab_size:
        raise ValueError(f"vocab has {len(voc)} entries, checkpoint expects {ckpt.vocab_size}")
    return from_checkpoint(ckpt), ckpt.config, voc


def load_processed(path: str, vocab: Vocab, max_len: int) -> list[ProcessedExample]:
    return process_examples(load_squad_json(path), vocab, max_len)


def build_vocab(paths: Sequence[str]) -> Vocab:
    texts = []
    for path in paths:
        for r in load_squad_json(path):
            texts += [r.question, r.passage]
    return Vocab.build(texts)


def echo_config(cfg: RunConfig, out: str | None) -> None:
    if out:
        cfg.save(Path(out).with_name(Path(out).stem + ".config.txt"))


def write_report(report: EvalReport, out: str | None) -> None:
    print(report.table())
    if out:
        Path(out).write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    spec = SyntheticSpec(n=args.n, unanswerable_frac=args.unanswerable_frac, vocab_size=args.vocab_size,
                         n_keys=args.keys, n_polarity_pairs=args.polarity_pairs, n_values=args.values,
                         seed=args.seed)
    examples = generate_synthetic(spec)
    save_squad_json(examples, args.out, title=f"synthetic-seed{args.seed}")
    n_unans = sum(e.is_impossible for e in examples)
    print(f"wrote {len(examples)} examples ({n_unans} unanswerable) to {args.out}")
    return 0


def run_training(cfg: RunConfig, out_dir: str | None, overfit: int = 0):
    vocab = build_vocab([cfg.train_path])
    train_set = load_processed(cfg.train_path, vocab, cfg.max_len)
    if overfit:
        train_set = [ex for ex in train_set if ex.trainable][:overfit]
    dev_set = load_processed(cfg.dev_path, vocab, cfg.max_len) if cfg.dev_path else None
    if out_dir:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        vocab.save(Path(out_dir) / "vocab.txt")
    result = train(cfg, train_set, len(vocab), dev_set, out_dir)
    return result, vocab, train_set, dev_set


def cmd_train(args) -> int:
    cfg = _resolve_config(args, train_path=args.train, dev_path=args.dev, out_dir=args.out_dir)
    if args.overfit:
        cfg = cfg.replace(dropout=0.0)
    result, _, train_set, _ = run_training(cfg, cfg.out_dir, args.overfit)
    for entry in result.history:
        dev = entry.get("dev")
        extra = f"  dev EM {dev['em']:.4f} F1 {dev['f1']:.4f}" if dev else ""
        print(f"epoch {entry['epoch']:>3} step {entry['step']:>6}  L_span {entry['L_span']:.4f}  "
              f"L_ans {entry['L_ans']:.4f}  L_joint {entry['L_joint']:.4f}{extra}")
    print(f"checkpoint: {Path(cfg.out_dir) / 'model.ckpt'}")
    return 0


def cmd_eval(args) -> int:
    model, cfg, vocab = load_model(args.checkpoint, args.vocab)
    examples = load_processed(args.gold, vocab, cfg.max_len)
    report, records = evaluate_model(model, examples, cfg, args.threshold)
    write_report(report, args.out)
    echo_config(cfg.replace(threshold=report.threshold), args.out)
    print(f"{'answerability acc':<10} {100 * answerability_accuracy(records, examples, report.threshold):.2f}")
    if args.sweep:
        thresholds = [float(t) for t in args.sweep.split(",")]
        print("threshold  P       R       F1")
        for t, p, r, f in threshold_sweep(records, golds_from_processed(examples), thresholds):
            print(f"{t:<9.3f}  {p:.4f}  {r:.4f}  {f:.4f}")
    return 0


def cmd_predict(args) -> int:
    model, cfg, vocab = load_model(args.checkpoint, args.vocab)
    examples = load_processed(args.data, vocab, cfg.max_len)
    thr = cfg.threshold if args.threshold is None else args.threshold
    records = to_records(examples, predict(model, examples, thr, cfg.max_answer_len))
    with open(args.out, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), ensure_ascii=False) + "\n")
    echo_config(cfg.replace(threshold=thr), args.out)
    print(f"wrote {len(records)} predictions to {args.out}")
    return 0


def run_ablation(cfg: RunConfig, out_dir: str | None) -> list[dict]:
    if not cfg.dev_path:
        raise ValueError("ablation needs a dev set (--dev)")
    rows = []
    for steps, label in ABLATION_ROWS:
        sub = cfg.replace(steps=steps)
        run_dir = str(Path(out_dir) / f"steps{steps}") if out_dir else None
        result, _, _, dev_set = run_training(sub, run_dir)
        report, records = evaluate_model(result.model, dev_set, sub)
        rows.append({"model": label, "steps": steps, **report.to_dict(),
                     "answerability_acc": answerability_accuracy(records, dev_set, sub.threshold)})
    base = rows[0]["em"]
    for row in rows:
        row["delta_em"] = row["em"] - base
    return rows


def ablation_table(rows: list[dict]) -> str:
    lines = [f"{'Model':<28}{'steps':>6}{'EM':>8}{'Delta':>8}{'F1':>8}{'R-L':>8}{'Unans R':>9}"]
    for r in rows:
        delta = "-" if r["steps"] == ABLATION_ROWS[0][0] else f"{100 * r['delta_em']:+.2f}"
        lines.append(f"{r['model']:<28}{r['steps']:>6}{100 * r['em']:>8.2f}{delta:>8}"
                     f"{100 * r['f1']:>8.2f}{100 * r['rouge_l']:>8.2f}{100 * r['unans_recall']:>9.2f}")
    return "\n".join(lines)


def cmd_ablate(args) -> int:
    cfg = _resolve_config(args, train_path=args.train, dev_path=args.dev, out_dir=args.out_dir)
    rows = run_ablation(cfg, cfg.out_dir)
    table = ablation_table(rows)
    print(table)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(json.dumps(rows, indent=1) + "\n", encoding="utf-8")
    (out / "ablation.txt").write_text(table + "\n", encoding="utf-8")
    return 0


def attention_dump(model: MCRNet, examples: Sequence[ProcessedExample], cfg: RunConfig) -> dict:
    if model.config.steps < 1:
        raise ValueError("attention traces need steps >= 1; a steps=0 model has no relation blocks")
    preds = predict(model, examples, cfg.threshold, cfg.max_answer_len)
    records = to_records(examples, preds)
    out = []
    for ex, pred, rec in zip(examples, preds, records):
        tokens = ex.joint_tokens
        steps = []
        for j, (alpha, beta) in enumerate(pred.traces, 1):
            if len(alpha) != len(tokens) or abs(alpha.sum() - 1) > 1e-6 or abs(beta.sum() - 1) > 1e-6:
                raise AssertionError(f"{ex.id}: invalid trace at step {j}")
            steps.append({"step": j, "alpha": alpha.tolist(), "beta": beta.tolist()})
        out.append({"id": ex.id, "tokens": tokens, "steps": steps, "prediction": rec.to_json()})
    return {"steps": model.config.steps, "examples": out}


def write_pgm(path: Path, rows: np.ndarray, cell: int = 8) -> None:
    """Plain (P2) graymap; each matrix entry becomes a ``cell`` x ``cell`` block, darker = more mass."""
    top = rows.max() or 1.0
    levels = np.round(255 * (1 - rows / top)).astype(int)
    img = np.kron(levels, np.ones((cell, cell), dtype=int))
    h, w = img.shape
    body = "\n".join(" ".join(map(str, r)) for r in img)
    path.write_text(f"P2\n{w} {h}\n255\n{body}\n", encoding="ascii")


def cmd_attn(args) -> int:
    model, cfg, vocab = load_model(args.checkpoint, args.vocab)
    examples = load_processed(args.data, vocab, cfg.max_len)
    if args.limit:
        examples = examples[:args.limit]
    dump = attention_dump(model, examples, cfg)
    Path(args.out).write_text(json.dumps(dump, ensure_ascii=False) + "\n", encoding="utf-8")
    echo_config(cfg, args.out)
    if args.pgm_dir:
        d = Path(args.pgm_dir)
        d.mkdir(parents=True, exist_ok=True)
        for ex in dump["examples"]:
            for st in ex["steps"]:
                safe = "".join(c if c.isalnum() or c in "-_" else "_" for c in ex["id"])
                write_pgm(d / f"{safe}_step{st['step']}.pgm", np.array([st["alpha"], st["beta"]]))
    print(f"wrote attention traces for {len(dump['examples'])} examples to {args.out}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mcrnet", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic SQuAD-format dataset")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--unanswerable-frac", type=float, default=0.33)
    p.add_argument("--vocab-size", type=int, default=200)
    p.add_argument("--keys", type=int, default=12)
    p.add_argument("--polarity-pairs", type=int, default=4)
    p.add_argument("--values", type=int, default=40)
    p.add_argument("--seed", type=int, default=RunConfig().seed)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train and save the best-dev checkpoint")
    _add_config_flags(p)
    p.add_argument("--train")
    p.add_argument("--dev")
    p.add_argument("--out-dir")
    p.add_argument("--overfit", type=int, default=0, help="train on the first N examples, dropout off")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on SQuAD-format gold data")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--gold", required=True)
    p.add_argument("--vocab")
    p.add_argument("--threshold", type=float)
    p.add_argument("--sweep", help="comma-separated thresholds for a P/R/F1 sweep")
    p.add_argument("--out", help="write the report as JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write JSON-lines predictions")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--vocab")
    p.add_argument("--threshold", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("ablate", help="train/evaluate with 2, 1 and 0 relation blocks")
    _add_config_flags(p)
    p.add_argument("--train")
    p.add_argument("--dev")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("attn", help="dump per-step start/end attention traces")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--vocab")
    p.add_argument("--out", required=True)
    p.add_argument("--limit", type=int, default=0)
    p.add_argument("--pgm-dir", help="also write one grayscale image per example and step")
    p.set_defaults(func=cmd_attn)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, FloatingPointError) as exc:
        print(f"mcrnet {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
